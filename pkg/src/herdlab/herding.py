"""
The generative herding model: initial-opinion formation, the biased rating
probability mass function, seeded simulation, and misbehavior injection.
"""

__all__ = [
    "HerdingParams",
    "MisbehaviorSpec",
    "SequenceSpec",
    "convergence_trace",
    "initial_opinion",
    "next_rating_pmf",
    "simulate",
    "simulate_batch",
]

import logging
import re
from collections.abc import Sequence

import equinox as eqx
import jax
import jax.numpy as jnp
import numpy as np
from jax.typing import ArrayLike

from ._typing import Level
from .core import (
    OpinionDistribution,
    RatingSequence,
    WeightRule,
    _aggregate_probs,
    _step,
)
from .exceptions import DomainError
from .utils import check_seed, prng_key

logger = logging.getLogger(__name__)

_NUMBER = r"[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?"
_SEQUENCE_RE = re.compile(
    rf"^(?:(?P<a>{_NUMBER})\s*\*\s*\(\s*1\s*-\s*1\s*/\s*i\s*\))?"
    rf"\s*(?:(?P<sign>[-+])?\s*(?P<b>{_NUMBER}))?$"
)


class SequenceSpec(eqx.Module):
    """
    A per-index sequence x_i = a * (1 - 1/i) + b for i = 1, 2, ...

    With ``a = 0`` this is the constant sequence b; ``a = 0.8, b = 0`` gives the
    increasing herding strength 0.8 (1 - 1/i). The sequence is monotone in i, so its
    range is the interval between ``b`` (at i = 1) and ``a + b`` (the limit).
    """

    a: float = eqx.field(static=True, default=0.0)
    b: float = eqx.field(static=True, default=0.0)

    def __post_init__(self):
        self.a = float(self.a)
        self.b = float(self.b)
        if not (np.isfinite(self.a) and np.isfinite(self.b)):
            msg = "Sequence coefficients must be finite"
            raise ValueError(msg)

    @classmethod
    def constant(cls, value: float) -> "SequenceSpec":
        return cls(0.0, float(value))

    @classmethod
    def parse(cls, text: "str | float | SequenceSpec") -> "SequenceSpec":
        """
        Parse ``"0.4"``, ``"0.8*(1-1/i)"``, or ``"0.6*(1-1/i)+0.1"`` (whitespace is
        ignored). Numbers and existing specs pass through.
        """
        if isinstance(text, SequenceSpec):
            return text
        if isinstance(text, int | float):
            return cls.constant(text)

        match = _SEQUENCE_RE.match(text.replace(" ", ""))
        if match is None or (match["a"] is None and match["b"] is None):
            msg = (
                f"Cannot parse sequence '{text}'; expected a constant or the form "
                "'a*(1-1/i)' optionally followed by '+b'"
            )
            raise ValueError(msg)

        a = float(match["a"]) if match["a"] is not None else 0.0
        b = float(match["b"]) if match["b"] is not None else 0.0
        if match["sign"] == "-":
            b = -b
        elif match["a"] is not None and match["b"] is not None and match["sign"] is None:
            msg = f"Cannot parse sequence '{text}': missing '+' before the constant"
            raise ValueError(msg)
        return cls(a, b)

    @property
    def infimum(self) -> float:
        return min(self.b, self.a + self.b)

    @property
    def supremum(self) -> float:
        return max(self.b, self.a + self.b)

    @property
    def is_constant(self) -> bool:
        return self.a == 0.0

    def evaluate(self, n: int) -> jax.Array:
        """Values x_1, ..., x_n."""
        i = jnp.arange(1, n + 1, dtype=float)
        return self.a * (1.0 - 1.0 / i) + self.b

    def __str__(self) -> str:
        if self.is_constant:
            return f"{self.b:g}"
        if self.b == 0.0:
            return f"{self.a:g}*(1-1/i)"
        return f"{self.a:g}*(1-1/i){self.b:+g}"


class HerdingParams(eqx.Module):
    """
    The full generative model: ground truth alpha, herding strengths gamma_i, review
    selection accuracies eta_i, and the aggregation weight rule.

    Parameters
    ----------
    alpha
        The ground-truth collective opinion.
    gamma
        Herding strength sequence (a constant or a :class:`SequenceSpec`). Values
        must lie in [0, 1] and, unless ``allow_full_herding`` is set, their supremum
        must be strictly below 1.
    eta
        Review selection accuracy sequence, values in [0, 1].
    rule
        The aggregation weight rule.
    allow_full_herding
        Permit gamma_i = 1 (users purely follow the displayed opinion). The
        convergence guarantees do not apply in that case, so this is logged.
    """

    alpha: OpinionDistribution
    gamma: SequenceSpec
    eta: SequenceSpec
    rule: WeightRule
    allow_full_herding: bool = eqx.field(static=True, default=False)

    def __post_init__(self):
        self.gamma = SequenceSpec.parse(self.gamma)
        self.eta = SequenceSpec.parse(self.eta)

        if self.gamma.infimum < 0 or self.gamma.supremum > 1:
            msg = f"Herding strengths must lie in [0, 1], got gamma_i = {self.gamma}"
            raise DomainError(msg)

        if self.gamma.supremum >= 1:
            if not self.allow_full_herding:
                msg = (
                    f"The supremum of gamma_i must be < 1, got gamma_i = {self.gamma}; "
                    "pass allow_full_herding=True to simulate this case anyway"
                )
                raise DomainError(msg)
            logger.warning(
                "Herding strength reaches 1 (gamma_i = %s): ratings may lock onto the "
                "displayed opinion and need not converge",
                self.gamma,
            )

        if self.eta.infimum < 0 or self.eta.supremum > 1:
            msg = f"Review selection accuracies must lie in [0, 1], got eta_i = {self.eta}"
            raise DomainError(msg)

    @property
    def scale(self):
        return self.alpha.scale

    @property
    def gamma_tilde(self) -> float:
        """The identifiable effective herding strength (1 - eta) gamma, for constants."""
        if not (self.gamma.is_constant and self.eta.is_constant):
            msg = "The effective herding strength is only defined for constant gamma, eta"
            raise ValueError(msg)
        return (1.0 - self.eta.b) * self.gamma.b


class MisbehaviorSpec(eqx.Module):
    """
    A (k, m̃, I)-misbehavior: k injected ratings of level ``m_tilde`` at the 1-based
    rating positions ``indices`` (strictly increasing).
    """

    m_tilde: Level = eqx.field(static=True)
    indices: tuple[int, ...] = eqx.field(static=True, default=())

    def __post_init__(self):
        self.indices = tuple(int(i) for i in self.indices)
        self.m_tilde = int(self.m_tilde)

        if any(i < 1 for i in self.indices):
            msg = "Misbehavior indices are 1-based rating positions"
            raise ValueError(msg)

        if any(b <= a for a, b in zip(self.indices, self.indices[1:], strict=False)):
            msg = f"Misbehavior indices must be strictly increasing, got {self.indices}"
            raise ValueError(msg)

        if self.m_tilde < 1:
            msg = f"Injected rating level must be >= 1, got {self.m_tilde}"
            raise DomainError(msg)

    @classmethod
    def parse(cls, text: str) -> "MisbehaviorSpec":
        """
        Parse ``"k,m,indices"`` where indices is either a ``;``-separated list or a
        ``start-stop`` range, e.g. ``"2,5,4;5"`` or ``"50,5,51-100"``.
        """
        try:
            k_text, m_text, idx_text = (s.strip() for s in text.split(",", 2))
            if "-" in idx_text:
                start, stop = (int(s) for s in idx_text.split("-"))
                indices = tuple(range(start, stop + 1))
            else:
                indices = tuple(int(s) for s in idx_text.split(";") if s.strip())
            k = int(k_text)
            m_tilde = int(m_text)
        except ValueError as e:
            msg = f"Cannot parse misbehavior '{text}'; expected 'k,m,indices'"
            raise ValueError(msg) from e

        if k != len(indices):
            msg = f"Misbehavior count k={k} does not match {len(indices)} indices"
            raise ValueError(msg)
        return cls(m_tilde, indices)

    @classmethod
    def none(cls, m_tilde: Level = 1) -> "MisbehaviorSpec":
        return cls(m_tilde, ())

    @property
    def k(self) -> int:
        return len(self.indices)

    @property
    def last_index(self) -> int:
        """i_k, the position of the last injected rating (0 when k = 0)."""
        return self.indices[-1] if self.indices else 0

    def mask(self, n: int) -> np.ndarray:
        """Boolean mask over positions 1..n marking injected ratings."""
        if self.last_index > n:
            msg = (
                f"Misbehavior index {self.last_index} is beyond the sequence length {n}"
            )
            raise ValueError(msg)
        mask = np.zeros(n, dtype=bool)
        mask[np.asarray(self.indices, dtype=int) - 1] = True
        return mask


def initial_opinion(
    beta_i: OpinionDistribution, alpha: OpinionDistribution, eta_i: float
) -> OpinionDistribution:
    """
    The initial collective opinion theta_i = (1 - eta_i) beta_i + eta_i alpha that a
    new user forms from the displayed ratings and the shortlisted reviews.
    """
    if beta_i.M != alpha.M:
        msg = "beta_i and alpha must be on the same rating scale"
        raise ValueError(msg)
    if not 0.0 <= eta_i <= 1.0:
        msg = f"eta_i must lie in [0, 1], got {eta_i}"
        raise DomainError(msg)
    return OpinionDistribution((1.0 - eta_i) * beta_i.p + eta_i * alpha.p, alpha.scale)


def next_rating_pmf(
    theta_prev: OpinionDistribution, alpha: OpinionDistribution, gamma_prev: float
) -> OpinionDistribution:
    """
    P[R_i = m | H_{i-1}] = gamma_{i-1} theta_{i-1,m} + (1 - gamma_{i-1}) alpha_m.
    """
    if theta_prev.M != alpha.M:
        msg = "theta and alpha must be on the same rating scale"
        raise ValueError(msg)
    if not 0.0 <= gamma_prev <= 1.0:
        msg = f"gamma must lie in [0, 1], got {gamma_prev}"
        raise DomainError(msg)
    return OpinionDistribution(
        gamma_prev * theta_prev.p + (1.0 - gamma_prev) * alpha.p, alpha.scale
    )


def _draw_level(pmf: jax.Array, u: jax.Array) -> jax.Array:
    """Inverse-CDF draw of a 0-based level from one uniform variate in [0, 1)."""
    cdf = jnp.cumsum(pmf)
    return jnp.minimum(jnp.searchsorted(cdf, u, side="right"), pmf.shape[0] - 1)


@jax.jit
def _simulate_kernel(
    key: jax.Array,
    alpha: jax.Array,
    w_tilde: jax.Array,
    gamma_prev: jax.Array,
    eta: jax.Array,
    forced: jax.Array,
    m_tilde0: jax.Array,
) -> jax.Array:
    n = w_tilde.shape[0]
    # Draw i only depends on (seed, i), so shorter runs are prefixes of longer ones.
    u = jax.vmap(lambda i: jax.random.uniform(jax.random.fold_in(key, i)))(
        jnp.arange(1, n + 1)
    )

    def body(carry, xs):
        beta, theta = carry
        u_i, wt_i, g_prev, eta_i, forced_i = xs
        pmf = g_prev * theta + (1.0 - g_prev) * alpha
        level0 = jnp.where(forced_i, m_tilde0, _draw_level(pmf, u_i))
        beta = _step(beta, level0, wt_i)
        theta = (1.0 - eta_i) * beta + eta_i * alpha
        return (beta, theta), level0

    # theta_0 = alpha; beta_0 is a placeholder that w̃_1 = 1 overwrites.
    _, levels0 = jax.lax.scan(body, (alpha, alpha), (u, w_tilde, gamma_prev, eta, forced))
    return levels0 + 1


def _kernel_inputs(
    params: HerdingParams, n: int, misbehavior: MisbehaviorSpec | None
) -> tuple[jax.Array, ...]:
    if n < 1:
        msg = f"Simulations need at least one rating, got n={n}"
        raise ValueError(msg)

    misbehavior = misbehavior if misbehavior is not None else MisbehaviorSpec.none()
    if misbehavior.k:
        params.scale.check_level(misbehavior.m_tilde)
    forced = misbehavior.mask(n)

    gamma = params.gamma.evaluate(n)
    gamma_prev = jnp.concatenate((jnp.zeros(1), gamma[:-1]))
    return (
        params.alpha.p,
        params.rule.normalized(n),
        gamma_prev,
        params.eta.evaluate(n),
        jnp.asarray(forced),
        jnp.asarray(misbehavior.m_tilde - 1),
    )


def simulate(
    params: HerdingParams,
    n: int,
    seed: int,
    misbehavior: MisbehaviorSpec | None = None,
) -> RatingSequence:
    """
    Simulate n ratings of one item under the herding model.

    Rating i is drawn by inverse-CDF sampling from ``next_rating_pmf(theta_{i-1},
    alpha, gamma_{i-1})`` with theta_0 = alpha, unless position i is in the
    misbehavior index set, in which case it is forced to m̃ and flagged. Injected
    ratings enter the public history exactly like honest ones.

    The uniform variate for rating i comes from JAX's counter-based Threefry-2x32
    generator keyed by ``fold_in(PRNGKey(seed), i)``, so results are bit-identical
    across runs and platforms, and a run of length n is a prefix of any longer run
    with the same seed.

    Parameters
    ----------
    params
        The herding model parameters.
    n
        Number of ratings to generate.
    seed
        Integer seed for the generator.
    misbehavior (optional)
        Injected ratings; all indices must be <= n.
    """
    inputs = _kernel_inputs(params, n, misbehavior)
    levels = _simulate_kernel(prng_key(check_seed(seed)), *inputs)
    return RatingSequence(params.scale, levels, misbehavior_flags=inputs[4])


def simulate_batch(
    params: HerdingParams,
    n: int,
    seeds: ArrayLike | Sequence[int],
    misbehavior: MisbehaviorSpec | None = None,
) -> jax.Array:
    """
    Simulate one rating sequence per seed, vectorized over seeds.

    Row s is identical to ``simulate(params, n, seeds[s], misbehavior).ratings``.

    Returns
    -------
    levels
        Integer array of shape (len(seeds), n) with levels in 1..M.
    """
    inputs = _kernel_inputs(params, n, misbehavior)
    seeds = jnp.asarray([check_seed(s) for s in np.ravel(seeds)], dtype=jnp.uint64)
    keys = jax.vmap(prng_key)(seeds)
    return jax.vmap(_simulate_kernel, in_axes=(0, *([None] * len(inputs))))(
        keys, *inputs
    )


def _opinions_at(levels: jax.Array, log_w: jax.Array, M: int, i: int) -> jax.Array:
    """beta_i for each row of an (S, n) array of levels."""
    return jax.vmap(lambda lv: _aggregate_probs(lv[:i] - 1, log_w[:i], M))(levels)


def convergence_trace(
    params: HerdingParams,
    checkpoints: Sequence[int],
    seeds: ArrayLike | Sequence[int],
    misbehavior: MisbehaviorSpec | None = None,
) -> jax.Array:
    """
    L1 distance between the historical collective opinion and the ground truth at a
    set of checkpoints, for each seed.

    Returns
    -------
    distances
        Array of shape (len(seeds), len(checkpoints)); entry (s, k) is
        ``||beta_{checkpoints[k]} - alpha||_1`` for seed ``seeds[s]``.
    """
    checkpoints = [int(i) for i in checkpoints]
    n = max(checkpoints)
    levels = simulate_batch(params, n, seeds, misbehavior)
    log_w = params.rule.log_weights(n)
    M = params.scale.M

    cols = []
    for i in checkpoints:
        betas = _opinions_at(levels, log_w, M, i)
        cols.append(jnp.abs(betas - params.alpha.p).sum(axis=-1))
    return jnp.stack(cols, axis=-1)
