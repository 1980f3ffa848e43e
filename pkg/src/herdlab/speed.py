"""
Closed-form convergence-speed metrics for the historical collective opinion.

For ratings generated by the herding model, the deviation of each entry of beta_i
from the ground truth obeys ``P[|beta_{i,m} - alpha_m| > eps] <= 2 exp(-phi_i eps^2)``
where

    varphi_j = prod_{l=1..j} [1 - w̃_{l+1} (1 - (1 - eta_l) gamma_l)],  varphi_0 = 1
    phi_i = 2 / (varphi_{i-1}^2 sum_{j=1..i} w̃_j^2 / varphi_{j-1}^2)

All products and sums are evaluated in log space: varphi_j decays roughly like 1/j
and its square underflows quickly.
"""

__all__ = [
    "SpeedCurve",
    "empirical_exceedance",
    "min_ratings_average",
    "min_ratings_majority",
    "phi",
    "phi_inverse",
    "phi_misbehavior",
    "speed_curve",
    "tail_bound",
    "varphi",
]

import logging
import math
import os
from collections.abc import Sequence

import equinox as eqx
import jax
import jax.numpy as jnp
import numpy as np
import pandas as pd

from .core import OpinionDistribution
from .exceptions import DegenerateRuleError, DomainError, HorizonNotReachedError
from .herding import HerdingParams, MisbehaviorSpec, _opinions_at, simulate_batch

logger = logging.getLogger(__name__)

DEFAULT_HORIZON = 1_000_000

# phi_i within this relative distance below a threshold counts as reaching it:
PHI_RTOL = 1e-10

_LOG2 = math.log(2.0)


def _log_varphi(params: HerdingParams, j_max: int) -> jax.Array:
    """ln varphi_0, ..., ln varphi_{j_max}. Needs w̃ up to index j_max + 1."""
    log_wt, log_1m = params.rule.log_normalized(j_max + 1)
    gamma_tilde = (1.0 - params.eta.evaluate(j_max)) * params.gamma.evaluate(j_max)

    # factor l = (1 - w̃_{l+1}) + w̃_{l+1} gamma_tilde_l, for l = 1..j_max
    log_factor = jnp.logaddexp(log_1m[1:], log_wt[1:] + jnp.log(gamma_tilde))
    bad = np.flatnonzero(~np.isfinite(np.asarray(log_factor)))
    if bad.size:
        msg = (
            f"The convergence-rate product is degenerate: factor {int(bad[0]) + 1} "
            "is not positive (w̃ reaches 1 with no herding)"
        )
        raise DegenerateRuleError(msg)

    return jnp.concatenate((jnp.zeros(1), jnp.cumsum(log_factor)))


def _phi_array(
    params: HerdingParams,
    n: int,
    misbehavior: MisbehaviorSpec | None = None,
    epsilon: float | None = None,
) -> tuple[jax.Array, jax.Array]:
    """
    phi_1, ..., phi_n (or the misbehavior-degraded values when a spec is given),
    together with ln varphi_0, ..., ln varphi_{n-1}.
    """
    if n < 1:
        msg = f"Rating indices start at 1, got n={n}"
        raise ValueError(msg)

    log_varphi = _log_varphi(params, n - 1)
    log_wt, _ = params.rule.log_normalized(n)
    i = jnp.arange(1, n + 1)

    i_k = misbehavior.last_index if misbehavior is not None else 0
    if i_k >= n:
        return jnp.zeros(n), log_varphi

    # the sum only runs over indices after the last injected rating
    terms = jnp.where(i > i_k, 2 * log_wt - 2 * log_varphi, -jnp.inf)
    log_sum = jax.lax.cumlogsumexp(terms)
    log_phi = _LOG2 - 2 * log_varphi - log_sum

    if i_k > 0:
        # r = varphi_{i-1} / (eps varphi_{i_k - 1}); with i_k = 0, varphi_{-1} is
        # infinite and r = 0, which reduces to phi_i exactly.
        log_r = log_varphi - math.log(epsilon) - log_varphi[i_k - 1]
        r = jnp.exp(log_r)
        log_num = jnp.where(r < 1.0, 2 * jnp.log1p(-jnp.minimum(r, 1.0)), -jnp.inf)
        log_phi = log_phi + log_num

    return jnp.where(i > i_k, jnp.exp(log_phi), 0.0), log_varphi


def _check_epsilon(epsilon: float) -> float:
    if not 0.0 < epsilon <= 1.0:
        msg = f"The estimation error epsilon must lie in (0, 1], got {epsilon}"
        raise DomainError(msg)
    return float(epsilon)


def _check_index(i: int) -> int:
    if int(i) != i or i < 1:
        msg = f"Rating indices start at 1, got i={i}"
        raise ValueError(msg)
    return int(i)


def varphi(params: HerdingParams, j: int) -> float:
    """
    The product varphi_j; varphi_0 = 1.

    Raises
    ------
    DegenerateRuleError
        If a factor of the product is not positive.
    """
    if int(j) != j or j < 0:
        msg = f"varphi is defined for j >= 0, got j={j}"
        raise ValueError(msg)
    return float(jnp.exp(_log_varphi(params, int(j))[-1]))


def phi(params: HerdingParams, i: int) -> float:
    """
    The convergence-speed metric phi_i; larger values mean faster convergence.

    With the unweighted rule and no herding (gamma = eta = 0) this is 2i, the
    Chernoff exponent for i.i.d. ratings.
    """
    i = _check_index(i)
    return float(_phi_array(params, i)[0][-1])


def tail_bound(params: HerdingParams, i: int, epsilon: float) -> float:
    """``min(1, 2 exp(-phi_i eps^2))``, the bound on P[|beta_{i,m} - alpha_m| > eps]."""
    epsilon = _check_epsilon(epsilon)
    return min(1.0, 2.0 * math.exp(-phi(params, i) * epsilon**2))


def phi_misbehavior(
    params: HerdingParams, i: int, spec: MisbehaviorSpec, epsilon: float
) -> float:
    """
    The convergence-speed metric under a (k, m̃, I)-misbehavior.

    It is zero up to and including the last injected position i_k. Afterwards the
    sum in phi_i only runs over j > i_k and the metric is scaled by
    ``(1 - varphi_{i-1} / (eps varphi_{i_k - 1}))^2`` while that ratio is at most 1
    (and is zero otherwise). With no injected ratings it equals :func:`phi`, and it
    never exceeds it.

    Parameters
    ----------
    params
        The herding model parameters.
    i
        The rating index.
    spec
        The injected ratings; only the last position i_k matters.
    epsilon
        The estimation error, in (0, 1].
    """
    i = _check_index(i)
    epsilon = _check_epsilon(epsilon)
    return float(_phi_array(params, i, spec, epsilon)[0][-1])


def phi_inverse(
    params: HerdingParams,
    x: float,
    horizon: int = DEFAULT_HORIZON,
    misbehavior: MisbehaviorSpec | None = None,
    epsilon: float | None = None,
) -> int:
    """
    The smallest rating index i <= horizon with phi_i >= x.

    phi_i is computed once up to the horizon. When the values are non-decreasing
    (the usual case) the index is found by binary search, otherwise by a linear scan.

    Parameters
    ----------
    params
        The herding model parameters.
    x
        The threshold, ``x > 0``.
    horizon
        The largest index searched.
    misbehavior (optional)
        Search the misbehavior-degraded metric instead; ``epsilon`` is then required.
    epsilon (optional)
        The estimation error used with ``misbehavior``.

    A custom weight rule caps the horizon at its length.

    Raises
    ------
    HorizonNotReachedError
        If phi_i < x for every i <= horizon.
    """
    if not (x > 0 and math.isfinite(x)):
        msg = f"The threshold must be a positive finite number, got {x}"
        raise DomainError(msg)
    horizon = _check_index(horizon)
    max_index = params.rule.max_index
    if max_index is not None and horizon > max_index:
        logger.info(
            "Custom weight sequence is shorter than the horizon, searching up to %d",
            max_index,
        )
        horizon = max_index
    if misbehavior is not None:
        if epsilon is None:
            msg = "Searching the misbehavior metric needs an estimation error epsilon"
            raise ValueError(msg)
        epsilon = _check_epsilon(epsilon)

    curve = np.asarray(_phi_array(params, horizon, misbehavior, epsilon)[0])
    target = x * (1.0 - PHI_RTOL)

    if np.all(np.diff(curve) >= 0):
        idx = int(np.searchsorted(curve, target, side="left"))
    else:
        logger.debug("phi_i is not monotone up to %d, scanning linearly", horizon)
        hits = np.flatnonzero(curve >= target)
        idx = int(hits[0]) if hits.size else horizon

    if idx >= horizon:
        msg = (
            f"No rating index up to {horizon} reaches phi_i >= {x:.6g} "
            f"(largest value {curve.max():.6g})"
        )
        raise HorizonNotReachedError(msg, threshold=x, horizon=horizon)
    return idx + 1


def _check_delta(delta: float) -> float:
    if not 0.0 < delta < 1.0:
        msg = f"The failure probability delta must lie in (0, 1), got {delta}"
        raise DomainError(msg)
    return float(delta)


def min_ratings_average(
    params: HerdingParams,
    epsilon: float,
    delta: float,
    horizon: int = DEFAULT_HORIZON,
) -> int:
    """
    Number of ratings after which the average score of beta_i is within epsilon of
    the ground-truth average score with probability at least 1 - delta:
    ``phi_inverse(M^2 (M+1)^2 / (4 eps^2) ln(2M / delta))``.
    """
    epsilon = _check_epsilon(epsilon)
    delta = _check_delta(delta)
    M = params.scale.M
    threshold = M**2 * (M + 1) ** 2 / (4 * epsilon**2) * math.log(2 * M / delta)
    return phi_inverse(params, threshold, horizon)


def min_ratings_majority(
    params: HerdingParams,
    alpha: OpinionDistribution,
    delta: float,
    horizon: int = DEFAULT_HORIZON,
) -> int:
    """
    Number of ratings after which the majority level of beta_i equals that of alpha
    with probability at least 1 - delta:
    ``phi_inverse(M^2 (M+1)^2 / gap^2 ln(2M / delta))`` where gap is the difference
    between the largest and second largest entries of alpha.

    Raises
    ------
    DegenerateRuleError
        If alpha has no unique majority level.
    """
    delta = _check_delta(delta)
    if alpha.M != params.scale.M:
        msg = "alpha must be on the same rating scale as the model"
        raise ValueError(msg)

    top, second = np.sort(np.asarray(alpha.p))[::-1][:2]
    gap = float(top - second)
    if gap <= 0:
        msg = "alpha has no unique majority level (the top two entries are equal)"
        raise DegenerateRuleError(msg)

    M = params.scale.M
    threshold = M**2 * (M + 1) ** 2 / gap**2 * math.log(2 * M / delta)
    return phi_inverse(params, threshold, horizon)


class SpeedCurve(eqx.Module):
    """
    phi_1, ..., phi_n for one parameter set, with ln varphi_0, ..., ln varphi_{n-1}.

    Row i of the CSV form holds ``(i, phi_i, ln varphi_{i-1})``.
    """

    phi: jax.Array
    log_varphi: jax.Array
    params: HerdingParams | None = None

    def __post_init__(self):
        self.phi = jnp.asarray(self.phi, dtype=float)
        self.log_varphi = jnp.asarray(self.log_varphi, dtype=float)
        if self.phi.ndim != 1 or self.phi.shape != self.log_varphi.shape:
            msg = "phi and log_varphi must be 1D arrays of the same length"
            raise ValueError(msg)

    @property
    def i(self) -> jax.Array:
        return jnp.arange(1, self.phi.shape[0] + 1)

    @property
    def horizon(self) -> int:
        return int(self.phi.shape[0])

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "i": np.asarray(self.i),
                "phi": np.asarray(self.phi),
                "log_varphi": np.asarray(self.log_varphi),
            }
        )

    def to_csv(self, path: str | os.PathLike) -> None:
        self.to_frame().to_csv(path, index=False, float_format="%.17g")

    @classmethod
    def from_csv(cls, path: str | os.PathLike) -> "SpeedCurve":
        df = pd.read_csv(path)
        missing = {"i", "phi", "log_varphi"} - set(df.columns)
        if missing:
            msg = f"Speed curve file {path} is missing columns {sorted(missing)}"
            raise ValueError(msg)

        df = df.sort_values("i")
        if not np.array_equal(df["i"].to_numpy(), np.arange(1, len(df) + 1)):
            msg = f"Speed curve file {path} must list every index 1..n"
            raise ValueError(msg)
        return cls(df["phi"].to_numpy(), df["log_varphi"].to_numpy())


def speed_curve(
    params: HerdingParams,
    horizon: int,
    misbehavior: MisbehaviorSpec | None = None,
    epsilon: float | None = None,
) -> SpeedCurve:
    """Evaluate phi_i (or its misbehavior form) for i = 1..horizon."""
    horizon = _check_index(horizon)
    if misbehavior is not None:
        if epsilon is None:
            msg = "A misbehavior speed curve needs an estimation error epsilon"
            raise ValueError(msg)
        epsilon = _check_epsilon(epsilon)
    values, log_varphi = _phi_array(params, horizon, misbehavior, epsilon)
    return SpeedCurve(values, log_varphi, params)


def empirical_exceedance(
    params: HerdingParams,
    i_values: Sequence[int],
    epsilons: Sequence[float],
    n_seeds: int,
    seed: int = 0,
    misbehavior: MisbehaviorSpec | None = None,
    chunk_size: int = 1000,
) -> pd.DataFrame:
    """
    Monte Carlo frequency of ``|beta_{i,m} - alpha_m| > eps`` next to the tail bound.

    Simulations use seeds ``seed, seed + 1, ..., seed + n_seeds - 1`` and are run in
    vectorized chunks.

    Returns
    -------
    table
        One row per (i, epsilon, level) with columns ``i``, ``epsilon``, ``level``,
        ``frequency``, ``std_error`` (binomial), and ``tail_bound``.
    """
    i_values = [_check_index(i) for i in i_values]
    epsilons = [_check_epsilon(e) for e in epsilons]
    if n_seeds < 1:
        msg = f"Need at least one seed, got n_seeds={n_seeds}"
        raise ValueError(msg)

    n = max(i_values)
    M = params.scale.M
    log_w = params.rule.log_weights(n)
    eps = jnp.asarray(epsilons)
    counts = np.zeros((len(i_values), len(epsilons), M))

    for start in range(0, n_seeds, chunk_size):
        seeds = np.arange(start, min(start + chunk_size, n_seeds)) + seed
        levels = simulate_batch(params, n, seeds, misbehavior)
        for k, i in enumerate(i_values):
            dev = jnp.abs(_opinions_at(levels, log_w, M, i) - params.alpha.p)
            counts[k] += np.asarray((dev[:, None, :] > eps[None, :, None]).sum(axis=0))
        logger.debug("Simulated %d of %d seeds", seeds[-1] - seed + 1, n_seeds)

    freq = counts / n_seeds
    if misbehavior is None:
        phis = np.asarray(_phi_array(params, n)[0])

    rows = []
    for k, i in enumerate(i_values):
        for e, epsilon in enumerate(epsilons):
            if misbehavior is None:
                rate = phis[i - 1]
            else:
                rate = phi_misbehavior(params, i, misbehavior, epsilon)
            bound = min(1.0, 2.0 * math.exp(-rate * epsilon**2))
            for m in range(M):
                p = freq[k, e, m]
                rows.append(
                    {
                        "i": i,
                        "epsilon": epsilon,
                        "level": m + 1,
                        "frequency": p,
                        "std_error": math.sqrt(p * (1 - p) / n_seeds),
                        "tail_bound": bound,
                    }
                )
    return pd.DataFrame(rows)
