"""
Rating scales, opinion distributions, aggregation weight rules, and the two opinion
aggregators (average score and majority).
"""

__all__ = [
    "SIMPLEX_ATOL",
    "ConvergenceVerdict",
    "OpinionDistribution",
    "RatingScale",
    "RatingSequence",
    "WeightRule",
    "aggregate",
    "aggregate_step",
    "average_score",
    "check_convergence_condition",
    "historical_opinions",
    "l1_distance",
    "majority",
    "normalized_weight",
]

import enum
import logging
import math
from typing import Any

import equinox as eqx
import jax
import jax.numpy as jnp
import numpy as np
from jax.typing import ArrayLike

from ._typing import Level
from .exceptions import DomainError, InsufficientDataError

logger = logging.getLogger(__name__)

# Absolute tolerance for "lies on the probability simplex":
SIMPLEX_ATOL = 1e-9

_RULE_KINDS = ("unweighted", "power_law", "custom")


class RatingScale(eqx.Module):
    """An M-level cardinal rating metric with levels ``1, ..., M``."""

    M: int = eqx.field(static=True)

    def __post_init__(self):
        if int(self.M) != self.M or self.M < 2:
            msg = f"A rating scale needs at least 2 levels, got M={self.M}"
            raise ValueError(msg)
        self.M = int(self.M)

    @property
    def levels(self) -> jax.Array:
        return jnp.arange(1, self.M + 1)

    def check_level(self, level: Any) -> Level:
        """Validate a single rating level and return it as a Python int."""
        if int(level) != level or not 1 <= int(level) <= self.M:
            msg = f"Rating level {level} is outside the scale 1..{self.M}"
            raise DomainError(msg)
        return int(level)


class OpinionDistribution(eqx.Module):
    """
    A point on the probability simplex over the levels of a rating scale.

    This represents the ground-truth collective opinion, the historical collective
    opinion after i ratings, the initial collective opinion, and rating probability
    mass functions. Inputs are validated but never renormalized: entries must lie in
    [0, 1] and sum to one within ``SIMPLEX_ATOL``.

    Parameters
    ----------
    p
        The probability of each level, ordered from level 1 to level M.
    scale (optional)
        The rating scale. Defaults to a scale with ``len(p)`` levels.
    """

    p: jax.Array
    scale: RatingScale = None

    def __post_init__(self):
        p = np.asarray(self.p, dtype=float)
        if p.ndim != 1:
            msg = f"Opinion distributions are 1D vectors, got shape {p.shape}"
            raise ValueError(msg)

        if self.scale is None:
            self.scale = RatingScale(p.shape[0])

        if p.shape[0] != self.scale.M:
            msg = (
                f"Distribution has {p.shape[0]} entries but the rating scale has "
                f"{self.scale.M} levels"
            )
            raise ValueError(msg)

        if not np.all(np.isfinite(p)):
            msg = "Opinion distribution entries must be finite"
            raise DomainError(msg)

        if np.any(p < -SIMPLEX_ATOL) or np.any(p > 1 + SIMPLEX_ATOL):
            msg = f"Opinion distribution entries must lie in [0, 1], got {p}"
            raise DomainError(msg)

        if abs(p.sum() - 1.0) > SIMPLEX_ATOL:
            msg = f"Opinion distribution must sum to 1, got sum={p.sum():.12g}"
            raise DomainError(msg)

        self.p = jnp.asarray(p)

    @classmethod
    def uniform(cls, scale: RatingScale | int) -> "OpinionDistribution":
        scale = scale if isinstance(scale, RatingScale) else RatingScale(scale)
        return cls(jnp.full(scale.M, 1.0 / scale.M), scale)

    @classmethod
    def degenerate(cls, scale: RatingScale | int, level: Level) -> "OpinionDistribution":
        """The basis vector e_level: all mass on a single rating level."""
        scale = scale if isinstance(scale, RatingScale) else RatingScale(scale)
        level = scale.check_level(level)
        return cls(jax.nn.one_hot(level - 1, scale.M, dtype=float), scale)

    @property
    def M(self) -> int:
        return self.scale.M

    def prob(self, level: Level) -> float:
        """Probability mass of a (1-based) rating level."""
        return float(self.p[self.scale.check_level(level) - 1])

    def __array__(self, dtype=None, copy=None):  # noqa: ARG002
        return np.asarray(self.p, dtype=dtype)


class WeightRule(eqx.Module):
    """
    An aggregation weight sequence w_1, w_2, ... used to form the historical
    collective opinion.

    Construct with one of :meth:`unweighted`, :meth:`power_law`, or :meth:`custom`
    rather than directly. Weights are handled in log space throughout, so power laws
    with large exponents and custom rules with exponentially growing weights (pass
    ``log_weights``) never overflow.

    Parameters
    ----------
    kind
        One of ``"unweighted"``, ``"power_law"``, or ``"custom"``.
    c
        Exponent of the power law ``w_i = i^c``; ignored for other kinds.
    custom_log_weights
        The natural log of each custom weight (``-inf`` for a zero weight).
    """

    kind: str = eqx.field(static=True)
    c: float = eqx.field(static=True, default=0.0)
    custom_log_weights: jax.Array | None = None

    def __post_init__(self):
        if self.kind not in _RULE_KINDS:
            msg = f"Unknown weight rule kind '{self.kind}', expected one of {_RULE_KINDS}"
            raise ValueError(msg)

        if self.kind == "power_law" and not (np.isfinite(self.c) and self.c >= 0):
            msg = f"Power-law exponent c must be a finite value >= 0, got {self.c}"
            raise DomainError(msg)

        if self.kind == "custom":
            if self.custom_log_weights is None:
                msg = "A custom weight rule needs a weight sequence"
                raise ValueError(msg)

            lw = np.asarray(self.custom_log_weights, dtype=float)
            if lw.ndim != 1 or lw.size == 0:
                msg = "Custom weights must be a non-empty 1D sequence"
                raise ValueError(msg)
            if np.any(np.isnan(lw)) or np.any(lw == np.inf):
                msg = "Custom weights must be finite and non-negative"
                raise DomainError(msg)
            if not np.isfinite(lw[0]):
                msg = "The first custom weight w_1 must be strictly positive"
                raise DomainError(msg)
            self.custom_log_weights = jnp.asarray(lw)

    @classmethod
    def unweighted(cls) -> "WeightRule":
        """The simple average, w_i = 1."""
        return cls("unweighted")

    @classmethod
    def power_law(cls, c: float) -> "WeightRule":
        """The recency-aware family w_i = i^c; c = 0 is the unweighted average."""
        return cls("power_law", c=float(c))

    @classmethod
    def custom(
        cls, weights: ArrayLike | None = None, *, log_weights: ArrayLike | None = None
    ) -> "WeightRule":
        """
        An explicit, finite weight sequence.

        Parameters
        ----------
        weights
            Non-negative weights w_1, ..., w_n with w_1 > 0.
        log_weights
            Alternatively, the natural log of the weights. Use this for sequences
            that overflow double precision, e.g. ``w_i = 2^i`` for large i.
        """
        if (weights is None) == (log_weights is None):
            msg = "Pass exactly one of weights or log_weights"
            raise ValueError(msg)

        if weights is not None:
            w = np.asarray(weights, dtype=float)
            if np.any(w < 0):
                msg = "Custom weights must be non-negative"
                raise DomainError(msg)
            with np.errstate(divide="ignore"):
                log_weights = np.log(w)

        return cls("custom", custom_log_weights=jnp.asarray(log_weights, dtype=float))

    @property
    def is_unweighted(self) -> bool:
        return self.kind == "unweighted" or (self.kind == "power_law" and self.c == 0)

    @property
    def max_index(self) -> int | None:
        """The largest index with a defined weight, or None for infinite rules."""
        if self.kind == "custom":
            return int(self.custom_log_weights.shape[0])
        return None

    def _check_length(self, n: int) -> None:
        if n < 1:
            msg = f"Weight indices start at 1, requested n={n}"
            raise ValueError(msg)
        if self.max_index is not None and n > self.max_index:
            msg = (
                f"Index {n} is beyond the custom weight sequence of length "
                f"{self.max_index}"
            )
            raise IndexError(msg)

    def log_weights(self, n: int) -> jax.Array:
        """ln w_i for i = 1, ..., n."""
        self._check_length(n)
        if self.kind == "custom":
            return self.custom_log_weights[:n]
        i = jnp.arange(1, n + 1, dtype=float)
        return self.c * jnp.log(i)

    def log_normalized(self, n: int) -> tuple[jax.Array, jax.Array]:
        """
        Log normalized weights for i = 1, ..., n.

        Returns
        -------
        log_w_tilde
            ln w̃_i = ln w_i - ln sum_{j<=i} w_j.
        log_one_minus_w_tilde
            ln(1 - w̃_i) = ln sum_{j<i} w_j - ln sum_{j<=i} w_j, which is ``-inf``
            at i = 1. Computing this directly avoids cancellation when w̃_i is close
            to one.
        """
        if self.is_unweighted:
            self._check_length(n)
            log_i = jnp.log(jnp.arange(1, n + 1, dtype=float))
            log_prev = jnp.concatenate((jnp.array([-jnp.inf]), log_i[:-1]))
            return -log_i, log_prev - log_i

        lw = self.log_weights(n)
        log_cum = jax.lax.cumlogsumexp(lw)
        log_prev = jnp.concatenate((jnp.array([-jnp.inf]), log_cum[:-1]))
        return lw - log_cum, log_prev - log_cum

    def normalized(self, n: int) -> jax.Array:
        """The normalized weights w̃_1, ..., w̃_n (w̃_1 = 1 always)."""
        return jnp.exp(self.log_normalized(n)[0])


class RatingSequence(eqx.Module):
    """
    A chronological sequence of ratings R_1, ..., R_N for one item, with flags that
    mark injected (misbehaving) ratings. Flags are only used for evaluation: flagged
    ratings are part of the public history like any other rating.

    Parameters
    ----------
    scale
        The rating scale.
    ratings
        Rating levels in 1..M, oldest first.
    misbehavior_flags (optional)
        Booleans of the same length as ``ratings``. Defaults to all False.
    """

    scale: RatingScale
    ratings: jax.Array
    misbehavior_flags: jax.Array | None = None

    def __post_init__(self):
        r = np.asarray(self.ratings)
        if r.ndim != 1:
            msg = f"Ratings must be a 1D sequence, got shape {r.shape}"
            raise ValueError(msg)

        if r.size and (np.any(r != np.round(r)) or r.min() < 1 or r.max() > self.scale.M):
            msg = f"All ratings must be integer levels in 1..{self.scale.M}"
            raise DomainError(msg)

        if self.misbehavior_flags is None:
            flags = np.zeros(r.shape[0], dtype=bool)
        else:
            flags = np.asarray(self.misbehavior_flags, dtype=bool)

        if flags.shape != r.shape:
            msg = (
                f"Got {flags.shape[0]} misbehavior flags for {r.shape[0]} ratings; "
                "the lengths must match"
            )
            raise ValueError(msg)

        self.ratings = jnp.asarray(r, dtype=jnp.int32)
        self.misbehavior_flags = jnp.asarray(flags)

    def __len__(self) -> int:
        return int(self.ratings.shape[0])

    @property
    def n_misbehaving(self) -> int:
        return int(self.misbehavior_flags.sum())


def normalized_weight(rule: WeightRule, i: int) -> float:
    """
    Return w̃_i = w_i / sum_{j=1..i} w_j for a single (1-based) index.

    Parameters
    ----------
    rule
        The aggregation weight rule.
    i
        The rating index, ``i >= 1``. For custom rules ``i`` may not exceed the length
        of the weight sequence.
    """
    if int(i) != i or i < 1:
        msg = f"Rating indices start at 1, got i={i}"
        raise ValueError(msg)
    return float(rule.normalized(int(i))[-1])


def _aggregate_probs(levels0: jax.Array, log_w: jax.Array, M: int) -> jax.Array:
    # Shift by the largest log-weight: the largest weight becomes 1, so the sum
    # cannot underflow to zero or overflow.
    w = jnp.exp(log_w - jnp.max(log_w))
    counts = jnp.zeros(M, dtype=w.dtype).at[levels0].add(w)
    return counts / jnp.sum(w)


def aggregate(ratings: RatingSequence, rule: WeightRule) -> OpinionDistribution:
    """
    Aggregate a rating sequence into its historical collective opinion.

    Entry m of the result is ``sum_j w_j 1{R_j = m} / sum_j w_j`` over the whole
    sequence.
    """
    n = len(ratings)
    if n == 0:
        msg = "Cannot aggregate an empty rating sequence"
        raise InsufficientDataError(msg)

    p = _aggregate_probs(ratings.ratings - 1, rule.log_weights(n), ratings.scale.M)
    return OpinionDistribution(p, ratings.scale)


def _step(beta: jax.Array, level0: jax.Array, w_tilde: jax.Array) -> jax.Array:
    e = jax.nn.one_hot(level0, beta.shape[-1], dtype=beta.dtype)
    return (1.0 - w_tilde) * beta + w_tilde * e


def aggregate_step(
    beta_i: OpinionDistribution, next_rating: Level, w_tilde_next: float
) -> OpinionDistribution:
    """
    Fold one more rating into a historical collective opinion:
    ``beta_{i+1} = (1 - w̃_{i+1}) beta_i + w̃_{i+1} e_{R_{i+1}}``.

    Parameters
    ----------
    beta_i
        The historical collective opinion after i ratings.
    next_rating
        The level of rating i + 1.
    w_tilde_next
        The normalized weight w̃_{i+1}, in (0, 1].
    """
    if not 0.0 < w_tilde_next <= 1.0:
        msg = f"Normalized weights lie in (0, 1], got {w_tilde_next}"
        raise DomainError(msg)

    level = beta_i.scale.check_level(next_rating)
    return OpinionDistribution(
        _step(beta_i.p, jnp.asarray(level - 1), jnp.asarray(w_tilde_next)), beta_i.scale
    )


def _beta_trajectory(levels0: jax.Array, w_tilde: jax.Array, M: int) -> jax.Array:
    def body(beta, xs):
        level0, wt = xs
        beta = _step(beta, level0, wt)
        return beta, beta

    # w̃_1 = 1 replaces the placeholder initial state exactly.
    init = jnp.full(M, 1.0 / M)
    _, betas = jax.lax.scan(body, init, (levels0, w_tilde))
    return betas


def historical_opinions(ratings: RatingSequence, rule: WeightRule) -> jax.Array:
    """
    The trajectory beta_1, ..., beta_N computed with the incremental recursion.

    Returns
    -------
    betas
        Array of shape (N, M); row i - 1 is beta_i.
    """
    n = len(ratings)
    if n == 0:
        msg = "Cannot aggregate an empty rating sequence"
        raise InsufficientDataError(msg)
    return _beta_trajectory(ratings.ratings - 1, rule.normalized(n), ratings.scale.M)


def average_score(dist: OpinionDistribution) -> float:
    """The average scoring rule, sum_m m * p_m."""
    return float(jnp.dot(dist.scale.levels, dist.p))


def majority(dist: OpinionDistribution) -> Level:
    """The majority rule, argmax_m p_m. Ties go to the lowest level."""
    # jnp.argmax returns the first maximal index
    return int(jnp.argmax(dist.p)) + 1


def l1_distance(p: OpinionDistribution, q: OpinionDistribution) -> float:
    """The L1 distance between two distributions on the same rating scale."""
    if p.M != q.M:
        msg = f"Distributions live on different scales ({p.M} vs {q.M} levels)"
        raise ValueError(msg)
    return float(jnp.abs(p.p - q.p).sum())


class ConvergenceVerdict(str, enum.Enum):
    """Outcome of checking sum w̃_i = inf and sum w̃_i^2 < inf."""

    SATISFIED_ANALYTIC = "satisfied-analytic"
    VIOLATED_ANALYTIC = "violated-analytic"
    HEURISTIC_PASS = "heuristic-pass"
    HEURISTIC_FAIL = "heuristic-fail"


def check_convergence_condition(
    rule: WeightRule, horizon: int = 100_000
) -> ConvergenceVerdict:
    """
    Check whether a weight rule makes the historical collective opinion converge
    almost surely to the ground truth.

    Unweighted and power-law rules satisfy the condition analytically (w̃_i behaves
    like (c + 1) / i). Custom rules can only be checked numerically over a finite
    horizon H: the partial sum of w̃_i must exceed 0.5 ln(H), and the squared
    weights past H/2 must contribute less than 10% of those up to H/2. A heuristic
    verdict is evidence, not a proof.

    Parameters
    ----------
    rule
        The aggregation weight rule.
    horizon
        Number of weights to examine for custom rules (at least 100). Custom
        sequences shorter than the horizon are examined over their full length.
    """
    if rule.kind != "custom":
        return ConvergenceVerdict.SATISFIED_ANALYTIC

    H = min(int(horizon), rule.max_index)
    if horizon > rule.max_index:
        logger.info("Custom weight sequence is shorter than the horizon, using H=%d", H)
    if H < 100:
        msg = f"The heuristic convergence check needs a horizon of at least 100, got {H}"
        raise ValueError(msg)

    w_tilde = rule.normalized(H)
    sq = w_tilde**2
    half = H // 2
    grows = float(w_tilde.sum()) > 0.5 * math.log(H)
    plateaus = float(sq[half:].sum()) < 0.1 * float(sq[:half].sum())

    verdict = (
        ConvergenceVerdict.HEURISTIC_PASS
        if grows and plateaus
        else ConvergenceVerdict.HEURISTIC_FAIL
    )
    logger.warning(
        "Custom weight rule checked numerically over %d indices (%s); this is a "
        "finite-horizon heuristic, not a proof",
        H,
        verdict.value,
    )
    return verdict
