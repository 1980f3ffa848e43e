"""
Maximum-likelihood inference of the ground truth alpha and the effective herding
strength gamma_tilde = (1 - eta) gamma from a single rating sequence.

Under the linear approximation theta_i ~ beta_i, rating i >= 2 has probability
``gamma_tilde beta_{i-1,R_i} + (1 - gamma_tilde) alpha_{R_i}``, so

    L(alpha, gamma_tilde) = sum_{i=2..N} ln[gamma_tilde beta_{i-1,R_i}
                                          + (1 - gamma_tilde) alpha_{R_i}]

is maximized over the simplex (alpha) and [0, 1] (gamma_tilde) by projected gradient
ascent from several random starting points.
"""

__all__ = [
    "InferenceConfig",
    "InferenceResult",
    "error_curve",
    "full_log_likelihood",
    "grad_log_likelihood",
    "infer",
    "log_likelihood",
    "optimal_gamma_witness",
    "relative_errors",
]

import dataclasses
import json
import logging
import math
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from functools import partial

import equinox as eqx
import jax
import jax.numpy as jnp
import numpy as np
import numpyro.distributions as dist
import pandas as pd
from jax.typing import ArrayLike

from .core import (
    OpinionDistribution,
    RatingSequence,
    WeightRule,
    historical_opinions,
    l1_distance,
)
from .exceptions import InsufficientDataError
from .herding import HerdingParams, MisbehaviorSpec, SequenceSpec, simulate
from .optim import (
    AscentState,
    projected_gradient_ascent,
    projection_box,
    projection_simplex,
)
from .utils import check_seed, n_threads, prng_key

logger = logging.getLogger(__name__)


class InferenceConfig(eqx.Module):
    """
    Settings for :func:`infer`.

    Parameters
    ----------
    restarts
        Number of random starting points.
    max_iterations
        Iteration cap per restart.
    likelihood_tolerance
        A restart stops once an iteration improves the log-likelihood by less than
        this.
    shrink
        Step reduction factor per backtrack.
    max_backtracks
        Backtracking cap per iteration.
    pmf_floor
        Rating probabilities are floored at this value before taking logs.
    seed
        Seed for the starting points.
    """

    restarts: int = eqx.field(static=True, default=10)
    max_iterations: int = eqx.field(static=True, default=5000)
    likelihood_tolerance: float = eqx.field(static=True, default=1e-8)
    shrink: float = eqx.field(static=True, default=0.5)
    max_backtracks: int = eqx.field(static=True, default=50)
    pmf_floor: float = eqx.field(static=True, default=1e-12)
    seed: int = eqx.field(static=True, default=0)

    def __post_init__(self):
        for name in ("restarts", "max_iterations", "max_backtracks"):
            if int(getattr(self, name)) < 1:
                msg = f"{name} must be a positive integer, got {getattr(self, name)}"
                raise ValueError(msg)

        for name in ("likelihood_tolerance", "pmf_floor"):
            if not getattr(self, name) > 0:
                msg = f"{name} must be positive, got {getattr(self, name)}"
                raise ValueError(msg)

        if not 0 < self.shrink < 1:
            msg = f"shrink must lie in (0, 1), got {self.shrink}"
            raise ValueError(msg)

        self.seed = check_seed(self.seed)

    def replace(self, **changes) -> "InferenceConfig":
        return dataclasses.replace(self, **changes)


class InferenceResult(eqx.Module):
    """
    The best restart of :func:`infer`.

    ``history`` holds the log-likelihood after each iteration of that restart.
    """

    alpha_hat: OpinionDistribution
    gamma_tilde_hat: float
    log_likelihood: float
    restarts_run: int
    converged: bool
    iterations: int = 0
    history: np.ndarray | None = None

    def to_dict(self) -> dict:
        return {
            "alpha_hat": [float(x) for x in np.asarray(self.alpha_hat.p)],
            "gamma_tilde_hat": float(self.gamma_tilde_hat),
            "log_likelihood": float(self.log_likelihood),
            "restarts_run": int(self.restarts_run),
            "converged": bool(self.converged),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def _likelihood_inputs(
    ratings: RatingSequence, rule: WeightRule
) -> tuple[jax.Array, jax.Array]:
    """beta_{i-1,R_i} and the 0-based level R_i - 1 for i = 2..N."""
    n = len(ratings)
    if n < 2:
        msg = f"The likelihood needs at least 2 ratings, got {n}"
        raise InsufficientDataError(msg)

    levels0 = ratings.ratings - 1
    betas = historical_opinions(ratings, rule)[:-1]
    idx = levels0[1:]
    return jnp.take_along_axis(betas, idx[:, None], axis=1)[:, 0], idx


def _terms(alpha_p, gamma_tilde, b, idx):
    return gamma_tilde * b + (1.0 - gamma_tilde) * alpha_p[idx]


def _log_likelihood(alpha_p, gamma_tilde, b, idx, floor):
    return jnp.sum(jnp.log(jnp.maximum(_terms(alpha_p, gamma_tilde, b, idx), floor)))


def _grad_log_likelihood(alpha_p, gamma_tilde, b, idx, floor):
    terms = _terms(alpha_p, gamma_tilde, b, idx)
    # floored terms are constant in the parameters
    inv = jnp.where(terms > floor, 1.0 / jnp.maximum(terms, floor), 0.0)
    d_alpha = jnp.zeros_like(alpha_p).at[idx].add((1.0 - gamma_tilde) * inv)
    d_gamma = jnp.sum((b - alpha_p[idx]) * inv)
    return d_alpha, d_gamma


def _check_gamma_tilde(gamma_tilde: float) -> float:
    if not 0.0 <= gamma_tilde <= 1.0:
        msg = f"gamma_tilde must lie in [0, 1], got {gamma_tilde}"
        raise ValueError(msg)
    return float(gamma_tilde)


def log_likelihood(
    alpha: OpinionDistribution,
    gamma_tilde: float,
    ratings: RatingSequence,
    rule: WeightRule,
    pmf_floor: float = 1e-12,
) -> float:
    """
    The linear-approximation log-likelihood L(alpha, gamma_tilde) of ratings 2..N,
    with each rating probability floored at ``pmf_floor``.
    """
    gamma_tilde = _check_gamma_tilde(gamma_tilde)
    b, idx = _likelihood_inputs(ratings, rule)
    return float(_log_likelihood(alpha.p, gamma_tilde, b, idx, pmf_floor))


def grad_log_likelihood(
    alpha: OpinionDistribution,
    gamma_tilde: float,
    ratings: RatingSequence,
    rule: WeightRule,
    pmf_floor: float = 1e-12,
) -> tuple[jax.Array, float]:
    """
    The analytic gradient of :func:`log_likelihood`.

    ``dL/dalpha_m = sum_i 1{R_i = m} (1 - gamma_tilde) / term_i`` and
    ``dL/dgamma_tilde = sum_i (beta_{i-1,R_i} - alpha_{R_i}) / term_i``; terms at
    the floor contribute nothing.

    Returns
    -------
    d_alpha
        Array of shape (M,).
    d_gamma_tilde
        Scalar.
    """
    gamma_tilde = _check_gamma_tilde(gamma_tilde)
    b, idx = _likelihood_inputs(ratings, rule)
    d_alpha, d_gamma = _grad_log_likelihood(alpha.p, gamma_tilde, b, idx, pmf_floor)
    return d_alpha, float(d_gamma)


def _project(x, hyperparams=None):
    del hyperparams
    alpha, gamma_tilde = x
    return projection_simplex(alpha), projection_box(gamma_tilde, (0.0, 1.0))


@partial(
    jax.jit,
    static_argnames=(
        "floor",
        "max_iterations",
        "tol",
        "shrink",
        "max_backtracks",
    ),
)
def _ascend(
    b,
    idx,
    alpha0,
    gamma0,
    *,
    floor,
    max_iterations,
    tol,
    shrink,
    max_backtracks,
) -> AscentState:
    """Run one ascent per starting point on the mean per-rating log-likelihood."""
    n_terms = idx.shape[0]

    def fun(x):
        return _log_likelihood(x[0], x[1], b, idx, floor) / n_terms

    def grad(x):
        d_alpha, d_gamma = _grad_log_likelihood(x[0], x[1], b, idx, floor)
        return d_alpha / n_terms, d_gamma / n_terms

    def run(a0, g0):
        return projected_gradient_ascent(
            fun,
            grad,
            _project,
            (a0, g0),
            max_iterations=max_iterations,
            tol=tol,
            shrink=shrink,
            max_backtracks=max_backtracks,
        )

    return jax.vmap(run)(alpha0, gamma0)


def infer(
    ratings: RatingSequence, rule: WeightRule, config: InferenceConfig | None = None
) -> InferenceResult:
    """
    Estimate (alpha, gamma_tilde) by multi-start projected gradient ascent on L.

    Starting points are drawn from a flat Dirichlet for alpha and Uniform(0.05, 0.95)
    for gamma_tilde with a key derived from ``config.seed``; all restarts run in one
    vectorized loop and the one with the largest log-likelihood is returned.

    Raises
    ------
    InsufficientDataError
        If there are fewer than 2 ratings.
    RuntimeError
        If the best log-likelihood is not finite.
    """
    config = config if config is not None else InferenceConfig()
    b, idx = _likelihood_inputs(ratings, rule)
    n_terms = int(idx.shape[0])
    M = ratings.scale.M
    floor = config.pmf_floor

    key_alpha, key_gamma = jax.random.split(prng_key(config.seed))
    alpha0 = dist.Dirichlet(jnp.ones(M)).sample(key_alpha, (config.restarts,))
    gamma0 = dist.Uniform(0.05, 0.95).sample(key_gamma, (config.restarts,))

    states = _ascend(
        b,
        idx,
        alpha0,
        gamma0,
        floor=floor,
        max_iterations=config.max_iterations,
        tol=config.likelihood_tolerance / n_terms,
        shrink=config.shrink,
        max_backtracks=config.max_backtracks,
    )
    values = np.asarray(states.value) * n_terms
    if not np.any(np.isfinite(values)):
        msg = "Log-likelihood is not finite at any restart"
        raise RuntimeError(msg)

    best = int(np.argmax(np.where(np.isfinite(values), values, -np.inf)))
    alpha_p = np.asarray(states.x[0][best])
    # projection leaves entries at ~1e-17 of the simplex; snap onto it exactly
    alpha_p = np.clip(alpha_p, 0.0, None)
    alpha_hat = OpinionDistribution(alpha_p / alpha_p.sum(), ratings.scale)
    gamma_hat = float(states.x[1][best])
    iterations = int(states.iterations[best])

    logger.debug(
        "Best of %d restarts: L=%.6f after %d iterations",
        config.restarts,
        values[best],
        iterations,
    )
    return InferenceResult(
        alpha_hat=alpha_hat,
        gamma_tilde_hat=gamma_hat,
        log_likelihood=float(_log_likelihood(alpha_hat.p, gamma_hat, b, idx, floor)),
        restarts_run=config.restarts,
        converged=bool(states.converged[best]),
        iterations=iterations,
        history=np.asarray(states.history[best][: iterations + 1]) * n_terms,
    )


def relative_errors(
    result: InferenceResult, alpha_star: OpinionDistribution, gamma_tilde_star: float
) -> tuple[float, float]:
    """
    ``E_alpha = ||alpha_hat - alpha*||_1 / ||alpha*||_1`` and
    ``E_gamma = |gamma_hat - gamma*| / gamma*``.

    Raises
    ------
    ZeroDivisionError
        If ``gamma_tilde_star`` is zero; report the absolute error instead.
    """
    e_alpha = l1_distance(result.alpha_hat, alpha_star) / float(
        jnp.abs(alpha_star.p).sum()
    )
    if gamma_tilde_star == 0:
        msg = (
            "The relative error of gamma_tilde is undefined when the true value is 0; "
            "report the absolute error |gamma_tilde_hat| instead"
        )
        raise ZeroDivisionError(msg)
    e_gamma = abs(result.gamma_tilde_hat - gamma_tilde_star) / gamma_tilde_star
    return e_alpha, e_gamma


def _theta_array(thetas, n_needed: int, M: int) -> jax.Array:
    if isinstance(thetas, jax.Array | np.ndarray):
        arr = jnp.asarray(thetas, dtype=float)
    else:
        arr = jnp.stack([jnp.asarray(t.p) for t in thetas])

    if arr.ndim != 2 or arr.shape[1] != M:
        msg = f"thetas must have shape (N - 1, {M}), got {arr.shape}"
        raise ValueError(msg)
    if arr.shape[0] < n_needed:
        msg = f"Need at least {n_needed} initial opinions, got {arr.shape[0]}"
        raise ValueError(msg)
    return arr[:n_needed]


def optimal_gamma_witness(
    alpha: OpinionDistribution,
    thetas: Sequence[OpinionDistribution] | ArrayLike,
    ratings: RatingSequence,
) -> jax.Array:
    """
    The per-rating herding strengths that maximize the unrestricted likelihood.

    For i = 1..N-1 the term ``gamma_i theta_{i,R_{i+1}} + (1 - gamma_i)
    alpha_{R_{i+1}}`` is linear in gamma_i, so it is maximized at gamma_i = 0 when
    ``theta_{i,R_{i+1}} <= alpha_{R_{i+1}}`` and at gamma_i = 1 otherwise. Fitting
    the full model therefore always drives the herding strengths to the corners.

    Parameters
    ----------
    alpha
        The ground-truth opinion.
    thetas
        Initial opinions theta_1, ..., theta_{N-1} (distributions or an array of
        shape (N - 1, M)); extra rows are ignored.
    ratings
        The rating sequence R_1, ..., R_N.

    Returns
    -------
    gammas
        Integer array of length N - 1 with entries in {0, 1}.
    """
    n = len(ratings)
    if n < 2:
        msg = f"The witness needs at least 2 ratings, got {n}"
        raise InsufficientDataError(msg)
    theta = _theta_array(thetas, n - 1, alpha.M)
    nxt = ratings.ratings[1:] - 1
    theta_next = jnp.take_along_axis(theta, nxt[:, None], axis=1)[:, 0]
    return jnp.where(theta_next <= alpha.p[nxt], 0, 1)


def full_log_likelihood(
    alpha: OpinionDistribution,
    gammas: ArrayLike,
    thetas: Sequence[OpinionDistribution] | ArrayLike,
    ratings: RatingSequence,
    pmf_floor: float = 1e-12,
) -> float:
    """
    The unrestricted log-likelihood
    ``sum_{i=1..N-1} ln[gamma_i theta_{i,R_{i+1}} + (1 - gamma_i) alpha_{R_{i+1}}]``.
    """
    n = len(ratings)
    if n < 2:
        msg = f"The likelihood needs at least 2 ratings, got {n}"
        raise InsufficientDataError(msg)
    theta = _theta_array(thetas, n - 1, alpha.M)
    gammas = jnp.asarray(gammas, dtype=float)
    if gammas.shape != (n - 1,):
        msg = f"Expected {n - 1} herding strengths, got shape {gammas.shape}"
        raise ValueError(msg)
    if jnp.any((gammas < 0) | (gammas > 1)):
        msg = "Herding strengths must lie in [0, 1]"
        raise ValueError(msg)

    nxt = ratings.ratings[1:] - 1
    theta_next = jnp.take_along_axis(theta, nxt[:, None], axis=1)[:, 0]
    return float(_log_likelihood(alpha.p, gammas, theta_next, nxt, pmf_floor))


def error_curve(
    alpha: OpinionDistribution,
    gamma: float,
    eta: float,
    rule: WeightRule,
    n_grid: Sequence[int],
    rounds: int,
    config: InferenceConfig | None = None,
    seed: int = 0,
    misbehavior: MisbehaviorSpec | None = None,
) -> pd.DataFrame:
    """
    Monte Carlo relative estimation errors against the number of ratings.

    Round r simulates one sequence of length ``max(n_grid)`` with seed ``seed + r``
    (shorter lengths are its prefixes, which is exactly what simulating them directly
    would give), infers (alpha, gamma_tilde) from each prefix with inference seed
    ``config.seed + r``, and records E_alpha and E_gamma against alpha and
    ``(1 - eta) gamma``. Rounds run on a thread pool (see ``HERDLAB_THREADS``).

    Returns
    -------
    curve
        One row per N with columns ``N``, ``E_alpha_mean``, ``E_alpha_se``,
        ``E_gamma_mean``, ``E_gamma_se``, and ``rounds``.
    """
    config = config if config is not None else InferenceConfig()
    if rounds < 1:
        msg = f"Need at least one Monte Carlo round, got {rounds}"
        raise ValueError(msg)
    n_grid = sorted(int(n) for n in n_grid)
    if n_grid[0] < 2:
        msg = "Every sequence length in the grid must be at least 2"
        raise ValueError(msg)

    params = HerdingParams(
        alpha, SequenceSpec.constant(gamma), SequenceSpec.constant(eta), rule
    )
    gamma_star = params.gamma_tilde
    n_max = n_grid[-1]

    def one_round(r: int) -> np.ndarray:
        seq = simulate(params, n_max, seed + r, misbehavior)
        cfg = config.replace(seed=config.seed + r)
        errors = []
        for n in n_grid:
            prefix = RatingSequence(
                seq.scale, seq.ratings[:n], seq.misbehavior_flags[:n]
            )
            errors.append(relative_errors(infer(prefix, rule, cfg), alpha, gamma_star))
        logger.debug("Finished Monte Carlo round %d", r)
        return np.asarray(errors)

    with ThreadPoolExecutor(max_workers=n_threads()) as pool:
        samples = np.stack(list(pool.map(one_round, range(rounds))))

    mean = samples.mean(axis=0)
    se = (
        samples.std(axis=0, ddof=1) / math.sqrt(rounds)
        if rounds > 1
        else np.zeros_like(mean)
    )
    return pd.DataFrame(
        {
            "N": n_grid,
            "E_alpha_mean": mean[:, 0],
            "E_alpha_se": se[:, 0],
            "E_gamma_mean": mean[:, 1],
            "E_gamma_se": se[:, 1],
            "rounds": rounds,
        }
    )
