"""
Projected gradient ascent on top of :class:`jaxopt.ProjectedGradient`, keeping the
objective value after every iteration.
"""

__all__ = [
    "AscentState",
    "projected_gradient_ascent",
    "projection_box",
    "projection_simplex",
]

from collections.abc import Callable
from typing import Any

import equinox as eqx
import jax
import jax.numpy as jnp
from jaxopt import ProjectedGradient
from jaxopt.projection import projection_box, projection_simplex

PyTree = Any


class AscentState(eqx.Module):
    """
    Result of :func:`projected_gradient_ascent`.

    ``history[k]`` is the objective after k iterations for k <= ``iterations`` and
    NaN afterwards; it is non-decreasing on the filled part.
    """

    x: PyTree
    value: jax.Array
    iterations: jax.Array
    converged: jax.Array
    history: jax.Array


def projected_gradient_ascent(
    fun: Callable[[PyTree], jax.Array],
    grad: Callable[[PyTree], PyTree],
    projection: Callable[[PyTree, Any], PyTree],
    x0: PyTree,
    hyperparams_proj: Any = None,
    *,
    max_iterations: int = 5000,
    tol: float = 1e-8,
    shrink: float = 0.5,
    max_backtracks: int = 50,
) -> AscentState:
    """
    Maximize ``fun`` over the set that ``projection`` maps onto.

    The steps are those of :class:`jaxopt.ProjectedGradient` on ``-fun`` without
    acceleration and with its backtracking line search (step multiplied by ``shrink``
    up to ``max_backtracks`` times). An accepted step satisfies
    ``fun(x_t) >= fun(x) + <grad(x), x_t - x> / 2``, so it also passes any Armijo
    test with a constant below 1/2.

    The loop converges when an iteration improves the objective by less than
    ``tol``. It gives up, unconverged, when a step lowers the objective by more than
    ``tol`` (the line search ran out of backtracks) or after ``max_iterations``
    iterations. A step that lowers the objective is never taken.

    Everything runs inside ``jax.lax.while_loop``, so the call can be jitted and
    vmapped over starting points.

    Parameters
    ----------
    fun
        The objective.
    grad
        Its gradient, with the same pytree structure as ``x0``.
    projection
        Euclidean projection onto the feasible set, called as
        ``projection(x, hyperparams_proj)`` like the :mod:`jaxopt.projection`
        functions.
    x0
        The starting point; it is projected first.
    hyperparams_proj
        Passed to ``projection``.
    """

    def value_and_grad(x):
        return -fun(x), jax.tree_util.tree_map(jnp.negative, grad(x))

    solver = ProjectedGradient(
        fun=value_and_grad,
        projection=projection,
        value_and_grad=True,
        stepsize=0.0,
        maxiter=max_iterations,
        maxls=max_backtracks,
        tol=tol,
        acceleration=False,
        decrease_factor=shrink,
        implicit_diff=False,
    )

    x0 = projection(x0, hyperparams_proj)
    f0 = fun(x0)
    history = jnp.full(max_iterations + 1, jnp.nan, dtype=f0.dtype).at[0].set(f0)
    init = (
        x0,
        solver.init_state(x0, hyperparams_proj),
        f0,
        jnp.asarray(0),
        jnp.asarray(False),
        jnp.asarray(False),
        history,
    )

    def cond(carry):
        it, done = carry[3], carry[4]
        return (it < max_iterations) & ~done

    def body(carry):
        x, solver_state, f, it, _, _, hist = carry
        x_new, solver_state = solver.update(x, solver_state, hyperparams_proj)
        f_new = fun(x_new)

        decreased = ~(f_new >= f)
        failed = decreased & ~(f_new >= f - tol)
        x_new = jax.tree_util.tree_map(
            lambda a, b: jnp.where(decreased, b, a), x_new, x
        )
        f_new = jnp.where(decreased, f, f_new)

        converged = ~failed & (f_new - f < tol)
        it = it + 1
        return (
            x_new,
            solver_state,
            f_new,
            it,
            converged | failed,
            converged,
            hist.at[it].set(f_new),
        )

    x, _, f, it, _, converged, history = jax.lax.while_loop(cond, body, init)
    return AscentState(
        x=x, value=f, iterations=it, converged=converged, history=history
    )
