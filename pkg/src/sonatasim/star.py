"""Master/workers variant: exact averaging replaces gossip, the master
broadcasts the aggregate gradient, and no tracking variable is needed.

Equivalent to the mesh algorithms run with the rank-one averaging matrix
(deviation zero), up to the initialization of the tracking variable.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import problems
from .accel import AccelParams
from .problems import ProblemSpec, prox_r
from .sonata import Surrogate


def _shifted_local_grad(p, i, x, delta, z):
    g = problems.local_grad(p, i, x)
    if delta != 0.0:
        g = g + delta * (x - z)
    return g


def _shifted_avg_grad(p, x, delta, z):
    g = problems.average_grad(p, x)
    if delta != 0.0:
        g = g + delta * (x - z)
    return g


def _star_subproblem(p, i, x, correction, surrogate, delta, z, tol, max_iters):
    """argmin ftilde_i(v; x) + <correction, v - x> + r(v) at the shared point x."""
    if surrogate.kind == "L":
        step = 1.0 / surrogate.weight
        g = _shifted_local_grad(p, i, x, delta, z)
        return prox_r(p, x - step * (g + correction), step)
    if p.loss_kind == "quadratic-ridge" and p.reg.kind == "zero":
        H = problems.local_hessian(p, i)
        coef = delta + surrogate.weight
        g = _shifted_local_grad(p, i, x, delta, z)
        rhs = (H + coef * np.eye(p.d)) @ x - (g + correction)
        return np.linalg.solve(H + coef * np.eye(p.d), rhs)
    beta = surrogate.weight
    L_sub = problems.local_smoothness(p)[i] + delta + beta
    step = 1.0 / L_sub
    v = x.copy()
    for _ in range(max_iters):
        grad = problems.local_grad(p, i, v) + beta * (v - x) + correction
        if delta != 0.0:
            grad = grad + delta * (v - z)
        v_next = prox_r(p, v - step * grad, step)
        if np.linalg.norm(v_next - v) / step <= tol:
            return v_next
        v = v_next
    return v


def sonata_star_run(
    p: ProblemSpec,
    x0,
    T: int,
    surrogate: Surrogate,
    *,
    delta: float = 0.0,
    z=None,
    subproblem_tol: float = 1e-10,
    max_inner_iters: int = 5000,
    comms_start: int = 0,
    on_step=None,
):
    """T master/workers iterations from the shared point x0; returns (x_T, comms).

    Each iteration: workers send local gradients, master broadcasts the
    average, workers solve their surrogate subproblem with the correction
    grad_f - grad_f_i, master averages the solutions.  Counted as one
    communication round per iteration, mirroring the mesh bookkeeping for the
    rank-one averaging matrix.
    """
    x = np.array(x0, dtype=float)
    if z is None:
        z = x.copy()
    comms = comms_start
    for t in range(1, T + 1):
        g_avg = _shifted_avg_grad(p, x, delta, z)
        halves = np.empty((p.m, p.d))
        for i in range(p.m):
            corr = g_avg - _shifted_local_grad(p, i, x, delta, z)
            halves[i] = _star_subproblem(
                p, i, x, corr, surrogate, delta, z, subproblem_tol, max_inner_iters
            )
        x = halves.mean(axis=0)
        comms += 1
        if on_step is not None:
            on_step(t, comms, x)
    return x, comms


@dataclass
class StarResult:
    x: np.ndarray
    z: np.ndarray
    K_done: int
    comms: int
    converged: bool
    gaps: list = field(default_factory=list)


def acc_sonata_star_run(
    p: ProblemSpec,
    params: AccelParams,
    K_max: int | None = None,
    *,
    gap_fn=None,
    target_gap: float | None = None,
    x0=None,
    subproblem_tol: float = 1e-10,
    max_inner_iters: int = 5000,
    on_inner_step=None,
) -> StarResult:
    """Accelerated outer loop on the star architecture: shared x and z."""
    K = K_max if K_max is not None else params.K_max
    x = np.zeros(p.d) if x0 is None else np.array(x0, dtype=float)
    z = x.copy()
    comms = 0
    result = StarResult(x, z, 0, comms, False)
    for k in range(K):
        x_prev = x
        x, comms = sonata_star_run(
            p,
            x,
            params.T,
            params.surrogate,
            delta=params.delta,
            z=z,
            subproblem_tol=subproblem_tol,
            max_inner_iters=max_inner_iters,
            comms_start=comms,
            on_step=(
                None
                if on_inner_step is None
                else lambda t, c, xs, _k=k: on_inner_step(_k, t, c, xs)
            ),
        )
        z = x + params.extrapolation_coef * (x - x_prev)
        result.K_done = k + 1
        if gap_fn is not None:
            gap = float(gap_fn(x[None, :]))
            result.gaps.append(gap)
            if target_gap is not None and gap <= target_gap:
                result.converged = True
                break
    result.x, result.z, result.comms = x, z, comms
    return result
