"""Inner loop: per-agent surrogate subproblems followed by one combined
consensus + gradient-tracking exchange.

Each agent i keeps an optimization copy x_i and a tracking variable y_i that
estimates the global gradient.  One iteration is

  local:  x_i+ = argmin_x  ftilde_i(x; x_i) + <y_i - grad_i(x_i), x - x_i> + r(x)
  gossip: x_i  = sum_j w_ij x_j+ ;  y_i = sum_j w_ij (y_j + grad_j(x_j_new) - grad_j(x_j_old))

where grad_i is the gradient of the (possibly proximally shifted) local loss
f_i(x) + delta/2 ||x - z_i||^2.  Both exchanges ride the same gossip round, so
one iteration costs W.rounds_per_application communication rounds.

Two surrogates are supported: the full local function plus a similarity-sized
proximal term ("F"), and plain linearization with an L-sized proximal term
("L", which collapses to one proximal-gradient step).  The implementation is
vectorized over agents; the per-agent subproblems only read previous-round
state, so results are identical to any parallel schedule.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import problems
from .problems import ProblemSpec, prox_r


@dataclass(frozen=True)
class Surrogate:
    """Local model choice: kind "F" with prox weight beta, or "L" with model
    constant l_surr (smoothness of the shifted loss)."""

    kind: str  # "F" | "L"
    weight: float

    def __post_init__(self):
        if self.kind not in ("F", "L"):
            raise ValueError("surrogate kind must be 'F' or 'L'")
        if self.weight <= 0:
            raise ValueError("surrogate weight must be > 0")


@dataclass
class SonataResult:
    X: np.ndarray
    Y: np.ndarray
    G: np.ndarray  # gradient cache: shifted local gradient at each agent's x
    comms: int
    subproblem_converged: list = field(default_factory=list)  # one flag per iteration
    inner_iterations: list = field(default_factory=list)


def _as_mixer(W) -> tuple[np.ndarray, int]:
    """Accept a GossipMatrix or a raw doubly stochastic ndarray (tests only)."""
    if hasattr(W, "W"):
        return W.W, W.rounds_per_application
    return np.asarray(W, dtype=float), 1


def shifted_grads(p: ProblemSpec, X: np.ndarray, delta: float, Z) -> np.ndarray:
    """Gradients of f_i(x) + delta/2 ||x - z_i||^2 at each agent's own point."""
    G = problems.batch_grads(p, X)
    if delta != 0.0:
        G = G + delta * (X - Z)
    return G


def hessian_stack(p: ProblemSpec) -> np.ndarray:
    """Stacked exact local Hessians (quadratic losses only), memoized on p."""
    cached = p.meta.get("_hessian_stack")
    if cached is None:
        cached = np.stack([problems.local_hessian(p, i) for i in range(p.m)])
        p.meta["_hessian_stack"] = cached
    return cached


class QuadraticFullSolver:
    """Closed-form local step for kind "F" on quadratic losses with r = zero.

    Solves (H_i + (delta+beta) I) x = H_i x_i + (delta+beta) x_i - y_i per
    agent; the proximal centers z_i cancel out of the optimality condition.
    Factors the (constant) system matrices once.
    """

    def __init__(self, p: ProblemSpec, coef: float):
        H = hessian_stack(p)
        self.H = H
        self.coef = coef
        self.K_inv = np.linalg.inv(H + coef * np.eye(p.d))

    def solve(self, X: np.ndarray, Y: np.ndarray) -> np.ndarray:
        rhs = np.einsum("mab,mb->ma", self.H, X) + self.coef * X - Y
        return np.einsum("mab,mb->ma", self.K_inv, rhs)


def _prox_gradient_subproblem(
    p, i, x_i, y_i, g_i, surrogate, delta, z_i, tol, max_iters
):
    """Iterative local step for kind "F" when no closed form applies.

    Minimizes f_i(x) + delta/2||x-z_i||^2 + beta/2||x-x_i||^2
    + <y_i - g_i, x> + r(x) by proximal gradient with step 1/L_sub.
    """
    beta = surrogate.weight
    L_sub = problems.local_smoothness(p)[i] + delta + beta
    step = 1.0 / L_sub
    lin = y_i - g_i
    x = x_i.copy()
    for it in range(max_iters):
        grad = problems.local_grad(p, i, x) + beta * (x - x_i) + lin
        if delta != 0.0:
            grad = grad + delta * (x - z_i)
        x_next = prox_r(p, x - step * grad, step)
        move = np.linalg.norm(x_next - x) / step
        x = x_next
        if move <= tol:
            return x, True, it + 1
    return x, False, max_iters


def local_subproblem(
    p: ProblemSpec,
    i: int,
    x_i,
    y_i,
    g_i,
    surrogate: Surrogate,
    delta: float = 0.0,
    z_i=None,
    tol: float = 1e-10,
    max_iters: int = 5000,
):
    """Solve one agent's local subproblem; returns (x_half, converged, inner_iters)."""
    x_i = np.asarray(x_i, dtype=float)
    y_i = np.asarray(y_i, dtype=float)
    if surrogate.kind == "L":
        step = 1.0 / surrogate.weight
        return prox_r(p, x_i - step * y_i, step), True, 0
    if p.loss_kind == "quadratic-ridge" and p.reg.kind == "zero":
        H = problems.local_hessian(p, i)
        coef = delta + surrogate.weight
        x = np.linalg.solve(H + coef * np.eye(p.d), H @ x_i + coef * x_i - y_i)
        return x, True, 0
    if z_i is None:
        z_i = x_i
    g_i = np.asarray(g_i, dtype=float)
    return _prox_gradient_subproblem(
        p, i, x_i, y_i, g_i, surrogate, delta, z_i, tol, max_iters
    )


def _solve_all_subproblems(p, X, Y, G, surrogate, delta, Z, solver, tol, max_iters):
    if surrogate.kind == "L":
        step = 1.0 / surrogate.weight
        V = X - step * Y
        if p.reg.kind == "zero":
            return V, True, 0
        return np.stack([prox_r(p, v, step) for v in V]), True, 0
    if solver is not None:
        return solver.solve(X, Y), True, 0
    X_half = np.empty_like(X)
    ok = True
    iters = 0
    for i in range(p.m):
        z_i = Z[i] if Z is not None else X[i]
        X_half[i], conv, it = _prox_gradient_subproblem(
            p, i, X[i], Y[i], G[i], surrogate, delta, z_i, tol, max_iters
        )
        ok = ok and conv
        iters = max(iters, it)
    return X_half, ok, iters


def gossip_round(X_half, Y, G, W, p: ProblemSpec, delta: float = 0.0, Z=None):
    """Communication step: mix the x's, refresh gradients at the mixed points, mix the
    tracking variables with the fresh gradient differences folded in."""
    W_mat, _ = _as_mixer(W)
    X_new = W_mat @ X_half
    G_new = shifted_grads(p, X_new, delta, Z)
    # associate as y + (difference): the correction is small near convergence
    Y_new = W_mat @ (Y + (G_new - G))
    return X_new, Y_new, G_new


def sonata_run(
    p: ProblemSpec,
    X0,
    Y0,
    T: int,
    W,
    surrogate: Surrogate,
    *,
    delta: float = 0.0,
    Z=None,
    G0=None,
    solver=None,
    subproblem_tol: float = 1e-10,
    max_inner_iters: int = 5000,
    comms_start: int = 0,
    comm_cost: int | None = None,
    on_step=None,
) -> SonataResult:
    """Run T iterations (local step + communication step) from (X0, Y0).

    Y0 is supplied by the caller: a cold start uses the shifted local
    gradients at X0, the accelerated outer loop supplies its warm restart.
    ``on_step(t, comms, X, Y)`` fires after every completed iteration.
    """
    X = np.array(X0, dtype=float)
    Y = np.array(Y0, dtype=float)
    if X.shape != (p.m, p.d) or Y.shape != X.shape:
        raise ValueError("X0 and Y0 must be (m, d)")
    G = np.array(G0, dtype=float) if G0 is not None else shifted_grads(p, X, delta, Z)
    _, rounds = _as_mixer(W)
    cost = comm_cost if comm_cost is not None else rounds

    comms = comms_start
    result = SonataResult(X, Y, G, comms)
    use_closed_form = (
        surrogate.kind == "F"
        and p.loss_kind == "quadratic-ridge"
        and p.reg.kind == "zero"
    )
    if use_closed_form and solver is None:
        solver = QuadraticFullSolver(p, delta + surrogate.weight)

    for t in range(1, T + 1):
        X_half, converged, iters = _solve_all_subproblems(
            p, X, Y, G, surrogate, delta, Z, solver, subproblem_tol, max_inner_iters
        )
        X, Y, G = gossip_round(X_half, Y, G, W, p, delta, Z)
        comms += cost
        result.subproblem_converged.append(converged)
        result.inner_iterations.append(iters)
        if on_step is not None:
            on_step(t, comms, X, Y)

    result.X, result.Y, result.G, result.comms = X, Y, G, comms
    return result


def tracking_gap(p: ProblemSpec, X, Y, delta: float = 0.0, Z=None) -> float:
    """Norm of avg(y_i) - avg(shifted grad_i(x_i)); zero under exact tracking."""
    G = shifted_grads(p, np.asarray(X, dtype=float), delta, Z)
    return float(np.linalg.norm(Y.mean(axis=0) - G.mean(axis=0)))
