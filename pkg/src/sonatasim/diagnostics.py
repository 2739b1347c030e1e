"""Centralized oracles and run diagnostics: optimality gap, consensus and
tracking errors, the inner and outer potential functions with their
mode-specific constants, and communication-to-accuracy extraction.

Everything here is offline instrumentation: it reads state snapshots and never
feeds back into the algorithms.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import problems
from .accel import AccelParams, RunObserver
from .problems import Constants, ProblemSpec, prox_r, r_value

INNER_CONTRACTION = {"F": 33.0 / 34.0, "L": 9.0 / 10.0}


class OracleNotConvergedError(RuntimeError):
    """The centralized reference solver hit its iteration cap."""


class ShiftedObjective:
    """u_k(x) = f(x) + delta/(2m) sum_i ||x - z_i||^2 + r(x), with fast batched
    evaluation (closed quadratic form when the loss is quadratic)."""

    def __init__(self, p: ProblemSpec, delta: float = 0.0, Z=None):
        self.p = p
        self.delta = float(delta)
        self.Z = None if Z is None else np.asarray(Z, dtype=float)
        self.z_bar = None if self.Z is None else self.Z.mean(axis=0)
        self.z_sq_mean = 0.0 if self.Z is None else float((self.Z**2).sum(axis=1).mean())
        if p.loss_kind == "quadratic-ridge":
            H = p.meta.get("_hessian_stack")
            if H is None:
                H = np.stack([problems.local_hessian(p, i) for i in range(p.m)])
                p.meta["_hessian_stack"] = H
            self._H = H.mean(axis=0)
            self._h = np.einsum("mnd,mn->d", p.A, p.b) / (p.n * p.m)
            self._c = float((p.b**2).sum(axis=1).mean() / (2.0 * p.n))

    def smooth_value(self, x) -> float:
        x = np.asarray(x, dtype=float)
        if self.p.loss_kind == "quadratic-ridge":
            v = 0.5 * x @ (self._H @ x) - self._h @ x + self._c
        else:
            v = problems.average_value(self.p, x)
        if self.delta != 0.0:
            v += self.delta * (0.5 * (x @ x) - self.z_bar @ x + 0.5 * self.z_sq_mean)
        return float(v)

    def value(self, x) -> float:
        return self.smooth_value(x) + r_value(self.p, x)

    def values(self, X) -> np.ndarray:
        return np.array([self.value(x) for x in np.asarray(X, dtype=float)])

    def grad(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.p.loss_kind == "quadratic-ridge":
            g = self._H @ x - self._h
        else:
            g = problems.average_grad(self.p, x)
        if self.delta != 0.0:
            g = g + self.delta * (x - self.z_bar)
        return g

    def smoothness(self) -> float:
        if self.p.loss_kind == "quadratic-ridge":
            L = float(np.linalg.eigvalsh(self._H)[-1])
        else:
            H_bar = np.mean(
                [problems.hessian_bound(self.p, i) for i in range(self.p.m)], axis=0
            )
            L = float(np.linalg.eigvalsh(H_bar)[-1])
        return L + self.delta

    def strong_convexity(self) -> float:
        if self.p.loss_kind == "quadratic-ridge":
            mu = float(np.linalg.eigvalsh(self._H)[0])
        else:
            mu = self.p.lam
        return mu + self.delta


@dataclass(frozen=True)
class Oracle:
    """Centralized minimizer and optimal value of a (shifted) problem."""

    x_star: np.ndarray
    u_star: float
    objective: ShiftedObjective


def centralized_solve(
    p: ProblemSpec,
    tol: float = 1e-12,
    delta: float = 0.0,
    Z=None,
    max_iters: int = 500_000,
) -> Oracle:
    """Solve the (shifted) global problem to high accuracy.

    Quadratic losses with r = zero use a direct symmetric solve plus one round
    of iterative refinement; everything else runs an accelerated proximal
    gradient until the gradient-mapping norm drops below tol.
    """
    obj = ShiftedObjective(p, delta, Z)
    if p.loss_kind == "quadratic-ridge" and p.reg.kind == "zero":
        K = obj._H + delta * np.eye(p.d)
        rhs = obj._h + (delta * obj.z_bar if delta != 0.0 else 0.0)
        x = np.linalg.solve(K, rhs)
        x = x + np.linalg.solve(K, rhs - K @ x)  # one refinement pass
        return Oracle(x, obj.value(x), obj)

    L = obj.smoothness()
    mu = obj.strong_convexity()
    if mu <= 0:
        raise ValueError("centralized solve requires a strongly convex problem")
    theta = (np.sqrt(L / mu) - 1.0) / (np.sqrt(L / mu) + 1.0)
    step = 1.0 / L
    x = np.zeros(p.d)
    v = x.copy()
    for it in range(max_iters):
        x_next = prox_r(p, v - step * obj.grad(v), step)
        v = x_next + theta * (x_next - x)
        x = x_next
        gm = (x - prox_r(p, x - step * obj.grad(x), step)) * L
        if np.linalg.norm(gm) <= tol:
            return Oracle(x, obj.value(x), obj)
    raise OracleNotConvergedError(f"no convergence to {tol} in {max_iters} iterations")


def consensus_error(X) -> float:
    """(1/m) sum_i ||x_i - x_bar||^2."""
    X = np.asarray(X, dtype=float)
    centered = X - X.mean(axis=0)
    return float((centered**2).sum(axis=1).mean())


def optimality_gap(p: ProblemSpec, X, oracle: Oracle) -> float:
    """max of average objective suboptimality and average consensus error."""
    X = np.asarray(X, dtype=float)
    sub = float(oracle.objective.values(X).mean() - oracle.u_star)
    return max(sub, consensus_error(X))


def error_weights(constants: Constants, mode: str) -> tuple[float, float]:
    """(c_x, c_y) weights of the consensus/tracking error in the inner potential."""
    mu, L, beta = constants.mu_hat, constants.L_hat, constants.beta_hat
    if mode == "F":
        return 8.0 * (L + 2 * beta - mu) ** 2 / beta, 4.0 / beta
    if mode == "L":
        return 56.0 * (2 * L + beta - mu) ** 2 / L, 28.0 / L
    raise ValueError("mode must be 'F' or 'L'")


def admissible_rho(constants: Constants, mode: str) -> float:
    """Largest network deviation for which the inner potential provably
    contracts at the mode's nominal factor."""
    mu, L, beta = constants.mu_hat, constants.L_hat, constants.beta_hat
    if mode == "F":
        return float(
            beta * (2 * beta - mu) / (4 * np.sqrt(1785.0) * (L + 2 * beta - mu) * (L + 4 * beta - mu))
        )
    if mode == "L":
        return float(L**2 / (70 * np.sqrt(15.0) * (2 * L - mu + beta) ** 2))
    raise ValueError("mode must be 'F' or 'L'")


def inner_potential(
    p: ProblemSpec,
    X,
    Y,
    constants: Constants,
    mode: str,
    oracle_k: Oracle,
) -> dict:
    """g + e of the inner loop: average shifted suboptimality plus weighted
    consensus and tracking errors.  ``oracle_k`` must solve the same shifted
    problem the states are evolving on."""
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    c_x, c_y = error_weights(constants, mode)
    g = float(oracle_k.objective.values(X).mean() - oracle_k.u_star)
    e = c_x * consensus_error(X) + c_y * consensus_error(Y)
    return {"g": g, "e": e, "total": g + e}


def outer_potential(
    p: ProblemSpec, X_prev, X, alpha: float, mu: float, e_prev_final: float, oracle: Oracle
) -> float:
    """Suboptimality plus a momentum-corrected distance to the solution plus
    the carried-over inner error: decays linearly on compliant runs."""
    X = np.asarray(X, dtype=float)
    X_prev = np.asarray(X_prev, dtype=float)
    V = X_prev + (X - X_prev) / alpha
    sub = float(oracle.objective.values(X).mean() - oracle.u_star)
    dist = float(((V - oracle.x_star) ** 2).sum(axis=1).mean())
    return sub + 0.5 * mu * dist + e_prev_final


@dataclass(frozen=True)
class PotentialConstants:
    """Inner error weights, nominal contraction, admissible deviation, and the
    outer-rate constants of the potential decay bound."""

    c_x: float
    c_y: float
    contraction: float
    rho_bound: float
    c1: float
    c2: float


def potential_constants(
    constants: Constants, mode: str, alpha: float, c_seq: float, delta: float
) -> PotentialConstants:
    c_x, c_y = error_weights(constants, mode)
    ca = c_seq * alpha
    c1 = 1.0 + (delta / c_x) * (1.5 * (1 - ca) ** 2 + 5 - 4 * ca) / (1 - ca) ** 2
    if alpha < 1.0:
        c2 = (2.0 + np.sqrt(c1)) ** 2 / (
            (np.sqrt((1 - ca) / (1 - alpha)) - 1.0) ** 2 * (1 - alpha)
        )
    else:
        c2 = float("inf")  # delta = 0: the outer bound degenerates
    return PotentialConstants(
        c_x=c_x,
        c_y=c_y,
        contraction=INNER_CONTRACTION[mode],
        rho_bound=admissible_rho(constants, mode),
        c1=float(c1),
        c2=float(c2),
    )


# ---------------------------------------------------------------------------
# Trajectory recording
# ---------------------------------------------------------------------------

CSV_SCHEMA_VERSION = 1
CSV_FIELDS = ("k", "t", "comms", "gap", "consensus_err", "tracking_err", "g_plus_e", "P_k")


@dataclass
class TrajRow:
    k: int
    t: int
    comms: int
    gap: float
    consensus_err: float
    tracking_err: float
    g_plus_e: float | None = None
    P_k: float | None = None


@dataclass
class OuterRecord:
    k: int
    comms_end: int
    g_e_warm: float | None
    g_e_final: float | None
    e_final: float | None
    P_after: float | None
    eps_next: float | None
    termination_ok: bool | None


@dataclass
class Trajectory:
    rows: list = field(default_factory=list)
    outer: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def gaps(self) -> np.ndarray:
        return np.array([r.gap for r in self.rows])

    def comms(self) -> np.ndarray:
        return np.array([r.comms for r in self.rows])

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(CSV_FIELDS)
            for r in self.rows:
                writer.writerow(
                    [
                        r.k,
                        r.t,
                        r.comms,
                        f"{r.gap:.17g}",
                        f"{r.consensus_err:.17g}",
                        f"{r.tracking_err:.17g}",
                        "" if r.g_plus_e is None else f"{r.g_plus_e:.17g}",
                        "" if r.P_k is None else f"{r.P_k:.17g}",
                    ]
                )


def comms_to_accuracy(traj: Trajectory, eps: float):
    """First cumulative communication count at which the gap is <= eps;
    None when the trajectory never reaches it."""
    if not traj.rows:
        raise ValueError("empty trajectory")
    for r in traj.rows:
        if r.gap <= eps:
            return r.comms
    return None


class TrajectoryBuilder(RunObserver):
    """Observer that assembles a Trajectory from an accelerated run.

    With ``potentials=True`` it re-solves the shifted problem at every outer
    iteration to evaluate the inner potential, and evaluates the outer
    potential after every extrapolation.
    """

    def __init__(
        self,
        p: ProblemSpec,
        oracle: Oracle,
        params: AccelParams,
        constants: Constants | None = None,
        potentials: bool = False,
        oracle_tol: float = 1e-12,
    ):
        self.p = p
        self.oracle = oracle
        self.params = params
        self.constants = constants
        self.potentials = potentials and constants is not None
        self.oracle_tol = oracle_tol
        self.traj = Trajectory()
        self._oracle_k: Oracle | None = None
        self._last_inner: dict | None = None
        self._e_prev_final = 0.0
        self._X_by_outer: dict[int, np.ndarray] = {}
        self.P0: float | None = None
        self.eps_seq: list[float] = []

    def _row(self, k, t, comms, X, Y, g_plus_e=None, P_k=None):
        self.traj.rows.append(
            TrajRow(
                k=k,
                t=t,
                comms=comms,
                gap=optimality_gap(self.p, X, self.oracle),
                consensus_err=consensus_error(X),
                tracking_err=consensus_error(Y),
                g_plus_e=g_plus_e,
                P_k=P_k,
            )
        )

    def on_init(self, comms, X, Y, Z):
        self._X_by_outer[-1] = np.array(X)
        self.P0 = outer_potential(
            self.p, X, X, self.params.alpha, self.params.mu, 0.0, self.oracle
        )
        self.eps_seq = [self.P0]
        self._row(0, 0, comms, X, Y, P_k=self.P0)

    def on_outer_start(self, k, comms, X, Y_warm, Z, Z_prev):
        if not self.potentials:
            return
        self._oracle_k = centralized_solve(
            self.p, tol=self.oracle_tol, delta=self.params.delta, Z=Z
        )
        self._last_inner = inner_potential(
            self.p, X, Y_warm, self.constants, self.params.mode, self._oracle_k
        )
        self.traj.outer.append(
            OuterRecord(k, comms, self._last_inner["total"], None, None, None, None, None)
        )

    def on_inner_step(self, k, t, comms, X, Y):
        g_plus_e = None
        if self.potentials and self._oracle_k is not None:
            self._last_inner = inner_potential(
                self.p, X, Y, self.constants, self.params.mode, self._oracle_k
            )
            g_plus_e = self._last_inner["total"]
        self._row(k, t, comms, X, Y, g_plus_e=g_plus_e)

    def on_outer_end(self, k, comms, X, X_prev, Y, Z, Z_prev):
        self._X_by_outer[k] = np.array(X)
        P_next = outer_potential(
            self.p,
            X_prev,
            X,
            self.params.alpha,
            self.params.mu,
            self._last_inner["e"] if (self.potentials and self._last_inner) else 0.0,
            self.oracle,
        )
        ca = self.params.c_seq * self.params.alpha
        self.eps_seq.append(self.eps_seq[-1] * (1.0 - ca))
        if self.traj.rows:
            self.traj.rows[-1].P_k = P_next
        if self.potentials and self.traj.outer:
            rec = self.traj.outer[-1]
            rec.comms_end = comms
            rec.g_e_final = self._last_inner["total"]
            rec.e_final = self._last_inner["e"]
            rec.P_after = P_next
            rec.eps_next = self.eps_seq[-1]
            rec.termination_ok = rec.g_e_final <= rec.eps_next

    def outer_iterate(self, k: int) -> np.ndarray:
        return self._X_by_outer[k]


def measure_epsilon_constant(P0: float, alpha: float, g_e_finals) -> float:
    """Largest c in (0, 1) whose geometric error sequence eps_k = P0 (1 - c a)^k
    dominates the recorded final inner potentials (0 if none works)."""
    c_best = 1.0 - 1e-9
    for k, val in enumerate(g_e_finals):
        if val <= 0:
            continue
        ratio = (val / P0) ** (1.0 / (k + 1))
        c_best = min(c_best, (1.0 - ratio) / alpha)
    return max(0.0, float(c_best))


def fit_contraction_factor(values) -> float:
    """Geometric fit: exp(slope of log(values) per iteration) over the tail half."""
    vals = np.asarray(values, dtype=float)
    vals = vals[vals > 0]
    tail = vals[len(vals) // 2 :]
    if len(tail) < 2:
        raise ValueError("need at least two positive values")
    t = np.arange(len(tail))
    slope = np.polyfit(t, np.log(tail), 1)[0]
    return float(np.exp(slope))
