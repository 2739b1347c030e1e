"""Local loss oracles, the nonsmooth term, and data-driven constant estimation.

A distributed problem is a collection of m agent losses f_i plus a shared
nonsmooth term r.  Three loss families are supported:

* ``quadratic-ridge``:  f_i(x) = 1/(2n) ||A_i x - b_i||^2 + lam * ||x||^2
* ``smooth-hinge``:     f_i(x) = 1/n sum_j hinge(b_ij <x, a_ij>) + lam/2 ||x||^2
* ``logistic``:         f_i(x) = 1/n sum_j log(1 + exp(-b_ij <x, a_ij>)) + lam/2 ||x||^2

All oracles are pure functions of immutable arrays and safe to call from
multiple workers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

LOSS_KINDS = ("quadratic-ridge", "smooth-hinge", "logistic")

# Curvature cap of the scalar loss second derivative, used by the Hessian
# upper bounds H_i for the non-quadratic losses.
CURVATURE_CAP = {"smooth-hinge": 1.0, "logistic": 0.25}


class DegenerateProblemError(ValueError):
    """The problem has no usable strong convexity (mu_hat <= 0)."""


@dataclass(frozen=True)
class Regularizer:
    """Descriptor of the nonsmooth term r: zero, l1(weight), or a box constraint."""

    kind: str = "zero"  # "zero" | "l1" | "box"
    weight: float = 0.0
    lo: float = 0.0
    hi: float = 0.0

    def __post_init__(self):
        if self.kind not in ("zero", "l1", "box"):
            raise ValueError(f"unknown regularizer kind {self.kind!r}")
        if self.kind == "l1" and self.weight < 0:
            raise ValueError("l1 weight must be >= 0")
        if self.kind == "box" and not self.lo <= self.hi:
            raise ValueError("box requires lo <= hi")


@dataclass
class ProblemSpec:
    """m agents, each holding an (n, d) feature block and an n-vector of labels.

    ``A`` is stacked (m, n, d), ``b`` is (m, n).  Every agent has identical n
    and d by construction.  ``meta`` carries generator side-information
    (planted solution, covariance spectrum) and never affects the oracles.
    """

    loss_kind: str
    A: np.ndarray
    b: np.ndarray
    lam: float
    reg: Regularizer = field(default_factory=Regularizer)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.A = np.ascontiguousarray(self.A, dtype=float)
        self.b = np.ascontiguousarray(self.b, dtype=float)
        if self.A.ndim != 3 or self.b.shape != self.A.shape[:2]:
            raise ValueError("A must be (m, n, d) and b (m, n)")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.is_classification and not np.all(np.abs(self.b) == 1.0):
            raise ValueError("classification labels must be +/-1")
        self._local_smooth_cache = None

    @property
    def m(self) -> int:
        return self.A.shape[0]

    @property
    def n(self) -> int:
        return self.A.shape[1]

    @property
    def d(self) -> int:
        return self.A.shape[2]

    @property
    def is_classification(self) -> bool:
        return self.loss_kind != "quadratic-ridge"


def smooth_hinge(t):
    """Smoothed hinge loss: 0 past margin 1, quadratic on [0, 1], linear below 0."""
    t = np.asarray(t, dtype=float)
    return np.where(t > 1.0, 0.0, np.where(t < 0.0, 0.5 - t, 0.5 * (t - 1.0) ** 2))


def smooth_hinge_deriv(t):
    """Derivative of :func:`smooth_hinge`; continuous at the knots 0 and 1."""
    t = np.asarray(t, dtype=float)
    return np.where(t > 1.0, 0.0, np.where(t < 0.0, -1.0, t - 1.0))


def _logistic(t):
    # log(1 + exp(-t)) computed stably for any sign of t
    return np.logaddexp(0.0, -t)


def _sigmoid(t):
    out = np.empty_like(t)
    pos = t >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-t[pos]))
    e = np.exp(t[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _logistic_deriv(t):
    # d/dt log(1 + exp(-t)) = -sigmoid(-t)
    return -_sigmoid(-t)


def _check_point(x, d):
    x = np.asarray(x, dtype=float)
    if x.shape != (d,):
        raise ValueError(f"expected point of dimension {d}, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite point")
    return x


def local_value(p: ProblemSpec, i: int, x) -> float:
    """Value of agent i's local loss f_i at x."""
    x = _check_point(x, p.d)
    if p.loss_kind == "quadratic-ridge":
        res = p.A[i] @ x - p.b[i]
        return float(res @ res / (2.0 * p.n) + p.lam * (x @ x))
    margins = p.b[i] * (p.A[i] @ x)
    loss = smooth_hinge(margins) if p.loss_kind == "smooth-hinge" else _logistic(margins)
    return float(loss.mean() + 0.5 * p.lam * (x @ x))


def local_grad(p: ProblemSpec, i: int, x) -> np.ndarray:
    """Exact gradient of agent i's local loss at x."""
    x = _check_point(x, p.d)
    if p.loss_kind == "quadratic-ridge":
        return p.A[i].T @ (p.A[i] @ x - p.b[i]) / p.n + 2.0 * p.lam * x
    margins = p.b[i] * (p.A[i] @ x)
    dl = smooth_hinge_deriv(margins) if p.loss_kind == "smooth-hinge" else _logistic_deriv(margins)
    return p.A[i].T @ (dl * p.b[i]) / p.n + p.lam * x


def batch_grads(p: ProblemSpec, X: np.ndarray) -> np.ndarray:
    """Gradients of every agent at its own point: X is (m, d), result is (m, d)."""
    if p.loss_kind == "quadratic-ridge":
        res = np.einsum("mnd,md->mn", p.A, X) - p.b
        return np.einsum("mnd,mn->md", p.A, res) / p.n + 2.0 * p.lam * X
    margins = p.b * np.einsum("mnd,md->mn", p.A, X)
    dl = smooth_hinge_deriv(margins) if p.loss_kind == "smooth-hinge" else _logistic_deriv(margins)
    return np.einsum("mnd,mn->md", p.A, dl * p.b) / p.n + p.lam * X


def average_value(p: ProblemSpec, x) -> float:
    """Smooth part of the global objective, f(x) = (1/m) sum_i f_i(x)."""
    x = _check_point(x, p.d)
    if p.loss_kind == "quadratic-ridge":
        res = np.einsum("mnd,d->mn", p.A, x) - p.b
        return float((res * res).sum() / (2.0 * p.n * p.m) + p.lam * (x @ x))
    margins = p.b * np.einsum("mnd,d->mn", p.A, x)
    loss = smooth_hinge(margins) if p.loss_kind == "smooth-hinge" else _logistic(margins)
    reg_coef = 0.5 * p.lam
    return float(loss.mean() + reg_coef * (x @ x))


def average_grad(p: ProblemSpec, x) -> np.ndarray:
    """Gradient of f = (1/m) sum_i f_i at x."""
    x = _check_point(x, p.d)
    if p.loss_kind == "quadratic-ridge":
        res = np.einsum("mnd,d->mn", p.A, x) - p.b
        return np.einsum("mnd,mn->d", p.A, res) / (p.n * p.m) + 2.0 * p.lam * x
    margins = p.b * np.einsum("mnd,d->mn", p.A, x)
    dl = smooth_hinge_deriv(margins) if p.loss_kind == "smooth-hinge" else _logistic_deriv(margins)
    return np.einsum("mnd,mn->d", p.A, dl * p.b) / (p.n * p.m) + p.lam * x


def r_value(p: ProblemSpec, x, feas_tol: float = 1e-9) -> float:
    """Value of the nonsmooth term r at x (inf outside the box, up to feas_tol)."""
    reg = p.reg
    if reg.kind == "zero":
        return 0.0
    if reg.kind == "l1":
        return float(reg.weight * np.abs(x).sum())
    if np.all(x >= reg.lo - feas_tol) and np.all(x <= reg.hi + feas_tol):
        return 0.0
    return float("inf")


def prox_r(p: ProblemSpec, x, step: float) -> np.ndarray:
    """Proximal map of r with the given step: argmin_y r(y) + ||y - x||^2 / (2 step)."""
    if step <= 0:
        raise ValueError("step must be > 0")
    x = np.asarray(x, dtype=float)
    reg = p.reg
    if reg.kind == "zero":
        return x.copy()
    if reg.kind == "l1":
        thr = step * reg.weight
        return np.sign(x) * np.maximum(np.abs(x) - thr, 0.0)
    return np.clip(x, reg.lo, reg.hi)


def local_hessian(p: ProblemSpec, i: int) -> np.ndarray:
    """Exact Hessian of f_i for the quadratic loss (constant in x)."""
    if p.loss_kind != "quadratic-ridge":
        raise ValueError("exact Hessians are only available for quadratic-ridge")
    return p.A[i].T @ p.A[i] / p.n + 2.0 * p.lam * np.eye(p.d)


def hessian_bound(p: ProblemSpec, i: int) -> np.ndarray:
    """Data-dependent upper bound H_i on agent i's Hessian.

    Exact for the quadratic loss; for classification losses it caps the scalar
    curvature at 1 (hinge) or 1/4 (logistic).
    """
    if p.loss_kind == "quadratic-ridge":
        return local_hessian(p, i)
    c = CURVATURE_CAP[p.loss_kind]
    Ab = p.A[i] * p.b[i][:, None]
    return c * (Ab.T @ Ab) / p.n + p.lam * np.eye(p.d)


def local_smoothness(p: ProblemSpec) -> np.ndarray:
    """Per-agent smoothness bounds (largest eigenvalue of H_i), memoized."""
    if p._local_smooth_cache is None:
        vals = np.empty(p.m)
        for i in range(p.m):
            vals[i] = np.linalg.eigvalsh(hessian_bound(p, i))[-1]
        p._local_smooth_cache = vals
    return p._local_smooth_cache


@dataclass(frozen=True)
class Constants:
    """Estimated problem constants: strong convexity, smoothness, similarity."""

    mu_hat: float
    L_hat: float
    Lmx_hat: float
    beta_hat: float

    @property
    def kappa_hat(self) -> float:
        return self.L_hat / self.mu_hat

    def __post_init__(self):
        if not (0 < self.mu_hat <= self.L_hat <= self.Lmx_hat * (1 + 1e-12)):
            raise ValueError(
                f"constants must satisfy 0 < mu <= L <= Lmx, got "
                f"({self.mu_hat}, {self.L_hat}, {self.Lmx_hat})"
            )
        if self.beta_hat < 0:
            raise ValueError("beta_hat must be >= 0")


def estimate_constants(p: ProblemSpec) -> Constants:
    """Estimate (mu, L, Lmx, beta) from the data.

    Quadratic losses use exact Hessian eigenvalues.  Classification losses use
    the curvature-capped bounds H_i: mu_hat = lam, L_hat = mean_i lmax(H_i),
    and beta_hat = max_i ||H_i - mean_j H_j||_2.
    """
    H = np.stack([hessian_bound(p, i) for i in range(p.m)])
    H_bar = H.mean(axis=0)
    lmax_i = np.array([np.linalg.eigvalsh(Hi)[-1] for Hi in H])
    beta = max(np.linalg.eigvalsh(Hi - H_bar)[[0, -1]].__abs__().max() for Hi in H)
    if p.loss_kind == "quadratic-ridge":
        w = np.linalg.eigvalsh(H_bar)
        mu, L = w[0], w[-1]
    else:
        mu = p.lam
        L = lmax_i.mean()
    if mu <= 1e-12 * max(1.0, L):
        raise DegenerateProblemError(
            "no strong convexity: lam = 0 with a rank-deficient average Hessian"
            if p.loss_kind == "quadratic-ridge"
            else "no strong convexity: classification losses require lam > 0"
        )
    return Constants(float(mu), float(L), float(lmax_i.max()), float(beta))
