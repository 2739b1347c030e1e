import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import hinge_problem, logistic_problem
from sonatasim import problems
from sonatasim.problems import (
    DegenerateProblemError,
    ProblemSpec,
    Regularizer,
    estimate_constants,
    local_grad,
    local_value,
    prox_r,
    smooth_hinge,
    smooth_hinge_deriv,
)


def quad_problem(A_list, b_list, lam=0.0):
    return ProblemSpec(
        loss_kind="quadratic-ridge",
        A=np.stack(A_list),
        b=np.stack(b_list),
        lam=lam,
    )


class TestLocalValue:
    def test_quadratic_identity_rows(self):
        # 1/(2n) ||I x||^2 with n = 2 rows and x = (1, 1)
        p = quad_problem([np.eye(2)], [np.zeros(2)])
        assert local_value(p, 0, np.array([1.0, 1.0])) == pytest.approx(2.0 / 4.0)

    def test_hinge_zero_past_margin(self):
        # single sample with margin 2 contributes no loss, only the ridge term
        A = np.array([[[2.0, 0.0]]])
        b = np.array([[1.0]])
        p = ProblemSpec("smooth-hinge", A, b, lam=0.5)
        x = np.array([1.0, 3.0])
        assert local_value(p, 0, x) == pytest.approx(0.25 * (x @ x))

    def test_hinge_quadratic_piece(self):
        A = np.array([[[0.5, 0.0]]])
        b = np.array([[1.0]])
        p = ProblemSpec("smooth-hinge", A, b, lam=0.0)
        assert local_value(p, 0, np.array([1.0, 0.0])) == pytest.approx(0.125)

    def test_rejects_non_finite(self):
        p = quad_problem([np.eye(2)], [np.zeros(2)])
        with pytest.raises(ValueError):
            local_value(p, 0, np.array([np.nan, 0.0]))


class TestSmoothHinge:
    def test_pieces(self):
        assert smooth_hinge(1.5) == 0.0
        assert smooth_hinge(-1.0) == pytest.approx(1.5)
        assert smooth_hinge(0.5) == pytest.approx(0.125)

    def test_derivative_continuous_at_knots(self):
        eps = 1e-12
        assert smooth_hinge_deriv(0.0) == pytest.approx(-1.0)
        assert smooth_hinge_deriv(-eps) == pytest.approx(-1.0)
        assert smooth_hinge_deriv(1.0) == pytest.approx(0.0)
        assert smooth_hinge_deriv(1.0 + eps) == 0.0

    def test_convex_and_1_smooth(self):
        # second difference quotients on a grid stay in [0, 1]
        t = np.linspace(-3, 3, 1201)
        h = t[1] - t[0]
        vals = smooth_hinge(t)
        second = (vals[2:] - 2 * vals[1:-1] + vals[:-2]) / h**2
        assert second.min() >= -1e-9
        assert second.max() <= 1.0 + 1e-9


class TestGradients:
    def _fd_check(self, p, points=10, h=1e-6, tol=1e-5, seed=0):
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        for i in range(p.m):
            for _ in range(points // p.m + 1):
                x = rng.standard_normal(p.d)
                g = local_grad(p, i, x)
                fd = np.empty(p.d)
                for j in range(p.d):
                    e = np.zeros(p.d)
                    e[j] = h
                    fd[j] = (local_value(p, i, x + e) - local_value(p, i, x - e)) / (2 * h)
                assert np.linalg.norm(g - fd) <= tol * max(1.0, np.linalg.norm(g))

    def test_quadratic_formula(self, small_ridge):
        p = small_ridge
        x = np.arange(p.d, dtype=float) / p.d
        expect = p.A[2].T @ (p.A[2] @ x - p.b[2]) / p.n
        assert local_grad(p, 2, x) == pytest.approx(expect, abs=1e-12)

    def test_finite_differences_all_losses(self, small_ridge):
        self._fd_check(small_ridge)
        self._fd_check(hinge_problem())
        self._fd_check(logistic_problem())

    def test_average_gradient_vanishes_at_minimizer(self, small_ridge):
        from sonatasim import diagnostics

        oracle = diagnostics.centralized_solve(small_ridge)
        g = np.mean(
            [local_grad(small_ridge, i, oracle.x_star) for i in range(small_ridge.m)],
            axis=0,
        )
        assert np.linalg.norm(g) <= 1e-8

    def test_batch_grads_match_loops(self, small_ridge):
        X = np.random.default_rng(1).standard_normal((small_ridge.m, small_ridge.d))
        G = problems.batch_grads(small_ridge, X)
        for i in range(small_ridge.m):
            assert G[i] == pytest.approx(local_grad(small_ridge, i, X[i]), abs=1e-12)


class TestProx:
    def test_zero_is_identity(self, small_ridge, rng):
        x = rng.standard_normal(small_ridge.d)
        assert prox_r(small_ridge, x, 0.7) == pytest.approx(x)

    def test_l1_soft_threshold(self):
        p = ProblemSpec(
            "quadratic-ridge",
            np.zeros((1, 1, 2)),
            np.zeros((1, 1)),
            lam=1.0,
            reg=Regularizer("l1", weight=1.0),
        )
        out = prox_r(p, np.array([2.0, -0.5]), 1.0)
        assert out == pytest.approx([1.0, 0.0])

    def test_box_clamp(self):
        p = ProblemSpec(
            "quadratic-ridge",
            np.zeros((1, 1, 3)),
            np.zeros((1, 1)),
            lam=1.0,
            reg=Regularizer("box", lo=0.0, hi=1.0),
        )
        assert prox_r(p, np.array([-3.0, 0.4, 7.0]), 2.0) == pytest.approx([0.0, 0.4, 1.0])

    @given(
        kind=st.sampled_from(["zero", "l1", "box"]),
        step=st.floats(0.01, 10.0),
        data=st.lists(st.floats(-50, 50), min_size=4, max_size=4),
        data2=st.lists(st.floats(-50, 50), min_size=4, max_size=4),
    )
    @settings(max_examples=80, deadline=None)
    def test_nonexpansive(self, kind, step, data, data2):
        reg = {
            "zero": Regularizer(),
            "l1": Regularizer("l1", weight=0.8),
            "box": Regularizer("box", lo=-1.0, hi=2.0),
        }[kind]
        p = ProblemSpec(
            "quadratic-ridge", np.zeros((1, 1, 4)), np.zeros((1, 1)), lam=0.0, reg=reg
        )
        x, y = np.array(data), np.array(data2)
        lhs = np.linalg.norm(prox_r(p, x, step) - prox_r(p, y, step))
        assert lhs <= np.linalg.norm(x - y) + 1e-12


class TestConstants:
    def test_identical_agents_have_zero_similarity(self):
        A = np.random.default_rng(3).standard_normal((20, 5))
        p = quad_problem([A] * 4, [np.zeros(20)] * 4, lam=0.1)
        c = estimate_constants(p)
        assert c.beta_hat <= 1e-12

    def test_single_agent_diag(self):
        p = quad_problem([np.diag([1.0, 2.0])], [np.zeros(2)])
        c = estimate_constants(p)
        assert c.mu_hat == pytest.approx(0.5)
        assert c.L_hat == pytest.approx(2.0)

    def test_ordering_invariant(self, small_ridge_constants):
        c = small_ridge_constants
        assert 0 < c.mu_hat <= c.L_hat <= c.Lmx_hat + 1e-12

    def test_ordering_on_classification(self):
        c = estimate_constants(hinge_problem(lam=0.05))
        assert c.mu_hat == pytest.approx(0.05)
        assert c.mu_hat <= c.L_hat <= c.Lmx_hat + 1e-12

    def test_beta_is_exact_hessian_deviation_for_quadratic(self, small_ridge):
        p = small_ridge
        H = [problems.local_hessian(p, i) for i in range(p.m)]
        H_bar = np.mean(H, axis=0)
        expect = max(np.abs(np.linalg.eigvalsh(Hi - H_bar)).max() for Hi in H)
        c = estimate_constants(p)
        assert c.beta_hat == pytest.approx(expect, rel=1e-12)

    def test_degenerate_raises(self):
        # rank-1 data, no ridge: the average Hessian is singular
        A = np.outer(np.ones(3), np.array([1.0, 2.0]))
        p = quad_problem([A], [np.zeros(3)], lam=0.0)
        with pytest.raises(DegenerateProblemError):
            estimate_constants(p)
        with pytest.raises(DegenerateProblemError):
            estimate_constants(hinge_problem(lam=0.0))

    def test_curvature_caps(self):
        # logistic Hessian bound uses 1/4, hinge uses 1
        ph = hinge_problem(seed=8)
        pl = logistic_problem(seed=8)
        Hh = problems.hessian_bound(ph, 0) - ph.lam * np.eye(ph.d)
        Hl = problems.hessian_bound(pl, 0) - pl.lam * np.eye(pl.d)
        assert Hh == pytest.approx(4.0 * Hl)


class TestLabelsValidation:
    def test_classification_rejects_non_pm1(self):
        with pytest.raises(ValueError):
            ProblemSpec(
                "smooth-hinge",
                np.ones((1, 2, 2)),
                np.array([[1.0, 2.0]]),
                lam=0.1,
            )

    def test_negative_lam_rejected(self):
        with pytest.raises(ValueError):
            ProblemSpec("quadratic-ridge", np.ones((1, 2, 2)), np.ones((1, 2)), lam=-1.0)
