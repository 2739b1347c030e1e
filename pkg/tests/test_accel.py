import math

import numpy as np
import pytest

from sonatasim import accel, diagnostics, network, problems, sonata
from sonatasim.accel import (
    AccelParams,
    DegenerateSimilarityError,
    PerfectlyConditionedError,
    RunObserver,
    acc_sonata_run,
    plain_params,
    tune,
    with_overrides,
)
from sonatasim.problems import Constants
from sonatasim.sonata import Surrogate


class TestTune:
    def test_alpha_formula(self):
        c = Constants(mu_hat=1.0, L_hat=10.0, Lmx_hat=12.0, beta_hat=4.0)
        params = tune(c, "F")
        assert params.delta == pytest.approx(3.0)
        assert params.alpha == pytest.approx(0.5)

    def test_alpha_identity_invariant(self):
        c = Constants(mu_hat=0.37, L_hat=210.0, Lmx_hat=260.0, beta_hat=55.0)
        for mode in ("F", "L"):
            p = tune(c, mode)
            assert abs(p.alpha**2 * (p.mu + p.delta) - p.mu) <= 1e-12

    def test_inner_length_log_rule(self):
        mu = 1.0
        c = Constants(mu_hat=mu, L_hat=100.0, Lmx_hat=120.0, beta_hat=math.e**2)
        assert tune(c, "F").T == 2
        c2 = Constants(mu_hat=mu, L_hat=100.0, Lmx_hat=120.0, beta_hat=1.0001)
        assert tune(c2, "F").T == 1
        c3 = Constants(mu_hat=1.0, L_hat=math.e**3, Lmx_hat=math.e**3, beta_hat=2.0)
        assert tune(c3, "L").T == 3

    def test_alt_variant_swaps_pairing(self):
        c = Constants(mu_hat=1.0, L_hat=50.0, Lmx_hat=60.0, beta_hat=8.0)
        assert tune(c, "F", tuning_variant="alt").T == math.ceil(1.4 * math.log(50.0))
        assert tune(c, "L", tuning_variant="alt").T == math.ceil(math.log(8.0))

    def test_degenerate_modes_raise(self):
        c = Constants(mu_hat=5.0, L_hat=50.0, Lmx_hat=60.0, beta_hat=2.0)
        with pytest.raises(DegenerateSimilarityError):
            tune(c, "F")
        c2 = Constants(mu_hat=5.0, L_hat=5.0, Lmx_hat=5.0, beta_hat=2.0)
        with pytest.raises(PerfectlyConditionedError):
            tune(c2, "L")

    def test_surrogate_weights(self):
        c = Constants(mu_hat=1.0, L_hat=10.0, Lmx_hat=12.0, beta_hat=4.0)
        assert tune(c, "F").surrogate == Surrogate("F", 4.0)
        pl = tune(c, "L")
        assert pl.surrogate.kind == "L"
        assert pl.surrogate.weight == pytest.approx(10.0 + 9.0)  # L + delta

    def test_mu_override(self):
        c = Constants(mu_hat=1.0, L_hat=10.0, Lmx_hat=12.0, beta_hat=4.0)
        p = tune(c, "F", mu_override=0.25)
        assert p.mu == 0.25
        assert p.alpha == pytest.approx(math.sqrt(0.25 / 4.0))

    def test_with_overrides_recomputes_alpha(self):
        c = Constants(mu_hat=1.0, L_hat=10.0, Lmx_hat=12.0, beta_hat=4.0)
        p = with_overrides(tune(c, "F"), delta=8.0)
        assert p.alpha == pytest.approx(math.sqrt(1.0 / 9.0))

    def test_extrapolation_coefficient_range(self):
        for delta in (0.0, 0.5, 10.0, 1e6):
            mu = 1.0
            p = AccelParams(
                mode="F",
                delta=delta,
                alpha=math.sqrt(mu / (mu + delta)),
                T=1,
                mu=mu,
                surrogate=Surrogate("F", 1.0),
            )
            assert 0.0 <= p.extrapolation_coef < 1.0


class TestAccSonataRun:
    def test_tracking_identity_across_warm_restarts(
        self, small_ridge, small_ridge_constants, small_gossip
    ):
        p = small_ridge
        params = tune(small_ridge_constants, "F")
        worst = [0.0]

        class Watch(RunObserver):
            def __init__(self):
                self.delta_z = None

            def on_outer_start(self, k, comms, X, Y_warm, Z, Z_prev):
                self.delta_z = np.array(Z)
                worst[0] = max(
                    worst[0], sonata.tracking_gap(p, X, Y_warm, params.delta, Z)
                )

            def on_inner_step(self, k, t, comms, X, Y):
                worst[0] = max(
                    worst[0], sonata.tracking_gap(p, X, Y, params.delta, self.delta_z)
                )

        acc_sonata_run(p, params, small_gossip, K_max=20, observer=Watch())
        assert worst[0] <= 1e-10

    def test_delta_zero_equals_plain_inner_loop(
        self, small_ridge, small_ridge_constants, small_gossip
    ):
        p = small_ridge
        params = plain_params(small_ridge_constants, "F", T=3)
        seen = []

        class Cap(RunObserver):
            def on_inner_step(self, k, t, comms, X, Y):
                seen.append(np.array(X))

        acc_sonata_run(p, params, small_gossip, K_max=6, observer=Cap())
        X0 = np.zeros((p.m, p.d))
        Y0 = problems.batch_grads(p, X0)
        plain = []
        sonata.sonata_run(
            p,
            X0,
            Y0,
            18,
            small_gossip,
            params.surrogate,
            on_step=lambda t, cm, X, Y: plain.append(np.array(X)),
        )
        for a, b in zip(seen, plain):
            assert np.max(np.abs(a - b)) <= 1e-12

    def test_comm_counter_is_k_times_t_times_rounds(
        self, small_ridge, small_ridge_constants, small_gossip
    ):
        p = small_ridge
        base = small_gossip
        W = network.chebyshev_accelerate(base, 3)
        params = tune(small_ridge_constants, "F")
        res = acc_sonata_run(p, params, W, K_max=5)
        assert res.comms == 5 * params.T * W.rounds_per_application

    def test_half_duplex_flag_doubles_count(
        self, small_ridge, small_ridge_constants, small_gossip
    ):
        params = tune(small_ridge_constants, "F")
        res = acc_sonata_run(
            small_ridge, params, small_gossip, K_max=3, count_half_duplex=True
        )
        assert res.comms == 2 * 3 * params.T

    def test_target_gap_stops_early(self, small_ridge, small_ridge_constants, small_gossip):
        p = small_ridge
        oracle = diagnostics.centralized_solve(p)
        params = tune(small_ridge_constants, "F")
        res = acc_sonata_run(
            p,
            params,
            small_gossip,
            K_max=200,
            gap_fn=lambda X: diagnostics.optimality_gap(p, X, oracle),
            target_gap=1e-6,
        )
        assert res.converged and res.K_done < 200
        assert res.gaps[-1] <= 1e-6

    def test_gap_decreases_geometrically_in_tail(
        self, small_ridge, small_ridge_constants, small_gossip
    ):
        p = small_ridge
        oracle = diagnostics.centralized_solve(p)
        params = tune(small_ridge_constants, "F")
        res = acc_sonata_run(
            p,
            params,
            small_gossip,
            K_max=40,
            gap_fn=lambda X: diagnostics.optimality_gap(p, X, oracle),
        )
        factor = diagnostics.fit_contraction_factor(res.gaps)
        assert factor < 1.0


class TestCompositeObjective:
    def test_l1_run_reaches_composite_optimum(self, small_gossip):
        from sonatasim.problems import Regularizer
        from sonatasim import datagen

        cfg = datagen.SyntheticRidgeConfig(m=6, n=120, d=10, mu0=1.0, L0=100.0, seed=11)
        p = datagen.gen_ridge(cfg)
        p.reg = Regularizer("l1", weight=0.5)
        c = problems.estimate_constants(p)
        oracle = diagnostics.centralized_solve(p, tol=1e-12)
        params = tune(c, "F")
        res = acc_sonata_run(
            p, params, small_gossip, K_max=150,
            gap_fn=lambda X: diagnostics.optimality_gap(p, X, oracle),
            target_gap=1e-7,
        )
        assert res.converged
        assert all(res.subproblem_converged)

    def test_box_constraint_keeps_iterates_feasible(self, small_gossip):
        from sonatasim.problems import Regularizer
        from sonatasim import datagen

        cfg = datagen.SyntheticRidgeConfig(m=6, n=120, d=10, mu0=1.0, L0=100.0, seed=11)
        p = datagen.gen_ridge(cfg)
        p.reg = Regularizer("box", lo=0.0, hi=4.0)
        c = problems.estimate_constants(p)
        params = tune(c, "L")
        seen = []

        class Cap(RunObserver):
            def on_inner_step(self, k, t, comms, X, Y):
                seen.append(np.array(X))

        acc_sonata_run(p, params, small_gossip, K_max=10, observer=Cap())
        final = seen[-1]
        assert final.min() >= -1e-12 and final.max() <= 4.0 + 1e-12

    def test_subproblem_cap_is_flagged_not_fatal(self, small_gossip):
        from sonatasim.problems import Regularizer
        from sonatasim import datagen

        cfg = datagen.SyntheticRidgeConfig(m=6, n=120, d=10, mu0=1.0, L0=100.0, seed=11)
        p = datagen.gen_ridge(cfg)
        p.reg = Regularizer("l1", weight=0.1)
        c = problems.estimate_constants(p)
        params = tune(c, "F")
        res = acc_sonata_run(
            p, params, small_gossip, K_max=3, max_inner_iters=2, subproblem_tol=1e-14
        )
        assert res.K_done == 3
        assert not all(res.subproblem_converged)


def single_agent_problem(seed=2, n=60, d=8):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((1, n, d))
    b = rng.standard_normal((1, n))
    return problems.ProblemSpec("quadratic-ridge", A, b, lam=0.05)


class TestSingleMachineEquivalence:
    def _params(self, p, mode):
        c = problems.estimate_constants(p)
        mu = c.mu_hat
        delta = 0.5 * (c.L_hat - mu)
        weight = 0.3 * c.L_hat if mode == "F" else c.L_hat + delta
        return (
            AccelParams(
                mode=mode,
                delta=delta,
                alpha=math.sqrt(mu / (mu + delta)),
                T=3,
                mu=mu,
                surrogate=Surrogate(mode, weight),
            ),
            c,
        )

    def test_full_surrogate_matches_reference(self):
        p = single_agent_problem()
        params, c = self._params(p, "F")
        beta = params.surrogate.weight
        outs = []

        class Cap(RunObserver):
            def on_outer_end(self, k, comms, X, X_prev, Y, Z, Z_prev):
                outs.append(X[0].copy())

        acc_sonata_run(p, params, network.exact_averaging(1), K_max=8, observer=Cap())

        H = problems.local_hessian(p, 0)
        h = p.A[0].T @ p.b[0] / p.n
        x = np.zeros(p.d)
        z = x.copy()
        coef = params.extrapolation_coef
        for k in range(8):
            xc = x.copy()
            for _ in range(params.T):
                xc = np.linalg.solve(
                    H + (params.delta + beta) * np.eye(p.d),
                    h + params.delta * z + beta * xc,
                )
            z = xc + coef * (xc - x)
            x = xc
            assert np.max(np.abs(outs[k] - x)) <= 1e-9

    def test_linearized_surrogate_matches_reference(self):
        p = single_agent_problem(seed=3)
        params, c = self._params(p, "L")
        L_surr = params.surrogate.weight
        outs = []

        class Cap(RunObserver):
            def on_outer_end(self, k, comms, X, X_prev, Y, Z, Z_prev):
                outs.append(X[0].copy())

        acc_sonata_run(p, params, network.exact_averaging(1), K_max=8, observer=Cap())

        H = problems.local_hessian(p, 0)
        h = p.A[0].T @ p.b[0] / p.n
        x = np.zeros(p.d)
        z = x.copy()
        coef = params.extrapolation_coef
        for k in range(8):
            xc = x.copy()
            for _ in range(params.T):
                g = H @ xc - h + params.delta * (xc - z)
                xc = xc - g / L_surr
            z = xc + coef * (xc - x)
            x = xc
            assert np.max(np.abs(outs[k] - x)) <= 1e-9
