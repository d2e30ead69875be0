"""Training-loop tests: update rules, stream discipline, abort semantics."""

import csv
import math

import numpy as np
import pytest

import berngrad.optim as op
from berngrad.core import RngStream, ThetaVec, logit, sigmoid
from berngrad.estimators import EstimatorKind, exact_gradient, gradient
from berngrad.objectives import FunctionObjective, p1, p2
from berngrad.variance import mc_variance


def config(**kwargs):
    base = dict(kind=EstimatorKind("disarm"), lr=0.5, iterations=3,
                loss_samples=50)
    base.update(kwargs)
    return op.OptimizerConfig(**base)


class TestUpdateRules:
    def test_projected_step(self):
        out = op.projected_step(np.array([0.5]), np.array([0.2]), 1.0)
        assert out.tolist() == [0.3]

    def test_projection_clamps_both_ends(self):
        out = op.projected_step(np.array([0.1, 0.9]), np.array([1.0, -1.0]), 0.5)
        assert out.tolist() == [0.0, 1.0]

    def test_logit_step_chain_rule(self):
        # at phi = 0, theta (1 - theta) = 1/4, so lr=2, g=1 moves phi by -1/2
        out = op.logit_step(np.array([0.0]), np.array([1.0]), 2.0)
        assert out.tolist() == [-0.5]

    def test_logit_step_clamps_large_kicks(self):
        out = op.logit_step(np.array([0.0]), np.array([-1e6]), 2.0)
        assert out.tolist() == [op.LOGIT_CLAMP]
        # the clamp boundary still maps strictly inside (0, 1)
        assert 0.0 < sigmoid(np.array([op.LOGIT_CLAMP]))[0] < 1.0
        assert 1.0 - sigmoid(np.array([op.LOGIT_CLAMP]))[0] < 1e-12

    def test_adam_first_step_is_lr_sized(self):
        state = op.AdamState.zeros(1)
        out = op.adam_logit_step(np.array([0.0]), np.array([4.0]), 0.3, state)
        assert out[0] == pytest.approx(-0.3, rel=1e-6)
        assert state.t == 1

    def test_adam_state_accumulates(self):
        state = op.AdamState.zeros(2)
        phi = np.zeros(2)
        for _ in range(5):
            phi = op.adam_logit_step(phi, np.array([1.0, -1.0]), 0.1, state)
        assert state.t == 5
        assert phi[0] < 0 < phi[1]
        assert np.all(state.v > 0)


class TestConfigValidation:
    def test_rejects_bad_values(self):
        for bad in (dict(lr=0.0), dict(iterations=-1),
                    dict(param_mode="theta"), dict(loss_samples=0),
                    dict(variance_every=-1), dict(variance_samples=1),
                    dict(adam_beta1=1.0), dict(adam_eps=0.0)):
            with pytest.raises(ValueError):
                config(**bad)


class TestEstimateLoss:
    def test_monte_carlo_path_replays(self):
        f = FunctionObjective(lambda b: float(3 * b[0] + b[1]), 2)
        theta = ThetaVec(np.array([0.3, 0.8]))
        rng = RngStream(seed=5, iteration=2, purpose="loss")
        out = op.estimate_loss(f, theta, rng, 40)
        u = rng.uniforms(80).reshape(40, 2)
        bits = ((1.0 - u) < theta.values).astype(np.int8)
        manual = np.mean([3 * r[0] + r[1] for r in bits])
        assert out == pytest.approx(manual, rel=1e-15)

    def test_monte_carlo_is_consistent(self):
        f = FunctionObjective(lambda b: float(b.sum()), 3)
        theta = ThetaVec(np.array([0.1, 0.5, 0.9]))
        out = op.estimate_loss(f, theta, RngStream(seed=7), 4000)
        assert out == pytest.approx(1.5, abs=0.06)

    def test_monte_carlo_tracks_closed_form(self):
        # the sampler and the closed form must describe the same distribution
        f = p2(4, 0.7)
        theta = ThetaVec(np.array([0.15, 0.4, 0.6, 0.9]))
        out = op.estimate_loss(f, theta, RngStream(seed=21), 20000)
        assert out == pytest.approx(f.exact_expected_loss(theta), rel=0.05)

    def test_sample_count_validation(self):
        f = FunctionObjective(lambda b: 0.0, 1)
        with pytest.raises(ValueError):
            op.estimate_loss(f, ThetaVec.full(1, 0.5), RngStream(seed=1), 0)


class TestRunTraining:
    def test_zero_iterations_single_record(self):
        theta0 = ThetaVec(np.array([0.2, 0.5]))
        traj = op.run_training(p1(2, 0.499), theta0, config(iterations=0),
                               RngStream(seed=3))
        assert len(traj.records) == 1
        rec = traj.records[0]
        assert rec.iteration == 0 and rec.evals_cum == 0
        assert rec.loss_exact == p1(2, 0.499).exact_expected_loss(theta0)
        assert math.isfinite(rec.loss_mc)
        assert rec.variance is None
        np.testing.assert_array_equal(rec.theta, theta0.values)
        np.testing.assert_array_equal(traj.final_theta.values, theta0.values)

    def test_records_both_loss_figures(self):
        traj = op.run_training(p2(3, 0.8), ThetaVec.full(3, 0.3),
                               config(iterations=2, loss_samples=400),
                               RngStream(seed=14))
        for rec in traj.records:
            assert rec.loss_exact is not None
            # 400 draws lands in the right neighborhood of the closed form
            assert rec.loss_mc == pytest.approx(rec.loss_exact, abs=0.5)
            assert rec.loss == rec.loss_exact

    def test_no_closed_form_leaves_exact_unset(self):
        f = FunctionObjective(lambda b: float(b.sum()), 2)
        traj = op.run_training(f, ThetaVec.full(2, 0.4), config(iterations=1),
                               RngStream(seed=14))
        for rec in traj.records:
            assert rec.loss_exact is None
            assert rec.loss == rec.loss_mc

    def test_deterministic_replay(self):
        theta0 = ThetaVec.full(4, 0.4)
        runs = [op.run_training(p2(4, 1.2), theta0, config(iterations=6),
                                RngStream(seed=11, replicate=2))
                for _ in range(2)]
        np.testing.assert_array_equal(runs[0].losses_mc, runs[1].losses_mc)
        np.testing.assert_array_equal(runs[0].thetas, runs[1].thetas)
        assert ([r.evals_cum for r in runs[0].records]
                == [r.evals_cum for r in runs[1].records])
        np.testing.assert_array_equal(runs[0].final_theta.values,
                                      runs[1].final_theta.values)

    def test_single_exact_step_matches_manual_update(self):
        theta0 = ThetaVec(np.array([0.3, 0.6]))
        f = p2(2, 0.4)
        cfg = config(kind=EstimatorKind("exact"), lr=0.1, iterations=1)
        traj = op.run_training(f, theta0, cfg, RngStream(seed=2))
        manual = op.projected_step(theta0.values,
                                   exact_gradient(f, theta0).g, 0.1)
        np.testing.assert_allclose(traj.final_theta.values, manual, rtol=1e-15)
        assert traj.records[0].evals_cum == 0
        assert traj.records[1].evals_cum == 4

    def test_evals_accumulate_estimator_budget_only(self):
        theta0 = ThetaVec.full(3, 0.5)
        traj = op.run_training(p2(3, 0.5), theta0, config(iterations=3),
                               RngStream(seed=8))
        assert [r.evals_cum for r in traj.records] == [0, 2, 4, 6]

    def test_gradient_step_uses_gradient_stream(self):
        # replay iteration 0 by hand through the documented stream layout
        theta0 = ThetaVec(np.array([0.3, 0.7]))
        f = p2(2, 0.4)
        base = RngStream(seed=42, replicate=1)
        cfg = config(iterations=1, lr=0.5)
        traj = op.run_training(f, theta0, cfg, base)
        grad = gradient(cfg.kind, p2(2, 0.4), theta0,
                        base.child(iteration=0, purpose="grad"),
                        endpoint_mode="freeze")
        manual = op.projected_step(theta0.values, grad.g, 0.5)
        np.testing.assert_array_equal(traj.final_theta.values, manual)

    def test_exact_descent_on_coupled_objective(self):
        # lr=2 overshoots every mean to the clamp at 0, landing exactly on the
        # coupled objective's optimum value t^2
        theta0 = ThetaVec.full(5, 0.2)
        cfg = config(kind=EstimatorKind("exact"), lr=2.0, iterations=10)
        traj = op.run_training(p2(5, 0.5), theta0, cfg, RngStream(seed=1))
        assert traj.final_loss == pytest.approx(0.25, abs=1e-12)
        assert traj.records[0].loss_exact == pytest.approx(1.05, rel=1e-12)

    def test_flip_estimator_descends_separable_objective(self):
        k = 10
        cfg = config(kind=EstimatorKind("bitflip1"), lr=0.8, iterations=700,
                     loss_samples=1)
        traj = op.run_training(p1(k, 0.499), ThetaVec.full(k, 0.5), cfg,
                               RngStream(seed=33))
        optimum = k * 0.499**2
        assert traj.final_loss <= optimum + 1e-3 * k
        assert np.all(traj.final_theta.values < 0.05)

    def test_logit_mode_stays_interior(self):
        cfg = config(param_mode="logit-sgd", lr=2.0, iterations=8)
        traj = op.run_training(p2(3, 0.5), ThetaVec.full(3, 0.2), cfg,
                               RngStream(seed=6))
        assert np.all(traj.final_theta.values > 0.0)
        assert np.all(traj.final_theta.values < 1.0)

    def test_logit_single_step_matches_manual_update(self):
        theta0 = ThetaVec(np.array([0.3, 0.6]))
        f = p2(2, 0.4)
        base = RngStream(seed=13)
        cfg = config(param_mode="logit-sgd", lr=1.5, iterations=1)
        traj = op.run_training(f, theta0, cfg, base)
        grad = gradient(cfg.kind, p2(2, 0.4), theta0,
                        base.child(iteration=0, purpose="grad"),
                        endpoint_mode="freeze")
        phi1 = op.logit_step(logit(theta0.values), grad.g, 1.5)
        np.testing.assert_allclose(traj.final_theta.values, sigmoid(phi1),
                                   rtol=1e-15)

    def test_logit_mode_rejects_endpoint_start(self):
        cfg = config(param_mode="logit-sgd")
        with pytest.raises(ValueError, match="strictly inside"):
            op.run_training(p1(2, 0.5), ThetaVec(np.array([0.0, 0.5])), cfg,
                            RngStream(seed=1))

    def test_adam_mode_runs_and_differs_from_sgd(self):
        theta0 = ThetaVec.full(3, 0.2)
        kwargs = dict(lr=0.05, iterations=10)
        sgd = op.run_training(p2(3, 0.5), theta0,
                              config(param_mode="logit-sgd", **kwargs),
                              RngStream(seed=9))
        adam = op.run_training(p2(3, 0.5), theta0,
                               config(param_mode="logit-adam", **kwargs),
                               RngStream(seed=9))
        assert not np.array_equal(sgd.final_theta.values,
                                  adam.final_theta.values)


class TestEndpointAndAbort:
    def test_freeze_mode_trains_through_endpoints(self):
        theta0 = ThetaVec(np.array([0.0, 0.5, 1.0]))
        cfg = config(kind=EstimatorKind("reinforce"), iterations=3)
        traj = op.run_training(p1(3, 0.3), theta0, cfg, RngStream(seed=4))
        assert len(traj.records) == 4
        # frozen coordinates never move
        assert traj.final_theta.values[0] == 0.0
        assert traj.final_theta.values[2] == 1.0

    def test_raise_mode_aborts_at_start(self):
        theta0 = ThetaVec(np.array([0.0, 0.5]))
        cfg = config(kind=EstimatorKind("reinforce"), endpoint_mode="raise")
        with pytest.raises(op.TrainingAbort) as err:
            op.run_training(p1(2, 0.3), theta0, cfg, RngStream(seed=4))
        assert err.value.iteration == 0

    def test_abort_reports_the_failing_iteration(self):
        # constant objective: the score estimate kicks theta from 1/2 straight
        # onto an endpoint, so raise mode must fail exactly at iteration 1
        f = FunctionObjective(lambda b: 1.0, 1)
        cfg = config(kind=EstimatorKind("reinforce"), endpoint_mode="raise",
                     lr=1.0, iterations=5, loss_samples=1)
        with pytest.raises(op.TrainingAbort) as err:
            op.run_training(f, ThetaVec.full(1, 0.5), cfg, RngStream(seed=10))
        assert err.value.iteration == 1
        assert "exactly 0 or 1" in err.value.reason


class TestVarianceProbes:
    def test_probe_schedule_and_replay(self):
        theta0 = ThetaVec.full(3, 0.4)
        base = RngStream(seed=15, replicate=3)
        cfg = config(iterations=4, variance_every=2, variance_samples=30)
        traj = op.run_training(p2(3, 0.5), theta0, cfg, base)
        probed = [r.iteration for r in traj.records if r.variance is not None]
        assert probed == [0, 2, 4]
        report = mc_variance(cfg.kind, p2(3, 0.5), theta0,
                             base.child(iteration=0, purpose="variance"), 30,
                             endpoint_mode="freeze")
        np.testing.assert_array_equal(traj.records[0].variance, report.var)

    def test_probes_disabled_by_default(self):
        traj = op.run_training(p2(2, 0.5), ThetaVec.full(2, 0.4),
                               config(iterations=2), RngStream(seed=1))
        assert all(r.variance is None for r in traj.records)


class TestTrajectoryCsv:
    def test_schema_and_round_trip(self, tmp_path):
        cfg = config(iterations=3, variance_every=2, variance_samples=20)
        traj = op.run_training(p2(2, 0.5), ThetaVec.full(2, 0.4), cfg,
                               RngStream(seed=19))
        path = tmp_path / "trajectory.csv"
        traj.to_csv(path)
        with open(path) as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["iter", "loss_mc", "loss_exact", "evals_cum",
                           "var_0", "var_1"]
        assert len(rows) == 5
        for rec, row in zip(traj.records, rows[1:]):
            assert int(row[0]) == rec.iteration
            assert float(row[1]) == rec.loss_mc
            assert float(row[2]) == rec.loss_exact
            assert int(row[3]) == rec.evals_cum
            if rec.variance is None:
                assert row[4] == "" and row[5] == ""
            else:
                assert [float(row[4]), float(row[5])] == rec.variance.tolist()

    def test_theta_columns_on_request(self, tmp_path):
        traj = op.run_training(p2(2, 0.5), ThetaVec.full(2, 0.4),
                               config(iterations=1), RngStream(seed=3))
        path = tmp_path / "trajectory.csv"
        traj.to_csv(path, include_theta=True)
        with open(path) as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["iter", "loss_mc", "loss_exact", "evals_cum",
                           "theta_0", "theta_1"]
        for rec, row in zip(traj.records, rows[1:]):
            assert [float(row[4]), float(row[5])] == rec.theta.tolist()

    def test_no_closed_form_drops_exact_column(self, tmp_path):
        f = FunctionObjective(lambda b: float(b.sum()), 2)
        traj = op.run_training(f, ThetaVec.full(2, 0.4), config(iterations=1),
                               RngStream(seed=3))
        path = tmp_path / "trajectory.csv"
        traj.to_csv(path)
        with open(path) as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["iter", "loss_mc", "evals_cum"]

    def test_loss_helpers(self):
        traj = op.run_training(p1(2, 0.3), ThetaVec.full(2, 0.5),
                               config(iterations=2), RngStream(seed=2))
        assert traj.losses.shape == (3,)
        assert traj.losses_mc.shape == (3,)
        assert traj.thetas.shape == (3, 2)
        assert traj.final_loss == traj.records[-1].loss
