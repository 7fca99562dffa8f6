"""Round-loop behavior: determinism, recovery maps, schedules, divergence."""

import numpy as np
import pytest

import fedagm.orchestrator as orch
from fedagm import (
    ClientShard,
    ExperimentConfig,
    FederatedProblem,
    LocalConfig,
    ParameterError,
    PlateauTracker,
    QuadraticTask,
    RngStream,
    SamplingSpec,
    ScheduleSpec,
    ServerOptimizer,
    StructuralError,
    apply_schedule,
    init_params,
    make_quadratic_client_data,
    make_synthetic_federated_quadratic,
    named_optimizer,
    run_experiment,
    stochastic_gradient,
)
from fedagm.orchestrator import TAG_INIT, TAG_LOCAL
from fedagm.serialize import metrics_to_csv


def quadratic_problem(N=3, d=4, het=1.0, n=12, seed=0, noise=1.0):
    tasks, p = make_synthetic_federated_quadratic(N, d, het, RngStream(seed))
    shards = [
        ClientShard(make_quadratic_client_data(t, n, noise, RngStream(seed + 1 + i)), w)
        for i, (t, w) in enumerate(zip(tasks, p))
    ]
    return FederatedProblem(tasks, shards)


def config(problem, **kw):
    base = dict(
        problem=problem,
        local=LocalConfig(K=3, gamma=0.02, batch_size=6),
        sampling=SamplingSpec(S=2),
        server=named_optimizer("s-FedAdam", eta=0.1),
        rounds=12,
        seed=7,
    )
    base.update(kw)
    return ExperimentConfig(**base)


class TestSingleStepRecovery:
    def test_one_client_one_round_is_a_gradient_step(self):
        # S = N = 1, K = 1, avg with unit eta: the round must produce exactly
        # x0 - gamma * g where g is the one stochastic gradient drawn from
        # the round's stream.
        problem = quadratic_problem(N=1)
        cfg = config(
            problem,
            local=LocalConfig(K=1, gamma=0.05, batch_size=problem.shards[0].data.n),
            sampling=SamplingSpec(S=1, mode="full"),
            server=ServerOptimizer("avg", eta=1.0),
            rounds=1,
            seed=11,
        )
        result = run_experiment(cfg)
        root = RngStream(11)
        x0 = init_params(problem.client_tasks[0], root.derive(TAG_INIT))
        g = stochastic_gradient(
            problem.client_tasks[0],
            problem.shards[0].data,
            x0,
            problem.shards[0].data.n,
            root.derive(TAG_LOCAL, 0, 0, 0),
        )
        np.testing.assert_array_equal(result.final_x, x0 - 0.05 * g.grad)


class TestReferenceMap:
    def test_full_participation_avg_matches_naive_reimplementation(self):
        # Independent oracle: an explicit loop over rounds, clients, and
        # inner steps, averaging finals by hand. Must agree bit for bit.
        problem = quadratic_problem(N=3, seed=3)
        K, gamma, B, T = 4, 0.03, 5, 6
        cfg = config(
            problem,
            local=LocalConfig(K=K, gamma=gamma, batch_size=B),
            sampling=SamplingSpec(S=3, mode="full"),
            server=ServerOptimizer("avg", eta=1.0),
            rounds=T,
            seed=123,
        )
        result = run_experiment(cfg)

        root = RngStream(123)
        x = init_params(problem.client_tasks[0], root.derive(TAG_INIT))
        for t in range(T):
            finals = []
            for slot in range(3):
                gen = root.derive(TAG_LOCAL, t, slot, slot).generator()
                xi = x.copy()
                for _ in range(K):
                    g = stochastic_gradient(
                        problem.client_tasks[slot], problem.shards[slot].data, xi, B, gen
                    )
                    xi = xi - gamma * g.grad
                finals.append(xi)
            x = np.stack(finals).mean(axis=0)
        np.testing.assert_array_equal(result.final_x, x)


class TestDeterminism:
    def test_same_seed_same_log(self):
        problem = quadratic_problem()
        a = run_experiment(config(problem))
        b = run_experiment(config(problem))
        assert metrics_to_csv(a.metrics) == metrics_to_csv(b.metrics)
        np.testing.assert_array_equal(a.final_x, b.final_x)

    def test_thread_count_does_not_change_the_log(self):
        problem = quadratic_problem(N=5)
        cfg = config(problem, sampling=SamplingSpec(S=4), rounds=10)
        logs = {
            threads: metrics_to_csv(run_experiment(cfg, threads=threads).metrics)
            for threads in (1, 2, 5)
        }
        assert logs[1] == logs[2] == logs[5]

    def test_execution_order_does_not_change_the_log(self):
        problem = quadratic_problem(N=5)
        cfg = config(problem, sampling=SamplingSpec(S=4), rounds=8)
        base = metrics_to_csv(run_experiment(cfg).metrics)
        for order in ([3, 1, 0, 2], [2, 3, 0, 1]):
            permuted = metrics_to_csv(run_experiment(cfg, _execution_order=order).metrics)
            assert permuted == base

    def test_different_seeds_differ(self):
        problem = quadratic_problem()
        a = run_experiment(config(problem, seed=1))
        b = run_experiment(config(problem, seed=2))
        assert not np.array_equal(a.final_x, b.final_x)


class TestMessageCounts:
    def test_one_local_run_per_slot_per_round(self, monkeypatch):
        problem = quadratic_problem(N=4)
        calls = []
        real = orch.run_local

        def counting(*args, **kw):
            calls.append(1)
            return real(*args, **kw)

        monkeypatch.setattr(orch, "run_local", counting)
        cfg = config(problem, sampling=SamplingSpec(S=3), rounds=5)
        run_experiment(cfg)
        assert len(calls) == 5 * 3

    def test_one_aggregate_per_round(self, monkeypatch):
        problem = quadratic_problem()
        calls = []
        real = orch.aggregate

        def counting(*args, **kw):
            calls.append(1)
            return real(*args, **kw)

        monkeypatch.setattr(orch, "aggregate", counting)
        run_experiment(config(problem, rounds=7))
        assert len(calls) == 7


class TestMetricsLog:
    def test_row_cadence_and_fields(self):
        problem = quadratic_problem()
        cfg = config(problem, rounds=10, eval_every=3)
        result = run_experiment(cfg)
        assert [row.t for row in result.metrics] == [0, 3, 6, 9]
        for row in result.metrics:
            assert len(row.clients) == 2
            assert row.wall_ms == 0.0
            assert np.isfinite(row.train_loss)
            assert np.isfinite(row.grad_norm_sq)

    def test_walltime_opt_in(self):
        problem = quadratic_problem()
        result = run_experiment(config(problem, rounds=3, record_walltime=True))
        assert any(row.wall_ms > 0 for row in result.metrics)

    def test_loss_decreases_on_easy_problem(self):
        problem = quadratic_problem(N=4, het=0.5)
        cfg = config(
            problem,
            server=named_optimizer("FedAvg", eta=1.0),
            sampling=SamplingSpec(S=4, mode="full"),
            rounds=60,
        )
        result = run_experiment(cfg)
        assert result.metrics[-1].train_loss < result.metrics[0].train_loss
        assert result.metrics[-1].grad_norm_sq < result.metrics[0].grad_norm_sq

    def test_recorded_clients_match_slot_order(self):
        problem = quadratic_problem(N=6)
        cfg = config(problem, sampling=SamplingSpec(S=3), rounds=4)
        result = run_experiment(cfg)
        from fedagm import sample_round
        from fedagm.orchestrator import TAG_SAMPLE

        root = RngStream(cfg.seed)
        for row in result.metrics:
            expected = sample_round(problem.weights, cfg.sampling, root.derive(TAG_SAMPLE, row.t))
            assert row.clients == [int(c) for c in expected]


class TestDiagnostics:
    def test_iterates_cover_every_round_plus_final(self):
        problem = quadratic_problem()
        result = run_experiment(config(problem, rounds=9, record_iterates=True))
        assert len(result.iterates) == 10
        np.testing.assert_array_equal(result.iterates[-1], result.final_x)

    def test_drift_matrix_shape_and_zero_start(self):
        problem = quadratic_problem()
        cfg = config(problem, rounds=6, record_drift=True)
        result = run_experiment(cfg)
        assert result.drift.shape == (6, 4)
        np.testing.assert_array_equal(result.drift[:, 0], np.zeros(6))
        assert np.all(result.drift[:, 1:] >= 0)
        # drift grows with k within a round on average
        assert result.drift[:, -1].mean() >= result.drift[:, 1].mean()


class TestScaffoldIntegration:
    def test_single_client_scaffold_tracks_plain_sgd(self):
        # With N = 1 the server and client variates coincide, so the
        # correction cancels and the trajectory matches plain SGD.
        problem = quadratic_problem(N=1)
        n = problem.shards[0].data.n
        common = dict(
            sampling=SamplingSpec(S=1, mode="full"),
            server=ServerOptimizer("avg", eta=1.0),
            rounds=8,
            record_iterates=True,
        )
        plain = run_experiment(
            config(problem, local=LocalConfig(K=4, gamma=0.05, batch_size=n), **common)
        )
        scaf = run_experiment(
            config(
                problem,
                local=LocalConfig(K=4, gamma=0.05, batch_size=n, variant="scaffold"),
                **common,
            )
        )
        for xa, xb in zip(plain.iterates, scaf.iterates):
            np.testing.assert_allclose(xa, xb, atol=1e-10)

    def test_scaffold_state_is_tracked(self):
        problem = quadratic_problem(N=3)
        cfg = config(
            problem,
            local=LocalConfig(K=3, gamma=0.02, batch_size=6, variant="scaffold"),
            sampling=SamplingSpec(S=2),
            server=ServerOptimizer("avg", eta=1.0),
            rounds=5,
        )
        result = run_experiment(cfg)
        assert result.state.server_cv is not None
        assert result.state.server_cv.shape == (problem.dim,)
        # the caller's shards must never pick up control variates
        assert all(s.control_variate is None for s in problem.shards)


class TestSchedules:
    def test_multistage_boundaries(self):
        s = ScheduleSpec(kind="multistage")
        assert apply_schedule(s, 0, 100) == 1.0
        assert apply_schedule(s, 49, 100) == 1.0
        assert apply_schedule(s, 50, 100) == pytest.approx(0.1)
        assert apply_schedule(s, 75, 100) == pytest.approx(0.01)
        assert apply_schedule(s, 99, 100) == pytest.approx(0.01)

    def test_constant_is_one(self):
        assert apply_schedule(ScheduleSpec(), 5, 10) == 1.0

    def test_round_range_checked(self):
        with pytest.raises(ParameterError):
            apply_schedule(ScheduleSpec(), 10, 10)

    def test_plateau_tracker_never_decays_on_improvement(self):
        tracker = PlateauTracker(patience=3)
        for loss in np.linspace(10, 1, 50):
            tracker.update(float(loss))
        assert tracker.decays == 0

    def test_plateau_tracker_decays_on_stall(self):
        tracker = PlateauTracker(patience=4)
        tracker.update(1.0)
        for _ in range(8):
            tracker.update(1.0)
        assert tracker.decays == 2

    def test_multistage_gamma_lands_in_the_log(self):
        problem = quadratic_problem()
        cfg = config(
            problem,
            rounds=20,
            eval_every=1,
            gamma_schedule=ScheduleSpec(kind="multistage"),
        )
        result = run_experiment(cfg)
        gammas = {row.t: row.gamma for row in result.metrics}
        assert gammas[0] == pytest.approx(0.02)
        assert gammas[10] == pytest.approx(0.002)
        assert gammas[15] == pytest.approx(0.0002)

    def test_plateau_schedule_runs(self):
        problem = quadratic_problem()
        cfg = config(
            problem,
            rounds=15,
            eval_every=5,
            gamma_schedule=ScheduleSpec(kind="plateau", patience=3, factor=0.5),
        )
        result = run_experiment(cfg)
        assert len(result.metrics) == 4

    def test_schedule_validation(self):
        with pytest.raises(ParameterError):
            ScheduleSpec(kind="cosine")
        with pytest.raises(ParameterError):
            ScheduleSpec(kind="multistage", decay=0.0)
        with pytest.raises(ParameterError):
            ScheduleSpec(kind="multistage", fractions=(0.5, 1.5))
        with pytest.raises(ParameterError):
            ScheduleSpec(kind="plateau", patience=0)


class TestDivergence:
    def test_explosive_stepsize_aborts(self):
        problem = quadratic_problem()
        cfg = config(
            problem,
            local=LocalConfig(K=5, gamma=50.0, batch_size=6),
            server=named_optimizer("FedAvg", eta=1.0),
            sampling=SamplingSpec(S=3),
            rounds=200,
        )
        result = run_experiment(cfg)
        assert result.diverged
        assert result.divergence_round is not None
        assert result.divergence_round < 200
        assert len(result.metrics) < 200


class TestProblemValidation:
    def test_weight_sum_enforced(self):
        task = QuadraticTask(np.ones(2), np.zeros(2))
        data = make_quadratic_client_data(task, 4, 1.0, RngStream(0))
        with pytest.raises(StructuralError):
            FederatedProblem([task], [ClientShard(data, 0.7)])

    def test_task_shard_count_must_agree(self):
        task = QuadraticTask(np.ones(2), np.zeros(2))
        data = make_quadratic_client_data(task, 4, 1.0, RngStream(0))
        with pytest.raises(StructuralError):
            FederatedProblem([task, task], [ClientShard(data, 1.0)])

    def test_init_x_shape_checked(self):
        problem = quadratic_problem()
        cfg = config(problem, init_x=np.zeros(problem.dim + 1))
        with pytest.raises(StructuralError):
            run_experiment(cfg)

    def test_init_x_is_used_and_not_aliased(self):
        problem = quadratic_problem()
        x0 = np.full(problem.dim, 0.5)
        cfg = config(problem, rounds=1, init_x=x0, record_iterates=True)
        result = run_experiment(cfg)
        np.testing.assert_array_equal(result.iterates[0], x0)
        assert result.iterates[0] is not x0

    def test_gradient_stats_match_direct_computation(self):
        problem = quadratic_problem(N=4)
        x = np.random.default_rng(0).normal(size=problem.dim)
        gns, sg = problem.gradient_stats(x)
        g = problem.global_gradient(x)
        assert gns == pytest.approx(float(g @ g), rel=1e-12)
        from fedagm import empirical_sigma_g

        assert sg == pytest.approx(
            empirical_sigma_g(problem.client_tasks, problem.shards, [x]), rel=1e-12
        )
