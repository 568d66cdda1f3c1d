import numpy as np
import pytest

from modellight.agent import init_policy, sync_target, make_batch, dqn_gradient_step
from modellight.dynamics import OracleIntersectionModel, RolloutStream, TransitionSet
from modellight.errors import ScenarioError
from modellight.meta import (
    AdaptedTask,
    MetaConfig,
    RealEnvSource,
    TaskContext,
    TaskPool,
    TaskTrainState,
    inner_adapt,
    meta_test,
    meta_train,
    meta_update,
)
from modellight.sim import (
    MOVEMENTS,
    ArrivalSchedule,
    Scenario,
    Transition,
    TransitionCounter,
    TransitionKind,
    build_phase_table,
    encode_state,
    initial_state,
)

FOUR = build_phase_table([0, 1, 2, 3])


def mk_scenario(name="task", horizon=30, table=FOUR, rate=1.0, seed=0):
    return Scenario(
        name=name,
        phase_table=table,
        arrivals=ArrivalSchedule.from_rates({m: rate for m in MOVEMENTS}),
        horizon_steps=horizon,
        seed=seed,
    )


def small_cfg(**kw):
    defaults = dict(
        meta_rounds=2,
        tasks_per_round=2,
        real_transitions_per_task=20,
        imaginary_transitions_per_task=20,
        meta_update_interval=5,
        model_epochs=5,
        model_sample_size=20,
        real_batch_size=8,
        imaginary_batch_size=10,
        rollout_length=10,
    )
    defaults.update(kw)
    return MetaConfig(**defaults)


def real_context(scenario, theta, seed=0, batch_size=8):
    rng = np.random.default_rng(seed)
    sim_rng, policy_rng, batch_rng = rng.spawn(3)
    return TaskContext(
        name=scenario.name,
        phase_table=scenario.phase_table,
        source=RealEnvSource(scenario, sim_rng),
        buffer=TransitionSet(),
        train=TaskTrainState(target=sync_target(theta)),
        batch_size=batch_size,
        kind=TransitionKind.REAL,
        policy_rng=policy_rng,
        batch_rng=batch_rng,
    )


class TestMetaConfig:
    def test_defaults_match_reference_operating_point(self):
        cfg = MetaConfig()
        assert cfg.meta_rounds == 100
        assert cfg.model_epochs == 200
        assert cfg.tasks_per_round == 2
        assert cfg.real_transitions_per_task == 360
        assert cfg.imaginary_transitions_per_task == 360
        assert cfg.model_sample_size == 300
        assert cfg.real_batch_size == 30
        assert cfg.imaginary_batch_size == 100
        assert cfg.adapt_step_size == 0.001
        assert cfg.meta_step_size == 0.001
        assert cfg.meta_update_interval == 10
        assert cfg.model_optimizer == "adam"
        assert cfg.policy_optimizer == "sgd"
        assert cfg.epsilon_initial == 0.8
        assert cfg.epsilon_min == 0.2
        assert cfg.target_sync_interval == 5
        assert cfg.rollout_length == 36

    def test_file_roundtrip(self, tmp_path):
        import json

        cfg = small_cfg()
        path = tmp_path / "meta.json"
        path.write_text(json.dumps(cfg.to_dict()))
        assert MetaConfig.from_file(path) == cfg

    def test_unknown_field_rejected(self):
        with pytest.raises(ScenarioError, match="unknown"):
            MetaConfig.from_dict({"meta_rounds": 3, "bogus": 1})

    def test_interval_bound(self):
        with pytest.raises(ScenarioError):
            MetaConfig(meta_update_interval=500, real_transitions_per_task=100)


class TestTaskPool:
    def test_sampling(self):
        pool = TaskPool((mk_scenario("a"), mk_scenario("b"), mk_scenario("c")))
        picks = pool.sample(2, np.random.default_rng(0))
        assert len(picks) == 2
        assert len({s.name for s in picks}) == 2

    def test_empty_rejected(self):
        with pytest.raises(ScenarioError):
            TaskPool(())

    def test_duplicate_names_rejected(self):
        with pytest.raises(ScenarioError):
            TaskPool((mk_scenario("a"), mk_scenario("a")))


class TestInnerAdapt:
    def test_zero_alpha_keeps_theta_but_collects(self):
        theta = init_policy(np.random.default_rng(0))
        ctx = real_context(mk_scenario(), theta)
        adapted, collected = inner_adapt(theta, ctx, 10, 0.0, 0.9, 0.5, 5)
        assert len(collected) == 10
        assert len(ctx.buffer) == 10
        for k, v in adapted.arrays().items():
            assert np.array_equal(v, theta.arrays()[k])

    def test_exact_step_count(self):
        theta = init_policy(np.random.default_rng(1))
        ctx = real_context(mk_scenario(), theta)
        adapted, _ = inner_adapt(theta, ctx, 10, 0.001, 0.9, 0.5, 5)
        assert adapted.version == theta.version + 10

    def test_parameters_move_with_positive_alpha(self):
        theta = init_policy(np.random.default_rng(2))
        ctx = real_context(mk_scenario(rate=2.0), theta)
        adapted, _ = inner_adapt(theta, ctx, 10, 0.01, 0.9, 0.5, 5)
        assert any(
            not np.array_equal(adapted.arrays()[k], theta.arrays()[k])
            for k in theta.arrays()
        )


class TestMetaUpdate:
    def _adapted_task(self, theta, scenario, seed):
        ctx = real_context(scenario, theta, seed=seed)
        theta_prime, _ = inner_adapt(theta, ctx, 10, 0.001, 0.9, 0.5, 5)
        batch = make_batch(ctx.buffer.sample(8, ctx.batch_rng, TransitionKind.REAL))
        return AdaptedTask(theta_prime, batch, ctx.train.target, scenario.phase_table)

    def test_zero_beta_keeps_theta(self):
        theta = init_policy(np.random.default_rng(3))
        task = self._adapted_task(theta, mk_scenario(), seed=1)
        updated = meta_update(theta, [task], 0.0, 0.9)
        for k, v in updated.arrays().items():
            assert np.array_equal(v, theta.arrays()[k])
        assert updated.version == theta.version + 1

    def test_degenerate_case_equals_plain_dqn_step(self):
        # with theta' = theta (alpha 0), one task's meta update is exactly a
        # DQN gradient step at rate beta
        theta = init_policy(np.random.default_rng(4))
        ctx = real_context(mk_scenario(), theta, seed=2)
        theta_prime, _ = inner_adapt(theta, ctx, 10, 0.0, 0.9, 0.5, 5)
        batch = make_batch(ctx.buffer.sample(8, np.random.default_rng(5), TransitionKind.REAL))
        task = AdaptedTask(theta_prime, batch, ctx.train.target, FOUR)
        via_meta = meta_update(theta, [task], 0.002, 0.9)
        via_dqn, _ = dqn_gradient_step(theta, batch, ctx.train.target, 0.9, 0.002, FOUR)
        for k in theta.arrays():
            assert np.allclose(via_meta.arrays()[k], via_dqn.arrays()[k], atol=1e-15)

    def test_two_tasks_sum_of_isolated_updates(self):
        theta = init_policy(np.random.default_rng(6))
        t1 = self._adapted_task(theta, mk_scenario("a", seed=1), seed=3)
        t2 = self._adapted_task(theta, mk_scenario("b", seed=2), seed=4)
        joint = meta_update(theta, [t1, t2], 0.001, 0.9)
        solo1 = meta_update(theta, [t1], 0.001, 0.9)
        solo2 = meta_update(theta, [t2], 0.001, 0.9)
        for k, base in theta.arrays().items():
            combined = solo1.arrays()[k] + solo2.arrays()[k] - base
            assert np.allclose(joint.arrays()[k], combined, atol=1e-12)

    def test_empty_rejected(self):
        theta = init_policy(np.random.default_rng(7))
        with pytest.raises(ValueError):
            meta_update(theta, [], 0.001, 0.9)


class TestMetaTrain:
    def _pool(self):
        return TaskPool(
            (
                mk_scenario("left-heavy", rate=0.8, seed=1),
                mk_scenario("right-heavy", rate=1.2, seed=2),
            )
        )

    def test_budget_accounting(self):
        cfg = small_cfg()
        counter = TransitionCounter()
        result = meta_train(self._pool(), cfg, 0, counter=counter)
        expected = cfg.meta_rounds * cfg.tasks_per_round * cfg.real_transitions_per_task
        assert counter.count == expected
        assert result.counter is counter

    def test_round_logs(self):
        cfg = small_cfg()
        result = meta_train(self._pool(), cfg, 1)
        assert len(result.logs) == cfg.meta_rounds
        for log in result.logs:
            for task_log in log.tasks:
                assert task_log.real_transitions == cfg.real_transitions_per_task
                assert task_log.imaginary_transitions == cfg.imaginary_transitions_per_task
                assert np.isfinite(task_log.model_loss)
            # real-phase windows + imaginary-phase windows
            assert log.meta_updates == 4 + 4

    def test_model_free_variant_trains_no_models(self):
        cfg = small_cfg()
        result = meta_train(self._pool(), cfg, 2, model_based=False)
        assert len(result.ensemble) == 0
        for log in result.logs:
            for task_log in log.tasks:
                assert task_log.imaginary_transitions == 0

    def test_determinism(self):
        cfg = small_cfg(meta_rounds=1)
        r1 = meta_train(self._pool(), cfg, 42)
        r2 = meta_train(self._pool(), cfg, 42)
        for k, v in r1.theta.arrays().items():
            assert np.array_equal(v, r2.theta.arrays()[k])

    def test_ensemble_tracks_distinct_tasks(self):
        cfg = small_cfg(meta_rounds=3)
        result = meta_train(self._pool(), cfg, 3)
        assert len(result.ensemble) == 2

    def test_shared_model_ablation(self):
        cfg = small_cfg(shared_model=True)
        result = meta_train(self._pool(), cfg, 4)
        assert len(result.ensemble) == 1

    def test_maml_style_interval(self):
        # one meta update per full episode when the window spans all steps
        cfg = small_cfg(meta_update_interval=20, imaginary_transitions_per_task=20)
        result = meta_train(self._pool(), cfg, 5, model_based=False)
        assert all(log.meta_updates == 1 for log in result.logs)


class TestOracleEquivalence:
    def test_imagined_phase_matches_real_phase_with_perfect_model(self):
        # drive the imaginary machinery with the true dynamics and identical
        # seeds: parameter trajectories must match the real-data phase exactly
        scenario = mk_scenario("oracle", horizon=20, rate=1.5, seed=9)
        cfg = small_cfg(
            real_transitions_per_task=20,
            imaginary_transitions_per_task=20,
            meta_update_interval=5,
            rollout_length=20,
        )
        theta = init_policy(np.random.default_rng(10))
        obs0 = encode_state(initial_state(), scenario.phase_table)

        def seed_transition(kind):
            return Transition(obs0.copy(), 0, obs0.copy(), 0.0, kind)

        def run(kind):
            arrival_rng = np.random.default_rng(100)
            policy_rng = np.random.default_rng(101)
            batch_rng = np.random.default_rng(102)
            buffer = TransitionSet([seed_transition(kind)])
            if kind is TransitionKind.REAL:
                source = RealEnvSource(scenario, arrival_rng)
            else:
                oracle = OracleIntersectionModel(scenario, arrival_rng)
                source = RolloutStream(
                    oracle, [obs0], cfg.rollout_length, np.random.default_rng(103),
                    scenario.phase_table,
                )
            ctx = TaskContext(
                name="oracle",
                phase_table=scenario.phase_table,
                source=source,
                buffer=buffer,
                train=TaskTrainState(target=sync_target(theta)),
                batch_size=8,
                kind=kind,
                policy_rng=policy_rng,
                batch_rng=batch_rng,
            )
            out = theta
            for _ in range(4):
                out_prime, _ = inner_adapt(out, ctx, 5, cfg.adapt_step_size, 0.9, 0.4, 5)
                batch = make_batch(ctx.buffer.sample(8, ctx.batch_rng, kind), kind)
                out = meta_update(
                    out, [AdaptedTask(out_prime, batch, ctx.train.target, scenario.phase_table)],
                    cfg.meta_step_size, 0.9,
                )
            return out

        real_theta = run(TransitionKind.REAL)
        imag_theta = run(TransitionKind.IMAGINARY)
        for k, v in real_theta.arrays().items():
            assert np.array_equal(v, imag_theta.arrays()[k]), k


class TestMetaTest:
    def _trained(self):
        pool = TaskPool((mk_scenario("a", rate=1.0, seed=1), mk_scenario("b", rate=1.5, seed=2)))
        return meta_train(pool, small_cfg(meta_rounds=1), 11).theta

    def test_six_phase_adaptation_without_reshaping(self):
        theta = self._trained()
        target = mk_scenario("six", horizon=30, table=build_phase_table([0, 1, 2, 3, 6, 7]))
        result = meta_test(theta, target, small_cfg(), 12)
        assert result.adapt_updates == 30
        assert result.eval_travel_time_s >= 0.0

    def test_eval_is_frozen_at_floor_epsilon(self):
        theta = self._trained()
        result = meta_test(theta, mk_scenario("t", seed=5), small_cfg(), 13)
        assert result.eval_updates == 0
        assert result.eval_epsilon == 0.2
        assert result.adapted.version == theta.version + 30

    def test_determinism(self):
        theta = self._trained()
        target = mk_scenario("t", seed=6)
        a = meta_test(theta, target, small_cfg(), 14)
        b = meta_test(theta, target, small_cfg(), 14)
        assert a.eval_travel_time_s == b.eval_travel_time_s
        assert a.adapt_travel_time_s == b.adapt_travel_time_s

    def test_counter_counts_adaptation_only(self):
        theta = self._trained()
        counter = TransitionCounter()
        meta_test(theta, mk_scenario("t", horizon=25, seed=7), small_cfg(), 15, counter=counter)
        assert counter.count == 25
