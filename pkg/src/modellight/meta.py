"""Meta-training across traffic tasks.

Each round samples a batch of tasks and interleaves short adaptation windows
with meta updates: the adapted policy restarts from the shared initialization
every window, takes one TD gradient step per generated transition, and after
each window the initialization absorbs the adapted policies' loss gradients
(first-order, evaluated at the adapted parameters). A round then fits each
task's dynamics model on that round's real transitions and repeats the same
alternation on model-generated experience.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from . import nn
from .agent import (
    MAX_GRAD_NORM,
    EpsilonSchedule,
    PolicyParams,
    ReplayBatch,
    bellman_targets,
    clip_gradients,
    dqn_gradient_step,
    init_policy,
    make_batch,
    q_values,
    select_action,
    sync_target,
    td_loss_and_gradients,
)
from .dynamics import (
    IntersectionModel,
    ModelEnsemble,
    RolloutStream,
    TransitionSet,
    train_intersection_model,
)
from .errors import ScenarioError
from .sim import (
    EpisodeRunner,
    EpisodeStats,
    PhaseTable,
    Scenario,
    Transition,
    TransitionCounter,
    TransitionKind,
    average_travel_time,
)


@dataclass(frozen=True)
class MetaConfig:
    """All hyperparameters of the meta-training loop.

    Field names mirror the run configuration file one-to-one; defaults are the
    reference operating point.
    """

    meta_rounds: int = 100
    model_epochs: int = 200
    tasks_per_round: int = 2
    real_transitions_per_task: int = 360
    imaginary_transitions_per_task: int = 360
    model_sample_size: int = 300
    real_batch_size: int = 30
    imaginary_batch_size: int = 100
    adapt_step_size: float = 0.001
    meta_step_size: float = 0.001
    meta_update_interval: int = 10
    model_optimizer: str = "adam"
    policy_optimizer: str = "sgd"
    epsilon_initial: float = 0.8
    epsilon_min: float = 0.2
    target_sync_interval: int = 5
    # below the reference table: remaining knobs the loop needs
    rollout_length: int = 36
    discount: float = 0.9
    epsilon_decay: float = 0.95
    model_batch_size: int = 30
    model_step_size: float = 0.001
    shared_model: bool = False

    def __post_init__(self) -> None:
        positive = (
            "meta_rounds", "model_epochs", "tasks_per_round",
            "real_transitions_per_task", "model_sample_size", "real_batch_size",
            "imaginary_batch_size", "adapt_step_size", "meta_step_size",
            "meta_update_interval", "target_sync_interval", "rollout_length",
            "model_batch_size", "model_step_size",
        )
        for name in positive:
            if getattr(self, name) <= 0:
                raise ScenarioError(f"MetaConfig.{name} must be positive")
        if self.imaginary_transitions_per_task < 0:
            raise ScenarioError("MetaConfig.imaginary_transitions_per_task must be >= 0")
        if self.meta_update_interval > self.real_transitions_per_task:
            raise ScenarioError("meta_update_interval cannot exceed real transitions per task")
        if not 0.0 <= self.discount < 1.0:
            raise ScenarioError("discount must lie in [0, 1)")
        if self.model_optimizer.lower() != "adam":
            raise ScenarioError(f"unsupported model optimizer {self.model_optimizer!r}")
        if self.policy_optimizer.lower() != "sgd":
            raise ScenarioError(f"unsupported policy optimizer {self.policy_optimizer!r}")

    def epsilon_schedule(self) -> EpsilonSchedule:
        return EpsilonSchedule(self.epsilon_initial, self.epsilon_min, self.epsilon_decay)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "MetaConfig":
        unknown = set(data) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ScenarioError(f"unknown MetaConfig fields: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_file(cls, path) -> "MetaConfig":
        with open(path, "r", encoding="utf-8") as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ScenarioError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(data)


@dataclass(frozen=True)
class TaskPool:
    """The distribution of training tasks: a finite set sampled uniformly."""

    scenarios: tuple[Scenario, ...]

    def __post_init__(self) -> None:
        if not self.scenarios:
            raise ScenarioError("task pool is empty")
        names = [s.name for s in self.scenarios]
        if len(set(names)) != len(names):
            raise ScenarioError(f"duplicate task names in pool: {names}")

    def sample(self, count: int, rng: np.random.Generator) -> list[Scenario]:
        replace_draws = count > len(self.scenarios)
        idx = rng.choice(len(self.scenarios), size=count, replace=replace_draws)
        return [self.scenarios[i] for i in idx]


class RealEnvSource:
    """Stream of real transitions from a scenario, restarting episodes as the
    horizon is reached. Completed-episode statistics are retained for logs."""

    def __init__(
        self,
        scenario: Scenario,
        rng: np.random.Generator,
        counter: TransitionCounter | None = None,
    ) -> None:
        self.scenario = scenario
        self._runner = EpisodeRunner(scenario, rng=rng, counter=counter)
        self.episode_stats: list[EpisodeStats] = []

    def observation(self) -> np.ndarray:
        if self._runner.done:
            self.episode_stats.append(self._runner.stats())
            self._runner.reset()
        return self._runner.observation()

    def step(self, action: int) -> Transition:
        if self._runner.done:
            self.episode_stats.append(self._runner.stats())
            self._runner.reset()
        return self._runner.apply(action)

    def collected_stats(self) -> list[EpisodeStats]:
        """All episode statistics so far, including the in-progress episode."""
        out = list(self.episode_stats)
        if self._runner.state.step_index > 0 or not out:
            out.append(self._runner.stats())
        return out


@dataclass
class TaskTrainState:
    """Per-task DQN bookkeeping that survives across adaptation windows."""

    target: PolicyParams
    updates: int = 0


@dataclass
class TaskContext:
    name: str
    phase_table: PhaseTable
    source: object  # RealEnvSource or RolloutStream
    buffer: TransitionSet
    train: TaskTrainState
    batch_size: int
    kind: TransitionKind
    policy_rng: np.random.Generator
    batch_rng: np.random.Generator
    losses: list[float] = field(default_factory=list)


def inner_adapt(
    theta: PolicyParams,
    ctx: TaskContext,
    steps: int,
    alpha: float,
    discount: float,
    epsilon: float,
    sync_interval: int,
) -> tuple[PolicyParams, list[Transition]]:
    """One adaptation window: reset the adapted policy to `theta`, then for
    each step generate one transition with the adapted policy, store it, and
    take one TD gradient step on a batch sampled from the task buffer."""
    if steps < 1:
        raise ValueError(f"adaptation window must cover >= 1 step, got {steps}")
    adapted = theta
    collected = []
    for _ in range(steps):
        obs = ctx.source.observation()
        action = select_action(
            q_values(adapted, obs, ctx.phase_table), epsilon, ctx.policy_rng
        )
        transition = ctx.source.step(action)
        ctx.buffer.append(transition)
        collected.append(transition)
        batch = make_batch(ctx.buffer.sample(ctx.batch_size, ctx.batch_rng, ctx.kind), ctx.kind)
        adapted, loss = dqn_gradient_step(
            adapted, batch, ctx.train.target, discount, alpha, ctx.phase_table
        )
        ctx.losses.append(loss)
        ctx.train.updates += 1
        if ctx.train.updates % sync_interval == 0:
            ctx.train.target = sync_target(adapted)
    assert adapted.version == theta.version + steps
    return adapted, collected


@dataclass(frozen=True)
class AdaptedTask:
    theta_prime: PolicyParams
    batch: ReplayBatch
    target: PolicyParams
    phase_table: PhaseTable


def meta_update(
    theta: PolicyParams,
    adapted: Sequence[AdaptedTask],
    beta: float,
    discount: float,
) -> PolicyParams:
    """First-order meta step: apply to `theta` the sum over tasks of the TD
    loss gradient evaluated at each adapted policy on its fresh batch. Each
    task's gradient is norm-clipped exactly like an ordinary TD update, so a
    single task with an unadapted policy reduces to a plain DQN step."""
    if not adapted:
        raise ValueError("meta_update needs at least one adapted task")
    total = None
    for task in adapted:
        targets = bellman_targets(task.batch, task.target, discount, task.phase_table)
        _, grads = td_loss_and_gradients(
            task.theta_prime, task.batch, targets, task.phase_table
        )
        grads = clip_gradients(grads, MAX_GRAD_NORM)
        if total is None:
            total = grads
        else:
            total = {k: total[k] + grads[k] for k in total}
    updated = nn.sgd_update(theta.arrays(), total, beta)
    return theta.with_arrays(updated, bump=1)


@dataclass
class TaskRoundLog:
    task: str
    real_transitions: int
    imaginary_transitions: int
    travel_time_s: float
    mean_real_loss: float
    mean_imaginary_loss: float
    model_loss: float


@dataclass
class RoundLog:
    round_index: int
    epsilon: float
    tasks: list[TaskRoundLog]
    meta_updates: int


@dataclass
class MetaTrainResult:
    theta: PolicyParams
    ensemble: ModelEnsemble
    logs: list[RoundLog]
    counter: TransitionCounter


def _run_phase(
    theta: PolicyParams,
    contexts: list[TaskContext],
    total_steps: int,
    cfg: MetaConfig,
    epsilon: float,
) -> tuple[PolicyParams, int]:
    """Alternate adaptation windows and meta updates over `total_steps`
    transitions per task; returns the updated initialization."""
    updates = 0
    for start in range(0, total_steps, cfg.meta_update_interval):
        window = min(cfg.meta_update_interval, total_steps - start)
        version_before = theta.version
        adapted_tasks = []
        for ctx in contexts:
            theta_prime, _ = inner_adapt(
                theta, ctx, window, cfg.adapt_step_size, cfg.discount,
                epsilon, cfg.target_sync_interval,
            )
            fresh = make_batch(
                ctx.buffer.sample(ctx.batch_size, ctx.batch_rng, ctx.kind), ctx.kind
            )
            adapted_tasks.append(
                AdaptedTask(theta_prime, fresh, ctx.train.target, ctx.phase_table)
            )
        assert theta.version == version_before  # adaptation never writes theta
        theta = meta_update(theta, adapted_tasks, cfg.meta_step_size, cfg.discount)
        assert theta.version == version_before + 1
        updates += 1
    return theta, updates


def meta_train(
    pool: TaskPool,
    cfg: MetaConfig,
    rng: np.random.Generator | int,
    model_based: bool = True,
    counter: TransitionCounter | None = None,
) -> MetaTrainResult:
    """Full meta-training loop.

    Each round: (1) adapt/meta-update on real transitions, (2) refit each
    task's dynamics model on freshly sampled real transitions from this
    round's buffer, (3) adapt/meta-update on imaginary transitions generated
    by the models. With `model_based=False` only part (1) runs.
    """
    rng = np.random.default_rng(rng)
    counter = counter if counter is not None else TransitionCounter()
    init_rng, model_seed_rng = rng.spawn(2)
    theta = init_policy(init_rng)
    ensemble = ModelEnsemble(shared=cfg.shared_model)
    model_seed_root = int(model_seed_rng.integers(2**31))
    schedule = cfg.epsilon_schedule()
    logs: list[RoundLog] = []

    for round_index in range(cfg.meta_rounds):
        epsilon = schedule.at(round_index)
        tasks = pool.sample(cfg.tasks_per_round, rng)
        contexts = []
        for task in tasks:
            sim_rng, policy_rng, batch_rng = rng.spawn(3)
            contexts.append(
                TaskContext(
                    name=task.name,
                    phase_table=task.phase_table,
                    source=RealEnvSource(task, sim_rng, counter),
                    buffer=TransitionSet(),
                    train=TaskTrainState(target=sync_target(theta)),
                    batch_size=cfg.real_batch_size,
                    kind=TransitionKind.REAL,
                    policy_rng=policy_rng,
                    batch_rng=batch_rng,
                )
            )

        # phase 1: meta-training on real transitions
        theta, updates = _run_phase(
            theta, contexts, cfg.real_transitions_per_task, cfg, epsilon
        )
        for ctx in contexts:
            assert len(ctx.buffer) == cfg.real_transitions_per_task  # fresh per round

        model_losses = {ctx.name: float("nan") for ctx in contexts}
        imag_losses = {ctx.name: [] for ctx in contexts}
        imag_counts = {ctx.name: 0 for ctx in contexts}

        if model_based:
            # phase 2: refit each task's model on this round's real data
            for ctx, task in zip(contexts, tasks):
                model = ensemble.get_or_create(ctx.name, model_seed_root)
                train_rng = np.random.default_rng(
                    [model_seed_root, round_index, len(ctx.name)]
                )
                data = ctx.buffer.sample(
                    cfg.model_sample_size, train_rng, TransitionKind.REAL
                )
                losses = train_intersection_model(
                    model, data, ctx.phase_table, cfg.model_epochs,
                    cfg.model_batch_size, train_rng, lr=cfg.model_step_size,
                )
                model_losses[ctx.name] = losses[-1]

            # phase 3: meta-training on imaginary transitions
            if cfg.imaginary_transitions_per_task > 0:
                real_before = counter.count
                imag_contexts = []
                for ctx, task in zip(contexts, tasks):
                    rollout_rng, policy_rng, batch_rng = rng.spawn(3)
                    model = ensemble.get_or_create(ctx.name, model_seed_root)
                    imag_contexts.append(
                        TaskContext(
                            name=ctx.name,
                            phase_table=ctx.phase_table,
                            source=RolloutStream(
                                model,
                                ctx.buffer.observations(TransitionKind.REAL),
                                cfg.rollout_length,
                                rollout_rng,
                                ctx.phase_table,
                            ),
                            buffer=ctx.buffer,
                            train=TaskTrainState(target=sync_target(theta)),
                            batch_size=cfg.imaginary_batch_size,
                            kind=TransitionKind.IMAGINARY,
                            policy_rng=policy_rng,
                            batch_rng=batch_rng,
                        )
                    )
                theta, imag_updates = _run_phase(
                    theta, imag_contexts, cfg.imaginary_transitions_per_task, cfg, epsilon
                )
                updates += imag_updates
                assert counter.count == real_before  # imagination costs no real steps
                for ctx in imag_contexts:
                    imag_losses[ctx.name] = ctx.losses
                    imag_counts[ctx.name] = ctx.buffer.count(TransitionKind.IMAGINARY)

        task_logs = []
        for ctx in contexts:
            stats = ctx.source.collected_stats()
            task_logs.append(
                TaskRoundLog(
                    task=ctx.name,
                    real_transitions=ctx.buffer.count(TransitionKind.REAL),
                    imaginary_transitions=imag_counts[ctx.name],
                    travel_time_s=average_travel_time(stats[0]) if stats else 0.0,
                    mean_real_loss=float(np.mean(ctx.losses)),
                    mean_imaginary_loss=(
                        float(np.mean(imag_losses[ctx.name]))
                        if imag_losses[ctx.name]
                        else float("nan")
                    ),
                    model_loss=model_losses[ctx.name],
                )
            )
        logs.append(RoundLog(round_index, epsilon, task_logs, updates))

    return MetaTrainResult(theta=theta, ensemble=ensemble, logs=logs, counter=counter)


@dataclass
class AdaptResult:
    adapted: PolicyParams
    adapt_stats: EpisodeStats
    adapt_travel_time_s: float
    eval_stats: EpisodeStats
    eval_travel_time_s: float
    adapt_updates: int
    eval_updates: int
    eval_epsilon: float


def meta_test(
    theta_star: PolicyParams,
    scenario: Scenario,
    cfg: MetaConfig,
    rng: np.random.Generator | int,
    counter: TransitionCounter | None = None,
) -> AdaptResult:
    """Adapt a copy of the initialization for one episode on an unseen task,
    then evaluate it frozen (exploration floor, no parameter updates)."""
    rng = np.random.default_rng(rng)
    sim_rng, policy_rng, batch_rng, eval_sim_rng, eval_policy_rng = rng.spawn(5)

    source = RealEnvSource(scenario, sim_rng, counter)
    ctx = TaskContext(
        name=scenario.name,
        phase_table=scenario.phase_table,
        source=source,
        buffer=TransitionSet(),
        train=TaskTrainState(target=sync_target(theta_star)),
        batch_size=cfg.real_batch_size,
        kind=TransitionKind.REAL,
        policy_rng=policy_rng,
        batch_rng=batch_rng,
    )
    adapted, _ = inner_adapt(
        theta_star, ctx, scenario.horizon_steps, cfg.adapt_step_size,
        cfg.discount, cfg.epsilon_min, cfg.target_sync_interval,
    )
    adapt_stats = source.collected_stats()[0]

    eval_runner = EpisodeRunner(scenario, rng=eval_sim_rng)  # measurement only
    version_frozen = adapted.version
    while not eval_runner.done:
        obs = eval_runner.observation()
        action = select_action(
            q_values(adapted, obs, scenario.phase_table), cfg.epsilon_min, eval_policy_rng
        )
        eval_runner.apply(action)
    assert adapted.version == version_frozen
    eval_stats = eval_runner.stats()

    return AdaptResult(
        adapted=adapted,
        adapt_stats=adapt_stats,
        adapt_travel_time_s=average_travel_time(adapt_stats),
        eval_stats=eval_stats,
        eval_travel_time_s=average_travel_time(eval_stats),
        adapt_updates=scenario.horizon_steps,
        eval_updates=0,
        eval_epsilon=cfg.epsilon_min,
    )
