"""Experiment orchestration: scenario files, method training/evaluation,
seeded runs, CSV emission and method comparison."""
from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .agent import (
    EpsilonSchedule,
    PolicyParams,
    init_policy,
    make_batch,
    dqn_gradient_step,
    q_values,
    select_action,
    sync_target,
)
from .dynamics import TransitionSet, task_seed
from .errors import ScenarioError
from .meta import MetaConfig, MetaTrainResult, TaskPool, meta_test, meta_train
from .sim import (
    ArrivalEntry,
    ArrivalSchedule,
    EpisodeRunner,
    Scenario,
    TransitionCounter,
    TransitionKind,
    average_travel_time,
    build_phase_table,
    fixed_cycle_policy,
    parse_movement,
)

METHODS = ("ModelLight", "MetaLightLike", "MAMLLike", "DQNScratch", "FixedCycle")
META_METHODS = ("ModelLight", "MetaLightLike", "MAMLLike")


def normalize_method(name: str) -> str:
    for canonical in METHODS:
        if name.lower() == canonical.lower():
            return canonical
    raise ScenarioError(f"unknown method {name!r}; expected one of {METHODS}")


# ---------------------------------------------------------------------------
# scenario files

_SCENARIO_FIELDS = {
    "name", "phase_setting", "horizon_steps", "decision_interval_s",
    "saturation", "switch_loss_fraction", "seed", "arrivals", "phase_name",
}


def scenario_from_dict(data: dict, origin: str = "<dict>") -> Scenario:
    if not isinstance(data, dict):
        raise ScenarioError(f"{origin}: scenario must be a JSON object")
    unknown = set(data) - _SCENARIO_FIELDS
    if unknown:
        raise ScenarioError(f"{origin}: unknown fields {sorted(unknown)}")
    for required in ("name", "phase_setting"):
        if required not in data:
            raise ScenarioError(f"{origin}: missing required field {required!r}")

    entries = []
    for i, item in enumerate(data.get("arrivals", [])):
        extra = set(item) - {"movement", "from_step", "rate"}
        if extra:
            raise ScenarioError(f"{origin}: arrivals[{i}] has unknown fields {sorted(extra)}")
        for key in ("movement", "from_step", "rate"):
            if key not in item:
                raise ScenarioError(f"{origin}: arrivals[{i}] missing {key!r}")
        entries.append(
            ArrivalEntry(parse_movement(item["movement"]), int(item["from_step"]), float(item["rate"]))
        )
    try:
        return Scenario(
            name=str(data["name"]),
            phase_table=build_phase_table(data["phase_setting"], name=data.get("phase_name")),
            arrivals=ArrivalSchedule(tuple(entries)),
            horizon_steps=int(data.get("horizon_steps", 360)),
            decision_interval_s=float(data.get("decision_interval_s", 10.0)),
            saturation=float(data.get("saturation", 5.0)),
            switch_loss_fraction=float(data.get("switch_loss_fraction", 0.5)),
            seed=int(data.get("seed", 0)),
        )
    except ScenarioError as exc:
        raise ScenarioError(f"{origin}: {exc}") from exc


def scenario_to_dict(scenario: Scenario) -> dict:
    return {
        "name": scenario.name,
        "phase_setting": [p.primary for p in scenario.phase_table.phases],
        "phase_name": scenario.phase_table.name,
        "horizon_steps": scenario.horizon_steps,
        "decision_interval_s": scenario.decision_interval_s,
        "saturation": scenario.saturation,
        "switch_loss_fraction": scenario.switch_loss_fraction,
        "seed": scenario.seed,
        "arrivals": [
            {"movement": e.movement.code, "from_step": e.from_step, "rate": e.rate}
            for e in scenario.arrivals.entries
        ],
    }


def load_scenario(path) -> Scenario:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ScenarioError(f"cannot read scenario file {path}: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{path}:{exc.lineno}: invalid JSON ({exc.msg})") from exc
    return scenario_from_dict(data, origin=str(path))


def save_scenario(path, scenario: Scenario) -> None:
    Path(path).write_text(
        json.dumps(scenario_to_dict(scenario), indent=2) + "\n", encoding="utf-8"
    )


# ---------------------------------------------------------------------------
# experiment configuration


@dataclass(frozen=True)
class ExperimentConfig:
    methods: tuple[str, ...]
    pool_paths: tuple[str, ...]
    test_paths: tuple[str, ...]
    seeds: tuple[int, ...]
    out_dir: str | None = None
    meta: MetaConfig = MetaConfig()
    dqn_episodes: int = 50
    fixed_cycle_hold: int = 3

    def __post_init__(self) -> None:
        if not self.seeds:
            raise ScenarioError("at least one seed is required")
        if not self.test_paths:
            raise ScenarioError("at least one test scenario is required")
        object.__setattr__(self, "methods", tuple(normalize_method(m) for m in self.methods))
        if not self.methods:
            raise ScenarioError("no methods configured")
        needs_pool = [m for m in self.methods if m in META_METHODS]
        if needs_pool and not self.pool_paths:
            raise ScenarioError(f"methods {needs_pool} require a training pool")
        if self.dqn_episodes <= 0 or self.fixed_cycle_hold <= 0:
            raise ScenarioError("dqn_episodes and fixed_cycle_hold must be positive")

    @classmethod
    def from_dict(cls, data: dict, origin: str = "<dict>") -> "ExperimentConfig":
        known = {
            "method", "methods", "pool", "tests", "seeds", "out",
            "meta", "dqn_episodes", "fixed_cycle_hold", "rounds",
        }
        unknown = set(data) - known
        if unknown:
            raise ScenarioError(f"{origin}: unknown fields {sorted(unknown)}")
        if ("method" in data) == ("methods" in data):
            raise ScenarioError(f"{origin}: provide exactly one of 'method' or 'methods'")
        methods = [data["method"]] if "method" in data else list(data["methods"])
        meta = MetaConfig.from_dict(data.get("meta", {}))
        if "rounds" in data:
            meta = MetaConfig.from_dict({**meta.to_dict(), "meta_rounds": int(data["rounds"])})
        return cls(
            methods=tuple(methods),
            pool_paths=tuple(data.get("pool", [])),
            test_paths=tuple(data["tests"]) if "tests" in data else (),
            seeds=tuple(int(s) for s in data.get("seeds", [])),
            out_dir=data.get("out"),
            meta=meta,
            dqn_episodes=int(data.get("dqn_episodes", 50)),
            fixed_cycle_hold=int(data.get("fixed_cycle_hold", 3)),
        )

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        path = Path(path)
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except OSError as exc:
            raise ScenarioError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ScenarioError(f"{path}:{exc.lineno}: invalid JSON ({exc.msg})") from exc
        return cls.from_dict(data, origin=str(path))


@dataclass
class ResultRow:
    method: str
    scenario: str
    seed: int
    rounds_trained: int
    real_transitions_used: int
    avg_travel_time_s: float
    final_epsilon: float | None
    wall_time_s: float


@dataclass
class CurvePoint:
    method: str
    scenario: str
    seed: int
    stage: str
    round_index: int
    task: str
    avg_travel_time_s: float


# ---------------------------------------------------------------------------
# per-method machinery


def _case_root(seed: int, scenario: Scenario) -> np.random.Generator:
    return np.random.default_rng([713, seed, task_seed(scenario.name)])


def _frozen_eval(
    policy_fn,
    scenario: Scenario,
    eval_sim_rng: np.random.Generator,
) -> float:
    runner = EpisodeRunner(scenario, rng=eval_sim_rng)
    while not runner.done:
        runner.apply(policy_fn(runner.observation()))
    return average_travel_time(runner.stats())


@dataclass
class SharedTraining:
    """Training artifacts reused across every test scenario of one seed."""

    theta: PolicyParams | None
    counter: TransitionCounter
    rounds: int
    final_epsilon: float | None
    result: MetaTrainResult | None = None


def train_shared(
    method: str, pool: TaskPool | None, cfg: ExperimentConfig, seed: int
) -> SharedTraining:
    method = normalize_method(method)
    if method in META_METHODS:
        assert pool is not None
        meta_cfg = cfg.meta
        if method == "MetaLightLike":
            result = meta_train(pool, meta_cfg, seed, model_based=False)
        elif method == "MAMLLike":
            maml_cfg = MetaConfig.from_dict(
                {
                    **meta_cfg.to_dict(),
                    "meta_update_interval": meta_cfg.real_transitions_per_task,
                }
            )
            result = meta_train(pool, maml_cfg, seed, model_based=False)
        else:
            result = meta_train(pool, meta_cfg, seed)
        schedule = meta_cfg.epsilon_schedule()
        return SharedTraining(
            theta=result.theta,
            counter=result.counter,
            rounds=meta_cfg.meta_rounds,
            final_epsilon=schedule.at(meta_cfg.meta_rounds - 1),
            result=result,
        )
    # DQNScratch trains per scenario; FixedCycle does not train at all
    return SharedTraining(
        theta=None, counter=TransitionCounter(), rounds=0, final_epsilon=None
    )


def train_dqn_on_scenario(
    scenario: Scenario,
    meta_cfg: MetaConfig,
    episodes: int,
    init_rng: np.random.Generator,
    sim_rng: np.random.Generator,
    policy_rng: np.random.Generator,
    batch_rng: np.random.Generator,
    counter: TransitionCounter,
) -> tuple[PolicyParams, list[float]]:
    """Plain DQN trained directly on one scenario with a persistent replay
    buffer; returns the trained policy and the per-episode travel times."""
    theta = init_policy(init_rng)
    target = sync_target(theta)
    buffer = TransitionSet()
    schedule = meta_cfg.epsilon_schedule()
    updates = 0
    episode_travel_times = []
    for episode in range(episodes):
        epsilon = schedule.at(episode)
        runner = EpisodeRunner(scenario, rng=sim_rng, counter=counter)
        while not runner.done:
            obs = runner.observation()
            action = select_action(
                q_values(theta, obs, scenario.phase_table), epsilon, policy_rng
            )
            buffer.append(runner.apply(action))
            batch = make_batch(
                buffer.sample(meta_cfg.real_batch_size, batch_rng, TransitionKind.REAL),
                TransitionKind.REAL,
            )
            theta, _ = dqn_gradient_step(
                theta, batch, target, meta_cfg.discount,
                meta_cfg.adapt_step_size, scenario.phase_table,
            )
            updates += 1
            if updates % meta_cfg.target_sync_interval == 0:
                target = sync_target(theta)
        episode_travel_times.append(average_travel_time(runner.stats()))
    return theta, episode_travel_times


def run_case(
    method: str,
    shared: SharedTraining,
    scenario: Scenario,
    cfg: ExperimentConfig,
    seed: int,
) -> tuple[ResultRow, list[CurvePoint]]:
    """Adapt/evaluate one (method, scenario, seed) case and audit its budget."""
    method = normalize_method(method)
    started = time.perf_counter()
    root = _case_root(seed, scenario)
    curves: list[CurvePoint] = []

    def curve(stage, round_index, task, value):
        curves.append(CurvePoint(method, scenario.name, seed, stage, round_index, task, value))

    if method in META_METHODS:
        adapt_counter = TransitionCounter()
        outcome = meta_test(shared.theta, scenario, cfg.meta, root, counter=adapt_counter)
        travel_time = outcome.eval_travel_time_s
        real_used = shared.counter.count + adapt_counter.count
        rounds = shared.rounds
        final_epsilon = shared.final_epsilon
        assert shared.result is not None
        for log in shared.result.logs:
            for task_log in log.tasks:
                curve("train-round", log.round_index, task_log.task, task_log.travel_time_s)
        curve("adapt", 0, scenario.name, outcome.adapt_travel_time_s)
        curve("eval", 0, scenario.name, travel_time)
        expected = (
            cfg.meta.meta_rounds * cfg.meta.tasks_per_round
            * cfg.meta.real_transitions_per_task
            + scenario.horizon_steps
        )
    elif method == "DQNScratch":
        sim_rng, policy_rng, batch_rng, eval_sim, eval_policy = root.spawn(5)
        init_rng = root.spawn(1)[0]
        counter = TransitionCounter()
        theta, episode_tts = train_dqn_on_scenario(
            scenario, cfg.meta, cfg.dqn_episodes,
            init_rng, sim_rng, policy_rng, batch_rng, counter,
        )
        for episode, value in enumerate(episode_tts):
            curve("train-episode", episode, scenario.name, value)
        travel_time = _frozen_eval(
            lambda obs: select_action(
                q_values(theta, obs, scenario.phase_table), cfg.meta.epsilon_min, eval_policy
            ),
            scenario, eval_sim,
        )
        curve("eval", 0, scenario.name, travel_time)
        real_used = counter.count
        rounds = cfg.dqn_episodes
        final_epsilon = cfg.meta.epsilon_schedule().at(cfg.dqn_episodes - 1)
        expected = cfg.dqn_episodes * scenario.horizon_steps
    elif method == "FixedCycle":
        _, _, _, eval_sim, _ = root.spawn(5)
        travel_time = _frozen_eval(
            fixed_cycle_policy(scenario.phase_table, cfg.fixed_cycle_hold),
            scenario, eval_sim,
        )
        curve("eval", 0, scenario.name, travel_time)
        real_used = 0
        rounds = 0
        final_epsilon = None
        expected = 0
    else:  # pragma: no cover - normalize_method already rejects
        raise ScenarioError(f"unhandled method {method!r}")

    if real_used != expected:
        raise ScenarioError(
            f"budget audit failed for {method} on {scenario.name}: "
            f"counted {real_used}, expected {expected}"
        )
    row = ResultRow(
        method=method,
        scenario=scenario.name,
        seed=seed,
        rounds_trained=rounds,
        real_transitions_used=real_used,
        avg_travel_time_s=travel_time,
        final_epsilon=final_epsilon,
        wall_time_s=time.perf_counter() - started,
    )
    return row, curves


# ---------------------------------------------------------------------------
# experiment driver and CSV emission


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def write_results(out_dir: Path, rows: list[ResultRow], curves: list[CurvePoint]) -> dict[str, Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "results": out_dir / "results.csv",
        "curves": out_dir / "learning_curves.csv",
        "summary": out_dir / "summary.csv",
        "timings": out_dir / "timings.csv",
    }
    _write_csv(
        paths["results"],
        ["method", "scenario", "seed", "rounds_trained", "real_transitions_used",
         "avg_travel_time_s", "final_epsilon"],
        [(r.method, r.scenario, r.seed, r.rounds_trained, r.real_transitions_used,
          r.avg_travel_time_s, r.final_epsilon) for r in rows],
    )
    _write_csv(
        paths["curves"],
        ["method", "scenario", "seed", "stage", "round", "task", "avg_travel_time_s"],
        [(c.method, c.scenario, c.seed, c.stage, c.round_index, c.task, c.avg_travel_time_s)
         for c in curves],
    )
    summary = summarize(rows)
    _write_csv(
        paths["summary"],
        ["method", "scenario", "n_seeds", "mean_travel_time_s", "std_travel_time_s"],
        summary,
    )
    # wall-clock timings vary run to run, so they live apart from the
    # deterministic outputs
    _write_csv(
        paths["timings"],
        ["method", "scenario", "seed", "wall_time_s"],
        [(r.method, r.scenario, r.seed, r.wall_time_s) for r in rows],
    )
    return paths


def summarize(rows: list[ResultRow]) -> list[tuple]:
    grouped: dict[tuple[str, str], list[float]] = {}
    order: list[tuple[str, str]] = []
    for r in rows:
        key = (r.method, r.scenario)
        if key not in grouped:
            grouped[key] = []
            order.append(key)
        grouped[key].append(r.avg_travel_time_s)
    out = []
    for method, scenario in order:
        values = np.array(grouped[(method, scenario)])
        out.append(
            (method, scenario, len(values), float(values.mean()),
             float(values.std(ddof=1)) if len(values) > 1 else 0.0)
        )
    return out


def run_experiment(cfg: ExperimentConfig) -> tuple[list[ResultRow], list[CurvePoint]]:
    """Train/adapt/evaluate every (method, seed, test scenario) combination.

    A failure in one case is recorded as a row with NaN travel time; the
    remaining cases still run.
    """
    pool = (
        TaskPool(tuple(load_scenario(p) for p in cfg.pool_paths))
        if cfg.pool_paths
        else None
    )
    tests = [load_scenario(p) for p in cfg.test_paths]
    rows: list[ResultRow] = []
    curves: list[CurvePoint] = []
    for method in cfg.methods:
        for seed in cfg.seeds:
            try:
                shared = train_shared(method, pool, cfg, seed)
            except Exception as exc:  # noqa: BLE001 - isolate per-seed failures
                for scenario in tests:
                    rows.append(_failure_row(method, scenario.name, seed, exc))
                continue
            for scenario in tests:
                try:
                    row, case_curves = run_case(method, shared, scenario, cfg, seed)
                except Exception as exc:  # noqa: BLE001
                    rows.append(_failure_row(method, scenario.name, seed, exc))
                    continue
                rows.append(row)
                curves.extend(case_curves)
    if cfg.out_dir:
        write_results(Path(cfg.out_dir), rows, curves)
    return rows, curves


def _failure_row(method: str, scenario: str, seed: int, exc: Exception) -> ResultRow:
    import sys

    print(f"case failed: {method}/{scenario}/seed={seed}: {exc}", file=sys.stderr)
    return ResultRow(
        method=method, scenario=scenario, seed=seed, rounds_trained=0,
        real_transitions_used=0, avg_travel_time_s=float("nan"),
        final_epsilon=None, wall_time_s=0.0,
    )


# ---------------------------------------------------------------------------
# comparison


@dataclass
class ComparisonRow:
    scenario: str
    candidate_mean: float
    best_baseline: str
    best_baseline_mean: float
    improvement_pct: float


def compare_methods(
    rows: Sequence[ResultRow], candidate: str = "ModelLight"
) -> tuple[str, list[ComparisonRow]]:
    """Per-scenario improvement of the candidate over the best other method:
    (best_baseline - candidate) / best_baseline * 100."""
    candidate = normalize_method(candidate)
    methods = sorted({r.method for r in rows})
    if len(methods) < 2:
        raise ScenarioError("comparison needs at least two methods")
    if candidate not in methods:
        raise ScenarioError(f"candidate {candidate!r} missing from results")

    by_scenario: dict[str, dict[str, list[float]]] = {}
    for r in rows:
        by_scenario.setdefault(r.scenario, {}).setdefault(r.method, []).append(
            r.avg_travel_time_s
        )
    scenarios = sorted(by_scenario)
    for scenario, per_method in by_scenario.items():
        if set(per_method) != set(methods):
            raise ScenarioError(
                f"scenario {scenario!r} lacks results for some methods: "
                f"{sorted(set(methods) - set(per_method))}"
            )

    comparison = []
    for scenario in scenarios:
        means = {m: float(np.mean(by_scenario[scenario][m])) for m in methods}
        baselines = {m: v for m, v in means.items() if m != candidate}
        best = min(baselines, key=baselines.get)
        improvement = (baselines[best] - means[candidate]) / baselines[best] * 100.0
        comparison.append(
            ComparisonRow(scenario, means[candidate], best, baselines[best], improvement)
        )

    lines = [
        f"{'scenario':24} {'candidate':>12} {'best baseline':>24} {'improvement':>12}"
    ]
    for c in comparison:
        shown = f"{c.improvement_pct:.2f}%" if c.improvement_pct >= 0 else "-"
        lines.append(
            f"{c.scenario:24} {c.candidate_mean:12.2f} "
            f"{c.best_baseline + ' ' + format(c.best_baseline_mean, '.2f'):>24} {shown:>12}"
        )
    return "\n".join(lines), comparison


def write_comparison(out_dir: Path, comparison: list[ComparisonRow]) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "comparison.csv"
    _write_csv(
        path,
        ["scenario", "candidate_mean", "best_baseline", "best_baseline_mean", "improvement_pct"],
        [(c.scenario, c.candidate_mean, c.best_baseline, c.best_baseline_mean, c.improvement_pct)
         for c in comparison],
    )
    return path


def read_results_csv(path) -> list[ResultRow]:
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        for record in csv.DictReader(fh):
            rows.append(
                ResultRow(
                    method=record["method"],
                    scenario=record["scenario"],
                    seed=int(record["seed"]),
                    rounds_trained=int(record["rounds_trained"]),
                    real_transitions_used=int(record["real_transitions_used"]),
                    avg_travel_time_s=float(record["avg_travel_time_s"]),
                    final_epsilon=(
                        float(record["final_epsilon"]) if record["final_epsilon"] else None
                    ),
                    wall_time_s=0.0,
                )
            )
    return rows
