"""Queue-based single-intersection traffic simulator.

The intersection has four approaches (N/S/E/W) with a straight and a left-turn
movement each; right turns are unmodelled. Time advances in fixed decision
intervals. Each interval the controller picks one phase (a pair of
non-conflicting movements); green movements discharge up to a saturation cap,
reduced by a switch loss when the phase changes; every other queue only grows.
The step reward is the negated total queue length after the update.
"""
from __future__ import annotations

import itertools
import math
import warnings
from bisect import bisect_right
from collections import deque
from dataclasses import dataclass, field, replace
from enum import Enum
from functools import cached_property
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import InvalidActionError, ScenarioError


class Approach(str, Enum):
    NORTH = "N"
    SOUTH = "S"
    EAST = "E"
    WEST = "W"


class TurnKind(str, Enum):
    STRAIGHT = "straight"
    LEFT = "left"


@dataclass(frozen=True)
class Movement:
    """One permitted flow direction entering the intersection."""

    approach: Approach
    kind: TurnKind

    @property
    def code(self) -> str:
        return f"{self.approach.value}-{self.kind.value}"

    def __repr__(self) -> str:
        return f"Movement({self.code})"


def _mv(approach: str, kind: str) -> Movement:
    return Movement(Approach(approach), TurnKind(kind))


#: Canonical movement order used by every 8-wide queue vector.
MOVEMENTS: tuple[Movement, ...] = (
    _mv("N", "straight"),
    _mv("N", "left"),
    _mv("S", "straight"),
    _mv("S", "left"),
    _mv("E", "straight"),
    _mv("E", "left"),
    _mv("W", "straight"),
    _mv("W", "left"),
)
MOVEMENT_INDEX: dict[Movement, int] = {m: i for i, m in enumerate(MOVEMENTS)}
NUM_MOVEMENTS = len(MOVEMENTS)


def parse_movement(code: str) -> Movement:
    """Parse a movement code like "N-straight" (case-insensitive)."""
    try:
        approach, kind = code.strip().split("-", 1)
        return Movement(Approach(approach.upper()), TurnKind(kind.lower()))
    except (ValueError, KeyError) as exc:
        raise ScenarioError(f"unknown movement code {code!r}") from exc


# The eight primary phases: four two-direction pairs followed by the four
# single-approach (straight + left) pairs. Movements within a pair never
# conflict, so any subset of these phases forms a valid signal plan.
_PRIMARY_SPECS = (
    ("W-straight", "E-straight"),
    ("N-straight", "S-straight"),
    ("W-left", "E-left"),
    ("N-left", "S-left"),
    ("W-straight", "W-left"),
    ("E-straight", "E-left"),
    ("N-straight", "N-left"),
    ("S-straight", "S-left"),
)
PRIMARY_PHASE_MOVEMENTS: tuple[frozenset[Movement], ...] = tuple(
    frozenset(parse_movement(c) for c in pair) for pair in _PRIMARY_SPECS
)
NUM_PRIMARY_PHASES = len(PRIMARY_PHASE_MOVEMENTS)

#: PRIMARY_GREEN[p, k] is True when movement k has green under primary phase p.
PRIMARY_GREEN = np.zeros((NUM_PRIMARY_PHASES, NUM_MOVEMENTS), dtype=bool)
for _p, _pair in enumerate(PRIMARY_PHASE_MOVEMENTS):
    for _m in _pair:
        PRIMARY_GREEN[_p, MOVEMENT_INDEX[_m]] = True


@dataclass(frozen=True)
class Phase:
    """A table-local phase: its position in the table plus its primary identity."""

    id: int
    primary: int
    movements: frozenset[Movement]


@dataclass(frozen=True)
class PhaseTable:
    """The ordered subset of primary phases an intersection cycles among."""

    name: str
    phases: tuple[Phase, ...]

    def __len__(self) -> int:
        return len(self.phases)

    @cached_property
    def primary_ids(self) -> np.ndarray:
        return np.array([p.primary for p in self.phases], dtype=np.intp)

    @cached_property
    def movement_pairs(self) -> np.ndarray:
        """(P, 2) movement indices of each phase, ascending within the pair."""
        pairs = [sorted(MOVEMENT_INDEX[m] for m in p.movements) for p in self.phases]
        return np.array(pairs, dtype=np.intp)

    @cached_property
    def movement_mask(self) -> np.ndarray:
        return PRIMARY_GREEN[self.primary_ids]


SUPPORTED_TABLE_SIZES = (4, 6, 8)


def build_phase_table(setting: Sequence[int], name: str | None = None) -> PhaseTable:
    """Build a phase table from a list of primary-phase ids (length 4, 6 or 8)."""
    ids = list(setting)
    if len(ids) not in SUPPORTED_TABLE_SIZES:
        raise ScenarioError(
            f"phase setting must contain 4, 6 or 8 phases, got {len(ids)}"
        )
    if len(set(ids)) != len(ids):
        raise ScenarioError(f"phase setting contains duplicates: {ids}")
    for pid in ids:
        if not isinstance(pid, (int, np.integer)) or not 0 <= pid < NUM_PRIMARY_PHASES:
            raise ScenarioError(f"primary phase id out of range 0..7: {pid!r}")
    phases = tuple(
        Phase(id=i, primary=int(pid), movements=PRIMARY_PHASE_MOVEMENTS[pid])
        for i, pid in enumerate(ids)
    )
    if name is None:
        name = f"{len(ids)}p{''.join(str(i) for i in ids)}"
    return PhaseTable(name=name, phases=phases)


@dataclass(frozen=True)
class ArrivalEntry:
    """Piecewise-constant rate segment: `rate` applies from `from_step` onward."""

    movement: Movement
    from_step: int
    rate: float


@dataclass(frozen=True)
class ArrivalSchedule:
    entries: tuple[ArrivalEntry, ...]

    def __post_init__(self) -> None:
        seen = set()
        for e in self.entries:
            if e.rate < 0:
                raise ScenarioError(f"negative arrival rate for {e.movement.code}: {e.rate}")
            if e.from_step < 0:
                raise ScenarioError(f"negative from_step for {e.movement.code}: {e.from_step}")
            key = (e.movement, e.from_step)
            if key in seen:
                raise ScenarioError(
                    f"duplicate arrival entry for {e.movement.code} at step {e.from_step}"
                )
            seen.add(key)
        ordered = tuple(
            sorted(self.entries, key=lambda e: (MOVEMENT_INDEX[e.movement], e.from_step))
        )
        object.__setattr__(self, "entries", ordered)

    @classmethod
    def from_rates(cls, rates: dict[Movement, float]) -> "ArrivalSchedule":
        return cls(tuple(ArrivalEntry(m, 0, r) for m, r in rates.items()))

    @cached_property
    def _per_movement(self) -> tuple[tuple[list[int], list[float]], ...]:
        table: list[tuple[list[int], list[float]]] = [([], []) for _ in MOVEMENTS]
        for e in self.entries:
            steps, rates = table[MOVEMENT_INDEX[e.movement]]
            steps.append(e.from_step)
            rates.append(e.rate)
        return tuple(table)

    def rate_vector(self, step_index: int) -> np.ndarray:
        """Expected arrivals per decision interval for each movement at this step."""
        out = np.zeros(NUM_MOVEMENTS)
        for k, (steps, rates) in enumerate(self._per_movement):
            pos = bisect_right(steps, step_index) - 1
            if pos >= 0:
                out[k] = rates[pos]
        return out


@dataclass(frozen=True)
class Scenario:
    """Complete description of one traffic task."""

    name: str
    phase_table: PhaseTable
    arrivals: ArrivalSchedule = ArrivalSchedule(())
    horizon_steps: int = 360
    decision_interval_s: float = 10.0
    saturation: float = 5.0
    switch_loss_fraction: float = 0.5
    seed: int = 0

    def __post_init__(self) -> None:
        if self.horizon_steps <= 0:
            raise ScenarioError(f"horizon_steps must be positive, got {self.horizon_steps}")
        if self.decision_interval_s <= 0:
            raise ScenarioError("decision_interval_s must be positive")
        if self.saturation <= 0:
            raise ScenarioError(f"saturation must be positive, got {self.saturation}")
        if not 0.0 <= self.switch_loss_fraction <= 1.0:
            raise ScenarioError(
                f"switch_loss_fraction must lie in [0, 1], got {self.switch_loss_fraction}"
            )

    @property
    def episode_duration_s(self) -> float:
        return self.horizon_steps * self.decision_interval_s


@dataclass(frozen=True)
class IntersectionState:
    """Ground-truth simulator state: per-movement queues plus the active phase."""

    queues: np.ndarray  # (8,) int64, canonical movement order
    current_phase: int  # index into the scenario's phase table
    step_index: int

    def queue_of(self, movement: Movement) -> int:
        return int(self.queues[MOVEMENT_INDEX[movement]])


def initial_state() -> IntersectionState:
    return IntersectionState(np.zeros(NUM_MOVEMENTS, dtype=np.int64), 0, 0)


class TransitionKind(str, Enum):
    REAL = "real"
    IMAGINARY = "imaginary"


@dataclass(frozen=True, eq=False)
class Transition:
    obs: np.ndarray        # (16,)
    action: int            # table-local phase id
    next_obs: np.ndarray   # (16,)
    reward: float          # always <= 0
    kind: TransitionKind = TransitionKind.REAL


@dataclass
class StepStats:
    arrived: int
    departed: int
    arrivals: np.ndarray    # (8,) per-movement
    departures: np.ndarray  # (8,) per-movement
    queue_total: int


@dataclass
class EpisodeStats:
    """Travel-time and reward accounting for one (possibly partial) episode."""

    waits_s: list[float]
    rewards: list[float]
    vehicles_arrived: int
    vehicles_departed: int
    vehicles_remaining: int


class TransitionCounter:
    """Independent tally of transitions actually drawn from a simulator."""

    def __init__(self) -> None:
        self.count = 0

    def add(self, n: int = 1) -> None:
        self.count += n


OBSERVATION_SIZE = NUM_MOVEMENTS + NUM_PRIMARY_PHASES  # 16


def encode_state(state: IntersectionState, phase_table: PhaseTable) -> np.ndarray:
    """Encode a state as 8 queue counts followed by the 8-wide primary-phase one-hot."""
    obs = np.zeros(OBSERVATION_SIZE)
    obs[:NUM_MOVEMENTS] = state.queues
    primary = phase_table.phases[state.current_phase].primary
    obs[NUM_MOVEMENTS + primary] = 1.0
    return obs


def decode_queues(obs: np.ndarray) -> np.ndarray:
    return np.asarray(obs)[..., :NUM_MOVEMENTS]


def observation_primary_phase(obs: np.ndarray) -> int | np.ndarray:
    """Primary-phase id carried in an observation's one-hot block."""
    block = np.asarray(obs)[..., NUM_MOVEMENTS:]
    return np.argmax(block, axis=-1)


def sample_arrivals(
    scenario: Scenario, step_index: int, rng: np.random.Generator
) -> np.ndarray:
    """Draw Poisson arrival counts per movement for one decision interval."""
    if not 0 <= step_index < scenario.horizon_steps:
        raise ScenarioError(
            f"step_index {step_index} outside horizon {scenario.horizon_steps}"
        )
    rates = scenario.arrivals.rate_vector(step_index)
    return rng.poisson(rates).astype(np.int64)


def step(
    state: IntersectionState,
    action: int,
    arrivals: np.ndarray,
    scenario: Scenario,
) -> tuple[IntersectionState, float, StepStats]:
    """Advance the intersection one decision interval under the chosen phase.

    Green movements discharge up to floor(saturation * g) vehicles, where g is
    1 minus the switch loss when the phase changes and 1 otherwise. Queues obey
    q' = max(0, q + arrivals - service) with departures = min(q + arrivals,
    service), which conserves vehicles exactly.
    """
    table = scenario.phase_table
    if not isinstance(action, (int, np.integer)) or not 0 <= action < len(table):
        raise InvalidActionError(
            f"action {action!r} invalid for phase table {table.name!r} of size {len(table)}"
        )
    arrivals = np.asarray(arrivals, dtype=np.int64)
    if arrivals.shape != (NUM_MOVEMENTS,) or (arrivals < 0).any():
        raise ScenarioError(f"arrivals must be 8 non-negative counts, got {arrivals!r}")

    g = 1.0 if action == state.current_phase else 1.0 - scenario.switch_loss_fraction
    service = math.floor(scenario.saturation * g)
    green = table.movement_mask[action]

    before = state.queues + arrivals
    departures = np.minimum(before, np.where(green, service, 0))
    queues = before - departures
    reward = -float(queues.sum())

    next_state = IntersectionState(queues, int(action), state.step_index + 1)
    stats = StepStats(
        arrived=int(arrivals.sum()),
        departed=int(departures.sum()),
        arrivals=arrivals,
        departures=departures.astype(np.int64),
        queue_total=int(queues.sum()),
    )
    return next_state, reward, stats


class _WaitTracker:
    """FIFO per-movement ledger of arrival steps, yielding per-vehicle waits."""

    def __init__(self, interval_s: float) -> None:
        self._interval = interval_s
        self._pending: list[deque[int]] = [deque() for _ in MOVEMENTS]
        self.waits_s: list[float] = []
        self.arrived = 0
        self.departed = 0

    def record(self, step_index: int, stats: StepStats) -> None:
        for k in range(NUM_MOVEMENTS):
            q = self._pending[k]
            q.extend([step_index] * int(stats.arrivals[k]))
            for _ in range(int(stats.departures[k])):
                entered = q.popleft()
                self.waits_s.append((step_index - entered) * self._interval)
        self.arrived += stats.arrived
        self.departed += stats.departed

    def censored_waits(self, cutoff_step: int) -> list[float]:
        """Waits assigned to vehicles still queued, censored at `cutoff_step`."""
        out = []
        for q in self._pending:
            out.extend((cutoff_step - entered) * self._interval for entered in q)
        return out

    @property
    def remaining(self) -> int:
        return sum(len(q) for q in self._pending)


class EpisodeRunner:
    """Stateful stepper for one episode; arrivals come from the scenario's
    Poisson process unless an explicit `arrival_fn(step) -> counts` is given."""

    def __init__(
        self,
        scenario: Scenario,
        rng: np.random.Generator | None = None,
        counter: TransitionCounter | None = None,
        arrival_fn: Callable[[int], np.ndarray] | None = None,
    ) -> None:
        self.scenario = scenario
        self._rng = rng if rng is not None else np.random.default_rng(scenario.seed)
        self._counter = counter
        self._arrival_fn = arrival_fn
        self.reset()

    def reset(self) -> None:
        self.state = initial_state()
        self._tracker = _WaitTracker(self.scenario.decision_interval_s)
        self._rewards: list[float] = []

    @property
    def done(self) -> bool:
        return self.state.step_index >= self.scenario.horizon_steps

    def observation(self) -> np.ndarray:
        return encode_state(self.state, self.scenario.phase_table)

    def apply(self, action: int) -> Transition:
        if self.done:
            raise ScenarioError("episode already complete; call reset() first")
        t = self.state.step_index
        if self._arrival_fn is not None:
            arrivals = np.asarray(self._arrival_fn(t), dtype=np.int64)
        else:
            arrivals = sample_arrivals(self.scenario, t, self._rng)
        obs = self.observation()
        self.state, reward, stats = step(self.state, action, arrivals, self.scenario)
        self._tracker.record(t, stats)
        self._rewards.append(reward)
        if self._counter is not None:
            self._counter.add(1)
        return Transition(
            obs=obs,
            action=int(action),
            next_obs=self.observation(),
            reward=reward,
            kind=TransitionKind.REAL,
        )

    def stats(self) -> EpisodeStats:
        """Episode statistics so far; undeparted vehicles get censored waits."""
        cutoff = self.state.step_index
        waits = list(self._tracker.waits_s) + self._tracker.censored_waits(cutoff)
        return EpisodeStats(
            waits_s=waits,
            rewards=list(self._rewards),
            vehicles_arrived=self._tracker.arrived,
            vehicles_departed=self._tracker.departed,
            vehicles_remaining=self._tracker.remaining,
        )


def run_episode(
    policy: Callable[[np.ndarray], int],
    scenario: Scenario,
    rng: np.random.Generator | None = None,
    counter: TransitionCounter | None = None,
    arrival_fn: Callable[[int], np.ndarray] | None = None,
) -> tuple[list[Transition], EpisodeStats]:
    """Roll one full episode; returns exactly `horizon_steps` real transitions."""
    runner = EpisodeRunner(scenario, rng=rng, counter=counter, arrival_fn=arrival_fn)
    transitions = []
    while not runner.done:
        action = policy(runner.observation())
        transitions.append(runner.apply(action))
    return transitions, runner.stats()


def average_travel_time(stats: EpisodeStats) -> float:
    """Mean seconds vehicles spent queued; 0.0 (with a warning) when no vehicles."""
    if not stats.waits_s:
        warnings.warn("no vehicles in episode; average travel time reported as 0.0")
        return 0.0
    return float(np.mean(stats.waits_s))


def fixed_cycle_policy(
    phase_table: PhaseTable, hold: int = 3
) -> Callable[[np.ndarray], int]:
    """Cycle through the table in order, holding each phase `hold` intervals."""
    if hold < 1:
        raise ScenarioError(f"hold must be >= 1, got {hold}")
    counter = itertools.count()
    n = len(phase_table)

    def policy(obs: np.ndarray) -> int:
        return (next(counter) // hold) % n

    return policy
