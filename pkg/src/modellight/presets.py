"""Built-in synthetic scenarios.

A small heterogeneous training pool (4- and 8-phase intersections with
different dominant directions) plus held-out 6-phase test scenarios whose
arrival patterns shift mid-episode. Rates are vehicles per decision interval;
at the default saturation of 5 per green movement the pools sit well inside
the controllable regime for a sensible policy while badly timed plans congest.
"""
from __future__ import annotations

from .meta import TaskPool
from .sim import ArrivalEntry, ArrivalSchedule, Scenario, build_phase_table, parse_movement


def _schedule(base: dict[str, float], changes: list[tuple[str, int, float]] = ()) -> ArrivalSchedule:
    entries = [ArrivalEntry(parse_movement(code), 0, rate) for code, rate in base.items()]
    entries += [
        ArrivalEntry(parse_movement(code), from_step, rate)
        for code, from_step, rate in changes
    ]
    return ArrivalSchedule(tuple(entries))


def _rates(straight: float, left: float, heavy: dict[str, float] | None = None) -> dict[str, float]:
    base = {}
    for approach in "NSEW":
        base[f"{approach}-straight"] = straight
        base[f"{approach}-left"] = left
    base.update(heavy or {})
    return base


def training_scenarios(horizon_steps: int = 360) -> list[Scenario]:
    return [
        Scenario(
            name="train-4-ns",
            phase_table=build_phase_table([0, 1, 2, 3], name="4a"),
            arrivals=_schedule(
                _rates(0.3, 0.3, {"N-straight": 1.6, "S-straight": 1.6})
            ),
            horizon_steps=horizon_steps,
            seed=101,
        ),
        Scenario(
            name="train-4-ew",
            phase_table=build_phase_table([0, 1, 2, 3], name="4b"),
            arrivals=_schedule(
                _rates(0.3, 0.3, {"E-straight": 1.6, "W-straight": 1.6})
            ),
            horizon_steps=horizon_steps,
            seed=102,
        ),
        Scenario(
            name="train-8-balanced",
            phase_table=build_phase_table(list(range(8)), name="8"),
            arrivals=_schedule(_rates(0.8, 0.4)),
            horizon_steps=horizon_steps,
            seed=103,
        ),
        Scenario(
            name="train-8-left",
            phase_table=build_phase_table(list(range(8)), name="8L"),
            arrivals=_schedule(_rates(0.4, 0.9)),
            horizon_steps=horizon_steps,
            seed=104,
        ),
    ]


def training_pool(horizon_steps: int = 360) -> TaskPool:
    return TaskPool(tuple(training_scenarios(horizon_steps)))


def test_scenarios(horizon_steps: int = 360) -> list[Scenario]:
    """Held-out 6-phase scenarios with arrival patterns that shift mid-episode."""
    third = horizon_steps // 3
    return [
        Scenario(
            name="test-6-ns-surge",
            phase_table=build_phase_table([0, 1, 2, 3, 6, 7], name="6a"),
            arrivals=_schedule(
                _rates(0.5, 0.3),
                [
                    ("N-straight", third, 1.8),
                    ("S-straight", third, 1.8),
                    ("N-straight", 2 * third, 0.5),
                    ("S-straight", 2 * third, 0.5),
                ],
            ),
            horizon_steps=horizon_steps,
            seed=201,
        ),
        Scenario(
            name="test-6-ew-heavy",
            phase_table=build_phase_table([0, 1, 2, 3, 4, 5], name="6b"),
            arrivals=_schedule(
                _rates(0.4, 0.35, {"E-straight": 1.5, "W-straight": 1.5})
            ),
            horizon_steps=horizon_steps,
            seed=202,
        ),
        Scenario(
            name="test-6-left-surge",
            phase_table=build_phase_table([0, 1, 2, 3, 4, 5], name="6c"),
            arrivals=_schedule(
                _rates(0.7, 0.5),
                [("E-left", 2 * third, 1.2), ("W-left", 2 * third, 1.2)],
            ),
            horizon_steps=horizon_steps,
            seed=203,
        ),
    ]


def dqn_benchmark_scenario(horizon_steps: int = 360) -> Scenario:
    """4-phase intersection with one heavy direction: a fixed cycle starves the
    east-west straights while an adaptive plan keeps them flowing."""
    return Scenario(
        name="dqn-4-asym",
        phase_table=build_phase_table([0, 1, 2, 3], name="4asym"),
        arrivals=_schedule(
            _rates(0.2, 0.2, {"E-straight": 1.7, "W-straight": 1.7})
        ),
        horizon_steps=horizon_steps,
        seed=301,
    )
