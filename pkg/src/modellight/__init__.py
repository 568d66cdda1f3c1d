"""Model-based meta-reinforcement learning lab for traffic signal control.

A queue-based single-intersection simulator, a from-scratch neural kernel,
an ensemble of learned LSTM dynamics models, a shared-parameter DQN phase
scorer, the full meta-training loop on real and imagined experience, and an
experiment harness with model-free baselines.
"""

from .agent import (
    EpsilonSchedule,
    PolicyParams,
    init_policy,
    load_policy,
    q_values,
    save_policy,
    select_action,
    sync_target,
)
from .dynamics import (
    IntersectionModel,
    ModelEnsemble,
    OracleIntersectionModel,
    TransitionSet,
    generate_imaginary_rollouts,
    train_intersection_model,
)
from .harness import (
    ExperimentConfig,
    ResultRow,
    compare_methods,
    load_scenario,
    run_experiment,
    save_scenario,
)
from .meta import MetaConfig, TaskPool, meta_test, meta_train
from .sim import (
    ArrivalEntry,
    ArrivalSchedule,
    EpisodeStats,
    IntersectionState,
    Movement,
    Phase,
    PhaseTable,
    Scenario,
    Transition,
    TransitionCounter,
    TransitionKind,
    average_travel_time,
    build_phase_table,
    encode_state,
    fixed_cycle_policy,
    run_episode,
    sample_arrivals,
    step,
)

__version__ = "0.1.0"
