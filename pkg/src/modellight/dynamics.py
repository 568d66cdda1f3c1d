"""Learned intersection dynamics.

Each model maps (observation, action) to a predicted next observation and
reward through a two-layer LSTM (16 then 64 hidden units) and a 9-output
dense head: 8 next-queue predictions plus the reward. One model is kept per
training task; the ensemble exists to limit the bias any single model would
impose on imagined experience.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from . import nn
from .errors import InvalidActionError, ModelDivergenceError, ScenarioError
from .sim import (
    NUM_MOVEMENTS,
    NUM_PRIMARY_PHASES,
    OBSERVATION_SIZE,
    PhaseTable,
    Scenario,
    Transition,
    TransitionKind,
    decode_queues,
    initial_state,
    step,
)

MODEL_INPUT_SIZE = OBSERVATION_SIZE  # queues + action one-hot
MODEL_OUTPUT_SIZE = NUM_MOVEMENTS + 1  # next queues + reward
DEFAULT_HIDDEN_SIZES = (16, 64)


class TransitionSet:
    """Appendable, uniformly sampleable buffer of transitions for one task."""

    def __init__(self, transitions: Iterable[Transition] = ()) -> None:
        self._all: list[Transition] = []
        self._by_kind: dict[TransitionKind, list[Transition]] = {
            TransitionKind.REAL: [],
            TransitionKind.IMAGINARY: [],
        }
        self.extend(transitions)

    def append(self, transition: Transition) -> None:
        self._all.append(transition)
        self._by_kind[transition.kind].append(transition)

    def extend(self, transitions: Iterable[Transition]) -> None:
        for t in transitions:
            self.append(t)

    def __len__(self) -> int:
        return len(self._all)

    def count(self, kind: TransitionKind) -> int:
        return len(self._by_kind[kind])

    def sample(
        self,
        size: int,
        rng: np.random.Generator,
        kind: TransitionKind | None = None,
    ) -> list[Transition]:
        """Uniform sample without replacement; returns everything (shuffled)
        when fewer than `size` transitions are stored."""
        pool = self._all if kind is None else self._by_kind[kind]
        if not pool:
            raise ValueError("cannot sample from an empty transition set")
        take = min(size, len(pool))
        idx = rng.choice(len(pool), size=take, replace=False)
        return [pool[i] for i in idx]

    def observations(self, kind: TransitionKind | None = None) -> list[np.ndarray]:
        pool = self._all if kind is None else self._by_kind[kind]
        return [t.obs for t in pool]


def encode_model_input(
    obs: np.ndarray, action: int, phase_table: PhaseTable
) -> np.ndarray:
    """Model input: 8 raw queue counts then the action's primary-phase one-hot."""
    if not 0 <= action < len(phase_table):
        raise InvalidActionError(
            f"action {action!r} invalid for phase table {phase_table.name!r}"
        )
    x = np.zeros(MODEL_INPUT_SIZE)
    x[:NUM_MOVEMENTS] = decode_queues(np.asarray(obs, dtype=float))
    x[NUM_MOVEMENTS + phase_table.phases[action].primary] = 1.0
    return x


def _encode_inputs_batch(
    obs: np.ndarray, actions: np.ndarray, phase_table: PhaseTable
) -> np.ndarray:
    batch = obs.shape[0]
    x = np.zeros((batch, MODEL_INPUT_SIZE))
    x[:, :NUM_MOVEMENTS] = obs[:, :NUM_MOVEMENTS]
    primaries = phase_table.primary_ids[actions]
    x[np.arange(batch), NUM_MOVEMENTS + primaries] = 1.0
    return x


def task_seed(task_name: str) -> int:
    """Stable per-task stream key, independent of sampling order."""
    return zlib.crc32(task_name.encode())


class IntersectionModel:
    """One learned dynamics model: LSTM stack plus a dense prediction head."""

    def __init__(
        self,
        rng: np.random.Generator | None = None,
        model_id: str = "model",
        hidden_sizes: Sequence[int] = DEFAULT_HIDDEN_SIZES,
        queue_scale: float = 20.0,
        reward_scale: float | None = None,
        zero_init: bool = False,
    ) -> None:
        self.model_id = model_id
        self.queue_scale = queue_scale
        # reward is a queue sum over 8 movements, so scale accordingly
        self.reward_scale = reward_scale if reward_scale is not None else 8.0 * queue_scale
        if zero_init:
            self.lstm = _zero_lstm(MODEL_INPUT_SIZE, hidden_sizes)
            self.head = nn.DenseParams(
                np.zeros((MODEL_OUTPUT_SIZE, hidden_sizes[-1])), np.zeros(MODEL_OUTPUT_SIZE)
            )
        else:
            if rng is None:
                raise ValueError("rng required unless zero_init=True")
            self.lstm = nn.lstm_init(rng, MODEL_INPUT_SIZE, hidden_sizes)
            self.head = nn.dense_init(rng, hidden_sizes[-1], MODEL_OUTPUT_SIZE)
        self.adam = nn.AdamState.zeros_like(self._arrays())
        self.epoch_losses: list[float] = []

    def _tree(self):
        return {"lstm": self.lstm, "head": self.head}

    def _arrays(self) -> nn.ArrayDict:
        return nn.named_arrays(self._tree())

    def _assign(self, arrays: nn.ArrayDict) -> None:
        tree = nn.rebuild_like(self._tree(), arrays)
        self.lstm = tree["lstm"]
        self.head = tree["head"]

    def _forward(self, x: np.ndarray):
        """Normalized raw outputs for encoded inputs x of shape (B, 16)."""
        scaled = x.copy()
        scaled[:, :NUM_MOVEMENTS] /= self.queue_scale
        h, lstm_cache = nn.lstm_forward(self.lstm, scaled[None, :, :])
        out, head_cache = nn.dense_forward(self.head, h)
        return out, (lstm_cache, head_cache)

    def _backward(self, caches, d_out: np.ndarray) -> nn.ArrayDict:
        lstm_cache, head_cache = caches
        d_h, head_grads = nn.dense_backward(self.head, head_cache, d_out)
        lstm_grads = nn.lstm_backward(self.lstm, lstm_cache, d_h)
        return nn.named_arrays({"lstm": lstm_grads, "head": head_grads})

    def predict(
        self, obs: np.ndarray, action: int, phase_table: PhaseTable
    ) -> tuple[np.ndarray, float]:
        """Predicted (next observation, reward) for taking `action` in `obs`.

        Queue predictions stay real-valued but are clamped at zero; the reward
        is clamped non-positive; the next observation's phase block is the
        one-hot of the action actually taken.
        """
        x = encode_model_input(obs, action, phase_table)
        out, _ = self._forward(x[None, :])
        raw = out[0]
        if not np.isfinite(raw).all():
            raise ModelDivergenceError(f"model {self.model_id!r} produced non-finite output")
        queues = np.maximum(raw[:NUM_MOVEMENTS] * self.queue_scale, 0.0)
        reward = min(float(raw[NUM_MOVEMENTS] * self.reward_scale), 0.0)
        next_obs = np.zeros(OBSERVATION_SIZE)
        next_obs[:NUM_MOVEMENTS] = queues
        next_obs[NUM_MOVEMENTS + phase_table.phases[action].primary] = 1.0
        return next_obs, reward

    def normalized_targets(self, transitions: Sequence[Transition]) -> np.ndarray:
        y = np.zeros((len(transitions), MODEL_OUTPUT_SIZE))
        for i, t in enumerate(transitions):
            y[i, :NUM_MOVEMENTS] = decode_queues(t.next_obs) / self.queue_scale
            y[i, NUM_MOVEMENTS] = t.reward / self.reward_scale
        return y

    def mean_squared_error(
        self, transitions: Sequence[Transition], phase_table: PhaseTable
    ) -> float:
        """Mean over transitions of the squared 9-dim prediction error."""
        obs = np.stack([t.obs for t in transitions])
        actions = np.array([t.action for t in transitions], dtype=np.intp)
        x = _encode_inputs_batch(obs, actions, phase_table)
        out, _ = self._forward(x)
        y = self.normalized_targets(transitions)
        return float(np.mean(np.sum((out - y) ** 2, axis=1)))


def _zero_lstm(input_size: int, hidden_sizes: Sequence[int]) -> nn.LstmParams:
    layers = []
    n_in = input_size
    for hidden in hidden_sizes:
        layers.append(
            nn.LstmLayerParams(
                wx={g: np.zeros((hidden, n_in)) for g in nn.GATES},
                wh={g: np.zeros((hidden, hidden)) for g in nn.GATES},
                b={g: np.zeros(hidden) for g in nn.GATES},
            )
        )
        n_in = hidden
    return nn.LstmParams(tuple(layers))


def train_intersection_model(
    model: IntersectionModel,
    dataset: Sequence[Transition],
    phase_table: PhaseTable,
    epochs: int,
    batch_size: int,
    rng: np.random.Generator,
    lr: float = 0.001,
) -> list[float]:
    """Adam minimization of the squared (next state, reward) prediction error.

    Updates the model in place and returns the per-epoch mean training loss.
    """
    if not dataset:
        raise ValueError("empty training dataset")
    obs = np.stack([t.obs for t in dataset])
    actions = np.array([t.action for t in dataset], dtype=np.intp)
    x_all = _encode_inputs_batch(obs, actions, phase_table)
    y_all = model.normalized_targets(dataset)

    n = len(dataset)
    losses = []
    for _ in range(epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            x, y = x_all[idx], y_all[idx]
            out, caches = model._forward(x)
            err = out - y
            batch_loss = float(np.mean(np.sum(err**2, axis=1)))
            grads = model._backward(caches, 2.0 * err / len(idx))
            new_params, model.adam = nn.adam_update(model._arrays(), grads, model.adam, lr)
            model._assign(new_params)
            epoch_loss += batch_loss * len(idx)
        losses.append(epoch_loss / n)
    model.epoch_losses = losses
    return losses


class RolloutStream:
    """Stateful generator of imaginary transitions with short-rollout restarts.

    Every `rollout_len` steps the current observation is replaced by one drawn
    uniformly from the start pool (observations of previously seen real
    transitions), bounding how far model error can compound.
    """

    def __init__(
        self,
        model,
        start_pool: Sequence[np.ndarray],
        rollout_len: int,
        rng: np.random.Generator,
        phase_table: PhaseTable,
    ) -> None:
        if not start_pool:
            raise ValueError("empty rollout start pool")
        if rollout_len < 1:
            raise ValueError(f"rollout_len must be >= 1, got {rollout_len}")
        self._model = model
        self._pool = list(start_pool)
        self._rollout_len = rollout_len
        self._rng = rng
        self._table = phase_table
        self._steps_in_rollout = 0
        self._obs = self._sample_start()

    def _sample_start(self) -> np.ndarray:
        return self._pool[int(self._rng.integers(len(self._pool)))].copy()

    def observation(self) -> np.ndarray:
        return self._obs

    def step(self, action: int) -> Transition:
        obs = self._obs
        next_obs, reward = self._model.predict(obs, action, self._table)
        transition = Transition(
            obs=obs,
            action=int(action),
            next_obs=next_obs,
            reward=reward,
            kind=TransitionKind.IMAGINARY,
        )
        self._steps_in_rollout += 1
        if self._steps_in_rollout >= self._rollout_len:
            self._obs = self._sample_start()
            self._steps_in_rollout = 0
        else:
            self._obs = next_obs
        return transition


def generate_imaginary_rollouts(
    model,
    policy: Callable[[np.ndarray], int],
    source: TransitionSet | Sequence[Transition],
    total: int,
    rollout_len: int,
    rng: np.random.Generator,
    phase_table: PhaseTable,
) -> list[Transition]:
    """Emit exactly `total` imaginary transitions in ceil(total / rollout_len)
    short rollouts, each starting from a real observation in `source`."""
    if isinstance(source, TransitionSet):
        pool = source.observations(TransitionKind.REAL)
    else:
        pool = [t.obs for t in source if t.kind is TransitionKind.REAL]
    stream = RolloutStream(model, pool, rollout_len, rng, phase_table)
    out = []
    for _ in range(total):
        out.append(stream.step(policy(stream.observation())))
    return out


class OracleIntersectionModel:
    """Perfect dynamics: answers predict() with the true queue recurrence.

    Arrivals are drawn from the wrapped scenario's process with this oracle's
    own generator, and a private step counter indexes the arrival schedule.
    Useful for validating that imagined training matches real training when
    the model is exact.
    """

    def __init__(self, scenario: Scenario, rng: np.random.Generator) -> None:
        self._scenario = scenario
        self._rng = rng
        self._step_index = 0
        self.model_id = f"oracle:{scenario.name}"

    def predict(
        self, obs: np.ndarray, action: int, phase_table: PhaseTable
    ) -> tuple[np.ndarray, float]:
        from .sim import IntersectionState, encode_state, sample_arrivals

        queues = np.rint(decode_queues(obs)).astype(np.int64)
        # recover the table-local phase from the primary-phase one-hot
        primary = int(np.argmax(obs[NUM_MOVEMENTS:]))
        local = int(np.where(phase_table.primary_ids == primary)[0][0])
        state = IntersectionState(queues, local, min(self._step_index, self._scenario.horizon_steps - 1))
        arrivals = sample_arrivals(self._scenario, state.step_index, self._rng)
        next_state, reward, _ = step(state, action, arrivals, self._scenario)
        self._step_index += 1
        return encode_state(next_state, phase_table), reward


@dataclass
class ModelEnsemble:
    """Task-indexed collection of intersection models (one per training task,
    or a single shared model when ablating the ensemble)."""

    models: dict[str, IntersectionModel] = field(default_factory=dict)
    shared: bool = False

    def get_or_create(
        self, task_name: str, seed_root: int, **model_kwargs
    ) -> IntersectionModel:
        key = "__shared__" if self.shared else task_name
        if key not in self.models:
            rng = np.random.default_rng([seed_root, task_seed(key)])
            self.models[key] = IntersectionModel(rng=rng, model_id=key, **model_kwargs)
        return self.models[key]

    def __len__(self) -> int:
        return len(self.models)
