"""Value-based signal-control policy.

The Q-network scores every phase of an arbitrary phase table with one shared
parameter set: a movement encoder embeds each movement's (queue, has-green)
features, a phase's two movement embeddings are summed, and a scalar scorer
maps the sum to that phase's Q value. Because nothing in the parameters
depends on the table size, the same policy drives 4-, 6- and 8-phase
intersections unchanged.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from . import nn
from .errors import NonFiniteError
from .sim import (
    NUM_MOVEMENTS,
    PRIMARY_GREEN,
    PhaseTable,
    Transition,
    TransitionKind,
)

EMBED_SIZE = 16
MOVEMENT_FEATURES = 2  # queue count (scaled) and green-in-current-phase flag


@dataclass(frozen=True)
class PolicyParams:
    """Q-network parameters; a value type, updates return fresh copies."""

    encoder: nn.DenseParams  # (EMBED_SIZE, 2)
    scorer: nn.DenseParams   # (1, EMBED_SIZE)
    input_scale: float = 20.0
    version: int = 0

    def arrays(self) -> nn.ArrayDict:
        return nn.named_arrays({"encoder": self.encoder, "scorer": self.scorer})

    def with_arrays(self, arrays: nn.ArrayDict, bump: int = 0) -> "PolicyParams":
        tree = nn.rebuild_like({"encoder": self.encoder, "scorer": self.scorer}, arrays)
        return replace(
            self, encoder=tree["encoder"], scorer=tree["scorer"], version=self.version + bump
        )


def init_policy(
    rng: np.random.Generator, embed_size: int = EMBED_SIZE, input_scale: float = 20.0
) -> PolicyParams:
    return PolicyParams(
        encoder=nn.dense_init(rng, MOVEMENT_FEATURES, embed_size),
        scorer=nn.dense_init(rng, embed_size, 1),
        input_scale=input_scale,
    )


def sync_target(params: PolicyParams) -> PolicyParams:
    """Deep value copy used as the frozen target network."""
    return params.with_arrays(nn.copy_arrays(params.arrays()))


@dataclass
class _QCache:
    features: np.ndarray    # (B, 8, 2)
    pre: np.ndarray         # (B, 8, E) encoder pre-activations
    embeddings: np.ndarray  # (B, 8, E)
    phase_sums: np.ndarray  # (B, P, E)


#: Q outputs are produced in units of OUTPUT_SCALE queued vehicles so the
#: scorer parameters stay O(1) while values span hundreds
OUTPUT_SCALE = 50.0

#: queue features saturate at this many input scales; beyond that every queue
#: is equally urgent and unbounded features destabilize the TD updates
FEATURE_CAP = 5.0


def _movement_features(params: PolicyParams, obs: np.ndarray) -> np.ndarray:
    obs = np.atleast_2d(np.asarray(obs, dtype=float))
    queues = np.minimum(obs[:, :NUM_MOVEMENTS] / params.input_scale, FEATURE_CAP)
    current_primary = np.argmax(obs[:, NUM_MOVEMENTS:], axis=1)
    green = PRIMARY_GREEN[current_primary].astype(float)
    return np.stack([queues, green], axis=2)


def _q_forward(
    params: PolicyParams, obs: np.ndarray, phase_table: PhaseTable
) -> tuple[np.ndarray, _QCache]:
    feats = _movement_features(params, obs)
    batch = feats.shape[0]
    flat = feats.reshape(batch * NUM_MOVEMENTS, MOVEMENT_FEATURES)
    pre = flat @ params.encoder.w.T + params.encoder.b
    emb = np.maximum(pre, 0.0).reshape(batch, NUM_MOVEMENTS, -1)
    pairs = phase_table.movement_pairs  # (P, 2)
    phase_sums = emb[:, pairs, :].sum(axis=2)  # (B, P, E)
    q = (phase_sums @ params.scorer.w[0] + params.scorer.b[0]) * OUTPUT_SCALE
    nn.ensure_finite("q_values", q)
    cache = _QCache(
        features=feats,
        pre=pre.reshape(batch, NUM_MOVEMENTS, -1),
        embeddings=emb,
        phase_sums=phase_sums,
    )
    return q, cache


def q_values(
    params: PolicyParams, obs: np.ndarray, phase_table: PhaseTable
) -> np.ndarray:
    """Q value of every phase in the table for one observation."""
    q, _ = _q_forward(params, obs, phase_table)
    return q[0]


def q_values_batch(
    params: PolicyParams, obs: np.ndarray, phase_table: PhaseTable
) -> np.ndarray:
    q, _ = _q_forward(params, obs, phase_table)
    return q


def select_action(q: np.ndarray, epsilon: float, rng: np.random.Generator) -> int:
    """Epsilon-greedy over a Q vector; exact ties break to the lowest index."""
    q = np.asarray(q)
    if q.size == 0:
        raise ValueError("empty Q vector")
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError(f"epsilon must lie in [0, 1], got {epsilon}")
    if epsilon > 0.0 and rng.random() < epsilon:
        return int(rng.integers(q.size))
    return int(np.argmax(q))


@dataclass(frozen=True)
class EpsilonSchedule:
    """Exploration schedule: multiplicative decay per episode down to a floor."""

    initial: float = 0.8
    minimum: float = 0.2
    decay: float = 0.95

    def __post_init__(self) -> None:
        if not 0.0 <= self.minimum <= self.initial <= 1.0:
            raise ValueError("need 0 <= minimum <= initial <= 1")
        if not 0.0 < self.decay <= 1.0:
            raise ValueError("decay must lie in (0, 1]")

    def at(self, episodes_completed: int) -> float:
        return max(self.minimum, self.initial * self.decay**episodes_completed)


@dataclass(frozen=True)
class ReplayBatch:
    transitions: tuple[Transition, ...]
    kind: TransitionKind

    def __len__(self) -> int:
        return len(self.transitions)

    def arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        obs = np.stack([t.obs for t in self.transitions])
        actions = np.array([t.action for t in self.transitions], dtype=np.intp)
        next_obs = np.stack([t.next_obs for t in self.transitions])
        rewards = np.array([t.reward for t in self.transitions])
        return obs, actions, next_obs, rewards


def make_batch(transitions: Sequence[Transition], kind: TransitionKind | None = None) -> ReplayBatch:
    if kind is None:
        kind = transitions[0].kind
    return ReplayBatch(tuple(transitions), kind)


def bellman_targets(
    batch: ReplayBatch,
    target_params: PolicyParams,
    discount: float,
    phase_table: PhaseTable,
) -> np.ndarray:
    """One-step TD targets r + discount * max_a' Q(s', a') under the target net."""
    if not 0.0 <= discount < 1.0:
        raise ValueError(f"discount must lie in [0, 1), got {discount}")
    _, _, next_obs, rewards = batch.arrays()
    q_next = q_values_batch(target_params, next_obs, phase_table)
    return rewards + discount * q_next.max(axis=1)


def _q_backward(
    params: PolicyParams,
    cache: _QCache,
    actions: np.ndarray,
    d_q_taken: np.ndarray,
    phase_table: PhaseTable,
) -> nn.ArrayDict:
    """Gradients w.r.t. encoder and scorer given dLoss/dQ(s, a_taken)."""
    d_q_taken = d_q_taken * OUTPUT_SCALE  # chain through the output scaling
    batch = cache.embeddings.shape[0]
    pairs = phase_table.movement_pairs[actions]  # (B, 2)
    taken_sum = cache.phase_sums[np.arange(batch), actions]  # (B, E)

    d_scorer_w = (d_q_taken[:, None] * taken_sum).sum(axis=0)[None, :]
    d_scorer_b = np.array([d_q_taken.sum()])

    d_emb = np.zeros_like(cache.embeddings)
    upstream = d_q_taken[:, None] * params.scorer.w[0][None, :]  # (B, E)
    rows = np.repeat(np.arange(batch), 2)
    np.add.at(d_emb, (rows, pairs.reshape(-1)), np.repeat(upstream, 2, axis=0))

    d_pre = d_emb * (cache.pre > 0)
    flat_dpre = d_pre.reshape(-1, d_pre.shape[-1])
    flat_feat = cache.features.reshape(-1, MOVEMENT_FEATURES)
    d_enc_w = flat_dpre.T @ flat_feat
    d_enc_b = flat_dpre.sum(axis=0)

    return nn.named_arrays(
        {
            "encoder": nn.DenseParams(d_enc_w, d_enc_b),
            "scorer": nn.DenseParams(d_scorer_w, d_scorer_b),
        }
    )


def td_loss_and_gradients(
    params: PolicyParams,
    batch: ReplayBatch,
    targets: np.ndarray,
    phase_table: PhaseTable,
) -> tuple[float, nn.ArrayDict]:
    """Mean squared TD error on the batch plus its exact parameter gradients."""
    obs, actions, _, _ = batch.arrays()
    q, cache = _q_forward(params, obs, phase_table)
    q_taken = q[np.arange(len(batch)), actions]
    errors = q_taken - targets
    loss = float(np.mean(errors**2))
    if not np.isfinite(loss):
        raise NonFiniteError("TD loss is not finite")
    d_q_taken = 2.0 * errors / len(batch)
    grads = _q_backward(params, cache, actions, d_q_taken, phase_table)
    return loss, grads


#: global gradient-norm cap for TD updates; squared-error targets of hundreds
#: of queued vehicles otherwise produce steps that kill the ReLU encoder
MAX_GRAD_NORM = 10.0


def clip_gradients(grads: nn.ArrayDict, max_norm: float) -> nn.ArrayDict:
    total = float(np.sqrt(sum(float(np.sum(g**2)) for g in grads.values())))
    if total <= max_norm or total == 0.0:
        return grads
    scale = max_norm / total
    return {k: g * scale for k, g in grads.items()}


def dqn_gradient_step(
    params: PolicyParams,
    batch: ReplayBatch,
    target_params: PolicyParams,
    discount: float,
    lr: float,
    phase_table: PhaseTable,
    max_grad_norm: float = MAX_GRAD_NORM,
) -> tuple[PolicyParams, float]:
    """One SGD step on the mean squared TD error; the target net stays fixed."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    targets = bellman_targets(batch, target_params, discount, phase_table)
    loss, grads = td_loss_and_gradients(params, batch, targets, phase_table)
    updated = nn.sgd_update(params.arrays(), clip_gradients(grads, max_grad_norm), lr)
    return params.with_arrays(updated, bump=1), loss


def greedy_policy(
    params: PolicyParams,
    phase_table: PhaseTable,
    epsilon: float,
    rng: np.random.Generator,
):
    """Bind parameters into an observation -> action callable."""

    def policy(obs: np.ndarray) -> int:
        return select_action(q_values(params, obs, phase_table), epsilon, rng)

    return policy


def save_policy(path, params: PolicyParams) -> None:
    nn.save_arrays(
        path,
        params.arrays(),
        {"kind": "policy", "input_scale": params.input_scale, "version": params.version},
    )


def load_policy(path) -> PolicyParams:
    arrays, meta = nn.load_arrays(path)
    if meta.get("kind") != "policy":
        raise nn.CheckpointError(f"{path} is not a policy checkpoint")
    template = PolicyParams(
        encoder=nn.DenseParams(arrays["encoder.w"], arrays["encoder.b"]),
        scorer=nn.DenseParams(arrays["scorer.w"], arrays["scorer.b"]),
        input_scale=float(meta.get("input_scale", 20.0)),
        version=int(meta.get("version", 0)),
    )
    return template
