"""Minimal double-precision neural-network kernel.

Dense layers, a stacked LSTM, reverse-mode gradients written out by hand,
SGD and Adam, a central finite-difference oracle for gradient checking, and
a versioned .npz checkpoint format. Everything operates on plain numpy
arrays; batched inputs use a leading batch axis and gradients are summed
over it, which is identical to accumulating per-sample gradients.
"""
from __future__ import annotations

import io
import json
from dataclasses import dataclass, replace
from enum import Enum
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import CheckpointError, NonFiniteError

ArrayDict = dict[str, np.ndarray]


def ensure_finite(name: str, arr: np.ndarray) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values in {name}")
    return arr


class Activation(Enum):
    IDENTITY = "identity"
    RELU = "relu"
    SIGMOID = "sigmoid"
    TANH = "tanh"


def sigmoid(x: np.ndarray) -> np.ndarray:
    # evaluated piecewise to avoid overflow in exp for large |x|
    out = np.empty_like(x, dtype=float)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _apply_activation(act: Activation, z: np.ndarray) -> np.ndarray:
    if act is Activation.IDENTITY:
        return z
    if act is Activation.RELU:
        return np.maximum(z, 0.0)
    if act is Activation.SIGMOID:
        return sigmoid(z)
    if act is Activation.TANH:
        return np.tanh(z)
    raise ValueError(f"unknown activation {act!r}")


def _activation_grad(act: Activation, z: np.ndarray, y: np.ndarray) -> np.ndarray:
    if act is Activation.IDENTITY:
        return np.ones_like(y)
    if act is Activation.RELU:
        return (z > 0).astype(float)
    if act is Activation.SIGMOID:
        return y * (1.0 - y)
    if act is Activation.TANH:
        return 1.0 - y * y
    raise ValueError(f"unknown activation {act!r}")


# ---------------------------------------------------------------------------
# dense layer


@dataclass(frozen=True)
class DenseParams:
    """Fully-connected layer parameters: weights (out, in) and bias (out,)."""

    w: np.ndarray
    b: np.ndarray

    def __post_init__(self) -> None:
        if self.w.ndim != 2 or self.b.shape != (self.w.shape[0],):
            raise ValueError(
                f"inconsistent dense shapes: w {self.w.shape}, b {self.b.shape}"
            )


@dataclass
class DenseCache:
    x: np.ndarray
    z: np.ndarray
    y: np.ndarray
    activation: Activation


def dense_init(rng: np.random.Generator, n_in: int, n_out: int) -> DenseParams:
    limit = 1.0 / np.sqrt(n_in)
    w = rng.uniform(-limit, limit, size=(n_out, n_in))
    b = np.zeros(n_out)
    return DenseParams(w, b)


def dense_forward(
    params: DenseParams, x: np.ndarray, activation: Activation = Activation.IDENTITY
) -> tuple[np.ndarray, DenseCache]:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != params.w.shape[1]:
        raise ValueError(
            f"input size {x.shape[-1]} does not match layer input {params.w.shape[1]}"
        )
    z = x @ params.w.T + params.b
    y = _apply_activation(activation, z)
    ensure_finite("dense_forward output", y)
    return y, DenseCache(x=x, z=z, y=y, activation=activation)


def dense_backward(
    params: DenseParams, cache: DenseCache, dy: np.ndarray
) -> tuple[np.ndarray, DenseParams]:
    """Gradients of a scalar loss: returns (d_input, parameter grads)."""
    dz = dy * _activation_grad(cache.activation, cache.z, cache.y)
    if dz.ndim == 1:
        dw = np.outer(dz, cache.x)
        db = dz.copy()
    else:
        flat_dz = dz.reshape(-1, dz.shape[-1])
        flat_x = cache.x.reshape(-1, cache.x.shape[-1])
        dw = flat_dz.T @ flat_x
        db = flat_dz.sum(axis=0)
    dx = dz @ params.w
    return dx, DenseParams(dw, db)


# ---------------------------------------------------------------------------
# stacked LSTM

GATES = ("i", "f", "g", "o")  # input, forget, cell candidate, output


@dataclass(frozen=True)
class LstmLayerParams:
    """Per-gate input weights (H, in), recurrent weights (H, H) and biases (H,)."""

    wx: Mapping[str, np.ndarray]
    wh: Mapping[str, np.ndarray]
    b: Mapping[str, np.ndarray]

    @property
    def hidden_size(self) -> int:
        return self.b["i"].shape[0]

    @property
    def input_size(self) -> int:
        return self.wx["i"].shape[1]


@dataclass(frozen=True)
class LstmParams:
    layers: tuple[LstmLayerParams, ...]

    @property
    def output_size(self) -> int:
        return self.layers[-1].hidden_size


def lstm_layer_init(
    rng: np.random.Generator, n_in: int, hidden: int, forget_bias: float = 1.0
) -> LstmLayerParams:
    lim_x = 1.0 / np.sqrt(n_in)
    lim_h = 1.0 / np.sqrt(hidden)
    wx = {g: rng.uniform(-lim_x, lim_x, size=(hidden, n_in)) for g in GATES}
    wh = {g: rng.uniform(-lim_h, lim_h, size=(hidden, hidden)) for g in GATES}
    b = {g: np.zeros(hidden) for g in GATES}
    b["f"] = np.full(hidden, forget_bias)
    return LstmLayerParams(wx=wx, wh=wh, b=b)


def lstm_init(
    rng: np.random.Generator, input_size: int, hidden_sizes: Sequence[int] = (16, 64)
) -> LstmParams:
    layers = []
    n_in = input_size
    for hidden in hidden_sizes:
        layers.append(lstm_layer_init(rng, n_in, hidden))
        n_in = hidden
    return LstmParams(tuple(layers))


@dataclass
class _CellCache:
    x: np.ndarray
    h_prev: np.ndarray
    c_prev: np.ndarray
    gates: dict[str, np.ndarray]
    c: np.ndarray
    tanh_c: np.ndarray


@dataclass
class LstmCache:
    steps: list[list[_CellCache]]  # [layer][time]
    batched: bool


def lstm_cell(
    layer: LstmLayerParams, x: np.ndarray, h_prev: np.ndarray, c_prev: np.ndarray
) -> tuple[np.ndarray, np.ndarray, _CellCache]:
    """One LSTM step: sigmoid gates, tanh candidate, elementwise state update."""
    pre = {g: x @ layer.wx[g].T + h_prev @ layer.wh[g].T + layer.b[g] for g in GATES}
    gates = {
        "i": sigmoid(pre["i"]),
        "f": sigmoid(pre["f"]),
        "g": np.tanh(pre["g"]),
        "o": sigmoid(pre["o"]),
    }
    c = gates["f"] * c_prev + gates["i"] * gates["g"]
    tanh_c = np.tanh(c)
    h = gates["o"] * tanh_c
    cache = _CellCache(x=x, h_prev=h_prev, c_prev=c_prev, gates=gates, c=c, tanh_c=tanh_c)
    return h, c, cache


def lstm_forward(
    params: LstmParams, inputs: np.ndarray | Sequence[np.ndarray]
) -> tuple[np.ndarray, LstmCache]:
    """Run the stack over a sequence; returns the top layer's final hidden state.

    `inputs` is (T, in) for a single sequence or (T, B, in) for a batch; the
    result is (H,) or (B, H) accordingly. Hidden and cell states start at zero.
    """
    xs = np.asarray(inputs, dtype=float)
    if xs.ndim == 2:
        batched = False
        xs = xs[:, None, :]
    elif xs.ndim == 3:
        batched = True
    else:
        raise ValueError(f"expected (T, in) or (T, B, in) inputs, got shape {xs.shape}")
    if xs.shape[0] == 0:
        raise ValueError("empty input sequence")

    steps: list[list[_CellCache]] = []
    layer_inputs = xs
    for layer in params.layers:
        batch = layer_inputs.shape[1]
        h = np.zeros((batch, layer.hidden_size))
        c = np.zeros((batch, layer.hidden_size))
        caches = []
        outputs = []
        for t in range(layer_inputs.shape[0]):
            h, c, cache = lstm_cell(layer, layer_inputs[t], h, c)
            caches.append(cache)
            outputs.append(h)
        steps.append(caches)
        layer_inputs = np.stack(outputs)
    final = layer_inputs[-1]
    ensure_finite("lstm_forward output", final)
    return (final if batched else final[0]), LstmCache(steps=steps, batched=batched)


def _lstm_cell_backward(
    layer: LstmLayerParams,
    cache: _CellCache,
    dh: np.ndarray,
    dc: np.ndarray,
    grads: dict[str, dict[str, np.ndarray]],
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Backward through one cell; accumulates into `grads`, returns
    (dx, dh_prev, dc_prev)."""
    g = cache.gates
    do = dh * cache.tanh_c
    dc_total = dc + dh * g["o"] * (1.0 - cache.tanh_c**2)
    di = dc_total * g["g"]
    dg = dc_total * g["i"]
    df = dc_total * cache.c_prev
    dc_prev = dc_total * g["f"]

    dpre = {
        "i": di * g["i"] * (1.0 - g["i"]),
        "f": df * g["f"] * (1.0 - g["f"]),
        "g": dg * (1.0 - g["g"] ** 2),
        "o": do * g["o"] * (1.0 - g["o"]),
    }
    dx = np.zeros_like(cache.x)
    dh_prev = np.zeros_like(cache.h_prev)
    for gate in GATES:
        d = dpre[gate]
        grads["wx"][gate] += d.T @ cache.x
        grads["wh"][gate] += d.T @ cache.h_prev
        grads["b"][gate] += d.sum(axis=0)
        dx += d @ layer.wx[gate]
        dh_prev += d @ layer.wh[gate]
    return dx, dh_prev, dc_prev


def lstm_backward(
    params: LstmParams, cache: LstmCache, d_final: np.ndarray
) -> LstmParams:
    """Gradients of a scalar loss w.r.t. every LSTM parameter, given the
    gradient w.r.t. the top layer's final hidden state."""
    d_final = np.asarray(d_final, dtype=float)
    if not cache.batched:
        d_final = d_final[None, :]

    n_steps = len(cache.steps[0])
    # upstream gradient per (layer, time) on that layer's hidden output
    d_out = [
        [np.zeros_like(cache.steps[l][t].gates["o"]) for t in range(n_steps)]
        for l in range(len(params.layers))
    ]
    d_out[-1][-1] = d_final

    grad_layers = []
    for l in range(len(params.layers) - 1, -1, -1):
        layer = params.layers[l]
        grads = {
            "wx": {g: np.zeros_like(layer.wx[g]) for g in GATES},
            "wh": {g: np.zeros_like(layer.wh[g]) for g in GATES},
            "b": {g: np.zeros_like(layer.b[g]) for g in GATES},
        }
        dh_next = np.zeros((d_final.shape[0], layer.hidden_size))
        dc_next = np.zeros_like(dh_next)
        for t in range(n_steps - 1, -1, -1):
            dh = d_out[l][t] + dh_next
            dx, dh_next, dc_next = _lstm_cell_backward(
                layer, cache.steps[l][t], dh, dc_next, grads
            )
            if l > 0:
                d_out[l - 1][t] = d_out[l - 1][t] + dx
        grad_layers.append(LstmLayerParams(wx=grads["wx"], wh=grads["wh"], b=grads["b"]))
    grad_layers.reverse()
    return LstmParams(tuple(grad_layers))


# ---------------------------------------------------------------------------
# flattening between structured parameters and named arrays


def named_arrays(tree, prefix: str = "") -> ArrayDict:
    """Flatten a parameter structure into `{dotted.name: array}`."""
    out: ArrayDict = {}

    def visit(node, path):
        if isinstance(node, np.ndarray):
            out[path] = node
        elif isinstance(node, DenseParams):
            out[f"{path}.w"] = node.w
            out[f"{path}.b"] = node.b
        elif isinstance(node, LstmLayerParams):
            for field_name, mapping in (("wx", node.wx), ("wh", node.wh), ("b", node.b)):
                for gate in GATES:
                    out[f"{path}.{field_name}.{gate}"] = mapping[gate]
        elif isinstance(node, LstmParams):
            for idx, layer in enumerate(node.layers):
                visit(layer, f"{path}.{idx}")
        elif isinstance(node, Mapping):
            for key, value in node.items():
                visit(value, f"{path}.{key}" if path else str(key))
        elif isinstance(node, (list, tuple)):
            for idx, value in enumerate(node):
                visit(value, f"{path}.{idx}")
        else:
            raise TypeError(f"cannot flatten node of type {type(node)!r} at {path!r}")

    visit(tree, prefix)
    return out


def rebuild_like(template, arrays: ArrayDict, prefix: str = ""):
    """Inverse of `named_arrays`: rebuild a structure like `template` from names."""
    if isinstance(template, np.ndarray):
        return arrays[prefix]
    if isinstance(template, DenseParams):
        return DenseParams(arrays[f"{prefix}.w"], arrays[f"{prefix}.b"])
    if isinstance(template, LstmLayerParams):
        return LstmLayerParams(
            wx={g: arrays[f"{prefix}.wx.{g}"] for g in GATES},
            wh={g: arrays[f"{prefix}.wh.{g}"] for g in GATES},
            b={g: arrays[f"{prefix}.b.{g}"] for g in GATES},
        )
    if isinstance(template, LstmParams):
        return LstmParams(
            tuple(
                rebuild_like(layer, arrays, f"{prefix}.{idx}")
                for idx, layer in enumerate(template.layers)
            )
        )
    if isinstance(template, Mapping):
        return {
            key: rebuild_like(value, arrays, f"{prefix}.{key}" if prefix else str(key))
            for key, value in template.items()
        }
    if isinstance(template, (list, tuple)):
        rebuilt = [
            rebuild_like(value, arrays, f"{prefix}.{idx}")
            for idx, value in enumerate(template)
        ]
        return type(template)(rebuilt)
    raise TypeError(f"cannot rebuild node of type {type(template)!r}")


def copy_arrays(arrays: ArrayDict) -> ArrayDict:
    return {k: v.copy() for k, v in arrays.items()}


# ---------------------------------------------------------------------------
# optimizers


def _as_dict(params) -> tuple[ArrayDict, bool]:
    if isinstance(params, np.ndarray):
        return {"_": params}, True
    return dict(params), False


def sgd_update(params, grads, lr: float):
    """Plain gradient descent: p <- p - lr * g, elementwise."""
    p, scalar = _as_dict(params)
    g, _ = _as_dict(grads)
    if p.keys() != g.keys():
        raise ValueError("parameter/gradient name mismatch")
    out = {}
    for name in p:
        if p[name].shape != g[name].shape:
            raise ValueError(
                f"shape mismatch for {name}: {p[name].shape} vs {g[name].shape}"
            )
        out[name] = ensure_finite(name, p[name] - lr * g[name])
    return out["_"] if scalar else out


@dataclass(frozen=True)
class AdamState:
    """First/second-moment accumulators plus the bias-correction step counter."""

    m: ArrayDict
    v: ArrayDict
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params, **kw) -> "AdamState":
        p, _ = _as_dict(params)
        return cls(
            m={k: np.zeros_like(v) for k, v in p.items()},
            v={k: np.zeros_like(v) for k, v in p.items()},
            **kw,
        )


def adam_update(params, grads, state: AdamState, lr: float):
    """Adam with bias correction; returns (updated params, updated state)."""
    p, scalar = _as_dict(params)
    g, _ = _as_dict(grads)
    if p.keys() != g.keys() or p.keys() != state.m.keys():
        raise ValueError("parameter/gradient/state name mismatch")
    t = state.step + 1
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    new_p, new_m, new_v = {}, {}, {}
    for name in p:
        if p[name].shape != g[name].shape:
            raise ValueError(
                f"shape mismatch for {name}: {p[name].shape} vs {g[name].shape}"
            )
        m = state.beta1 * state.m[name] + (1.0 - state.beta1) * g[name]
        v = state.beta2 * state.v[name] + (1.0 - state.beta2) * g[name] ** 2
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        new_p[name] = ensure_finite(name, p[name] - lr * update)
        new_m[name], new_v[name] = m, v
    new_state = replace(state, m=new_m, v=new_v, step=t)
    return (new_p["_"] if scalar else new_p), new_state


# ---------------------------------------------------------------------------
# finite-difference oracle


def finite_difference_gradient(
    loss_fn: Callable[[ArrayDict], float], params: ArrayDict, step: float = 1e-5
) -> ArrayDict:
    """Central-difference gradient of `loss_fn` parameter-by-parameter."""
    grads = {}
    work = copy_arrays(params)
    for name, arr in work.items():
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + step
            hi = loss_fn(work)
            flat[i] = original - step
            lo = loss_fn(work)
            flat[i] = original
            gflat[i] = (hi - lo) / (2.0 * step)
        grads[name] = g
    return grads


def gradient_relative_error(analytic: ArrayDict, numeric: ArrayDict) -> float:
    """Worst elementwise |a - n| / max(|a|, |n|, 1) across all parameters."""
    worst = 0.0
    for name in analytic:
        a = analytic[name]
        n = numeric[name]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1.0)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_FORMAT = 1


def save_arrays(path, arrays: ArrayDict, metadata: dict | None = None) -> None:
    """Write named float64 arrays plus a JSON metadata blob to an .npz file."""
    meta = dict(metadata or {})
    meta["checkpoint_format"] = CHECKPOINT_FORMAT
    payload = {f"arr:{k}": np.asarray(v, dtype=float) for k, v in arrays.items()}
    payload["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    np.savez(path, **payload)


def load_arrays(path) -> tuple[ArrayDict, dict]:
    try:
        with np.load(path) as data:
            if "meta" not in data:
                raise CheckpointError(f"{path}: missing checkpoint metadata")
            meta = json.loads(bytes(data["meta"]).decode())
            arrays = {
                k[4:]: data[k].astype(float) for k in data.files if k.startswith("arr:")
            }
    except (OSError, ValueError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    fmt = meta.get("checkpoint_format")
    if fmt != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: unsupported checkpoint format {fmt!r}")
    return arrays, meta
