"""Dense numerics for the noise predictor.

A small MLP with hand-written forward/backward passes, the sinusoidal
timestep embedding, AdamW and the cosine-with-warmup learning-rate schedule.
Everything is float64 and batched over rows.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from pudm.errors import NumericError

MAGIC = b"PUDM"
FORMAT_VERSION = 1


def time_embedding(t, dim: int) -> np.ndarray:
    """Sinusoidal embedding of integer diffusion steps.

    Entries are interleaved ``[sin(w_0 t), cos(w_0 t), sin(w_1 t), ...]`` with
    angular frequencies ``w_i`` geometrically spaced from 1 down to 1e-4, so
    the wavelengths span ``[2*pi, 2*pi*1e4]``.

    Accepts a scalar step (returns shape ``(dim,)``) or an integer array of
    steps (returns shape ``(n, dim)``).
    """
    if dim <= 0 or dim % 2:
        raise ValueError(f"embedding dim must be a positive even integer, got {dim}")
    steps = np.asarray(t)
    if np.any(steps < 1):
        raise ValueError("diffusion steps start at 1")
    half = dim // 2
    if half == 1:
        freqs = np.ones(1)
    else:
        freqs = 10_000.0 ** (-np.arange(half) / (half - 1))
    angles = steps.astype(np.float64)[..., None] * freqs
    out = np.empty(angles.shape[:-1] + (dim,))
    out[..., 0::2] = np.sin(angles)
    out[..., 1::2] = np.cos(angles)
    return out


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # tanh form does not overflow for large |z|
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def silu(z: np.ndarray) -> np.ndarray:
    return z * _sigmoid(z)


def silu_grad(z: np.ndarray) -> np.ndarray:
    s = _sigmoid(z)
    return s * (1.0 + z * (1.0 - s))


@dataclass
class DenoiserParams:
    """Weights of the noise predictor.

    Layer ``i`` maps ``h -> W_i @ h + b_i``; SiLU follows every layer except
    the last. The network input is ``[x_t, time_embedding(t), cond_embed]``.
    ``cond_table`` holds one learned embedding row per class plus a final
    "null" row used for unconditional predictions.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    time_dim: int
    cond_table: np.ndarray | None = None

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need one bias per weight matrix and at least one layer")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ValueError(f"layer {i}: weight {w.shape} and bias {b.shape} do not match")
            if i and w.shape[1] != self.weights[i - 1].shape[0]:
                raise ValueError(
                    f"layer {i} expects {w.shape[1]} inputs but layer {i - 1} emits "
                    f"{self.weights[i - 1].shape[0]}"
                )
        if self.in_dim != self.data_dim + self.time_dim + self.cond_dim:
            raise ValueError(
                f"input width {self.in_dim} != data {self.data_dim} + time "
                f"{self.time_dim} + cond {self.cond_dim}"
            )

    @property
    def data_dim(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def cond_dim(self) -> int:
        return 0 if self.cond_table is None else self.cond_table.shape[1]

    @property
    def n_classes(self) -> int:
        """Number of real condition classes (the null row excluded)."""
        return 0 if self.cond_table is None else self.cond_table.shape[0] - 1

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        if self.cond_table is not None:
            out.append(self.cond_table)
        return out

    def n_params(self) -> int:
        return sum(a.size for a in self.arrays())

    def zeros_like(self) -> "DenoiserParams":
        return DenoiserParams(
            [np.zeros_like(w) for w in self.weights],
            [np.zeros_like(b) for b in self.biases],
            self.time_dim,
            None if self.cond_table is None else np.zeros_like(self.cond_table),
        )

    def copy(self) -> "DenoiserParams":
        return DenoiserParams(
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.time_dim,
            None if self.cond_table is None else self.cond_table.copy(),
        )

    def same_shape(self, other: "DenoiserParams") -> bool:
        mine, theirs = self.arrays(), other.arrays()
        return len(mine) == len(theirs) and all(a.shape == b.shape for a, b in zip(mine, theirs))

    def shape_summary(self) -> str:
        s = " ".join(f"{w.shape[0]}x{w.shape[1]}" for w in self.weights)
        if self.cond_table is not None:
            s += f" cond{self.cond_table.shape[0]}x{self.cond_table.shape[1]}"
        return s


def init_params(
    data_dim: int,
    hidden: tuple[int, ...] = (128, 128, 128),
    time_dim: int = 32,
    rng: np.random.Generator | None = None,
    n_classes: int = 0,
    cond_dim: int = 0,
) -> DenoiserParams:
    """LeCun-normal weights, zero biases, last layer scaled down by 10."""
    rng = np.random.default_rng(0) if rng is None else rng
    cond_dim = cond_dim if n_classes else 0
    widths = [data_dim + time_dim + cond_dim, *hidden, data_dim]
    weights, biases = [], []
    for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
        w = rng.standard_normal((fan_out, fan_in)) / math.sqrt(fan_in)
        if i == len(widths) - 2:
            w *= 0.1
        weights.append(w)
        biases.append(np.zeros(fan_out))
    table = rng.standard_normal((n_classes + 1, cond_dim)) if n_classes else None
    return DenoiserParams(weights, biases, time_dim, table)


@dataclass
class ForwardCache:
    inputs: list[np.ndarray]  # input to each layer
    preacts: list[np.ndarray]  # pre-activation of each hidden layer
    cond: np.ndarray | None
    param_shapes: list[tuple]


def _as_batch(x_t, t, cond):
    x = np.asarray(x_t, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    t = np.broadcast_to(np.asarray(t, dtype=np.int64), (x.shape[0],))
    if cond is not None:
        cond = np.broadcast_to(np.asarray(cond, dtype=np.int64), (x.shape[0],))
    return x, t, cond, single


def mlp_forward(params: DenoiserParams, x_t, t, cond=None):
    """Predict the noise for a batch of noisy points.

    ``x_t`` is ``(n, d)`` (or ``(d,)``), ``t`` integer steps broadcastable to
    ``(n,)``, ``cond`` class ids or ``None``. For a conditional model a
    ``cond`` of ``None`` selects the null (unconditional) row.

    Returns ``(eps_hat, cache)``.
    """
    x, t, cond, single = _as_batch(x_t, t, cond)
    if x.shape[1] != params.data_dim:
        raise ValueError(f"x_t has {x.shape[1]} columns, model expects {params.data_dim}")
    parts = [x, time_embedding(t, params.time_dim)]
    if params.cond_table is not None:
        if cond is None:
            cond = np.full(x.shape[0], params.n_classes, dtype=np.int64)
        if np.any((cond < 0) | (cond > params.n_classes)):
            raise ValueError(f"condition ids must lie in [0, {params.n_classes}]")
        parts.append(params.cond_table[cond])
    elif cond is not None:
        raise ValueError("condition given to an unconditional model")
    h = np.concatenate(parts, axis=1)

    inputs, preacts = [], []
    last = len(params.weights) - 1
    # overflow surfaces as the NumericError below, not as warnings
    with np.errstate(over="ignore", invalid="ignore"):
        for i, (w, b) in enumerate(zip(params.weights, params.biases)):
            inputs.append(h)
            z = h @ w.T + b
            if i < last:
                preacts.append(z)
                h = silu(z)
            else:
                h = z
    if not np.all(np.isfinite(h)):
        raise NumericError("non-finite noise prediction")
    cache = ForwardCache(inputs, preacts, cond, [a.shape for a in params.arrays()])
    return (h[0] if single else h), cache


def mlp_backward(params: DenoiserParams, cache: ForwardCache, grad_eps_hat) -> DenoiserParams:
    """Reverse-mode gradient of ``sum(eps_hat * grad_eps_hat)`` w.r.t. every parameter."""
    if cache.param_shapes != [a.shape for a in params.arrays()]:
        raise ValueError("cache was produced by a network with different shapes")
    g = np.atleast_2d(np.asarray(grad_eps_hat, dtype=np.float64))
    if g.shape != (cache.inputs[0].shape[0], params.data_dim):
        raise ValueError(f"upstream gradient shape {g.shape} does not match forward output")
    n_layers = len(params.weights)
    gw: list[np.ndarray] = [None] * n_layers
    gb: list[np.ndarray] = [None] * n_layers
    for i in range(n_layers - 1, -1, -1):
        if i < n_layers - 1:
            g = g * silu_grad(cache.preacts[i])
        gw[i] = g.T @ cache.inputs[i]
        gb[i] = g.sum(axis=0)
        if i:
            g = g @ params.weights[i]
    table_grad = None
    if params.cond_table is not None:
        g_in = g @ params.weights[0]
        start = params.data_dim + params.time_dim
        table_grad = np.zeros_like(params.cond_table)
        np.add.at(table_grad, cache.cond, g_in[:, start:])
    return DenoiserParams(gw, gb, params.time_dim, table_grad)


@dataclass
class AdamWState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01

    @classmethod
    def zeros(cls, params: DenoiserParams, **hyper) -> "AdamWState":
        arrays = params.arrays()
        return cls([np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays], **hyper)


def adamw_step(params: DenoiserParams, grads: DenoiserParams, state: AdamWState, lr: float):
    """Decoupled-weight-decay Adam update, applied in place. Returns ``(params, state)``."""
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    p_arrays, g_arrays = params.arrays(), grads.arrays()
    if not params.same_shape(grads) or len(state.m) != len(p_arrays):
        raise ValueError("parameter, gradient and optimizer-state shapes differ")
    state.step += 1
    c1 = 1.0 - state.beta1**state.step
    c2 = 1.0 - state.beta2**state.step
    for p, g, m, v in zip(p_arrays, g_arrays, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= lr * (state.weight_decay * p + (m / c1) / (np.sqrt(v / c2) + state.eps))
    return params, state


@dataclass(frozen=True)
class LrSchedule:
    base_lr: float = 1e-4
    warmup_steps: int = 500
    total_steps: int = 10_000

    def __post_init__(self):
        if self.base_lr <= 0 or self.warmup_steps < 0 or self.total_steps <= self.warmup_steps:
            raise ValueError(f"invalid schedule {self}")


def lr_at(schedule: LrSchedule, step: int) -> float:
    """Linear warmup from 0, then half-cosine decay to 0 at ``total_steps``."""
    if not 0 <= step <= schedule.total_steps:
        raise ValueError(f"step {step} outside [0, {schedule.total_steps}]")
    if step < schedule.warmup_steps:
        return schedule.base_lr * step / schedule.warmup_steps
    progress = (step - schedule.warmup_steps) / (schedule.total_steps - schedule.warmup_steps)
    return 0.5 * schedule.base_lr * (1.0 + math.cos(math.pi * progress))


# -- checkpoint files -------------------------------------------------------
#
# All integers little-endian u32 unless noted, all reals little-endian f64.
#   "PUDM" | version | time_dim | n_layers
#   per layer: rows | cols | weights (row-major) | biases (rows values)
#   has_cond (0/1) [| rows | cols | table (row-major)]
#   has_opt (0/1) [| step (u64) | beta1 | beta2 | eps | weight_decay
#                  | first moments in the same array order | second moments]


def _write_matrix(buf: list[bytes], a: np.ndarray) -> None:
    buf.append(np.ascontiguousarray(a, dtype="<f8").tobytes())


class _Reader:
    def __init__(self, data: bytes, path):
        self.data, self.pos, self.path = data, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ValueError(f"{self.path}: truncated checkpoint at byte {self.pos}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def floats(self, shape) -> np.ndarray:
        n = int(np.prod(shape))
        return np.frombuffer(self.take(8 * n), dtype="<f8").astype(np.float64).reshape(shape)


def save_checkpoint(path, params: DenoiserParams, state: AdamWState | None = None) -> None:
    buf = [MAGIC, struct.pack("<III", FORMAT_VERSION, params.time_dim, len(params.weights))]
    for w, b in zip(params.weights, params.biases):
        buf.append(struct.pack("<II", *w.shape))
        _write_matrix(buf, w)
        _write_matrix(buf, b)
    if params.cond_table is None:
        buf.append(struct.pack("<I", 0))
    else:
        buf.append(struct.pack("<III", 1, *params.cond_table.shape))
        _write_matrix(buf, params.cond_table)
    if state is None:
        buf.append(struct.pack("<I", 0))
    else:
        buf.append(struct.pack("<IQ", 1, state.step))
        buf.append(struct.pack("<4d", state.beta1, state.beta2, state.eps, state.weight_decay))
        for a in state.m + state.v:
            _write_matrix(buf, a)
    Path(path).write_bytes(b"".join(buf))


def load_checkpoint(path) -> tuple[DenoiserParams, AdamWState | None]:
    r = _Reader(Path(path).read_bytes(), path)
    if r.take(4) != MAGIC:
        raise ValueError(f"{path}: not a PUDM checkpoint")
    version = r.u32()
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    time_dim, n_layers = r.u32(), r.u32()
    weights, biases = [], []
    for _ in range(n_layers):
        rows, cols = r.u32(), r.u32()
        weights.append(r.floats((rows, cols)))
        biases.append(r.floats((rows,)))
    table = None
    if r.u32():
        rows, cols = r.u32(), r.u32()
        table = r.floats((rows, cols))
    params = DenoiserParams(weights, biases, time_dim, table)
    state = None
    if r.u32():
        step = struct.unpack("<Q", r.take(8))[0]
        b1, b2, eps, wd = struct.unpack("<4d", r.take(32))
        shapes = [a.shape for a in params.arrays()]
        m = [r.floats(s) for s in shapes]
        v = [r.floats(s) for s in shapes]
        state = AdamWState(m, v, step, b1, b2, eps, wd)
    if r.pos != len(r.data):
        raise ValueError(f"{path}: {len(r.data) - r.pos} trailing bytes")
    return params, state
