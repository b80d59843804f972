"""LSTM network over a flat parameter vector, plus optimizers and file I/O.

All parameters live in one 1-D float64 vector so meta-learning can treat the
whole network as a single point ``theta``.  :class:`ParamLayout` names the
segments; :func:`unpack` slices them back out (differentiably when ``theta``
is a :class:`~cflab.autodiff.Tensor`).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad

GATES = ("i", "f", "g", "o")
MAGIC = b"MFW1"


@dataclass(frozen=True)
class ParamLayout:
    input_size: int
    hidden_size: int
    output_size: int
    segments: dict = field(init=False, compare=False, repr=False)

    def __post_init__(self):
        d, h, k = self.input_size, self.hidden_size, self.output_size
        shapes = []
        for gate in GATES:
            shapes += [(f"W_i{gate}", (h, d)), (f"W_h{gate}", (h, h)), (f"b_{gate}", (h,))]
        shapes += [("W_head", (k, h)), ("b_head", (k,))]
        segs, off = {}, 0
        for name, shape in shapes:
            segs[name] = (off, shape)
            off += int(np.prod(shape))
        object.__setattr__(self, "segments", segs)

    @property
    def size(self) -> int:
        off, shape = list(self.segments.values())[-1]
        return off + int(np.prod(shape))

    def slice(self, name: str) -> slice:
        off, shape = self.segments[name]
        return slice(off, off + int(np.prod(shape)))


@dataclass(frozen=True)
class ModelParams:
    """Network parameters: flat vector plus the layout that names its parts."""

    values: np.ndarray
    layout: ParamLayout

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64)
        if v.shape != (self.layout.size,):
            raise ValueError(f"expected {self.layout.size} parameters, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("parameters must be finite")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def segment(self, name: str) -> np.ndarray:
        _, shape = self.layout.segments[name]
        return self.values[self.layout.slice(name)].reshape(shape)

    def replace(self, values) -> "ModelParams":
        return ModelParams(values, self.layout)


@dataclass(frozen=True)
class LSTMState:
    cell: np.ndarray
    hidden: np.ndarray

    def __post_init__(self):
        if np.shape(self.cell) != np.shape(self.hidden):
            raise ValueError("cell and hidden state must have equal shape")


def unpack(theta, layout: ParamLayout) -> dict:
    out = {}
    for name, (off, shape) in layout.segments.items():
        n = int(np.prod(shape))
        out[name] = theta[off:off + n].reshape(shape)
    return out


def init_params(layout: ParamLayout, rng: np.random.Generator, forget_bias: float = 1.0) -> ModelParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) per segment; forget bias +1."""
    theta = np.empty(layout.size)
    h = layout.hidden_size
    for name, (off, shape) in layout.segments.items():
        fan_in = layout.input_size if name.startswith("W_i") else h
        bound = 1.0 / np.sqrt(fan_in)
        n = int(np.prod(shape))
        theta[off:off + n] = rng.uniform(-bound, bound, n)
    theta[layout.slice("b_f")] = forget_bias
    return ModelParams(theta, layout)


def _check_dims(x, layout: ParamLayout):
    if np.shape(x)[-1] != layout.input_size:
        raise ValueError(f"input has {np.shape(x)[-1]} features, network expects {layout.input_size}")


def _transposed(theta, layout: ParamLayout) -> dict:
    return {k: (v.T if v.ndim == 2 else v) for k, v in unpack(theta, layout).items()}


def _proj(xt, h, pt, gate):
    pre = xt @ pt[f"W_i{gate}"] + pt[f"b_{gate}"]
    if h is not None:
        pre = pre + h @ pt[f"W_h{gate}"]
    return pre


def _step(xt, c, h, pt):
    # c is None / h is None stand for the zero initial state
    i = ad.sigmoid(_proj(xt, h, pt, "i"))
    f = ad.sigmoid(_proj(xt, h, pt, "f"))
    g = ad.tanh(_proj(xt, h, pt, "g"))
    o = ad.sigmoid(_proj(xt, h, pt, "o"))
    c = i * g if c is None else f * c + i * g
    return c, o * ad.tanh(c)


def lstm_step(x, state: LSTMState, theta, layout: ParamLayout):
    """One gated recurrence step followed by the linear head.

    Returns ``(output, LSTMState)``.
    """
    _check_dims(x, layout)
    if np.shape(state.hidden)[-1] != layout.hidden_size:
        raise ValueError("state size does not match hidden size")
    pt = _transposed(theta, layout)
    c, h = _step(np.asarray(x, dtype=np.float64), state.cell, state.hidden, pt)
    return h @ pt["W_head"] + pt["b_head"], LSTMState(c, h)


def _fused(theta, layout: ParamLayout):
    """Gate weights stacked along the output axis as (D, 4H), (H, 4H), (4H,)."""
    p = unpack(theta, layout)
    wx = ad.concat([p[f"W_i{g}"] for g in GATES], axis=0).T
    wh = ad.concat([p[f"W_h{g}"] for g in GATES], axis=0).T
    b = ad.concat([p[f"b_{g}"] for g in GATES], axis=0)
    return wx, wh, b, p["W_head"].T, p["b_head"]


def forward_sequence(window, theta, layout: ParamLayout):
    """Run the LSTM over ``window`` from a zero state; return the last head output.

    ``window`` is ``(W, D)`` for one sequence or ``(B, W, D)`` for a batch.
    ``theta`` may be a flat array or a Tensor; the result matches.  The four
    gate projections are computed as one product per step, which keeps the
    recorded graph small.
    """
    x = np.asarray(window, dtype=np.float64)
    if x.ndim < 2 or x.shape[-2] == 0:
        raise ValueError("window must contain at least one step")
    _check_dims(x, layout)
    wx, wh, b, w_head, b_head = _fused(theta, layout)
    hs = layout.hidden_size
    c = h = None
    for t in range(x.shape[-2]):
        pre = x[..., t, :] @ wx + b
        if h is not None:
            pre = pre + h @ wh
        s = ad.sigmoid(pre)
        i, f, o = s[..., :hs], s[..., hs:2 * hs], s[..., 3 * hs:]
        g = ad.tanh(pre[..., 2 * hs:3 * hs])
        c = i * g if c is None else f * c + i * g
        h = o * ad.tanh(c)
    return h @ w_head + b_head


# optimizers ------------------------------------------------------------------


def sgd_step(theta, g, lr: float):
    """Plain gradient step; works on arrays and on recorded Tensors."""
    if np.shape(theta) != np.shape(g):
        raise ValueError("parameter and gradient lengths differ")
    return theta - lr * g


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)


def adam_step(theta: np.ndarray, g: np.ndarray, lr: float, state: AdamState,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> np.ndarray:
    if np.shape(theta) != np.shape(g):
        raise ValueError("parameter and gradient lengths differ")
    state.t += 1
    state.m = beta1 * state.m + (1 - beta1) * g
    state.v = beta2 * state.v + (1 - beta2) * g * g
    m_hat = state.m / (1 - beta1 ** state.t)
    v_hat = state.v / (1 - beta2 ** state.t)
    return theta - lr * m_hat / (np.sqrt(v_hat) + eps)


# serialization ---------------------------------------------------------------


def save_params(params: ModelParams, path) -> None:
    """Write the MFW1 binary: magic, segment table, little-endian float64 data.

    Table layout: u32 input, u32 hidden, u32 output, u32 segment count, then
    per segment u16 name length, name bytes, u64 offset, u8 ndim, u32 dims.
    """
    lay = params.layout
    buf = bytearray(MAGIC)
    buf += struct.pack("<IIII", lay.input_size, lay.hidden_size, lay.output_size, len(lay.segments))
    for name, (off, shape) in lay.segments.items():
        raw = name.encode("utf-8")
        buf += struct.pack("<H", len(raw)) + raw
        buf += struct.pack("<QB", off, len(shape))
        buf += struct.pack(f"<{len(shape)}I", *shape)
    buf += params.values.astype("<f8").tobytes()
    Path(path).write_bytes(bytes(buf))


def load_params(path) -> ModelParams:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: not an MFW1 parameter file")
    pos = 4
    d, h, k, nseg = struct.unpack_from("<IIII", raw, pos)
    pos += 16
    layout = ParamLayout(d, h, k)
    for _ in range(nseg):
        (n,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        name = raw[pos:pos + n].decode("utf-8")
        pos += n
        off, ndim = struct.unpack_from("<QB", raw, pos)
        pos += 9
        shape = struct.unpack_from(f"<{ndim}I", raw, pos)
        pos += 4 * ndim
        if layout.segments.get(name) != (off, tuple(shape)):
            raise ValueError(f"{path}: segment {name} does not match the expected layout")
    values = np.frombuffer(raw[pos:], dtype="<f8").astype(np.float64)
    return ModelParams(values, layout)


def save_sidecar(meta: dict, path) -> None:
    Path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
