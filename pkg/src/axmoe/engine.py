"""Quantized inference and training engine.

Layers run in one of two arithmetic modes:

* float: plain numpy floating-point ops, the accuracy reference.
* approximate: operands are quantized to symmetric per-tensor int8, every
  scalar product goes through a multiplier lookup table, products are
  accumulated in 32-bit signed integers, and the result is dequantized by
  scale_x * scale_w. Bias is added in float afterwards.

The LUT path never skips operand pairs: padded zeros and zero weights are
looked up like any other pair, because an approximate table may map
(0, w) to a nonzero product. Per-layer invocation counters therefore equal
the shape-level MAC formulas exactly.

Training uses the straight-through estimator: the forward pass is the
quantized/LUT pass, the backward pass computes float gradients as if the
layer had run exact float arithmetic over the quantized-dequantized
operand values.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError, ParameterError
from .multipliers import AxMultiplier

INT32_MIN = -(2**31)
INT32_MAX = 2**31 - 1

QMAX = 127  # symmetric range [-127, 127]; code -128 is never produced

# Rows per LUT gather chunk, bounds peak index-array memory.
_GATHER_BUDGET = 1 << 24


# ---------------------------------------------------------------------------
# Quantization
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class QuantParams:
    scale: float

    def __post_init__(self):
        if not (self.scale > 0) or not np.isfinite(self.scale):
            raise ParameterError(f"scale must be positive and finite, got {self.scale}")


def _round_half_away(x: np.ndarray) -> np.ndarray:
    # np.round ties to even; the codec pins ties away from zero instead.
    return np.trunc(x + np.copysign(0.5, x))


def quantize(t: np.ndarray) -> tuple[np.ndarray, QuantParams]:
    """Symmetric per-tensor int8: scale = max|t| / 127, 1.0 for all-zero input."""
    t = np.asarray(t)
    if t.size and not np.all(np.isfinite(t)):
        raise NumericError("quantize: input contains non-finite values")
    amax = float(np.max(np.abs(t))) if t.size else 0.0
    scale = amax / QMAX if amax > 0 else 1.0
    codes = np.clip(_round_half_away(t / scale), -QMAX, QMAX).astype(np.int8)
    return codes, QuantParams(scale)


def dequantize(codes: np.ndarray, qp: QuantParams) -> np.ndarray:
    return codes.astype(np.float64) * qp.scale


# ---------------------------------------------------------------------------
# LUT arithmetic
# ---------------------------------------------------------------------------

def _check_codes(x: np.ndarray, what: str) -> np.ndarray:
    x = np.asarray(x)
    if x.dtype != np.int8:
        if not np.issubdtype(x.dtype, np.integer):
            raise ParameterError(f"{what}: expected integer codes, got {x.dtype}")
        if x.size and (x.min() < -128 or x.max() > 127):
            raise ParameterError(f"{what}: codes outside signed 8-bit range")
        x = x.astype(np.int8)
    return x


def lut_matmul(a: np.ndarray, b: np.ndarray, m: AxMultiplier) -> np.ndarray:
    """(N, K) x (M, K) -> (N, M) int32 through the multiplier table.

    Accumulates in int64 and fails loudly if any sum leaves the int32 range,
    mirroring a 32-bit hardware accumulator with overflow detection.
    """
    a = _check_codes(a, "lut_matmul lhs")
    b = _check_codes(b, "lut_matmul rhs")
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ParameterError(f"lut_matmul: incompatible shapes {a.shape} x {b.shape}")
    n, k = a.shape
    mrows = b.shape[0]
    out = np.empty((n, mrows), dtype=np.int64)
    if k == 0:
        out[:] = 0
        return out.astype(np.int32)
    b_idx = (b.astype(np.int32) + 128)[None, :, :]
    chunk = max(1, _GATHER_BUDGET // max(1, mrows * k))
    for start in range(0, n, chunk):
        stop = min(n, start + chunk)
        idx = (a[start:stop].astype(np.int32) + 128)[:, None, :] * 256 + b_idx
        out[start:stop] = m.lut[idx].sum(axis=2, dtype=np.int64)
    if out.size and (out.min() < INT32_MIN or out.max() > INT32_MAX):
        raise NumericError("lut_matmul: 32-bit accumulator overflow")
    return out.astype(np.int32)


def approx_dot(a: np.ndarray, b: np.ndarray, m: AxMultiplier) -> int:
    """Dot product of two int8 code vectors via the table. Empty input -> 0."""
    a = _check_codes(a, "approx_dot lhs")
    b = _check_codes(b, "approx_dot rhs")
    if a.shape != b.shape or a.ndim != 1:
        raise ParameterError(f"approx_dot: expected equal-length vectors, got {a.shape}, {b.shape}")
    return int(lut_matmul(a[None, :], b[None, :], m)[0, 0])


# ---------------------------------------------------------------------------
# Shape helpers
# ---------------------------------------------------------------------------

def conv_out_hw(h: int, w: int, kernel, stride, padding) -> tuple[int, int]:
    kh, kw = kernel
    sh, sw = stride
    ph, pw = padding
    oh = (h + 2 * ph - kh) // sh + 1
    ow = (w + 2 * pw - kw) // sw + 1
    if oh <= 0 or ow <= 0:
        raise ParameterError(f"conv geometry yields empty output ({oh}, {ow})")
    return oh, ow


def im2col(x: np.ndarray, kernel, stride, padding) -> np.ndarray:
    """(N, C, H, W) -> (N, Ho, Wo, C, kh, kw) patch view (copied)."""
    kh, kw = kernel
    sh, sw = stride
    ph, pw = padding
    if ph or pw:
        x = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, ::sh, ::sw]  # (N, C, Ho, Wo, kh, kw)
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5))


def col2im(dcols: np.ndarray, x_shape, kernel, stride, padding) -> np.ndarray:
    """Scatter-add patch gradients back to input layout. Inverse of im2col."""
    n, c, h, w = x_shape
    kh, kw = kernel
    sh, sw = stride
    ph, pw = padding
    oh, ow = dcols.shape[1], dcols.shape[2]
    dxp = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=dcols.dtype)
    dw = dcols.transpose(0, 3, 1, 2, 4, 5)  # (N, C, Ho, Wo, kh, kw)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + sh * oh : sh, j : j + sw * ow : sw] += dw[:, :, :, :, i, j]
    return dxp[:, :, ph : ph + h, pw : pw + w]


def stable_softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


# ---------------------------------------------------------------------------
# Run context and layer base
# ---------------------------------------------------------------------------

@dataclass
class RunContext:
    """Per-forward execution state.

    multiplier None means pure float; a multiplier routes every layer whose
    `approximate` flag is set through the quantize + LUT path. `counters`
    accumulates LUT invocations per layer name, `routed` accumulates routed
    units per expert for MoE layers.
    """

    multiplier: AxMultiplier | None = None
    train: bool = False
    counters: dict = field(default_factory=dict)
    routed: dict = field(default_factory=dict)

    def count(self, name: str, n: int) -> None:
        self.counters[name] = self.counters.get(name, 0) + int(n)

    def count_routed(self, name: str, n: int) -> None:
        self.routed[name] = self.routed.get(name, 0) + int(n)


class Layer:
    """Base class: named, optionally parameterized, optionally trainable."""

    def __init__(self, name: str):
        self.name = name
        self.grads: dict[str, np.ndarray] = {}

    def _params(self) -> dict[str, np.ndarray]:
        return {}

    def params(self) -> dict[str, np.ndarray]:
        return {f"{self.name}.{k}": v for k, v in self._params().items()}

    def qualified_grads(self) -> dict[str, np.ndarray]:
        return {f"{self.name}.{k}": v for k, v in self.grads.items()}

    def frozen_names(self) -> set[str]:
        return set()

    def zero_grads(self) -> None:
        self.grads = {}

    def cast(self, dtype) -> None:
        for k, v in self._params().items():
            setattr(self, k, v.astype(dtype))

    def forward(self, x: np.ndarray, ctx: RunContext) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dy: np.ndarray) -> np.ndarray:
        raise NotImplementedError(f"{type(self).__name__} has no backward pass")


# ---------------------------------------------------------------------------
# Parameterized layers
# ---------------------------------------------------------------------------

class Conv2d(Layer):
    def __init__(self, name, w, b, stride=(1, 1), padding=(0, 0), groups=1, approximate=True):
        super().__init__(name)
        self.w = w  # (Cout, Cin/G, kh, kw)
        self.b = b  # (Cout,)
        self.stride = stride
        self.padding = padding
        self.groups = groups
        self.approximate = approximate
        self._cache = None

    def _params(self):
        return {"w": self.w, "b": self.b}

    def forward(self, x, ctx):
        cout = self.w.shape[0]
        kh, kw = self.w.shape[2], self.w.shape[3]
        n = x.shape[0]
        oh, ow = conv_out_hw(x.shape[2], x.shape[3], (kh, kw), self.stride, self.padding)
        lut_mode = ctx.multiplier is not None and self.approximate
        if lut_mode:
            qx, sx = quantize(x)
            qw, sw = quantize(self.w)
            cols = im2col(qx, (kh, kw), self.stride, self.padding)
            x_eff = dequantize(qx, sx).astype(x.dtype) if ctx.train else None
            w_eff = dequantize(qw, sw).astype(self.w.dtype)
        else:
            cols = im2col(x, (kh, kw), self.stride, self.padding)
            x_eff = x if ctx.train else None
            w_eff = self.w
        g = self.groups
        cpg = x.shape[1] // g
        opg = cout // g
        flat = cols.reshape(n * oh * ow, g, cpg * kh * kw)
        wmat = w_eff.reshape(g, opg, cpg * kh * kw)
        if lut_mode:
            qwmat = qw.reshape(g, opg, cpg * kh * kw)
            scale = sx.scale * sw.scale
            pieces = []
            for gi in range(g):
                acc = lut_matmul(flat[:, gi, :], qwmat[gi], ctx.multiplier)
                pieces.append(acc.astype(np.float64) * scale)
            y = np.stack(pieces, axis=1).astype(x.dtype)
            ctx.count(self.name, n * oh * ow * cout * cpg * kh * kw)
        else:
            y = np.einsum("ngk,gok->ngo", flat, wmat)
        y = y.reshape(n, oh, ow, cout).transpose(0, 3, 1, 2) + self.b[None, :, None, None]
        if ctx.train:
            self._cache = (x_eff, w_eff, x.shape, (oh, ow))
        return y.astype(x.dtype)

    def backward(self, dy):
        x_eff, w_eff, x_shape, (oh, ow) = self._cache
        n, cout = dy.shape[0], dy.shape[1]
        kh, kw = self.w.shape[2], self.w.shape[3]
        g = self.groups
        cpg = x_shape[1] // g
        opg = cout // g
        cols = im2col(x_eff, (kh, kw), self.stride, self.padding)
        flat = cols.reshape(n * oh * ow, g, cpg * kh * kw)
        dyg = dy.transpose(0, 2, 3, 1).reshape(n * oh * ow, g, opg)
        dw = np.einsum("ngo,ngk->gok", dyg, flat).reshape(self.w.shape)
        db = dy.sum(axis=(0, 2, 3))
        wmat = w_eff.reshape(g, opg, cpg * kh * kw)
        dcols = np.einsum("ngo,gok->ngk", dyg, wmat)
        dcols = dcols.reshape(n, oh, ow, x_shape[1], kh, kw)
        dx = col2im(dcols, x_shape, (kh, kw), self.stride, self.padding)
        self.grads = {"w": dw, "b": db}
        return dx


class Linear(Layer):
    """Affine map on the last axis. Leading axes (batch, tokens) are rows."""

    def __init__(self, name, w, b, approximate=True):
        super().__init__(name)
        self.w = w  # (out, in)
        self.b = b
        self.approximate = approximate
        self._cache = None

    def _params(self):
        return {"w": self.w, "b": self.b}

    def forward(self, x, ctx):
        lead = x.shape[:-1]
        rows = x.reshape(-1, x.shape[-1])
        lut_mode = ctx.multiplier is not None and self.approximate
        if lut_mode:
            qx, sx = quantize(rows)
            qw, sw = quantize(self.w)
            acc = lut_matmul(qx, qw, ctx.multiplier)
            y = acc.astype(np.float64) * (sx.scale * sw.scale) + self.b
            ctx.count(self.name, rows.shape[0] * self.w.shape[0] * self.w.shape[1])
            x_eff = dequantize(qx, sx).astype(x.dtype) if ctx.train else None
            w_eff = dequantize(qw, sw).astype(self.w.dtype)
        else:
            y = rows @ self.w.T + self.b
            x_eff = rows if ctx.train else None
            w_eff = self.w
        if ctx.train:
            self._cache = (x_eff, w_eff, lead)
        return y.reshape(*lead, self.w.shape[0]).astype(x.dtype)

    def backward(self, dy):
        x_eff, w_eff, lead = self._cache
        drows = dy.reshape(-1, dy.shape[-1])
        self.grads = {"w": drows.T @ x_eff, "b": drows.sum(axis=0)}
        return (drows @ w_eff).reshape(*lead, w_eff.shape[1])


class BatchNorm2d(Layer):
    """Inference-style normalization with stored statistics. Always exact."""

    def __init__(self, name, gamma, beta, mean, var, eps=1e-5):
        super().__init__(name)
        self.gamma, self.beta = gamma, beta
        self.mean, self.var = mean, var
        self.eps = eps

    def _params(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def forward(self, x, ctx):
        inv = self.gamma / np.sqrt(self.var + self.eps)
        return inv[None, :, None, None] * (x - self.mean[None, :, None, None]) + self.beta[None, :, None, None]


class LayerNorm(Layer):
    def __init__(self, name, gamma, beta, eps=1e-6):
        super().__init__(name)
        self.gamma, self.beta = gamma, beta
        self.eps = eps

    def _params(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def forward(self, x, ctx):
        mu = x.mean(axis=-1, keepdims=True)
        var = x.var(axis=-1, keepdims=True)
        return self.gamma * (x - mu) / np.sqrt(var + self.eps) + self.beta


class ReLU(Layer):
    def forward(self, x, ctx):
        if ctx.train:
            self._mask = x > 0
        return np.maximum(x, 0)

    def backward(self, dy):
        return dy * self._mask


_GELU_C = float(np.sqrt(2.0 / np.pi))


class GELU(Layer):
    """tanh-form gaussian error linear unit."""

    def forward(self, x, ctx):
        if ctx.train:
            self._x = x
        inner = _GELU_C * (x + 0.044715 * x**3)
        return 0.5 * x * (1.0 + np.tanh(inner))

    def backward(self, dy):
        x = self._x
        inner = _GELU_C * (x + 0.044715 * x**3)
        t = np.tanh(inner)
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
        return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * dinner)


class AvgPool2d(Layer):
    """Non-overlapping pooling; spatial dims must divide the window."""

    def __init__(self, name, k):
        super().__init__(name)
        self.k = k

    def forward(self, x, ctx):
        n, c, h, w = x.shape
        k = self.k
        if h % k or w % k:
            raise ParameterError(f"avgpool window {k} does not tile input {h}x{w}")
        self._in_shape = x.shape
        return x.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))

    def backward(self, dy):
        n, c, h, w = self._in_shape
        k = self.k
        up = np.repeat(np.repeat(dy, k, axis=2), k, axis=3)
        return up / (k * k)


class GlobalAvgPool(Layer):
    def forward(self, x, ctx):
        self._in_shape = x.shape
        return x.mean(axis=(2, 3))

    def backward(self, dy):
        n, c, h, w = self._in_shape
        return np.broadcast_to(dy[:, :, None, None], self._in_shape) / (h * w)


class Flatten(Layer):
    def forward(self, x, ctx):
        self._in_shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dy):
        return dy.reshape(self._in_shape)


class Softmax(Layer):
    def forward(self, x, ctx):
        return stable_softmax(x, axis=-1)


class Sequential(Layer):
    def __init__(self, name, layers):
        super().__init__(name)
        self.layers = list(layers)

    def params(self):
        out = {}
        for layer in self.layers:
            out.update(layer.params())
        return out

    def qualified_grads(self):
        out = {}
        for layer in self.layers:
            out.update(layer.qualified_grads())
        return out

    def frozen_names(self):
        out = set()
        for layer in self.layers:
            out |= layer.frozen_names()
        return out

    def zero_grads(self):
        for layer in self.layers:
            layer.zero_grads()

    def cast(self, dtype):
        for layer in self.layers:
            layer.cast(dtype)

    def forward(self, x, ctx):
        for layer in self.layers:
            x = layer.forward(x, ctx)
        return x

    def backward(self, dy):
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy


class Model(Sequential):
    """Top-level sequential graph with parameter loading helpers."""

    def load_params(self, values: dict[str, np.ndarray]) -> None:
        live = self.params()
        unknown = set(values) - set(live)
        if unknown:
            raise ParameterError(f"unknown parameter names: {sorted(unknown)}")
        for name, arr in values.items():
            dst = live[name]
            if dst.shape != arr.shape:
                raise ParameterError(f"{name}: shape {arr.shape} does not match {dst.shape}")
            dst[...] = arr

    def copy(self) -> "Model":
        import copy as _copy

        return _copy.deepcopy(self)


# ---------------------------------------------------------------------------
# Functional wrappers and loss
# ---------------------------------------------------------------------------

def conv2d_forward(x, w, b, stride=(1, 1), padding=(0, 0), groups=1,
                   multiplier=None, counters=None, approximate=True):
    """One-shot conv without building a layer object."""
    ctx = RunContext(multiplier=multiplier)
    layer = Conv2d("conv", w, b, stride, padding, groups, approximate)
    y = layer.forward(x, ctx)
    if counters is not None:
        counters.update(ctx.counters)
    return y


def linear_forward(x, w, b, multiplier=None, counters=None, approximate=True):
    ctx = RunContext(multiplier=multiplier)
    layer = Linear("linear", w, b, approximate)
    y = layer.forward(x, ctx)
    if counters is not None:
        counters.update(ctx.counters)
    return y


def attention_forward(x, w_qkv, b_qkv, w_proj, b_proj, heads,
                      multiplier=None, counters=None, approx_scores=False):
    """Multi-head self-attention. Projections may run through the LUT path;
    score and score-value matmuls stay exact float unless approx_scores is
    set (then they are quantized per-tensor and routed through the table).
    """
    n, t, d = x.shape
    if d % heads:
        raise ParameterError(f"model dim {d} not divisible by {heads} heads")
    hd = d // heads
    ctx = RunContext(multiplier=multiplier)
    qkv = Linear("attn.qkv", w_qkv, b_qkv, approximate=True).forward(x, ctx)
    qkv = qkv.reshape(n, t, 3, heads, hd).transpose(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]  # (n, heads, t, hd)
    scale = 1.0 / np.sqrt(hd)
    if approx_scores and multiplier is not None:
        qq, sq = quantize(q)
        qk, sk = quantize(k)
        scores = np.empty((n, heads, t, t), dtype=x.dtype)
        for i in range(n):
            for h in range(heads):
                acc = lut_matmul(qq[i, h], qk[i, h], multiplier)
                scores[i, h] = acc.astype(np.float64) * (sq.scale * sk.scale)
        scores *= scale
        attn = stable_softmax(scores, axis=-1)
        qa, sa = quantize(attn)
        qv, sv = quantize(v)
        mixed = np.empty_like(q)
        for i in range(n):
            for h in range(heads):
                acc = lut_matmul(qa[i, h], np.ascontiguousarray(qv[i, h].T), multiplier)
                mixed[i, h] = acc.astype(np.float64) * (sa.scale * sv.scale)
    else:
        scores = np.einsum("nhqd,nhkd->nhqk", q, k) * scale
        attn = stable_softmax(scores, axis=-1)
        mixed = np.einsum("nhqk,nhkd->nhqd", attn, v)
    mixed = mixed.transpose(0, 2, 1, 3).reshape(n, t, d)
    out = Linear("attn.proj", w_proj, b_proj, approximate=True).forward(mixed, ctx)
    if counters is not None:
        counters.update(ctx.counters)
    return out


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy over the batch. Returns (loss, dloss/dlogits)."""
    n = logits.shape[0]
    p = stable_softmax(logits.astype(np.float64), axis=-1)
    eps = np.finfo(np.float64).tiny
    loss = float(-np.log(p[np.arange(n), labels] + eps).mean())
    dlogits = p.copy()
    dlogits[np.arange(n), labels] -= 1.0
    return loss, (dlogits / n).astype(logits.dtype)
