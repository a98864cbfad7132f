"""Convolutional and dense building blocks (NHWC layout).

Convolution is cross-correlation over a zero-padded input, computed as one
GEMM over an im2col matrix. Kernels are stored ``kh x kw x Cin x Cout``.
"""

from __future__ import annotations

from dataclasses import dataclass
import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, ContractError, ShapeError
from .tensor import Tensor, concat, default_dtype, make_op, note_switch, relu, sigmoid

BN_MOMENTUM = 0.9
BN_EPS = 1e-5
LN_EPS = 1e-5


def he_uniform(shape, fan_in: int, rng: np.random.Generator) -> np.ndarray:
    limit = math.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(default_dtype())


@dataclass
class Conv2DParams:
    weight: Tensor
    bias: Tensor
    stride: int = 1
    padding: str = "same"

    def __post_init__(self):
        if self.weight.ndim != 4:
            raise ConfigError(f"conv weight must be kh x kw x Cin x Cout, got {self.weight.shape}")
        if self.bias.shape != (self.weight.shape[3],):
            raise ConfigError(f"conv bias {self.bias.shape} does not match weight {self.weight.shape}")
        if self.stride < 1:
            raise ConfigError(f"stride must be positive, got {self.stride}")
        if self.padding not in ("same", "valid"):
            raise ConfigError(f"padding must be 'same' or 'valid', got {self.padding!r}")

    @classmethod
    def init(cls, kh, kw, cin, cout, rng, stride=1, padding="same") -> "Conv2DParams":
        w = he_uniform((kh, kw, cin, cout), kh * kw * cin, rng)
        b = np.zeros(cout, dtype=default_dtype())
        return cls(Tensor(w, requires_grad=True), Tensor(b, requires_grad=True), stride, padding)

    @property
    def kernel(self) -> tuple[int, int]:
        return self.weight.shape[0], self.weight.shape[1]

    @property
    def cin(self) -> int:
        return self.weight.shape[2]

    @property
    def cout(self) -> int:
        return self.weight.shape[3]


@dataclass
class BatchNormState:
    gamma: Tensor
    beta: Tensor
    running_mean: Tensor
    running_var: Tensor
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS
    training: bool = True

    @classmethod
    def init(cls, channels: int, **kw) -> "BatchNormState":
        dt = default_dtype()
        return cls(
            Tensor(np.ones(channels, dt), requires_grad=True),
            Tensor(np.zeros(channels, dt), requires_grad=True),
            Tensor(np.zeros(channels, dt)),
            Tensor(np.ones(channels, dt)),
            **kw,
        )


@dataclass
class LinearParams:
    weight: Tensor
    bias: Tensor

    def __post_init__(self):
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[1],):
            raise ConfigError(f"linear weight {self.weight.shape} / bias {self.bias.shape} mismatch")

    @classmethod
    def init(cls, din: int, dout: int, rng) -> "LinearParams":
        w = he_uniform((din, dout), din, rng)
        return cls(
            Tensor(w, requires_grad=True),
            Tensor(np.zeros(dout, default_dtype()), requires_grad=True),
        )


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def _same_pads(size: int, k: int, s: int) -> tuple[int, int]:
    out = -(-size // s)
    total = max((out - 1) * s + k - size, 0)
    return total // 2, total - total // 2


def conv2d(x: Tensor, params: Conv2DParams) -> Tensor:
    """2-D cross-correlation plus bias, ``B x H x W x Cin -> B x H' x W' x Cout``."""
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects B x H x W x C input, got {x.shape}")
    kh, kw = params.kernel
    if x.shape[3] != params.cin:
        raise ShapeError(
            f"conv2d: input has {x.shape[3]} channels, kernel {params.weight.shape} expects {params.cin}"
        )
    s = params.stride
    B, H, W, C = x.shape
    xd = x.data
    if params.padding == "same":
        pt, pb = _same_pads(H, kh, s)
        pl, pr = _same_pads(W, kw, s)
    else:
        pt = pb = pl = pr = 0
    if pt or pb or pl or pr:
        xp = np.pad(xd, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    else:
        xp = xd
    Hp, Wp = xp.shape[1], xp.shape[2]
    Ho, Wo = (Hp - kh) // s + 1, (Wp - kw) // s + 1
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {Hp}x{Wp}")

    if kh == 1 and kw == 1:
        cols = np.ascontiguousarray(xp[:, ::s, ::s, :]).reshape(-1, C)
    else:
        win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::s, ::s]
        # (B, Ho, Wo, C, kh, kw) -> (B*Ho*Wo, kh*kw*C)
        cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(-1, kh * kw * C)
    wd = params.weight.data
    wm = wd.reshape(kh * kw * C, -1)
    out = cols @ wm
    out += params.bias.data
    cout = wm.shape[1]
    out = out.reshape(B, Ho, Wo, cout)
    need_x = x.requires_grad

    def bw(g):
        g2 = g.reshape(-1, cout)
        gw = (cols.T @ g2).reshape(wd.shape)
        gb = g2.sum(axis=0)
        gx = None
        if need_x:
            dcols = (g2 @ wm.T).reshape(B, Ho, Wo, kh, kw, C)
            gxp = np.zeros((B, Hp, Wp, C), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i : i + (Ho - 1) * s + 1 : s, j : j + (Wo - 1) * s + 1 : s, :] += dcols[:, :, :, i, j, :]
            gx = gxp[:, pt : pt + H, pl : pl + W, :]
        return gx, gw, gb

    return make_op(out, (x, params.weight, params.bias), bw, "conv2d")


def transposed_conv2x2(x: Tensor, params: Conv2DParams) -> Tensor:
    """Stride-2, 2x2 transposed convolution; exactly doubles H and W."""
    if params.kernel != (2, 2) or params.stride != 2:
        raise ConfigError(
            f"transposed_conv2x2 needs a 2x2 kernel with stride 2, got {params.kernel} stride {params.stride}"
        )
    if x.ndim != 4 or x.shape[3] != params.cin:
        raise ShapeError(f"transposed_conv2x2: input {x.shape} vs kernel {params.weight.shape}")
    B, H, W, C = x.shape
    cout = params.cout
    wd = params.weight.data
    wm = wd.transpose(2, 0, 1, 3).reshape(C, 4 * cout)
    xm = x.data.reshape(-1, C)
    y = (xm @ wm).reshape(B, H, W, 2, 2, cout).transpose(0, 1, 3, 2, 4, 5)
    out = y.reshape(B, 2 * H, 2 * W, cout) + params.bias.data

    def bw(g):
        gm = g.reshape(B, H, 2, W, 2, cout).transpose(0, 1, 3, 2, 4, 5).reshape(-1, 4 * cout)
        gx = (gm @ wm.T).reshape(B, H, W, C)
        gw = (xm.T @ gm).reshape(C, 2, 2, cout).transpose(1, 2, 0, 3)
        gb = g.sum(axis=(0, 1, 2))
        return gx, np.ascontiguousarray(gw), gb

    return make_op(out, (x, params.weight, params.bias), bw, "conv_transpose2x2")


def upsample_nearest2x(x: Tensor) -> Tensor:
    B, H, W, C = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=1), 2, axis=2)

    def bw(g):
        return (g.reshape(B, H, 2, W, 2, C).sum(axis=(2, 4)),)

    return make_op(out, (x,), bw, "upsample_nearest")


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------


def _normalize_backward(g, xhat, inv_std, gamma, axes, n):
    """Input gradient of ``gamma * (x - mean) / std`` when mean/std come from x."""
    dxhat = g * gamma
    s1 = dxhat.sum(axis=axes, keepdims=True)
    s2 = (dxhat * xhat).sum(axis=axes, keepdims=True)
    return (inv_std / n) * (n * dxhat - s1 - xhat * s2)


def batchnorm(x: Tensor, state: BatchNormState) -> Tensor:
    """Per-channel batch normalization over (B, H, W).

    Training mode normalizes with batch statistics (biased variance) and
    moves the running statistics toward them; inference uses the running
    statistics only.
    """
    if x.size == 0 or x.shape[0] == 0:
        raise ContractError("batchnorm: empty batch")
    C = x.shape[-1]
    if state.gamma.shape != (C,):
        raise ShapeError(f"batchnorm: input has {C} channels, state has {state.gamma.shape[0]}")
    xd = x.data
    gamma, beta = state.gamma.data, state.beta.data
    axes = tuple(range(xd.ndim - 1))

    if state.training:
        n = xd.size // C
        mu = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        inv_std = (1.0 / np.sqrt(var + state.eps)).astype(xd.dtype)
        xhat = (xd - mu) * inv_std
        m = state.momentum
        rm, rv = state.running_mean, state.running_var
        rm.data = (m * rm.data + (1 - m) * mu).astype(rm.dtype)
        rv.data = (m * rv.data + (1 - m) * var).astype(rv.dtype)

        def bw(g):
            gx = _normalize_backward(g, xhat, inv_std, gamma, axes, n)
            return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    else:
        inv_std = (1.0 / np.sqrt(state.running_var.data + state.eps)).astype(xd.dtype)
        xhat = (xd - state.running_mean.data) * inv_std

        def bw(g):
            return g * (gamma * inv_std), (g * xhat).sum(axis=axes), g.sum(axis=axes)

    out = xhat * gamma + beta
    return make_op(out, (x, state.gamma, state.beta), bw, "batchnorm")


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LN_EPS) -> Tensor:
    """Normalize every token over the last axis, then apply gamma/beta."""
    D = x.shape[-1]
    if gamma.shape != (D,) or beta.shape != (D,):
        raise ShapeError(f"layernorm: last dim {D} vs gamma {gamma.shape} beta {beta.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    var = xd.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv_std
    gd = gamma.data
    lead = tuple(range(xd.ndim - 1))

    def bw(g):
        gx = _normalize_backward(g, xhat, inv_std, gd, -1, D)
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return make_op((xhat * gd + beta.data).astype(xd.dtype), (x, gamma, beta), bw, "layernorm")


# ---------------------------------------------------------------------------
# pooling, concatenation, dense
# ---------------------------------------------------------------------------


def maxpool2x2(x: Tensor) -> Tensor:
    """Max over disjoint 2x2 windows; gradient goes to the first maximum."""
    B, H, W, C = x.shape
    if H % 2 or W % 2:
        raise ShapeError(f"maxpool2x2 needs even spatial dims, got {H}x{W}")
    Ho, Wo = H // 2, W // 2
    # window elements in row-major order: (0,0), (0,1), (1,0), (1,1)
    win = x.data.reshape(B, Ho, 2, Wo, 2, C).transpose(0, 1, 3, 5, 2, 4).reshape(B, Ho, Wo, C, 4)
    idx = win.argmax(axis=-1)
    note_switch(idx.astype(np.uint8))
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        gw = np.zeros((B, Ho, Wo, C, 4), dtype=g.dtype)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        gx = gw.reshape(B, Ho, Wo, C, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(B, H, W, C)
        return (gx,)

    return make_op(out, (x,), bw, "maxpool2x2")


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 4 or b.ndim != 4 or a.shape[:3] != b.shape[:3]:
        raise ShapeError(f"concat_channels: shapes {a.shape} and {b.shape} disagree on B, H, W")
    return concat([a, b], axis=-1)


def linear(x: Tensor, params: LinearParams) -> Tensor:
    """``x @ W + b`` applied to every token (trailing axis)."""
    din, dout = params.weight.shape
    if x.shape[-1] != din:
        raise ShapeError(f"linear: input {x.shape} does not end in {din} (weight {params.weight.shape})")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, din)
    wd = params.weight.data
    out = (x2 @ wd + params.bias.data).reshape(*lead, dout)

    def bw(g):
        g2 = g.reshape(-1, dout)
        return (g2 @ wd.T).reshape(*lead, din), x2.T @ g2, g2.sum(axis=0)

    return make_op(out, (x, params.weight, params.bias), bw, "linear")


# ---------------------------------------------------------------------------
# composite blocks
# ---------------------------------------------------------------------------


def conv_block(x, p1: Conv2DParams, p2: Conv2DParams, bn1: BatchNormState, bn2: BatchNormState) -> Tensor:
    """conv -> BN -> ReLU -> conv -> BN -> ReLU, spatial size preserved."""
    for p in (p1, p2):
        if p.kernel != (3, 3) or p.padding != "same" or p.stride != 1:
            raise ConfigError(f"conv_block convolutions must be 3x3 same stride 1, got {p.kernel} {p.padding}")
    h = relu(batchnorm(conv2d(x, p1), bn1))
    return relu(batchnorm(conv2d(h, p2), bn2))


def check_head(params: Conv2DParams) -> None:
    if params.kernel != (1, 1):
        raise ConfigError(f"segmentation head must use a 1x1 kernel, got {params.kernel}")
    if params.cout != 1:
        raise ConfigError(f"segmentation head must have one output channel, got {params.cout}")


def conv1x1_sigmoid(x: Tensor, params: Conv2DParams) -> Tensor:
    check_head(params)
    return sigmoid(conv2d(x, params))
