"""Vision-transformer bottleneck applied to the deepest encoder map.

Each spatial position of the pooled map is one token (it covers a
``patch_size x patch_size`` region of the input image). Tokens are linearly
projected, given learnable positional embeddings, passed through post-norm
encoder layers, projected back and reshaped to the spatial layout.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import math
from typing import Callable

import numpy as np

from .errors import ConfigError, ShapeError
from .layers import LN_EPS, LinearParams, layernorm, linear
from .tensor import Tensor, default_dtype, gelu, softmax

Probe = Callable[[str, Tensor], None]


def patch_count(H: int, W: int, P: int) -> int:
    """Number of non-overlapping P x P patches in an H x W image."""
    if P <= 0 or H % P or W % P:
        raise ConfigError(f"patch size {P} must divide image size {H}x{W}")
    return (H // P) * (W // P)


@dataclass
class TransformerConfig:
    depth: int = 6
    heads: int = 8
    model_dim: int = 256
    mlp_hidden: int = 1024
    patch_size: int = 16
    input_hw: int = 256
    token_channels: int = 256

    def __post_init__(self):
        if self.depth < 0:
            raise ConfigError(f"depth must be >= 0, got {self.depth}")
        if self.heads < 1 or self.model_dim % self.heads:
            raise ConfigError(f"model_dim {self.model_dim} not divisible by heads {self.heads}")
        patch_count(self.input_hw, self.input_hw, self.patch_size)

    @property
    def num_tokens(self) -> int:
        return patch_count(self.input_hw, self.input_hw, self.patch_size)

    @property
    def grid(self) -> int:
        return self.input_hw // self.patch_size


@dataclass
class EncoderLayerParams:
    wq: LinearParams
    wk: LinearParams
    wv: LinearParams
    wo: LinearParams
    ln1_gamma: Tensor
    ln1_beta: Tensor
    mlp1: LinearParams
    mlp2: LinearParams
    ln2_gamma: Tensor
    ln2_beta: Tensor

    @classmethod
    def init(cls, D: int, hidden: int, rng) -> "EncoderLayerParams":
        dt = default_dtype()

        def ones():
            return Tensor(np.ones(D, dt), requires_grad=True)

        def zeros():
            return Tensor(np.zeros(D, dt), requires_grad=True)

        return cls(
            wq=LinearParams.init(D, D, rng),
            wk=LinearParams.init(D, D, rng),
            wv=LinearParams.init(D, D, rng),
            wo=LinearParams.init(D, D, rng),
            ln1_gamma=ones(),
            ln1_beta=zeros(),
            mlp1=LinearParams.init(D, hidden, rng),
            mlp2=LinearParams.init(hidden, D, rng),
            ln2_gamma=ones(),
            ln2_beta=zeros(),
        )


@dataclass
class TransformerParams:
    proj: LinearParams
    pos: Tensor
    layers: list[EncoderLayerParams] = field(default_factory=list)
    back: LinearParams | None = None

    @classmethod
    def init(cls, cfg: TransformerConfig, rng) -> "TransformerParams":
        D, C = cfg.model_dim, cfg.token_channels
        pos = rng.normal(0.0, 0.02, size=(cfg.num_tokens, D)).astype(default_dtype())
        return cls(
            proj=LinearParams.init(C, D, rng),
            pos=Tensor(pos, requires_grad=True),
            layers=[EncoderLayerParams.init(D, cfg.mlp_hidden, rng) for _ in range(cfg.depth)],
            back=LinearParams.init(D, C, rng),
        )


def tokenize(p4: Tensor, proj: LinearParams, pos: Tensor | None) -> Tensor:
    """``B x h x w x C`` map -> ``B x (h*w) x D`` tokens (row-major positions)."""
    if p4.ndim != 4:
        raise ShapeError(f"tokenize expects B x h x w x C, got {p4.shape}")
    B, h, w, C = p4.shape
    n = h * w
    if pos is not None and pos.shape[0] != n:
        raise ConfigError(f"feature map has {n} positions but positional table has {pos.shape[0]} rows")
    tokens = linear(p4.reshape(B, n, C), proj)
    if pos is not None:
        tokens = tokens + pos
    return tokens


def untokenize(tokens: Tensor, h: int, w: int) -> Tensor:
    B, n, C = tokens.shape
    if n != h * w:
        raise ShapeError(f"cannot lay out {n} tokens on a {h}x{w} grid")
    return tokens.reshape(B, h, w, C)


def mhsa(tokens: Tensor, heads: int, params: EncoderLayerParams, return_weights: bool = False):
    """Multi-head scaled dot-product self-attention plus output projection."""
    B, N, D = tokens.shape
    if heads < 1 or D % heads:
        raise ConfigError(f"model width {D} not divisible by {heads} heads")
    d = D // heads

    def split(t):
        return t.reshape(B, N, heads, d).transpose(0, 2, 1, 3)

    q = split(linear(tokens, params.wq))
    k = split(linear(tokens, params.wk))
    v = split(linear(tokens, params.wv))
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(d))
    weights = softmax(scores, axis=-1)
    ctx = (weights @ v).transpose(0, 2, 1, 3).reshape(B, N, D)
    out = linear(ctx, params.wo)
    if return_weights:
        return out, weights
    return out


def mlp(x: Tensor, params: EncoderLayerParams) -> Tensor:
    return linear(gelu(linear(x, params.mlp1)), params.mlp2)


def encoder_layer(tokens: Tensor, params: EncoderLayerParams, heads: int) -> Tensor:
    """Post-norm layer: ``x1 = LN(x + MHSA(x))``, ``out = LN(x1 + MLP(x1))``."""
    x1 = layernorm(tokens + mhsa(tokens, heads, params), params.ln1_gamma, params.ln1_beta, LN_EPS)
    return layernorm(x1 + mlp(x1, params), params.ln2_gamma, params.ln2_beta, LN_EPS)


def transformer_bottleneck(
    p4: Tensor,
    params: TransformerParams,
    cfg: TransformerConfig,
    probe: Probe | None = None,
) -> Tensor:
    B, h, w, C = p4.shape
    if h * w != cfg.num_tokens or C != cfg.token_channels:
        raise ConfigError(
            f"bottleneck input {p4.shape} does not match config "
            f"({cfg.num_tokens} tokens of {cfg.token_channels} channels)"
        )
    x = tokenize(p4, params.proj, params.pos)
    if probe is not None:
        probe("transformer.tokens", x)
    for i, layer in enumerate(params.layers):
        x = encoder_layer(x, layer, cfg.heads)
        if probe is not None:
            probe(f"transformer.layer{i}", x)
    return untokenize(linear(x, params.back), h, w)
