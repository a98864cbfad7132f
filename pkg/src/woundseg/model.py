"""Encoder / transformer / decoder segmentation network."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
import os
from typing import Callable, Iterator

import numpy as np

from .errors import ConfigError, ShapeError
from .layers import (
    BatchNormState,
    Conv2DParams,
    check_head,
    concat_channels,
    conv2d,
    conv_block,
    maxpool2x2,
    transposed_conv2x2,
    upsample_nearest2x,
)
from .tensor import Tensor, no_grad, precision, sigmoid
from .transformer import TransformerConfig, TransformerParams, transformer_bottleneck
from .weights import load_weights, save_weights

Probe = Callable[[str, Tensor], None]

STAGES = 4


@dataclass
class ModelConfig:
    input_hw: int = 256
    input_channels: int = 3
    encoder_filters: tuple[int, ...] = (32, 64, 128, 256)
    decoder_filters: tuple[int, ...] = (256, 128, 64, 32)
    transformer: TransformerConfig = field(default_factory=TransformerConfig)
    upsample_kind: str = "transposed"

    def __post_init__(self):
        self.encoder_filters = tuple(self.encoder_filters)
        self.decoder_filters = tuple(self.decoder_filters)
        if isinstance(self.transformer, dict):
            self.transformer = TransformerConfig(**self.transformer)
        ef = self.encoder_filters
        if len(ef) != STAGES or len(self.decoder_filters) != STAGES:
            raise ConfigError(f"need {STAGES} encoder and decoder stages, got {ef} / {self.decoder_filters}")
        if any(ef[i + 1] != 2 * ef[i] for i in range(STAGES - 1)):
            raise ConfigError(f"encoder filters must double per stage, got {ef}")
        if self.input_hw % 2**STAGES:
            raise ConfigError(f"input size {self.input_hw} not divisible by {2**STAGES}")
        if self.upsample_kind not in ("transposed", "nearest"):
            raise ConfigError(f"upsample_kind must be 'transposed' or 'nearest', got {self.upsample_kind!r}")
        t = self.transformer
        if t.input_hw != self.input_hw or t.grid != self.input_hw // 2**STAGES:
            raise ConfigError(
                f"transformer expects a {t.grid}x{t.grid} token grid from {t.input_hw}px input; "
                f"the encoder yields {self.input_hw // 2**STAGES}x{self.input_hw // 2**STAGES}"
            )
        if t.token_channels != ef[-1]:
            raise ConfigError(f"transformer token channels {t.token_channels} != deepest filters {ef[-1]}")

    @classmethod
    def full(cls) -> "ModelConfig":
        """Full-size configuration: 256x256 input, filters 32..256, depth 6, 8 heads, D=256."""
        return cls()

    @classmethod
    def scaled(cls) -> "ModelConfig":
        """Desk-scale configuration: 64x64 input, filters 8..64, depth 2, 4 heads, D=64."""
        return cls(
            input_hw=64,
            encoder_filters=(8, 16, 32, 64),
            decoder_filters=(64, 32, 16, 8),
            transformer=TransformerConfig(
                depth=2, heads=4, model_dim=64, mlp_hidden=256, patch_size=16, input_hw=64, token_channels=64
            ),
        )

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["encoder_filters"] = list(self.encoder_filters)
        d["decoder_filters"] = list(self.decoder_filters)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["transformer"] = TransformerConfig(**d["transformer"])
        return cls(**d)


@dataclass
class EncoderFeatures:
    c1: Tensor
    c2: Tensor
    c3: Tensor
    c4: Tensor
    p4: Tensor

    @property
    def skips(self) -> list[Tensor]:
        return [self.c1, self.c2, self.c3, self.c4]


@dataclass
class ConvBlockParams:
    conv1: Conv2DParams
    bn1: BatchNormState
    conv2: Conv2DParams
    bn2: BatchNormState

    @classmethod
    def init(cls, cin: int, cout: int, rng) -> "ConvBlockParams":
        return cls(
            Conv2DParams.init(3, 3, cin, cout, rng),
            BatchNormState.init(cout),
            Conv2DParams.init(3, 3, cout, cout, rng),
            BatchNormState.init(cout),
        )

    def __call__(self, x: Tensor) -> Tensor:
        return conv_block(x, self.conv1, self.conv2, self.bn1, self.bn2)


@dataclass
class DecoderStage:
    up: Conv2DParams | None
    block: ConvBlockParams


def _walk(obj, prefix: str) -> Iterator[tuple[str, Tensor]]:
    if isinstance(obj, Tensor):
        yield prefix, obj
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            yield from _walk(item, f"{prefix}.{i}")
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            yield from _walk(getattr(obj, f.name), f"{prefix}.{f.name}" if prefix else f.name)


CAM_LAYERS = (
    "enc1", "enc2", "enc3", "enc4",
    "pool4", "bottleneck",
    "dec1", "dec2", "dec3", "dec4",
    "logits",
)


class TransUNet:
    """Hybrid U-Net with a transformer bottleneck producing a 1-channel probability map.

    Parameters are created from ``seed`` (He-uniform for kernels, zero biases,
    unit/zero BN and LN affine terms, N(0, 0.02) positional table).
    """

    cam_layers = CAM_LAYERS

    def __init__(self, config: ModelConfig | None = None, seed: int = 0):
        self.config = config or ModelConfig()
        cfg = self.config
        rng = np.random.default_rng(seed)
        self.encoder: list[ConvBlockParams] = []
        cin = cfg.input_channels
        for f in cfg.encoder_filters:
            self.encoder.append(ConvBlockParams.init(cin, f, rng))
            cin = f
        self.transformer = TransformerParams.init(cfg.transformer, rng)
        self.decoder: list[DecoderStage] = []
        prev = cfg.encoder_filters[-1]
        for f, skip in zip(cfg.decoder_filters, reversed(cfg.encoder_filters)):
            if cfg.upsample_kind == "transposed":
                up = Conv2DParams.init(2, 2, prev, f, rng, stride=2)
                up_ch = f
            else:
                up, up_ch = None, prev
            self.decoder.append(DecoderStage(up, ConvBlockParams.init(up_ch + skip, f, rng)))
            prev = f
        self.head = Conv2DParams.init(1, 1, prev, 1, rng)
        check_head(self.head)
        self.training = True

    # -- parameter bookkeeping -----------------------------------------
    def named_tensors(self) -> dict[str, Tensor]:
        """Every stored tensor (learnable parameters and BN running statistics)."""
        out: dict[str, Tensor] = {}
        for prefix, part in (
            ("encoder", self.encoder),
            ("transformer", self.transformer),
            ("decoder", self.decoder),
            ("head", self.head),
        ):
            for name, t in _walk(part, prefix):
                out[name] = t
        return out

    def parameters(self) -> dict[str, Tensor]:
        return {k: t for k, t in self.named_tensors().items() if t.requires_grad}

    def zero_grad(self) -> None:
        for t in self.parameters().values():
            t.grad = None

    def _bn_states(self) -> Iterator[BatchNormState]:
        for blk in self.encoder + [s.block for s in self.decoder]:
            yield blk.bn1
            yield blk.bn2

    def train(self, mode: bool = True) -> "TransUNet":
        self.training = mode
        for bn in self._bn_states():
            bn.training = mode
        return self

    def eval(self) -> "TransUNet":
        return self.train(False)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.named_tensors().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = self.named_tensors()
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise ConfigError(f"state mismatch: missing {missing[:5]} unexpected {extra[:5]}")
        for k, t in own.items():
            arr = np.asarray(state[k])
            if arr.shape != t.shape:
                raise ShapeError(f"{k}: stored shape {arr.shape} != model shape {t.shape}")
            t.data = arr.astype(t.dtype, copy=True)

    def save(self, path: str | os.PathLike) -> None:
        save_weights(self.state_dict(), path)

    @classmethod
    def load(cls, path: str | os.PathLike, config: ModelConfig | None = None) -> "TransUNet":
        model = cls(config)
        model.load_state_dict(load_weights(path))
        return model

    def astype(self, dtype) -> "TransUNet":
        for t in self.named_tensors().values():
            t.data = t.data.astype(dtype)
        return self

    # -- forward -------------------------------------------------------
    def _check_input(self, x: Tensor) -> None:
        cfg = self.config
        expected = (cfg.input_hw, cfg.input_hw, cfg.input_channels)
        if x.ndim != 4 or x.shape[1:] != expected:
            raise ShapeError(f"expected B x {expected[0]} x {expected[1]} x {expected[2]} input, got {x.shape}")

    def encode(self, x: Tensor, probe: Probe | None = None) -> EncoderFeatures:
        if not isinstance(x, Tensor):
            x = Tensor(x)
        self._check_input(x)
        skips = []
        h = x
        for i, blk in enumerate(self.encoder, start=1):
            c = blk(h)
            h = maxpool2x2(c)
            skips.append(c)
            if probe is not None:
                probe(f"enc{i}", c)
                probe(f"pool{i}", h)
        return EncoderFeatures(*skips, p4=h)

    def decode(self, bottleneck: Tensor, feats: EncoderFeatures, probe: Probe | None = None,
               return_logits: bool = False):
        h = bottleneck
        for i, (stage, skip) in enumerate(zip(self.decoder, reversed(feats.skips)), start=1):
            h = transposed_conv2x2(h, stage.up) if stage.up is not None else upsample_nearest2x(h)
            if h.shape[:3] != skip.shape[:3]:
                raise ShapeError(f"decoder stage {i}: upsampled {h.shape} vs skip {skip.shape}")
            h = concat_channels(h, skip)
            if probe is not None:
                probe(f"dec{i}.concat", h)
            h = stage.block(h)
            if probe is not None:
                probe(f"dec{i}", h)
        logits = conv2d(h, self.head)
        if probe is not None:
            probe("logits", logits)
        prob = sigmoid(logits)
        if probe is not None:
            probe("output", prob)
        return (prob, logits) if return_logits else prob

    def forward(self, x, probe: Probe | None = None, return_logits: bool = False):
        feats = self.encode(x, probe)
        z = transformer_bottleneck(feats.p4, self.transformer, self.config.transformer, probe)
        if probe is not None:
            probe("bottleneck", z)
        return self.decode(z, feats, probe, return_logits)

    __call__ = forward

    def predict(self, images: np.ndarray, batch_size: int = 16) -> np.ndarray:
        """Inference-mode probability maps for an ``N x H x W x C`` array."""
        was_training = self.training
        self.eval()
        outs = []
        try:
            with no_grad():
                for i in range(0, len(images), batch_size):
                    outs.append(self.forward(Tensor(images[i : i + batch_size])).data)
        finally:
            self.train(was_training)
        return np.concatenate(outs, axis=0)


def conv_param_count(kh: int, kw: int, cin: int, cout: int) -> int:
    return kh * kw * cin * cout + cout


def count_params(config: ModelConfig) -> tuple[int, dict[str, int]]:
    """Learnable scalar count, total and itemized per layer."""
    with precision(np.float32):
        model = TransUNet(config)
    items: dict[str, int] = {}
    for name, t in model.parameters().items():
        layer = name.rsplit(".", 1)[0]
        items[layer] = items.get(layer, 0) + t.size
    return sum(items.values()), items
