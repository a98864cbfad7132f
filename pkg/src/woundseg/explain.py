"""Grad-CAM maps and the qualitative renderers (side-by-side, overlays)."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, ShapeError
from .tensor import Tensor, backward

# piecewise-linear blue -> green -> yellow -> red
RAMP_STOPS = np.array([0.0, 1 / 3, 2 / 3, 1.0])
RAMP_COLORS = np.array(
    [
        [0.0, 0.0, 255.0],
        [0.0, 255.0, 0.0],
        [255.0, 255.0, 0.0],
        [255.0, 0.0, 0.0],
    ]
)
SEPARATOR = 4


@dataclass
class CamMap:
    values: np.ndarray
    normalized: bool = True
    layer: str = ""
    alphas: np.ndarray | None = field(default=None, repr=False)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


@dataclass(frozen=True)
class OverlayConfig:
    alpha: float = 0.4
    mask_color: tuple[int, int, int] = (255, 0, 0)

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")


def normalize_cam(values: np.ndarray) -> np.ndarray:
    v = np.maximum(np.asarray(values, dtype=np.float64), 0.0)
    peak = v.max() if v.size else 0.0
    return v / peak if peak > 0 else v


def gradcam(model, image, target_layer: str = "dec4", threshold: float = 0.5) -> CamMap:
    """Grad-CAM of the mean wound logit with respect to ``target_layer``.

    The target scalar is the mean pre-sigmoid output over pixels predicted
    positive (all pixels when none are). Channel weights are the spatial
    means of its gradient; the map is ``ReLU(sum_k w_k A_k)`` scaled to a
    maximum of 1 when not identically zero.
    """
    layers = tuple(getattr(model, "cam_layers", ()))
    if target_layer not in layers:
        raise ValueError(f"unknown layer {target_layer!r}; valid targets: {', '.join(layers)}")
    x = np.asarray(getattr(image, "data", image))
    if x.ndim == 3:
        x = x[None]
    if x.shape[0] != 1:
        raise ShapeError(f"gradcam takes a single image, got batch of {x.shape[0]}")

    captured: dict[str, Tensor] = {}

    def probe(name, t):
        if name == target_layer:
            captured[name] = t

    was_training = getattr(model, "training", False)
    if hasattr(model, "eval"):
        model.eval()
    try:
        x_t = Tensor(x, dtype=_model_dtype(model), requires_grad=True)  # keep the graph when weights are frozen
        prob, logits = model.forward(x_t, probe=probe, return_logits=True)
    finally:
        if hasattr(model, "train"):
            model.train(was_training)
    act = captured[target_layer]
    positive = prob.data > threshold
    if not positive.any():
        positive = np.ones_like(positive)
    weight = positive.astype(logits.dtype) / positive.sum()
    target = (logits * Tensor(weight, dtype=logits.dtype)).sum()
    (g,) = backward(target, wrt=[act])
    if g is None:
        g = np.zeros_like(act.data)
    alphas = g[0].mean(axis=(0, 1))
    raw = np.maximum((act.data[0] * alphas).sum(axis=-1), 0.0)
    return CamMap(normalize_cam(raw), True, target_layer, alphas)


def _model_dtype(model):
    params = getattr(model, "parameters", None)
    if callable(params):
        for t in params().values():
            return t.dtype
    return None


def bilinear_resize(values: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-centre bilinear resampling with edge clamping."""
    a = np.asarray(values, dtype=np.float64)
    H, W = a.shape
    if out_h < 1 or out_w < 1:
        raise ContractError(f"target size must be positive, got {out_h}x{out_w}")
    if (out_h, out_w) == (H, W):
        return a.copy()

    def axis(n_in, n_out):
        src = np.clip((np.arange(n_out) + 0.5) * n_in / n_out - 0.5, 0, n_in - 1)
        lo = np.floor(src).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    y0, y1, wy = axis(H, out_h)
    x0, x1, wx = axis(W, out_w)
    wy, wx = wy[:, None], wx[None, :]
    top = a[y0][:, x0] * (1 - wx) + a[y0][:, x1] * wx
    bot = a[y1][:, x0] * (1 - wx) + a[y1][:, x1] * wx
    return top * (1 - wy) + bot * wy


def upsample_cam(cam: CamMap, target_hw) -> CamMap:
    h, w = (target_hw, target_hw) if np.isscalar(target_hw) else target_hw
    vals = np.clip(bilinear_resize(cam.values, int(h), int(w)), 0.0, 1.0 if cam.normalized else np.inf)
    return CamMap(vals, cam.normalized, cam.layer, cam.alphas)


def colormap(values: np.ndarray) -> np.ndarray:
    """Map ``[0, 1]`` values onto the blue-green-yellow-red ramp (float RGB 0..255)."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    return np.stack([np.interp(v, RAMP_STOPS, RAMP_COLORS[:, c]) for c in range(3)], axis=-1)


def to_uint8_rgb(image) -> np.ndarray:
    img = np.asarray(image)
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=-1)
    if img.dtype != np.uint8:
        img = np.clip(np.round(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    return img


def render_overlay(image, layer, kind: str = "cam", config: OverlayConfig = OverlayConfig()) -> np.ndarray:
    """Blend ``(1 - a w) * image + a w * color`` per pixel.

    For ``kind="cam"`` the weight ``w`` is the cam value and the colour comes
    from the ramp; for ``kind="mask"`` ``w`` is 1 on mask pixels and the
    colour is ``config.mask_color``.
    """
    img = to_uint8_rgb(image).astype(np.float64)
    layer = np.asarray(getattr(layer, "values", layer), dtype=np.float64)
    if layer.ndim == 3 and layer.shape[-1] == 1:
        layer = layer[..., 0]
    if layer.shape != img.shape[:2]:
        raise ShapeError(f"overlay layer {layer.shape} does not match image {img.shape[:2]}")
    if kind == "cam":
        w = np.clip(layer, 0.0, 1.0)
        color = colormap(w)
    elif kind == "mask":
        w = (layer > 0).astype(np.float64)
        color = np.broadcast_to(np.asarray(config.mask_color, dtype=np.float64), img.shape)
    else:
        raise ValueError(f"kind must be 'cam' or 'mask', got {kind!r}")
    aw = (config.alpha * w)[..., None]
    return np.clip(np.round((1 - aw) * img + aw * color), 0, 255).astype(np.uint8)


def render_side_by_side(image, mask) -> np.ndarray:
    """Image | 4px white separator | mask rendered as 0/255 gray."""
    img = to_uint8_rgb(image)
    m = np.asarray(mask)
    if m.ndim == 3 and m.shape[-1] == 1:
        m = m[..., 0]
    if m.shape[0] != img.shape[0]:
        raise ShapeError(f"height mismatch: image {img.shape[0]} vs mask {m.shape[0]}")
    gray = np.where(m > 0, 255, 0).astype(np.uint8)
    sep = np.full((img.shape[0], SEPARATOR, 3), 255, dtype=np.uint8)
    return np.concatenate([img, sep, np.repeat(gray[..., None], 3, axis=-1)], axis=1)
