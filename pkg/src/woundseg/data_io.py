"""Dataset indexing, mask files, corpus statistics and a synthetic wound corpus.

Expected layout::

    <root>/<split>/images/<name>.png
    <root>/<split>/labels/<name>.png     # train / validation only

Masks are 8-bit grayscale with 0 = background and 255 = wound.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass
import io
import json
import math
import os
from pathlib import Path

import numpy as np
from PIL import Image

from ._fs import atomic_write_bytes, atomic_write_text
from .errors import ContractError
from .metrics import binarize

SPLITS = ("train", "validation", "test")
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


class DatasetError(ValueError):
    """Missing directories, unpaired files or invalid mask contents."""


@dataclass(frozen=True)
class Entry:
    image: Path
    mask: Path | None

    @property
    def stem(self) -> str:
        return self.image.stem


@dataclass
class DatasetIndex:
    split: str
    entries: list[Entry]

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @property
    def labeled(self) -> bool:
        return all(e.mask is not None for e in self.entries)


def _list_images(folder: Path) -> list[Path]:
    return sorted(
        (p for p in folder.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES),
        key=lambda p: p.name,
    )


def load_index(
    root: str | os.PathLike,
    split: str,
    images_dir: str = "images",
    labels_dir: str = "labels",
    labeled: bool | None = None,
) -> DatasetIndex:
    """Pair ``images/`` with ``labels/`` by filename stem, sorted by name."""
    if labeled is None:
        labeled = split != "test"
    base = Path(root) / split
    img_dir = base / images_dir
    if not img_dir.is_dir():
        raise DatasetError(f"missing image folder {img_dir}")
    images = _list_images(img_dir)
    if not images:
        raise DatasetError(f"no images in {img_dir}")
    stems = [p.stem for p in images]
    if len(set(stems)) != len(stems):
        raise DatasetError(f"duplicate filenames in {img_dir}")

    if not labeled:
        return DatasetIndex(split, [Entry(p, None) for p in images])

    lbl_dir = base / labels_dir
    if not lbl_dir.is_dir():
        raise DatasetError(f"missing label folder {lbl_dir}")
    masks = {p.stem: p for p in _list_images(lbl_dir)}
    entries = []
    for p in images:
        m = masks.get(p.stem)
        if m is None:
            raise DatasetError(f"no mask for {p.name} in {lbl_dir}")
        entries.append(Entry(p, m))
    return DatasetIndex(split, entries)


# ---------------------------------------------------------------------------
# image / mask files
# ---------------------------------------------------------------------------


def read_image(path: str | os.PathLike) -> np.ndarray:
    """``H x W x 3`` uint8 RGB."""
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8)
    except OSError as exc:
        raise DatasetError(f"cannot read image {path}: {exc}") from exc


def read_mask(path: str | os.PathLike) -> np.ndarray:
    """``H x W`` uint8 grayscale."""
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("L"), dtype=np.uint8)
    except OSError as exc:
        raise DatasetError(f"cannot read mask {path}: {exc}") from exc


def png_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(np.ascontiguousarray(arr, dtype=np.uint8)).save(buf, format="PNG")
    return buf.getvalue()


def write_png(arr: np.ndarray, path: str | os.PathLike) -> None:
    atomic_write_bytes(path, png_bytes(arr))


def mask_to_gray(mask01: np.ndarray) -> np.ndarray:
    return np.where(np.asarray(mask01) > 0, 255, 0).astype(np.uint8)


def write_prediction(prob, out_path: str | os.PathLike, threshold: float = 0.5) -> Path:
    """Binarize a probability map and store it as a 0/255 grayscale PNG."""
    p = np.asarray(getattr(prob, "data", prob))
    if p.ndim == 3 and p.shape[-1] == 1:
        p = p[..., 0]
    if p.ndim != 2:
        raise ContractError(f"write_prediction expects an H x W map, got {p.shape}")
    out_path = Path(out_path)
    write_png(mask_to_gray(binarize(p, threshold)), out_path)
    return out_path


# ---------------------------------------------------------------------------
# statistics
# ---------------------------------------------------------------------------


@dataclass
class StatsReport:
    histogram: list[list[int]]  # 3 x 256, R/G/B
    mask_counts: dict[str, int]  # "0" and "255"
    split_counts: dict[str, int]
    image_pixels: int

    @property
    def wound_fraction(self) -> float:
        total = self.mask_counts["0"] + self.mask_counts["255"]
        return self.mask_counts["255"] / total if total else 0.0

    def to_json(self) -> str:
        d = asdict(self)
        d["wound_fraction"] = self.wound_fraction
        return json.dumps(d, indent=2)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["value", "red", "green", "blue"])
        for v in range(256):
            w.writerow([v] + [self.histogram[c][v] for c in range(3)])
        return buf.getvalue()


def compute_stats(indices: DatasetIndex | list[DatasetIndex]) -> StatsReport:
    """Per-channel intensity histograms and 0/255 mask counts."""
    if isinstance(indices, DatasetIndex):
        indices = [indices]
    hist = np.zeros((3, 256), dtype=np.int64)
    counts = {"0": 0, "255": 0}
    split_counts: dict[str, int] = {}
    pixels = 0
    offenders = []
    for index in indices:
        split_counts[index.split] = split_counts.get(index.split, 0) + len(index)
        for e in index:
            img = read_image(e.image)
            pixels += img.shape[0] * img.shape[1]
            for c in range(3):
                hist[c] += np.bincount(img[..., c].ravel(), minlength=256)
            if e.mask is None:
                continue
            m = read_mask(e.mask)
            vals = np.bincount(m.ravel(), minlength=256)
            bad = [v for v in np.nonzero(vals)[0] if v not in (0, 255)]
            if bad:
                offenders.append(f"{e.mask.name}: {bad[:8]}")
                continue
            counts["0"] += int(vals[0])
            counts["255"] += int(vals[255])
    if offenders:
        raise DatasetError("masks with values outside {0, 255}: " + "; ".join(offenders))
    return StatsReport(hist.tolist(), counts, split_counts, pixels)


def write_stats(report: StatsReport, out: str | os.PathLike) -> tuple[Path, Path]:
    """Write ``<out>`` as JSON and a sibling ``.csv`` histogram."""
    out = Path(out)
    json_path = out if out.suffix == ".json" else out.with_suffix(".json")
    csv_path = json_path.with_suffix(".csv")
    atomic_write_text(json_path, report.to_json())
    atomic_write_text(csv_path, report.to_csv())
    return json_path, csv_path


# ---------------------------------------------------------------------------
# synthetic corpus
# ---------------------------------------------------------------------------


@dataclass
class SynthConfig:
    count: int = 8
    image_hw: int = 64
    radius_range: tuple[float, float] | None = None  # semi-axes in pixels
    noise: float = 0.04
    seed: int = 0

    def __post_init__(self):
        if self.count < 1:
            raise ValueError(f"count must be >= 1, got {self.count}")
        if self.radius_range is None:
            self.radius_range = (0.12 * self.image_hw, 0.3 * self.image_hw)
        lo, hi = self.radius_range
        if not 0 < lo <= hi or 2 * hi + 2 > self.image_hw:
            raise ValueError(f"radii {self.radius_range} do not fit a {self.image_hw}px image")


@dataclass(frozen=True)
class Ellipse:
    cx: float
    cy: float
    a: float
    b: float
    angle: float

    @property
    def area(self) -> float:
        return math.pi * self.a * self.b


def ellipse_mask(e: Ellipse, hw: int) -> np.ndarray:
    """Pixels whose centre ``(col, row)`` lies inside the rotated ellipse."""
    yy, xx = np.mgrid[0:hw, 0:hw].astype(np.float64)
    dx, dy = xx - e.cx, yy - e.cy
    c, s = math.cos(e.angle), math.sin(e.angle)
    u = (dx * c + dy * s) / e.a
    v = (-dx * s + dy * c) / e.b
    return u * u + v * v <= 1.0


def _smooth_noise(rng, hw: int, scale: int) -> np.ndarray:
    coarse = rng.standard_normal((hw // scale + 2, hw // scale + 2))
    up = np.kron(coarse, np.ones((scale, scale)))[:hw, :hw]
    k = np.ones(scale) / scale
    up = np.apply_along_axis(lambda r: np.convolve(r, k, mode="same"), 1, up)
    up = np.apply_along_axis(lambda r: np.convolve(r, k, mode="same"), 0, up)
    return up / (up.std() + 1e-12)


def render_synthetic(rng, cfg: SynthConfig) -> tuple[np.ndarray, np.ndarray, Ellipse]:
    """One wound-like ellipse on skin tone: ``(uint8 RGB, 0/255 mask, ellipse)``."""
    hw = cfg.image_hw
    lo, hi = cfg.radius_range
    a, b = rng.uniform(lo, hi, size=2)
    r = max(a, b)
    cx, cy = rng.uniform(r, hw - 1 - r, size=2)
    ell = Ellipse(float(cx), float(cy), float(a), float(b), float(rng.uniform(0, math.pi)))
    mask = ellipse_mask(ell, hw)

    skin = np.array([0.86, 0.66, 0.54]) + rng.uniform(-0.08, 0.08, size=3)
    wound = np.array([0.55, 0.18, 0.16]) + rng.uniform(-0.06, 0.06, size=3)
    yy, xx = np.mgrid[0:hw, 0:hw] / hw
    light = 1.0 + 0.12 * (rng.uniform(-1, 1) * (xx - 0.5) + rng.uniform(-1, 1) * (yy - 0.5))
    texture = _smooth_noise(rng, hw, max(2, hw // 16))
    fine = rng.standard_normal((hw, hw, 3))

    img = np.where(mask[..., None], wound, skin) * light[..., None]
    img = img + cfg.noise * texture[..., None] + 0.5 * cfg.noise * fine
    img = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    return img, mask_to_gray(mask), ell


def generate_synthetic(config: SynthConfig, out_dir: str | os.PathLike, split: str = "train") -> DatasetIndex:
    """Write ``count`` image/mask pairs under ``out_dir/split`` plus ``synth.json``.

    Output is a pure function of the config (same seed -> identical bytes).
    """
    rng = np.random.default_rng(config.seed)
    base = Path(out_dir) / split
    meta = {"config": asdict(config), "items": []}
    entries = []
    for i in range(config.count):
        img, mask, ell = render_synthetic(rng, config)
        name = f"synth_{i:04d}.png"
        ip, mp = base / "images" / name, base / "labels" / name
        write_png(img, ip)
        write_png(mask, mp)
        meta["items"].append({"file": name, "ellipse": asdict(ell), "wound_pixels": int((mask > 0).sum())})
        entries.append(Entry(ip, mp))
    atomic_write_text(base / "synth.json", json.dumps(meta, indent=2))
    return DatasetIndex(split, entries)


def load_synth_meta(split_dir: str | os.PathLike) -> dict:
    return json.loads((Path(split_dir) / "synth.json").read_text())
