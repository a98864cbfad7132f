"""Batch generator: resize, scale, binarize and (optionally) shuffle."""

from __future__ import annotations

import math

import numpy as np
from PIL import Image

from ..data_io import DatasetError, DatasetIndex, read_image, read_mask


def resize_image(img: np.ndarray, hw: int) -> np.ndarray:
    if img.shape[:2] == (hw, hw):
        return img
    return np.asarray(Image.fromarray(img).resize((hw, hw), Image.BILINEAR))


def resize_mask(mask: np.ndarray, hw: int) -> np.ndarray:
    if mask.shape[:2] == (hw, hw):
        return mask
    return np.asarray(Image.fromarray(mask).resize((hw, hw), Image.NEAREST))


def load_pair(entry, hw: int) -> tuple[np.ndarray, np.ndarray | None]:
    """Image as float32 in [0, 1]; mask as float32 {0, 1} (threshold 0.5)."""
    img = resize_image(read_image(entry.image), hw).astype(np.float32) / 255.0
    if entry.mask is None:
        return img, None
    m = resize_mask(read_mask(entry.mask), hw)
    return img, (m.astype(np.float32) / 255.0 > 0.5).astype(np.float32)[..., None]


class DataGenerator:
    """Yields ``(images B x H x W x 3, masks B x H x W x 1)`` batches.

    The final partial batch is kept. With ``shuffle`` the order of epoch
    ``e`` is a permutation drawn from ``default_rng([seed, e])``.
    """

    def __init__(self, index: DatasetIndex, batch_size: int = 16, shuffle: bool = False,
                 seed: int = 0, target_hw: int = 256, cache: bool = True):
        if len(index) == 0:
            raise DatasetError("empty dataset index")
        if batch_size < 1:
            raise ValueError(f"batch_size must be positive, got {batch_size}")
        self.index = index
        self.batch_size = batch_size
        self.shuffle = shuffle
        self.seed = seed
        self.target_hw = target_hw
        self._cache: dict[int, tuple] | None = {} if cache else None

    def __len__(self) -> int:
        return math.ceil(len(self.index) / self.batch_size)

    def order(self, epoch: int) -> np.ndarray:
        n = len(self.index)
        if not self.shuffle:
            return np.arange(n)
        return np.random.default_rng([self.seed, epoch]).permutation(n)

    def _item(self, i: int):
        if self._cache is not None and i in self._cache:
            return self._cache[i]
        item = load_pair(self.index.entries[i], self.target_hw)
        if self._cache is not None:
            self._cache[i] = item
        return item

    def epoch(self, epoch: int = 0):
        order = self.order(epoch)
        for start in range(0, len(order), self.batch_size):
            items = [self._item(int(i)) for i in order[start : start + self.batch_size]]
            images = np.stack([it[0] for it in items])
            if items[0][1] is None:
                yield images, None
            else:
                yield images, np.stack([it[1] for it in items])

    def __iter__(self):
        return self.epoch(0)

    def stems(self, epoch: int = 0) -> list[str]:
        return [self.index.entries[int(i)].stem for i in self.order(epoch)]
