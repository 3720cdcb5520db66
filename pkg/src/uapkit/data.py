"""In-repo datasets.

Two registered datasets cover the desk-scale experiments:

* ``synth10`` -- 32x32x3, 10 classes. Each class is a fixed smooth template
  blended into a gray background at a random amplitude plus pixel noise, so
  classifiers reach high accuracy while low-amplitude samples sit close to
  the decision boundary and remain attackable at small max-norm budgets.
* ``toy-2class-linear`` -- 2x1x1 two-pixel "images". The train split is the
  classic 4-point linearly separable set with large margins; the test split
  grades margins from near-boundary to comfortable so attack effectiveness
  can be enumerated exactly.

Datasets are generated procedurally from fixed internal seeds: the arrays
are artifacts of this repository, not of the caller's seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError

PIXEL_RANGE = (0.0, 255.0)


@dataclass(frozen=True)
class ArrayDataset:
    """Image dataset held in memory as float32 pixel arrays."""

    dataset_id: str
    split: str
    images: np.ndarray  # (N, H, W, C) float32 in pixel range
    labels: np.ndarray  # (N,) int64
    num_classes: int
    pixel_range: tuple[float, float] = PIXEL_RANGE

    def __len__(self) -> int:
        return len(self.images)

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])


# fixed generation seeds: the datasets are repo artifacts, not run-dependent
_SYNTH10_SEED = 20240117
_TOY_TEST_SEED = 977

_SYNTH10_CLASSES = 10
_SYNTH10_SHAPE = (32, 32, 3)
_SYNTH10_TRAIN = 4000
_SYNTH10_TEST = 1000


def _bilinear_upsample(coarse: np.ndarray, size: int) -> np.ndarray:
    """Upsample (h, w, c) to (size, size, c) with bilinear interpolation."""
    h, w, c = coarse.shape
    ys = np.linspace(0, h - 1, size)
    xs = np.linspace(0, w - 1, size)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]
    top = coarse[y0][:, x0] * (1 - wx) + coarse[y0][:, x1] * wx
    bot = coarse[y1][:, x0] * (1 - wx) + coarse[y1][:, x1] * wx
    return top * (1 - wy) + bot * wy


def synth10_templates() -> np.ndarray:
    """The 10 fixed class templates, shape (10, 32, 32, 3), unit max-abs.

    Smooth low-frequency patterns, mutually orthogonalized so the classes
    sit in symmetric positions: no class direction is systematically easier
    to reach than another.
    """
    rng = np.random.default_rng(_SYNTH10_SEED)
    size = _SYNTH10_SHAPE[0]
    templates = []
    for _ in range(_SYNTH10_CLASSES):
        coarse = rng.uniform(-1.0, 1.0, size=(4, 4, 3))
        templates.append(_bilinear_upsample(coarse, size))
    flat = np.stack(templates).reshape(_SYNTH10_CLASSES, -1)
    q, _ = np.linalg.qr(flat.T)  # orthogonalize across classes
    ortho = q.T.reshape(_SYNTH10_CLASSES, size, size, 3)
    ortho /= np.abs(ortho).max(axis=(1, 2, 3), keepdims=True)
    return ortho.astype(np.float32)


def _make_synth10(split: str) -> ArrayDataset:
    templates = synth10_templates()
    n = _SYNTH10_TRAIN if split == "train" else _SYNTH10_TEST
    rng = np.random.default_rng(_SYNTH10_SEED + (1 if split == "train" else 2))
    labels = rng.integers(0, _SYNTH10_CLASSES, size=n)
    amplitude = rng.uniform(7.0, 30.0, size=(n, 1, 1, 1))
    background = rng.uniform(112.0, 144.0, size=(n, 1, 1, 1))
    noise = rng.normal(0.0, 26.0, size=(n, *_SYNTH10_SHAPE))
    images = background + amplitude * templates[labels] + noise
    images = np.clip(images, *PIXEL_RANGE).astype(np.float32)
    return ArrayDataset("synth10", split, images, labels.astype(np.int64),
                        _SYNTH10_CLASSES)


def _toy_points(margins: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Two-pixel points at the requested signed margins.

    A point with label 0 has pixel0 - pixel1 == margin > 0, centered near
    mid-range so max-norm perturbations stay inside the pixel range.
    """
    base = 128.0
    x0 = base + margins / 2.0
    x1 = base - margins / 2.0
    flat = np.where(labels[:, None] == 0, np.stack([x0, x1], 1),
                    np.stack([x1, x0], 1))
    return flat.reshape(-1, 2, 1, 1).astype(np.float32)


def _make_toy(split: str) -> ArrayDataset:
    if split == "train":
        # 4 separable points, margins far above any xi=10 perturbation reach
        labels = np.array([0, 0, 1, 1], dtype=np.int64)
        margins = np.array([150.0, 120.0, 160.0, 130.0])
    else:
        rng = np.random.default_rng(_TOY_TEST_SEED)
        n = 40
        labels = rng.integers(0, 2, size=n).astype(np.int64)
        # graded margins: roughly half flippable at xi=10 (margin < 40)
        margins = rng.uniform(4.0, 80.0, size=n)
    images = _toy_points(np.asarray(margins, dtype=np.float64), labels)
    return ArrayDataset("toy-2class-linear", split, images, labels, 2)


_BUILDERS = {
    "synth10": _make_synth10,
    "toy-2class-linear": _make_toy,
}

_CACHE: dict[tuple[str, str], ArrayDataset] = {}


def dataset_ids() -> list[str]:
    return sorted(_BUILDERS)


def load_dataset(dataset_id: str, split: str = "train") -> ArrayDataset:
    if dataset_id not in _BUILDERS:
        raise ConfigurationError(
            f"unknown dataset {dataset_id!r}; registered: {dataset_ids()}")
    if split not in ("train", "test"):
        raise ConfigurationError(f"unknown split {split!r}")
    key = (dataset_id, split)
    if key not in _CACHE:
        _CACHE[key] = _BUILDERS[dataset_id](split)
    return _CACHE[key]
