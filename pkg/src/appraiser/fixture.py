"""Deterministic synthetic model and dataset for tests and demos.

Two classes of 18x18 grayscale images: a bright blob in the upper-left
quadrant (class 0) or in the lower-right quadrant (class 1), over seeded
noise. The network is hand-assigned, not trained:

    Conv1 3x3x1x4 -> Pool1 2x2 -> Conv2 3x3x4x8 -> Pool2 2x2 -> FC 72x2

Conv1 filters are a jittered 3x3 Gaussian (some taps near zero or
negative), Conv2 filters are mostly positive random mixes, so the feature
maps keep the blob's position; the FC layer scores each pooled cell by
its position along the main diagonal.
"""

from __future__ import annotations

import numpy as np

from .model_io import CONV, FC, POOL, Dataset, LayerSpec, NetworkModel
from .quant import QuantTensor

IMAGE_SIDE = 18
NUM_IMAGES = 64


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed & (2**64 - 1), stream])


def fixture_model(seed: int) -> NetworkModel:
    rng = _rng(seed, 0)
    gauss = np.array([[1, 2, 1], [2, 4, 2], [1, 2, 1]])
    conv1 = 6 * gauss[:, :, None, None] + rng.integers(-10, 11, size=(3, 3, 1, 4))
    conv2 = rng.integers(-16, 32, size=(3, 3, 4, 8))
    # pooled map is 3x3x8; score cells by (row + col - 2), in [-2, 2]
    diag = (np.arange(3)[:, None] + np.arange(3)[None, :] - 2).astype(np.int64)
    gain = rng.integers(10, 16, size=(3, 3, 8))
    score = (diag[:, :, None] * gain).reshape(-1)
    fc = np.stack([-score, score], axis=1)
    layers = (
        LayerSpec("Conv1", CONV, QuantTensor.from_array(conv1.astype(np.int8)), requant_shift=8, activation="relu"),
        LayerSpec("Pool1", POOL, pool=2),
        LayerSpec("Conv2", CONV, QuantTensor.from_array(conv2.astype(np.int8)), requant_shift=9, activation="relu"),
        LayerSpec("Pool2", POOL, pool=2),
        LayerSpec("FC", FC, QuantTensor.from_array(fc.astype(np.int8)), requant_shift=9, activation="none"),
    )
    return NetworkModel((IMAGE_SIDE, IMAGE_SIDE, 1), layers)


def fixture_dataset(seed: int, count: int = NUM_IMAGES) -> Dataset:
    rng = _rng(seed, 1)
    yy, xx = np.mgrid[0:IMAGE_SIDE, 0:IMAGE_SIDE]
    labels = np.arange(count) % 2
    images = []
    for label in labels:
        # blob centre drawn in its quadrant, with some spill toward the middle
        lo, hi = (2.0, 10.0) if label == 0 else (8.0, 16.0)
        cy, cx = rng.uniform(lo, hi, size=2)
        amp = rng.uniform(50, 110)
        sigma = rng.uniform(1.5, 3.0)
        blob = amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))
        noise = rng.uniform(0, 30, size=blob.shape)
        img = np.clip(np.rint(blob + noise), 0, 127).astype(np.int8)
        images.append(QuantTensor.from_array(img[:, :, None]))
    return Dataset(tuple(images), tuple(int(l) for l in labels), positive_class=1, num_classes=2)


def generate_fixture(seed: int) -> tuple[NetworkModel, Dataset]:
    """Model and dataset as a pure function of ``seed``."""
    return fixture_model(seed), fixture_dataset(seed)
