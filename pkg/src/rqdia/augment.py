"""Image augmentations for stacked pixel observations.

Observations are float arrays shaped ``(C*K, H, W)`` with values in [0, 1];
batches add a leading dimension. Every frame of one stack receives the same
draw so temporal structure is preserved.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

KINDS = ("identity", "random_shift", "intensity")


@dataclass
class AugmentSpec:
    kind: str = "identity"
    pad: int = 4
    intensity_scale: float = 0.05
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown augmentation kind {self.kind!r}; expected one of {KINDS}")
        if self.pad < 0:
            raise ValueError(f"pad must be >= 0, got {self.pad}")

    @classmethod
    def from_seed(cls, kind: str, seed: int, pad: int = 4, intensity_scale: float = 0.05) -> "AugmentSpec":
        return cls(kind, pad, intensity_scale, np.random.default_rng(seed))


def _check_pad(pad: int, size: int) -> None:
    if not 0 <= pad < size / 2:
        raise ValueError(f"pad {pad} must satisfy 0 <= pad < H/2 = {size / 2}")


def random_shift(obs: np.ndarray, spec: AugmentSpec, offset: tuple[int, int] | None = None) -> np.ndarray:
    """Replicate-pad by ``spec.pad`` then crop back to H x W at a random offset."""
    return random_shift_batch(obs[None], spec, None if offset is None else np.array([offset]))[0]


def random_shift_batch(batch: np.ndarray, spec: AugmentSpec, offsets: np.ndarray | None = None) -> np.ndarray:
    n, _, h, w = batch.shape
    if h != w:
        raise ValueError(f"observations must be square, got {h}x{w}")
    pad = spec.pad
    _check_pad(pad, h)
    if pad == 0:
        return batch.copy()
    if offsets is None:
        offsets = spec.rng.integers(0, 2 * pad + 1, size=(n, 2))
    offsets = np.asarray(offsets)
    padded = np.pad(batch, ((0, 0), (0, 0), (pad, pad), (pad, pad)), mode="edge")
    windows = sliding_window_view(padded, (h, w), axis=(2, 3))
    return windows[np.arange(n), :, offsets[:, 0], offsets[:, 1]].copy()


def intensity(obs: np.ndarray, spec: AugmentSpec, z: float | None = None) -> np.ndarray:
    """Scale the whole stack by ``1 + intensity_scale * z``, z ~ N(0, 1), clamped to [0, 1]."""
    zs = None if z is None else np.array([z])
    return intensity_batch(obs[None], spec, zs)[0]


def intensity_batch(batch: np.ndarray, spec: AugmentSpec, z: np.ndarray | None = None) -> np.ndarray:
    if z is None:
        z = spec.rng.standard_normal(batch.shape[0])
    factor = (1.0 + spec.intensity_scale * np.asarray(z)).astype(batch.dtype)
    return np.clip(batch * factor.reshape(-1, 1, 1, 1), 0.0, 1.0)


def apply(obs_batch: np.ndarray, spec: AugmentSpec) -> np.ndarray:
    """Augment each batch element with an independent draw from ``spec.rng``."""
    if spec.kind == "identity":
        return obs_batch
    if spec.kind == "random_shift":
        return random_shift_batch(obs_batch, spec)
    return intensity_batch(obs_batch, spec)
