"""Embedding and label volumes.

Axis order is always (z, y, x); embeddings are channel-last. Volumes are
immutable once built: the backing arrays are flagged read-only.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

AXES = ("z", "y", "x")


class BoundsError(IndexError):
    """A voxel index fell outside the volume."""


class VolumeMismatchError(ValueError):
    """Two volumes disagree on dims, spacing or channels."""


class VoxelPoint(NamedTuple):
    z: int
    y: int
    x: int

    def to_phys(self, spacing: Sequence[float]) -> "PhysPoint":
        return PhysPoint(*(float(i) * float(s) for i, s in zip(self, spacing)))


class PhysPoint(NamedTuple):
    z: float
    y: float
    x: float

    def to_voxel(self, spacing: Sequence[float]) -> VoxelPoint:
        """Nearest voxel index (round half to even, as numpy does)."""
        return VoxelPoint(*(int(np.rint(c / s)) for c, s in zip(self, spacing)))


def as_voxel(p) -> VoxelPoint:
    if isinstance(p, VoxelPoint):
        return p
    z, y, x = (int(v) for v in p)
    return VoxelPoint(z, y, x)


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


def _spacing3(spacing) -> tuple[float, float, float]:
    if np.isscalar(spacing):
        spacing = (spacing,) * 3
    sp = tuple(float(s) for s in spacing)
    if len(sp) != 3 or any(not np.isfinite(s) or s <= 0 for s in sp):
        raise ValueError(f"spacing must be 3 positive finite values, got {spacing!r}")
    return sp


def check_inside(p: VoxelPoint, dims: Sequence[int]) -> None:
    for axis, i, n in zip(AXES, p, dims):
        if not 0 <= i < n:
            raise BoundsError(f"{axis}={i} outside [0, {n}) for dims {tuple(dims)}")


@dataclass(frozen=True, eq=False)
class EmbeddingVolume:
    """Dense (D_z, D_y, D_x, C) float32 field with physical spacing in mm."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (2.0, 2.0, 2.0)
    normalized: bool = False

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim == 3:
            data = data[..., None]
        if data.ndim != 4 or min(data.shape) <= 0:
            raise ValueError(f"embedding data must be (Z, Y, X, C) with positive sizes, got {data.shape}")
        object.__setattr__(self, "data", _frozen(data.astype(np.float32, copy=False)))
        object.__setattr__(self, "spacing", _spacing3(self.spacing))
        if self.normalized:
            norms = np.linalg.norm(self.data.astype(np.float64), axis=-1)
            if np.abs(norms - 1.0).max() > 1e-4:
                raise ValueError("volume flagged normalized but has non-unit vectors")

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.data.shape[:3])

    @property
    def channels(self) -> int:
        return self.data.shape[3]

    @property
    def n_voxels(self) -> int:
        z, y, x = self.dims
        return z * y * x

    def flat(self) -> np.ndarray:
        """(N, C) read-only view in z-major linear order."""
        return self.data.reshape(-1, self.channels)

    def linear_index(self, p) -> int:
        p = as_voxel(p)
        check_inside(p, self.dims)
        return int(np.ravel_multi_index(p, self.dims))

    def point(self, linear: int) -> VoxelPoint:
        return VoxelPoint(*(int(v) for v in np.unravel_index(int(linear), self.dims)))

    __hash__ = object.__hash__

    def __eq__(self, other):
        if not isinstance(other, EmbeddingVolume):
            return NotImplemented
        return (
            self.spacing == other.spacing
            and self.normalized == other.normalized
            and self.data.shape == other.data.shape
            and self.data.tobytes() == other.data.tobytes()
        )


@dataclass(frozen=True, eq=False)
class LabelVolume:
    data: np.ndarray
    num_classes: int
    spacing: tuple[float, float, float] = (2.0, 2.0, 2.0)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or min(data.shape) <= 0:
            raise ValueError(f"label data must be (Z, Y, X) with positive sizes, got {data.shape}")
        if not 1 <= self.num_classes <= 65536:
            raise ValueError(f"num_classes must be in [1, 65536], got {self.num_classes}")
        if data.size and (data.min() < 0 or data.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        object.__setattr__(self, "data", _frozen(data.astype(np.uint16, copy=False)))
        object.__setattr__(self, "spacing", _spacing3(self.spacing))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)

    def __eq__(self, other):
        if not isinstance(other, LabelVolume):
            return NotImplemented
        return (
            self.num_classes == other.num_classes
            and self.spacing == other.spacing
            and self.data.shape == other.data.shape
            and self.data.tobytes() == other.data.tobytes()
        )


def embedding_at(vol: EmbeddingVolume, p) -> np.ndarray:
    p = as_voxel(p)
    check_inside(p, vol.dims)
    return vol.data[p]


@dataclass(frozen=True)
class NormalizeReport:
    volume: EmbeddingVolume
    n_zero: int = field(default=0)


def normalize_rows(x: np.ndarray) -> tuple[np.ndarray, int]:
    """Unit-normalize the last axis in float64; zero rows become e1."""
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    zero = norms[..., 0] == 0
    out = np.divide(x, norms, out=np.zeros_like(x), where=norms > 0)
    if zero.any():
        out[zero] = 0.0
        out[zero, 0] = 1.0
    return out, int(zero.sum())


def normalize(vol: EmbeddingVolume) -> NormalizeReport:
    out, n_zero = normalize_rows(vol.data)
    return NormalizeReport(EmbeddingVolume(out, vol.spacing, normalized=True), n_zero)


def concat_unified(app: EmbeddingVolume, sem: EmbeddingVolume, lam: float = 0.5) -> EmbeddingVolume:
    """Weighted concatenation [sqrt(lam) * app, sqrt(1 - lam) * sem].

    Both inputs must be unit-normalized, so the result is too and its inner
    products are lam * <app, app'> + (1 - lam) * <sem, sem'>.
    """
    if not 0.0 < lam < 1.0:
        raise ValueError(f"lambda must lie in (0, 1), got {lam}")
    if app.dims != sem.dims:
        raise VolumeMismatchError(f"dims differ: {app.dims} vs {sem.dims}")
    if app.spacing != sem.spacing:
        raise VolumeMismatchError(f"spacing differs: {app.spacing} vs {sem.spacing}")
    if not (app.normalized and sem.normalized):
        raise ValueError("concat_unified needs normalized inputs")
    data = np.concatenate(
        [np.sqrt(lam) * app.data.astype(np.float64), np.sqrt(1.0 - lam) * sem.data.astype(np.float64)],
        axis=-1,
    )
    return EmbeddingVolume(data, app.spacing, normalized=True)
