"""Inner-product similarity and nearest-neighbour matching over embedding volumes.

Scores are defined as the float64 sum of per-channel products accumulated in
channel order. The NN search screens with a BLAS product and re-scores the
survivors with that exact definition, so the winner (and the smallest-linear-
index tie-break) never depends on how the work is chunked across threads.
"""
from __future__ import annotations

import weakref
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .parallel import ordered_map
from .volume import EmbeddingVolume, VolumeMismatchError, VoxelPoint, as_voxel, check_inside

_EPS = np.finfo(np.float64).eps / 2
_CHUNK = 16384
_cache: "weakref.WeakKeyDictionary[EmbeddingVolume, tuple]" = weakref.WeakKeyDictionary()


class EmptyRegionError(ValueError):
    pass


@dataclass(frozen=True)
class SearchRegion:
    """Inclusive voxel box. ``None`` wherever a region is accepted means the whole volume."""

    lo: tuple[int, int, int]
    hi: tuple[int, int, int]

    def __post_init__(self):
        lo, hi = tuple(int(v) for v in self.lo), tuple(int(v) for v in self.hi)
        if len(lo) != 3 or len(hi) != 3:
            raise ValueError("region corners need three coordinates")
        if any(a > b for a, b in zip(lo, hi)):
            raise ValueError(f"region lo {lo} exceeds hi {hi}")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @classmethod
    def around(cls, center, half: int) -> "SearchRegion":
        c = as_voxel(center)
        return cls(tuple(v - half for v in c), tuple(v + half for v in c))

    def clip(self, dims: Sequence[int]) -> tuple[slice, slice, slice]:
        lo = [max(a, 0) for a in self.lo]
        hi = [min(b, n - 1) for b, n in zip(self.hi, dims)]
        if any(a > b for a, b in zip(lo, hi)):
            raise EmptyRegionError(f"region {self.lo}..{self.hi} does not intersect dims {tuple(dims)}")
        return tuple(slice(a, b + 1) for a, b in zip(lo, hi))


def region_indices(dims: Sequence[int], region: SearchRegion | None) -> np.ndarray | None:
    """Ascending linear indices covered by ``region`` (``None`` for whole volume)."""
    if region is None:
        return None
    sl = region.clip(dims)
    grid = np.arange(int(np.prod(dims))).reshape(dims)
    return grid[sl].ravel()


def _columns(vol: EmbeddingVolume) -> tuple[np.ndarray, float]:
    """(N, C) float64 copy of the volume plus its largest row norm, cached per volume."""
    hit = _cache.get(vol)
    if hit is None:
        q = vol.flat().astype(np.float64)
        q.setflags(write=False)
        hit = (q, float(np.sqrt((q * q).sum(axis=1)).max()))
        _cache[vol] = hit
    return hit


def exact_scores(vectors: np.ndarray, rows: np.ndarray, q: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Reference score <vectors[rows[i]], q[cols[i]]>, channel-ordered float64 sum."""
    acc = np.zeros(len(rows), dtype=np.float64)
    for c in range(vectors.shape[1]):
        acc += vectors[rows, c] * q[cols, c]
    return acc


def _check_channels(c_template: int, query: EmbeddingVolume) -> None:
    if c_template != query.channels:
        raise VolumeMismatchError(f"channel mismatch: template {c_template}, query {query.channels}")


def similarity_map(template_vec, query: EmbeddingVolume, region: SearchRegion | None = None) -> np.ndarray:
    """Score of ``template_vec`` against every voxel of ``region``, shaped like the region box."""
    v = np.asarray(template_vec, dtype=np.float32).astype(np.float64).reshape(1, -1)
    _check_channels(v.shape[1], query)
    q, _ = _columns(query)
    if region is None:
        shape, cols = query.dims, np.arange(query.n_voxels)
    else:
        sl = region.clip(query.dims)
        shape = tuple(s.stop - s.start for s in sl)
        cols = region_indices(query.dims, region)
    return exact_scores(v, np.zeros(len(cols), dtype=np.intp), q, cols).reshape(shape)


def nn_search(vectors, query: EmbeddingVolume, indices: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Batched argmax of inner products.

    ``vectors`` is (k, C); ``indices`` restricts the search to ascending linear
    indices of ``query``. Returns (linear index, exact score) per row.
    """
    v = np.asarray(vectors, dtype=np.float32).astype(np.float64)
    if v.ndim == 1:
        v = v[None]
    _check_channels(v.shape[1], query)
    q, qmax = _columns(query)
    n = query.n_voxels if indices is None else len(indices)
    if n == 0:
        raise EmptyRegionError("empty search region")
    k, c = v.shape
    gamma = c * _EPS / (1 - c * _EPS)
    # |screen - exact| <= 2 * gamma * |v| * |q| for any summation order
    margin = 8.0 * gamma * np.sqrt((v * v).sum(axis=1)) * qmax + 1e-300

    def screen(start: int):
        stop = min(start + _CHUNK, n)
        cols = np.arange(start, stop) if indices is None else indices[start:stop]
        s = v @ q[cols].T
        keep = s >= (s.max(axis=1) - margin)[:, None]
        r, j = np.nonzero(keep)
        return r, cols[j]

    parts = ordered_map(screen, range(0, n, _CHUNK))
    rows = np.concatenate([p[0] for p in parts])
    cols = np.concatenate([p[1] for p in parts])
    exact = exact_scores(v, rows, q, cols)
    order = np.lexsort((cols, -exact, rows))
    rows, cols, exact = rows[order], cols[order], exact[order]
    _, first = np.unique(rows, return_index=True)
    if len(first) != k:
        raise FloatingPointError("similarity screening lost a row (non-finite embeddings?)")
    return cols[first], exact[first]


def nn_match(template: EmbeddingVolume, t, query: EmbeddingVolume, region: SearchRegion | None = None) -> tuple[VoxelPoint, float]:
    t = as_voxel(t)
    check_inside(t, template.dims)
    idx, score = nn_search(template.data[t], query, region_indices(query.dims, region))
    return query.point(idx[0]), float(score[0])


def downsample(vol: EmbeddingVolume, factor: int) -> EmbeddingVolume:
    """Block-mean downsampling (partial edge blocks averaged too), renormalized."""
    from .volume import normalize

    if factor < 1:
        raise ValueError("factor must be >= 1")
    d = vol.data.astype(np.float64)
    out = d
    for axis in range(3):
        n = out.shape[axis]
        m = -(-n // factor)
        starts = np.arange(0, m * factor, factor)
        sums = np.add.reduceat(out, starts, axis=axis)
        counts = np.minimum(starts + factor, n) - starts
        shape = [1, 1, 1, 1]
        shape[axis] = m
        out = sums / counts.reshape(shape)
    spacing = tuple(s * factor for s in vol.spacing)
    return normalize(EmbeddingVolume(out, spacing)).volume


def infer_factor(fine_dims: Sequence[int], coarse_dims: Sequence[int]) -> int:
    for f in range(1, max(fine_dims) + 1):
        if all(-(-n // f) == m for n, m in zip(fine_dims, coarse_dims)):
            return f
    raise ValueError(f"no integer downsample factor maps {tuple(fine_dims)} to {tuple(coarse_dims)}")


def coarse_to_fine_match(
    template_coarse: EmbeddingVolume,
    template_fine: EmbeddingVolume,
    t,
    query_coarse: EmbeddingVolume,
    query_fine: EmbeddingVolume,
    top_k: int = 5,
    window: int = 9,
    factor: int | None = None,
) -> tuple[VoxelPoint, float]:
    """Coarse top-k peaks, then a fine search inside ``window``-wide boxes around them."""
    if top_k < 1 or window < 1:
        raise ValueError("top_k and window must be >= 1")
    f_t = infer_factor(template_fine.dims, template_coarse.dims)
    f_q = infer_factor(query_fine.dims, query_coarse.dims)
    if f_t != f_q or (factor is not None and factor != f_t):
        raise ValueError(f"inconsistent downsample factors: template {f_t}, query {f_q}, given {factor}")
    f = f_t
    t = as_voxel(t)
    check_inside(t, template_fine.dims)
    tc = VoxelPoint(*(v // f for v in t))

    coarse = similarity_map(template_coarse.data[tc], query_coarse).ravel()
    top_k = min(top_k, coarse.size)
    # highest scores first, ties by smallest linear index
    peaks = np.lexsort((np.arange(coarse.size), -coarse))[:top_k]

    half_lo, half_hi = (window - 1) // 2, window // 2
    mask = np.zeros(query_fine.dims, dtype=bool)
    for p in peaks:
        pc = np.unravel_index(p, query_coarse.dims)
        center = [int(v) * f + (f - 1) // 2 for v in pc]
        sl = tuple(
            slice(max(c - half_lo, 0), min(c + half_hi, n - 1) + 1) for c, n in zip(center, query_fine.dims)
        )
        mask[sl] = True
    idx, score = nn_search(template_fine.data[t], query_fine, np.flatnonzero(mask))
    return query_fine.point(idx[0]), float(score[0])
