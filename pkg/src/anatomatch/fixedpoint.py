"""Forward-backward fixed-point matching.

``f(t)`` maps a template voxel to its NN in the query volume and back again.
Consistent matches are fixed points of ``f``. Starting from every voxel of a
cube around the template point, ``f`` is iterated until it stops moving;
fixed points close to their start feed a least-squares local linear model
whose averaged prediction is the query location.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .similarity import nn_search
from .volume import EmbeddingVolume, PhysPoint, VolumeMismatchError, VoxelPoint, as_voxel, check_inside

MODES = ("nn", "fixedpoint")


@dataclass
class MatcherConfig:
    mode: str = "fixedpoint"
    cube: int = 5
    tau_dis: float = 2.0
    max_iter: int = 20
    min_points: int = 4

    def validate(self) -> "MatcherConfig":
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not (isinstance(self.cube, int) and self.cube >= 1 and self.cube % 2 == 1):
            raise ValueError(f"cube size L must be a positive odd integer, got {self.cube!r}")
        if not self.tau_dis > 0:
            raise ValueError(f"tau_dis must be > 0, got {self.tau_dis!r}")
        if not (isinstance(self.max_iter, int) and self.max_iter >= 1):
            raise ValueError(f"max_iter must be >= 1, got {self.max_iter!r}")
        if not (isinstance(self.min_points, int) and self.min_points >= 1):
            raise ValueError(f"min_points must be >= 1, got {self.min_points!r}")
        return self


@dataclass
class FBTrace:
    start: VoxelPoint
    sequence: list[tuple[VoxelPoint, VoxelPoint]] = field(default_factory=list)
    converged: bool = False
    cycle: bool = False
    n_fix: int = 0
    offset: float = 0.0
    terminal_pair: tuple[VoxelPoint, VoxelPoint] | None = None

    @property
    def terminal(self) -> VoxelPoint:
        return self.terminal_pair[0]


class InsufficientPoints(Exception):
    """Too few stable fixed points for a full linear fit. Callers fall back."""

    def __init__(self, n: int, needed: int):
        super().__init__(f"{n} stable points, need {needed}")
        self.n = n
        self.needed = needed


@dataclass
class AffineEstimate:
    A: np.ndarray
    f_bar: np.ndarray
    g_bar: np.ndarray
    n_points: int
    residual_rms: float
    rank: int = 3
    translation_only: bool = False

    @property
    def rank_deficient(self) -> bool:
        return self.rank < 3

    def to_dict(self) -> dict:
        return {
            "A": self.A.tolist(),
            "f_bar": self.f_bar.tolist(),
            "g_bar": self.g_bar.tolist(),
            "n_points": self.n_points,
            "residual_rms": self.residual_rms,
            "rank": self.rank,
            "translation_only": self.translation_only,
        }


@dataclass
class MatchResult:
    query_voxel: VoxelPoint
    query_phys: PhysPoint
    query_real: tuple[float, float, float]
    method: str
    n_stable: int = 0
    affine: AffineEstimate | None = None
    clamped: bool = False
    score: float | None = None
    traces: list[FBTrace] | None = None

    def to_dict(self) -> dict:
        out = {
            "query_voxel": list(self.query_voxel),
            "query_mm": list(self.query_phys),
            "query_voxel_real": list(self.query_real),
            "method": self.method,
            "n_stable": self.n_stable,
            "clamped": self.clamped,
            "score": self.score,
            "affine": None if self.affine is None else self.affine.to_dict(),
        }
        if self.traces is not None:
            out["traces"] = [
                {
                    "start": list(tr.start),
                    "terminal": list(tr.terminal),
                    "converged": tr.converged,
                    "cycle": tr.cycle,
                    "n_fix": tr.n_fix,
                    "offset": tr.offset,
                }
                for tr in self.traces
            ]
        return out


class _FBMap:
    """Memoized A->B and B->A nearest neighbours, evaluated in batches."""

    def __init__(self, xa: EmbeddingVolume, xb: EmbeddingVolume):
        if xa.channels != xb.channels:
            raise VolumeMismatchError(f"channel mismatch: {xa.channels} vs {xb.channels}")
        self.xa, self.xb = xa, xb
        self.fwd: dict[int, int] = {}
        self.bwd: dict[int, int] = {}

    @staticmethod
    def _fill(cache: dict, keys: Iterable[int], src: EmbeddingVolume, dst: EmbeddingVolume) -> None:
        todo = sorted({k for k in keys if k not in cache})
        if not todo:
            return
        idx, _ = nn_search(src.flat()[todo], dst)
        cache.update(zip(todo, (int(i) for i in idx)))

    def step(self, points: Sequence[int]) -> list[tuple[int, int]]:
        """Apply f to linear indices in A; returns (q in B, next t in A) per point."""
        self._fill(self.fwd, points, self.xa, self.xb)
        qs = [self.fwd[p] for p in points]
        self._fill(self.bwd, qs, self.xb, self.xa)
        return [(q, self.bwd[q]) for q in qs]


def _run_traces(fb: _FBMap, starts: Sequence[VoxelPoint], max_iter: int) -> list[FBTrace]:
    xa, xb = fb.xa, fb.xb
    traces = [FBTrace(start=s) for s in starts]
    current = [xa.linear_index(s) for s in starts]
    visited = [{c} for c in current]
    active = list(range(len(traces)))
    while active:
        steps = fb.step([current[i] for i in active])
        still = []
        for i, (q, nxt) in zip(active, steps):
            tr = traces[i]
            t_pt, q_pt = xa.point(current[i]), xb.point(q)
            tr.sequence.append((t_pt, q_pt))
            tr.n_fix += 1
            if nxt == current[i]:
                tr.converged = True
                tr.terminal_pair = (t_pt, q_pt)
            elif nxt in visited[i] or tr.n_fix >= max_iter:
                tr.cycle = nxt in visited[i]
                tr.terminal_pair = (xa.point(nxt), q_pt)
            else:
                visited[i].add(nxt)
                current[i] = nxt
                still.append(i)
                continue
            tr.offset = float(np.linalg.norm(np.subtract(tr.start, tr.terminal, dtype=np.float64)))
        active = still
    return traces


def forward_backward(t, xa: EmbeddingVolume, xb: EmbeddingVolume) -> tuple[VoxelPoint, VoxelPoint]:
    """One application of f: returns (t_next in A, q in B)."""
    t = as_voxel(t)
    check_inside(t, xa.dims)
    fb = _FBMap(xa, xb)
    ((q, nxt),) = fb.step([xa.linear_index(t)])
    return xa.point(nxt), xb.point(q)


def iterate_to_fixed_point(t0, xa: EmbeddingVolume, xb: EmbeddingVolume, max_iter: int = 20) -> FBTrace:
    if max_iter < 1:
        raise ValueError("max_iter must be >= 1")
    t0 = as_voxel(t0)
    check_inside(t0, xa.dims)
    return _run_traces(_FBMap(xa, xb), [t0], max_iter)[0]


def cube_points(t0: VoxelPoint, L: int, dims: Sequence[int]) -> list[VoxelPoint]:
    """Voxels of the L^3 cube centred on ``t0``, clipped to ``dims``, z-major."""
    h = L // 2
    ranges = [range(max(c - h, 0), min(c + h, n - 1) + 1) for c, n in zip(t0, dims)]
    return [VoxelPoint(z, y, x) for z in ranges[0] for y in ranges[1] for x in ranges[2]]


def cube_fixed_points(t0, xa: EmbeddingVolume, xb: EmbeddingVolume, L: int = 5, max_iter: int = 20) -> list[FBTrace]:
    if L < 1 or L % 2 == 0:
        raise ValueError(f"cube size must be a positive odd integer, got {L}")
    t0 = as_voxel(t0)
    check_inside(t0, xa.dims)
    return _run_traces(_FBMap(xa, xb), cube_points(t0, L, xa.dims), max_iter)


def filter_stable(traces: Sequence[FBTrace], tau_dis: float) -> list[FBTrace]:
    if not tau_dis > 0:
        raise ValueError("tau_dis must be > 0")
    return [tr for tr in traces if tr.converged and tr.offset < tau_dis]


def _pairs(stable: Sequence[FBTrace]) -> tuple[np.ndarray, np.ndarray]:
    f = np.array([tr.terminal_pair[0] for tr in stable], dtype=np.float64).reshape(-1, 3)
    g = np.array([tr.terminal_pair[1] for tr in stable], dtype=np.float64).reshape(-1, 3)
    return f, g


def fit_linear(f: np.ndarray, g: np.ndarray, rcond: float = 1e-10) -> AffineEstimate:
    """Least squares g - g_bar ~ A (f - f_bar) on centred coordinates.

    Null directions of the scatter matrix are completed with the identity, so
    degenerate (coincident, collinear, coplanar) point sets still yield a map.
    """
    f = np.asarray(f, dtype=np.float64).reshape(-1, 3)
    g = np.asarray(g, dtype=np.float64).reshape(-1, 3)
    f_bar, g_bar = f.mean(axis=0), g.mean(axis=0)
    fc, gc = f - f_bar, g - g_bar
    scatter = fc.T @ fc
    cross = gc.T @ fc
    evals, evecs = np.linalg.eigh(scatter)
    keep = evals > rcond * max(evals.max(), 0.0) if evals.max() > 0 else np.zeros(3, dtype=bool)
    inv = (evecs[:, keep] / evals[keep]) @ evecs[:, keep].T
    null = evecs[:, ~keep] @ evecs[:, ~keep].T
    A = cross @ inv + null
    resid = gc - fc @ A.T
    rms = float(np.sqrt((resid * resid).sum(axis=1).mean()))
    return AffineEstimate(A, f_bar, g_bar, len(f), rms, rank=int(keep.sum()))


def estimate_affine(stable: Sequence[FBTrace], min_points: int = 4) -> AffineEstimate:
    """Raises InsufficientPoints when fewer than ``min_points`` traces are given."""
    if len(stable) < min_points:
        raise InsufficientPoints(len(stable), min_points)
    return fit_linear(*_pairs(stable))


def translation_only(stable: Sequence[FBTrace]) -> AffineEstimate:
    f, g = _pairs(stable)
    f_bar, g_bar = f.mean(axis=0), g.mean(axis=0)
    resid = (g - g_bar) - (f - f_bar)
    rms = float(np.sqrt((resid * resid).sum(axis=1).mean()))
    return AffineEstimate(np.eye(3), f_bar, g_bar, len(f), rms, rank=0, translation_only=True)


def per_point_predictions(t0, stable: Sequence[FBTrace], affine: AffineEstimate) -> np.ndarray:
    """q_k = g_k + A (t0 - f_k) for every stable trace."""
    f, g = _pairs(stable)
    return g + (np.asarray(t0, dtype=np.float64) - f) @ affine.A.T


def predict_query(t0, stable: Sequence[FBTrace], affine: AffineEstimate) -> np.ndarray:
    """Mean of the per-point predictions, evaluated as g_bar + A (t0 - f_bar)."""
    if not stable:
        raise ValueError("no stable fixed points to predict from")
    f, g = _pairs(stable)
    f_bar, g_bar = f.mean(axis=0), g.mean(axis=0)
    return g_bar + affine.A @ (np.asarray(t0, dtype=np.float64) - f_bar)


def _result(real, xb: EmbeddingVolume, method: str, **kw) -> MatchResult:
    real = np.asarray(real, dtype=np.float64)
    hi = np.array(xb.dims, dtype=np.float64) - 1
    clipped = np.clip(real, 0.0, hi)
    clamped = bool(np.any(clipped != real))
    vox = VoxelPoint(*(int(v) for v in np.rint(clipped)))
    phys = PhysPoint(*(float(c * s) for c, s in zip(clipped, xb.spacing)))
    return MatchResult(vox, phys, tuple(float(c) for c in clipped), method, clamped=clamped, **kw)


def match(t, xa: EmbeddingVolume, xb: EmbeddingVolume, cfg: MatcherConfig | None = None, keep_traces: bool = False) -> MatchResult:
    cfg = (cfg or MatcherConfig()).validate()
    t = as_voxel(t)
    check_inside(t, xa.dims)
    fb = _FBMap(xa, xb)
    if cfg.mode == "nn":
        idx, score = nn_search(xa.data[t], xb)
        return _result(xb.point(idx[0]), xb, "nn", score=float(score[0]))

    traces = _run_traces(fb, cube_points(t, cfg.cube, xa.dims), cfg.max_iter)
    stable = filter_stable(traces, cfg.tau_dis)
    kept = traces if keep_traces else None
    if not stable:
        lin = xa.linear_index(t)
        fb._fill(fb.fwd, [lin], xa, xb)
        return _result(xb.point(fb.fwd[lin]), xb, "fixedpoint-fallback-nn", traces=kept)
    try:
        affine = estimate_affine(stable, cfg.min_points)
        method = "fixedpoint"
    except InsufficientPoints:
        affine = translation_only(stable)
        method = "fixedpoint-translation"
    pred = predict_query(t, stable, affine)
    return _result(pred, xb, method, n_stable=len(stable), affine=affine, traces=kept)

