"""Procedural 3D phantoms, augmented view pairs and corruptions.

A phantom is a textured background holding ellipsoidal structures. Each
foreground class has its own intensity profile; classes 1 and 2 share the
same mean intensity and differ only in texture, a look-alike pair.

Ground truth between two views is kept as analytic transform parameters
(rotation, per-axis scale, translation about the volume centre, plus
optional local bump deformations) so evaluation never interpolates.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage

from .volume import LabelVolume

CORRUPTION_MODES = ("erase-structure", "intensity-shift", "local-deform")

BACKGROUND_MEAN = 0.1
BACKGROUND_STD = 0.15


class PackingError(RuntimeError):
    pass


class RegionError(ValueError):
    pass


@dataclass(frozen=True)
class ClassProfile:
    mean: float
    core: float  # extra brightness at the centre, fading to 0 at the surface
    texture: float


def class_profiles(num_classes: int) -> list[ClassProfile]:
    """Profiles indexed by class id; entry 0 is the background."""
    n_fg = num_classes - 1
    means = np.linspace(0.4, 1.6, max(n_fg, 1))
    profiles = [ClassProfile(BACKGROUND_MEAN, 0.0, BACKGROUND_STD)]
    for c in range(n_fg):
        mean = float(means[c])
        texture = 0.05
        if c == 1:  # look-alike of class 1: same intensity, rougher texture
            mean = float(means[0])
            texture = 0.12
        # the core swing stays below the mean spacing, so only the look-alike pair overlaps
        core = 0.1 if c % 2 == 0 else -0.1
        profiles.append(ClassProfile(mean, core, texture))
    return profiles


@dataclass(frozen=True)
class Structure:
    id: int
    cls: int
    center_mm: tuple[float, float, float]
    semi_axes_mm: tuple[float, float, float]

    @property
    def radius_mm(self) -> float:
        """Geometric-mean semi-axis."""
        return float(np.prod(self.semi_axes_mm) ** (1.0 / 3.0))

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "class": self.cls,
            "center_mm": list(self.center_mm),
            "semi_axes_mm": list(self.semi_axes_mm),
            "radius_mm": self.radius_mm,
        }


@dataclass(frozen=True)
class PhantomConfig:
    dims: tuple[int, int, int] = (64, 64, 64)
    spacing: float = 2.0
    num_classes: int = 6
    n_structures: tuple[int, int] = (8, 12)
    radius_mm: tuple[float, float] = (6.0, 12.0)
    max_retries: int = 500

    def validate(self) -> "PhantomConfig":
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise ValueError(f"dims must be three positive ints, got {self.dims}")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1 (class 0 is background)")
        lo, hi = self.n_structures
        if lo < 0 or hi < lo:
            raise ValueError(f"bad n_structures range {self.n_structures}")
        if lo > 0 and self.num_classes < 2:
            raise ValueError("structures need at least one foreground class")
        if not 0 < self.radius_mm[0] <= self.radius_mm[1]:
            raise ValueError(f"bad radius range {self.radius_mm}")
        if self.spacing <= 0:
            raise ValueError("spacing must be > 0")
        return self


@dataclass
class Phantom:
    intensity: np.ndarray
    labels: LabelVolume
    instances: np.ndarray  # structure id + 1 per voxel, 0 for background
    structures: list[Structure]
    spacing: tuple[float, float, float]
    seed: int

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.intensity.shape)

    def structure(self, sid: int) -> Structure:
        return self.structures[sid]


def smooth_noise(rng: np.random.Generator, dims, sigma: float) -> np.ndarray:
    """Zero-mean, unit-std Gaussian-smoothed white noise."""
    n = ndimage.gaussian_filter(rng.standard_normal(dims), sigma, mode="wrap")
    return (n - n.mean()) / (n.std() + 1e-12)


def _grid_mm(dims, spacing) -> np.ndarray:
    return np.stack(np.meshgrid(*(np.arange(n) * s for n, s in zip(dims, spacing)), indexing="ij"), axis=-1)


def generate_phantom(cfg: PhantomConfig | None = None, seed: int = 0) -> Phantom:
    cfg = (cfg or PhantomConfig()).validate()
    rng = np.random.default_rng(seed)
    dims = tuple(int(d) for d in cfg.dims)
    spacing = (float(cfg.spacing),) * 3
    extent = np.array(dims, dtype=np.float64) * cfg.spacing
    profiles = class_profiles(cfg.num_classes)

    lo, hi = cfg.n_structures
    n_struct = int(rng.integers(lo, hi + 1))
    structures: list[Structure] = []
    n_fg = cfg.num_classes - 1
    for sid in range(n_struct):
        cls = 1 + sid % n_fg if n_fg else 0
        for _ in range(cfg.max_retries):
            r = rng.uniform(*cfg.radius_mm)
            stretch = rng.uniform(0.8, 1.25, size=3)
            semi = r * stretch / np.prod(stretch) ** (1 / 3)
            margin = semi + cfg.spacing
            if np.any(2 * margin >= extent):
                continue
            center = rng.uniform(margin, extent - cfg.spacing - margin)
            clear = all(
                np.linalg.norm(center - np.array(s.center_mm)) > semi.max() + max(s.semi_axes_mm) + 2 * cfg.spacing
                for s in structures
            )
            if clear:
                structures.append(Structure(sid, cls, tuple(map(float, center)), tuple(map(float, semi))))
                break
        else:
            raise PackingError(f"could not place structure {sid} after {cfg.max_retries} tries")

    background = BACKGROUND_MEAN + BACKGROUND_STD * smooth_noise(rng, dims, 2.0)
    intensity = background.copy()
    labels = np.zeros(dims, dtype=np.uint16)
    instances = np.zeros(dims, dtype=np.int32)
    grid = _grid_mm(dims, spacing)
    for s in structures:
        prof = profiles[s.cls]
        rho = np.sqrt((((grid - np.array(s.center_mm)) / np.array(s.semi_axes_mm)) ** 2).sum(axis=-1))
        # soft surface about one voxel wide
        w = np.clip((1.0 - rho) * s.radius_mm / cfg.spacing + 0.5, 0.0, 1.0)
        texture = smooth_noise(rng, dims, 1.0)
        inner = prof.mean + prof.core * np.clip(1.0 - rho**2, 0.0, 1.0) + prof.texture * texture
        intensity = (1.0 - w) * intensity + w * inner
        inside = rho < 1.0
        labels[inside] = s.cls
        instances[inside] = s.id + 1
    return Phantom(
        intensity.astype(np.float32),
        LabelVolume(labels, cfg.num_classes, spacing),
        instances,
        structures,
        spacing,
        seed,
    )


def rotation_matrix(angles_deg: Sequence[float]) -> np.ndarray:
    """Rotation in (z, y, x) coordinates: about z, then y, then x, composed R_z @ R_y @ R_x."""
    az, ay, ax = np.deg2rad(np.asarray(angles_deg, dtype=np.float64))
    cz, sz, cy, sy, cx, sx = np.cos(az), np.sin(az), np.cos(ay), np.sin(ay), np.cos(ax), np.sin(ax)
    rz = np.array([[1, 0, 0], [0, cz, -sz], [0, sz, cz]])  # rotates the (y, x) plane
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])  # rotates the (z, x) plane
    rx = np.array([[cx, -sx, 0], [sx, cx, 0], [0, 0, 1]])  # rotates the (z, y) plane
    return rz @ ry @ rx


@dataclass(frozen=True)
class LocalDeform:
    """Smooth bump displacement in mm: a point y of the new view shows old content at
    y - disp * exp(-|y - c|^2 / (2 sigma^2))."""

    center_mm: tuple[float, float, float]
    sigma_mm: float
    disp_mm: tuple[float, float, float]

    def bump(self, y: np.ndarray) -> np.ndarray:
        r2 = ((y - np.array(self.center_mm)) ** 2).sum(axis=-1, keepdims=True)
        return np.exp(-r2 / (2 * self.sigma_mm**2))

    def backward(self, y: np.ndarray) -> np.ndarray:
        """Position in the undeformed view whose content lands at y."""
        return y - np.array(self.disp_mm) * self.bump(y)

    def forward(self, x: np.ndarray, iters: int = 100) -> np.ndarray:
        """Solve y - disp * bump(y) = x by fixed-point iteration (a contraction here)."""
        x = np.asarray(x, dtype=np.float64)
        y = x.copy()
        for _ in range(iters):
            y_next = x + np.array(self.disp_mm) * self.bump(y)
            if np.array_equal(y_next, y):
                break
            y = y_next
        return y

    def to_dict(self) -> dict:
        return {"center_mm": list(self.center_mm), "sigma_mm": self.sigma_mm, "disp_mm": list(self.disp_mm)}


@dataclass(frozen=True)
class TruthMap:
    """a -> b map in mm: b = R S (a - c) + c + t, then any local deformations in order."""

    rotation_deg: tuple[float, float, float] = (0.0, 0.0, 0.0)
    scale: tuple[float, float, float] = (1.0, 1.0, 1.0)
    translation_mm: tuple[float, float, float] = (0.0, 0.0, 0.0)
    center_mm: tuple[float, float, float] = (0.0, 0.0, 0.0)
    deforms: tuple[LocalDeform, ...] = ()

    @property
    def matrix(self) -> np.ndarray:
        return rotation_matrix(self.rotation_deg) @ np.diag(self.scale)

    def apply(self, pts_mm) -> np.ndarray:
        p = np.asarray(pts_mm, dtype=np.float64)
        c = np.array(self.center_mm)
        out = (p - c) @ self.matrix.T + c + np.array(self.translation_mm)
        for d in self.deforms:
            out = d.forward(out)
        return out

    def inverse(self, pts_mm) -> np.ndarray:
        q = np.asarray(pts_mm, dtype=np.float64)
        for d in reversed(self.deforms):
            q = d.backward(q)
        c = np.array(self.center_mm)
        return (q - c - np.array(self.translation_mm)) @ np.linalg.inv(self.matrix).T + c

    def with_deform(self, d: LocalDeform) -> "TruthMap":
        return TruthMap(self.rotation_deg, self.scale, self.translation_mm, self.center_mm, self.deforms + (d,))

    def to_dict(self) -> dict:
        return {
            "rotation_deg": list(self.rotation_deg),
            "scale": list(self.scale),
            "translation_mm": list(self.translation_mm),
            "center_mm": list(self.center_mm),
            "local_deform": [d.to_dict() for d in self.deforms],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TruthMap":
        deforms = tuple(
            LocalDeform(tuple(x["center_mm"]), float(x["sigma_mm"]), tuple(x["disp_mm"])) for x in d.get("local_deform", [])
        )
        return cls(
            tuple(d["rotation_deg"]), tuple(d["scale"]), tuple(d["translation_mm"]), tuple(d["center_mm"]), deforms
        )


@dataclass(frozen=True)
class AugmentConfig:
    max_rotation_deg: float = 15.0
    scale_range: tuple[float, float] = (0.8, 1.2)
    overlap: float = 0.5
    noise_sigma: tuple[float, float] = (0.0, 0.05)
    blur_sigma: tuple[float, float] = (0.0, 1.0)

    def validate(self) -> "AugmentConfig":
        if not 0 <= self.max_rotation_deg <= 15.0:
            raise ValueError("max_rotation_deg must lie in [0, 15]")
        lo, hi = self.scale_range
        if not 0.8 <= lo <= hi <= 1.2:
            raise ValueError("scale_range must lie within [0.8, 1.2]")
        if not 0 < self.overlap <= 1:
            raise ValueError("overlap must lie in (0, 1]")
        for name in ("noise_sigma", "blur_sigma"):
            a, b = getattr(self, name)
            if not 0 <= a <= b:
                raise ValueError(f"bad {name} range")
        return self


@dataclass(frozen=True)
class AugmentParams:
    rotation_deg: tuple[float, float, float] = (0.0, 0.0, 0.0)
    scale: tuple[float, float, float] = (1.0, 1.0, 1.0)
    translation_mm: tuple[float, float, float] = (0.0, 0.0, 0.0)
    noise_sigma: float = 0.0
    blur_sigma: float = 0.0
    noise_seed: int = 0

    def to_dict(self) -> dict:
        return {
            "rotation_deg": list(self.rotation_deg),
            "scale": list(self.scale),
            "translation_mm": list(self.translation_mm),
            "noise_sigma": self.noise_sigma,
            "blur_sigma": self.blur_sigma,
            "noise_seed": self.noise_seed,
        }


def sample_params(dims, spacing: float, cfg: AugmentConfig, seed) -> AugmentParams:
    cfg = cfg.validate()
    rng = np.random.default_rng(seed)
    extent = np.array(dims, dtype=np.float64) * spacing
    return AugmentParams(
        rotation_deg=tuple(map(float, rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg, 3))),
        scale=tuple(map(float, rng.uniform(*cfg.scale_range, 3))),
        translation_mm=tuple(map(float, rng.uniform(-1, 1, 3) * (1.0 - cfg.overlap) * extent)),
        noise_sigma=float(rng.uniform(*cfg.noise_sigma)),
        blur_sigma=float(rng.uniform(*cfg.blur_sigma)),
        noise_seed=int(rng.integers(2**31)),
    )


@dataclass
class AugmentedPair:
    view_a: np.ndarray
    view_b: np.ndarray
    labels_a: LabelVolume
    labels_b: LabelVolume
    truth: TruthMap
    overlap: np.ndarray  # bool over view_a: voxels whose image lies inside view_b
    params: AugmentParams
    phantom: Phantom
    corruptions: list[dict] = field(default_factory=list)

    @property
    def spacing(self) -> tuple[float, float, float]:
        return self.phantom.spacing

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.phantom.dims

    def truth_voxel(self, pts_vox) -> np.ndarray:
        """Truth map in voxel units."""
        sp = np.array(self.spacing)
        return self.truth.apply(np.asarray(pts_vox, dtype=np.float64) * sp) / sp

    def metadata(self) -> dict:
        return {
            "phantom_seed": self.phantom.seed,
            "params": self.params.to_dict(),
            "transform": self.truth.to_dict(),
            "corruptions": list(self.corruptions),
        }


def _finish(vol: np.ndarray, blur: float, noise: float, rng: np.random.Generator) -> np.ndarray:
    out = ndimage.gaussian_filter(vol, blur, mode="nearest") if blur > 0 else vol.astype(np.float64)
    if noise > 0:
        out = out + noise * rng.standard_normal(vol.shape)
    return out.astype(np.float32)


def _warp(vol: np.ndarray, truth: TruthMap, spacing, order: int, dims=None) -> np.ndarray:
    """Resample ``vol`` (view a) onto the view-b grid through the inverse truth map."""
    dims = dims or vol.shape
    grid = _grid_mm(dims, spacing).reshape(-1, 3)
    src = truth.inverse(grid) / np.array(spacing)
    out = ndimage.map_coordinates(vol, src.T, order=order, mode="nearest")
    return out.reshape(dims)


def overlap_mask(truth: TruthMap, dims, spacing, margin_vox: float = 0.0) -> np.ndarray:
    sp = np.array(spacing)
    grid = _grid_mm(dims, spacing).reshape(-1, 3)
    img = truth.apply(grid) / sp
    hi = np.array(dims) - 1 - margin_vox
    inside = np.all((img >= margin_vox) & (img <= hi), axis=1)
    return inside.reshape(dims)


def augment(phantom: Phantom, params: AugmentParams | None = None, seed=None, cfg: AugmentConfig | None = None) -> AugmentedPair:
    """Two views of ``phantom``: view_a unwarped, view_b resampled (trilinear)
    through the truth map. Blur and noise are applied to both views after warping."""
    if params is None:
        params = sample_params(phantom.dims, phantom.spacing[0], cfg or AugmentConfig(), seed)
    dims, spacing = phantom.dims, phantom.spacing
    center = tuple(float((n - 1) * s / 2) for n, s in zip(dims, spacing))
    truth = TruthMap(params.rotation_deg, params.scale, params.translation_mm, center)
    warped = _warp(phantom.intensity.astype(np.float64), truth, spacing, order=1)
    lab_b = _warp(phantom.labels.data, truth, spacing, order=0)
    rng = np.random.default_rng(params.noise_seed)
    view_a = _finish(phantom.intensity, params.blur_sigma, params.noise_sigma, rng)
    view_b = _finish(warped, params.blur_sigma, params.noise_sigma, rng)
    return AugmentedPair(
        view_a,
        view_b,
        phantom.labels,
        LabelVolume(lab_b, phantom.labels.num_classes, spacing),
        truth,
        overlap_mask(truth, dims, spacing),
        params,
        phantom,
    )


@dataclass(frozen=True)
class Sphere:
    """Region in voxel coordinates."""

    center: tuple[float, float, float]
    radius: float

    def mask(self, dims) -> np.ndarray:
        g = np.stack(np.meshgrid(*(np.arange(n) for n in dims), indexing="ij"), axis=-1)
        return ((g - np.array(self.center)) ** 2).sum(axis=-1) <= self.radius**2


def make_local_deform(region: Sphere, spacing, seed, strength: float = 0.5) -> LocalDeform:
    """Bump with sigma = radius/2 and displacement ``strength * sigma`` in a seeded direction.

    strength < sqrt(e) keeps the map invertible."""
    rng = np.random.default_rng(seed)
    direction = rng.standard_normal(3)
    direction /= np.linalg.norm(direction)
    sp = float(np.mean(spacing))
    sigma = region.radius * sp / 2.0
    return LocalDeform(
        tuple(float(c * s) for c, s in zip(region.center, spacing)),
        float(sigma),
        tuple(map(float, direction * strength * sigma)),
    )


def corrupt(
    volume: np.ndarray,
    mode: str,
    region: Sphere,
    seed=0,
    spacing=(2.0, 2.0, 2.0),
    gain: float = 1.5,
    background: tuple[float, float] = (BACKGROUND_MEAN, BACKGROUND_STD),
    strength: float = 0.5,
) -> np.ndarray:
    """Appearance corruption inside ``region`` (voxel-space sphere).

    ``erase-structure`` fills the region with background-like smooth noise,
    ``intensity-shift`` multiplies it by ``gain``, ``local-deform`` pushes
    content with a smooth bump (see :func:`make_local_deform`).
    """
    if mode not in CORRUPTION_MODES:
        raise ValueError(f"mode must be one of {CORRUPTION_MODES}, got {mode!r}")
    dims = volume.shape
    if not all(0 <= c <= n - 1 for c, n in zip(region.center, dims)):
        raise RegionError(f"region centre {region.center} outside volume {dims}")
    if region.radius < 0:
        raise RegionError("region radius must be >= 0")
    out = np.array(volume, dtype=np.float32, copy=True)
    if region.radius == 0:
        return out
    mask = region.mask(dims)
    rng = np.random.default_rng(seed)
    if mode == "erase-structure":
        fill = background[0] + background[1] * smooth_noise(rng, dims, 2.0)
        out[mask] = fill[mask]
    elif mode == "intensity-shift":
        out[mask] = out[mask] * np.float32(gain)
    else:
        d = make_local_deform(region, spacing, seed, strength)
        grid = _grid_mm(dims, spacing).reshape(-1, 3)
        src = d.backward(grid) / np.array(spacing)
        out = ndimage.map_coordinates(volume.astype(np.float64), src.T, order=1, mode="nearest")
        out = out.reshape(dims).astype(np.float32)
    return out


def corrupt_pair(pair: AugmentedPair, mode: str, region: Sphere, seed=0, **kw) -> AugmentedPair:
    """Corrupt view_b of ``pair``; local deformation also updates the truth map and labels."""
    spacing = pair.spacing
    view_b = corrupt(pair.view_b, mode, region, seed, spacing=spacing, **kw)
    truth, labels_b = pair.truth, pair.labels_b
    if mode == "local-deform" and region.radius > 0:
        d = make_local_deform(region, spacing, seed, kw.get("strength", 0.5))
        truth = truth.with_deform(d)
        grid = _grid_mm(pair.dims, spacing).reshape(-1, 3)
        src = d.backward(grid) / np.array(spacing)
        lab = ndimage.map_coordinates(labels_b.data, src.T, order=0, mode="nearest").reshape(pair.dims)
        labels_b = LabelVolume(lab, labels_b.num_classes, spacing)
    record = {"mode": mode, "center_vox": list(region.center), "radius_vox": region.radius, "seed": seed}
    record.update({k: v for k, v in kw.items() if k in ("gain", "strength")})
    return AugmentedPair(
        pair.view_a,
        view_b,
        pair.labels_a,
        labels_b,
        truth,
        overlap_mask(truth, pair.dims, spacing) if truth is not pair.truth else pair.overlap,
        pair.params,
        pair.phantom,
        pair.corruptions + [record],
    )


@dataclass(frozen=True)
class Correspondence:
    id: str
    template: tuple[float, float, float]
    truth_query: tuple[float, float, float]
    radius_mm: float
    tag: str

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "template": list(self.template),
            "truth_query": list(self.truth_query),
            "radius_mm": self.radius_mm,
            "tag": self.tag,
        }


@dataclass
class CorrespondenceSet:
    pairs: list[Correspondence]
    transform: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"pairs": [p.to_dict() for p in self.pairs], "transform": self.transform}

    @classmethod
    def from_dict(cls, d: dict) -> "CorrespondenceSet":
        pairs = []
        for i, p in enumerate(d["pairs"]):
            pairs.append(
                Correspondence(
                    str(p.get("id", i)),
                    tuple(float(v) for v in p["template"]),
                    tuple(float(v) for v in p["truth_query"]),
                    float(p["radius_mm"]),
                    str(p.get("tag", "")),
                )
            )
        return cls(pairs, d.get("transform", {}))


class OverlapTooSmall(ValueError):
    pass


def sample_correspondences(pair: AugmentedPair, n: int, seed=0, margin_vox: float = 2.0, prefix: str = "") -> CorrespondenceSet:
    """``n`` template voxels on structures inside the overlap, with their exact images."""
    if n < 1:
        raise ValueError("n must be >= 1")
    sp = np.array(pair.spacing)
    inner = overlap_mask(pair.truth, pair.dims, pair.spacing, margin_vox) if margin_vox else pair.overlap
    cand = np.flatnonzero((pair.phantom.instances > 0) & inner & pair.overlap)
    if len(cand) < n:
        raise OverlapTooSmall(f"only {len(cand)} structure voxels in the overlap, need {n}")
    rng = np.random.default_rng(seed)
    picks = np.sort(rng.choice(cand, size=n, replace=False))
    vox = np.stack(np.unravel_index(picks, pair.dims), axis=1).astype(np.float64)
    truth_mm = pair.truth.apply(vox * sp)
    out = []
    for k, (lin, v, q) in enumerate(zip(picks, vox, truth_mm)):
        s = pair.phantom.structures[int(pair.phantom.instances.flat[lin]) - 1]
        out.append(
            Correspondence(
                f"{prefix}{k}",
                tuple(map(float, v * sp)),
                tuple(map(float, q)),
                s.radius_mm,
                f"structure{s.id}:class{s.cls}",
            )
        )
    return CorrespondenceSet(out, pair.truth.to_dict())
