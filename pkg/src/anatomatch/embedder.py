"""Toy trainable embedder: fixed multi-scale features + linear projection heads.

Each head maps the F per-voxel features linearly to C channels, then
unit-normalizes. Heads are trained with SGD + momentum on the InfoNCE
(appearance) and prototypical SupCon (semantic) losses, backpropagating
through the normalization analytically.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from .losses import LabeledBatch, PairBatch, infonce_loss, prototypical_supcon_loss, select_hard_negatives
from .phantom import (
    AugmentConfig,
    AugmentedPair,
    PhantomConfig,
    Sphere,
    augment,
    corrupt_pair,
    generate_phantom,
    overlap_mask,
)
from .volume import EmbeddingVolume

log = logging.getLogger(__name__)

SMOOTH_SIGMAS = (1.0, 2.0, 4.0)
VARIANCE_SIGMA = 2.0
INTENSITY_OFFSET = 0.1
# fixed per-channel scales bring phantom features to roughly unit spread
_SMOOTH_SCALES = (0.16, 0.12, 0.06)
_RAW_SCALE = 0.2
_GRAD_SCALE = 0.05
_VAR_SCALE = 0.03

# soft one-hot bins (Gaussian RBF) of local intensity and local texture
INTENSITY_BINS = tuple(np.round(np.arange(0.0, 1.61, 0.2), 2))
INTENSITY_BIN_WIDTH = 0.1
TEXTURE_BINS = (0.0, 0.05, 0.1, 0.15, 0.2)
TEXTURE_BIN_WIDTH = 0.03
CONTEXT_SIGMA = 2.0  # regional pooling of the bins, in voxels

FEATURE_NAMES = (
    ["bias", "raw"]
    + [f"smooth{s:g}" for s in SMOOTH_SIGMAS]
    + [f"grad{a}_s{s:g}" for s in SMOOTH_SIGMAS for a in "zyx"]
    + ["variance"]
    + [f"ibin{b:g}" for b in INTENSITY_BINS]
    + [f"tbin{b:g}" for b in TEXTURE_BINS]
    + [f"ibin{b:g}_ctx" for b in INTENSITY_BINS]
    + [f"tbin{b:g}_ctx" for b in TEXTURE_BINS]
)
N_FEATURES = len(FEATURE_NAMES)


def clamped_gradient(v: np.ndarray, axis: int) -> np.ndarray:
    """Central difference with edge-replicated padding."""
    pad = [(0, 0)] * v.ndim
    pad[axis] = (1, 1)
    p = np.pad(v, pad, mode="edge")
    hi = [slice(None)] * v.ndim
    lo = [slice(None)] * v.ndim
    hi[axis] = slice(2, None)
    lo[axis] = slice(None, -2)
    return (p[tuple(hi)] - p[tuple(lo)]) / 2.0


def extract_features(intensity) -> np.ndarray:
    """(Z, Y, X) intensity -> (Z, Y, X, F) float64 features (see FEATURE_NAMES)."""
    x = np.asarray(intensity, dtype=np.float64)
    if x.ndim == 4:
        if x.shape[-1] != 1:
            raise ValueError("extract_features needs a single-channel volume")
        x = x[..., 0]
    if x.ndim != 3:
        raise ValueError(f"expected a 3-D volume, got shape {x.shape}")
    feats = [np.ones_like(x), (x - INTENSITY_OFFSET) / _RAW_SCALE]
    smoothed = [ndimage.gaussian_filter(x, s, mode="nearest") for s in SMOOTH_SIGMAS]
    feats += [(g - INTENSITY_OFFSET) / sc for g, sc in zip(smoothed, _SMOOTH_SCALES)]
    for s, g in zip(SMOOTH_SIGMAS, smoothed):
        feats += [s * clamped_gradient(g, ax) / _GRAD_SCALE for ax in range(3)]
    mean = ndimage.gaussian_filter(x, VARIANCE_SIGMA, mode="nearest")
    sq = ndimage.gaussian_filter(x * x, VARIANCE_SIGMA, mode="nearest")
    var = np.maximum(sq - mean * mean, 0.0)
    feats.append(var / _VAR_SCALE)
    feats += [np.exp(-0.5 * ((smoothed[0] - b) / INTENSITY_BIN_WIDTH) ** 2) for b in INTENSITY_BINS]
    std = np.sqrt(var)
    feats += [np.exp(-0.5 * ((std - b) / TEXTURE_BIN_WIDTH) ** 2) for b in TEXTURE_BINS]
    n_bins = len(INTENSITY_BINS) + len(TEXTURE_BINS)
    feats += [ndimage.gaussian_filter(f, CONTEXT_SIGMA, mode="nearest") for f in feats[-n_bins:]]
    return np.stack(feats, axis=-1)


@dataclass
class ProjectionHead:
    weights: np.ndarray  # (C, F)
    name: str = "appearance"

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.ndim != 2:
            raise ValueError("head weights must be (C, F)")
        if not np.all(np.isfinite(self.weights)):
            raise ValueError("head weights must be finite")
        if self.name not in ("appearance", "semantic"):
            raise ValueError(f"unknown head {self.name!r}")

    @classmethod
    def random(cls, channels: int, n_features: int, name: str, rng: np.random.Generator) -> "ProjectionHead":
        return cls(rng.standard_normal((channels, n_features)) / np.sqrt(n_features), name)

    def project(self, feats: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Rows of features -> (unit embeddings, pre-normalization norms)."""
        z = feats @ self.weights.T
        norms = np.linalg.norm(z, axis=-1, keepdims=True)
        safe = np.where(norms > 0, norms, 1.0)
        e = z / safe
        if np.any(norms == 0):
            e = np.where(norms > 0, e, np.eye(1, z.shape[-1]))
        return e, safe

    def backprop(self, feats: np.ndarray, emb: np.ndarray, norms: np.ndarray, grad_emb: np.ndarray) -> np.ndarray:
        """dL/dW given dL/d(embedding) for rows produced by :meth:`project`."""
        radial = (grad_emb * emb).sum(axis=-1, keepdims=True)
        grad_z = (grad_emb - emb * radial) / norms
        return grad_z.T @ feats


def embed(features: np.ndarray, head: ProjectionHead, spacing=(2.0, 2.0, 2.0)) -> EmbeddingVolume:
    f = np.asarray(features, dtype=np.float64)
    if f.shape[-1] != head.weights.shape[1]:
        raise ValueError(f"features have {f.shape[-1]} channels, head expects {head.weights.shape[1]}")
    e, _ = head.project(f.reshape(-1, f.shape[-1]))
    return EmbeddingVolume(e.reshape(*f.shape[:3], -1), spacing, normalized=True)


@dataclass
class TrainConfig:
    lr: float = 0.02
    momentum: float = 0.9
    batch_size: int = 5
    steps: int = 500
    tau_app: float = 0.5
    tau_sem: float = 0.5
    channels: int = 16
    n_pos: int = 32
    n_hard: int = 8
    n_random: int = 8
    n_candidates: int = 128
    n_per_class: int = 16
    exclusion_vox: float = 3.0
    pool_size: int = 8
    contrast_prob: float = 0.0
    contrast_gain: tuple[float, float] = (0.6, 1.6)
    seed: int = 0
    phantom: PhantomConfig = field(default_factory=lambda: PhantomConfig(dims=(40, 40, 40), n_structures=(6, 8)))
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def validate(self) -> "TrainConfig":
        if self.lr < 0 or not 0 <= self.momentum < 1:
            raise ValueError("lr must be >= 0 and momentum in [0, 1)")
        for name in ("batch_size", "channels", "n_pos", "n_candidates", "n_per_class", "pool_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.steps < 0 or self.n_hard < 0 or self.n_random < 0:
            raise ValueError("steps, n_hard, n_random must be >= 0")
        if self.n_hard + self.n_random > self.n_candidates:
            raise ValueError("n_hard + n_random exceeds n_candidates")
        if self.tau_app <= 0 or self.tau_sem <= 0:
            raise ValueError("temperatures must be > 0")
        if not 0 <= self.contrast_prob <= 1 or not 0 < self.contrast_gain[0] <= self.contrast_gain[1]:
            raise ValueError("contrast_prob must lie in [0, 1] and contrast_gain be a positive range")
        self.phantom.validate()
        self.augment.validate()
        return self

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class PoolEntry:
    pair: AugmentedPair
    feats_a: np.ndarray
    feats_b: np.ndarray
    anchors: np.ndarray  # linear indices in view_a usable as positives


def jitter_contrast(pair: AugmentedPair, cfg: TrainConfig, rng: np.random.Generator) -> AugmentedPair:
    """Random per-structure gain on view_b; labels stay, so semantics must ignore contrast."""
    sp = np.array(pair.spacing)
    for s in pair.phantom.structures:
        if rng.uniform() >= cfg.contrast_prob:
            continue
        center = np.clip(pair.truth.apply(np.array(s.center_mm)) / sp, 0, np.array(pair.dims) - 1)
        region = Sphere(tuple(map(float, center)), 1.2 * s.radius_mm / sp.mean())
        gain = float(rng.uniform(*cfg.contrast_gain))
        pair = corrupt_pair(pair, "intensity-shift", region, seed=0, gain=gain)
    return pair


def build_pool(cfg: TrainConfig) -> list[PoolEntry]:
    pool = []
    rng = np.random.default_rng(cfg.seed)
    for _ in range(cfg.pool_size):
        ph = generate_phantom(cfg.phantom, int(rng.integers(2**31)))
        pair = augment(ph, seed=int(rng.integers(2**31)), cfg=cfg.augment)
        pair = jitter_contrast(pair, cfg, rng)
        inner = overlap_mask(pair.truth, pair.dims, pair.spacing, margin_vox=1.0)
        anchors = np.flatnonzero(inner)
        if len(anchors) == 0:
            continue
        pool.append(
            PoolEntry(
                pair,
                extract_features(pair.view_a).astype(np.float32),
                extract_features(pair.view_b).astype(np.float32),
                anchors,
            )
        )
    if not pool:
        raise ValueError("no training pair has a usable overlap")
    return pool


def trilinear(feats: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Sample (Z, Y, X, F) at real voxel coordinates (n, 3), clamped to the grid."""
    dims = np.array(feats.shape[:3])
    p = np.clip(pts, 0, dims - 1)
    base = np.minimum(np.floor(p).astype(np.int64), dims - 2).clip(min=0)
    frac = p - base
    out = np.zeros((len(p), feats.shape[3]))
    for corner in np.ndindex(2, 2, 2):
        c = np.array(corner)
        idx = np.minimum(base + c, dims - 1)
        w = np.prod(np.where(c == 1, frac, 1.0 - frac), axis=1)
        out += w[:, None] * feats[idx[:, 0], idx[:, 1], idx[:, 2]]
    return out


def sample_raw(entry: PoolEntry, app: ProjectionHead, cfg: TrainConfig, seed) -> dict:
    """Feature rows from one pair: positives (view_a voxel, exact image in view_b),
    negative candidates from both views with per-anchor hard/random selection,
    and class-balanced labeled voxels from both views."""
    rng = np.random.default_rng(seed)
    pair = entry.pair
    dims = pair.dims
    pa_lin = rng.choice(entry.anchors, size=cfg.n_pos, replace=len(entry.anchors) < cfg.n_pos)
    pa = np.stack(np.unravel_index(pa_lin, dims), axis=1).astype(np.float64)
    pb = pair.truth_voxel(pa)

    fa = entry.feats_a.reshape(-1, entry.feats_a.shape[-1])[pa_lin].astype(np.float64)
    fb = trilinear(entry.feats_b, pb)

    half = cfg.n_candidates // 2
    n_vox = int(np.prod(dims))
    cand_a = rng.integers(0, n_vox, size=half)
    cand_b = rng.integers(0, n_vox, size=cfg.n_candidates - half)
    cpos_a = np.stack(np.unravel_index(cand_a, dims), axis=1)
    cpos_b = np.stack(np.unravel_index(cand_b, dims), axis=1)
    fc = np.concatenate(
        [
            entry.feats_a.reshape(-1, entry.feats_a.shape[-1])[cand_a],
            entry.feats_b.reshape(-1, entry.feats_b.shape[-1])[cand_b],
        ]
    ).astype(np.float64)
    ec, _ = app.project(fc)
    ea, _ = app.project(fa)
    n_neg = cfg.n_hard + cfg.n_random
    neg_index = np.zeros((cfg.n_pos, n_neg), dtype=np.intp)
    for i in range(cfg.n_pos):
        far_a = np.linalg.norm(cpos_a - pa[i], axis=1) >= cfg.exclusion_vox
        far_b = np.linalg.norm(cpos_b - pb[i], axis=1) >= cfg.exclusion_vox
        allowed = np.flatnonzero(np.concatenate([far_a, far_b]))
        if len(allowed) < n_neg:
            allowed = np.arange(cfg.n_candidates)
        pick = select_hard_negatives(ea[i], ec[allowed], cfg.n_hard, cfg.n_random, int(rng.integers(2**31)))
        neg_index[i] = allowed[pick]

    labels = []
    lab_feats = []
    for view, feats in ((pair.labels_a.data, entry.feats_a), (pair.labels_b.data, entry.feats_b)):
        flat_lab = view.ravel()
        flat_feat = feats.reshape(-1, feats.shape[-1])
        for c in np.unique(flat_lab):
            members = np.flatnonzero(flat_lab == c)
            take = rng.choice(members, size=cfg.n_per_class, replace=len(members) < cfg.n_per_class)
            labels.append(np.full(cfg.n_per_class, c))
            lab_feats.append(flat_feat[take].astype(np.float64))
    return {
        "pa": pa,
        "pb": pb,
        "fa": fa,
        "fb": fb,
        "fc": fc,
        "neg_index": neg_index,
        "labels": np.concatenate(labels),
        "fl": np.concatenate(lab_feats),
    }


def sample_training_batch(
    entry: PoolEntry, app: ProjectionHead, sem: ProjectionHead, cfg: TrainConfig, seed
) -> tuple[PairBatch, LabeledBatch, dict]:
    raw = sample_raw(entry, app, cfg, seed)
    ea, _ = app.project(raw["fa"])
    eb, _ = app.project(raw["fb"])
    ec, _ = app.project(raw["fc"])
    _, labels = np.unique(raw["labels"], return_inverse=True)
    el, _ = sem.project(raw["fl"])
    pairs = PairBatch(ea, eb, ec[raw["neg_index"]], cfg.tau_app)
    return pairs, LabeledBatch(el, labels, tau=cfg.tau_sem), raw


def _merge(samples: list[dict]) -> dict:
    out = {k: np.concatenate([s[k] for s in samples]) for k in ("fa", "fb", "fl", "labels")}
    offsets = np.cumsum([0] + [len(s["fc"]) for s in samples[:-1]])
    out["fc"] = np.concatenate([s["fc"] for s in samples])
    out["neg_index"] = np.concatenate([s["neg_index"] + o for s, o in zip(samples, offsets)])
    return out


def loss_and_grads(app: ProjectionHead, sem: ProjectionHead, batch: dict, cfg: TrainConfig):
    """Combined loss (mean InfoNCE per anchor + prototypical SupCon) and head gradients."""
    ea, na = app.project(batch["fa"])
    eb, nb = app.project(batch["fb"])
    ec, nc = app.project(batch["fc"])
    neg = ec[batch["neg_index"]]
    l_app, g = infonce_loss(PairBatch(ea, eb, neg, cfg.tau_app))
    n_anchor = len(ea)
    l_app /= n_anchor
    g_c = np.zeros_like(ec)
    np.add.at(g_c, batch["neg_index"].ravel(), g["negatives"].reshape(-1, ec.shape[1]))
    grad_app = (
        app.backprop(batch["fa"], ea, na, g["pos_a"])
        + app.backprop(batch["fb"], eb, nb, g["pos_b"])
        + app.backprop(batch["fc"], ec, nc, g_c)
    ) / n_anchor

    _, labels = np.unique(batch["labels"], return_inverse=True)
    el, nl = sem.project(batch["fl"])
    l_sem, g_l = prototypical_supcon_loss(LabeledBatch(el, labels, tau=cfg.tau_sem))
    grad_sem = sem.backprop(batch["fl"], el, nl, g_l)
    return l_app, l_sem, grad_app, grad_sem


class Divergence(FloatingPointError):
    def __init__(self, msg, history):
        super().__init__(msg)
        self.history = history


@dataclass
class TrainResult:
    appearance: ProjectionHead
    semantic: ProjectionHead
    history: list[dict]


def init_heads(cfg: TrainConfig) -> tuple[ProjectionHead, ProjectionHead]:
    rng = np.random.default_rng([cfg.seed, 1])
    return (
        ProjectionHead.random(cfg.channels, N_FEATURES, "appearance", rng),
        ProjectionHead.random(cfg.channels, N_FEATURES, "semantic", rng),
    )


def train(cfg: TrainConfig | None = None, pool: list[PoolEntry] | None = None) -> TrainResult:
    """SGD with momentum (v <- mu v - lr grad; w <- w + v) on L_app + L_sem."""
    cfg = (cfg or TrainConfig()).validate()
    pool = pool if pool is not None else build_pool(cfg)
    app, sem = init_heads(cfg)
    v_app = np.zeros_like(app.weights)
    v_sem = np.zeros_like(sem.weights)
    rng = np.random.default_rng([cfg.seed, 2])
    history = []
    for step in range(cfg.steps):
        picks = rng.choice(len(pool), size=cfg.batch_size, replace=len(pool) < cfg.batch_size)
        samples = [sample_raw(pool[i], app, cfg, int(rng.integers(2**31))) for i in picks]
        l_app, l_sem, g_app, g_sem = loss_and_grads(app, sem, _merge(samples), cfg)
        total = l_app + l_sem
        history.append({"step": step, "loss": total, "loss_app": l_app, "loss_sem": l_sem})
        if not np.isfinite(total):
            raise Divergence(f"non-finite loss at step {step}", history)
        v_app = cfg.momentum * v_app - cfg.lr * g_app
        v_sem = cfg.momentum * v_sem - cfg.lr * g_sem
        app = ProjectionHead(app.weights + v_app, "appearance")
        sem = ProjectionHead(sem.weights + v_sem, "semantic")
        if step % 50 == 0:
            log.info("step %d loss %.4f (app %.4f, sem %.4f)", step, total, l_app, l_sem)
    return TrainResult(app, sem, history)
