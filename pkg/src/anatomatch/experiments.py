"""Seeded experiments: the four-row matching ablation and the loss-check harness."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .embedder import ProjectionHead, TrainConfig, embed, extract_features, train
from .fixedpoint import MatcherConfig, match
from .losses import (
    LabeledBatch,
    PairBatch,
    SimilarityCounter,
    infonce_loss,
    prototypical_supcon_loss,
    supcon_reference_loss,
)
from .parallel import ordered_map
from .metrics import EvalRecord, EvalSummary, format_table, summarize
from .phantom import (
    CORRUPTION_MODES,
    AugmentConfig,
    AugmentedPair,
    PhantomConfig,
    Sphere,
    augment,
    corrupt_pair,
    generate_phantom,
    sample_correspondences,
)
from .volume import EmbeddingVolume, concat_unified

log = logging.getLogger(__name__)

ROWS = (
    ("nn", "nn", False),
    ("nn+semantic", "nn", True),
    ("fixedpoint", "fixedpoint", False),
    ("fixedpoint+semantic", "fixedpoint", True),
)


@dataclass
class AblationConfig:
    seed: int = 0
    n_pairs: int = 24
    points_per_pair: int = 12
    lam: float = 0.5
    corruptions: tuple[str, ...] = CORRUPTION_MODES
    corruptions_per_pair: int = 2
    matcher: MatcherConfig = field(default_factory=MatcherConfig)
    phantom: PhantomConfig = field(default_factory=lambda: PhantomConfig(dims=(40, 40, 40), n_structures=(6, 8)))
    augment: AugmentConfig = field(default_factory=lambda: AugmentConfig(overlap=0.85, max_rotation_deg=10.0, scale_range=(0.9, 1.1), noise_sigma=(0.0, 0.02), blur_sigma=(0.0, 0.5)))
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self) -> "AblationConfig":
        if self.n_pairs < 1 or self.points_per_pair < 1:
            raise ValueError("n_pairs and points_per_pair must be >= 1")
        if not 0 < self.lam < 1:
            raise ValueError("lam must lie in (0, 1)")
        bad = [c for c in self.corruptions if c not in CORRUPTION_MODES]
        if bad:
            raise ValueError(f"unknown corruption modes {bad}")
        if self.corruptions_per_pair < 0:
            raise ValueError("corruptions_per_pair must be >= 0")
        self.matcher.validate()
        self.phantom.validate()
        self.augment.validate()
        self.train.validate()
        return self


def eval_pair(cfg: AblationConfig, index: int) -> tuple[AugmentedPair, list]:
    """Seeded evaluation pair with view_b corruptions on randomly chosen structures."""
    rng = np.random.default_rng([cfg.seed, 100, index])
    ph = generate_phantom(cfg.phantom, int(rng.integers(2**31)))
    pair = augment(ph, seed=int(rng.integers(2**31)), cfg=cfg.augment)
    sp = np.array(pair.spacing)
    if cfg.corruptions and cfg.corruptions_per_pair and ph.structures:
        k = min(cfg.corruptions_per_pair, len(ph.structures))
        chosen = rng.choice(len(ph.structures), size=k, replace=False)
        for sid in sorted(int(s) for s in chosen):
            s = ph.structures[sid]
            mode = cfg.corruptions[int(rng.integers(len(cfg.corruptions)))]
            center = pair.truth.apply(np.array(s.center_mm)) / sp
            center = np.clip(center, 0, np.array(pair.dims) - 1)
            region = Sphere(tuple(map(float, center)), 1.2 * s.radius_mm / sp.mean())
            pair = corrupt_pair(pair, mode, region, seed=int(rng.integers(2**31)))
    corr = sample_correspondences(pair, cfg.points_per_pair, seed=int(rng.integers(2**31)), prefix=f"p{index}-")
    return pair, corr.pairs


def pair_embeddings(pair: AugmentedPair, app: ProjectionHead, sem: ProjectionHead, lam: float):
    fa, fb = extract_features(pair.view_a), extract_features(pair.view_b)
    sp = pair.spacing
    app_a, app_b = embed(fa, app, sp), embed(fb, app, sp)
    sem_a, sem_b = embed(fa, sem, sp), embed(fb, sem, sp)
    return {
        False: (app_a, app_b),
        True: (concat_unified(app_a, sem_a, lam), concat_unified(app_b, sem_b, lam)),
    }


def match_records(
    xa: EmbeddingVolume, xb: EmbeddingVolume, corr, mcfg: MatcherConfig, tag: str, methods: dict | None = None
) -> list[EvalRecord]:
    """Match every template point of ``corr``; ``methods`` (if given) counts result methods."""
    sp = np.array(xa.spacing)
    out = []
    for c in corr:
        t = tuple(int(v) for v in np.rint(np.array(c.template) / sp))
        res = match(t, xa, xb, mcfg)
        if methods is not None:
            methods[res.method] = methods.get(res.method, 0) + 1
        out.append(EvalRecord(c.id, tuple(res.query_phys), c.truth_query, c.radius_mm, tag))
    return out


@dataclass
class AblationReport:
    rows: list[tuple[str, EvalSummary]]
    n_pairs: int
    train_loss: tuple[float, float] | None = None
    methods: dict[str, dict[str, int]] = field(default_factory=dict)  # row -> result method -> count

    def to_dict(self) -> dict:
        return {
            "rows": [{"name": n, **s.to_dict()} for n, s in self.rows],
            "n_correspondences": self.n_pairs,
            "train_loss_first_last": list(self.train_loss) if self.train_loss else None,
            "methods": {k: dict(sorted(v.items())) for k, v in self.methods.items()},
        }

    def table(self) -> str:
        return format_table(self.rows)

    def summary(self, name: str) -> EvalSummary:
        return dict(self.rows)[name]


def run_ablation(cfg: AblationConfig, heads: tuple[ProjectionHead, ProjectionHead] | None = None) -> AblationReport:
    cfg.validate()
    train_loss = None
    if heads is None:
        result = train(cfg.train)
        heads = (result.appearance, result.semantic)
        if result.history:
            train_loss = (result.history[0]["loss"], result.history[-1]["loss"])
    app, sem = heads

    def one_pair(i: int):
        pair, corr = eval_pair(cfg, i)
        emb = pair_embeddings(pair, app, sem, cfg.lam)
        recs, meth = {}, {}
        for name, mode, semantic in ROWS:
            mcfg = MatcherConfig(**{**asdict(cfg.matcher), "mode": mode})
            meth[name] = {}
            recs[name] = match_records(*emb[semantic], corr, mcfg, name, meth[name])
        log.info("pair %d/%d done", i + 1, cfg.n_pairs)
        return recs, meth

    records: dict[str, list[EvalRecord]] = {name: [] for name, _, _ in ROWS}
    methods: dict[str, dict[str, int]] = {name: {} for name, _, _ in ROWS}
    for recs, meth in ordered_map(one_pair, range(cfg.n_pairs)):
        for name in records:
            records[name] += recs[name]
            for k, v in meth[name].items():
                methods[name][k] = methods[name].get(k, 0) + v
    rows = [(name, summarize(records[name])) for name, _, _ in ROWS]
    return AblationReport(rows, len(records["nn"]), train_loss, methods)


def semantic_separation(sem: ProjectionHead, phantoms) -> tuple[float, float]:
    """Mean similarity of labeled voxels to their own class prototype and to the
    other classes' prototypes, pooled over ``phantoms``."""
    within, between = [], []
    for ph in phantoms:
        e = embed(extract_features(ph.intensity), sem).data.reshape(-1, sem.weights.shape[0]).astype(np.float64)
        y = ph.labels.data.ravel()
        classes = np.unique(y)
        protos = np.stack([e[y == c].mean(axis=0) for c in classes])
        sims = e @ protos.T
        own = np.searchsorted(classes, y)
        mask = np.zeros_like(sims, dtype=bool)
        mask[np.arange(len(y)), own] = True
        within.append(sims[mask])
        if len(classes) > 1:
            between.append(sims[~mask])
    if not between:
        raise ValueError("need at least two classes to measure separation")
    return float(np.concatenate(within).mean()), float(np.concatenate(between).mean())


# ---------------------------------------------------------------- loss checks


def _unit(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def _rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    return float(np.abs(analytic - numeric).max() / max(np.abs(numeric).max(), 1e-12))


def _central_diff(fn, x: np.ndarray, eps: float) -> np.ndarray:
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for k in range(flat.size):
        keep = flat[k]
        flat[k] = keep + eps
        hi = fn()
        flat[k] = keep - eps
        lo = fn()
        flat[k] = keep
        gflat[k] = (hi - lo) / (2 * eps)
    return g


def infonce_fd_error(rng: np.random.Generator, n_pos=4, n_neg=8, c=16, eps=1e-5, perturb=0.0) -> float:
    a, b = _unit(rng.standard_normal((n_pos, c))), _unit(rng.standard_normal((n_pos, c)))
    neg = _unit(rng.standard_normal((n_pos, n_neg, c)))
    _, g = infonce_loss(PairBatch(a, b, neg))
    worst = 0.0
    for name, arr in (("pos_a", a), ("pos_b", b), ("negatives", neg)):
        num = _central_diff(lambda: infonce_loss(PairBatch(a, b, neg))[0], arr, eps)
        worst = max(worst, _rel_err(g[name] * (1 + perturb), num))
    return worst


def supcon_fd_error(rng: np.random.Generator, n=12, k=3, c=8, eps=1e-5, perturb=0.0) -> float:
    x = _unit(rng.standard_normal((n, c)))
    y = np.concatenate([np.arange(k), rng.integers(0, k, n - k)])
    _, g = prototypical_supcon_loss(LabeledBatch(x, y, k))
    num = _central_diff(lambda: prototypical_supcon_loss(LabeledBatch(x, y, k))[0], x, eps)
    return _rel_err(g * (1 + perturb), num)


def complexity_table(ns=(32, 64, 128), k=4, c=8, seed=0) -> list[dict]:
    rng = np.random.default_rng(seed)
    rows = []
    for n in ns:
        x = _unit(rng.standard_normal((n, c)))
        y = np.arange(n) % k
        batch = LabeledBatch(x, y, k)
        proto, ref = SimilarityCounter(), SimilarityCounter()
        prototypical_supcon_loss(batch, proto)
        supcon_reference_loss(batch, ref)
        rows.append({"n": n, "K": k, "prototypical": proto.count, "n*K": n * k, "reference": ref.count, "n*(n-1)": n * (n - 1)})
    return rows


def loss_check(seed: int = 0, n_batches: int = 100, tol: float = 1e-4, inject_error: bool = False) -> dict:
    """Finite-difference and closed-form checks of both losses; returns a JSON-able report."""
    perturb = 1e-2 if inject_error else 0.0
    rng = np.random.default_rng(seed)
    inf_err = max(infonce_fd_error(rng, perturb=perturb) for _ in range(n_batches))
    sup_err = max(supcon_fd_error(rng, perturb=perturb) for _ in range(n_batches))

    e1 = np.eye(1, 4)
    sym, _ = infonce_loss(PairBatch(e1, e1, e1[:, None, :]))
    closed = {"infonce_symmetric": (sym, float(np.log(2)))}
    for n in (1, 2, 10):
        v, _ = prototypical_supcon_loss(LabeledBatch(np.repeat(e1, n, axis=0), np.zeros(n, dtype=int)))
        closed[f"supcon_identical_n{n}"] = (v, float(np.log(n)))

    table = complexity_table()
    checks = [
        {"name": "infonce_gradient_fd", "value": inf_err, "tolerance": tol, "pass": inf_err < tol},
        {"name": "prototypical_supcon_gradient_fd", "value": sup_err, "tolerance": tol, "pass": sup_err < tol},
    ]
    for name, (got, want) in closed.items():
        checks.append({"name": name, "value": got, "expected": want, "tolerance": 1e-9, "pass": abs(got - want) <= 1e-9})
    checks.append(
        {
            "name": "similarity_counts",
            "pass": all(r["prototypical"] == r["n*K"] and r["reference"] == r["n*(n-1)"] for r in table),
        }
    )
    return {"seed": seed, "n_batches": n_batches, "checks": checks, "complexity": table, "pass": all(c["pass"] for c in checks)}
