"""Command-line entry point.

Output bytes depend only on the command's inputs (config, seed, files). Reports
go to stdout as canonical JSON; human-readable tables go to stderr. Output
directories must already exist.

Exit codes: 0 success, 2 usage, 3 validation, 4 I/O, 5 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io as _io
import logging
import os
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import io as vio
from .config import ConfigError, dumps, from_dict, load_json
from .embedder import N_FEATURES, ProjectionHead, TrainConfig, embed, extract_features, train
from .experiments import AblationConfig, loss_check, run_ablation
from .fixedpoint import MODES, MatcherConfig, match
from .metrics import EvalRecord, format_table, summarize
from .parallel import set_workers
from .phantom import (
    CORRUPTION_MODES,
    AugmentConfig,
    CorrespondenceSet,
    PackingError,
    PhantomConfig,
    Sphere,
    TruthMap,
    augment,
    corrupt,
    generate_phantom,
    make_local_deform,
    sample_correspondences,
)
from .volume import EmbeddingVolume

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4, 5
SEED_ENV = "ANATOMATCH_SEED"

log = logging.getLogger("anatomatch")


@dataclass
class PairSpec:
    """Config file accepted by ``phantom pair``."""

    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    n_points: int = 32

    def validate(self) -> "PairSpec":
        if self.n_points < 1:
            raise ValueError("n_points must be >= 1")
        return self


# ------------------------------------------------------------------ helpers


def _triple(text: str, kind=int) -> tuple:
    parts = text.split(",")
    try:
        vals = tuple(kind(p) for p in parts)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected three comma-separated numbers, got {text!r}")
    if len(vals) != 3:
        raise argparse.ArgumentTypeError(f"expected three comma-separated numbers, got {text!r}")
    return vals


def parse_point(text: str) -> tuple[int, int, int]:
    """'z,y,x' voxel coordinates."""
    return _triple(text, int)


def _positive_int(text: str) -> int:
    try:
        n = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}")
    if n < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {n}")
    return n


def env_seed(default: int) -> int:
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw == "":
        return default
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"{SEED_ENV} must be an integer, got {raw!r}")


def _out_dir(path) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise FileNotFoundError(f"output directory {p} does not exist")
    return p


def _write(path: Path, data: bytes | str, manifest: dict) -> None:
    raw = data.encode() if isinstance(data, str) else data
    path.write_bytes(raw)
    manifest[path.name] = hashlib.sha256(raw).hexdigest()


def _emit(obj) -> None:
    sys.stdout.write(dumps(obj))


def _read_embedding(path) -> EmbeddingVolume:
    vol = vio.read_volume(path)
    if not isinstance(vol, EmbeddingVolume):
        raise ConfigError(f"{path}: expected an AEV embedding volume, found labels")
    return vol


def _intensity(vol: EmbeddingVolume) -> np.ndarray:
    if vol.channels != 1:
        raise ConfigError(f"intensity volume must have 1 channel, got {vol.channels}")
    return vol.data[..., 0]


def _intensity_volume(x: np.ndarray, spacing) -> EmbeddingVolume:
    return EmbeddingVolume(np.asarray(x, dtype=np.float32)[..., None], spacing)


# ------------------------------------------------------------------ phantom


def cmd_phantom_gen(args) -> int:
    cfg = from_dict(PhantomConfig, load_json(args.config)) if args.config else PhantomConfig()
    if args.dims:
        cfg = from_dict(PhantomConfig, {**asdict(cfg), "dims": list(args.dims)})
    seed = env_seed(args.seed)
    out = _out_dir(args.out)
    ph = generate_phantom(cfg, seed)
    files: dict[str, str] = {}
    _write(out / "intensity.aev", vio.encode_embedding(_intensity_volume(ph.intensity, ph.spacing)), files)
    _write(out / "labels.alv", vio.encode_labels(ph.labels), files)
    meta = {"seed": seed, "config": asdict(cfg), "structures": [s.to_dict() for s in ph.structures]}
    _write(out / "phantom.json", dumps(meta), files)
    _emit({"command": "phantom gen", "seed": seed, "files": files})
    return EXIT_OK


def cmd_phantom_pair(args) -> int:
    spec = from_dict(PairSpec, load_json(args.config)) if args.config else PairSpec()
    if args.dims:
        spec.phantom = from_dict(PhantomConfig, {**asdict(spec.phantom), "dims": list(args.dims)})
    if args.n_points is not None:
        spec.n_points = args.n_points
        spec.validate()
    seed = env_seed(args.seed)
    out = _out_dir(args.out)
    rng = np.random.default_rng([seed, 7])
    ph = generate_phantom(spec.phantom, int(rng.integers(2**31)))
    pair = augment(ph, seed=int(rng.integers(2**31)), cfg=spec.augment)
    corr = sample_correspondences(pair, spec.n_points, seed=int(rng.integers(2**31)))
    files: dict[str, str] = {}
    sp = pair.spacing
    _write(out / "view_a.aev", vio.encode_embedding(_intensity_volume(pair.view_a, sp)), files)
    _write(out / "view_b.aev", vio.encode_embedding(_intensity_volume(pair.view_b, sp)), files)
    _write(out / "labels_a.alv", vio.encode_labels(pair.labels_a), files)
    _write(out / "labels_b.alv", vio.encode_labels(pair.labels_b), files)
    _write(out / "truth.json", dumps(pair.truth.to_dict()), files)
    _write(out / "correspondences.json", dumps(corr.to_dict()), files)
    _emit({"command": "phantom pair", "seed": seed, "metadata": pair.metadata(), "files": files})
    return EXIT_OK


def cmd_phantom_corrupt(args) -> int:
    vol = _read_embedding(args.input)
    x = _intensity(vol)
    truth = TruthMap.from_dict(load_json(args.truth)) if args.truth else None
    if args.truth_out and truth is None:
        raise ConfigError("--truth-out needs --truth")
    out_path = Path(args.out)
    if not out_path.parent.is_dir():
        raise FileNotFoundError(f"output directory {out_path.parent} does not exist")
    seed = env_seed(args.seed)
    region = Sphere(tuple(float(c) for c in args.center), float(args.radius))
    result = corrupt(x, args.mode, region, seed, spacing=vol.spacing, gain=args.gain, strength=args.strength)
    files: dict[str, str] = {}
    _write(out_path, vio.encode_embedding(_intensity_volume(result, vol.spacing)), files)
    record = {"mode": args.mode, "center_vox": list(region.center), "radius_vox": region.radius, "seed": seed}
    if args.truth_out:
        if args.mode == "local-deform" and region.radius > 0:
            truth = truth.with_deform(make_local_deform(region, vol.spacing, seed, args.strength))
        _write(Path(args.truth_out), dumps(truth.to_dict()), files)
    _emit({"command": "phantom corrupt", "corruption": record, "files": files})
    return EXIT_OK


# ------------------------------------------------------------------ embed / match / eval


def cmd_embed(args) -> int:
    vol = _read_embedding(args.input)
    x = _intensity(vol)
    weights, name = vio.read_head(args.head)
    if weights.shape[1] != N_FEATURES:
        raise ConfigError(f"head expects {weights.shape[1]} features, extractor gives {N_FEATURES}")
    out_path = Path(args.out)
    if not out_path.parent.is_dir():
        raise FileNotFoundError(f"output directory {out_path.parent} does not exist")
    emb = embed(extract_features(x), ProjectionHead(weights, name), vol.spacing)
    files: dict[str, str] = {}
    _write(out_path, vio.encode_embedding(emb), files)
    _emit({"command": "embed", "head": name, "channels": emb.channels, "files": files})
    return EXIT_OK


def _matcher(args) -> MatcherConfig:
    base = from_dict(MatcherConfig, load_json(args.matcher_config)) if args.matcher_config else MatcherConfig()
    over = {"mode": args.mode, "cube": args.cube, "tau_dis": args.tau_dis, "max_iter": args.max_iter, "min_points": args.min_points}
    return from_dict(MatcherConfig, {**asdict(base), **{k: v for k, v in over.items() if v is not None}})


def cmd_match(args) -> int:
    cfg = _matcher(args)
    if (args.point is None) == (args.correspondences is None):
        raise ConfigError("give exactly one of --point or --correspondences")
    corr = CorrespondenceSet.from_dict(load_json(args.correspondences)) if args.correspondences else None
    xa, xb = _read_embedding(args.template), _read_embedding(args.query)
    if args.point is not None:
        res = match(args.point, xa, xb, cfg, keep_traces=args.traces)
        report = {"command": "match", "config": asdict(cfg), "result": res.to_dict()}
    else:
        sp = np.array(xa.spacing)
        preds = []
        for c in corr.pairs:
            t = tuple(int(v) for v in np.rint(np.array(c.template) / sp))
            res = match(t, xa, xb, cfg)
            preds.append({"id": c.id, "query_mm": list(res.query_phys), "query_voxel": list(res.query_voxel), "method": res.method})
        report = {"command": "match", "config": asdict(cfg), "predictions": preds}
    text = dumps(report)
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def _load_predictions(path) -> dict[str, tuple[float, float, float]]:
    data = load_json(path)
    preds = data.get("predictions")
    if not isinstance(preds, list):
        raise ConfigError(f"{path}: missing 'predictions' list")
    out = {}
    for p in preds:
        try:
            pid, q = str(p["id"]), tuple(float(v) for v in p["query_mm"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"{path}: malformed prediction {p!r}") from exc
        if len(q) != 3:
            raise ConfigError(f"{path}: prediction {pid} needs 3 coordinates")
        if pid in out:
            raise ConfigError(f"{path}: duplicate prediction id {pid}")
        out[pid] = q
    return out


def eval_records(preds: dict, corr: CorrespondenceSet, method: str = "") -> list[EvalRecord]:
    """Pair predictions with truth by id; the two id sets must be identical."""
    truth_ids = [c.id for c in corr.pairs]
    if len(set(truth_ids)) != len(truth_ids):
        raise ConfigError("truth file has duplicate ids")
    missing, extra = sorted(set(truth_ids) - set(preds)), sorted(set(preds) - set(truth_ids))
    if missing or extra:
        raise ConfigError(f"prediction ids do not match truth ids (missing {missing[:5]}, unexpected {extra[:5]})")
    return [EvalRecord(c.id, preds[c.id], c.truth_query, c.radius_mm, method) for c in corr.pairs]


def cmd_eval(args) -> int:
    preds = _load_predictions(args.pred)
    corr = CorrespondenceSet.from_dict(load_json(args.truth))
    summary = summarize(eval_records(preds, corr))
    sys.stderr.write(format_table([(args.name, summary)]))
    _emit({"command": "eval", "summary": summary.to_dict()})
    return EXIT_OK


# ------------------------------------------------------------------ experiments


def _heads_from(path_a, path_s) -> tuple[ProjectionHead, ProjectionHead]:
    wa, na = vio.read_head(path_a)
    ws, ns = vio.read_head(path_s)
    if (na, ns) != ("appearance", "semantic"):
        raise ConfigError(f"expected appearance and semantic heads, got {na} and {ns}")
    return ProjectionHead(wa, na), ProjectionHead(ws, ns)


def cmd_ablation(args) -> int:
    data = load_json(args.config)
    out_dir = data.pop("output_dir", None)
    heads_dir = data.pop("heads_dir", None)
    cfg = from_dict(AblationConfig, data)
    cfg.seed = env_seed(cfg.seed)
    out_dir = args.out or out_dir
    out = _out_dir(out_dir) if out_dir else None
    heads = None
    if heads_dir:
        heads = _heads_from(Path(heads_dir) / "appearance.aph", Path(heads_dir) / "semantic.aph")
    report = run_ablation(cfg, heads)
    payload = {"command": "ablation", "seed": cfg.seed, "report": report.to_dict()}
    table = report.table()
    sys.stderr.write(table)
    if out is not None:
        files: dict[str, str] = {}
        _write(out / "report.json", dumps(payload), files)
        _write(out / "table.txt", table, files)
        payload = {**payload, "files": files}
    _emit(payload)
    return EXIT_OK


def cmd_loss_check(args) -> int:
    seed = env_seed(args.seed)
    report = loss_check(seed, n_batches=args.batches, inject_error=args.inject_grad_error)
    _emit({"command": "loss-check", **report})
    for c in report["checks"]:
        log.info("%s %s", "PASS" if c["pass"] else "FAIL", c["name"])
    return EXIT_OK if report["pass"] else EXIT_NUMERIC


def history_csv(history: list[dict]) -> str:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "loss", "loss_app", "loss_sem"])
    for h in history:
        w.writerow([h["step"], repr(float(h["loss"])), repr(float(h["loss_app"])), repr(float(h["loss_sem"]))])
    return buf.getvalue()


def cmd_train_toy(args) -> int:
    cfg = from_dict(TrainConfig, load_json(args.config)) if args.config else TrainConfig()
    cfg.seed = env_seed(cfg.seed)
    cfg.validate()
    out = _out_dir(args.out)
    result = train(cfg)
    files: dict[str, str] = {}
    _write(out / "appearance.aph", vio.encode_head(result.appearance.weights, "appearance"), files)
    _write(out / "semantic.aph", vio.encode_head(result.semantic.weights, "semantic"), files)
    _write(out / "loss_history.csv", history_csv(result.history), files)
    _write(out / "train_config.json", dumps(cfg.to_dict()), files)
    h = result.history
    summary = {"steps": len(h), "initial_loss": h[0]["loss"] if h else None, "final_loss": h[-1]["loss"] if h else None}
    _emit({"command": "train-toy", "seed": cfg.seed, "summary": summary, "files": files})
    return EXIT_OK


# ------------------------------------------------------------------ parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    # SUPPRESS keeps a subcommand from resetting a value given before it
    common.add_argument("--threads", type=_positive_int, default=argparse.SUPPRESS, help="worker threads (default: all cores)")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS, help="log progress to stderr")

    p = _Parser(prog="anatomatch", description="Dense embedding correspondence toolkit.", parents=[common])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    ph = sub.add_parser("phantom", help="synthetic phantoms and pairs")
    phs = ph.add_subparsers(dest="phantom_command", required=True, parser_class=_Parser)

    g = phs.add_parser("gen", parents=[common], help="generate one phantom")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--dims", type=parse_point, help="z,y,x voxels")
    g.add_argument("--config", help="PhantomConfig JSON")
    g.add_argument("--out", required=True, help="existing output directory")
    g.set_defaults(func=cmd_phantom_gen)

    pr = phs.add_parser("pair", parents=[common], help="generate an augmented pair with ground truth")
    pr.add_argument("--seed", type=int, default=0)
    pr.add_argument("--dims", type=parse_point)
    pr.add_argument("--n-points", type=_positive_int, default=None)
    pr.add_argument("--config", help='JSON with "phantom", "augment", "n_points"')
    pr.add_argument("--out", required=True)
    pr.set_defaults(func=cmd_phantom_pair)

    c = phs.add_parser("corrupt", parents=[common], help="corrupt an intensity volume inside a sphere")
    c.add_argument("--input", required=True)
    c.add_argument("--mode", required=True, choices=CORRUPTION_MODES)
    c.add_argument("--center", required=True, type=lambda s: _triple(s, float), help="z,y,x voxels")
    c.add_argument("--radius", required=True, type=float, help="voxels")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--gain", type=float, default=1.5)
    c.add_argument("--strength", type=float, default=0.5)
    c.add_argument("--truth", help="truth map JSON to update (local-deform)")
    c.add_argument("--truth-out")
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_phantom_corrupt)

    e = sub.add_parser("embed", parents=[common], help="embed an intensity volume with a head file")
    e.add_argument("--input", required=True)
    e.add_argument("--head", required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_embed)

    m = sub.add_parser("match", parents=[common], help="match template points into a query volume")
    m.add_argument("--template", required=True)
    m.add_argument("--query", required=True)
    m.add_argument("--point", type=parse_point, help="z,y,x voxels")
    m.add_argument("--correspondences", help="correspondence JSON; writes predictions")
    m.add_argument("--mode", choices=MODES)
    m.add_argument("--cube", type=int)
    m.add_argument("--tau-dis", type=float)
    m.add_argument("--max-iter", type=int)
    m.add_argument("--min-points", type=int)
    m.add_argument("--matcher-config", help="MatcherConfig JSON; flags override it")
    m.add_argument("--traces", action="store_true", help="include forward-backward traces")
    m.add_argument("--out")
    m.set_defaults(func=cmd_match)

    v = sub.add_parser("eval", parents=[common], help="CPM / MED of predictions against truth")
    v.add_argument("--pred", required=True)
    v.add_argument("--truth", required=True)
    v.add_argument("--name", default="predictions", help="row label in the table")
    v.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablation", parents=[common], help="four-row matching ablation")
    a.add_argument("--config", required=True)
    a.add_argument("--out", help="existing directory for report.json and table.txt")
    a.set_defaults(func=cmd_ablation)

    lc = sub.add_parser("loss-check", parents=[common], help="gradient and closed-form loss checks")
    lc.add_argument("--seed", type=int, default=0)
    lc.add_argument("--batches", type=_positive_int, default=100)
    lc.add_argument("--inject-grad-error", action="store_true", help=argparse.SUPPRESS)
    lc.set_defaults(func=cmd_loss_check)

    t = sub.add_parser("train-toy", parents=[common], help="train the toy appearance and semantic heads")
    t.add_argument("--config", help="TrainConfig JSON")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train_toy)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    verbose = getattr(args, "verbose", False)
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, stream=sys.stderr, format="%(message)s")
    try:
        set_workers(getattr(args, "threads", None))
        return args.func(args)
    except vio.VolumeFormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (PackingError, ValueError, IndexError, KeyError, TypeError) as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
