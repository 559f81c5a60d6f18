"""Runs every CLI command in-process on small configs and collects output bytes."""
from __future__ import annotations

import contextlib
import io
import json
from pathlib import Path

from anatomatch import parallel
from anatomatch.cli import main

SMALL_PHANTOM = {"dims": [24, 24, 24], "n_structures": [3, 4], "radius_mm": [5.0, 8.0]}
TRAIN = {
    "steps": 4, "pool_size": 2, "batch_size": 2, "n_pos": 6, "n_candidates": 24,
    "n_hard": 3, "n_random": 3, "n_per_class": 4, "phantom": SMALL_PHANTOM,
}


def run(argv) -> tuple[int, str, str]:
    """(exit code, stdout, stderr) of one in-process invocation."""
    out, err = io.StringIO(), io.StringIO()
    before = parallel.get_workers()
    try:
        with contextlib.redirect_stdout(out), contextlib.redirect_stderr(err):
            code = main([str(a) for a in argv])
    finally:
        parallel.set_workers(before)
    return code, out.getvalue(), err.getvalue()


def _ok(argv) -> str:
    code, out, err = run(argv)
    if code != 0:
        raise AssertionError(f"{argv} exited {code}: {err}")
    return out


def run_all(root: Path, threads: int) -> dict[str, bytes]:
    """Every command once; returns stdout and written files keyed by name."""
    t = ["--threads", threads]
    d = {name: root / name for name in ("gen", "pair", "heads", "abl")}
    for p in d.values():
        p.mkdir(parents=True)
    cfg = root / "cfg"
    cfg.mkdir()
    (cfg / "train.json").write_text(json.dumps(TRAIN))
    (cfg / "phantom.json").write_text(json.dumps(SMALL_PHANTOM))
    (cfg / "pair.json").write_text(json.dumps({"phantom": SMALL_PHANTOM, "n_points": 6}))
    abl = {
        "seed": 3, "n_pairs": 2, "points_per_pair": 3, "phantom": {**SMALL_PHANTOM, "n_structures": [4, 5]},
        "heads_dir": str(d["heads"]),
    }
    (cfg / "abl.json").write_text(json.dumps(abl))

    stdout = {
        "gen": _ok([*t, "phantom", "gen", "--seed", 7, "--dims", "20,22,24", "--config", cfg / "phantom.json", "--out", d["gen"]]),
        "pair": _ok(["phantom", "pair", *t, "--seed", 7, "--config", cfg / "pair.json", "--out", d["pair"]]),
    }
    stdout["corrupt"] = _ok(
        ["phantom", "corrupt", *t, "--input", d["pair"] / "view_b.aev", "--mode", "local-deform",
         "--center", "12,12,12", "--radius", 4, "--seed", 2, "--truth", d["pair"] / "truth.json",
         "--truth-out", d["pair"] / "truth_deformed.json", "--out", d["pair"] / "view_b_corrupt.aev"]
    )
    stdout["train"] = _ok(["train-toy", *t, "--config", cfg / "train.json", "--out", d["heads"]])
    for v in ("view_a", "view_b"):
        stdout[f"embed_{v}"] = _ok(
            ["embed", *t, "--input", d["pair"] / f"{v}.aev", "--head", d["heads"] / "appearance.aph", "--out", d["pair"] / f"{v}_emb.aev"]
        )
    ta, tb = d["pair"] / "view_a_emb.aev", d["pair"] / "view_b_emb.aev"
    stdout["match_point"] = _ok(["match", *t, "--template", ta, "--query", tb, "--point", "12,11,10", "--traces"])
    stdout["match_corr"] = _ok(
        ["match", *t, "--template", ta, "--query", tb, "--correspondences", d["pair"] / "correspondences.json",
         "--out", d["pair"] / "preds.json"]
    )
    stdout["eval"] = _ok(["eval", *t, "--pred", d["pair"] / "preds.json", "--truth", d["pair"] / "correspondences.json"])
    stdout["ablation"] = _ok(["ablation", *t, "--config", cfg / "abl.json", "--out", d["abl"]])
    stdout["loss_check"] = _ok(["loss-check", *t, "--seed", 1, "--batches", 3])

    blobs = {f"stdout:{k}": v.encode() for k, v in stdout.items()}
    for p in sorted(root.rglob("*")):
        if p.is_file() and p.parent != cfg:
            blobs[str(p.relative_to(root))] = p.read_bytes()
    return blobs
