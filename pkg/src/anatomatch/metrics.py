"""Landmark / lesion matching metrics: CPM, MED, per-landmark tables.

Distances are in mm. Standard deviations are population (ddof=0) values.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Mapping, Sequence

import numpy as np

STD_KIND = "population"


@dataclass(frozen=True)
class EvalRecord:
    pair_id: str
    predicted: tuple[float, float, float]
    truth: tuple[float, float, float]
    radius: float
    method: str = ""

    def __post_init__(self):
        if not (np.all(np.isfinite(self.predicted)) and np.all(np.isfinite(self.truth))):
            raise ValueError(f"record {self.pair_id}: non-finite coordinates")
        if not self.radius > 0:
            raise ValueError(f"record {self.pair_id}: radius must be > 0")


@dataclass(frozen=True)
class MeanStd:
    mean: float
    std: float

    def __str__(self):
        return f"{self.mean:.1f}±{self.std:.1f}"


@dataclass(frozen=True)
class EvalSummary:
    n: int
    cpm_at_10mm: float
    cpm_at_radius: float
    med_x: MeanStd
    med_y: MeanStd
    med_z: MeanStd
    med: MeanStd

    def to_dict(self) -> dict:
        d = asdict(self)
        d["std_kind"] = STD_KIND
        return d


def _offsets(records: Sequence[EvalRecord]) -> np.ndarray:
    if not records:
        raise ValueError("no evaluation records")
    pred = np.array([r.predicted for r in records], dtype=np.float64)
    truth = np.array([r.truth for r in records], dtype=np.float64)
    return pred - truth


def distances(records: Sequence[EvalRecord]) -> np.ndarray:
    d = _offsets(records)
    return np.sqrt((d * d).sum(axis=1))


def cpm(records: Sequence[EvalRecord], threshold: float | None = 10.0) -> float:
    """Percent of records with distance strictly below ``threshold`` mm.

    ``threshold=None`` uses each record's own radius.
    """
    dist = distances(records)
    if threshold is None:
        thr = np.array([r.radius for r in records], dtype=np.float64)
    else:
        thr = float(threshold)
    return 100.0 * int(np.count_nonzero(dist < thr)) / len(records)


def _mean_std(v: np.ndarray) -> MeanStd:
    v = np.sort(v)  # fixed summation order makes results permutation-invariant
    return MeanStd(float(v.mean()), float(v.std()))


def med(records: Sequence[EvalRecord]) -> dict[str, MeanStd]:
    d = _offsets(records)
    out = {"med": _mean_std(np.sqrt((d * d).sum(axis=1)))}
    for axis, name in enumerate(("med_z", "med_y", "med_x")):
        out[name] = _mean_std(np.abs(d[:, axis]))
    return out


def summarize(records: Sequence[EvalRecord]) -> EvalSummary:
    m = med(records)
    return EvalSummary(
        n=len(records),
        cpm_at_10mm=cpm(records, 10.0),
        cpm_at_radius=cpm(records, None),
        med_x=m["med_x"],
        med_y=m["med_y"],
        med_z=m["med_z"],
        med=m["med"],
    )


@dataclass(frozen=True)
class LandmarkRow:
    name: str
    n: int
    mean: float
    std: float
    max: float

    def cell(self) -> str:
        return f"{self.mean:.1f}±{self.std:.1f} {self.max:.1f}"


def landmark_table(groups: Mapping[str, Sequence[EvalRecord]]) -> list[LandmarkRow]:
    """Per-landmark mean±std and max distance, plus an ``overall`` row over all records."""
    rows = []
    flat: list[EvalRecord] = []
    for name, recs in groups.items():
        if not recs:
            raise ValueError(f"landmark {name!r} has no records")
        rows.append(_row(name, distances(recs)))
        flat.extend(recs)
    if not rows:
        raise ValueError("no landmark groups")
    rows.append(_row("overall", distances(flat)))
    return rows


def _row(name: str, dist: np.ndarray) -> LandmarkRow:
    ms = _mean_std(dist)
    return LandmarkRow(name, len(dist), ms.mean, ms.std, float(dist.max()))


COLUMNS = ("CPM@10mm", "CPM@Radius", "MED_X (mm)", "MED_Y (mm)", "MED_Z (mm)", "MED (mm)")


def format_table(rows: Sequence[tuple[str, EvalSummary]]) -> str:
    """Aligned plain-text table in the usual CPM/MED column order."""
    body = [
        [
            name,
            f"{s.cpm_at_10mm:.2f}",
            f"{s.cpm_at_radius:.2f}",
            str(s.med_x),
            str(s.med_y),
            str(s.med_z),
            str(s.med),
        ]
        for name, s in rows
    ]
    header = ["Method", *COLUMNS]
    widths = [max(len(r[i]) for r in [header, *body]) for i in range(len(header))]
    fmt = lambda r: " | ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths)))
    sep = "-+-".join("-" * w for w in widths)
    return "\n".join([fmt(header), sep, *(fmt(r) for r in body)]) + "\n"
