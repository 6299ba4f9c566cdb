"""Patch-verification metrics (FPR95, ROC) and benchmark reports.

Verification scores L2 distances between descriptors of labeled patch
pairs; reconstruction rows are aggregated across scenes and both tracks
render into one table set (JSON, Markdown, CSV).
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import CorruptContainerError, InsufficientSamplesError
from .patchgen import PatchTable, read_container
from .reconstruct import ReconMetrics

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3

COLUMNS = [
    "Descriptor",
    "FPR95%",
    "Registered",
    "Sparse",
    "TrackLen",
    "ReprojErr",
    "Dense",
    "Inliers",
]


def fnv1a64(data: bytes) -> int:
    h = FNV_OFFSET
    for b in data:
        h ^= b
        h = (h * FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


def config_hash(config) -> str:
    """64-bit FNV-1a over canonical (sorted keys, compact) config JSON."""
    canon = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return f"{fnv1a64(canon.encode('utf-8')):016x}"


@dataclass
class VerificationResult:
    descriptor: str
    fpr95: float
    roc: list  # (threshold, tpr, fpr), threshold ascending
    n_pos: int
    n_neg: int


@dataclass
class BenchReport:
    verification: list
    recon: dict  # descriptor -> {"scenes": {id: ReconMetrics}, "average": ReconMetrics}
    provenance: dict
    paths: dict = field(default_factory=dict)


def fpr95(pos_distances, neg_distances) -> float:
    """False positive rate at the threshold where 95% of positives pass.

    The threshold is the smallest observed value t with
    fraction(pos <= t) >= 0.95; distances tied with t count as accepted.
    No interpolation, so the value is an exact rank statistic.
    """
    pos = np.asarray(pos_distances, dtype=np.float64)
    neg = np.asarray(neg_distances, dtype=np.float64)
    if len(pos) < 20 or len(neg) < 20:
        raise InsufficientSamplesError(
            f"need at least 20 of each, got {len(pos)} pos / {len(neg)} neg"
        )
    k = math.ceil(0.95 * len(pos))
    t = np.sort(pos)[k - 1]
    return float(np.count_nonzero(neg <= t) / len(neg))


def _roc_curve(pos: np.ndarray, neg: np.ndarray, max_points: int = 200) -> list:
    finite = np.concatenate([pos[np.isfinite(pos)], neg[np.isfinite(neg)]])
    uniq = np.unique(finite)
    if uniq.size == 0:
        return []
    if uniq.size > max_points:
        take = np.unique(np.linspace(0, uniq.size - 1, max_points).astype(int))
        uniq = uniq[take]
    spos = np.sort(pos)
    sneg = np.sort(neg)
    tpr = np.searchsorted(spos, uniq, side="right") / len(pos)
    fpr = np.searchsorted(sneg, uniq, side="right") / len(neg)
    return [(float(t), float(a), float(b)) for t, a, b in zip(uniq, tpr, fpr)]


def evaluate_descriptor(handle, pairs, container) -> VerificationResult:
    """Score one descriptor on labeled patch pairs.

    Every referenced patch is described exactly once.  Low-energy patches
    poison their positives (distance +inf, a guaranteed miss) and drop
    their negatives from the statistics, since a blank patch carries no
    verification signal either way.
    """
    if isinstance(container, PatchTable):
        table = container
    else:
        table, _, _ = read_container(container)
    rec_by = {(pid, r.view_id): r for pid, r in table.ordered()}
    refs = sorted(
        {tuple(r) for pair in (*pairs.positives, *pairs.negatives) for r in pair}
    )
    missing = [r for r in refs if r not in rec_by]
    if missing:
        raise CorruptContainerError(
            f"pairs reference {len(missing)} missing patches, first {missing[0]}"
        )
    result = handle.describe_batch([rec_by[r].patch for r in refs])
    vec = np.asarray(result.vectors, dtype=np.float64)
    low = np.asarray(result.low_energy, dtype=bool)
    at = {r: i for i, r in enumerate(refs)}

    def distances(pair_list):
        ia = np.fromiter((at[tuple(a)] for a, _ in pair_list), dtype=np.int64, count=len(pair_list))
        ib = np.fromiter((at[tuple(b)] for _, b in pair_list), dtype=np.int64, count=len(pair_list))
        d = np.linalg.norm(vec[ia] - vec[ib], axis=1)
        return d, low[ia] | low[ib]

    pos, pos_flag = distances(pairs.positives)
    pos[pos_flag] = np.inf
    neg, neg_flag = distances(pairs.negatives)
    neg = neg[~neg_flag]
    value = fpr95(pos, neg)
    return VerificationResult(
        descriptor=handle.spec.name,
        fpr95=value,
        roc=_roc_curve(pos, neg),
        n_pos=len(pos),
        n_neg=len(neg),
    )


def average_metrics(rows) -> ReconMetrics:
    """Field-wise arithmetic mean over ReconMetrics rows."""
    rows = list(rows)
    if not rows:
        raise ValueError("no rows to average")
    n = len(rows)

    def mean(attr):
        return sum(getattr(r, attr) for r in rows) / n

    return ReconMetrics(
        registered_images=mean("registered_images"),
        sparse_points=mean("sparse_points"),
        mean_track_length=mean("mean_track_length"),
        mean_reproj_error=mean("mean_reproj_error"),
        dense_points=mean("dense_points"),
        inlier_matches=mean("inlier_matches"),
        empty=all(r.empty for r in rows),
    )


def _recon_cells(avg, fmt):
    return [
        fmt(avg.registered_images),
        fmt(avg.sparse_points),
        fmt(avg.mean_track_length),
        fmt(avg.mean_reproj_error),
        fmt(avg.dense_points),
        fmt(avg.inlier_matches),
    ]


def emit_report(
    results,
    recon_rows=None,
    out_dir=".",
    *,
    version: str = "V1",
    seeds=(),
    config=None,
) -> BenchReport:
    """Write report.json, report.md and report.csv under out_dir.

    results: VerificationResult rows.  recon_rows: descriptor ->
    {scene_id -> ReconMetrics}; scene rows are averaged per descriptor
    for the tables and kept individually in the JSON.  Markdown prints
    FPR95 as a percent with 2 decimals, the CSV carries 6 significant
    digits everywhere, JSON keeps full precision.  Without recon rows
    only the two verification columns are emitted.
    """
    results = list(results)
    if not results and not recon_rows:
        raise ValueError("nothing to report")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    recon = {}
    for name in sorted(recon_rows or {}):
        scenes = dict(sorted((recon_rows or {})[name].items()))
        recon[name] = {"scenes": scenes, "average": average_metrics(scenes.values())}

    provenance = {
        "version": version,
        "seeds": list(seeds),
        "config_hash": config_hash(config if config is not None else {}),
    }
    report = BenchReport(results, recon, provenance)

    payload = {
        "provenance": provenance,
        "verification": [
            {
                "descriptor": r.descriptor,
                "fpr95": r.fpr95,
                "n_pos": r.n_pos,
                "n_neg": r.n_neg,
                "roc": [list(p) for p in r.roc],
            }
            for r in results
        ],
        "recon": {
            name: {
                "scenes": {s: asdict(m) for s, m in entry["scenes"].items()},
                "average": asdict(entry["average"]),
            }
            for name, entry in recon.items()
        },
    }
    json_path = out / "report.json"
    json_path.write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )

    names = [r.descriptor for r in results]
    names += [n for n in recon if n not in names]
    ver_by = {r.descriptor: r for r in results}
    cols = COLUMNS if recon else COLUMNS[:2]

    def table_rows(pct, num):
        for name in names:
            v = ver_by.get(name)
            cells = [name, pct(v.fpr95 * 100.0) if v is not None else ""]
            if recon:
                entry = recon.get(name)
                cells += (
                    _recon_cells(entry["average"], num) if entry else [""] * 6
                )
            yield cells

    md_lines = ["| " + " | ".join(cols) + " |", "|" + " --- |" * len(cols)]
    for cells in table_rows(lambda x: f"{x:.2f}", lambda x: f"{x:.6g}"):
        md_lines.append("| " + " | ".join(cells) + " |")
    md_path = out / "report.md"
    md_path.write_text("\n".join(md_lines) + "\n", encoding="utf-8")

    csv_path = out / "report.csv"
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(cols)
        for cells in table_rows(lambda x: f"{x:.6g}", lambda x: f"{x:.6g}"):
            writer.writerow(cells)

    report.paths = {"json": json_path, "md": md_path, "csv": csv_path}
    return report


def load_report(path) -> dict:
    """Raw report.json payload."""
    return json.loads(Path(path).read_text(encoding="utf-8"))


def read_report_csv(path) -> list:
    """CSV table rows as dicts keyed by column name."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        return []
    header = rows[0]
    return [dict(zip(header, r)) for r in rows[1:]]
