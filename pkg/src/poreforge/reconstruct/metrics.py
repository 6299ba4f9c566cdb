"""Reconstruction quality metrics and their JSON form."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

from .matching import MatchGraph
from .mvs import DensePointCloud
from .sfm import SparseModel, mean_reprojection_error


@dataclass(frozen=True)
class ReconMetrics:
    """Registered-image count, point counts, track and error statistics.

    Count fields are floats so subject-averaged rows survive the report
    path unchanged; single-run values are whole numbers.
    """

    registered_images: int
    sparse_points: float
    mean_track_length: float
    mean_reproj_error: float
    dense_points: float
    inlier_matches: float
    empty: bool = False

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ReconMetrics":
        return cls(**json.loads(text))


def compute_metrics(
    model: SparseModel,
    dense: DensePointCloud | None = None,
    graph: MatchGraph | None = None,
) -> ReconMetrics:
    inliers = graph.inlier_matches if graph is not None else model.inlier_matches
    n_dense = len(dense) if dense is not None else 0
    if model.is_empty:
        return ReconMetrics(0, 0, 0.0, 0.0, n_dense, inliers, empty=True)
    track_lengths = [len(t.observations) for t in model.tracks]
    return ReconMetrics(
        registered_images=len(model.registered),
        sparse_points=len(model.tracks),
        mean_track_length=float(sum(track_lengths) / len(track_lengths)),
        mean_reproj_error=mean_reprojection_error(model),
        dense_points=n_dense,
        inlier_matches=inliers,
    )


def save_metrics(metrics: ReconMetrics, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(metrics.to_json() + "\n")


def load_metrics(path) -> ReconMetrics:
    with open(path, "r", encoding="utf-8") as f:
        return ReconMetrics.from_json(f.read())
