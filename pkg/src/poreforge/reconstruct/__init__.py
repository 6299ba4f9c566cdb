"""Matching, track building, sparse SfM, plane-sweep MVS, and metrics."""

from .matching import MatchConfig, MatchGraph, PairMatches, match_views, mutual_nearest
from .metrics import ReconMetrics, compute_metrics, load_metrics, save_metrics
from .mvs import DensePointCloud, MvsConfig, run_mvs
from .sfm import (
    SfmConfig,
    SparseModel,
    empty_model,
    extract_features,
    mean_reprojection_error,
    run_sfm,
)
from .storage import (
    load_dense,
    load_depth_maps,
    load_sparse,
    save_dense,
    save_depth_maps,
    save_sparse,
)
from .tracks import build_tracks

__all__ = [
    "MatchConfig",
    "MatchGraph",
    "PairMatches",
    "match_views",
    "mutual_nearest",
    "build_tracks",
    "SfmConfig",
    "SparseModel",
    "empty_model",
    "extract_features",
    "mean_reprojection_error",
    "run_sfm",
    "MvsConfig",
    "DensePointCloud",
    "run_mvs",
    "ReconMetrics",
    "compute_metrics",
    "save_metrics",
    "load_metrics",
    "save_sparse",
    "load_sparse",
    "save_dense",
    "load_dense",
    "save_depth_maps",
    "load_depth_maps",
]
