"""Pairwise descriptor matching with geometric verification."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ForgeError
from ..geometry import estimate_two_view


@dataclass(frozen=True)
class MatchConfig:
    ratio: float = 0.85
    ransac_px: float = 2.0
    min_pair_inliers: int = 15
    ransac_iterations: int = 2000
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.ratio <= 1.0:
            raise ValueError(f"ratio must be in [0, 1], got {self.ratio}")


@dataclass(frozen=True)
class PairMatches:
    """Matches between one ordered view pair (a < b)."""

    indices_a: np.ndarray
    indices_b: np.ndarray
    distances: np.ndarray
    inlier_mask: np.ndarray

    def __len__(self):
        return len(self.indices_a)

    @property
    def inlier_count(self) -> int:
        return int(self.inlier_mask.sum())


@dataclass
class MatchGraph:
    n_views: int
    pairs: dict[tuple[int, int], PairMatches] = field(default_factory=dict)

    @property
    def inlier_matches(self) -> int:
        return sum(p.inlier_count for p in self.pairs.values())

    def inlier_edges(self):
        """Yield (view_a, kp_a, view_b, kp_b) over all verified matches."""
        for (va, vb), pm in sorted(self.pairs.items()):
            ia = pm.indices_a[pm.inlier_mask]
            ib = pm.indices_b[pm.inlier_mask]
            for a, b in zip(ia, ib):
                yield va, int(a), vb, int(b)


def _squared_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float32)
    b = np.ascontiguousarray(b, dtype=np.float32)
    d2 = (a * a).sum(axis=1)[:, None] + (b * b).sum(axis=1)[None, :]
    d2 -= 2.0 * (a @ b.T)
    np.maximum(d2, 0.0, out=d2)
    return d2


def mutual_nearest(
    desc_a: np.ndarray, desc_b: np.ndarray, ratio: float
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Mutual nearest neighbours passing the ratio test in both directions.

    Returns (indices_a, indices_b, distances) sorted by index_a.
    """
    if len(desc_a) == 0 or len(desc_b) == 0 or ratio <= 0.0:
        e = np.empty(0, dtype=np.int64)
        return e, e.copy(), np.empty(0, dtype=np.float64)
    d2 = _squared_distances(desc_a, desc_b)
    nn_ab = d2.argmin(axis=1)
    nn_ba = d2.argmin(axis=0)
    rows = np.arange(len(desc_a))
    mutual = nn_ba[nn_ab] == rows
    best = d2[rows, nn_ab]

    if d2.shape[1] >= 2:
        part = np.partition(d2, 1, axis=1)[:, :2]
        second = part[:, 1]
        ok_a = best <= (ratio**2) * second
    else:
        ok_a = np.ones(len(desc_a), dtype=bool)
    if d2.shape[0] >= 2:
        part = np.partition(d2, 1, axis=0)[:2, :]
        second_b = part[1, nn_ab]
        ok_b = best <= (ratio**2) * second_b
    else:
        ok_b = np.ones(len(desc_a), dtype=bool)

    keep = mutual & ok_a & ok_b
    ia = rows[keep]
    ib = nn_ab[keep]
    return ia, ib, np.sqrt(best[keep].astype(np.float64))


def match_views(keypoints, descriptors, cfg: MatchConfig | None = None) -> MatchGraph:
    """Exhaustive pairwise matching with per-pair RANSAC verification.

    keypoints: per-view list of Keypoint sequences; descriptors: per-view
    arrays from a single descriptor handle. Pairs where geometry estimation
    fails keep their matches with an all-false inlier mask.
    """
    cfg = cfg or MatchConfig()
    n = len(descriptors)
    if len(keypoints) != n:
        raise ValueError("keypoints and descriptors disagree on view count")
    graph = MatchGraph(n_views=n)
    for a in range(n):
        for b in range(a + 1, n):
            ia, ib, dist = mutual_nearest(descriptors[a], descriptors[b], cfg.ratio)
            if len(ia) == 0:
                continue
            pix_a = np.array([(keypoints[a][i].x, keypoints[a][i].y) for i in ia])
            pix_b = np.array([(keypoints[b][i].x, keypoints[b][i].y) for i in ib])
            mask = np.zeros(len(ia), dtype=bool)
            if len(ia) >= max(8, cfg.min_pair_inliers):
                try:
                    res = estimate_two_view(
                        pix_a,
                        pix_b,
                        threshold_px=cfg.ransac_px,
                        min_inliers=cfg.min_pair_inliers,
                        max_iterations=cfg.ransac_iterations,
                        seed=cfg.seed * 100003 + a * 131 + b,
                    )
                    mask = res.inliers.copy()
                except ForgeError:
                    pass
            graph.pairs[(a, b)] = PairMatches(ia, ib, dist, mask)
    return graph
