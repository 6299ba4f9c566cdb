"""Sparse reconstruction: calibrated triangulation and incremental SfM-lite."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..descriptors import describe_batch
from ..errors import ForgeError, InsufficientInliersError
from ..geometry import (
    CameraParameters,
    Observation,
    Point3,
    Track,
    estimate_two_view,
    refine_points,
    refine_pose,
    resect_camera,
    track_errors,
    triangulate,
)
from ..imaging import DetectorConfig, ImageGray, detect_keypoints, sample_patch
from .matching import MatchConfig, MatchGraph, match_views
from .tracks import build_tracks


@dataclass(frozen=True)
class SfmConfig:
    detector: DetectorConfig = field(
        default_factory=lambda: DetectorConfig(max_keypoints=3000)
    )
    match: MatchConfig = field(default_factory=MatchConfig)
    max_reproj_px: float = 4.0
    min_obs_registered: int = 50
    min_bootstrap_inliers: int = 30
    min_resection_points: int = 12
    max_bootstrap_attempts: int = 20
    resection_px: float = 6.0
    focal_hint: float | None = None


@dataclass
class SparseModel:
    cameras: list[CameraParameters]
    tracks: list[Track]
    registered: set[int]
    notes: str = ""
    inlier_matches: int = 0

    @property
    def is_empty(self) -> bool:
        return len(self.tracks) == 0


def empty_model(cameras=None, notes: str = "") -> SparseModel:
    return SparseModel(list(cameras or []), [], set(), notes)


@dataclass
class ViewFeatures:
    keypoints: list
    descriptors: np.ndarray


def extract_features(images, descriptor, cfg: SfmConfig) -> list[ViewFeatures]:
    """Detect keypoints and describe a 64 px patch around each.

    Keypoints whose patch leaves the image are dropped so every descriptor
    row has a matching keypoint.
    """
    out = []
    for img in images:
        kps = detect_keypoints(img, cfg.detector)
        kept = []
        patches = []
        seen: set[bytes] = set()
        for kp in kps:
            patch = sample_patch(img, (kp.x, kp.y))
            if patch is None:
                continue
            # multi-scale detections at one centre sample the same pixels;
            # identical patches add nothing and break mutual-NN matching
            key = patch.tobytes()
            if key in seen:
                continue
            seen.add(key)
            kept.append(kp)
            patches.append(patch)
        if patches:
            vectors = describe_batch(descriptor, np.stack(patches)).vectors
        else:
            vectors = np.zeros((0, descriptor.spec.dim), dtype=np.float32)
        out.append(ViewFeatures(kept, vectors))
    return out


def _track_from_component(component, features) -> list[Observation]:
    obs = []
    for view, kp_idx in component:
        kp = features[view].keypoints[kp_idx]
        obs.append(Observation(view, (kp.x, kp.y), kp_index=kp_idx))
    return obs


def _triangulate_components(components, features, cams_by_view) -> list[Track]:
    tracks = []
    for comp in components:
        obs = [
            (o, cams_by_view[o.view_id])
            for o in _track_from_component(comp, features)
            if o.view_id in cams_by_view
        ]
        if len(obs) < 2:
            continue
        try:
            point, _ = triangulate(obs)
        except ForgeError:
            continue
        tracks.append(Track(point, [o for o, _ in obs]))
    return tracks


def _finalize(model: SparseModel, cfg: SfmConfig) -> SparseModel:
    refined = refine_points(
        model,
        max_reproj_px=cfg.max_reproj_px,
        min_obs_registered=cfg.min_obs_registered,
    )
    for i, track in enumerate(refined.tracks):
        refined.tracks[i] = Track(
            Point3(track.point.position, point_id=i), track.observations
        )
    return refined


def run_sfm(images, cameras, descriptor, cfg: SfmConfig | None = None) -> SparseModel:
    """Sparse model from images; calibrated when cameras are given.

    Calibrated: triangulate every track against the known rig. Uncalibrated:
    bootstrap from the best two-view pair, then register remaining views by
    resection. Failure to bootstrap yields an empty model with a note.
    """
    cfg = cfg or SfmConfig()
    images = [img if isinstance(img, ImageGray) else ImageGray(img) for img in images]
    if len(images) < 2:
        return empty_model(cameras, notes="bootstrap-failed: need at least 2 views")
    features = extract_features(images, descriptor, cfg)
    graph = match_views(
        [f.keypoints for f in features], [f.descriptors for f in features], cfg.match
    )
    components = build_tracks(graph)
    if cameras is not None:
        cams_by_view = {c.view_id: c for c in cameras}
        tracks = _triangulate_components(components, features, cams_by_view)
        model = SparseModel(
            list(cameras), tracks, set(), inlier_matches=graph.inlier_matches
        )
        return _finalize(model, cfg)
    model = _run_uncalibrated(images, features, graph, components, cfg)
    model.inlier_matches = graph.inlier_matches
    return model


def _guess_intrinsics(img: ImageGray, view_id: int, focal: float | None) -> CameraParameters:
    h, w = img.pixels.shape
    f = focal if focal is not None else 1.2 * max(w, h)
    return CameraParameters(
        view_id, f, f, (w - 1) / 2.0, (h - 1) / 2.0,
        np.eye(3), np.zeros(3), width=w, height=h,
    )


def _bootstrap_pair(pair, features, graph, templates, cfg):
    a, b = pair
    pm = graph.pairs[pair]
    kps_a, kps_b = features[a].keypoints, features[b].keypoints
    pix_a = np.array([(kps_a[i].x, kps_a[i].y) for i in pm.indices_a])
    pix_b = np.array([(kps_b[i].x, kps_b[i].y) for i in pm.indices_b])
    rel = estimate_two_view(
        pix_a,
        pix_b,
        templates[a].k_matrix,
        templates[b].k_matrix,
        threshold_px=cfg.match.ransac_px,
        min_inliers=cfg.min_bootstrap_inliers,
        seed=cfg.match.seed,
    )
    return {
        a: templates[a],
        b: templates[b].with_pose(rel.rotation, rel.translation),
    }


def _refined_tracks(cams_by_view, features, components, cfg) -> list[Track]:
    tracks = _triangulate_components(components, features, cams_by_view)
    model = SparseModel(
        [cams_by_view[v] for v in sorted(cams_by_view)], tracks, set()
    )
    return refine_points(model, cfg.max_reproj_px, cfg.min_obs_registered).tracks


def _alternate_refine(cams_by_view, features, components, cfg, rounds=2):
    """Block-coordinate refinement: points with cameras fixed, then each
    camera against the refined points. Loosens the shear a two-view
    bootstrap leaves behind without a global bundle adjustment."""
    for _ in range(rounds):
        tracks = _refined_tracks(cams_by_view, features, components, cfg)
        per_view: dict[int, list] = {}
        for tr in tracks:
            for o in tr.observations:
                per_view.setdefault(o.view_id, []).append(
                    (tr.point.position, o.pixel)
                )
        for view, pairs in sorted(per_view.items()):
            if len(pairs) < 6:
                continue
            pts = np.array([p for p, _ in pairs])
            pix = np.array([q for _, q in pairs])
            cams_by_view[view] = refine_pose(cams_by_view[view], pts, pix)


def _grow_incrementally(cams_by_view, features, components, templates, cfg):
    """Register remaining views by resection, one per round."""
    n_views = len(templates)
    for _ in range(n_views):
        tracks = _refined_tracks(cams_by_view, features, components, cfg)

        # index refined points by (view, kp) for resection lookups
        point_of: dict[tuple[int, int], np.ndarray] = {}
        for tr in tracks:
            for o in tr.observations:
                point_of[(o.view_id, o.kp_index)] = tr.point.position
        candidates: dict[int, list] = {}
        for comp in components:
            anchored = [vk for vk in comp if vk in point_of]
            if not anchored:
                continue
            pos = point_of[anchored[0]]
            for view, kp_idx in comp:
                if view in cams_by_view:
                    continue
                kp = features[view].keypoints[kp_idx]
                candidates.setdefault(view, []).append((pos, (kp.x, kp.y)))
        if not candidates:
            return
        progress = False
        order = sorted(candidates, key=lambda v: (-len(candidates[v]), v))
        for view in order:
            pts = np.array([p for p, _ in candidates[view]])
            pix = np.array([q for _, q in candidates[view]])
            if len(pts) < max(6, cfg.min_resection_points):
                continue
            try:
                cam, _ = resect_camera(
                    pts,
                    pix,
                    templates[view],
                    threshold_px=cfg.resection_px,
                    min_inliers=cfg.min_resection_points,
                    seed=cfg.match.seed + view,
                )
            except ForgeError:
                continue
            cams_by_view[view] = cam
            progress = True
            break
        if not progress:
            return
        _alternate_refine(cams_by_view, features, components, cfg)


def _run_uncalibrated(images, features, graph: MatchGraph, components, cfg: SfmConfig) -> SparseModel:
    templates = [
        _guess_intrinsics(img, i, cfg.focal_hint) for i, img in enumerate(images)
    ]
    ranked = sorted(
        (pair for pair, pm in graph.pairs.items() if pm.inlier_count > 0),
        key=lambda pair: (-graph.pairs[pair].inlier_count, pair),
    )
    ranked = [
        p for p in ranked
        if graph.pairs[p].inlier_count >= cfg.min_bootstrap_inliers
    ][: cfg.max_bootstrap_attempts]
    if not ranked:
        best = max((pm.inlier_count for pm in graph.pairs.values()), default=0)
        return empty_model(
            notes=f"bootstrap-failed: best pair has {best} inliers, "
            f"need {cfg.min_bootstrap_inliers}"
        )

    # A narrow-baseline pair can bootstrap into a sheared frame that no
    # third view resects into; walk down the ranking until the model grows.
    fallback = None
    last_error = "no usable pair"
    for pair in ranked:
        try:
            cams_by_view = _bootstrap_pair(pair, features, graph, templates, cfg)
        except ForgeError as exc:
            last_error = str(exc)
            continue
        _grow_incrementally(cams_by_view, features, components, templates, cfg)
        if len(cams_by_view) > 2:
            fallback = cams_by_view
            break
        if fallback is None:
            fallback = cams_by_view
    if fallback is None:
        return empty_model(notes=f"bootstrap-failed: {last_error}")

    cams_by_view = fallback
    tracks = _triangulate_components(components, features, cams_by_view)
    model = SparseModel(
        [cams_by_view[v] for v in sorted(cams_by_view)], tracks, set()
    )
    return _finalize(model, cfg)


def mean_reprojection_error(model: SparseModel) -> float:
    """Mean per-observation reprojection error in pixels, 0 for empty models."""
    cams = {c.view_id: c for c in model.cameras}
    errs = []
    for tr in model.tracks:
        errs.extend(track_errors(tr, cams).tolist())
    return float(np.mean(errs)) if errs else 0.0
