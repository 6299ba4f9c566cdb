"""Pinhole camera model, triangulation, robust two-view estimation and refinement.

Conventions: world units are millimeters, rotation matrices map world to
camera coordinates (Xc = R @ X + t), pixels are (x, y) with x along image
width. All public functions are pure and safe to call concurrently.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import TYPE_CHECKING, Iterable, Sequence

import numpy as np

from .errors import (
    BehindCameraError,
    DegenerateGeometryError,
    InsufficientInliersError,
)

if TYPE_CHECKING:
    from .reconstruct.sfm import SparseModel

MIN_DEPTH = 1e-9
ORTHONORMAL_TOL = 1e-9


@dataclass(frozen=True)
class CameraParameters:
    """Pinhole intrinsics plus a rigid world-to-camera pose for one view."""

    view_id: int
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray
    translation: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)
        if np.max(np.abs(r.T @ r - np.eye(3))) > ORTHONORMAL_TOL:
            raise ValueError(f"view {self.view_id}: rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > ORTHONORMAL_TOL:
            raise ValueError(f"view {self.view_id}: rotation determinant is not +1")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"view {self.view_id}: focal lengths must be positive")
        if not (0 <= self.cx <= self.width and 0 <= self.cy <= self.height):
            raise ValueError(f"view {self.view_id}: principal point outside image")
        r.setflags(write=False)
        t.setflags(write=False)

    @property
    def k_matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    def with_pose(self, rotation: np.ndarray, translation: np.ndarray) -> "CameraParameters":
        return replace(self, rotation=rotation, translation=translation)


@dataclass(frozen=True)
class Point3:
    position: np.ndarray
    point_id: int = -1

    def __post_init__(self):
        p = np.asarray(self.position, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(p)):
            raise ValueError("point coordinates must be finite")
        object.__setattr__(self, "position", p)
        p.setflags(write=False)


@dataclass(frozen=True)
class Observation:
    """A sub-pixel 2D measurement of a point in one view.

    kp_index records which detected keypoint produced the measurement; it is
    -1 for observations that did not come from a keypoint list.
    """

    view_id: int
    pixel: np.ndarray
    kp_index: int = -1

    def __post_init__(self):
        q = np.asarray(self.pixel, dtype=np.float64).reshape(2)
        object.__setattr__(self, "pixel", q)
        q.setflags(write=False)


@dataclass
class Track:
    """One 3D point and its observations across views."""

    point: Point3
    observations: list[Observation]

    def __post_init__(self):
        views = [o.view_id for o in self.observations]
        if len(views) != len(set(views)):
            raise ValueError("track has duplicate view ids")
        if len(views) < 2:
            raise ValueError("track needs at least two observations")

    def __len__(self) -> int:
        return len(self.observations)


def project(position: np.ndarray | Point3, cam: CameraParameters) -> np.ndarray | None:
    """Project a world point into a view; None signals behind-camera."""
    if isinstance(position, Point3):
        position = position.position
    xc = cam.rotation @ np.asarray(position, dtype=np.float64) + cam.translation
    if xc[2] <= MIN_DEPTH:
        return None
    return np.array(
        [cam.fx * xc[0] / xc[2] + cam.cx, cam.fy * xc[1] / xc[2] + cam.cy]
    )


def project_many(
    positions: np.ndarray, cam: CameraParameters
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized projection.

    Returns (pixels (N, 2), depths (N,)); pixel rows with depth <= MIN_DEPTH
    are invalid and filled with NaN.
    """
    pts = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    xc = pts @ cam.rotation.T + cam.translation
    z = xc[:, 2]
    valid = z > MIN_DEPTH
    pix = np.full((len(pts), 2), np.nan)
    zs = np.where(valid, z, 1.0)
    pix[:, 0] = np.where(valid, cam.fx * xc[:, 0] / zs + cam.cx, np.nan)
    pix[:, 1] = np.where(valid, cam.fy * xc[:, 1] / zs + cam.cy, np.nan)
    return pix, z


def camera_depth(position: np.ndarray, cam: CameraParameters) -> float:
    """Depth of a world point along the camera z axis."""
    return float(cam.rotation[2] @ np.asarray(position, dtype=np.float64) + cam.translation[2])


def _ray_direction(pixel: np.ndarray, cam: CameraParameters) -> np.ndarray:
    d = np.array(
        [(pixel[0] - cam.cx) / cam.fx, (pixel[1] - cam.cy) / cam.fy, 1.0]
    )
    d = cam.rotation.T @ d
    return d / np.linalg.norm(d)


def reprojection_residuals(
    position: np.ndarray, observations: Sequence[tuple[np.ndarray, CameraParameters]]
) -> np.ndarray:
    """Stacked (2n,) pixel residuals: projection minus measurement.

    Observations whose point is at or behind the camera plane get large
    finite residuals so optimization steps away from them.
    """
    res = np.empty(2 * len(observations))
    for i, (pixel, cam) in enumerate(observations):
        xc = cam.rotation @ position + cam.translation
        z = xc[2]
        if z <= MIN_DEPTH:
            res[2 * i : 2 * i + 2] = 1e6
            continue
        res[2 * i] = cam.fx * xc[0] / z + cam.cx - pixel[0]
        res[2 * i + 1] = cam.fy * xc[1] / z + cam.cy - pixel[1]
    return res


def reprojection_jacobian(
    position: np.ndarray, observations: Sequence[tuple[np.ndarray, CameraParameters]]
) -> np.ndarray:
    """Analytic (2n, 3) Jacobian of reprojection_residuals wrt the point."""
    jac = np.zeros((2 * len(observations), 3))
    for i, (_pixel, cam) in enumerate(observations):
        xc = cam.rotation @ position + cam.translation
        z = xc[2]
        if z <= MIN_DEPTH:
            continue
        d_proj = np.array(
            [
                [cam.fx / z, 0.0, -cam.fx * xc[0] / (z * z)],
                [0.0, cam.fy / z, -cam.fy * xc[1] / (z * z)],
            ]
        )
        jac[2 * i : 2 * i + 2] = d_proj @ cam.rotation
    return jac


def refine_point(
    position: np.ndarray,
    observations: Sequence[tuple[np.ndarray, CameraParameters]],
    max_iterations: int = 50,
) -> tuple[np.ndarray, float]:
    """Levenberg-Marquardt on a single 3D point; returns (point, sum sq error)."""
    x = np.asarray(position, dtype=np.float64).copy()
    r = reprojection_residuals(x, observations)
    cost = float(r @ r)
    lam = 1e-3
    for _ in range(max_iterations):
        j = reprojection_jacobian(x, observations)
        jtj = j.T @ j
        g = j.T @ r
        stepped = False
        for _ in range(12):
            damped = jtj + lam * np.diag(np.maximum(np.diag(jtj), 1e-12))
            try:
                dx = np.linalg.solve(damped, -g)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            x_try = x + dx
            r_try = reprojection_residuals(x_try, observations)
            cost_try = float(r_try @ r_try)
            if cost_try < cost:
                x, r, cost = x_try, r_try, cost_try
                lam = max(lam / 3.0, 1e-12)
                stepped = True
                break
            lam *= 5.0
            if lam > 1e12:
                break
        if not stepped or float(np.max(np.abs(dx))) < 1e-12:
            break
    return x, cost


def triangulate(
    observations: Sequence[tuple[Observation, CameraParameters]],
    min_ray_angle: float = 1e-4,
) -> tuple[Point3, float]:
    """DLT plus LM triangulation; returns the point and its rms error in px.

    Raises DegenerateGeometryError when rays are near parallel or camera
    centers coincide, BehindCameraError when the refined point falls behind
    a contributing camera.
    """
    if len(observations) < 2:
        raise ValueError("triangulation needs at least two observations")
    views = [obs.view_id for obs, _ in observations]
    if len(views) != len(set(views)):
        raise DegenerateGeometryError("duplicate view ids in triangulation input")

    centers = np.stack([cam.center for _, cam in observations])
    max_baseline = 0.0
    for i in range(len(centers)):
        for j in range(i + 1, len(centers)):
            max_baseline = max(max_baseline, float(np.linalg.norm(centers[i] - centers[j])))
    if max_baseline < 1e-9:
        raise DegenerateGeometryError("all camera centers coincide")

    rays = np.stack([_ray_direction(obs.pixel, cam) for obs, cam in observations])
    max_angle = 0.0
    for i in range(len(rays)):
        for j in range(i + 1, len(rays)):
            c = float(np.clip(abs(rays[i] @ rays[j]), -1.0, 1.0))
            max_angle = max(max_angle, math.acos(c))
    if max_angle <= min_ray_angle:
        raise DegenerateGeometryError(
            f"ray separation {max_angle:.2e} rad below {min_ray_angle:.2e}"
        )

    a = np.zeros((2 * len(observations), 4))
    for i, (obs, cam) in enumerate(observations):
        p = cam.k_matrix @ np.hstack([cam.rotation, cam.translation[:, None]])
        a[2 * i] = obs.pixel[0] * p[2] - p[0]
        a[2 * i + 1] = obs.pixel[1] * p[2] - p[1]
    _, _, vt = np.linalg.svd(a)
    hom = vt[-1]
    if abs(hom[3]) < 1e-12:
        raise DegenerateGeometryError("triangulated point at infinity")
    x0 = hom[:3] / hom[3]

    pix_cams = [(obs.pixel, cam) for obs, cam in observations]
    x, cost = refine_point(x0, pix_cams)

    for _, cam in observations:
        if camera_depth(x, cam) <= MIN_DEPTH:
            raise BehindCameraError("refined point behind a contributing camera")
    rms = math.sqrt(cost / len(observations))
    return Point3(x), rms


def track_errors(track: Track, cams: dict[int, CameraParameters]) -> np.ndarray:
    """Per-observation reprojection error in pixels."""
    errs = np.empty(len(track.observations))
    for i, obs in enumerate(track.observations):
        pix = project(track.point.position, cams[obs.view_id])
        errs[i] = np.inf if pix is None else float(np.linalg.norm(pix - obs.pixel))
    return errs


def refine_points(
    model: "SparseModel",
    max_reproj_px: float = 4.0,
    min_obs_registered: int = 50,
) -> "SparseModel":
    """Per-track LM refinement with fixed cameras.

    The total squared reprojection error never increases; tracks whose
    refined mean error exceeds max_reproj_px are dropped and the registered
    view set is recomputed from the surviving tracks.
    """
    cams = {c.view_id: c for c in model.cameras}
    before = 0.0
    after = 0.0
    kept = []
    for track in model.tracks:
        pix_cams = [(obs.pixel, cams[obs.view_id]) for obs in track.observations]
        r0 = reprojection_residuals(track.point.position, pix_cams)
        cost0 = float(r0 @ r0)
        x, cost = refine_point(track.point.position, pix_cams)
        if cost > cost0:  # LM accepts only improving steps; keep the original
            x, cost = track.point.position, cost0
        before += cost0
        after += cost
        mean_err = float(np.mean(np.sqrt(
            np.sum(reprojection_residuals(x, pix_cams).reshape(-1, 2) ** 2, axis=1)
        )))
        if mean_err <= max_reproj_px:
            kept.append(Track(Point3(x, track.point.point_id), track.observations))
    assert after <= before + 1e-9, "refinement increased total squared error"

    counts: dict[int, int] = {}
    for track in kept:
        for obs in track.observations:
            counts[obs.view_id] = counts.get(obs.view_id, 0) + 1
    registered = {v for v, n in counts.items() if n >= min_obs_registered}
    return replace(model, tracks=kept, registered=registered)


# ---------------------------------------------------------------------------
# Robust two-view estimation
# ---------------------------------------------------------------------------


@dataclass
class TwoViewResult:
    inliers: np.ndarray
    rotation: np.ndarray | None
    translation: np.ndarray | None
    fundamental: np.ndarray
    iterations: int

    @property
    def num_inliers(self) -> int:
        return int(np.count_nonzero(self.inliers))


def _eight_point(x1: np.ndarray, x2: np.ndarray, essential: bool) -> np.ndarray:
    """Linear F/E estimate from homogeneous-normalized correspondences."""
    a = np.column_stack(
        [
            x2[:, 0] * x1[:, 0], x2[:, 0] * x1[:, 1], x2[:, 0],
            x2[:, 1] * x1[:, 0], x2[:, 1] * x1[:, 1], x2[:, 1],
            x1[:, 0], x1[:, 1], np.ones(len(x1)),
        ]
    )
    _, _, vt = np.linalg.svd(a)
    f = vt[-1].reshape(3, 3)
    u, s, vt = np.linalg.svd(f)
    if essential:
        m = 0.5 * (s[0] + s[1])
        s = np.array([m, m, 0.0])
    else:
        s = np.array([s[0], s[1], 0.0])
    return u @ np.diag(s) @ vt


def _hartley_normalize(pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = pts.mean(axis=0)
    centered = pts - mean
    scale = math.sqrt(2.0) / max(float(np.mean(np.linalg.norm(centered, axis=1))), 1e-12)
    t = np.array(
        [[scale, 0.0, -scale * mean[0]], [0.0, scale, -scale * mean[1]], [0.0, 0.0, 1.0]]
    )
    return centered * scale, t


def sampson_distance(f: np.ndarray, pts_a: np.ndarray, pts_b: np.ndarray) -> np.ndarray:
    """First-order geometric distance to the epipolar constraint, in pixels."""
    ones = np.ones((len(pts_a), 1))
    x1 = np.hstack([pts_a, ones])
    x2 = np.hstack([pts_b, ones])
    fx1 = x1 @ f.T
    ftx2 = x2 @ f
    num = np.sum(x2 * fx1, axis=1) ** 2
    den = fx1[:, 0] ** 2 + fx1[:, 1] ** 2 + ftx2[:, 0] ** 2 + ftx2[:, 1] ** 2
    return np.sqrt(num / np.maximum(den, 1e-300))


def _triangulate_normalized(
    x1: np.ndarray, x2: np.ndarray, r: np.ndarray, t: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Batched DLT for P1=[I|0], P2=[R|t]; returns depths in both cameras."""
    n = len(x1)
    p2 = np.hstack([r, t[:, None]])
    a = np.zeros((n, 4, 4))
    a[:, 0, 0] = -1.0
    a[:, 0, 2] = x1[:, 0]
    a[:, 1, 1] = -1.0
    a[:, 1, 2] = x1[:, 1]
    a[:, 2] = x2[:, 0, None] * p2[2] - p2[0]
    a[:, 3] = x2[:, 1, None] * p2[2] - p2[1]
    _, _, vt = np.linalg.svd(a)
    hom = vt[:, -1, :]
    w = hom[:, 3]
    w = np.where(np.abs(w) < 1e-12, 1e-12, w)
    pts = hom[:, :3] / w[:, None]
    z1 = pts[:, 2]
    z2 = pts @ r[2] + t[2]
    return z1, z2


def _ransac_iterations_needed(confidence: float, inlier_ratio: float, sample_size: int) -> float:
    """Iterations for the given confidence of drawing one all-inlier sample."""
    p_good = min(max(inlier_ratio**sample_size, 1e-15), 1.0 - 1e-12)
    return math.log(max(1.0 - confidence, 1e-12)) / math.log1p(-p_good)


def _sampson_signed(e: np.ndarray, na: np.ndarray, nb: np.ndarray) -> np.ndarray:
    """Signed Sampson residuals in normalized image coordinates."""
    x1 = np.hstack([na, np.ones((len(na), 1))])
    x2 = np.hstack([nb, np.ones((len(nb), 1))])
    ex1 = x1 @ e.T
    etx2 = x2 @ e
    num = np.sum(x2 * ex1, axis=1)
    den = np.sqrt(ex1[:, 0] ** 2 + ex1[:, 1] ** 2 + etx2[:, 0] ** 2 + etx2[:, 1] ** 2)
    return num / np.maximum(den, 1e-300)


def _skew(t: np.ndarray) -> np.ndarray:
    return np.array([[0.0, -t[2], t[1]], [t[2], 0.0, -t[0]], [-t[1], t[0], 0.0]])


def _refine_relative_pose(
    r0: np.ndarray,
    t0: np.ndarray,
    na: np.ndarray,
    nb: np.ndarray,
    max_iterations: int = 30,
) -> tuple[np.ndarray, np.ndarray]:
    """LM over (R, unit t) minimizing squared Sampson error.

    Five parameters: a rotation update and a two-dof tangent rotation of the
    translation direction. Jacobians by forward differences; the problem is
    tiny so this costs nothing and avoids a page of algebra.
    """
    r = r0.copy()
    t = t0 / np.linalg.norm(t0)
    res = _sampson_signed(_skew(t) @ r, na, nb)
    cost = float(res @ res)
    lam = 1e-3
    h = 1e-7
    for _ in range(max_iterations):
        pivot = np.array([1.0, 0.0, 0.0]) if abs(t[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
        b1 = np.cross(t, pivot)
        b1 /= np.linalg.norm(b1)
        b2 = np.cross(t, b1)
        j = np.empty((len(na), 5))
        for k in range(3):
            w = np.zeros(3)
            w[k] = h
            j[:, k] = (_sampson_signed(_skew(t) @ (_rodrigues(w) @ r), na, nb) - res) / h
        for k, bv in enumerate((b1, b2)):
            t_h = _rodrigues(bv * h) @ t
            j[:, 3 + k] = (_sampson_signed(_skew(t_h) @ r, na, nb) - res) / h
        jtj = j.T @ j
        g = j.T @ res
        stepped = False
        for _ in range(10):
            damped = jtj + lam * np.diag(np.maximum(np.diag(jtj), 1e-15))
            try:
                dx = np.linalg.solve(damped, -g)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            r_try = _rodrigues(dx[:3]) @ r
            t_try = _rodrigues(b1 * dx[3] + b2 * dx[4]) @ t
            res_try = _sampson_signed(_skew(t_try) @ r_try, na, nb)
            cost_try = float(res_try @ res_try)
            if cost_try < cost:
                r, t, res, cost = r_try, t_try, res_try, cost_try
                lam = max(lam / 3.0, 1e-12)
                stepped = True
                break
            lam *= 5.0
            if lam > 1e12:
                break
        if not stepped or float(np.max(np.abs(dx))) < 1e-14:
            break
    return r, t


def decompose_essential(
    e: np.ndarray, x1: np.ndarray, x2: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Choose the (R, t) with the most points in front of both cameras.

    Ties break to the lowest candidate index for determinism.
    """
    u, _, vt = np.linalg.svd(e)
    if np.linalg.det(u) < 0:
        u = -u
    if np.linalg.det(vt) < 0:
        vt = -vt
    w = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    r1 = u @ w @ vt
    r2 = u @ w.T @ vt
    t = u[:, 2]
    candidates = [(r1, t), (r1, -t), (r2, t), (r2, -t)]
    best_idx = 0
    best_count = -1
    for idx, (r, tv) in enumerate(candidates):
        z1, z2 = _triangulate_normalized(x1, x2, r, tv)
        count = int(np.count_nonzero((z1 > 0) & (z2 > 0)))
        if count > best_count:
            best_count = count
            best_idx = idx
    return candidates[best_idx]


def estimate_two_view(
    pts_a: np.ndarray,
    pts_b: np.ndarray,
    k_a: np.ndarray | None = None,
    k_b: np.ndarray | None = None,
    *,
    threshold_px: float = 2.0,
    min_inliers: int = 15,
    max_iterations: int = 2000,
    confidence: float = 0.999,
    seed: int = 0,
) -> TwoViewResult:
    """RANSAC two-view geometry from pixel matches.

    With intrinsics the minimal model is an essential matrix (8-point linear
    variant) and the relative pose is recovered with a cheirality check;
    without intrinsics only the fundamental matrix and inlier mask are
    returned. Inliers are matches with Sampson distance below threshold_px.
    Fixed seed gives a bit-reproducible inlier mask.
    """
    pts_a = np.asarray(pts_a, dtype=np.float64).reshape(-1, 2)
    pts_b = np.asarray(pts_b, dtype=np.float64).reshape(-1, 2)
    n = len(pts_a)
    if n != len(pts_b):
        raise ValueError("match arrays differ in length")
    if n < 8:
        raise InsufficientInliersError(f"{n} matches, need at least 8")

    calibrated = k_a is not None and k_b is not None
    if calibrated:
        ka_inv = np.linalg.inv(k_a)
        kb_inv = np.linalg.inv(k_b)
        norm_a = (np.hstack([pts_a, np.ones((n, 1))]) @ ka_inv.T)[:, :2]
        norm_b = (np.hstack([pts_b, np.ones((n, 1))]) @ kb_inv.T)[:, :2]

    rng = np.random.default_rng(seed)
    best_mask = np.zeros(n, dtype=bool)
    best_count = 0
    best_f = np.eye(3)
    iterations = 0
    for it in range(max_iterations):
        iterations = it + 1
        sample = rng.choice(n, size=8, replace=False)
        if calibrated:
            # Score the unprojected linear fit; forcing equal singular values
            # on a noisy minimal sample wrecks consensus on low-relief scenes.
            # The returned model is projected onto the essential manifold
            # after the refit stage below.
            e = _eight_point(norm_a[sample], norm_b[sample], essential=False)
            f = kb_inv.T @ e @ ka_inv
        else:
            na, ta = _hartley_normalize(pts_a[sample])
            nb, tb = _hartley_normalize(pts_b[sample])
            fn = _eight_point(na, nb, essential=False)
            f = tb.T @ fn @ ta
        d = sampson_distance(f, pts_a, pts_b)
        mask = d < threshold_px
        count = int(np.count_nonzero(mask))
        if count > best_count:
            best_count = count
            best_mask = mask
            best_f = f
        if best_count > 0:
            ratio = best_count / n
            if ratio >= 1.0 or iterations >= _ransac_iterations_needed(
                confidence, ratio, 8
            ):
                break

    # Iterated least-squares refit on the consensus set with an unconstrained
    # fundamental fit, which stays well conditioned on low-relief scenes where
    # the rank-projected essential estimate degrades. A refit is kept only
    # when it does not shrink the consensus.
    for _ in range(2):
        if best_count < 8:
            break
        na, ta = _hartley_normalize(pts_a[best_mask])
        nb, tb = _hartley_normalize(pts_b[best_mask])
        fn = _eight_point(na, nb, essential=False)
        f = tb.T @ fn @ ta
        d = sampson_distance(f, pts_a, pts_b)
        mask = d < threshold_px
        count = int(np.count_nonzero(mask))
        if count < best_count:
            break
        grew = count > best_count
        best_mask, best_count, best_f = mask, count, f
        if not grew:
            break

    if best_count < min_inliers:
        raise InsufficientInliersError(
            f"{best_count} inliers below the minimum of {min_inliers}"
        )

    rotation = None
    translation = None
    if calibrated:
        e = k_b.T @ best_f @ k_a
        u, s, vt = np.linalg.svd(e)
        m = 0.5 * (s[0] + s[1])
        e = u @ np.diag([m, m, 0.0]) @ vt
        rotation, translation = decompose_essential(
            e, norm_a[best_mask], norm_b[best_mask]
        )
        rotation, translation = _refine_relative_pose(
            rotation, translation, norm_a[best_mask], norm_b[best_mask]
        )
        # refinement minimizes Sampson error, which is blind to the sign of t
        # and the twisted pair; re-pick the sheet that keeps inliers in front
        e = _skew(translation) @ rotation
        rotation, translation = decompose_essential(
            e, norm_a[best_mask], norm_b[best_mask]
        )
        e = _skew(translation) @ rotation
        f = kb_inv.T @ e @ ka_inv
        d = sampson_distance(f, pts_a, pts_b)
        mask = d < threshold_px
        if int(np.count_nonzero(mask)) >= best_count:
            best_mask = mask
            best_count = int(np.count_nonzero(mask))
            best_f = f
    return TwoViewResult(best_mask, rotation, translation, best_f, iterations)


# ---------------------------------------------------------------------------
# Pose estimation for incremental registration
# ---------------------------------------------------------------------------


def _rodrigues(omega: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(omega))
    if theta < 1e-12:
        return np.eye(3)
    k = omega / theta
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + math.sin(theta) * kx + (1 - math.cos(theta)) * (kx @ kx)


def refine_pose(
    cam: CameraParameters,
    positions: np.ndarray,
    pixels: np.ndarray,
    max_iterations: int = 30,
) -> CameraParameters:
    """LM over the 6-dof pose with the 3D points held fixed."""
    r = cam.rotation.copy()
    t = cam.translation.copy()
    pts = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    pix = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)

    def residuals(rm, tv):
        xc = pts @ rm.T + tv
        z = np.maximum(xc[:, 2], MIN_DEPTH)
        u = cam.fx * xc[:, 0] / z + cam.cx
        v = cam.fy * xc[:, 1] / z + cam.cy
        res = np.column_stack([u - pix[:, 0], v - pix[:, 1]])
        res[xc[:, 2] <= MIN_DEPTH] = 1e6
        return res.ravel(), xc

    res, xc = residuals(r, t)
    cost = float(res @ res)
    lam = 1e-3
    for _ in range(max_iterations):
        z = np.maximum(xc[:, 2], MIN_DEPTH)
        zero = np.zeros(len(pts))
        d_proj = np.stack(
            [
                np.column_stack([cam.fx / z, zero, -cam.fx * xc[:, 0] / z**2]),
                np.column_stack([zero, cam.fy / z, -cam.fy * xc[:, 1] / z**2]),
            ],
            axis=1,
        )  # (n, 2, 3)
        p = pts @ r.T  # rotation part only; d xc / d omega = -[p]x
        px = np.zeros((len(pts), 3, 3))
        px[:, 0, 1] = -p[:, 2]
        px[:, 0, 2] = p[:, 1]
        px[:, 1, 0] = p[:, 2]
        px[:, 1, 2] = -p[:, 0]
        px[:, 2, 0] = -p[:, 1]
        px[:, 2, 1] = p[:, 0]
        j_omega = -np.einsum("nij,njk->nik", d_proj, px)
        j_t = d_proj
        j = np.concatenate([j_omega, j_t], axis=2).reshape(-1, 6)
        jtj = j.T @ j
        g = j.T @ res
        stepped = False
        for _ in range(10):
            damped = jtj + lam * np.diag(np.maximum(np.diag(jtj), 1e-12))
            try:
                dx = np.linalg.solve(damped, -g)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            r_try = _rodrigues(dx[:3]) @ r
            t_try = t + dx[3:]
            res_try, xc_try = residuals(r_try, t_try)
            cost_try = float(res_try @ res_try)
            if cost_try < cost:
                r, t, res, xc, cost = r_try, t_try, res_try, xc_try, cost_try
                lam = max(lam / 3.0, 1e-12)
                stepped = True
                break
            lam *= 5.0
            if lam > 1e12:
                break
        if not stepped or float(np.max(np.abs(dx))) < 1e-12:
            break
    # Re-orthonormalize against accumulated drift
    u, _, vt = np.linalg.svd(r)
    r = u @ vt
    if np.linalg.det(r) < 0:
        u[:, -1] = -u[:, -1]
        r = u @ vt
    return cam.with_pose(r, t)


def resect_camera(
    positions: np.ndarray,
    pixels: np.ndarray,
    template: CameraParameters,
    *,
    threshold_px: float = 4.0,
    min_inliers: int = 12,
    max_iterations: int = 1000,
    confidence: float = 0.999,
    seed: int = 0,
) -> tuple[CameraParameters, np.ndarray]:
    """RANSAC camera resection from 2D-3D correspondences (intrinsics known).

    The template supplies intrinsics and image size; the returned camera has
    the estimated pose. Raises InsufficientInliersError on failure.
    """
    pts = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    pix = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    n = len(pts)
    if n < 6:
        raise InsufficientInliersError(f"{n} correspondences, need at least 6")
    k_inv = np.linalg.inv(template.k_matrix)

    def solve_dlt(idx: np.ndarray) -> tuple[np.ndarray, np.ndarray] | None:
        a = np.zeros((2 * len(idx), 12))
        for row, i in enumerate(idx):
            x, y, z = pts[i]
            u, v = pix[i]
            a[2 * row, 0:4] = [x, y, z, 1.0]
            a[2 * row, 8:12] = [-u * x, -u * y, -u * z, -u]
            a[2 * row + 1, 4:8] = [x, y, z, 1.0]
            a[2 * row + 1, 8:12] = [-v * x, -v * y, -v * z, -v]
        _, _, vt = np.linalg.svd(a)
        p = vt[-1].reshape(3, 4)
        m = k_inv @ p
        u_m, s_m, vt_m = np.linalg.svd(m[:, :3])
        if np.min(s_m) < 1e-12:
            return None
        r = u_m @ vt_m
        scale = float(np.mean(s_m))
        if np.linalg.det(r) < 0:
            r = -r
            scale = -scale
        t = m[:, 3] / scale
        return r, t

    def reproj_errors(r: np.ndarray, t: np.ndarray) -> np.ndarray:
        xc = pts @ r.T + t
        z = xc[:, 2]
        bad = z <= MIN_DEPTH
        zs = np.where(bad, 1.0, z)
        u = template.fx * xc[:, 0] / zs + template.cx
        v = template.fy * xc[:, 1] / zs + template.cy
        err = np.hypot(u - pix[:, 0], v - pix[:, 1])
        err[bad] = np.inf
        return err

    rng = np.random.default_rng(seed)
    best_mask = np.zeros(n, dtype=bool)
    best_count = 0
    best_pose = None
    for it in range(max_iterations):
        sample = rng.choice(n, size=6, replace=False)
        sol = solve_dlt(sample)
        if sol is None:
            continue
        err = reproj_errors(*sol)
        mask = err < threshold_px
        count = int(np.count_nonzero(mask))
        if count > best_count:
            best_count, best_mask, best_pose = count, mask, sol
        if best_count > 0:
            ratio = best_count / n
            if ratio >= 1.0 or it + 1 >= _ransac_iterations_needed(confidence, ratio, 6):
                break
    if best_pose is None or best_count < min_inliers:
        raise InsufficientInliersError(
            f"resection found {best_count} inliers, need {min_inliers}"
        )
    sol = solve_dlt(np.flatnonzero(best_mask))
    if sol is not None:
        err = reproj_errors(*sol)
        mask = err < threshold_px
        if int(np.count_nonzero(mask)) >= best_count:
            best_pose, best_mask = sol, mask
    cam = template.with_pose(*best_pose)
    cam = refine_pose(cam, pts[best_mask], pix[best_mask])
    return cam, best_mask


# ---------------------------------------------------------------------------
# Rig file format
# ---------------------------------------------------------------------------


def save_rig(cams: Iterable[CameraParameters], path: str | Path) -> None:
    """Write a rig as a JSON array of views (UTF-8, LF endings)."""
    views = []
    for cam in cams:
        views.append(
            {
                "view_id": cam.view_id,
                "fx": cam.fx,
                "fy": cam.fy,
                "cx": cam.cx,
                "cy": cam.cy,
                "width": cam.width,
                "height": cam.height,
                "rotation": [float(v) for v in cam.rotation.ravel()],
                "translation": [float(v) for v in cam.translation],
            }
        )
    Path(path).write_text(json.dumps(views, indent=2) + "\n", encoding="utf-8", newline="\n")


def load_rig(path: str | Path) -> list[CameraParameters]:
    views = json.loads(Path(path).read_text(encoding="utf-8"))
    cams = []
    for v in views:
        cams.append(
            CameraParameters(
                view_id=int(v["view_id"]),
                fx=float(v["fx"]),
                fy=float(v["fy"]),
                cx=float(v["cx"]),
                cy=float(v["cy"]),
                rotation=np.array(v["rotation"], dtype=np.float64).reshape(3, 3),
                translation=np.array(v["translation"], dtype=np.float64),
                width=int(v["width"]),
                height=int(v["height"]),
            )
        )
    return cams
