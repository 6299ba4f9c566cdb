"""Plane-sweep multi-view stereo with cross-view fusion.

Depth is estimated on a half-resolution grid (configurable scale) to keep
the sweep tractable on one core; fused points are full-precision 3D.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import uniform_filter

from ..errors import EmptySparseModelError
from ..geometry import CameraParameters
from ..imaging import ImageGray
from .sfm import SparseModel


@dataclass(frozen=True)
class MvsConfig:
    depth_samples: int = 96
    ncc_threshold: float = 0.6
    window: int = 7
    min_support: int = 3
    fuse_tol_mm: float = 0.5
    scale: int = 2
    # local variance gate, [0,1]^2 intensity units: pore windows sit around
    # 1e-2, bare shading gradients below 1e-5
    texture_floor: float = 3e-4
    range_pad: float = 0.1
    n_neighbors: int = 2


@dataclass
class DensePointCloud:
    positions: np.ndarray
    depths: np.ndarray
    source_views: np.ndarray
    support: np.ndarray
    depth_maps: dict[int, np.ndarray] = field(default_factory=dict)
    depth_scale: int = 2

    def __len__(self):
        return len(self.positions)

    def depth_at(self, view: int, pixel) -> float:
        """Estimated depth at a full-resolution pixel, NaN when unknown."""
        dm = self.depth_maps.get(view)
        if dm is None:
            return float("nan")
        c = int(round(pixel[0] / self.depth_scale))
        r = int(round(pixel[1] / self.depth_scale))
        if not (0 <= r < dm.shape[0] and 0 <= c < dm.shape[1]):
            return float("nan")
        return float(dm[r, c])


def _scaled_camera(cam: CameraParameters, scale: int) -> CameraParameters:
    s = 1.0 / scale
    return CameraParameters(
        cam.view_id,
        cam.fx * s,
        cam.fy * s,
        cam.cx * s,
        cam.cy * s,
        cam.rotation,
        cam.translation,
        width=cam.width // scale,
        height=cam.height // scale,
    )


def _shared_track_counts(model: SparseModel) -> dict[tuple[int, int], int]:
    counts: dict[tuple[int, int], int] = {}
    for tr in model.tracks:
        views = sorted({o.view_id for o in tr.observations})
        for i in range(len(views)):
            for j in range(i + 1, len(views)):
                key = (views[i], views[j])
                counts[key] = counts.get(key, 0) + 1
    return counts


def _pick_neighbors(view, registered, shared, k):
    scored = []
    for other in registered:
        if other == view:
            continue
        key = (min(view, other), max(view, other))
        scored.append((-shared.get(key, 0), other))
    scored.sort()
    return [v for _, v in scored[:k]]


def _depth_range(model: SparseModel, view: int, pad: float):
    cams = {c.view_id: c for c in model.cameras}
    cam = cams[view]
    depths = []
    all_depths = []
    for tr in model.tracks:
        z = float(cam.rotation[2] @ tr.point.position + cam.translation[2])
        all_depths.append(z)
        if any(o.view_id == view for o in tr.observations):
            depths.append(z)
    use = depths if len(depths) >= 5 else all_depths
    lo, hi = min(use), max(use)
    span = max(hi - lo, 1e-6)
    return lo - pad * span, hi + pad * span


def _sweep_view(ref_view, neighbors, cams_s, imgs_s, d_lo, d_hi, cfg: MvsConfig):
    """Winner-take-all depth map for one reference view, NaN where rejected."""
    cam_r = cams_s[ref_view]
    a = imgs_s[ref_view]
    h, w = a.shape
    win = cfg.window
    mean_a = uniform_filter(a, win, mode="constant")
    var_a = uniform_filter(a * a, win, mode="constant") - mean_a**2
    textured = var_a > cfg.texture_floor

    k_r_inv = np.linalg.inv(cam_r.k_matrix)
    gx, gy = np.meshgrid(
        np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64)
    )
    grid = np.stack([gx, gy, np.ones((h, w))], axis=0).reshape(3, -1)

    depths = np.linspace(d_lo, d_hi, cfg.depth_samples)
    scores = np.full((cfg.depth_samples, h, w), -1.0, dtype=np.float32)
    for di, d in enumerate(depths):
        acc = np.zeros((h, w), dtype=np.float32)
        n_ok = np.zeros((h, w), dtype=np.float32)
        for nb in neighbors:
            cam_n = cams_s[nb]
            r_rel = cam_n.rotation @ cam_r.rotation.T
            t_rel = cam_n.translation - r_rel @ cam_r.translation
            hmg = cam_n.k_matrix @ (
                r_rel + np.outer(t_rel, np.array([0.0, 0.0, 1.0 / d]))
            ) @ k_r_inv
            q = hmg @ grid
            valid = q[2] > 1e-9
            x = np.where(valid, q[0] / np.where(valid, q[2], 1.0), -1.0)
            y = np.where(valid, q[1] / np.where(valid, q[2], 1.0), -1.0)
            b_img = imgs_s[nb]
            inb = valid & (x >= 0) & (x <= w - 1.0001) & (y >= 0) & (y <= h - 1.0001)
            x0 = np.clip(np.floor(x).astype(np.int64), 0, w - 2)
            y0 = np.clip(np.floor(y).astype(np.int64), 0, h - 2)
            fx = (x - x0).astype(np.float32)
            fy = (y - y0).astype(np.float32)
            top = b_img[y0, x0] * (1 - fx) + b_img[y0, x0 + 1] * fx
            bot = b_img[y0 + 1, x0] * (1 - fx) + b_img[y0 + 1, x0 + 1] * fx
            warped = (top * (1 - fy) + bot * fy).reshape(h, w)
            vmask = inb.reshape(h, w).astype(np.float32)
            warped = warped * vmask

            mean_b = uniform_filter(warped, win, mode="constant")
            mean_ab = uniform_filter(a * warped, win, mode="constant")
            var_b = uniform_filter(warped * warped, win, mode="constant") - mean_b**2
            frac = uniform_filter(vmask, win, mode="constant")
            cov = mean_ab - mean_a * mean_b
            denom = np.sqrt(
                np.maximum(var_a, cfg.texture_floor)
                * np.maximum(var_b, cfg.texture_floor)
            )
            ncc = cov / denom
            full = frac > 0.999
            acc += np.where(full, ncc, 0.0)
            n_ok += full
        have = n_ok > 0
        scores[di] = np.where(have & textured, acc / np.maximum(n_ok, 1.0), -1.0)

    best = scores.argmax(axis=0)
    best_score = np.take_along_axis(scores, best[None], axis=0)[0]
    depth_map = depths[best].astype(np.float64)

    # parabolic refinement over the depth axis for interior winners
    interior = (best > 0) & (best < cfg.depth_samples - 1)
    r, c = np.nonzero(interior)
    if len(r):
        s0 = scores[best[r, c] - 1, r, c].astype(np.float64)
        s1 = best_score[r, c].astype(np.float64)
        s2 = scores[best[r, c] + 1, r, c].astype(np.float64)
        denom = s0 - 2 * s1 + s2
        step = np.where(np.abs(denom) > 1e-12, 0.5 * (s0 - s2) / np.where(denom == 0, 1, denom), 0.0)
        dstep = (d_hi - d_lo) / (cfg.depth_samples - 1)
        depth_map[r, c] += np.clip(step, -0.5, 0.5) * dstep

    depth_map[best_score < cfg.ncc_threshold] = np.nan
    return depth_map


def run_mvs(model: SparseModel, images, cfg: MvsConfig | None = None) -> DensePointCloud:
    """Densify a sparse model; raises EmptySparseModelError without one."""
    cfg = cfg or MvsConfig()
    if model.is_empty or len(model.registered) < 2:
        raise EmptySparseModelError(
            f"{len(model.registered)} registered views, {len(model.tracks)} tracks"
        )
    views = sorted(model.registered)
    cams = {c.view_id: c for c in model.cameras}
    cams_s = {v: _scaled_camera(cams[v], cfg.scale) for v in views}
    imgs_s = {}
    for v in views:
        px = images[v].pixels if isinstance(images[v], ImageGray) else np.asarray(images[v])
        imgs_s[v] = (px[:: cfg.scale, :: cfg.scale]).astype(np.float32) / 255.0

    shared = _shared_track_counts(model)
    depth_maps = {}
    for v in views:
        nbs = _pick_neighbors(v, views, shared, cfg.n_neighbors)
        lo, hi = _depth_range(model, v, cfg.range_pad)
        depth_maps[v] = _sweep_view(v, nbs, cams_s, imgs_s, lo, hi, cfg)

    # fusion: ascending views claim their samples; cross-view agreement
    # within fuse_tol_mm counts as support and consumes the agreeing cell
    consumed = {v: np.zeros(depth_maps[v].shape, dtype=bool) for v in views}
    pos_out, depth_out, view_out, support_out = [], [], [], []
    for v in views:
        dm = depth_maps[v]
        valid = np.isfinite(dm) & ~consumed[v]
        r, c = np.nonzero(valid)
        if len(r) == 0:
            continue
        cam = cams_s[v]
        z = dm[r, c]
        rays = np.linalg.inv(cam.k_matrix) @ np.stack([c, r, np.ones(len(r))])
        x_cam = rays * z
        x_world = cam.rotation.T @ (x_cam - cam.translation[:, None])

        support = np.ones(len(r), dtype=np.int64)
        agree_cells = []
        for o in views:
            if o == v:
                continue
            cam_o = cams_s[o]
            xc = cam_o.rotation @ x_world + cam_o.translation[:, None]
            z_o = xc[2]
            front = z_o > 1e-9
            u = np.where(front, cam_o.fx * xc[0] / np.where(front, z_o, 1) + cam_o.cx, -1)
            w_pix = np.where(front, cam_o.fy * xc[1] / np.where(front, z_o, 1) + cam_o.cy, -1)
            ui = np.round(u).astype(np.int64)
            vi = np.round(w_pix).astype(np.int64)
            hh, ww = depth_maps[o].shape
            inb = front & (ui >= 0) & (ui < ww) & (vi >= 0) & (vi < hh)
            ui = np.clip(ui, 0, ww - 1)
            vi = np.clip(vi, 0, hh - 1)
            d_o = depth_maps[o][vi, ui]
            agree = inb & np.isfinite(d_o) & (np.abs(d_o - z_o) <= cfg.fuse_tol_mm)
            support += agree
            agree_cells.append((o, vi, ui, agree))

        keep = support >= cfg.min_support
        if not keep.any():
            continue
        pos_out.append(x_world.T[keep])
        depth_out.append(z[keep])
        view_out.append(np.full(int(keep.sum()), v, dtype=np.int64))
        support_out.append(support[keep])
        for o, vi, ui, agree in agree_cells:
            used = agree & keep
            consumed[o][vi[used], ui[used]] = True

    if pos_out:
        positions = np.concatenate(pos_out)
        depths = np.concatenate(depth_out)
        source_views = np.concatenate(view_out)
        support = np.concatenate(support_out).astype(np.uint8)
    else:
        positions = np.zeros((0, 3))
        depths = np.zeros(0)
        source_views = np.zeros(0, dtype=np.int64)
        support = np.zeros(0, dtype=np.uint8)
    return DensePointCloud(
        positions, depths, source_views, support, depth_maps, cfg.scale
    )
