"""Procedural pore-textured surface, 16-view arc renderer and ground-truth oracle.

The scene is a Gaussian bump height field over a bounded square, textured
with dark Poisson-disk spots on a low-frequency albedo, lit by one fixed
directional light and rendered through pinhole cameras on an arc. The
oracle answers exact pixel-to-surface queries and visibility tests from
per-view depth buffers. Everything is deterministic in the scene seed.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import CameraParameters, camera_depth, project, save_rig
from .imaging import ImageGray, save_image

logger = logging.getLogger(__name__)

N_VIEWS = 16
BASE_ALBEDO = 0.7
FADE_FRACTION = 0.1  # outer band of the half extent where albedo rolls off
ARC_ELEVATION_DEG = 65.0


@dataclass(frozen=True)
class SceneSpec:
    """Full description of one synthetic scene; the seed pins all randomness."""

    seed: int
    amplitude_mm: float = 3.0
    bump_sigma_mm: float = 18.0
    extent_mm: float = 60.0
    pore_density: float = 4.0  # centers per mm^2
    pore_radius_mm: float = 0.16
    pore_contrast: float = 0.5
    noise_amplitude: float = 0.08
    light: tuple = (0.25, -0.2, 0.95)
    rig_radius_mm: float = 300.0
    yaw_span_deg: float = 60.0
    image_size: int = 1024
    focal_px: float | None = None

    def __post_init__(self):
        if self.pore_density < 0:
            raise ValueError("pore density must be non-negative")
        if not 0 < self.yaw_span_deg <= 120.0:
            raise ValueError("yaw span must be in (0, 120] degrees")
        if self.extent_mm <= 0 or self.rig_radius_mm <= 0:
            raise ValueError("extent and rig radius must be positive")
        if self.amplitude_mm < 0 or self.bump_sigma_mm <= 0:
            raise ValueError("bad bump parameters")
        if self.pore_radius_mm <= 0:
            raise ValueError("pore radius must be positive")
        if self.image_size < 64:
            raise ValueError("image size below 64")
        lv = np.asarray(self.light, dtype=np.float64)
        if lv.shape != (3,) or np.linalg.norm(lv) < 1e-9 or lv[2] <= 0:
            raise ValueError("light must be a 3-vector with positive z")
        object.__setattr__(self, "light", tuple(float(v) for v in lv / np.linalg.norm(lv)))

    @property
    def focal(self) -> float:
        if self.focal_px is not None:
            return float(self.focal_px)
        # surface spans ~85% of the image width at rig distance
        return 0.85 * self.image_size * self.rig_radius_mm / self.extent_mm


def save_scene_spec(spec: SceneSpec, path: str | Path) -> None:
    d = dataclasses.asdict(spec)
    d["light"] = list(d["light"])
    Path(path).write_text(json.dumps(d, indent=2) + "\n", encoding="utf-8")


def load_scene_spec(path: str | Path) -> SceneSpec:
    d = json.loads(Path(path).read_text(encoding="utf-8"))
    d["light"] = tuple(d["light"])
    return SceneSpec(**d)


def make_rig(spec: SceneSpec) -> list[CameraParameters]:
    """16 cameras on an arc at fixed elevation, all aimed at the origin."""
    yaws = np.deg2rad(
        np.linspace(-spec.yaw_span_deg / 2.0, spec.yaw_span_deg / 2.0, N_VIEWS)
    )
    el = math.radians(ARC_ELEVATION_DEG)
    f = spec.focal
    half = spec.image_size / 2.0
    cams = []
    for i, yaw in enumerate(yaws):
        eye = spec.rig_radius_mm * np.array(
            [math.sin(yaw) * math.cos(el), -math.cos(yaw) * math.cos(el), math.sin(el)]
        )
        forward = -eye / np.linalg.norm(eye)
        up = np.array([0.0, 1.0, 0.0])
        right = np.cross(forward, up)
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        r = np.stack([right, down, forward])
        cams.append(
            CameraParameters(
                view_id=i,
                fx=f,
                fy=f,
                cx=half,
                cy=half,
                rotation=r,
                translation=-r @ eye,
                width=spec.image_size,
                height=spec.image_size,
            )
        )
    return cams


def frontal_view(spec: SceneSpec) -> int:
    yaws = np.linspace(-spec.yaw_span_deg / 2.0, spec.yaw_span_deg / 2.0, N_VIEWS)
    return int(np.argmin(np.abs(yaws)))


# ---------------------------------------------------------------------------
# Texture synthesis
# ---------------------------------------------------------------------------


def poisson_disk_centers(rng: np.random.Generator, extent: float, density: float, radius: float) -> np.ndarray:
    """Dart-throwing sampler with a spacing grid; spacing is 2 * radius.

    Aims at round(density * extent^2) accepted centers and keeps throwing
    until the target is met or an attempt budget runs out, so for feasible
    densities the count lands on the target by construction.
    """
    target = int(round(density * extent * extent))
    if target == 0:
        return np.zeros((0, 2))
    spacing = 2.0 * radius
    cell = spacing / math.sqrt(2.0)
    n_cells = max(int(math.ceil(extent / cell)), 1)
    grid = np.full((n_cells, n_cells), -1, dtype=np.int64)
    pts = np.zeros((target, 2))
    count = 0
    half = extent / 2.0
    max_attempts = 60 * target
    spacing_sq = spacing * spacing
    for _ in range(max_attempts):
        if count >= target:
            break
        p = rng.uniform(-half, half, size=2)
        ci = min(int((p[0] + half) / cell), n_cells - 1)
        cj = min(int((p[1] + half) / cell), n_cells - 1)
        ok = True
        for di in range(max(ci - 2, 0), min(ci + 3, n_cells)):
            for dj in range(max(cj - 2, 0), min(cj + 3, n_cells)):
                k = grid[di, dj]
                if k >= 0:
                    d = pts[k] - p
                    if d[0] * d[0] + d[1] * d[1] < spacing_sq:
                        ok = False
                        break
            if not ok:
                break
        if ok:
            pts[count] = p
            grid[ci, cj] = count
            count += 1
    if count < target:
        logger.warning(
            "poisson sampler placed %d of %d targets (density near packing limit)",
            count,
            target,
        )
    return pts[:count]


def _perlin(rng: np.random.Generator, coords: np.ndarray, wavelength: float) -> np.ndarray:
    """Classic gradient-lattice noise in [-1, 1]-ish range, vectorized.

    coords: (..., 2) in mm.
    """
    g = coords / wavelength
    i0 = np.floor(g).astype(np.int64)
    f = g - i0
    # hashed lattice gradients via a shuffled permutation table
    perm = rng.permutation(256)
    angles = rng.uniform(0, 2 * np.pi, 256)
    grads = np.stack([np.cos(angles), np.sin(angles)], axis=1)

    def grad_at(ix, iy):
        h = perm[(perm[ix & 255] + iy) & 255]
        return grads[h]

    def fade(t):
        return t * t * t * (t * (t * 6 - 15) + 10)

    ix, iy = i0[..., 0], i0[..., 1]
    fx, fy = f[..., 0], f[..., 1]
    n00 = grad_at(ix, iy)[..., 0] * fx + grad_at(ix, iy)[..., 1] * fy
    n10 = grad_at(ix + 1, iy)[..., 0] * (fx - 1) + grad_at(ix + 1, iy)[..., 1] * fy
    n01 = grad_at(ix, iy + 1)[..., 0] * fx + grad_at(ix, iy + 1)[..., 1] * (fy - 1)
    n11 = grad_at(ix + 1, iy + 1)[..., 0] * (fx - 1) + grad_at(ix + 1, iy + 1)[..., 1] * (fy - 1)
    u, v = fade(fx), fade(fy)
    nx0 = n00 * (1 - u) + n10 * u
    nx1 = n01 * (1 - u) + n11 * u
    return (nx0 * (1 - v) + nx1 * v) * math.sqrt(2.0)


class _AlbedoMap:
    """Albedo texture on a regular grid over the extent square."""

    def __init__(self, spec: SceneSpec, centers: np.ndarray, rng_noise: np.random.Generator):
        self.extent = spec.extent_mm
        n = max(2 * spec.image_size, 256)
        self.n = n
        self.step = spec.extent_mm / (n - 1)
        half = spec.extent_mm / 2.0
        axis = np.linspace(-half, half, n)
        xs, ys = np.meshgrid(axis, axis)
        coords = np.stack([xs, ys], axis=-1)
        tex = np.full((n, n), BASE_ALBEDO, dtype=np.float64)
        if spec.noise_amplitude > 0:
            tex += spec.noise_amplitude * _perlin(rng_noise, coords, spec.extent_mm / 4.0)
        sigma = spec.pore_radius_mm / 2.0
        win = max(int(math.ceil(3.0 * sigma / self.step)), 1)
        for cx, cy in centers:
            j = int(round((cx + half) / self.step))
            i = int(round((cy + half) / self.step))
            i0, i1 = max(i - win, 0), min(i + win + 1, n)
            j0, j1 = max(j - win, 0), min(j + win + 1, n)
            if i0 >= i1 or j0 >= j1:
                continue
            wy = axis[i0:i1] - cy
            wx = axis[j0:j1] - cx
            d2 = wy[:, None] ** 2 + wx[None, :] ** 2
            tex[i0:i1, j0:j1] -= spec.pore_contrast * np.exp(-d2 / (2.0 * sigma * sigma))
        # smooth roll-off to black at the surface boundary
        margin = half * FADE_FRACTION
        ramp = np.clip((half - np.abs(axis)) / margin, 0.0, 1.0)
        ramp = ramp * ramp * (3.0 - 2.0 * ramp)
        tex *= ramp[None, :]
        tex *= ramp[:, None]
        self.tex = np.clip(tex, 0.0, 1.0).astype(np.float32)

    def sample(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        half = self.extent / 2.0
        gx = np.clip((x + half) / self.step, 0.0, self.n - 1.0)
        gy = np.clip((y + half) / self.step, 0.0, self.n - 1.0)
        x0 = np.floor(gx).astype(np.int64)
        y0 = np.floor(gy).astype(np.int64)
        x1 = np.minimum(x0 + 1, self.n - 1)
        y1 = np.minimum(y0 + 1, self.n - 1)
        fx = (gx - x0).astype(np.float32)
        fy = (gy - y0).astype(np.float32)
        t = self.tex
        top = t[y0, x0] * (1 - fx) + t[y0, x1] * fx
        bot = t[y1, x0] * (1 - fx) + t[y1, x1] * fx
        return top * (1 - fy) + bot * fy


# ---------------------------------------------------------------------------
# Surface and rendering
# ---------------------------------------------------------------------------


class _Surface:
    def __init__(self, spec: SceneSpec):
        self.a = spec.amplitude_mm
        self.s2 = spec.bump_sigma_mm**2
        self.half = spec.extent_mm / 2.0

    def height(self, x, y):
        return self.a * np.exp(-(x * x + y * y) / (2.0 * self.s2))

    def normal(self, x, y):
        h = self.height(x, y)
        hx = -x / self.s2 * h
        hy = -y / self.s2 * h
        inv = 1.0 / np.sqrt(hx * hx + hy * hy + 1.0)
        return -hx * inv, -hy * inv, inv

    def inside(self, x, y):
        return (np.abs(x) <= self.half) & (np.abs(y) <= self.half)


MARCH_STEPS = 48
BISECT_ITERS = 30


def _intersect_rays(surface: _Surface, origin: np.ndarray, dirs: np.ndarray):
    """First surface crossing per ray by marching + bisection.

    dirs: (n, 3), not necessarily unit. Returns (t, hit_mask); points with no
    crossing inside the extent square get hit=False.
    """
    n = len(dirs)
    dz = dirs[:, 2]
    descending = dz < -1e-12
    t_top = np.where(descending, (surface.a + 1e-3 - origin[2]) / np.where(descending, dz, -1.0), 0.0)
    t_bot = np.where(descending, (-1e-3 - origin[2]) / np.where(descending, dz, -1.0), 0.0)
    t_top = np.maximum(t_top, 0.0)

    def f(t):
        p = origin[None, :] + t[:, None] * dirs
        return p[:, 2] - surface.height(p[:, 0], p[:, 1])

    lo = t_top.copy()
    hi = t_top.copy()
    found = np.zeros(n, dtype=bool)
    f_lo = f(t_top)
    step = (t_bot - t_top) / MARCH_STEPS
    t_cur = t_top.copy()
    f_cur = f_lo
    for _ in range(MARCH_STEPS):
        t_next = t_cur + step
        f_next = f(t_next)
        crossing = (~found) & descending & (f_cur > 0) & (f_next <= 0)
        lo = np.where(crossing, t_cur, lo)
        hi = np.where(crossing, t_next, hi)
        found |= crossing
        t_cur, f_cur = t_next, f_next
    for _ in range(BISECT_ITERS):
        mid = 0.5 * (lo + hi)
        pos = f(mid) > 0
        lo = np.where(found & pos, mid, lo)
        hi = np.where(found & ~pos, mid, hi)
    t = 0.5 * (lo + hi)
    p = origin[None, :] + t[:, None] * dirs
    hit = found & surface.inside(p[:, 0], p[:, 1])
    return t, hit


class OracleHandle:
    """Ground-truth access for one generated scene; read-only and reusable."""

    def __init__(self, spec: SceneSpec, cams: list[CameraParameters], surface: _Surface, depth_maps: np.ndarray):
        self.spec = spec
        self.cameras = cams
        self._surface = surface
        self.depth_maps = depth_maps  # (views, h, w) camera-z, inf for background
        self.depth_tolerance_mm = 0.2

    def surface_point(self, view: int, pixel) -> np.ndarray | None:
        """Exact 3D surface point seen at a pixel, or None for background."""
        cam = self.cameras[view]
        x, y = float(pixel[0]), float(pixel[1])
        if not (0 <= x <= cam.width - 1 and 0 <= y <= cam.height - 1):
            return None
        d = cam.rotation.T @ np.array([(x - cam.cx) / cam.fx, (y - cam.cy) / cam.fy, 1.0])
        t, hit = _intersect_rays(self._surface, cam.center, d[None, :])
        if not hit[0]:
            return None
        return cam.center + t[0] * d

    def surface_points(self, view: int, pixels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Vectorized surface_point: (points (n,3), hit mask)."""
        cam = self.cameras[view]
        px = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
        dirs = np.column_stack(
            [
                (px[:, 0] - cam.cx) / cam.fx,
                (px[:, 1] - cam.cy) / cam.fy,
                np.ones(len(px)),
            ]
        ) @ cam.rotation  # row-vector form of R^T @ d
        t, hit = _intersect_rays(self._surface, cam.center, dirs)
        pts = cam.center[None, :] + t[:, None] * dirs
        inb = (
            (px[:, 0] >= 0)
            & (px[:, 0] <= cam.width - 1)
            & (px[:, 1] >= 0)
            & (px[:, 1] <= cam.height - 1)
        )
        return pts, hit & inb

    def is_visible(self, point, view: int) -> bool:
        cam = self.cameras[view]
        p = np.asarray(point, dtype=np.float64)
        pix = project(p, cam)
        if pix is None:
            return False
        if not (0 <= pix[0] <= cam.width - 1 and 0 <= pix[1] <= cam.height - 1):
            return False
        # Compare against the deepest of the 2x2 surrounding buffer entries.
        # Depth at a sub-pixel location sits between its neighbours on a
        # continuous surface, so the nearest-sample compare alone rejects
        # valid points on steep flanks.
        x0 = min(int(pix[0]), cam.width - 2)
        y0 = min(int(pix[1]), cam.height - 2)
        buf = self.depth_maps[view, y0 : y0 + 2, x0 : x0 + 2]
        finite = buf[np.isfinite(buf)]
        if finite.size == 0:
            return False
        z = camera_depth(p, cam)
        return bool(z <= finite.max() + self.depth_tolerance_mm)

    def height_at(self, x: float, y: float) -> float:
        return float(self._surface.height(np.float64(x), np.float64(y)))


def _render_view(spec: SceneSpec, cam: CameraParameters, surface: _Surface, albedo: _AlbedoMap):
    size = spec.image_size
    light = np.asarray(spec.light)
    img = np.zeros((size, size), dtype=np.float32)
    depth = np.full((size, size), np.inf, dtype=np.float32)
    origin = cam.center
    rows_per_chunk = max(1, (1 << 22) // (size * 8))
    for r0 in range(0, size, rows_per_chunk):
        r1 = min(r0 + rows_per_chunk, size)
        ys, xs = np.mgrid[r0:r1, 0:size]
        dirs = np.column_stack(
            [
                (xs.ravel() - cam.cx) / cam.fx,
                (ys.ravel() - cam.cy) / cam.fy,
                np.ones(xs.size),
            ]
        ) @ cam.rotation
        t, hit = _intersect_rays(surface, origin, dirs)
        p = origin[None, :] + t[:, None] * dirs
        nx, ny, nz = surface.normal(p[:, 0], p[:, 1])
        lam = np.maximum(nx * light[0] + ny * light[1] + nz * light[2], 0.0)
        alb = albedo.sample(p[:, 0], p[:, 1])
        shade = np.where(hit, alb * lam, 0.0).astype(np.float32)
        img[r0:r1] = shade.reshape(r1 - r0, size)
        zc = (p @ cam.rotation[2]) + cam.translation[2]
        depth[r0:r1] = np.where(hit, zc, np.inf).reshape(r1 - r0, size).astype(np.float32)
    pixels = np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    return ImageGray(pixels), depth


def generate_scene(spec: SceneSpec) -> tuple[OracleHandle, list[ImageGray]]:
    """Render all 16 views and build the oracle. Deterministic in spec.seed."""
    ss = np.random.SeedSequence(spec.seed)
    rng_pores, rng_noise = [np.random.default_rng(s) for s in ss.spawn(2)]
    centers = poisson_disk_centers(
        rng_pores, spec.extent_mm, spec.pore_density, spec.pore_radius_mm
    )
    surface = _Surface(spec)
    albedo = _AlbedoMap(spec, centers, rng_noise)
    cams = make_rig(spec)
    images = []
    depths = np.zeros((N_VIEWS, spec.image_size, spec.image_size), dtype=np.float32)
    for i, cam in enumerate(cams):
        img, depth = _render_view(spec, cam, surface, albedo)
        images.append(img)
        depths[i] = depth
        logger.debug("rendered view %d", i)
    oracle = OracleHandle(spec, cams, surface, depths)
    oracle.pore_centers = centers
    return oracle, images


def augment_photometric(
    images: list[ImageGray], seed: int, gain_range=(0.8, 1.2), bias_range=(-10.0, 10.0)
) -> list[ImageGray]:
    """Per-view gain/bias jitter standing in for exposure differences."""
    rng = np.random.default_rng(seed)
    out = []
    for img in images:
        gain = rng.uniform(*gain_range)
        bias = rng.uniform(*bias_range)
        vals = np.rint(img.pixels.astype(np.float64) * gain + bias)
        out.append(ImageGray(np.clip(vals, 0, 255).astype(np.uint8)))
    return out


def write_scene(
    spec: SceneSpec, oracle: OracleHandle, images: list[ImageGray], out_dir: str | Path
) -> None:
    """Scene directory layout: view PGMs, rig JSON, spec JSON."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i, img in enumerate(images):
        save_image(img, out / f"view{i:02d}.pgm")
    save_rig(oracle.cameras, out / "rig.json")
    save_scene_spec(spec, out / "scene.json")
