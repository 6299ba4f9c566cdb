"""Grayscale image container, difference-of-Gaussians keypoint detection and
patch sampling.

The detector is tuned for small blob-like texture: shallow pyramid, fine base
scale, permissive contrast threshold. Images are uint8 throughout; filtering
happens in float32.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import convolve1d, maximum_filter, minimum_filter

from .errors import ImageTooSmallError

logger = logging.getLogger(__name__)

MIN_SIDE = 64
PATCH_SIZE = 64


@dataclass(frozen=True)
class ImageGray:
    """A uint8 grayscale image, at least 64 px on each side."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.dtype != np.uint8:
            raise TypeError(f"expected uint8 pixels, got {px.dtype}")
        if px.ndim != 2:
            raise ValueError(f"expected a 2D array, got shape {px.shape}")
        if px.shape[0] < MIN_SIDE or px.shape[1] < MIN_SIDE:
            raise ImageTooSmallError(
                f"image {px.shape[1]}x{px.shape[0]} below minimum {MIN_SIDE}"
            )
        object.__setattr__(self, "pixels", px)
        px.setflags(write=False)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def as_float(self) -> np.ndarray:
        """float32 copy scaled to [0, 1]."""
        return self.pixels.astype(np.float32) / 255.0


def save_image(img: ImageGray, path: str | Path) -> None:
    path = Path(path)
    if path.suffix.lower() == ".pgm":
        header = f"P5\n{img.width} {img.height}\n255\n".encode("ascii")
        path.write_bytes(header + img.pixels.tobytes())
    elif path.suffix.lower() == ".png":
        from PIL import Image

        Image.fromarray(img.pixels, mode="L").save(path)
    else:
        raise ValueError(f"unsupported image extension: {path.suffix}")


def _read_pgm(data: bytes) -> np.ndarray:
    # token scanner that skips '#' comments, per the netpbm grammar
    tokens = []
    i = 0
    while len(tokens) < 4 and i < len(data):
        c = data[i : i + 1]
        if c == b"#":
            while i < len(data) and data[i : i + 1] != b"\n":
                i += 1
        elif c.isspace():
            i += 1
        else:
            j = i
            while j < len(data) and not data[j : j + 1].isspace():
                j += 1
            tokens.append(data[i:j])
            i = j
    if len(tokens) < 4 or tokens[0] != b"P5":
        raise ValueError("not a binary PGM file")
    width, height, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise ValueError(f"unsupported PGM maxval {maxval}")
    i += 1  # single whitespace byte after maxval
    raster = data[i : i + width * height]
    if len(raster) != width * height:
        raise ValueError("truncated PGM raster")
    return np.frombuffer(raster, dtype=np.uint8).reshape(height, width)


def load_image(path: str | Path) -> ImageGray:
    path = Path(path)
    if path.suffix.lower() == ".pgm":
        return ImageGray(_read_pgm(path.read_bytes()).copy())
    if path.suffix.lower() == ".png":
        from PIL import Image

        with Image.open(path) as im:
            return ImageGray(np.asarray(im.convert("L"), dtype=np.uint8).copy())
    raise ValueError(f"unsupported image extension: {path.suffix}")


# ---------------------------------------------------------------------------
# Scale space
# ---------------------------------------------------------------------------

ASSUMED_INPUT_SIGMA = 0.5


def _gaussian_kernel(sigma: float) -> np.ndarray:
    radius = max(int(math.ceil(4.0 * sigma)), 1)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return (k / k.sum()).astype(np.float32)


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    if sigma <= 0:
        return img.copy()
    k = _gaussian_kernel(sigma)
    out = convolve1d(img, k, axis=0, mode="reflect")
    return convolve1d(out, k, axis=1, mode="reflect")


@dataclass
class ScaleSpace:
    """Gaussian and DoG pyramids plus per-level absolute scales."""

    gaussians: list[list[np.ndarray]]
    dogs: list[list[np.ndarray]]
    sigma0: float
    intervals: int

    def sigma_at(self, octave: int, level: float) -> float:
        """Scale in full-resolution pixels for a (possibly fractional) level."""
        return self.sigma0 * 2.0 ** (octave + level / self.intervals)


def build_scale_space(
    img: ImageGray,
    octaves: int = 3,
    levels_per_octave: int = 5,
    sigma0: float = 1.1,
) -> ScaleSpace:
    """Standard incremental Gaussian pyramid with DoG differences.

    levels_per_octave counts Gaussian levels; the number of intervals is
    levels_per_octave - 3 so that downsampling can start from the level whose
    blur equals 2x the octave base.
    """
    if levels_per_octave < 4:
        raise ValueError("need at least 4 levels per octave")
    intervals = levels_per_octave - 3
    base = img.as_float()
    first_sigma = math.sqrt(max(sigma0**2 - ASSUMED_INPUT_SIGMA**2, 1e-6))
    current = gaussian_blur(base, first_sigma)

    gaussians = []
    dogs = []
    for octave in range(octaves):
        levels = [current]
        for lvl in range(1, levels_per_octave):
            s_prev = sigma0 * 2.0 ** ((lvl - 1) / intervals)
            s_cur = sigma0 * 2.0 ** (lvl / intervals)
            inc = math.sqrt(s_cur**2 - s_prev**2)
            levels.append(gaussian_blur(levels[-1], inc))
        gaussians.append(levels)
        dogs.append([levels[i + 1] - levels[i] for i in range(levels_per_octave - 1)])
        # seed the next octave from the 2x-blur level
        current = levels[levels_per_octave - 3][::2, ::2]
        if min(current.shape) < 16:
            break
    return ScaleSpace(gaussians, dogs, sigma0, intervals)


# ---------------------------------------------------------------------------
# Keypoint detection
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Keypoint:
    """A scale-space extremum in full-resolution pixel coordinates."""

    x: float
    y: float
    scale: float
    response: float
    orientation: float
    octave: int
    level: float


@dataclass
class DetectorConfig:
    octaves: int = 3
    levels_per_octave: int = 5
    sigma0: float = 1.1
    contrast_threshold: float = 0.006
    edge_ratio: float = 10.0
    max_keypoints: int | None = None

    def __post_init__(self):
        if self.contrast_threshold <= 0:
            raise ValueError("contrast_threshold must be positive")
        if self.edge_ratio < 1:
            raise ValueError("edge_ratio must be at least 1")


_CROSS = np.ones((3, 3, 3), dtype=bool)
_CROSS[1, 1, 1] = False


def _local_extrema(stack: np.ndarray, floor: float) -> tuple[np.ndarray, np.ndarray]:
    """(level, y, x) indices of strict 26-neighborhood extrema in the middle
    slices of a DoG stack, prefiltered by |value| > floor."""
    neigh_max = maximum_filter(stack, footprint=_CROSS, mode="nearest")
    neigh_min = minimum_filter(stack, footprint=_CROSS, mode="nearest")
    is_max = (stack > neigh_max) & (stack > floor)
    is_min = (stack < neigh_min) & (stack < -floor)
    mask = is_max | is_min
    mask[0] = False
    mask[-1] = False
    mask[:, :1, :] = False
    mask[:, -1:, :] = False
    mask[:, :, :1] = False
    mask[:, :, -1:] = False
    lvl, yy, xx = np.nonzero(mask)
    return np.stack([lvl, yy, xx], axis=1), stack[lvl, yy, xx]


def _refine_candidates(
    stack: np.ndarray, idx: np.ndarray, contrast: float, edge_ratio: float
) -> list[tuple[float, float, float, float]]:
    """Iterative 3D quadratic refinement. Returns (level, y, x, response)."""
    n_lvl, h, w = stack.shape
    out = []
    for lvl0, y0, x0 in idx:
        lvl, y, x = int(lvl0), int(y0), int(x0)
        ok = False
        offset = np.zeros(3)
        for _ in range(5):
            cube = stack[lvl - 1 : lvl + 2, y - 1 : y + 2, x - 1 : x + 2].astype(
                np.float64
            )
            grad = 0.5 * np.array(
                [
                    cube[2, 1, 1] - cube[0, 1, 1],
                    cube[1, 2, 1] - cube[1, 0, 1],
                    cube[1, 1, 2] - cube[1, 1, 0],
                ]
            )
            c = cube[1, 1, 1]
            dss = cube[2, 1, 1] + cube[0, 1, 1] - 2 * c
            dyy = cube[1, 2, 1] + cube[1, 0, 1] - 2 * c
            dxx = cube[1, 1, 2] + cube[1, 1, 0] - 2 * c
            dsy = 0.25 * (cube[2, 2, 1] - cube[2, 0, 1] - cube[0, 2, 1] + cube[0, 0, 1])
            dsx = 0.25 * (cube[2, 1, 2] - cube[2, 1, 0] - cube[0, 1, 2] + cube[0, 1, 0])
            dyx = 0.25 * (cube[1, 2, 2] - cube[1, 2, 0] - cube[1, 0, 2] + cube[1, 0, 0])
            hess = np.array([[dss, dsy, dsx], [dsy, dyy, dyx], [dsx, dyx, dxx]])
            try:
                offset = np.linalg.solve(hess, -grad)
            except np.linalg.LinAlgError:
                break
            if np.all(np.abs(offset) <= 0.5):
                ok = True
                break
            lvl += int(round(float(np.clip(offset[0], -1, 1))))
            y += int(round(float(np.clip(offset[1], -1, 1))))
            x += int(round(float(np.clip(offset[2], -1, 1))))
            if not (1 <= lvl < n_lvl - 1 and 1 <= y < h - 1 and 1 <= x < w - 1):
                break
        if not ok:
            continue
        value = c + 0.5 * float(grad @ offset)
        if not abs(value) > contrast:
            continue
        tr = dyy + dxx
        det = dyy * dxx - dyx * dyx
        if det <= 0 or tr * tr / det >= (edge_ratio + 1) ** 2 / edge_ratio:
            continue
        out.append((lvl + offset[0], y + offset[1], x + offset[2], abs(value)))
    return out


def _dominant_orientation(
    gmag: np.ndarray, gang: np.ndarray, x: float, y: float, sigma_oct: float
) -> float:
    """36-bin gradient histogram peak with parabolic interpolation."""
    h, w = gmag.shape
    sigma_o = 1.5 * sigma_oct
    radius = max(int(round(3.0 * sigma_o)), 1)
    xi, yi = int(round(x)), int(round(y))
    x0, x1 = max(xi - radius, 0), min(xi + radius + 1, w)
    y0, y1 = max(yi - radius, 0), min(yi + radius + 1, h)
    if x1 <= x0 or y1 <= y0:
        return 0.0
    mags = gmag[y0:y1, x0:x1]
    angs = gang[y0:y1, x0:x1]
    ys, xs = np.mgrid[y0:y1, x0:x1]
    wgt = np.exp(-((xs - x) ** 2 + (ys - y) ** 2) / (2.0 * sigma_o**2))
    bins = np.floor((angs + np.pi) / (2 * np.pi) * 36).astype(np.int64) % 36
    hist = np.bincount(bins.ravel(), weights=(mags * wgt).ravel(), minlength=36)
    # circular smoothing, twice
    for _ in range(2):
        hist = (np.roll(hist, 1) + hist + np.roll(hist, -1)) / 3.0
    peak = int(np.argmax(hist))
    left = hist[(peak - 1) % 36]
    right = hist[(peak + 1) % 36]
    denom = left - 2 * hist[peak] + right
    shift = 0.0 if abs(denom) < 1e-12 else 0.5 * (left - right) / denom
    angle = (peak + 0.5 + shift) / 36.0 * 2 * np.pi - np.pi
    return float(angle)


def detect_keypoints(img: ImageGray, config: DetectorConfig | None = None) -> list[Keypoint]:
    """DoG extrema with subpixel refinement and dominant orientations.

    Results are sorted by (octave, y, x) and therefore deterministic. With
    max_keypoints set, the strongest responses win before sorting.
    """
    cfg = config or DetectorConfig()
    space = build_scale_space(img, cfg.octaves, cfg.levels_per_octave, cfg.sigma0)
    found = []
    for octave, dog_levels in enumerate(space.dogs):
        stack = np.stack(dog_levels)
        idx, _vals = _local_extrema(stack, 0.5 * cfg.contrast_threshold)
        refined = _refine_candidates(stack, idx, cfg.contrast_threshold, cfg.edge_ratio)
        if not refined:
            continue
        gauss = space.gaussians[octave]
        grads = {}
        scale_mul = float(2**octave)
        for lvl, y, x, resp in refined:
            li = int(np.clip(round(lvl), 0, len(gauss) - 1))
            if li not in grads:
                g = gauss[li]
                gy, gx = np.gradient(g.astype(np.float64))
                grads[li] = (np.hypot(gx, gy), np.arctan2(gy, gx))
            gmag, gang = grads[li]
            sigma_oct = space.sigma0 * 2.0 ** (lvl / space.intervals)
            ori = _dominant_orientation(gmag, gang, x, y, sigma_oct)
            found.append(
                Keypoint(
                    x=x * scale_mul,
                    y=y * scale_mul,
                    scale=space.sigma_at(octave, lvl),
                    response=resp,
                    orientation=ori,
                    octave=octave,
                    level=lvl,
                )
            )
    if cfg.max_keypoints is not None and len(found) > cfg.max_keypoints:
        found.sort(key=lambda k: -k.response)
        found = found[: cfg.max_keypoints]
    found.sort(key=lambda k: (k.octave, k.y, k.x))
    logger.debug("detected %d keypoints", len(found))
    return found


# ---------------------------------------------------------------------------
# Patch sampling
# ---------------------------------------------------------------------------


def _patch_grid(center: np.ndarray, size: int) -> tuple[np.ndarray, np.ndarray]:
    half = (size - 1) / 2.0
    offs = np.arange(size, dtype=np.float64) - half
    xs = center[0] + offs
    ys = center[1] + offs
    return np.meshgrid(xs, ys)


def sample_patch_float(
    img: ImageGray | np.ndarray, center, size: int = PATCH_SIZE
) -> np.ndarray | None:
    """Bilinear patch in float64 pixel values, or None if any sample point
    falls outside the image bounds."""
    px = img.pixels if isinstance(img, ImageGray) else np.asarray(img)
    h, w = px.shape
    c = np.asarray(center, dtype=np.float64)
    gx, gy = _patch_grid(c, size)
    if gx.min() < 0 or gy.min() < 0 or gx.max() > w - 1 or gy.max() > h - 1:
        return None
    x0 = np.floor(gx).astype(np.int64)
    y0 = np.floor(gy).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = gx - x0
    fy = gy - y0
    p = px.astype(np.float64)
    top = p[y0, x0] * (1 - fx) + p[y0, x1] * fx
    bot = p[y1, x0] * (1 - fx) + p[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def sample_patch(
    img: ImageGray, center, size: int = PATCH_SIZE
) -> np.ndarray | None:
    """uint8 bilinear patch centered between pixels, or None out of bounds.

    Quantization uses round-half-even to match numpy conventions.
    """
    vals = sample_patch_float(img, center, size)
    if vals is None:
        return None
    return np.rint(vals).astype(np.uint8)
