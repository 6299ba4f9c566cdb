"""Linear descriptor model and its flat binary file format.

File layout, all little-endian:

    magic "PPM1" | feature_dim u32 | out_dim u32 | log_len u32
    | mean float32[F] | transform float32[F, F] row-major
    | projection float32[D, F] row-major | log UTF-8 bytes

A descriptor is projection @ (transform @ (features - mean)), then L2
normalized; a near-zero projected vector comes back as all zeros so the
caller's low-energy convention applies.
"""

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .features import FEATURE_DIM, patch_features

MAGIC = b"PPM1"
OUT_DIM = 128
_HEAD = struct.Struct("<4sIII")
_ZERO_NORM = 1e-12


class ModelFormatError(Exception):
    pass


@dataclass
class PluginModel:
    mean: np.ndarray          # (F,)
    transform: np.ndarray     # (F, F) whitening
    projection: np.ndarray    # (D, F)
    log: str = ""

    def __post_init__(self):
        self.mean = np.ascontiguousarray(self.mean, dtype=np.float32)
        self.transform = np.ascontiguousarray(self.transform, dtype=np.float32)
        self.projection = np.ascontiguousarray(self.projection, dtype=np.float32)
        f = len(self.mean)
        if self.transform.shape != (f, f):
            raise ModelFormatError(f"transform shape {self.transform.shape}, want ({f}, {f})")
        if self.projection.ndim != 2 or self.projection.shape[1] != f:
            raise ModelFormatError(f"projection shape {self.projection.shape} does not match F={f}")
        if not (np.isfinite(self.projection).all() and np.isfinite(self.transform).all()
                and np.isfinite(self.mean).all()):
            raise ModelFormatError("model matrices must be finite")

    @property
    def feature_dim(self) -> int:
        return len(self.mean)

    @property
    def out_dim(self) -> int:
        return len(self.projection)

    def describe(self, patches: np.ndarray) -> np.ndarray:
        """(n, 64, 64) uint8 -> (n, D) float32, rows unit-norm or zero."""
        feats = patch_features(patches)
        white = (feats - self.mean.astype(np.float64)) @ self.transform.T.astype(np.float64)
        v = white @ self.projection.T.astype(np.float64)
        norms = np.linalg.norm(v, axis=1, keepdims=True)
        v = np.where(norms > _ZERO_NORM, v / np.maximum(norms, _ZERO_NORM), 0.0)
        return v.astype(np.float32)


def untrained_model(seed: int = 0, feature_dim: int = FEATURE_DIM,
                    out_dim: int = OUT_DIM) -> PluginModel:
    """Identity whitening plus a seeded random projection; the baseline
    a trained model must beat."""
    rng = np.random.default_rng(seed)
    proj = rng.standard_normal((out_dim, feature_dim)) / np.sqrt(feature_dim)
    return PluginModel(
        mean=np.zeros(feature_dim),
        transform=np.eye(feature_dim),
        projection=proj,
        log=f"untrained seed={seed}",
    )


def save_model(model: PluginModel, path) -> None:
    log = model.log.encode("utf-8")
    blob = (
        _HEAD.pack(MAGIC, model.feature_dim, model.out_dim, len(log))
        + model.mean.astype("<f4").tobytes()
        + model.transform.astype("<f4").tobytes()
        + model.projection.astype("<f4").tobytes()
        + log
    )
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(blob)
    tmp.replace(path)


def load_model(path) -> PluginModel:
    blob = Path(path).read_bytes()
    if len(blob) < _HEAD.size:
        raise ModelFormatError("file shorter than header")
    magic, f, d, log_len = _HEAD.unpack_from(blob, 0)
    if magic != MAGIC:
        raise ModelFormatError(f"bad magic {magic!r}")
    off = _HEAD.size
    need = off + 4 * (f + f * f + d * f) + log_len
    if len(blob) != need:
        raise ModelFormatError(f"file is {len(blob)} bytes, layout needs {need}")
    mean = np.frombuffer(blob, dtype="<f4", count=f, offset=off)
    off += 4 * f
    transform = np.frombuffer(blob, dtype="<f4", count=f * f, offset=off).reshape(f, f)
    off += 4 * f * f
    projection = np.frombuffer(blob, dtype="<f4", count=d * f, offset=off).reshape(d, f)
    off += 4 * d * f
    log = blob[off:].decode("utf-8")
    return PluginModel(mean.copy(), transform.copy(), projection.copy(), log)
