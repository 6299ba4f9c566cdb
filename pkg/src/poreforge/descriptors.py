"""Gradient-histogram patch descriptors and the external descriptor plugin client.

Two builtins share one binning pipeline: a 128-dim descriptor over the
central 40x40 of a patch (4x4 cells) and a 512-dim variant over the full
64x64 support (8x8 cells). Both are upright: patches are described in
extraction orientation. Learned descriptors run out of process behind a
small binary protocol; this module is the client side.
"""

from __future__ import annotations

import logging
import struct
import subprocess
import threading
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DimMismatchError, PluginCrashedError, PluginProtocolError

logger = logging.getLogger(__name__)

PATCH = 64
CENTER = (PATCH - 1) / 2.0
N_ORI = 8
GAUSS_SIGMA = 20.0
CLAMP = 0.2
LOW_ENERGY_NORM = 1e-6


@dataclass(frozen=True)
class DescriptorSpec:
    name: str
    dim: int
    patch_size: int
    kind: str  # "builtin" | "plugin"

    def __post_init__(self):
        if self.kind == "builtin":
            if self.dim not in (128, 512):
                raise ValueError(f"builtin dim must be 128 or 512, got {self.dim}")
        elif self.kind == "plugin":
            if not 1 <= self.dim <= 4096:
                raise ValueError(f"plugin dim out of range: {self.dim}")
        else:
            raise ValueError(f"unknown descriptor kind: {self.kind}")
        if self.patch_size not in (32, 64):
            raise ValueError(f"patch_size must be 32 or 64, got {self.patch_size}")


@dataclass
class DescribeResult:
    """Vectors in input order plus a low-energy mask (zero vectors)."""

    vectors: np.ndarray
    low_energy: np.ndarray


class _Layout:
    """Precomputed spatial binning tables for one cell grid."""

    def __init__(self, n_cells: int, support: int):
        self.n_cells = n_cells
        self.dim = n_cells * n_cells * N_ORI
        cell_w = support / n_cells
        lo = (PATCH - support) // 2
        hi = lo + support
        ys, xs = np.mgrid[lo:hi, lo:hi]
        self.rows = ys.ravel()
        self.cols = xs.ravel()
        half_cells = n_cells / 2.0
        cx = (xs.ravel() - CENTER) / cell_w + (half_cells - 0.5)
        cy = (ys.ravel() - CENTER) / cell_w + (half_cells - 0.5)
        self.weight = np.exp(
            -((xs.ravel() - CENTER) ** 2 + (ys.ravel() - CENTER) ** 2)
            / (2.0 * GAUSS_SIGMA**2)
        )
        x0 = np.floor(cx).astype(np.int64)
        y0 = np.floor(cy).astype(np.int64)
        wx1 = cx - x0
        wy1 = cy - y0
        self.combos = []
        for dy, wy in ((0, 1.0 - wy1), (1, wy1)):
            for dx, wx in ((0, 1.0 - wx1), (1, wx1)):
                gx = x0 + dx
                gy = y0 + dy
                valid = (gx >= 0) & (gx < n_cells) & (gy >= 0) & (gy < n_cells)
                base = (gy * n_cells + gx) * N_ORI
                self.combos.append((np.where(valid, base, 0), wy * wx, valid))


_LAYOUTS: dict[str, _Layout] = {}


def _layout(name: str) -> _Layout:
    if name not in _LAYOUTS:
        if name == "sift":
            _LAYOUTS[name] = _Layout(n_cells=4, support=40)
        elif name == "psift":
            _LAYOUTS[name] = _Layout(n_cells=8, support=64)
        else:
            raise KeyError(name)
    return _LAYOUTS[name]


def _histogram(patch: np.ndarray, layout: _Layout) -> np.ndarray:
    """Trilinearly binned, Gaussian-weighted gradient histogram (pre-clamp)."""
    p = np.asarray(patch, dtype=np.float64)
    if p.shape != (PATCH, PATCH):
        raise ValueError(f"expected a {PATCH}x{PATCH} patch, got {p.shape}")
    gy, gx = np.gradient(p)
    mag = np.hypot(gx, gy)[layout.rows, layout.cols]
    ang = np.arctan2(gy, gx)[layout.rows, layout.cols]
    ob = (ang + np.pi) / (2.0 * np.pi) * N_ORI - 0.5
    o0 = np.floor(ob).astype(np.int64)
    wo1 = ob - o0
    w_base = mag * layout.weight
    idx_parts = []
    w_parts = []
    for base, w_sp, valid in layout.combos:
        for do, wo in ((0, 1.0 - wo1), (1, wo1)):
            idx_parts.append(base + (o0 + do) % N_ORI)
            w_parts.append(np.where(valid, w_base * w_sp * wo, 0.0))
    idx = np.concatenate(idx_parts)
    w = np.concatenate(w_parts)
    return np.bincount(idx, weights=w, minlength=layout.dim)


def _finalize(hist: np.ndarray) -> np.ndarray:
    """L2 normalize with iterated clamping.

    Repeats normalize-then-clamp until clamping no longer disturbs the unit
    norm. For any histogram with at least 25 active bins, which every real
    image patch has, the result satisfies both the unit-norm and the
    component-ceiling contract.
    """
    norm = float(np.linalg.norm(hist))
    if norm < LOW_ENERGY_NORM:
        return np.zeros(hist.shape, dtype=np.float32)
    v = hist / norm
    for _ in range(50):
        c = np.minimum(v, CLAMP)
        n = float(np.linalg.norm(c))
        if n >= 1.0 - 5e-6:
            v = c / n
            break
        v_next = c / n
        if np.array_equal(v_next, v):
            v = v_next
            break
        v = v_next
    return v.astype(np.float32)


def describe_sift(patch: np.ndarray) -> np.ndarray:
    """128-dim descriptor: 4x4 cells over the central 40x40 support."""
    return _finalize(_histogram(patch, _layout("sift")))


def describe_psift(patch: np.ndarray) -> np.ndarray:
    """512-dim descriptor: 8x8 cells over the full 64x64 support."""
    return _finalize(_histogram(patch, _layout("psift")))


def raw_histogram(patch: np.ndarray, kind: str) -> np.ndarray:
    """Pre-clamp histogram, exposed for oracle comparison in tests."""
    return _histogram(patch, _layout(kind))


# ---------------------------------------------------------------------------
# Handles
# ---------------------------------------------------------------------------


class BuiltinHandle:
    """In-process descriptor backend; pure and reentrant."""

    def __init__(self, name: str):
        if name == "sift":
            self.spec = DescriptorSpec("sift", 128, 64, "builtin")
            self._fn = describe_sift
        elif name == "psift":
            self.spec = DescriptorSpec("psift", 512, 64, "builtin")
            self._fn = describe_psift
        else:
            raise KeyError(f"unknown builtin descriptor: {name}")
        self.model_artifact = None

    def describe_batch(self, patches: Sequence[np.ndarray]) -> DescribeResult:
        vectors = np.zeros((len(patches), self.spec.dim), dtype=np.float32)
        for i, patch in enumerate(patches):
            vectors[i] = self._fn(patch)
        low = ~vectors.any(axis=1)
        return DescribeResult(vectors, low)

    def close(self):
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False


def get_descriptor(name: str) -> BuiltinHandle:
    return BuiltinHandle(name)


def describe_batch(handle, patches: Sequence[np.ndarray]) -> DescribeResult:
    """Uniform dispatch over builtin and plugin handles."""
    return handle.describe_batch(patches)


# ---------------------------------------------------------------------------
# Plugin protocol client
# ---------------------------------------------------------------------------

MAGIC = b"PPDP"
PROTOCOL_VERSION = 1
CMD_INFO = 1
CMD_TRAIN = 2
CMD_DESCRIBE = 3
DESCRIBE_CHUNK = 4096
_HEADER = struct.Struct("<4sHHI")


class PluginHandle:
    """Client for one descriptor plugin child process.

    Frames are little-endian: magic "PPDP", version u16, command u16,
    payload_len u32, payload. Every response payload opens with a status
    byte; status 1 is followed by a u32-length-prefixed UTF-8 message.
    One request is in flight at a time; callers serialize on an internal
    lock.
    """

    def __init__(self, command: Sequence[str], info_timeout: float = 30.0):
        self._cmd = list(command)
        self._lock = threading.Lock()
        try:
            self._proc = subprocess.Popen(
                self._cmd,
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                bufsize=0,
            )
        except OSError as exc:
            raise PluginCrashedError(f"failed to start plugin {self._cmd}: {exc}")
        payload = self._request(CMD_INFO, b"")
        try:
            (name_len,) = struct.unpack_from("<H", payload, 0)
            name = payload[2 : 2 + name_len].decode("utf-8")
            dim, patch_size = struct.unpack_from("<II", payload, 2 + name_len)
        except (struct.error, UnicodeDecodeError) as exc:
            raise PluginProtocolError(f"malformed INFO response: {exc}")
        if not 1 <= dim <= 4096:
            raise PluginProtocolError(f"plugin reported dim {dim} outside 1..4096")
        if patch_size not in (32, 64):
            raise PluginProtocolError(f"plugin patch_size {patch_size} not 32 or 64")
        self.spec = DescriptorSpec(name, dim, patch_size, "plugin")
        self.model_artifact = None
        logger.debug("plugin %s: dim=%d patch=%d", name, dim, patch_size)

    # -- framing ------------------------------------------------------------

    def _write(self, data: bytes):
        try:
            self._proc.stdin.write(data)
            self._proc.stdin.flush()
        except (BrokenPipeError, OSError):
            raise PluginCrashedError(f"plugin {self._cmd} closed its input")

    def _read_exact(self, n: int) -> bytes:
        chunks = []
        remaining = n
        while remaining > 0:
            chunk = self._proc.stdout.read(remaining)
            if not chunk:
                raise PluginCrashedError(
                    f"plugin {self._cmd} closed its output mid-frame"
                )
            chunks.append(chunk)
            remaining -= len(chunk)
        return b"".join(chunks)

    def _request(self, command: int, payload: bytes) -> bytes:
        """Send one frame, read one response frame, unwrap the status byte."""
        with self._lock:
            self._write(_HEADER.pack(MAGIC, PROTOCOL_VERSION, command, len(payload)) + payload)
            header = self._read_exact(_HEADER.size)
            magic, version, resp_cmd, resp_len = _HEADER.unpack(header)
            if magic != MAGIC:
                raise PluginProtocolError(f"bad response magic {magic!r}")
            if version != PROTOCOL_VERSION:
                raise PluginProtocolError(f"unsupported protocol version {version}")
            if resp_cmd != command:
                raise PluginProtocolError(
                    f"response command {resp_cmd} does not echo request {command}"
                )
            body = self._read_exact(resp_len)
        if len(body) < 1:
            raise PluginProtocolError("empty response payload")
        status = body[0]
        if status == 0:
            return body[1:]
        if status == 1:
            try:
                (msg_len,) = struct.unpack_from("<I", body, 1)
                message = body[5 : 5 + msg_len].decode("utf-8")
            except (struct.error, UnicodeDecodeError):
                message = "(unparseable error payload)"
            raise PluginProtocolError(f"plugin error: {message}")
        raise PluginProtocolError(f"unknown response status {status}")

    # -- commands -----------------------------------------------------------

    def train(self, manifest_path: str) -> tuple[bool, str]:
        """Run TRAIN; returns (ok, model_path or failure message)."""
        enc = str(manifest_path).encode("utf-8")
        payload = struct.pack("<I", len(enc)) + enc
        try:
            body = self._request(CMD_TRAIN, payload)
        except PluginProtocolError as exc:
            return False, str(exc)
        try:
            (path_len,) = struct.unpack_from("<I", body, 0)
            model_path = body[4 : 4 + path_len].decode("utf-8")
        except (struct.error, UnicodeDecodeError) as exc:
            raise PluginProtocolError(f"malformed TRAIN response: {exc}")
        self.model_artifact = model_path
        return True, model_path

    def describe_batch(self, patches: Sequence[np.ndarray]) -> DescribeResult:
        vectors = np.zeros((len(patches), self.spec.dim), dtype=np.float32)
        for start in range(0, len(patches), DESCRIBE_CHUNK):
            chunk = patches[start : start + DESCRIBE_CHUNK]
            vectors[start : start + len(chunk)] = self._describe_chunk(chunk)
        norms = np.linalg.norm(vectors, axis=1) if len(patches) else np.zeros(0)
        return DescribeResult(vectors, norms < LOW_ENERGY_NORM)

    def _describe_chunk(self, patches: Sequence[np.ndarray]) -> np.ndarray:
        size = self.spec.patch_size
        blobs = []
        for patch in patches:
            p = np.ascontiguousarray(patch, dtype=np.uint8)
            if p.shape == (PATCH, PATCH) and size == 32:
                p = p[16:48, 16:48]  # central crop for 32-px plugins
            if p.shape != (size, size):
                raise ValueError(f"patch shape {p.shape}, plugin wants {size}x{size}")
            blobs.append(p.tobytes())
        payload = struct.pack("<I", len(blobs)) + b"".join(blobs)
        body = self._request(CMD_DESCRIBE, payload)
        if len(body) < 8:
            raise PluginProtocolError("short DESCRIBE response")
        count, dim = struct.unpack_from("<II", body, 0)
        if dim != self.spec.dim:
            raise DimMismatchError(
                f"plugin returned dim {dim}, INFO promised {self.spec.dim}"
            )
        if count != len(blobs):
            raise PluginProtocolError(
                f"plugin returned {count} vectors for {len(blobs)} patches"
            )
        expect = 8 + count * dim * 4
        if len(body) != expect:
            raise PluginProtocolError(
                f"DESCRIBE payload length {len(body)}, expected {expect}"
            )
        return np.frombuffer(body, dtype="<f4", offset=8).reshape(count, dim).copy()

    # -- lifecycle ----------------------------------------------------------

    def close(self):
        if self._proc.poll() is None:
            try:
                self._proc.stdin.close()
            except OSError:
                pass
            try:
                self._proc.wait(timeout=5.0)
            except subprocess.TimeoutExpired:
                self._proc.kill()
                self._proc.wait()
        if self._proc.stdout is not None:
            self._proc.stdout.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False


def open_plugin(command: Sequence[str]) -> PluginHandle:
    return PluginHandle(command)
