"""Shared harness: a wire-protocol client, a container writer, and a
synthetic multi-view patch generator. Everything here is built from the
published interface contracts, on purpose; nothing imports the host
pipeline."""

import json
import struct
import subprocess
import sys

import numpy as np

HEADER = struct.Struct("<4sHHI")
MAGIC = b"PPDP"
VERSION = 1
INFO, TRAIN, DESCRIBE = 1, 2, 3

PATCH = 64
TILES = 16
MOSAIC = PATCH * TILES

PLUGIN_ARGV = [sys.executable, "-m", "refplugin.serve"]


class PluginClient:
    """Minimal client for one plugin child process."""

    def __init__(self, extra_args=(), argv=None):
        self.proc = subprocess.Popen(
            list(argv or PLUGIN_ARGV) + list(extra_args),
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
            bufsize=0,
        )

    def request_raw(self, command: int, payload: bytes = b"") -> bytes:
        """Send a frame, return the complete response frame bytes."""
        self.proc.stdin.write(HEADER.pack(MAGIC, VERSION, command, len(payload)) + payload)
        self.proc.stdin.flush()
        head = self._read(HEADER.size)
        _, _, _, length = HEADER.unpack(head)
        return head + self._read(length)

    def request(self, command: int, payload: bytes = b""):
        """(status, body-after-status-byte) of one round trip."""
        frame = self.request_raw(command, payload)
        body = frame[HEADER.size :]
        return body[0], body[1:]

    def _read(self, n: int) -> bytes:
        chunks = []
        remaining = n
        while remaining > 0:
            chunk = self.proc.stdout.read(remaining)
            if not chunk:
                raise AssertionError("plugin closed its output mid-frame")
            chunks.append(chunk)
            remaining -= len(chunk)
        return b"".join(chunks)

    def info(self):
        status, body = self.request(INFO)
        assert status == 0, body
        (name_len,) = struct.unpack_from("<H", body, 0)
        name = body[2 : 2 + name_len].decode()
        dim, patch_size = struct.unpack_from("<II", body, 2 + name_len)
        return name, dim, patch_size

    def train(self, manifest_path):
        enc = str(manifest_path).encode()
        status, body = self.request(TRAIN, struct.pack("<I", len(enc)) + enc)
        (n,) = struct.unpack_from("<I", body, 0)
        return status, body[4 : 4 + n].decode()

    def describe(self, patches) -> np.ndarray:
        blob = b"".join(np.ascontiguousarray(p, dtype=np.uint8).tobytes() for p in patches)
        status, body = self.request(DESCRIBE, struct.pack("<I", len(patches)) + blob)
        assert status == 0, body
        count, dim = struct.unpack_from("<II", body, 0)
        assert count == len(patches)
        return np.frombuffer(body, dtype="<f4", offset=8).reshape(count, dim).copy()

    def alive(self) -> bool:
        return self.proc.poll() is None

    def close(self):
        if self.proc.poll() is None:
            self.proc.stdin.close()
            try:
                self.proc.wait(timeout=5)
            except subprocess.TimeoutExpired:
                self.proc.kill()
                self.proc.wait()
        self.proc.stdout.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False


# -- container authoring ----------------------------------------------------


def write_container(out_dir, patches, positives, negatives, seed=None):
    """patches: {(point_id, view): (64, 64) uint8}; pairs reference keys.

    Writes the mosaic container layout: patchesNNNN.pgm pages of 16x16
    tiles in (point_id, view) order, info.txt, pairs.txt, manifest.json.
    """
    out_dir.mkdir(parents=True, exist_ok=True)
    keys = sorted(patches)
    index = {k: i for i, k in enumerate(keys)}

    files = []
    per = TILES * TILES
    for m in range((len(keys) + per - 1) // per):
        page = np.zeros((MOSAIC, MOSAIC), dtype=np.uint8)
        for c, key in enumerate(keys[m * per : (m + 1) * per]):
            r, col = divmod(c, TILES)
            page[r * PATCH : (r + 1) * PATCH, col * PATCH : (col + 1) * PATCH] = patches[key]
        name = f"patches{m:04d}.pgm"
        header = f"P5\n{MOSAIC} {MOSAIC}\n255\n".encode("ascii")
        (out_dir / name).write_bytes(header + page.tobytes())
        files.append(name)

    (out_dir / "info.txt").write_text(
        "".join(f"{pid} 0\n" for pid, _view in keys), encoding="utf-8"
    )
    files.append("info.txt")

    lines = []
    for label, pair_list in ((1, positives), (0, negatives)):
        for a, b in pair_list:
            lines.append(f"{index[a]} {a[0]} {index[b]} {b[0]} {label}\n")
    (out_dir / "pairs.txt").write_text("".join(lines), encoding="utf-8")
    files.append("pairs.txt")

    manifest = {
        "version": "V1",
        "scene_id": "toy",
        "descriptor": "none",
        "split": "train",
        "split_fraction": 1.0,
        "patch_count": len(keys),
        "positive_pairs": len(positives),
        "negative_pairs": len(negatives),
        "files": files,
    }
    if seed is not None:
        manifest["seed"] = seed
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return out_dir


# -- synthetic data ---------------------------------------------------------


def _box_smooth(img, k):
    out = img.copy()
    for axis in (0, 1):
        pad = np.take(out, np.arange(-(k // 2), out.shape[axis] + k // 2) % out.shape[axis], axis=axis)
        out = np.add.reduceat(pad, np.arange(0, out.shape[axis]), axis=axis)[: out.shape[axis]]
        out /= k
    return out


def toy_views(seed, n_points=220, n_views=2):
    """{(point_id, view): uint8 patch}.

    All points share one smooth background plus a faint per-point
    wobble; identity lives in each point's dark pore constellation.
    Views then get shifts, an illumination ramp, exposure jitter and
    sensor noise, which is what makes a raw linear projection struggle
    while leaving the identity signal recoverable.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:PATCH, 0:PATCH]
    shared = _box_smooth(np.kron(rng.normal(0, 1, (8, 8)), np.ones((8, 8))), 7)
    shared = (shared - shared.min()) / max(float(np.ptp(shared)), 1e-9)
    patches = {}
    for pid in range(n_points):
        wobble = _box_smooth(np.kron(rng.normal(0, 0.25, (8, 8)), np.ones((8, 8))), 7)
        base = 0.45 + 0.25 * shared + wobble
        for _ in range(int(rng.integers(3, 6))):
            cy, cx = rng.uniform(10, 54, 2)
            r = rng.uniform(1.8, 3.5)
            base = base - 0.55 * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r * r))
        for view in range(n_views):
            img = np.roll(base, (int(rng.integers(-3, 4)), int(rng.integers(-3, 4))), (0, 1))
            theta = rng.uniform(0, 2 * np.pi)
            ramp = ((xx - 32) * np.cos(theta) + (yy - 32) * np.sin(theta)) / 32.0
            img = img * rng.uniform(0.75, 1.25) + rng.uniform(0.12, 0.22) * ramp
            img = img + rng.uniform(-0.08, 0.08) + rng.normal(0.0, 0.03, img.shape)
            patches[(pid, view)] = np.clip(img * 255.0, 0, 255).astype(np.uint8)
    return patches


def pair_keys(point_ids, rng):
    """Positive and negative key pairs over two-view points."""
    positives = [((p, 0), (p, 1)) for p in point_ids]
    others = list(point_ids)
    rng.shuffle(others)
    negatives = [
        ((a, 0), (b, 1))
        for a, b in zip(point_ids, others)
        if a != b
    ]
    return positives, negatives


def fpr95(pos, neg) -> float:
    """Exact rank statistic: smallest observed threshold passing 95% of
    positives, then the fraction of negatives it also passes."""
    pos = np.sort(np.asarray(pos, dtype=np.float64))
    neg = np.asarray(neg, dtype=np.float64)
    t = pos[int(np.ceil(0.95 * len(pos))) - 1]
    return float((neg <= t).mean())
