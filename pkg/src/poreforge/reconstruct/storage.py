"""On-disk formats for sparse and dense reconstructions."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from ..errors import CorruptContainerError
from ..geometry import Observation, Point3, Track, load_rig, save_rig
from .mvs import DensePointCloud
from .sfm import SparseModel

_PLY_PROPS = (
    "property float x\nproperty float y\nproperty float z\nproperty uchar support\n"
)


def save_sparse(model: SparseModel, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_rig(model.cameras, out / "rig.json")
    meta = {
        "registered": sorted(model.registered),
        "notes": model.notes,
        "inlier_matches": model.inlier_matches,
    }
    (out / "model.json").write_text(json.dumps(meta, indent=2) + "\n")
    with open(out / "points3D.txt", "w", encoding="utf-8") as f:
        f.write("# point_id x y z view_id kp_index ...\n")
        for tr in model.tracks:
            x, y, z = tr.point.position
            parts = [str(tr.point.point_id), f"{x:.9g}", f"{y:.9g}", f"{z:.9g}"]
            for obs in tr.observations:
                parts.append(str(obs.view_id))
                parts.append(str(obs.kp_index))
            f.write(" ".join(parts) + "\n")


def load_sparse(in_dir) -> SparseModel:
    src = Path(in_dir)
    cameras = load_rig(src / "rig.json")
    meta = json.loads((src / "model.json").read_text())
    cams = {c.view_id: c for c in cameras}
    tracks = []
    with open(src / "points3D.txt", "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            tok = line.split()
            if len(tok) < 8 or (len(tok) - 4) % 2:
                raise CorruptContainerError(f"bad points3D line: {line[:60]}")
            pid = int(tok[0])
            pos = np.array([float(t) for t in tok[1:4]])
            obs = []
            for i in range(4, len(tok), 2):
                view, kp = int(tok[i]), int(tok[i + 1])
                if view not in cams:
                    raise CorruptContainerError(f"unknown view {view} in points3D")
                kp_obs = _reproject_placeholder(pos, cams[view])
                obs.append(Observation(view, kp_obs, kp_index=kp))
            tracks.append(Track(Point3(pos, point_id=pid), obs))
    return SparseModel(
        cameras,
        tracks,
        set(meta["registered"]),
        meta.get("notes", ""),
        inlier_matches=int(meta.get("inlier_matches", 0)),
    )


def _reproject_placeholder(pos, cam):
    """points3D.txt stores indices, not pixels; reprojection stands in."""
    from ..geometry import project

    pix = project(pos, cam)
    return (float(pix[0]), float(pix[1])) if pix is not None else (0.0, 0.0)


_VERTEX_DTYPE = np.dtype([("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("s", "u1")])


def save_dense(cloud: DensePointCloud, path) -> None:
    n = len(cloud)
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {n}\n{_PLY_PROPS}end_header\n"
    )
    rec = np.empty(n, dtype=_VERTEX_DTYPE)
    pos = cloud.positions.astype(np.float32)
    rec["x"], rec["y"], rec["z"] = pos[:, 0], pos[:, 1], pos[:, 2]
    rec["s"] = cloud.support
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(rec.tobytes())


def load_dense(path) -> DensePointCloud:
    with open(path, "rb") as f:
        blob = f.read()
    idx = blob.find(b"end_header\n")
    if not blob.startswith(b"ply\n") or idx < 0:
        raise CorruptContainerError("not a ply file")
    header = blob[:idx].decode("ascii", errors="replace")
    n = None
    for line in header.splitlines():
        if line.startswith("element vertex "):
            n = int(line.split()[-1])
    if n is None:
        raise CorruptContainerError("ply header missing vertex count")
    body = blob[idx + len(b"end_header\n"):]
    if len(body) != n * _VERTEX_DTYPE.itemsize:
        raise CorruptContainerError(
            f"ply body is {len(body)} bytes, expected {n * _VERTEX_DTYPE.itemsize}"
        )
    rec = np.frombuffer(body, dtype=_VERTEX_DTYPE)
    pos = np.stack(
        [rec["x"], rec["y"], rec["z"]], axis=1
    ).astype(np.float64) if n else np.zeros((0, 3))
    return DensePointCloud(
        pos, np.zeros(n), np.full(n, -1, dtype=np.int64), rec["s"].copy()
    )


def save_depth_maps(cloud: DensePointCloud, path) -> None:
    arrays = {f"view_{v}": dm for v, dm in cloud.depth_maps.items()}
    arrays["depth_scale"] = np.array(cloud.depth_scale)
    np.savez_compressed(path, **arrays)


def load_depth_maps(path) -> tuple[dict[int, np.ndarray], int]:
    with np.load(path) as data:
        scale = int(data["depth_scale"])
        maps = {
            int(k.split("_", 1)[1]): data[k] for k in data.files if k != "depth_scale"
        }
    return maps, scale
