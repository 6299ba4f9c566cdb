"""Reader for patch dataset containers and the loop's dataset index.

A container directory holds:
  - manifest.json with patch_count, pair counts, and the file list
  - patchesNNNN.pgm: 1024x1024 binary PGM mosaics, 16x16 tiles of
    64x64 patches, row-major in container order, last mosaic zero
    padded
  - info.txt: one "point_id 0" line per patch, container order
  - pairs.txt: "index_a point_a index_b point_b label" rows, indices
    into container order, label 1 positive / 0 negative

A dataset index (index.json) maps scene ids to per-split container
directories, relative to the index file itself.
"""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

PATCH = 64
MOSAIC_TILES = 16
MOSAIC_PX = PATCH * MOSAIC_TILES


class ContainerError(Exception):
    pass


@dataclass
class Container:
    patches: np.ndarray       # (n, 64, 64) uint8, container order
    point_ids: np.ndarray     # (n,) int64
    positives: np.ndarray     # (p, 2) patch indices
    negatives: np.ndarray     # (q, 2) patch indices
    manifest: dict


def _read_pgm(path: Path) -> np.ndarray:
    data = path.read_bytes()
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
        raise ContainerError(f"{path.name}: not a binary PGM")
    width, height, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise ContainerError(f"{path.name}: unsupported maxval {maxval}")
    i += 1
    raster = data[i : i + width * height]
    if len(raster) != width * height:
        raise ContainerError(f"{path.name}: truncated raster")
    return np.frombuffer(raster, dtype=np.uint8).reshape(height, width)


def read_container(src_dir) -> Container:
    src = Path(src_dir)
    man_path = src / "manifest.json"
    if not man_path.is_file():
        raise ContainerError(f"no manifest.json under {src}")
    try:
        manifest = json.loads(man_path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ContainerError(f"unreadable manifest: {exc}")
    count = int(manifest.get("patch_count", -1))
    if count < 0:
        raise ContainerError("manifest lacks patch_count")

    pids = []
    for line in (src / "info.txt").read_text(encoding="utf-8").splitlines():
        if line.strip():
            pids.append(int(line.split()[0]))
    if len(pids) != count:
        raise ContainerError(f"info.txt lists {len(pids)} patches, manifest says {count}")

    per = MOSAIC_TILES * MOSAIC_TILES
    patches = np.empty((count, PATCH, PATCH), dtype=np.uint8)
    for m in range((count + per - 1) // per):
        page = _read_pgm(src / f"patches{m:04d}.pgm")
        if page.shape != (MOSAIC_PX, MOSAIC_PX):
            raise ContainerError(f"mosaic {m}: shape {page.shape}")
        for c in range(min(per, count - m * per)):
            r, col = divmod(c, MOSAIC_TILES)
            patches[m * per + c] = page[
                r * PATCH : (r + 1) * PATCH, col * PATCH : (col + 1) * PATCH
            ]

    pos, neg = [], []
    pairs_path = src / "pairs.txt"
    if pairs_path.is_file():
        for line in pairs_path.read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            tok = line.split()
            if len(tok) != 5:
                raise ContainerError(f"bad pairs line: {line!r}")
            ia, _pa, ib, _pb, label = (int(t) for t in tok)
            if not (0 <= ia < count and 0 <= ib < count):
                raise ContainerError(f"pair index out of range: {line!r}")
            (pos if label else neg).append((ia, ib))

    return Container(
        patches=patches,
        point_ids=np.asarray(pids, dtype=np.int64),
        positives=np.asarray(pos, dtype=np.int64).reshape(-1, 2),
        negatives=np.asarray(neg, dtype=np.int64).reshape(-1, 2),
        manifest=manifest,
    )


def resolve_train_containers(manifest_path) -> tuple[list[Path], dict]:
    """Container directories a TRAIN request points at, plus the JSON.

    Accepts a dataset index ({"scenes": {id: {"train": dir, ...}}},
    paths relative to the index file), a direct container manifest.json
    path, or a container directory.
    """
    p = Path(manifest_path)
    if p.is_dir():
        if (p / "manifest.json").is_file():
            return [p], {}
        raise ContainerError(f"{p} is not a container directory")
    try:
        payload = json.loads(p.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ContainerError(f"cannot read manifest: {exc}")
    except json.JSONDecodeError as exc:
        raise ContainerError(f"manifest is not JSON: {exc}")
    scenes = payload.get("scenes")
    if isinstance(scenes, dict):
        dirs = []
        for sid in sorted(scenes):
            splits = scenes[sid]
            if not isinstance(splits, dict) or "train" not in splits:
                raise ContainerError(f"scene {sid!r} has no train split")
            dirs.append((p.parent / splits["train"]).resolve())
        if not dirs:
            raise ContainerError("dataset index lists no scenes")
        return dirs, payload
    if "patch_count" in payload:
        return [p.parent], payload
    raise ContainerError("JSON is neither a dataset index nor a container manifest")
