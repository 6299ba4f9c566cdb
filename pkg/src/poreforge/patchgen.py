"""Patch-dataset construction.

Ties dense 3D points to detector keypoints in a designated frontal view,
extracts occlusion-tested 64 px patches across all views, forms labeled
patch pairs, splits them at 3D-point granularity, and reads and writes
the mosaic container format.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CorruptContainerError
from .geometry import CameraParameters, camera_depth, project
from .imaging import PATCH_SIZE, ImageGray, load_image, sample_patch, save_image

MOSAIC_TILES = 16
MOSAIC_PX = MOSAIC_TILES * PATCH_SIZE


@dataclass(frozen=True)
class AnchorEntry:
    """One dense point tied to its nearest frontal-view keypoint."""

    point_id: int
    kp_index: int
    distance_px: float


@dataclass
class AnchoredPointSet:
    entries: list[AnchorEntry]
    threshold_px: float = 5.0

    def __len__(self) -> int:
        return len(self.entries)

    def point_ids(self) -> set[int]:
        return {e.point_id for e in self.entries}


@dataclass(eq=False)
class PatchRecord:
    view_id: int
    patch: np.ndarray
    center: tuple[float, float]


@dataclass
class PatchTable:
    """point_id -> patches of that 3D point, one per surviving view."""

    points: dict[int, list[PatchRecord]] = field(default_factory=dict)

    @property
    def n_patches(self) -> int:
        return sum(len(v) for v in self.points.values())

    def ordered(self):
        """(point_id, record) pairs in canonical container order."""
        for pid in sorted(self.points):
            for rec in sorted(self.points[pid], key=lambda r: r.view_id):
                yield pid, rec

    def refs(self):
        return [(pid, rec.view_id) for pid, rec in self.ordered()]

    def subset(self, point_ids) -> "PatchTable":
        keep = set(point_ids)
        return PatchTable({p: v for p, v in self.points.items() if p in keep})


PatchRef = tuple  # (point_id, view_id)


@dataclass
class PairSet:
    """Labeled patch pairs; refs are (point_id, view_id) tuples."""

    positives: list = field(default_factory=list)
    negatives: list = field(default_factory=list)

    def subset(self, point_ids) -> "PairSet":
        keep = set(point_ids)
        # positives share one point_id, negatives must survive on both ends
        pos = [p for p in self.positives if p[0][0] in keep]
        neg = [p for p in self.negatives if p[0][0] in keep and p[1][0] in keep]
        return PairSet(pos, neg)


@dataclass
class DatasetManifest:
    version: str = "V1"
    scene_id: str = "synthetic"
    descriptor: str = "psift"
    split: str = "all"
    split_fraction: float = 1.0
    patch_count: int = 0
    positive_pairs: int = 0
    negative_pairs: int = 0
    files: list[str] = field(default_factory=list)
    point_ids: list[int] = field(default_factory=list)
    pairs: PairSet | None = None

    def to_json(self) -> str:
        payload = {
            "version": self.version,
            "scene_id": self.scene_id,
            "descriptor": self.descriptor,
            "split": self.split,
            "split_fraction": self.split_fraction,
            "patch_count": self.patch_count,
            "positive_pairs": self.positive_pairs,
            "negative_pairs": self.negative_pairs,
            "files": list(self.files),
        }
        return json.dumps(payload, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        try:
            raw = json.loads(text)
            return cls(
                version=raw["version"],
                scene_id=raw["scene_id"],
                descriptor=raw["descriptor"],
                split=raw["split"],
                split_fraction=float(raw["split_fraction"]),
                patch_count=int(raw["patch_count"]),
                positive_pairs=int(raw["positive_pairs"]),
                negative_pairs=int(raw["negative_pairs"]),
                files=list(raw["files"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise CorruptContainerError(f"bad manifest: {exc}") from exc


class _PixelGrid:
    """Bucket index over keypoint centres.

    Cell size equals the query radius, so the 3x3 neighbourhood around a
    query's cell contains every keypoint within that radius.
    """

    def __init__(self, keypoints, cell: float):
        self.cell = float(cell)
        self.xy = np.array(
            [(kp.x, kp.y) for kp in keypoints], dtype=np.float64
        ).reshape(-1, 2)
        self.bins: dict[tuple[int, int], list[int]] = {}
        for i, (x, y) in enumerate(self.xy):
            key = (int(x // self.cell), int(y // self.cell))
            self.bins.setdefault(key, []).append(i)

    def nearest(self, pixel):
        """(index, distance) of the closest keypoint in the 3x3 block, or
        (-1, inf).  Only trustworthy up to one cell size out."""
        cx = int(pixel[0] // self.cell)
        cy = int(pixel[1] // self.cell)
        best = -1
        best_d2 = np.inf
        for gx in (cx - 1, cx, cx + 1):
            for gy in (cy - 1, cy, cy + 1):
                for i in self.bins.get((gx, gy), ()):
                    dx = self.xy[i, 0] - pixel[0]
                    dy = self.xy[i, 1] - pixel[1]
                    d2 = dx * dx + dy * dy
                    if d2 < best_d2:
                        best_d2 = d2
                        best = i
        return best, (math.sqrt(best_d2) if best >= 0 else np.inf)


def _positions_of(dense) -> np.ndarray:
    pos = dense.positions if hasattr(dense, "positions") else dense
    return np.asarray(pos, dtype=np.float64).reshape(-1, 3)


def anchor_points(
    dense,
    frontal_keypoints,
    frontal_cam: CameraParameters,
    threshold_px: float = 5.0,
) -> AnchoredPointSet:
    """Keep dense points whose frontal-view projection lands within
    threshold_px (inclusive) of a detector keypoint.

    The nearest keypoint becomes the anchor; each point gets at most one.
    Accepts a dense cloud or a bare (N, 3) position array.
    """
    if threshold_px <= 0:
        raise ValueError("threshold_px must be positive")
    positions = _positions_of(dense)
    entries: list[AnchorEntry] = []
    if len(frontal_keypoints) and len(positions):
        grid = _PixelGrid(frontal_keypoints, cell=float(threshold_px))
        for pid, pos in enumerate(positions):
            pix = project(pos, frontal_cam)
            if pix is None:
                continue
            k, dist = grid.nearest(pix)
            if k >= 0 and dist <= threshold_px:
                entries.append(AnchorEntry(pid, k, float(dist)))
    return AnchoredPointSet(entries, float(threshold_px))


def project_and_extract(
    position, images, cams, visibility, patch_size: int = PATCH_SIZE
) -> list[PatchRecord]:
    """Patches of one 3D point across views.

    visibility(position, view_id) is the occlusion test: the scene oracle
    in synthetic runs, depth_map_visibility on reconstructed data.  Views
    behind the camera, without full patch support, or occluded are
    skipped; an empty result is valid.
    """
    pos = np.asarray(position, dtype=np.float64)
    out: list[PatchRecord] = []
    for img, cam in zip(images, cams):
        pix = project(pos, cam)
        if pix is None:
            continue
        if not visibility(pos, cam.view_id):
            continue
        patch = sample_patch(img, pix, patch_size)
        if patch is None:
            continue
        out.append(PatchRecord(cam.view_id, patch, (float(pix[0]), float(pix[1]))))
    return out


def depth_map_visibility(dense, cams, tol_mm: float = 0.5):
    """Occlusion test backed by fused depth maps.

    A point counts as visible in a view when the map has a sample at its
    projection and that depth agrees with the point's camera depth within
    tol_mm.  Missing samples are treated as occluded, which errs on the
    conservative side.
    """
    by_view = {cam.view_id: cam for cam in cams}

    def visible(position, view_id: int) -> bool:
        cam = by_view.get(view_id)
        if cam is None:
            return False
        pix = project(position, cam)
        if pix is None:
            return False
        d = dense.depth_at(view_id, pix)
        if not np.isfinite(d):
            return False
        return abs(camera_depth(position, cam) - d) <= tol_mm

    return visible


def build_patch_table(
    anchored: AnchoredPointSet,
    dense,
    images,
    cams,
    visibility,
    min_views: int = 2,
    patch_size: int = PATCH_SIZE,
) -> PatchTable:
    """Extract patches for every anchored point.

    Points surviving in fewer than min_views views are dropped; a pair
    needs two sides.
    """
    positions = _positions_of(dense)
    table = PatchTable()
    for entry in anchored.entries:
        recs = project_and_extract(
            positions[entry.point_id], images, cams, visibility, patch_size
        )
        if len(recs) >= min_views:
            table.points[entry.point_id] = recs
    return table


@dataclass
class PairConfig:
    negatives_per_positive: int = 1
    max_pos_per_point: int = 15
    seed: int = 0


def make_pairs(table: PatchTable, cfg: PairConfig | None = None) -> PairSet:
    """All same-point cross-view combinations (capped per point) plus
    uniformly sampled distinct-point negatives, without duplicates."""
    cfg = cfg or PairConfig()
    rng = np.random.default_rng(cfg.seed)
    positives = []
    refs = []
    for pid in sorted(table.points):
        views = sorted(r.view_id for r in table.points[pid])
        refs.extend((pid, v) for v in views)
        combos = [
            ((pid, a), (pid, b))
            for i, a in enumerate(views)
            for b in views[i + 1 :]
        ]
        if len(combos) > cfg.max_pos_per_point:
            pick = rng.choice(len(combos), size=cfg.max_pos_per_point, replace=False)
            combos = [combos[i] for i in sorted(pick)]
        positives.extend(combos)

    counts = {pid: len(v) for pid, v in table.points.items()}
    total = len(refs)
    cross = (total * total - sum(n * n for n in counts.values())) // 2
    want = min(len(positives) * cfg.negatives_per_positive, cross)
    negatives = []
    seen = set()
    while len(negatives) < want:
        i, j = rng.integers(0, total, size=2)
        a, b = refs[i], refs[j]
        if a[0] == b[0]:
            continue
        if b < a:
            a, b = b, a
        if (a, b) in seen:
            continue
        seen.add((a, b))
        negatives.append((a, b))
    return PairSet(positives, negatives)


def _position_fraction(position, seed: int) -> float:
    # quantize at the fusion tolerance so independent reconstructions of
    # the same surface point usually hash to the same bucket
    q = np.round(np.asarray(position, dtype=np.float64) * 2.0).astype(np.int64)
    digest = hashlib.sha256(
        q.tobytes() + int(seed).to_bytes(8, "little", signed=True)
    ).digest()
    return int.from_bytes(digest[:8], "little") / 2.0**64


def split_dataset(
    table: PatchTable,
    pairs: PairSet | None,
    ratio: float = 0.8,
    seed: int = 0,
    *,
    mode: str = "shuffle",
    positions=None,
    version: str = "V1",
    scene_id: str = "synthetic",
    descriptor: str = "psift",
):
    """Point-level train/test split; all patches of a point land on one
    side so near-duplicates never straddle the boundary.

    mode "shuffle" targets the patch-level ratio through a seeded point
    shuffle.  mode "frozen" assigns each point by hashing its quantized
    3D position (requires positions), so test membership of a physical
    point survives dataset regrowth; its achieved ratio is only
    approximate.  Returns (train, test) manifests carrying their point
    ids and pair subsets.
    """
    if not 0.0 < ratio < 1.0:
        raise ValueError("ratio must lie in (0, 1)")
    pids = sorted(table.points)
    counts = {p: len(table.points[p]) for p in pids}
    total = sum(counts.values())

    if mode == "shuffle":
        order = list(pids)
        np.random.default_rng(seed).shuffle(order)
        target = ratio * total
        train_ids: set[int] = set()
        cum = 0
        for p in order:
            if cum < target:
                train_ids.add(p)
                cum += counts[p]
    elif mode == "frozen":
        if positions is None:
            raise ValueError("frozen mode needs point positions")
        pos = _positions_of(positions)
        train_ids = {p for p in pids if _position_fraction(pos[p], seed) < ratio}
    else:
        raise ValueError(f"unknown split mode {mode!r}")

    test_ids = set(pids) - train_ids
    n_train = sum(counts[p] for p in train_ids)
    frac = n_train / total if total else 0.0
    ps = pairs or PairSet()

    def _side(split, ids, fraction):
        side_pairs = ps.subset(ids)
        return DatasetManifest(
            version=version,
            scene_id=scene_id,
            descriptor=descriptor,
            split=split,
            split_fraction=fraction,
            patch_count=sum(counts[p] for p in ids),
            positive_pairs=len(side_pairs.positives),
            negative_pairs=len(side_pairs.negatives),
            point_ids=sorted(ids),
            pairs=side_pairs,
        )

    return _side("train", train_ids, frac), _side("test", test_ids, 1.0 - frac)


def make_manifest(
    table: PatchTable,
    pairs: PairSet | None = None,
    *,
    version: str = "V1",
    scene_id: str = "synthetic",
    descriptor: str = "psift",
    split: str = "all",
    split_fraction: float = 1.0,
) -> DatasetManifest:
    """Manifest covering a whole table, for unsplit containers."""
    ps = pairs or PairSet()
    return DatasetManifest(
        version=version,
        scene_id=scene_id,
        descriptor=descriptor,
        split=split,
        split_fraction=split_fraction,
        patch_count=table.n_patches,
        positive_pairs=len(ps.positives),
        negative_pairs=len(ps.negatives),
        point_ids=sorted(table.points),
        pairs=ps,
    )


def write_container(table: PatchTable, manifest: DatasetManifest, out_dir) -> list[str]:
    """Write mosaics, info.txt, pairs.txt and manifest.json into out_dir.

    Patches are tiled 16x16 per 1024x1024 8-bit mosaic, row-major, final
    mosaic zero-padded.  Ordering is canonical (point_id, then view_id).
    manifest.files is replaced with everything written except
    manifest.json itself.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sub = table.subset(manifest.point_ids) if manifest.point_ids else table
    ordered = list(sub.ordered())
    if len(ordered) != manifest.patch_count:
        raise CorruptContainerError(
            f"manifest says {manifest.patch_count} patches, table holds {len(ordered)}"
        )

    index = {}
    for i, (pid, rec) in enumerate(ordered):
        if rec.patch.shape != (PATCH_SIZE, PATCH_SIZE):
            raise CorruptContainerError(
                f"container stores {PATCH_SIZE} px patches, got {rec.patch.shape}"
            )
        index[(pid, rec.view_id)] = i

    files: list[str] = []
    per = MOSAIC_TILES * MOSAIC_TILES
    n_mosaics = math.ceil(len(ordered) / per)
    for m in range(n_mosaics):
        tile = np.zeros((MOSAIC_PX, MOSAIC_PX), dtype=np.uint8)
        for c, (pid, rec) in enumerate(ordered[m * per : (m + 1) * per]):
            r, col = divmod(c, MOSAIC_TILES)
            tile[
                r * PATCH_SIZE : (r + 1) * PATCH_SIZE,
                col * PATCH_SIZE : (col + 1) * PATCH_SIZE,
            ] = rec.patch
        name = f"patches{m:04d}.pgm"
        save_image(ImageGray(tile), out / name)
        files.append(name)

    info_lines = [f"{pid} 0" for pid, _ in ordered]
    text = "\n".join(info_lines) + ("\n" if info_lines else "")
    (out / "info.txt").write_text(text, encoding="utf-8")
    files.append("info.txt")

    ps = manifest.pairs or PairSet()
    if (
        len(ps.positives) != manifest.positive_pairs
        or len(ps.negatives) != manifest.negative_pairs
    ):
        raise CorruptContainerError("manifest pair counts disagree with pair set")
    pair_lines = []
    for label, pair_list in ((1, ps.positives), (0, ps.negatives)):
        for a, b in pair_list:
            try:
                ia, ib = index[tuple(a)], index[tuple(b)]
            except KeyError:
                raise CorruptContainerError(
                    f"pair ({a}, {b}) references a patch outside the container"
                ) from None
            pair_lines.append(f"{ia} {a[0]} {ib} {b[0]} {label}")
    text = "\n".join(pair_lines) + ("\n" if pair_lines else "")
    (out / "pairs.txt").write_text(text, encoding="utf-8")
    files.append("pairs.txt")

    manifest.files = list(files)
    (out / "manifest.json").write_text(manifest.to_json(), encoding="utf-8")
    return files


def read_container(src_dir):
    """Load a container directory back into (table, manifest, pairs).

    The format stores patch identity only; view ids come back as
    per-point ordinals and centers as NaN.  Raises Corrupt-Container on
    any count mismatch against the manifest.
    """
    src = Path(src_dir)
    manifest = DatasetManifest.from_json(
        (src / "manifest.json").read_text(encoding="utf-8")
    )

    point_seq = []
    for line in (src / "info.txt").read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        tok = line.split()
        if len(tok) != 2:
            raise CorruptContainerError(f"bad info line: {line!r}")
        point_seq.append(int(tok[0]))
    if len(point_seq) != manifest.patch_count:
        raise CorruptContainerError(
            f"manifest says {manifest.patch_count} patches, "
            f"info.txt lists {len(point_seq)}"
        )

    per = MOSAIC_TILES * MOSAIC_TILES
    patches = []
    for m in range(math.ceil(len(point_seq) / per)):
        img = load_image(src / f"patches{m:04d}.pgm")
        if img.pixels.shape != (MOSAIC_PX, MOSAIC_PX):
            raise CorruptContainerError(
                f"mosaic {m} has shape {img.pixels.shape}, want {(MOSAIC_PX, MOSAIC_PX)}"
            )
        for c in range(min(per, len(point_seq) - m * per)):
            r, col = divmod(c, MOSAIC_TILES)
            patches.append(
                img.pixels[
                    r * PATCH_SIZE : (r + 1) * PATCH_SIZE,
                    col * PATCH_SIZE : (col + 1) * PATCH_SIZE,
                ].copy()
            )

    table = PatchTable()
    ordinal: dict[int, int] = {}
    ref_of = []
    nan_center = (float("nan"), float("nan"))
    for pid, patch in zip(point_seq, patches):
        v = ordinal.get(pid, 0)
        ordinal[pid] = v + 1
        table.points.setdefault(pid, []).append(PatchRecord(v, patch, nan_center))
        ref_of.append((pid, v))

    positives, negatives = [], []
    for line in (src / "pairs.txt").read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        tok = line.split()
        if len(tok) != 5:
            raise CorruptContainerError(f"bad pairs line: {line!r}")
        ia, pa, ib, pb, label = (int(t) for t in tok)
        if not (0 <= ia < len(ref_of) and 0 <= ib < len(ref_of)):
            raise CorruptContainerError(f"pair index out of range: {line!r}")
        if ref_of[ia][0] != pa or ref_of[ib][0] != pb:
            raise CorruptContainerError(
                f"pair point ids disagree with info.txt: {line!r}"
            )
        if label == 1:
            positives.append((ref_of[ia], ref_of[ib]))
        elif label == 0:
            negatives.append((ref_of[ia], ref_of[ib]))
        else:
            raise CorruptContainerError(f"pair label must be 0 or 1: {line!r}")
    if (
        len(positives) != manifest.positive_pairs
        or len(negatives) != manifest.negative_pairs
    ):
        raise CorruptContainerError("pair counts disagree with manifest")

    pairs = PairSet(positives, negatives)
    manifest.point_ids = sorted(table.points)
    manifest.pairs = pairs
    return table, manifest, pairs
