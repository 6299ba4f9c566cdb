"""Train-evaluate-regenerate loop over candidate descriptors.

The loop bootstraps a patch dataset with the handcrafted descriptor,
then repeats: train every candidate on the previous version's train
split, score each candidate by reconstructing held-out scenes, pick the
winner on dense-point count with banded tie-breaking, and regrow the
dataset with that winner.  It stops once the winner's dense count stops
improving or the iteration budget runs out.

Everything lands under runs/<run-id>/: config.json, per-iteration
dataset/model/metric directories, and an atomically replaced state.json.
state.json carries no timestamps and every artifact it references is
content-hashed, so a killed run resumes to the same lineage; wall-clock
chatter goes to a sidecar run.log instead.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .descriptors import get_descriptor, open_plugin
from .errors import (
    AllCandidatesFailedError,
    DimMismatchError,
    EmptyRosterError,
    EmptySparseModelError,
    ForgeError,
    InsufficientSamplesError,
    PluginCrashedError,
    PluginProtocolError,
)
from .evalbench import average_metrics, config_hash, evaluate_descriptor
from .geometry import load_rig
from .imaging import DetectorConfig, detect_keypoints, load_image
from .patchgen import (
    DatasetManifest,
    PairConfig,
    anchor_points,
    build_patch_table,
    depth_map_visibility,
    make_pairs,
    read_container,
    split_dataset,
    write_container,
)
from .reconstruct import ReconMetrics, SfmConfig, compute_metrics, run_mvs, run_sfm
from .synthscene import (
    SceneSpec,
    frontal_view,
    generate_scene,
    load_scene_spec,
    make_rig,
)

logger = logging.getLogger(__name__)

STATUS_RUNNING = "running"
STATUS_SATURATED = "saturated"
STATUS_EXHAUSTED = "exhausted"

# tie-breaker -> sort direction over the metrics field of the same name
# (-1 prefers larger values, +1 smaller)
TIE_BREAKERS = {
    "sparse_points": -1,
    "mean_reproj_error": 1,
    "mean_track_length": -1,
}
DEFAULT_TIE_BREAKERS = ("sparse_points", "mean_reproj_error", "mean_track_length")


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CandidateSpec:
    """One roster entry: a plugin argv, or a builtin descriptor name."""

    name: str
    command: tuple = ()

    def __post_init__(self):
        if not self.name:
            raise ValueError("candidate needs a name")
        object.__setattr__(self, "command", tuple(str(c) for c in self.command))

    @property
    def is_plugin(self) -> bool:
        return bool(self.command)


@dataclass(frozen=True)
class SceneEntry:
    """A scene to forge from: a synthesis spec, or a rendered directory.

    eval_only scenes score candidates and never feed a dataset.
    """

    scene_id: str
    spec: SceneSpec | None = None
    path: str | None = None
    eval_only: bool = False

    def __post_init__(self):
        if not self.scene_id:
            raise ValueError("scene needs an id")
        if (self.spec is None) == (self.path is None):
            raise ValueError("scene takes either a spec or a directory")


@dataclass
class DmceConfig:
    """Loop inputs plus the selection and stopping policy knobs."""

    scenes: list
    candidates: list
    n_iter: int = 4
    band: float = 0.05
    tie_breakers: tuple = DEFAULT_TIE_BREAKERS
    saturation: float = 0.02
    seed: int = 0
    split_ratio: float = 0.8
    anchor_px: float = 5.0
    max_keypoints: int = 3000
    bootstrap_descriptor: str = "psift"

    def __post_init__(self):
        self.tie_breakers = tuple(self.tie_breakers)
        if self.n_iter < 1:
            raise ValueError("n_iter must be at least 1")
        if not 0.0 < self.band < 0.5:
            raise ValueError("band must lie in (0, 0.5)")
        if not 0.0 < self.split_ratio < 1.0:
            raise ValueError("split_ratio must lie in (0, 1)")
        if self.saturation <= 0.0:
            raise ValueError("saturation threshold must be positive")
        if not self.candidates:
            raise ValueError("need at least one candidate")
        for tb in self.tie_breakers:
            if tb not in TIE_BREAKERS:
                raise ValueError(f"unknown tie-breaker {tb!r}")
        names = [c.name for c in self.candidates]
        if len(set(names)) != len(names):
            raise ValueError("candidate names collide")
        if self.bootstrap_descriptor in names:
            raise ValueError("the bootstrap descriptor cannot be a candidate")
        ids = [s.scene_id for s in self.scenes]
        if len(set(ids)) != len(ids):
            raise ValueError("scene ids collide")
        if not self.generation_scenes():
            raise ValueError("no generation scenes configured")
        if self.n_iter > 1 and not self.eval_scenes():
            raise ValueError("iterating needs at least one eval-only scene")

    def generation_scenes(self):
        return [s for s in self.scenes if not s.eval_only]

    def eval_scenes(self):
        return [s for s in self.scenes if s.eval_only]


def config_to_dict(cfg: DmceConfig) -> dict:
    scenes = []
    for s in cfg.scenes:
        spec = None
        if s.spec is not None:
            spec = dataclasses.asdict(s.spec)
            spec["light"] = list(spec["light"])
        scenes.append(
            {
                "scene_id": s.scene_id,
                "spec": spec,
                "path": s.path,
                "eval_only": s.eval_only,
            }
        )
    return {
        "scenes": scenes,
        "candidates": [
            {"name": c.name, "command": list(c.command)} for c in cfg.candidates
        ],
        "n_iter": cfg.n_iter,
        "band": cfg.band,
        "tie_breakers": list(cfg.tie_breakers),
        "saturation": cfg.saturation,
        "seed": cfg.seed,
        "split_ratio": cfg.split_ratio,
        "anchor_px": cfg.anchor_px,
        "max_keypoints": cfg.max_keypoints,
        "bootstrap_descriptor": cfg.bootstrap_descriptor,
    }


def config_from_dict(raw: dict) -> DmceConfig:
    scenes = []
    for s in raw["scenes"]:
        spec = None
        if s.get("spec") is not None:
            d = dict(s["spec"])
            d["light"] = tuple(d["light"])
            spec = SceneSpec(**d)
        scenes.append(
            SceneEntry(
                scene_id=s["scene_id"],
                spec=spec,
                path=s.get("path"),
                eval_only=bool(s.get("eval_only", False)),
            )
        )
    candidates = [
        CandidateSpec(c["name"], tuple(c.get("command", ()))) for c in raw["candidates"]
    ]
    keys = (
        "n_iter",
        "band",
        "tie_breakers",
        "saturation",
        "seed",
        "split_ratio",
        "anchor_px",
        "max_keypoints",
        "bootstrap_descriptor",
    )
    extra = {k: raw[k] for k in keys if k in raw}
    return DmceConfig(scenes=scenes, candidates=candidates, **extra)


def save_config(cfg: DmceConfig, path) -> None:
    text = json.dumps(config_to_dict(cfg), indent=2, sort_keys=True) + "\n"
    Path(path).write_text(text, encoding="utf-8")


def load_config(path) -> DmceConfig:
    return config_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def run_id(cfg: DmceConfig) -> str:
    """Stable directory name: same config, same id."""
    return "run-" + config_hash(config_to_dict(cfg))


# ---------------------------------------------------------------------------
# Run state
# ---------------------------------------------------------------------------


@dataclass
class IterationRecord:
    """Everything one iteration decided and produced.

    dataset maps scene ids to run-relative train/test container dirs;
    artifacts maps run-relative paths to sha256 digests.  selection is
    None only for the bootstrap iteration.
    """

    index: int
    version: str
    generator: str
    dataset: dict
    candidate_metrics: dict = field(default_factory=dict)
    candidate_fpr95: dict = field(default_factory=dict)
    failed_candidates: dict = field(default_factory=dict)
    failed_scenes: dict = field(default_factory=dict)
    selection: dict | None = None
    artifacts: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.selection is not None:
            if self.selection.get("winner") not in self.selection.get("roster", []):
                raise ValueError("selection winner missing from its roster")

    def winner_dense(self) -> float | None:
        """Scene-averaged dense count of this iteration's winner, when
        the iteration evaluated candidates at all."""
        if self.selection is None:
            return None
        m = self.candidate_metrics.get(self.selection["winner"])
        return None if m is None else float(m.dense_points)

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "version": self.version,
            "generator": self.generator,
            "dataset": self.dataset,
            "candidate_metrics": {
                n: dataclasses.asdict(m) for n, m in self.candidate_metrics.items()
            },
            "candidate_fpr95": self.candidate_fpr95,
            "failed_candidates": self.failed_candidates,
            "failed_scenes": self.failed_scenes,
            "selection": self.selection,
            "artifacts": self.artifacts,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "IterationRecord":
        return cls(
            index=int(raw["index"]),
            version=raw["version"],
            generator=raw["generator"],
            dataset=raw["dataset"],
            candidate_metrics={
                n: ReconMetrics(**m) for n, m in raw["candidate_metrics"].items()
            },
            candidate_fpr95=raw["candidate_fpr95"],
            failed_candidates=raw["failed_candidates"],
            failed_scenes=raw["failed_scenes"],
            selection=raw["selection"],
            artifacts=raw["artifacts"],
        )


@dataclass
class DmceRunState:
    config_hash: str
    records: list = field(default_factory=list)
    status: str = STATUS_RUNNING

    @property
    def lineage(self):
        return [r.version for r in self.records]

    def to_json(self) -> str:
        payload = {
            "config_hash": self.config_hash,
            "lineage": self.lineage,
            "status": self.status,
            "records": [r.to_dict() for r in self.records],
        }
        return json.dumps(payload, indent=2, sort_keys=True, allow_nan=False) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "DmceRunState":
        raw = json.loads(text)
        state = cls(
            config_hash=raw["config_hash"],
            records=[IterationRecord.from_dict(r) for r in raw["records"]],
            status=raw["status"],
        )
        if raw.get("lineage") != state.lineage:
            raise ForgeError("state lineage disagrees with its records")
        return state


def save_state(state: DmceRunState, run_dir) -> None:
    """Replace state.json atomically; a kill leaves old or new, not half."""
    path = Path(run_dir) / "state.json"
    tmp = path.with_name("state.json.tmp")
    tmp.write_text(state.to_json(), encoding="utf-8")
    os.replace(tmp, path)


def load_state(run_dir) -> DmceRunState:
    return DmceRunState.from_json(
        (Path(run_dir) / "state.json").read_text(encoding="utf-8")
    )


# ---------------------------------------------------------------------------
# Selection and stopping
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SelectionPolicy:
    band: float = 0.05
    tie_breakers: tuple = DEFAULT_TIE_BREAKERS

    def __post_init__(self):
        if not 0.0 < self.band < 0.5:
            raise ValueError("band must lie in (0, 0.5)")
        for tb in self.tie_breakers:
            if tb not in TIE_BREAKERS:
                raise ValueError(f"unknown tie-breaker {tb!r}")


def select_best(records, policy: SelectionPolicy | None = None):
    """Winner among per-candidate scene-averaged reconstruction rows.

    The highest dense count leads; every candidate within the band stays
    in contention; tie-breakers run in configured order and candidate
    name settles whatever is left.  Returns (name, rationale lines).
    """
    pol = policy or SelectionPolicy()
    if not records:
        raise EmptyRosterError("no candidates to select from")
    names = sorted(records)
    if len(names) == 1:
        return names[0], ["sole member"]

    dense = {n: float(records[n].dense_points) for n in names}
    leader = max(names, key=lambda n: (dense[n], n))
    floor = (1.0 - pol.band) * dense[leader]
    survivors = [n for n in names if dense[n] >= floor]
    trace = [
        f"dense-point leader {leader} at {dense[leader]:.1f}",
        f"band floor {floor:.1f} keeps {', '.join(survivors)}",
    ]
    for tb in pol.tie_breakers:
        if len(survivors) == 1:
            break
        direction = TIE_BREAKERS[tb]
        vals = {n: float(getattr(records[n], tb)) for n in survivors}
        best = min(vals[n] * direction for n in survivors)
        survivors = [n for n in survivors if vals[n] * direction == best]
        trace.append(f"{tb} keeps {', '.join(survivors)} at {best * direction:.4g}")
    if len(survivors) > 1:
        trace.append(f"name order settles {survivors[0]}")
    return survivors[0], trace


def check_saturation(state: DmceRunState, threshold: float = 0.02) -> str:
    """"continue" or "saturated", judged on the winner's relative
    dense-point gain between the last two evaluated iterations.  The
    bootstrap iteration has no evaluated winner and never counts.
    """
    evaluated = [r for r in state.records if r.winner_dense() is not None]
    if len(evaluated) < 2:
        return "continue"
    prev = evaluated[-2].winner_dense()
    cur = evaluated[-1].winner_dense()
    if prev > 0:
        gain = (cur - prev) / prev
    elif cur > prev:
        gain = float("inf")
    else:
        gain = 0.0
    return STATUS_SATURATED if gain < threshold else "continue"


# ---------------------------------------------------------------------------
# Scene forging
# ---------------------------------------------------------------------------


def load_scene(entry: SceneEntry):
    """Images, cameras and the frontal view index for one entry.

    Spec entries re-render on demand (seeded, so repeatable); path
    entries read the directory layout write_scene produces.  Directory
    scenes without a scene.json fall back to the middle view as frontal.
    """
    if entry.spec is not None:
        _, images = generate_scene(entry.spec)
        return images, make_rig(entry.spec), frontal_view(entry.spec)
    root = Path(entry.path)
    cams = load_rig(root / "rig.json")
    images = [load_image(p) for p in sorted(root.glob("view*.pgm"))]
    if len(images) != len(cams):
        raise ForgeError(f"{root}: {len(images)} views for {len(cams)} cameras")
    spec_path = root / "scene.json"
    if spec_path.exists():
        return images, cams, frontal_view(load_scene_spec(spec_path))
    return images, cams, len(images) // 2


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _hash_tree(root: Path, run_dir: Path) -> dict:
    return {
        str(p.relative_to(run_dir)): _sha256(p)
        for p in sorted(root.rglob("*"))
        if p.is_file()
    }


def _forge_scene(entry, handle, version, cfg: DmceConfig, run_dir: Path, out_dir: Path):
    """Reconstruct one scene with handle and write its split containers.

    Returns ({"train": rel, "test": rel}, {rel file: sha256}).  Raises
    through the usual pipeline errors when the scene yields nothing.
    """
    images, cams, fr = load_scene(entry)
    sfm_cfg = SfmConfig(detector=DetectorConfig(max_keypoints=cfg.max_keypoints))
    model = run_sfm(images, cams, handle, sfm_cfg)
    if model.is_empty or len(model.registered) < 2:
        raise EmptySparseModelError(
            f"{entry.scene_id}: sparse model empty ({getattr(model, 'notes', '')})"
        )
    dense = run_mvs(model, images)
    if len(dense) == 0:
        raise EmptySparseModelError(f"{entry.scene_id}: no dense points")
    kps = detect_keypoints(images[fr], DetectorConfig(max_keypoints=cfg.max_keypoints))
    anchored = anchor_points(dense, kps, cams[fr], cfg.anchor_px)
    table = build_patch_table(
        anchored, dense, images, cams, depth_map_visibility(dense, cams)
    )
    if not table.points:
        raise EmptySparseModelError(f"{entry.scene_id}: no anchored patches")
    pairs = make_pairs(table, PairConfig(seed=cfg.seed))
    train_m, test_m = split_dataset(
        table,
        pairs,
        cfg.split_ratio,
        seed=cfg.seed,
        mode="frozen",
        positions=dense,
        version=version,
        scene_id=entry.scene_id,
        descriptor=handle.spec.name,
    )
    refs = {}
    for split, man in (("train", train_m), ("test", test_m)):
        dest = out_dir / split
        write_container(table, man, dest)
        refs[split] = str(dest.relative_to(run_dir))
    logger.info(
        "%s %s: %d points, %d train / %d test patches",
        version,
        entry.scene_id,
        len(table.points),
        train_m.patch_count,
        test_m.patch_count,
    )
    return refs, _hash_tree(out_dir, run_dir)


def _write_index(run_dir: Path, n: int, version: str, generator: str, dataset, models):
    """dataset/index.json: what a TRAIN call needs to find the splits.

    Paths inside are relative to the index file's own directory so the
    run directory can move; models point at this iteration's copies.
    """
    base = run_dir / f"iter{n}" / "dataset"
    scenes = {}
    for sid, refs in sorted(dataset.items()):
        scenes[sid] = {
            split: os.path.relpath(run_dir / rel, base) for split, rel in refs.items()
        }
    payload = {
        "version": version,
        "generator": generator,
        "scenes": scenes,
        "models": {name: f"../models/{name}.bin" for name in sorted(models)},
    }
    path = base / "index.json"
    path.write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return path


# ---------------------------------------------------------------------------
# Iterations
# ---------------------------------------------------------------------------


def bootstrap(cfg: DmceConfig, run_dir) -> IterationRecord:
    """V1: forge every generation scene with the bootstrap descriptor.

    Individual scenes may fail and are recorded as such; only a clean
    sweep of failures aborts.
    """
    run_dir = Path(run_dir)
    version = "V1"
    handle = get_descriptor(cfg.bootstrap_descriptor)
    dataset = {}
    failed = {}
    artifacts = {}
    for entry in cfg.generation_scenes():
        out = run_dir / "iter1" / "dataset" / entry.scene_id
        try:
            refs, hashes = _forge_scene(entry, handle, version, cfg, run_dir, out)
        except ForgeError as exc:
            logger.warning("scene %s failed: %s", entry.scene_id, exc)
            failed[entry.scene_id] = str(exc)
            continue
        dataset[entry.scene_id] = refs
        artifacts.update(hashes)
    if not dataset:
        raise ForgeError("every generation scene failed during bootstrap")
    index = _write_index(run_dir, 1, version, handle.spec.name, dataset, {})
    artifacts[str(index.relative_to(run_dir))] = _sha256(index)
    return IterationRecord(
        index=1,
        version=version,
        generator=handle.spec.name,
        dataset=dataset,
        failed_scenes=failed,
        artifacts=artifacts,
    )


def _open_candidate(cand: CandidateSpec):
    if cand.is_plugin:
        return open_plugin(list(cand.command))
    return get_descriptor(cand.name)


def _stash_model(source: str, dest: Path):
    """Copy a plugin's model artifact under the run; missing files are
    tolerated (a plugin may return an opaque token instead of a path)."""
    src = Path(source)
    if not src.is_file():
        return None
    dest.parent.mkdir(parents=True, exist_ok=True)
    shutil.copyfile(src, dest)
    return _sha256(dest)


def _evaluate_candidate(handle, eval_scenes, prev: IterationRecord, run_dir: Path, cfg):
    """Scene-averaged reconstruction metrics on the held-out scenes,
    plus mean FPR95 over the previous version's test containers."""
    sfm_cfg = SfmConfig(detector=DetectorConfig(max_keypoints=cfg.max_keypoints))
    rows = []
    for entry in eval_scenes:
        images, cams, _ = load_scene(entry)
        model = run_sfm(images, cams, handle, sfm_cfg)
        dense = None
        if not model.is_empty and len(model.registered) >= 2:
            dense = run_mvs(model, images)
        rows.append(compute_metrics(model, dense))
    avg = average_metrics(rows)
    scores = []
    for sid, refs in sorted(prev.dataset.items()):
        table, _man, pairs = read_container(run_dir / refs["test"])
        try:
            res = evaluate_descriptor(handle, pairs, table)
        except InsufficientSamplesError:
            continue
        scores.append(res.fpr95)
    f95 = float(np.mean(scores)) if scores else None
    return avg, f95


def run_iteration(state: DmceRunState, cfg: DmceConfig, n: int, run_dir) -> IterationRecord:
    """One train-evaluate-regenerate pass producing Vn.

    Candidates that crash or refuse TRAIN drop out of this iteration's
    roster with a recorded reason; losing all of them is fatal.
    """
    run_dir = Path(run_dir)
    if not state.records or state.records[-1].index != n - 1:
        raise ValueError(f"iteration {n} needs iteration {n - 1} completed")
    prev = state.records[-1]
    version = f"V{n}"
    it_dir = run_dir / f"iter{n}"
    train_manifest = run_dir / f"iter{n - 1}" / "dataset" / "index.json"
    eval_scenes = cfg.eval_scenes()
    if not eval_scenes:
        raise ValueError("run_iteration needs at least one eval-only scene")
    policy = SelectionPolicy(cfg.band, cfg.tie_breakers)

    handles = {}
    failed = {}
    metrics = {}
    fprs = {}
    artifacts = {}
    try:
        for cand in cfg.candidates:
            try:
                handle = _open_candidate(cand)
            except (PluginCrashedError, PluginProtocolError) as exc:
                logger.warning("candidate %s failed to start: %s", cand.name, exc)
                failed[cand.name] = f"startup: {exc}"
                continue
            handles[cand.name] = handle
            if cand.is_plugin:
                try:
                    ok, result = handle.train(str(train_manifest))
                except PluginCrashedError as exc:
                    failed[cand.name] = f"train: {exc}"
                    continue
                if not ok:
                    logger.warning("candidate %s refused TRAIN: %s", cand.name, result)
                    failed[cand.name] = f"train: {result}"
                    continue
                digest = _stash_model(result, it_dir / "models" / f"{cand.name}.bin")
                if digest is not None:
                    artifacts[f"iter{n}/models/{cand.name}.bin"] = digest
            try:
                m, f95 = _evaluate_candidate(handle, eval_scenes, prev, run_dir, cfg)
            except (PluginCrashedError, PluginProtocolError, DimMismatchError) as exc:
                failed[cand.name] = f"evaluate: {exc}"
                continue
            logger.info(
                "%s candidate %s: dense %.1f, sparse %.1f, fpr95 %s",
                version,
                cand.name,
                m.dense_points,
                m.sparse_points,
                "n/a" if f95 is None else f"{f95:.4f}",
            )
            metrics[cand.name] = m
            fprs[cand.name] = f95
        if not metrics:
            detail = "; ".join(f"{k}: {v}" for k, v in sorted(failed.items()))
            raise AllCandidatesFailedError(detail or "empty roster")

        winner, rationale = select_best(metrics, policy)
        logger.info("%s winner %s (%s)", version, winner, "; ".join(rationale))

        dataset = {}
        failed_scenes = {}
        for entry in cfg.generation_scenes():
            out = it_dir / "dataset" / entry.scene_id
            try:
                refs, hashes = _forge_scene(
                    entry, handles[winner], version, cfg, run_dir, out
                )
            except ForgeError as exc:
                logger.warning("scene %s failed: %s", entry.scene_id, exc)
                failed_scenes[entry.scene_id] = str(exc)
                continue
            dataset[entry.scene_id] = refs
            artifacts.update(hashes)
        if not dataset:
            raise ForgeError(f"winner {winner} failed every generation scene")
    finally:
        for h in handles.values():
            h.close()

    index = _write_index(
        run_dir, n, version, winner, dataset, [c for c in metrics if f"iter{n}/models/{c}.bin" in artifacts]
    )
    artifacts[str(index.relative_to(run_dir))] = _sha256(index)

    selection = {"winner": winner, "rationale": rationale, "roster": sorted(metrics)}
    _write_iteration_reports(it_dir, metrics, fprs, failed, selection)
    for name in ("metrics.json", "selection.json"):
        artifacts[f"iter{n}/{name}"] = _sha256(it_dir / name)

    return IterationRecord(
        index=n,
        version=version,
        generator=winner,
        dataset=dataset,
        candidate_metrics=metrics,
        candidate_fpr95=fprs,
        failed_candidates=failed,
        failed_scenes=failed_scenes,
        selection=selection,
        artifacts=artifacts,
    )


def _write_iteration_reports(it_dir: Path, metrics, fprs, failed, selection):
    rows = {}
    for name, m in metrics.items():
        rows[name] = dataclasses.asdict(m)
        rows[name]["fpr95"] = fprs.get(name)
    it_dir.mkdir(parents=True, exist_ok=True)
    (it_dir / "metrics.json").write_text(
        json.dumps({"candidates": rows, "failed": failed}, indent=2, sort_keys=True)
        + "\n",
        encoding="utf-8",
    )
    (it_dir / "selection.json").write_text(
        json.dumps(selection, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


# ---------------------------------------------------------------------------
# Drivers
# ---------------------------------------------------------------------------


def run_dmce(cfg: DmceConfig, runs_root) -> tuple:
    """Fresh run under runs_root/<deterministic id>.

    Refuses a directory that already holds state; resume_dmce continues
    those.  Returns (final state, run directory).
    """
    run_dir = Path(runs_root) / run_id(cfg)
    if (run_dir / "state.json").exists():
        raise ForgeError(f"{run_dir} already has state; resume it instead")
    run_dir.mkdir(parents=True, exist_ok=True)
    save_config(cfg, run_dir / "config.json")
    state = DmceRunState(config_hash=config_hash(config_to_dict(cfg)))
    return _drive(cfg, state, run_dir), run_dir


def resume_dmce(run_dir) -> DmceRunState:
    """Continue a killed run from its last completed iteration.

    Partial iteration directories beyond the recorded state are removed
    and redone; a finished run returns unchanged.
    """
    run_dir = Path(run_dir)
    cfg = load_config(run_dir / "config.json")
    expect = config_hash(config_to_dict(cfg))
    if (run_dir / "state.json").exists():
        state = load_state(run_dir)
        if state.config_hash != expect:
            raise ForgeError("state.json does not belong to config.json")
    else:
        state = DmceRunState(config_hash=expect)
    return _drive(cfg, state, run_dir)


def _drive(cfg: DmceConfig, state: DmceRunState, run_dir: Path) -> DmceRunState:
    if state.status != STATUS_RUNNING:
        return state
    handler = logging.FileHandler(run_dir / "run.log", encoding="utf-8")
    handler.setFormatter(
        logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s")
    )
    pkg_logger = logging.getLogger(__name__.rsplit(".", 1)[0])
    pkg_logger.addHandler(handler)
    try:
        _clear_partial(run_dir, len(state.records))
        if not state.records:
            state.records.append(bootstrap(cfg, run_dir))
            _finish_iteration(state, cfg, run_dir)
        while state.status == STATUS_RUNNING:
            n = len(state.records) + 1
            state.records.append(run_iteration(state, cfg, n, run_dir))
            _finish_iteration(state, cfg, run_dir)
    finally:
        pkg_logger.removeHandler(handler)
        handler.close()
    return state


def _finish_iteration(state: DmceRunState, cfg: DmceConfig, run_dir: Path) -> None:
    if check_saturation(state, cfg.saturation) == STATUS_SATURATED:
        state.status = STATUS_SATURATED
    elif len(state.records) >= cfg.n_iter:
        state.status = STATUS_EXHAUSTED
    save_state(state, run_dir)
    logger.info(
        "completed %s (status %s)", state.records[-1].version, state.status
    )


def _clear_partial(run_dir: Path, completed: int) -> None:
    """Remove iteration directories a kill may have left half-written."""
    for p in run_dir.glob("iter*"):
        try:
            idx = int(p.name[4:])
        except ValueError:
            continue
        if idx > completed and p.is_dir():
            logger.warning("discarding partial %s", p.name)
            shutil.rmtree(p)


# ---------------------------------------------------------------------------
# Auditing
# ---------------------------------------------------------------------------


def audit_eval_isolation(run_dir, cfg: DmceConfig) -> list:
    """Scene-id audit over every container in a run directory.

    Returns one violation line per container claiming an eval-only
    scene; a clean run returns [].
    """
    run_dir = Path(run_dir)
    eval_ids = {s.scene_id for s in cfg.eval_scenes()}
    violations = []
    for man_path in sorted(run_dir.glob("iter*/dataset/*/*/manifest.json")):
        man = DatasetManifest.from_json(man_path.read_text(encoding="utf-8"))
        if man.scene_id in eval_ids:
            violations.append(
                f"{man_path.relative_to(run_dir)}: eval-only scene {man.scene_id}"
            )
    return violations
