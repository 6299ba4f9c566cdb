"""End-to-end drives of the forge command line."""

import csv
import io
import json
import shutil
import subprocess
import sys
from types import SimpleNamespace

import numpy as np
import pytest

from conftest import PLUGIN_DIR, loop_scene_spec, quality_plugin_cmd
from poreforge.cli import main
from poreforge.dmce import (
    CandidateSpec,
    DmceConfig,
    SceneEntry,
    load_state,
    run_id,
    save_config,
)
from poreforge.patchgen import (
    DatasetManifest,
    PairConfig,
    PatchRecord,
    PatchTable,
    make_pairs,
    read_container,
    write_container,
)
from poreforge.reconstruct import load_metrics
from poreforge.synthscene import frontal_view, save_scene_spec


def forge(capsys, *argv):
    code = main([str(a) for a in argv])
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def stderr_payload(err):
    return json.loads(err.splitlines()[0])


class TestErrorContract:
    def test_unknown_command_is_usage(self, capsys):
        code, _, err = forge(capsys, "nonsense")
        payload = stderr_payload(err)
        assert code == 1
        assert payload["error"] == "usage"
        assert payload["exit_code"] == 1

    def test_missing_required_flag_is_usage(self, capsys):
        code, _, err = forge(capsys, "report")
        assert code == 1
        assert stderr_payload(err)["error"] == "usage"

    def test_missing_input_is_io(self, capsys):
        code, _, err = forge(capsys, "report", "--run", "/no/such/run")
        payload = stderr_payload(err)
        assert code == 2
        assert payload["error"] == "FileNotFoundError"
        assert payload["exit_code"] == 2

    def test_threads_must_be_positive(self, capsys):
        code, _, err = forge(capsys, "--threads", "0", "report", "--run", "x")
        assert code == 1
        assert "threads" in stderr_payload(err)["message"]

    def test_threads_env_fallback(self, capsys, monkeypatch):
        monkeypatch.setenv("FORGE_THREADS", "not-a-number")
        code, _, err = forge(capsys, "report", "--run", "x")
        assert code == 1
        assert "FORGE_THREADS" in stderr_payload(err)["message"]
        # explicit flag wins over the broken environment
        monkeypatch.setenv("FORGE_THREADS", "0")
        code, _, err = forge(capsys, "--threads", "2", "report", "--run", "/no/such")
        assert code == 2

    def test_help_exits_zero(self, capsys):
        code, out, _ = forge(capsys, "--help")
        assert code == 0

    def test_console_script_installed(self):
        exe = shutil.which("forge")
        assert exe is not None
        proc = subprocess.run(
            [exe, "--help"], capture_output=True, text=True, timeout=60
        )
        assert proc.returncode == 0
        assert proc.stdout.startswith("usage: forge")


@pytest.fixture(scope="module")
def chain(tmp_path_factory):
    """scene gen -> reconstruct -> patches, all through the CLI."""
    root = tmp_path_factory.mktemp("cli-chain")
    spec = loop_scene_spec(33)
    spec_path = root / "scene_spec.json"
    save_scene_spec(spec, spec_path)
    scene = root / "scene"
    assert main(["scene", "gen", "--spec", str(spec_path), "--out", str(scene)]) == 0
    model = root / "model"
    assert main([
        "reconstruct",
        "--images", str(scene),
        "--cameras", str(scene / "rig.json"),
        "--max-keypoints", "500",
        "--out", str(model),
    ]) == 0
    dataset = root / "dataset"
    assert main([
        "--seed", "5",
        "patches",
        "--model", str(model),
        "--images", str(scene),
        "--frontal", str(frontal_view(spec)),
        "--max-keypoints", "500",
        "--anchor-px", "3.0",
        "--scene-id", "cli-demo",
        "--out", str(dataset),
    ]) == 0
    return SimpleNamespace(
        root=root, spec=spec, spec_path=spec_path,
        scene=scene, model=model, dataset=dataset,
    )


class TestPipelineChain:
    def test_scene_directory_complete(self, chain):
        views = sorted(chain.scene.glob("view*.pgm"))
        assert len(views) == 16
        assert (chain.scene / "rig.json").is_file()
        assert (chain.scene / "scene.json").is_file()

    def test_scene_gen_is_deterministic(self, chain, tmp_path):
        again = tmp_path / "again"
        assert main([
            "scene", "gen", "--spec", str(chain.spec_path), "--out", str(again)
        ]) == 0
        for name in ("view07.pgm", "view00.pgm", "rig.json", "scene.json"):
            assert (again / name).read_bytes() == (chain.scene / name).read_bytes()

    def test_model_directory_complete(self, chain):
        assert (chain.model / "sparse" / "points3D.txt").is_file()
        assert (chain.model / "sparse" / "rig.json").is_file()
        assert (chain.model / "dense.ply").is_file()
        assert (chain.model / "depth_maps.npz").is_file()
        metrics = load_metrics(chain.model / "metrics.json")
        assert metrics.registered_images >= 2
        assert metrics.dense_points > 0

    def test_dataset_containers_readable(self, chain):
        for split in ("train", "test"):
            table, man, pairs = read_container(chain.dataset / split)
            assert man.scene_id == "cli-demo"
            assert man.split == split
            assert len(table.points) > 0
            assert pairs is not None

    def test_eval_builtin_writes_reports(self, chain, capsys, tmp_path):
        rep = tmp_path / "rep"
        code, out, _ = forge(
            capsys, "eval", "fpr95",
            "--dataset", chain.dataset, "--descriptor", "psift", "--out", rep,
        )
        assert code == 0
        assert "FPR95" in out
        for name in ("report.json", "report.md", "report.csv"):
            assert (rep / name).is_file()
        payload = json.loads((rep / "report.json").read_text())
        assert payload["verification"][0]["descriptor"] == "psift"
        assert 0.0 <= payload["verification"][0]["fpr95"] <= 1.0

    def test_eval_plugin_descriptor(self, chain, capsys, tmp_path):
        cmd = " ".join(quality_plugin_cmd("good"))
        code, out, _ = forge(
            capsys, "eval", "fpr95",
            "--dataset", chain.dataset / "test",
            "--descriptor", f"plugin:{cmd}",
            "--out", tmp_path / "rep",
        )
        assert code == 0
        assert "quality-good" in out

    def test_eval_crashing_plugin_exits_4(self, chain, capsys, tmp_path):
        crash = PLUGIN_DIR / "crash_plugin.py"
        code, _, err = forge(
            capsys, "eval", "fpr95",
            "--dataset", chain.dataset,
            "--descriptor", f"plugin:{sys.executable} {crash} exit",
            "--out", tmp_path / "rep",
        )
        assert code == 4
        assert stderr_payload(err)["exit_code"] == 4

    def test_eval_unknown_builtin_is_usage(self, chain, capsys, tmp_path):
        code, _, err = forge(
            capsys, "eval", "fpr95",
            "--dataset", chain.dataset, "--descriptor", "surf",
            "--out", tmp_path / "rep",
        )
        assert code == 1


class TestPerfectSeparation:
    def test_report_shows_zero(self, tmp_path, capsys):
        rng = np.random.default_rng(3)
        table = PatchTable()
        for pid in range(25):
            patch = rng.integers(0, 256, (64, 64)).astype(np.uint8)
            table.points[pid] = [
                PatchRecord(v, patch.copy(), (32.0, 32.0)) for v in range(2)
            ]
        pairs = make_pairs(table, PairConfig(seed=0))
        man = DatasetManifest(
            split="all",
            split_fraction=1.0,
            patch_count=50,
            positive_pairs=len(pairs.positives),
            negative_pairs=len(pairs.negatives),
            point_ids=sorted(table.points),
            pairs=pairs,
        )
        write_container(table, man, tmp_path / "sep")
        rep = tmp_path / "rep"
        code, out, _ = forge(
            capsys, "eval", "fpr95",
            "--dataset", tmp_path / "sep", "--descriptor", "psift", "--out", rep,
        )
        assert code == 0
        assert "FPR95 0.0000" in out
        payload = json.loads((rep / "report.json").read_text())
        assert payload["verification"][0]["fpr95"] == 0.0
        assert "0.00" in (rep / "report.md").read_text()


@pytest.fixture(scope="module")
def cli_run(tmp_path_factory):
    """A two-round loop driven entirely through the CLI."""
    root = tmp_path_factory.mktemp("cli-dmce")
    cfg = DmceConfig(
        scenes=[
            SceneEntry("gen-a", spec=loop_scene_spec(21)),
            SceneEntry("holdout", spec=loop_scene_spec(23), eval_only=True),
        ],
        candidates=[
            CandidateSpec("quality-good", quality_plugin_cmd("good")),
            CandidateSpec("quality-bad", quality_plugin_cmd("bad")),
        ],
        n_iter=2,
        seed=11,
        max_keypoints=500,
        anchor_px=3.0,
    )
    cfg_path = root / "dmce.json"
    save_config(cfg, cfg_path)
    runs = root / "runs"
    assert main(["dmce", "run", "--config", str(cfg_path), "--out", str(runs)]) == 0
    return SimpleNamespace(
        cfg=cfg, cfg_path=cfg_path, runs=runs, run_dir=runs / run_id(cfg)
    )


class TestDmceCli:
    def test_run_wrote_two_iteration_records(self, cli_run):
        state = load_state(cli_run.run_dir)
        assert state.lineage == ["V1", "V2"]
        assert state.status == "exhausted"
        assert state.records[1].selection["winner"] == "quality-good"

    def test_rerun_refused_as_pipeline_error(self, cli_run, capsys):
        code, _, err = forge(
            capsys, "dmce", "run",
            "--config", cli_run.cfg_path, "--out", cli_run.runs,
        )
        assert code == 3
        assert stderr_payload(err)["error"] == "ForgeError"

    def test_resume_of_finished_run_is_noop(self, cli_run, capsys):
        before = (cli_run.run_dir / "state.json").read_bytes()
        code, out, _ = forge(capsys, "dmce", "resume", "--run", cli_run.run_dir)
        assert code == 0
        assert "already exhausted" in out
        assert (cli_run.run_dir / "state.json").read_bytes() == before

    def test_report_markdown(self, cli_run, capsys):
        code, out, _ = forge(capsys, "report", "--run", cli_run.run_dir)
        assert code == 0
        assert "status: exhausted" in out
        assert "lineage: V1 -> V2" in out
        rows = [l for l in out.splitlines() if l.startswith("| V2")]
        assert len(rows) == 2
        winner_row = next(r for r in rows if "quality-good" in r)
        assert "*" in winner_row

    def test_report_csv(self, cli_run, capsys):
        code, out, _ = forge(
            capsys, "report", "--run", cli_run.run_dir, "--format", "csv"
        )
        assert code == 0
        rows = list(csv.DictReader(io.StringIO(out)))
        assert {r["candidate"] for r in rows} == {"quality-good", "quality-bad"}
        stars = [r for r in rows if r["winner"] == "*"]
        assert len(stars) == 1 and stars[0]["candidate"] == "quality-good"

    def test_report_json(self, cli_run, capsys):
        code, out, _ = forge(
            capsys, "report", "--run", cli_run.run_dir, "--format", "json"
        )
        assert code == 0
        payload = json.loads(out)
        assert payload["lineage"] == ["V1", "V2"]
        assert payload["status"] == "exhausted"

    def test_bad_format_rejected(self, cli_run, capsys):
        code, _, err = forge(
            capsys, "report", "--run", cli_run.run_dir, "--format", "xml"
        )
        assert code == 1
        assert stderr_payload(err)["error"] == "usage"
