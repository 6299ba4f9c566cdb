"""Selection policy, saturation rule, run state, and the mock-plugin loop."""

import hashlib
import json
import shutil

import pytest

from conftest import (
    crash_plugin_cmd,
    loop_config,
    loop_scene_spec,
    metric_row as row,
    quality_plugin_cmd,
    selection_rounds,
)
from poreforge.dmce import (
    CandidateSpec,
    DmceConfig,
    DmceRunState,
    IterationRecord,
    SceneEntry,
    SelectionPolicy,
    audit_eval_isolation,
    bootstrap,
    check_saturation,
    config_from_dict,
    config_to_dict,
    load_scene,
    load_state,
    resume_dmce,
    run_dmce,
    run_id,
    run_iteration,
    save_state,
    select_best,
)
from poreforge.errors import (
    AllCandidatesFailedError,
    EmptyRosterError,
    ForgeError,
)
from poreforge.patchgen import DatasetManifest
from poreforge.synthscene import SceneSpec, frontal_view, generate_scene, write_scene


ROUND1, ROUND2, ROUND3 = selection_rounds()


def winner_record(index, dense, name="cand"):
    m = row(100.0, 3.5, 1.0, dense)
    return IterationRecord(
        index=index,
        version=f"V{index}",
        generator=name,
        dataset={"s": {"train": "x", "test": "y"}},
        candidate_metrics={name: m},
        candidate_fpr95={name: 0.1},
        selection={"winner": name, "rationale": ["sole member"], "roster": [name]},
    )


def bootstrap_record(index=1):
    return IterationRecord(
        index=index,
        version=f"V{index}",
        generator="psift",
        dataset={"s": {"train": "x", "test": "y"}},
    )


def state_of(*records):
    return DmceRunState(config_hash="0" * 16, records=list(records))


class TestCandidateAndSceneSpecs:
    def test_plugin_flag(self):
        assert CandidateSpec("x", ("python3", "p.py")).is_plugin
        assert not CandidateSpec("sift").is_plugin

    def test_candidate_needs_name(self):
        with pytest.raises(ValueError):
            CandidateSpec("")

    def test_scene_needs_exactly_one_source(self):
        spec = loop_scene_spec(1)
        with pytest.raises(ValueError):
            SceneEntry("s", spec=spec, path="/somewhere")
        with pytest.raises(ValueError):
            SceneEntry("s")
        with pytest.raises(ValueError):
            SceneEntry("", spec=spec)


class TestConfig:
    def test_round_trip(self):
        cfg = loop_config()
        clone = config_from_dict(config_to_dict(cfg))
        assert config_to_dict(clone) == config_to_dict(cfg)
        assert clone.scenes[0].spec == cfg.scenes[0].spec
        assert clone.candidates[0].command == cfg.candidates[0].command

    def test_json_file_round_trip(self, tmp_path):
        from poreforge.dmce import load_config, save_config

        cfg = loop_config()
        save_config(cfg, tmp_path / "config.json")
        assert config_to_dict(load_config(tmp_path / "config.json")) == config_to_dict(cfg)

    def test_run_id_stable_and_sensitive(self):
        a = run_id(loop_config())
        assert a == run_id(loop_config())
        assert a.startswith("run-") and len(a) == 4 + 16
        other = loop_config()
        other.seed += 1
        assert run_id(other) != a

    @pytest.mark.parametrize(
        "patch",
        [
            dict(n_iter=0),
            dict(band=0.0),
            dict(band=0.5),
            dict(saturation=0.0),
            dict(split_ratio=1.0),
            dict(tie_breakers=("sparse_points", "no_such_metric")),
            dict(candidates=[]),
        ],
    )
    def test_rejects_bad_values(self, patch):
        kwargs = dict(patch)
        base = loop_config()
        with pytest.raises(ValueError):
            DmceConfig(
                scenes=base.scenes,
                candidates=kwargs.pop("candidates", base.candidates),
                **kwargs,
            )

    def test_rejects_duplicate_names(self):
        base = loop_config()
        with pytest.raises(ValueError):
            DmceConfig(
                scenes=base.scenes,
                candidates=[CandidateSpec("x", ("a",)), CandidateSpec("x", ("b",))],
            )
        with pytest.raises(ValueError):
            DmceConfig(
                scenes=[base.scenes[0], base.scenes[0]], candidates=base.candidates
            )

    def test_bootstrap_descriptor_is_not_a_candidate(self):
        base = loop_config()
        with pytest.raises(ValueError):
            DmceConfig(
                scenes=base.scenes,
                candidates=base.candidates + [CandidateSpec("psift")],
            )

    def test_needs_generation_and_eval_scenes(self):
        base = loop_config()
        only_eval = [s for s in base.scenes if s.eval_only]
        with pytest.raises(ValueError):
            DmceConfig(scenes=only_eval, candidates=base.candidates)
        only_gen = [s for s in base.scenes if not s.eval_only]
        with pytest.raises(ValueError):
            DmceConfig(scenes=only_gen, candidates=base.candidates, n_iter=2)
        # a single bootstrap round needs no holdout
        DmceConfig(scenes=only_gen, candidates=base.candidates, n_iter=1)


class TestSelectBest:
    def test_wide_roster_defers_to_sparse_inside_band(self):
        winner, trace = select_best(ROUND1)
        assert winner == "afsrnet"
        # three of seven clear the 95% floor, sparse count settles it
        assert any("afsrnet, hynet, sdgmnet" in line for line in trace)
        assert any(line.startswith("sparse_points") for line in trace)

    def test_round2_all_in_band(self):
        winner, trace = select_best(ROUND2)
        assert winner == "afsrnet"
        floor = 0.95 * 85140.4
        assert floor < min(m.dense_points for m in ROUND2.values())

    def test_round3_band_excludes_trailer(self):
        winner, trace = select_best(ROUND3)
        assert winner == "afsrnet"
        floor = 0.95 * 88631.1
        assert ROUND3["hynet"].dense_points < floor <= ROUND3["sdgmnet"].dense_points
        assert not any("hynet" in line for line in trace[1:])

    def test_sole_member(self):
        winner, trace = select_best({"only": row(1.0, 1.0, 1.0, 1.0)})
        assert winner == "only"
        assert trace == ["sole member"]

    def test_empty_roster(self):
        with pytest.raises(EmptyRosterError):
            select_best({})

    def test_scale_invariant(self):
        for scale in (0.25, 3.0, 1e4):
            scaled = {
                n: row(m.sparse_points, m.mean_track_length, m.mean_reproj_error,
                       m.dense_points * scale)
                for n, m in ROUND1.items()
            }
            assert select_best(scaled)[0] == "afsrnet"

    def test_permutation_invariant(self):
        names = list(ROUND2)
        for i in range(len(names)):
            rotated = names[i:] + names[:i]
            assert select_best({n: ROUND2[n] for n in rotated})[0] == "afsrnet"

    def test_name_breaks_exact_ties(self):
        tied = {"beta": row(10.0, 2.0, 1.0, 100.0), "alpha": row(10.0, 2.0, 1.0, 100.0)}
        winner, trace = select_best(tied)
        assert winner == "alpha"
        assert trace[-1] == "name order settles alpha"

    def test_tie_breaker_order_matters(self):
        # equal dense and sparse; a wins on reprojection, b on track length
        rows = {
            "a": row(50.0, 3.0, 0.5, 1000.0),
            "b": row(50.0, 4.0, 0.9, 1000.0),
        }
        assert select_best(rows)[0] == "a"
        flipped = SelectionPolicy(
            tie_breakers=("sparse_points", "mean_track_length", "mean_reproj_error")
        )
        assert select_best(rows, flipped)[0] == "b"

    def test_policy_rejects_unknown_breaker(self):
        with pytest.raises(ValueError):
            SelectionPolicy(tie_breakers=("dense_points_squared",))


class TestSaturation:
    def test_small_decline_saturates(self):
        state = state_of(
            bootstrap_record(), winner_record(2, 88631.1), winner_record(3, 88438.0)
        )
        assert check_saturation(state) == "saturated"

    def test_real_gains_continue(self):
        state = state_of(winner_record(2, 100.0), winner_record(3, 110.0))
        assert check_saturation(state) == "continue"
        state.records.append(winner_record(4, 118.8))
        assert check_saturation(state) == "continue"

    def test_exact_threshold_continues(self):
        state = state_of(winner_record(2, 100.0), winner_record(3, 102.0))
        assert check_saturation(state, threshold=0.02) == "continue"
        state = state_of(winner_record(2, 100.0), winner_record(3, 101.9))
        assert check_saturation(state, threshold=0.02) == "saturated"

    def test_bootstrap_round_never_counts(self):
        state = state_of(bootstrap_record(), winner_record(2, 1.0))
        assert check_saturation(state) == "continue"
        assert check_saturation(state_of(bootstrap_record())) == "continue"

    def test_zero_baseline(self):
        state = state_of(winner_record(2, 0.0), winner_record(3, 50.0))
        assert check_saturation(state) == "continue"
        state = state_of(winner_record(2, 0.0), winner_record(3, 0.0))
        assert check_saturation(state) == "saturated"


class TestRunState:
    def test_json_round_trip(self):
        state = state_of(
            bootstrap_record(), winner_record(2, 12345.5, name="quality-good")
        )
        state.records[1].failed_candidates["dud"] = "train: refused"
        clone = DmceRunState.from_json(state.to_json())
        assert clone.to_json() == state.to_json()
        assert clone.lineage == ["V1", "V2"]
        assert clone.records[1].candidate_metrics["quality-good"].dense_points == 12345.5

    def test_lineage_mismatch_rejected(self):
        raw = json.loads(state_of(bootstrap_record()).to_json())
        raw["lineage"] = ["V7"]
        with pytest.raises(ForgeError):
            DmceRunState.from_json(json.dumps(raw))

    def test_save_is_atomic_and_clean(self, tmp_path):
        state = state_of(bootstrap_record())
        save_state(state, tmp_path)
        assert (tmp_path / "state.json").is_file()
        assert not (tmp_path / "state.json.tmp").exists()
        assert load_state(tmp_path).lineage == ["V1"]

    def test_winner_must_sit_in_roster(self):
        with pytest.raises(ValueError):
            IterationRecord(
                index=2,
                version="V2",
                generator="x",
                dataset={},
                selection={"winner": "x", "rationale": [], "roster": ["y"]},
            )

    def test_winner_dense(self):
        assert bootstrap_record().winner_dense() is None
        assert winner_record(2, 77.0).winner_dense() == 77.0


@pytest.fixture(scope="module")
def scene_dir(tmp_path_factory):
    spec = SceneSpec(seed=5, image_size=64, extent_mm=15.0, pore_density=2.0)
    oracle, images = generate_scene(spec)
    out = tmp_path_factory.mktemp("scene")
    write_scene(spec, oracle, images, out)
    return spec, images, out


class TestSceneLoading:
    def test_directory_round_trip(self, scene_dir):
        spec, images, out = scene_dir
        loaded, cams, fr = load_scene(SceneEntry("disk", path=str(out)))
        assert len(loaded) == len(cams) == 16
        assert fr == frontal_view(spec)
        assert (loaded[3].pixels == images[3].pixels).all()

    def test_missing_spec_falls_back_to_middle(self, scene_dir, tmp_path):
        _, _, out = scene_dir
        clone = tmp_path / "noscene"
        shutil.copytree(out, clone)
        (clone / "scene.json").unlink()
        _, _, fr = load_scene(SceneEntry("disk", path=str(clone)))
        assert fr == 8

    def test_view_count_mismatch(self, scene_dir, tmp_path):
        _, _, out = scene_dir
        clone = tmp_path / "short"
        shutil.copytree(out, clone)
        (clone / "view15.pgm").unlink()
        with pytest.raises(ForgeError):
            load_scene(SceneEntry("disk", path=str(clone)))


class TestBootstrapFailurePaths:
    def test_all_scenes_failing_aborts(self, tmp_path):
        cfg = DmceConfig(
            scenes=[
                SceneEntry(
                    "blank",
                    spec=loop_scene_spec(30, pore_density=0.0, image_size=128),
                )
            ],
            candidates=[CandidateSpec("quality-good", quality_plugin_cmd("good"))],
            n_iter=1,
            max_keypoints=400,
        )
        with pytest.raises(ForgeError):
            bootstrap(cfg, tmp_path)


class TestLoopRun:
    """Assertions against the shared session run of the full loop."""

    def test_two_full_iterations_complete(self, dmce_mock_run):
        state = dmce_mock_run.state
        assert state.lineage == ["V1", "V2", "V3"]
        assert state.records[1].selection is not None
        assert state.records[2].selection is not None
        assert state.status == "saturated"

    def test_bootstrap_round(self, dmce_mock_run):
        first = dmce_mock_run.state.records[0]
        assert first.generator == "psift"
        assert first.selection is None
        assert set(first.dataset) == {"gen-a"}
        assert "blank" in first.failed_scenes

    def test_planted_better_plugin_wins(self, dmce_mock_run):
        for rec in dmce_mock_run.state.records[1:]:
            assert rec.selection["winner"] == "quality-good"
            assert rec.generator == "quality-good"
            good = rec.candidate_metrics["quality-good"].dense_points
            bad = rec.candidate_metrics["quality-bad"].dense_points
            assert bad < 0.95 * good  # decisive, not a tie-break

    def test_verification_tracks_planted_quality(self, dmce_mock_run):
        for rec in dmce_mock_run.state.records[1:]:
            assert (
                rec.candidate_fpr95["quality-good"]
                < rec.candidate_fpr95["quality-bad"]
            )

    def test_blank_scene_fails_every_round(self, dmce_mock_run):
        for rec in dmce_mock_run.state.records:
            assert "blank" in rec.failed_scenes
            assert "blank" not in rec.dataset

    def test_containers_carry_version_and_generator(self, dmce_mock_run):
        run_dir = dmce_mock_run.run_dir
        for rec, descriptor in [
            (dmce_mock_run.state.records[0], "psift"),
            (dmce_mock_run.state.records[1], "quality-good"),
        ]:
            man_path = run_dir / rec.dataset["gen-a"]["train"] / "manifest.json"
            man = DatasetManifest.from_json(man_path.read_text())
            assert man.version == rec.version
            assert man.descriptor == descriptor
            assert man.scene_id == "gen-a"

    def test_artifact_hashes_verify(self, dmce_mock_run):
        rec = dmce_mock_run.state.records[2]
        assert any(k.endswith("manifest.json") for k in rec.artifacts)
        assert any(k.endswith(".pgm") for k in rec.artifacts)
        for rel, digest in list(rec.artifacts.items())[:5]:
            data = (dmce_mock_run.run_dir / rel).read_bytes()
            assert hashlib.sha256(data).hexdigest() == digest

    def test_models_stashed_per_candidate(self, dmce_mock_run):
        rec = dmce_mock_run.state.records[1]
        good = dmce_mock_run.run_dir / "iter2" / "models" / "quality-good.bin"
        bad = dmce_mock_run.run_dir / "iter2" / "models" / "quality-bad.bin"
        assert good.is_file() and bad.is_file()
        assert good.read_bytes() != bad.read_bytes()
        assert rec.artifacts["iter2/models/quality-good.bin"] == hashlib.sha256(
            good.read_bytes()
        ).hexdigest()

    def test_dataset_index_resolves(self, dmce_mock_run):
        base = dmce_mock_run.run_dir / "iter2" / "dataset"
        idx = json.loads((base / "index.json").read_text())
        assert idx["version"] == "V2"
        assert idx["generator"] == "quality-good"
        for refs in idx["scenes"].values():
            for rel in refs.values():
                assert (base / rel / "manifest.json").is_file()
        for rel in idx["models"].values():
            assert (base / rel).is_file()

    def test_iteration_reports_written(self, dmce_mock_run):
        it_dir = dmce_mock_run.run_dir / "iter3"
        metrics = json.loads((it_dir / "metrics.json").read_text())
        assert set(metrics["candidates"]) == {"quality-good", "quality-bad"}
        selection = json.loads((it_dir / "selection.json").read_text())
        assert selection["winner"] == "quality-good"

    def test_resume_reproduces_identical_state(self, dmce_mock_run):
        assert dmce_mock_run.resumed_bytes == dmce_mock_run.final_bytes
        assert dmce_mock_run.resumed.lineage == dmce_mock_run.state.lineage

    def test_partial_iteration_swept_on_resume(self, dmce_mock_run):
        assert not dmce_mock_run.junk_path.exists()

    def test_resume_of_finished_run_is_a_noop(self, dmce_mock_run):
        before = (dmce_mock_run.run_dir / "state.json").read_bytes()
        state = resume_dmce(dmce_mock_run.run_dir)
        assert state.status == "saturated"
        assert (dmce_mock_run.run_dir / "state.json").read_bytes() == before

    def test_rerun_into_existing_state_refused(self, dmce_mock_run):
        with pytest.raises(ForgeError):
            run_dmce(dmce_mock_run.cfg, dmce_mock_run.root)

    def test_sidecar_log_exists_and_state_is_timestamp_free(self, dmce_mock_run):
        assert (dmce_mock_run.run_dir / "run.log").stat().st_size > 0
        raw = json.loads(dmce_mock_run.final_bytes)
        assert set(raw) == {"config_hash", "lineage", "records", "status"}

    def test_audit_finds_no_eval_contamination(self, dmce_mock_run):
        assert audit_eval_isolation(dmce_mock_run.run_dir, dmce_mock_run.cfg) == []
        # and no container directory exists for the holdout scene at all
        hits = list(dmce_mock_run.run_dir.glob("iter*/dataset/holdout"))
        assert hits == []

    def test_audit_catches_planted_violation(self, dmce_mock_run, tmp_path):
        plant = tmp_path / "tainted"
        src = dmce_mock_run.run_dir / "iter1"
        shutil.copytree(src, plant / "iter1")
        man_path = plant / "iter1" / "dataset" / "gen-a" / "test" / "manifest.json"
        man_path.write_text(
            man_path.read_text().replace('"scene_id": "gen-a"', '"scene_id": "holdout"')
        )
        violations = audit_eval_isolation(plant, dmce_mock_run.cfg)
        assert len(violations) == 1
        assert "holdout" in violations[0]


class TestFaultIsolation:
    def test_all_candidates_failing_aborts(self, dmce_mock_run):
        cfg = loop_config()
        cfg.candidates = [
            CandidateSpec("dead-on-start", crash_plugin_cmd("exit")),
            CandidateSpec("train-refuser", crash_plugin_cmd("train-fail")),
        ]
        state = state_of(dmce_mock_run.state.records[0])
        with pytest.raises(AllCandidatesFailedError) as err:
            run_iteration(state, cfg, 2, dmce_mock_run.run_dir)
        assert "dead-on-start" in str(err.value)
        assert "train-refuser" in str(err.value)

    def test_roster_shrinks_and_iteration_completes(self, dmce_mock_run, tmp_path):
        run_dir = tmp_path / "replay"
        shutil.copytree(dmce_mock_run.run_dir, run_dir)
        cfg = loop_config()
        cfg.candidates = [
            CandidateSpec("quality-good", quality_plugin_cmd("good")),
            CandidateSpec("train-refuser", crash_plugin_cmd("train-fail")),
        ]
        state = state_of(dmce_mock_run.state.records[0])
        rec = run_iteration(state, cfg, 2, run_dir)
        assert rec.selection["winner"] == "quality-good"
        assert rec.selection["roster"] == ["quality-good"]
        assert rec.failed_candidates["train-refuser"].startswith("train:")
        assert "gen-a" in rec.dataset
