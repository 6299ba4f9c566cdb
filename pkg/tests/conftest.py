"""Shared synthetic rig helpers and the mock descriptor-loop run."""

import shutil
import sys
from pathlib import Path
from types import SimpleNamespace

import numpy as np
import pytest

from poreforge.geometry import CameraParameters

PLUGIN_DIR = Path(__file__).parent / "plugins"


def metric_row(sparse, track, reproj, dense, inliers=50000.0):
    from poreforge.reconstruct import ReconMetrics

    return ReconMetrics(16, sparse, track, reproj, dense, inliers)


def _rounds():
    # Scene-averaged evaluation rows for a three-round selection
    # scenario.  Round one fields a wide roster where the mechanical
    # rule and a judgment call part ways; rounds two and three have the
    # dense-count band do real work.
    round1 = {
        "hardnet": metric_row(2047.4, 3.714, 0.807, 71663.1, 43286.3),
        "sosnet": metric_row(1926.8, 3.712, 0.824, 72748.1, 36492.6),
        "ralnet": metric_row(2050.7, 3.757, 0.792, 72209.7, 39779.3),
        "hynet": metric_row(2655.2, 3.858, 0.858, 81915.3, 47895.3),
        "cdf-stc": metric_row(1928.6, 3.688, 0.830, 70216.2, 41019.2),
        "sdgmnet": metric_row(2622.3, 3.871, 0.875, 81766.8, 49253.7),
        "afsrnet": metric_row(2681.3, 3.698, 0.898, 80255.7, 54958.3),
    }
    round2 = {
        "afsrnet": metric_row(2938.7, 3.766, 0.926, 83469.8, 51211.0),
        "hynet": metric_row(2683.3, 3.850, 0.879, 81282.6, 45211.0),
        "sdgmnet": metric_row(2782.7, 3.847, 0.916, 85140.4, 47897.8),
    }
    round3 = {
        "afsrnet": metric_row(3234.2, 3.809, 0.939, 88631.1, 55140.0),
        "hynet": metric_row(2762.8, 3.866, 0.884, 84034.2, 50081.6),
        "sdgmnet": metric_row(2739.3, 3.833, 0.903, 84475.4, 47341.7),
    }
    return round1, round2, round3


def selection_rounds():
    """Fresh copies so tests can mutate without cross-talk."""
    return _rounds()


class RawPixelHandle:
    """Flattened-intensity L2 baseline, used only as a benchmark floor."""

    def __init__(self):
        from poreforge.descriptors import DescriptorSpec

        self.spec = DescriptorSpec("rawpx", 4096, 64, "plugin")

    def describe_batch(self, patches):
        from poreforge.descriptors import DescribeResult

        vectors = np.stack(
            [p.astype(np.float32).ravel() / 255.0 for p in patches]
        )
        return DescribeResult(vectors, ~vectors.any(axis=1))

    def close(self):
        pass


def quality_plugin_cmd(mode):
    return (sys.executable, str(PLUGIN_DIR / "quality_plugin.py"), "--mode", mode)


def crash_plugin_cmd(mode):
    return (sys.executable, str(PLUGIN_DIR / "crash_plugin.py"), mode)


def loop_scene_spec(seed, **kw):
    """Small fast-to-forge scene used by the descriptor-loop tests."""
    from poreforge.synthscene import SceneSpec

    base = dict(
        seed=seed,
        image_size=192,
        extent_mm=15.0,
        bump_sigma_mm=4.5,
        amplitude_mm=0.75,
        pore_radius_mm=0.15,
        pore_density=2.5,
    )
    base.update(kw)
    return SceneSpec(**base)


def loop_config():
    """Two quality-controlled plugins, one generation scene, one scene
    that cannot be forged, one held-out eval scene."""
    from poreforge.dmce import CandidateSpec, DmceConfig, SceneEntry

    return DmceConfig(
        scenes=[
            SceneEntry("gen-a", spec=loop_scene_spec(21)),
            SceneEntry("blank", spec=loop_scene_spec(24, pore_density=0.0)),
            SceneEntry("holdout", spec=loop_scene_spec(23), eval_only=True),
        ],
        candidates=[
            CandidateSpec("quality-good", quality_plugin_cmd("good")),
            CandidateSpec("quality-bad", quality_plugin_cmd("bad")),
        ],
        n_iter=3,
        seed=11,
        max_keypoints=500,
        anchor_px=3.0,
    )


@pytest.fixture(scope="session")
def dmce_mock_run(tmp_path_factory):
    """One full mock-plugin loop run plus a kill-and-resume replay.

    Minutes of work, so session-scoped; the loop tests and the
    acceptance suite all read from this single run.
    """
    from poreforge.dmce import (
        DmceRunState,
        load_state,
        resume_dmce,
        run_dmce,
        save_state,
    )

    root = tmp_path_factory.mktemp("dmce-runs")
    cfg = loop_config()
    state, run_dir = run_dmce(cfg, root)
    final_bytes = (run_dir / "state.json").read_bytes()

    # simulate a kill between iterations: keep two records, leave a
    # half-written third iteration on disk
    survivor = load_state(run_dir)
    save_state(
        DmceRunState(
            config_hash=survivor.config_hash,
            records=survivor.records[:2],
            status="running",
        ),
        run_dir,
    )
    shutil.rmtree(run_dir / "iter3")
    junk = run_dir / "iter3" / "dataset" / "junk.txt"
    junk.parent.mkdir(parents=True)
    junk.write_text("half-written")

    resumed = resume_dmce(run_dir)
    resumed_bytes = (run_dir / "state.json").read_bytes()
    return SimpleNamespace(
        cfg=cfg,
        root=root,
        run_dir=run_dir,
        state=state,
        final_bytes=final_bytes,
        resumed=resumed,
        resumed_bytes=resumed_bytes,
        junk_path=junk,
    )


def look_at_camera(
    view_id,
    eye,
    target=(0.0, 0.0, 0.0),
    up_hint=(0.0, 1.0, 0.0),
    fx=1200.0,
    fy=1200.0,
    width=1024,
    height=1024,
):
    """Camera at eye looking at target, x right / y down / z forward."""
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    forward = target - eye
    forward = forward / np.linalg.norm(forward)
    up = np.asarray(up_hint, dtype=np.float64)
    if abs(forward @ up) > 0.999:
        up = np.array([0.0, 0.0, 1.0])
    right = np.cross(forward, up)
    right = right / np.linalg.norm(right)
    down = np.cross(forward, right)
    r = np.stack([right, down, forward])
    t = -r @ eye
    return CameraParameters(
        view_id=view_id,
        fx=fx,
        fy=fy,
        cx=width / 2.0,
        cy=height / 2.0,
        rotation=r,
        translation=t,
        width=width,
        height=height,
    )


def arc_rig(n_views=4, radius=300.0, span_deg=40.0, height=260.0, **kw):
    """Cameras on a horizontal arc, all aimed at the origin."""
    yaws = np.deg2rad(np.linspace(-span_deg / 2.0, span_deg / 2.0, n_views))
    cams = []
    r_xy = np.sqrt(max(radius**2 - height**2, 1.0))
    for i, yaw in enumerate(yaws):
        eye = (r_xy * np.sin(yaw), -r_xy * np.cos(yaw), height)
        cams.append(look_at_camera(i, eye, **kw))
    return cams


@pytest.fixture
def two_cam_rig():
    return arc_rig(n_views=2, span_deg=24.0)


@pytest.fixture
def four_cam_rig():
    return arc_rig(n_views=4, span_deg=40.0)
