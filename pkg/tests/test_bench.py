import csv
import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from zeroreg.bench import (
    CRITERIA_PRESETS,
    BenchmarkSummary,
    GroundTruthPose,
    PairRecord,
    SuccessCriteria,
    SynthParams,
    criteria_for,
    evaluate_pair,
    make_pairs_by_distance,
    rotation_error,
    synth_scene,
    translation_error,
)
from zeroreg.bootstrap import BootstrapConfig, compute_voxel_size
from zeroreg.errors import ParameterError
from zeroreg.so3 import random_rotation


def rz(deg):
    return Rotation.from_euler("z", deg, degrees=True).as_matrix()


def test_metric_examples(rng):
    R = random_rotation(rng)
    assert rotation_error(R, R) == pytest.approx(0.0, abs=1e-6)
    assert abs(rotation_error(R @ rz(30), R) - 30.0) < 1e-9
    assert translation_error([0.03, 0.04, 0], [0, 0, 0]) == pytest.approx(5.0, abs=1e-12)
    assert translation_error([1, 2, 3], [1, 2, 3]) == 0.0


@given(st.integers(0, 2**32 - 1))
def test_metric_symmetry(seed):
    rng = np.random.default_rng(seed)
    A, B = random_rotation(rng), random_rotation(rng)
    assert abs(rotation_error(A, B) - rotation_error(B, A)) < 1e-9
    a, b, s = rng.normal(size=(3, 3))
    assert abs(translation_error(a + s, b + s) - translation_error(a, b)) < 1e-9


def test_evaluate_pair_presets():
    gt = GroundTruthPose(np.eye(3), np.zeros(3))
    R3 = rz(3.0)
    t1 = np.array([1.0, 0, 0])
    assert evaluate_pair(R3, t1, gt, CRITERIA_PRESETS["kitti"]).success
    assert not evaluate_pair(R3, t1, gt, CRITERIA_PRESETS["eth"]).success
    edge = evaluate_pair(rz(5.0), [2.0, 0, 0], gt, SuccessCriteria(2.0, 5.0 + 1e-9))
    assert edge.success
    at = evaluate_pair(np.eye(3), [0.3, 0, 0], gt, SuccessCriteria(0.3, 1.0))
    assert at.success and at.rte_cm == pytest.approx(30.0)


def test_criteria_parsing():
    assert criteria_for("KITTI") == SuccessCriteria(2.0, 5.0)
    assert criteria_for("ScanNet++-i") == SuccessCriteria(0.3, 15.0)
    assert criteria_for("0.5,3") == SuccessCriteria(0.5, 3.0)
    with pytest.raises(ParameterError):
        criteria_for("a,b")
    with pytest.raises(ParameterError):
        SuccessCriteria(0.0, 1.0)
    with pytest.raises(ParameterError):
        GroundTruthPose(np.diag([1.0, 1, -1]), np.zeros(3))


def test_pairs_by_distance():
    line = np.column_stack([np.arange(35.0), np.zeros(35), np.zeros(35)])
    assert make_pairs_by_distance(line, 10) == [(0, 10), (10, 20), (20, 30)]
    assert make_pairs_by_distance(np.zeros((20, 3)), 10) == []
    with pytest.raises(ParameterError):
        make_pairs_by_distance(np.zeros((1, 3)))


@given(st.integers(0, 2**32 - 1), st.floats(1, 20))
def test_pairs_by_distance_random_walk(seed, tau):
    pos = np.cumsum(np.random.default_rng(seed).normal(size=(200, 3)), axis=0)
    pairs = make_pairs_by_distance(pos, tau)
    for (i, j), nxt in zip(pairs, pairs[1:] + [None]):
        assert j > i and np.linalg.norm(pos[j] - pos[i]) >= tau
        assert all(np.linalg.norm(pos[k] - pos[i]) < tau for k in range(i + 1, j))
        if nxt is not None:
            assert nxt[0] == j


def test_summary_and_outputs(tmp_path):
    recs = [PairRecord(10.0, 1.0, True, "a"), PairRecord(30.0, 3.0, True, "b"), PairRecord(500.0, 40.0, False, "c", "scale_empty")]
    s = BenchmarkSummary.from_records(recs)
    assert s.n_pairs == 3 and s.n_success == 2
    assert s.success_rate == pytest.approx(100 * 2 / 3)
    assert s.mean_rte_cm == 20.0 and s.mean_rre_deg == 2.0
    s.write_csv(tmp_path / "r.csv")
    s.write_json(tmp_path / "r.json")
    rows = list(csv.DictReader(open(tmp_path / "r.csv")))
    assert [r["name"] for r in rows] == ["a", "b", "c"] and rows[2]["status"] == "scale_empty"
    doc = json.loads((tmp_path / "r.json").read_text())
    assert doc["success_rate"] == s.success_rate and len(doc["records"]) == 3
    empty = BenchmarkSummary.from_records([])
    assert empty.success_rate == 0.0 and np.isnan(empty.mean_rte_cm)


def test_synth_branches():
    cfg = BootstrapConfig()
    for seed in range(3):
        p, q, _ = synth_scene("indoor_room", rng_seed=seed)
        assert compute_voxel_size(p if len(p) >= len(q) else q, cfg)[3] == "spheric"
        p, q, _ = synth_scene("lidar_sweep", rng_seed=seed)
        assert compute_voxel_size(p if len(p) >= len(q) else q, cfg)[3] == "disc"


def test_synth_identity_settings():
    params = SynthParams(overlap=1.0, noise_factor=0.0, max_rotation_deg=0.0, max_translation=0.0)
    for kind in ("indoor_room", "lidar_sweep"):
        p, q, gt = synth_scene(kind, params, rng_seed=1)
        assert np.array_equal(p.points, q.points)
        assert np.array_equal(gt.rotation, np.eye(3)) and np.array_equal(gt.translation, np.zeros(3))


def test_synth_reproducible_and_consistent():
    params = SynthParams(noise_factor=0.0)
    p1, q1, g1 = synth_scene("indoor_room", params, rng_seed=5)
    p2, q2, g2 = synth_scene("indoor_room", params, rng_seed=5)
    assert np.array_equal(p1.points, p2.points) and np.array_equal(g1.translation, g2.translation)
    # noise-free: the overlap region of the target maps back onto source points exactly
    back = (q1.points - g1.translation) @ g1.rotation
    src = {tuple(np.round(x, 9)) for x in p1.points}
    shared = sum(tuple(np.round(x, 9)) in src for x in back)
    assert shared > 0.4 * len(back)


def test_synth_params_validation():
    for bad in ({"overlap": 0.0}, {"noise_factor": -1}, {"density": 0.0}, {"max_rotation_deg": 200}):
        with pytest.raises(ParameterError):
            SynthParams(**bad)
    with pytest.raises(ParameterError):
        synth_scene("forest")
