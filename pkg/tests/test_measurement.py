import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from uwbalign.geometry import AffineTransform7, random_rotation
from uwbalign.measurement import (
    AnchorMap,
    Dataset,
    NoiseSpec,
    circle,
    debias_squared_range,
    dumps,
    look_rotation,
    poses_from_positions,
    predict_range,
    random_walk,
    sphere_surface,
    synthesize_dataset,
)


def make_dataset(seed=0, n=30, sigma_r=0.1, sigma_o=0.001, mask=None):
    rng = np.random.default_rng(seed)
    A = AffineTransform7(rng.uniform(0.5, 2.0), random_rotation(rng), [2.0, 2.0, 1.0])
    P = random_walk(1.0, n, seed=seed, start=A.t)
    return synthesize_dataset(P, AnchorMap.standard_layout(), A, NoiseSpec(sigma_r, sigma_o, seed), mask), A


def test_anchor_map_validation():
    m = AnchorMap.standard_layout()
    assert len(m) == 4 and m.is_nonsingular()
    assert m.index(2) == 2
    with pytest.raises(ValueError):
        AnchorMap([[0, 0, 0], [1, 0, 0]], ids=[1, 1])
    assert not AnchorMap([[0, 0, 0], [1, 0, 0], [2, 0, 0]]).is_nonsingular()
    with pytest.raises(ValueError):
        m.positions[0, 0] = 3.0


def test_noise_spec_rejects_negative():
    with pytest.raises(ValueError):
        NoiseSpec(sigma_r=-1.0)


def test_predict_range_is_euclidean_distance():
    A = AffineTransform7(2.0, np.eye(3), [1.0, 0.0, 0.0])
    assert predict_range(A, [1.0, 0.0, 0.0], [0.0, 0.0, 0.0]) == pytest.approx(3.0)
    o = np.array([[0.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    np.testing.assert_allclose(predict_range(A, o, np.zeros((2, 3))), [1.0, np.sqrt(5.0)])


def test_debias_removes_noise_mean():
    rng = np.random.default_rng(0)
    d, sigma = 3.0, 0.2
    samples = d + sigma * rng.normal(size=400_000)
    assert abs(debias_squared_range(samples, sigma).mean() - d**2) < 5e-3


def test_noiseless_ranges_match_truth():
    ds, A = make_dataset(sigma_r=0.0, sigma_o=0.0)
    o, a, d = ds.measurements()
    np.testing.assert_allclose(d, predict_range(A, o, a), atol=1e-12)
    np.testing.assert_array_equal(ds.odom[0], 0.0)
    assert ds.d0 == pytest.approx(np.linalg.norm(A.t))


def test_noise_statistics():
    ds, A = make_dataset(n=4000, sigma_r=0.1, sigma_o=0.0)
    o, a, d = ds.measurements()
    r = d - predict_range(A, o, a)
    assert abs(r.mean()) < 0.01
    assert abs(r.std() - 0.1) < 0.005


def test_seed_determinism():
    d1, _ = make_dataset(seed=5)
    d2, _ = make_dataset(seed=5)
    d3, _ = make_dataset(seed=6)
    assert dumps(d1.to_json_dict()) == dumps(d2.to_json_dict())
    assert dumps(d1.to_json_dict()) != dumps(d3.to_json_dict())


def test_los_mask_honored():
    n = 20
    mask = np.ones((n, 4), dtype=bool)
    mask[5:10, 1] = False
    ds, _ = make_dataset(n=n, mask=mask)
    assert ds.n_valid == mask.sum()
    assert np.all(ds.ranges[5:10, 1] == 0)
    doc = ds.to_json_dict()
    assert all(r["n"] != 1 for r in doc["samples"][7]["ranges"])


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_json_round_trip_is_exact(seed):
    ds, _ = make_dataset(seed=seed, n=10)
    back = Dataset.from_json_dict(json.loads(dumps(ds.to_json_dict())))
    np.testing.assert_array_equal(back.odom, ds.odom)
    np.testing.assert_array_equal(back.ranges, ds.ranges)
    np.testing.assert_array_equal(back.valid, ds.valid)
    assert back.anchors == ds.anchors
    assert back.d0 == ds.d0
    np.testing.assert_array_equal(back.truth.R, ds.truth.R)
    assert dumps(back.to_json_dict()) == dumps(ds.to_json_dict())


def test_save_load(tmp_path):
    ds, _ = make_dataset(n=5)
    ds.save(tmp_path / "d.json")
    back = Dataset.load(tmp_path / "d.json")
    np.testing.assert_array_equal(back.ranges, ds.ranges)


@pytest.mark.parametrize(
    "doc",
    [
        {},
        {"anchors": [{"id": 0, "pos": [0, 0, 0]}]},
        {"anchors": [{"id": 0, "pos": [0, 0]}], "samples": []},
        {"anchors": [{"id": 0, "pos": [0, 0, 0]}], "samples": [{"k": 0, "o": [0, 0, 0], "ranges": [{"n": 9, "d": 1}]}]},
        {"anchors": [{"id": 0, "pos": [0, 0, 0]}], "samples": [{"k": 0, "o": [0, 0, 0], "ranges": [{"n": 0, "d": -1}]}]},
    ],
)
def test_malformed_documents(doc):
    with pytest.raises(ValueError):
        Dataset.from_json_dict(doc)


def test_subset_and_csv():
    ds, _ = make_dataset(n=10)
    sub = ds.subset(range(3))
    assert len(sub) == 3 and sub.truth is ds.truth
    lines = ds.to_csv().strip().split("\n")
    assert lines[0] == "k,ox,oy,oz,n,d"
    assert len(lines) == 1 + ds.n_valid
    assert float(lines[1].split(",")[-1]) == ds.ranges[0, 0]


def test_random_walk_stays_in_ball():
    for R_m in (0.5, 2.0):
        P = random_walk(R_m, 500, seed=1, start=[1, 1, 1])
        assert np.max(np.linalg.norm(P - [1, 1, 1], axis=1)) <= R_m + 1e-12
        steps = np.linalg.norm(np.diff(P, axis=0), axis=1)
        assert np.max(steps) <= R_m / 20 + 1e-12
    with pytest.raises(ValueError):
        random_walk(0.0)


def test_random_walk_respects_bounds():
    lo, hi = np.zeros(3), np.array([5.0, 5.0, 3.0])
    P = random_walk(4.0, 1000, seed=2, start=[0.3, 4.8, 0.2], bounds=(lo, hi))
    assert np.all(P >= lo) and np.all(P <= hi)
    assert np.all(np.linalg.norm(P - P[0], axis=1) <= 4.0 + 1e-12)
    assert np.ptp(P, axis=0).min() > 1.0
    # unbounded walks are unchanged by the bounds feature
    np.testing.assert_array_equal(random_walk(1.0, 50, seed=3), random_walk(1.0, 50, seed=3, bounds=None))
    with pytest.raises(ValueError):
        random_walk(1.0, bounds=([1, 1, 1], [2, 2, 2]))


def test_shape_generators():
    C = circle([1, 2, 3], 2.0, n=16)
    np.testing.assert_allclose(np.linalg.norm(C - [1, 2, 3], axis=1), 2.0)
    np.testing.assert_allclose(C[:, 2], 3.0)
    S = sphere_surface([0, 0, 1], 1.5, n=30)
    np.testing.assert_allclose(np.linalg.norm(S - [0, 0, 1], axis=1), 1.5)


def test_look_rotation_and_poses():
    R = look_rotation([1.0, 1.0, 0.0])
    np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-12)
    assert np.linalg.det(R) == pytest.approx(1.0)
    np.testing.assert_allclose(R[:, 2], np.array([1, 1, 0]) / np.sqrt(2))
    poses = poses_from_positions(circle([0, 0, 1], 1.0, n=8))
    assert len(poses) == 8


def test_rotations_mapped_into_odometry_frame():
    rng = np.random.default_rng(0)
    A = AffineTransform7(1.3, random_rotation(rng), [2, 2, 1])
    poses = poses_from_positions(circle([2, 2, 1], 0.5, n=10))
    ds = synthesize_dataset(poses, AnchorMap.standard_layout(), A, NoiseSpec(0.0, 0.0))
    for pose, Ro in zip(poses, ds.rotations):
        np.testing.assert_allclose(A.R @ Ro, pose.R, atol=1e-12)


def test_invalid_inputs():
    with pytest.raises(ValueError):
        synthesize_dataset(np.zeros((0, 3)), AnchorMap.standard_layout(), AffineTransform7())
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 3)), np.zeros((2, 4)), np.ones((2, 4)), AnchorMap.standard_layout(), times=[0])
