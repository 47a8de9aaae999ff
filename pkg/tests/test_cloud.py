import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from zeroreg.cloud import (
    PointCloud,
    SpatialIndex,
    farthest_point_sampling,
    pca,
    radius_neighbors,
    voxel_downsample,
)
from zeroreg.errors import DegenerateGeometryError, EmptyInputError, OutOfRangeError, ParameterError

coords = arrays(np.float64, st.tuples(st.integers(1, 60), st.just(3)), elements=st.floats(-50, 50, allow_nan=False))


def brute_voxels(pts, v):
    cells = {}
    for p in pts:
        key = tuple(np.floor(p / v).astype(np.int64))
        cells.setdefault(key, []).append(p)
    return {k: np.mean(vs, axis=0) for k, vs in cells.items()}


# ---- PointCloud ----------------------------------------------------------------

def test_pointcloud_rejects_bad_input():
    with pytest.raises(ParameterError):
        PointCloud(np.zeros((3, 2)))
    with pytest.raises(ParameterError):
        PointCloud(np.array([[0.0, np.nan, 1.0]]))
    with pytest.raises(ParameterError):
        PointCloud(np.zeros((3, 3)), intensity=np.zeros(2))
    assert len(PointCloud(np.zeros((0, 3)))) == 0


def test_transformed_and_subset():
    c = PointCloud(np.eye(3), intensity=[1.0, 2.0, 3.0])
    R = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    moved = c.transformed(R, [1.0, 0.0, 0.0])
    assert np.allclose(moved.points[0], [1.0, 1.0, 0.0])
    sub = c.subset([2, 0])
    assert np.allclose(sub.intensity, [3.0, 1.0])


# ---- voxel_downsample ----------------------------------------------------------

def test_voxel_cube_corners_collapse_to_center():
    corners = np.array(list(itertools.product([0.1, 1.0], repeat=3)))
    out = voxel_downsample(PointCloud(corners), 2.0)
    assert len(out) == 1
    assert np.allclose(out.points[0], [0.55, 0.55, 0.55])


def test_voxel_fine_grid_keeps_points():
    pts = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 2.0, 0.5]])
    out = voxel_downsample(PointCloud(pts), 0.3)
    assert sorted(map(tuple, out.points)) == sorted(map(tuple, pts))


def test_voxel_matches_hash_grid_oracle(rng):
    pts = rng.random((10_000, 3))
    out = voxel_downsample(PointCloud(pts), 0.1)
    oracle = brute_voxels(pts, 0.1)
    assert len(out) == len(oracle)
    got = {tuple(np.floor(p / 0.1).astype(np.int64)): p for p in out.points}
    for k, c in oracle.items():
        assert np.allclose(got[k], c, atol=1e-12)


def test_voxel_errors_and_intensity():
    with pytest.raises(ParameterError):
        voxel_downsample(PointCloud(np.zeros((2, 3))), 0.0)
    with pytest.raises(EmptyInputError):
        voxel_downsample(PointCloud(np.zeros((0, 3))), 1.0)
    with pytest.raises(OutOfRangeError):
        voxel_downsample(PointCloud(np.array([[1e9, 0.0, 0.0]])), 1e-3)
    out = voxel_downsample(PointCloud(np.array([[0.1, 0, 0], [0.2, 0, 0]]), [1.0, 3.0]), 1.0)
    assert np.allclose(out.intensity, [2.0])


@given(coords, st.floats(0.05, 20.0))
def test_voxel_centroids_inside_cells(pts, v):
    out = voxel_downsample(PointCloud(pts), v)
    assert len(out) <= len(pts)
    assert len(out) == len(brute_voxels(pts, v))
    keys = np.floor(out.points / v)
    # centroid of points from one half-open cell stays in it (allow rounding at the upper face)
    assert np.all(out.points >= keys * v - 1e-9)
    assert np.all(out.points <= (keys + 1) * v + 1e-9)


# ---- radius queries ------------------------------------------------------------

def test_radius_neighbors_examples():
    idx = SpatialIndex.build(PointCloud(np.array([[0.0, 0, 0], [1.0, 0, 0], [3.0, 0, 0]])))
    assert list(radius_neighbors(idx, [0, 0, 0], 1.5)) == [0, 1]
    assert list(radius_neighbors(idx, [1.0, 0, 0], 0.0)) == [1]


def test_radius_neighbors_brute_force(rng):
    pts = rng.random((5000, 3))
    idx = SpatialIndex.build(pts)
    for _ in range(100):
        qpt = rng.random(3)
        r = rng.uniform(0.01, 0.3)
        brute = np.flatnonzero(np.linalg.norm(pts - qpt, axis=1) <= r)
        assert np.array_equal(radius_neighbors(idx, qpt, r), brute)


def test_knn_includes_self(rng):
    pts = rng.random((50, 3))
    d, i = SpatialIndex.build(pts).knn(pts[:5], 3)
    assert np.array_equal(i[:, 0], np.arange(5))
    assert np.allclose(d[:, 0], 0.0)


# ---- PCA -----------------------------------------------------------------------

def test_pca_planar_and_isotropic(rng):
    plane = np.column_stack([rng.random(10_000), rng.random(10_000), np.zeros(10_000)])
    assert pca(plane).sphericity < 0.01
    cube = rng.random((10_000, 3))
    assert 0.9 <= pca(cube).sphericity <= 1.0


def test_pca_degenerate():
    with pytest.raises(DegenerateGeometryError):
        pca(np.ones((5, 3)))
    with pytest.raises(EmptyInputError):
        pca(np.zeros((0, 3)))


@given(arrays(np.float64, st.tuples(st.integers(4, 80), st.just(3)), elements=st.floats(-10, 10, allow_nan=False)))
def test_pca_frame_invariants(pts):
    if np.ptp(pts, axis=0).max() < 1e-3:
        return
    f = pca(pts)
    lam = f.eigenvalues
    assert lam[0] >= lam[1] >= lam[2] >= 0
    V = f.eigenvectors
    assert np.allclose(V.T @ V, np.eye(3), atol=1e-6)
    assert np.linalg.det(V) > 0
    cov = np.cov(pts.T)
    recon = (V * lam) @ V.T
    scale = max(np.abs(cov).max(), 1e-12)
    assert np.abs(recon - cov).max() <= 1e-9 * scale + 1e-12


# ---- FPS -----------------------------------------------------------------------

def test_fps_line_endpoints():
    pts = np.column_stack([np.arange(11.0), np.zeros(11), np.zeros(11)])
    assert list(farthest_point_sampling(pts, 2, start=0)) == [0, 10]


def test_fps_exhaustion_is_permutation(rng):
    pts = rng.random((30, 3))
    sel = farthest_point_sampling(pts, 30, start=4)
    assert sel[0] == 4 and sorted(sel) == list(range(30))
    assert sorted(farthest_point_sampling(pts, 100)) == list(range(30))


def test_fps_greedy_oracle(rng):
    pts = rng.random((500, 3))
    sel = farthest_point_sampling(pts, 50, start=0)
    for k in range(1, 50):
        chosen = pts[sel[:k]]
        mind = np.min(np.linalg.norm(pts[:, None] - chosen[None], axis=2), axis=1)
        assert np.isclose(mind[sel[k]], mind.max(), rtol=0, atol=1e-12)
    assert len(set(sel)) == 50
