import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from zeroreg.cloud import PointCloud, SpatialIndex
from zeroreg.errors import ParameterError, ParseError, ScaleEmptyError, SparsePatchError
from zeroreg.patch import (
    DescriptorShape,
    ExternalBackend,
    HandcraftedBackend,
    describe,
    describe_points,
    embed_cloud,
    extract_patch,
    read_descriptor_records,
    write_descriptor_records,
)
from zeroreg.so3 import random_rotation

SHAPE = DescriptorShape()
W = SHAPE.W


def interior_points(rng, n, margin=1e-3):
    """Points in the unit ball whose azimuth keeps ``margin`` rad from every sector boundary
    and whose height and radius stay away from bin edges."""
    sector = 2 * np.pi / W
    k = rng.integers(0, W, n)
    az = -np.pi + (k + rng.uniform(margin / sector, 1 - margin / sector, n)) * sector
    hb = rng.integers(0, SHAPE.H, n)
    z = -1 + (hb + rng.uniform(0.05, 0.95, n)) * 2 / SHAPE.H
    rmax = np.sqrt(np.clip(1 - z * z, 0, 1))
    rho = rmax * rng.uniform(0.05, 0.95, n)
    return np.column_stack([rho * np.cos(az), rho * np.sin(az), z])


def rotate_z(pts, angle):
    c, s = np.cos(angle), np.sin(angle)
    return pts @ np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]]).T


def test_shape_defaults_and_validation():
    assert (SHAPE.H, SHAPE.W, SHAPE.D, SHAPE.radial_bins) == (7, 20, 32, 4)
    with pytest.raises(ParameterError):
        DescriptorShape(7, 20, 33)


def test_single_point_binning():
    cyl, vec = describe_points([np.array([[0.5, 0.0, 0.0]])])
    occupied = np.argwhere(cyl[0, :, :, 28] > 0)
    assert occupied.tolist() == [[3, 10]]
    assert np.count_nonzero(np.abs(cyl[0]).sum(axis=2)) == 1
    cell = cyl[0, 3, 10]
    assert cell[28] == 1.0
    assert int(np.argmax(cell[:28])) == 14  # row 3, radial bin floor(0.5 * 4) = 2
    assert np.isclose(np.linalg.norm(vec), 1.0)


def test_empty_patch_rejected():
    with pytest.raises(SparsePatchError):
        describe_points([np.zeros((0, 3))])


def test_describe_is_pure(rng):
    pts = interior_points(rng, 200)
    a = describe_points([pts])
    b = describe_points([pts.copy()])
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_batch_equals_single(rng):
    sets = [interior_points(rng, n) for n in (5, 40, 300)]
    cyl, vec = describe_points(sets)
    for i, s in enumerate(sets):
        c1, v1 = describe_points([s])
        assert np.array_equal(cyl[i], c1[0]) and np.array_equal(vec[i], v1[0])


@given(st.integers(0, 2**32 - 1), st.integers(1, W - 1))
def test_so2_equivariance(seed, k):
    rng = np.random.default_rng(seed)
    pts = interior_points(rng, 300)
    cyl, vec = describe_points([pts])
    cyl_r, vec_r = describe_points([rotate_z(pts, 2 * np.pi * k / W)])
    assert np.abs(cyl_r[0] - np.roll(cyl[0], k, axis=1)).max() < 1e-6
    assert np.abs(vec_r - vec).max() < 1e-6


@given(st.integers(0, 2**32 - 1))
def test_descriptor_invariants(seed):
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(rng.integers(5, 400), 3))
    pts /= np.maximum(1.0, np.linalg.norm(pts, axis=1))[:, None]
    cyl, vec = describe_points([pts])
    assert np.all(np.isfinite(cyl))
    assert np.all((cyl[..., 28] >= 0) & (cyl[..., 28] <= 1))
    assert np.isclose(cyl[..., 28].sum(), 1.0)
    assert np.isclose(cyl[..., :28].sum(), 1.0)
    assert abs(np.linalg.norm(vec) - 1.0) < 1e-6


# ---- patches -------------------------------------------------------------------

def test_sphere_neighbors_normalize_to_unit(rng):
    d = rng.normal(size=(300, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    pts = np.vstack([[0.0, 0, 0], 0.7 * d])
    c = PointCloud(pts)
    p = extract_patch(c, SpatialIndex.build(c), [0, 0, 0], 0.7)
    norms = np.linalg.norm(p.points, axis=1)
    assert np.allclose(norms[norms > 0], 1.0)
    assert np.all(np.abs(p.points) <= 1.0)


def test_planar_patch_normal(rng):
    pts = np.column_stack([rng.uniform(-1, 1, 10_000), rng.uniform(-1, 1, 10_000), np.zeros(10_000)])
    R = random_rotation(rng)
    c = PointCloud(pts @ R.T)
    p = extract_patch(c, SpatialIndex.build(c), [0, 0, 0], 0.5)
    normal = R[:, 2]
    angle = np.degrees(np.arccos(min(1.0, abs(p.frame.v3 @ normal))))
    assert angle < 1.0
    assert np.allclose(p.rotation @ p.frame.v3, [0, 0, 1.0])


def test_sparse_patch_and_subsample(rng):
    c = PointCloud(rng.random((2000, 3)))
    idx = SpatialIndex.build(c)
    with pytest.raises(SparsePatchError):
        extract_patch(c, idx, [10.0, 10, 10], 0.1)
    p = extract_patch(c, idx, c.points[0], 0.5, n_patch=64, rng_seed=3)
    assert p.points.shape[0] == 64
    q = extract_patch(c, idx, c.points[0], 0.5, n_patch=64, rng_seed=3)
    assert np.array_equal(p.points, q.points)


def test_patch_rigid_invariance(rng):
    pts = rng.normal(size=(3000, 3)) * [2.0, 1.0, 0.4]
    R = random_rotation(rng)
    t = rng.normal(size=3)
    a = PointCloud(pts)
    b = a.transformed(R, t)
    for key in rng.choice(3000, 10, replace=False):
        pa = extract_patch(a, SpatialIndex.build(a), a.points[key], 1.0)
        pb = extract_patch(b, SpatialIndex.build(b), b.points[key], 1.0)
        # canonical principal-axis coordinates of each normalized set
        ca = pa.points @ pa.rotation @ pa.frame.eigenvectors
        cb = pb.points @ pb.rotation @ pb.frame.eigenvectors
        assert np.abs(ca - cb).max() < 1e-6
        da = describe(pa)
        db = describe(pb)
        # same cloud up to a yaw about the patch axis: pooled vectors agree
        assert np.abs(da.vec - db.vec).max() < 0.05


# ---- embedding -----------------------------------------------------------------

def test_small_cloud_uses_every_point(rng):
    c = PointCloud(rng.random((300, 3)))
    out = embed_cloud(c, (0.5, 0.6, 0.7), n_fps=1500)
    assert [len(e) for e in out] == [300, 300, 300]
    assert [e.scale for e in out] == ["local", "middle", "global"]


def test_counts_match_recount(rng):
    c = PointCloud(rng.random((3000, 3)))
    r = 0.06
    out = embed_cloud(c, (r, r, r), n_fps=400, rng_seed=5)
    idx = SpatialIndex.build(c)
    for e in out:
        sparse = sum(1 for p in e.patches if p.points.shape[0] < 5)
        assert sparse == 0
        assert len(e) + e.n_dropped == 400
        # recount survivors directly from the keypoint list
        recount = sum(1 for k in e.keypoints if len(idx.radius(k, r)) >= 5)
        assert recount == len(e)
    # independent per-scale sampling
    assert not np.array_equal(out[0].point_indices, out[1].point_indices)


def test_all_scales_empty_raises():
    c = PointCloud(np.array([[0.0, 0, 0], [10.0, 0, 0], [0, 10.0, 0]]))
    with pytest.raises(ScaleEmptyError):
        embed_cloud(c, (0.1, 0.1, 0.1))


def test_embed_deterministic(rng):
    c = PointCloud(rng.random((1500, 3)))
    a = embed_cloud(c, (0.1, 0.2, 0.3), n_fps=200, rng_seed=9)
    b = embed_cloud(c, (0.1, 0.2, 0.3), n_fps=200, rng_seed=9)
    for x, y in zip(a, b):
        assert np.array_equal(x.cyl, y.cyl) and np.array_equal(x.keypoints, y.keypoints)


# ---- external backend ----------------------------------------------------------

def test_external_backend_roundtrip(tmp_path, rng):
    c = PointCloud(rng.random((400, 3)))
    hand = embed_cloud(c, (0.2, 0.25, 0.3), n_fps=50, rng_seed=1, cloud_id="a")
    recs = []
    for e in hand:
        for i, p in enumerate(e.patches):
            recs.append(("a", e.scale, p.keypoint_index, e.cyl[i], e.vec[i]))
    path = tmp_path / "desc.bin"
    write_descriptor_records(path, recs)
    assert path.stat().st_size == len(recs) * (13 + 4 * (7 * 20 * 32 + 32))
    ext = embed_cloud(c, (0.2, 0.25, 0.3), n_fps=50, rng_seed=1, cloud_id="a", backend=ExternalBackend(path))
    for x, y in zip(hand, ext):
        assert np.allclose(x.cyl, y.cyl, atol=1e-6) and np.allclose(x.vec, y.vec, atol=1e-6)
        assert x.cyl.shape == y.cyl.shape
    with pytest.raises(ParseError, match="no external descriptor"):
        embed_cloud(c, (0.2, 0.25, 0.3), n_fps=50, rng_seed=1, cloud_id="other", backend=ExternalBackend(path))


def test_external_backend_parse_errors(tmp_path):
    path = tmp_path / "d.bin"
    write_descriptor_records(path, [("a", "middle", 0, np.zeros((7, 20, 32)), np.ones(32))])
    data = path.read_bytes()
    (tmp_path / "trunc.bin").write_bytes(data + data[:10])
    with pytest.raises(ParseError, match="byte offset"):
        read_descriptor_records(tmp_path / "trunc.bin")
    bad = bytearray(data)
    bad[8] = 9
    (tmp_path / "scale.bin").write_bytes(bytes(bad))
    with pytest.raises(ParseError, match="scale"):
        read_descriptor_records(tmp_path / "scale.bin")
    nan = bytearray(data)
    nan[13:17] = np.array([np.nan], dtype="<f4").tobytes()
    (tmp_path / "nan.bin").write_bytes(bytes(nan))
    with pytest.raises(ParseError, match="non-finite"):
        read_descriptor_records(tmp_path / "nan.bin")


def test_handcrafted_backend_shape():
    b = HandcraftedBackend(DescriptorShape(2, 8, 12))
    cyl, vec = describe_points([np.array([[0.1, 0.2, 0.3]])], b.shape)
    assert cyl.shape == (1, 2, 8, 12) and vec.shape == (1, 12)


def test_descriptor_rigid_invariance_up_to_yaw(rng):
    pts = rng.normal(size=(3000, 3)) * [2.0, 1.0, 0.4]
    R = random_rotation(rng)
    a = PointCloud(pts)
    b = a.transformed(R, rng.normal(size=3))
    ia, ib = SpatialIndex.build(a), SpatialIndex.build(b)
    for key in rng.choice(3000, 10, replace=False):
        pa = extract_patch(a, ia, a.points[key], 1.0)
        pb = extract_patch(b, ib, b.points[key], 1.0)
        # the two normalized frames differ by a rotation about z only
        Rz = pb.rotation @ R @ pa.rotation.T
        assert np.allclose(Rz[2], [0, 0, 1.0], atol=1e-9) and np.allclose(Rz[:, 2], [0, 0, 1.0], atol=1e-9)
        assert np.abs(pa.points @ Rz.T - pb.points).max() < 1e-9
        ca, va = describe_points([pa.points @ Rz.T])
        cb, vb = describe_points([pb.points])
        assert np.abs(ca - cb).max() < 1e-5 and np.abs(va - vb).max() < 1e-5
