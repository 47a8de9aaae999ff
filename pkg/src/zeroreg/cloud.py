"""Point cloud container and the geometric primitives the pipeline is built on.

Everything here operates on ``(N, 3)`` float64 arrays; :class:`PointCloud` is a
thin validated wrapper so that the rest of the package can rely on finite
coordinates and aligned intensities.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import (
    DegenerateGeometryError,
    EmptyInputError,
    OutOfRangeError,
    ParameterError,
)

# voxel keys beyond this magnitude are rejected rather than risking collisions
MAX_VOXEL_KEY = 2**20


@dataclass(frozen=True)
class PointCloud:
    """Ordered 3D points (meters) with optional per-point intensity."""

    points: np.ndarray
    intensity: np.ndarray | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.size == 0:
            pts = pts.reshape(0, 3)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ParameterError(f"points must have shape (N, 3), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ParameterError("point coordinates must be finite")
        object.__setattr__(self, "points", pts)
        if self.intensity is not None:
            inten = np.asarray(self.intensity, dtype=np.float64).reshape(-1)
            if inten.shape[0] != pts.shape[0]:
                raise ParameterError(
                    f"intensity has {inten.shape[0]} entries for {pts.shape[0]} points"
                )
            object.__setattr__(self, "intensity", inten)

    def __len__(self) -> int:
        return self.points.shape[0]

    def transformed(self, rotation: np.ndarray, translation: np.ndarray) -> "PointCloud":
        pts = self.points @ np.asarray(rotation).T + np.asarray(translation)
        return PointCloud(pts, self.intensity)

    def subset(self, indices) -> "PointCloud":
        inten = None if self.intensity is None else self.intensity[indices]
        return PointCloud(self.points[indices], inten)


@dataclass(frozen=True)
class PcaFrame:
    """Principal axes of a point set.

    ``eigenvectors[:, a]`` is the unit axis belonging to ``eigenvalues[a]``;
    eigenvalues are sorted in descending order.
    """

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    mean: np.ndarray

    @property
    def v1(self) -> np.ndarray:
        return self.eigenvectors[:, 0]

    @property
    def v2(self) -> np.ndarray:
        return self.eigenvectors[:, 1]

    @property
    def v3(self) -> np.ndarray:
        return self.eigenvectors[:, 2]

    @property
    def sphericity(self) -> float:
        return float(self.eigenvalues[2] / self.eigenvalues[0])


@dataclass(frozen=True, eq=False)
class SpatialIndex:
    """Immutable k-d tree over a cloud; radius results are exact and sorted."""

    points: np.ndarray
    _tree: cKDTree = field(repr=False)

    @classmethod
    def build(cls, cloud: PointCloud | np.ndarray) -> "SpatialIndex":
        pts = _as_points(cloud)
        return cls(pts, cKDTree(pts))

    def __len__(self) -> int:
        return self.points.shape[0]

    def radius(self, query, r: float) -> np.ndarray:
        return radius_neighbors(self, query, r)

    def radius_batch(self, queries: np.ndarray, r: float) -> list[np.ndarray]:
        if r < 0:
            raise ParameterError("radius must be non-negative")
        hits = self._tree.query_ball_point(np.asarray(queries, dtype=np.float64), r, return_sorted=True)
        return [np.asarray(h, dtype=np.int64) for h in hits]

    def knn(self, queries: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
        """Distances and indices of the ``k`` nearest points (self included)."""
        k = min(int(k), len(self))
        dist, idx = self._tree.query(np.asarray(queries, dtype=np.float64), k=k)
        return np.asarray(dist), np.asarray(idx)


def _as_points(cloud) -> np.ndarray:
    if isinstance(cloud, PointCloud):
        return cloud.points
    pts = np.asarray(cloud, dtype=np.float64)
    return pts.reshape(-1, 3)


def radius_neighbors(index: SpatialIndex, query, r: float) -> np.ndarray:
    """Indices of all indexed points within distance ``r`` of ``query`` (inclusive), ascending."""
    if r < 0:
        raise ParameterError("radius must be non-negative")
    q = np.asarray(query, dtype=np.float64).reshape(3)
    hits = index._tree.query_ball_point(q, r)
    return np.array(sorted(hits), dtype=np.int64)


def voxel_downsample(cloud: PointCloud, v: float) -> PointCloud:
    """Replace the points of every occupied voxel of side ``v`` by their centroid.

    Output is ordered by voxel key, so it does not depend on the input order.
    """
    if not v > 0:
        raise ParameterError(f"voxel size must be positive, got {v}")
    if len(cloud) == 0:
        raise EmptyInputError("cannot voxelize an empty cloud")
    scaled = np.floor(cloud.points / v)
    if np.any(np.abs(scaled) > MAX_VOXEL_KEY):
        raise OutOfRangeError(
            f"coordinates exceed {MAX_VOXEL_KEY} voxels of size {v} from the origin"
        )
    keys = scaled.astype(np.int64)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    m = counts.shape[0]
    centroids = np.empty((m, 3))
    for axis in range(3):
        centroids[:, axis] = np.bincount(inverse, weights=cloud.points[:, axis], minlength=m) / counts
    intensity = None
    if cloud.intensity is not None:
        intensity = np.bincount(inverse, weights=cloud.intensity, minlength=m) / counts
    return PointCloud(centroids, intensity)


def _orient_batch(axes: np.ndarray, rel: np.ndarray, centered: np.ndarray, mask: np.ndarray) -> np.ndarray:
    # Sign rules in order: net projection about the reference point, third
    # central moment, largest-magnitude component positive.
    proj_ref = np.einsum("pmi,pi->pm", rel, axes) * mask
    first = proj_ref.sum(axis=1)
    first_ok = np.abs(first) > 1e-9 * np.abs(proj_ref).sum(axis=1)
    cubed = (np.einsum("pmi,pi->pm", centered, axes) * mask) ** 3
    third = cubed.sum(axis=1)
    third_ok = np.abs(third) > 1e-9 * np.abs(cubed).sum(axis=1)
    largest = axes[np.arange(axes.shape[0]), np.argmax(np.abs(axes), axis=1)]
    sign = np.where(first_ok, np.sign(first), np.where(third_ok, np.sign(third), np.sign(largest)))
    return axes * sign[:, None]


def pca_batch(points: np.ndarray, mask: np.ndarray, centers: np.ndarray | None = None):
    """PCA of many padded point sets at once.

    ``points`` is ``(P, M, 3)`` and ``mask`` ``(P, M)`` marks the valid rows.
    Returns ``(eigenvalues (P, 3), eigenvectors (P, 3, 3), means (P, 3))`` with
    the same ordering and sign conventions as :func:`pca`.
    """
    mask = mask.astype(np.float64)
    n = mask.sum(axis=1)
    means = np.einsum("pmi,pm->pi", points, mask) / n[:, None]
    centered = (points - means[:, None, :]) * mask[:, :, None]
    cov = np.einsum("pmi,pmj->pij", centered, centered) / np.maximum(n - 1, 1)[:, None, None]
    evals, evecs = np.linalg.eigh(cov)
    evals = np.clip(evals[:, ::-1], 0.0, None)
    evecs = evecs[:, :, ::-1]
    ref = means if centers is None else np.asarray(centers, dtype=np.float64)
    rel = (points - ref[:, None, :]) * mask[:, :, None]
    v1 = _orient_batch(evecs[:, :, 0], rel, centered, mask)
    v2 = _orient_batch(evecs[:, :, 1], rel, centered, mask)
    v3 = _orient_batch(evecs[:, :, 2], rel, centered, mask)
    # keep v1 and v3 as oriented; handedness is fixed through v2
    flip = np.einsum("pi,pi->p", np.cross(v1, v2), v3) < 0
    v2[flip] *= -1.0
    return evals, np.stack([v1, v2, v3], axis=2), means


def pca(cloud: PointCloud | np.ndarray, center=None) -> PcaFrame:
    """Eigen-decomposition of the sample covariance with deterministic axis signs.

    Parameters
    ----------
    cloud : PointCloud or (N, 3) array
    center : 3-vector, optional
        Reference point for the sign rule. Each axis is oriented so that the
        points project positively on it on balance, measured from ``center``
        (defaults to the mean, where the rule degenerates and the third central
        moment decides instead).

    Raises
    ------
    EmptyInputError
        No points.
    DegenerateGeometryError
        All points coincide, so the largest eigenvalue is zero.
    """
    pts = _as_points(cloud)
    n = pts.shape[0]
    if n == 0:
        raise EmptyInputError("pca of an empty cloud")
    if np.ptp(pts, axis=0).max() == 0.0:
        raise DegenerateGeometryError("all points are identical")
    centers = None if center is None else np.asarray(center, dtype=np.float64).reshape(1, 3)
    evals, evecs, means = pca_batch(pts[None], np.ones((1, n)), centers)
    return PcaFrame(evals[0], evecs[0], means[0])


def farthest_point_sampling(cloud: PointCloud | np.ndarray, n: int, start: int | None = None) -> np.ndarray:
    """Greedy farthest point sampling.

    Starts from ``start`` or, by default, the point farthest from the centroid.
    Each subsequent pick maximizes the distance to the already selected set
    (lowest index on ties). Returns every index when ``n`` covers the cloud.
    """
    pts = _as_points(cloud)
    m = pts.shape[0]
    if m == 0:
        raise EmptyInputError("farthest point sampling of an empty cloud")
    if n < 1:
        raise ParameterError("n must be at least 1")
    if start is None:
        d0 = ((pts - pts.mean(axis=0)) ** 2).sum(axis=1)
        start = int(np.argmax(d0))
    if n >= m:
        rest = np.delete(np.arange(m), start)
        return np.concatenate([[start], rest]).astype(np.int64)
    selected = np.empty(n, dtype=np.int64)
    selected[0] = start
    xs, ys, zs = (np.ascontiguousarray(pts[:, k]) for k in range(3))
    mind = np.full(m, np.inf)
    d, tmp = np.empty(m), np.empty(m)
    nxt = start
    for i in range(n):
        selected[i] = nxt
        px, py, pz = pts[nxt]
        np.subtract(xs, px, out=d)
        np.multiply(d, d, out=d)
        np.subtract(ys, py, out=tmp)
        np.multiply(tmp, tmp, out=tmp)
        d += tmp
        np.subtract(zs, pz, out=tmp)
        np.multiply(tmp, tmp, out=tmp)
        d += tmp
        np.minimum(mind, d, out=mind)
        nxt = int(np.argmax(mind))
    return selected
