"""Geometric bootstrapping: voxel size and per-scale radii from the input pair alone."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import pdist

from .cloud import PointCloud, pca
from .errors import DegenerateGeometryError, EmptyInputError, ParameterError

SCALES = ("local", "middle", "global")


@dataclass(frozen=True)
class BootstrapConfig:
    kappa_spheric: float = 0.10
    kappa_disc: float = 0.15
    tau_v: float = 0.05
    tau_l: float = 0.005
    tau_m: float = 0.02
    tau_g: float = 0.05
    delta_v: float = 0.10
    n_r: int = 2000
    r_max: float = 5.0
    # Apply the truncation radius as a lower bound instead of an upper bound.
    literal_max_clamp: bool = False

    def __post_init__(self):
        if not 0 < self.tau_l <= self.tau_m <= self.tau_g < 1:
            raise ParameterError("need 0 < tau_l <= tau_m <= tau_g < 1")
        if not 0 < self.kappa_spheric < self.kappa_disc:
            raise ParameterError("need 0 < kappa_spheric < kappa_disc")
        if not 0 < self.delta_v <= 1:
            raise ParameterError("delta_v must lie in (0, 1]")
        if self.n_r < 2:
            raise ParameterError("n_r must be at least 2")
        if not self.r_max > 0:
            raise ParameterError("r_max must be positive")
        if not self.tau_v > 0:
            raise ParameterError("tau_v must be positive")

    @property
    def tau_scales(self) -> tuple[float, float, float]:
        return (self.tau_l, self.tau_m, self.tau_g)


@dataclass(frozen=True)
class BootstrapResult:
    voxel_size: float
    radii: tuple[float, float, float]
    sphericity: float
    spread: float
    branch: str


def select_larger(p: PointCloud, q: PointCloud) -> PointCloud:
    """The cloud with more points; ``p`` wins ties."""
    if len(p) == 0 and len(q) == 0:
        raise EmptyInputError("both clouds are empty")
    return q if len(q) > len(p) else p


def _sample(n_total: int, n_keep: int, rng_seed) -> np.ndarray:
    rng = np.random.default_rng(rng_seed)
    if n_keep >= n_total:
        return np.arange(n_total)
    return np.sort(rng.choice(n_total, size=n_keep, replace=False))


def voxel_size_from_sample(points: np.ndarray, cfg: BootstrapConfig) -> tuple[float, float, float, str]:
    """Sphericity rule on an already drawn sample: ``(v, sphericity, spread, branch)``."""
    frame = pca(points)
    if frame.eigenvalues[0] <= 0:
        raise DegenerateGeometryError("largest eigenvalue is zero")
    sphericity = frame.sphericity
    proj = points @ frame.v3
    spread = float(proj.max() - proj.min())
    extent = float(np.ptp(points @ frame.v1))
    # relative test: flat samples leave rounding-level spread
    if spread <= 1e-9 * extent:
        raise DegenerateGeometryError("sample has no extent along the smallest principal axis")
    if sphericity >= cfg.tau_v:
        return cfg.kappa_spheric * math.sqrt(spread), sphericity, spread, "spheric"
    return cfg.kappa_disc * math.sqrt(spread), sphericity, spread, "disc"


def compute_voxel_size(cloud: PointCloud, cfg: BootstrapConfig, rng_seed=0) -> tuple[float, float, float, str]:
    """Pick the voxel size from the sphericity and spread of a random ``delta_v`` sample."""
    n = len(cloud)
    if n < 4:
        raise DegenerateGeometryError("need at least 4 points to estimate the voxel size")
    n_keep = min(n, max(4, int(round(cfg.delta_v * n))))
    idx = _sample(n, n_keep, rng_seed)
    return voxel_size_from_sample(cloud.points[idx], cfg)


def average_fraction(points: np.ndarray, r: float) -> float:
    """Mean fraction of the set lying within ``r`` of each of its points, self included."""
    n = points.shape[0]
    d = pdist(points)
    return (n + 2.0 * np.count_nonzero(d <= r)) / (n * n)


def radii_from_sample(points: np.ndarray, cfg: BootstrapConfig) -> tuple[float, float, float]:
    """Exact minimizer of ``|average_fraction(r) - tau|`` for each scale.

    ``average_fraction`` is a step function that only changes at pairwise
    distances, so the best achievable number of close pairs is found in closed
    form and the smallest radius attaining it is returned.
    """
    n = points.shape[0]
    if n < 2:
        raise DegenerateGeometryError("need at least 2 points to estimate radii")
    d = np.sort(pdist(points))
    # achievable (radius, pair count) steps; repeated distances enter together
    values, first = np.unique(d, return_index=True)
    counts = np.append(first[1:], d.shape[0])
    if values[0] > 0:
        values = np.insert(values, 0, 0.0)
        counts = np.insert(counts, 0, 0)
    radii = []
    for tau in cfg.tau_scales:
        # the fraction with m close pairs is (n + 2m) / n^2
        gap = np.abs(n + 2.0 * counts - tau * n * n)
        r = float(values[np.argmin(gap)])
        if cfg.literal_max_clamp:
            r = max(r, cfg.r_max)
        else:
            r = min(r, cfg.r_max)
        radii.append(r)
    return tuple(radii)


def estimate_radii(cloud: PointCloud, cfg: BootstrapConfig, rng_seed=0) -> tuple[float, float, float]:
    """Local, middle and global search radii from ``n_r`` sampled points of a voxelized cloud."""
    n = len(cloud)
    if n < 2:
        raise DegenerateGeometryError("need at least 2 points to estimate radii")
    idx = _sample(n, cfg.n_r, rng_seed)
    return radii_from_sample(cloud.points[idx], cfg)
