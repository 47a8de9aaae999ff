"""Pose estimation from correspondences.

Closed-form weighted Kabsch, 3-point RANSAC, robust kernels (squared, Huber,
Geman-McClure and truncated least squares with a graduated non-convexity
parameter ``mu``) and an IRLS refinement that can follow a GNC schedule.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .consensus import residuals
from .errors import DegenerateModelError, InsufficientDataError, ParameterError


@dataclass(frozen=True, eq=False)
class Pose:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def apply(self, pts: np.ndarray) -> np.ndarray:
        return np.asarray(pts) @ self.rotation.T + self.translation

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def inverse(self) -> "Pose":
        return Pose(self.rotation.T, -self.rotation.T @ self.translation)


def _as_pairs(p, q):
    p = np.asarray(p, dtype=np.float64).reshape(-1, 3)
    q = np.asarray(q, dtype=np.float64).reshape(-1, 3)
    if p.shape != q.shape:
        raise ParameterError("p and q must have the same number of points")
    return p, q


def kabsch(p, q, weights=None) -> Pose:
    """Rigid transform minimizing ``sum_i w_i ||R p_i + t - q_i||^2``.

    Uses the SVD of the weighted cross-covariance with a reflection
    correction. Raises :class:`DegenerateModelError` for fewer than three
    pairs or (near) collinear source points.
    """
    p, q = _as_pairs(p, q)
    if p.shape[0] < 3:
        raise DegenerateModelError("need at least 3 pairs")
    w = np.ones(p.shape[0]) if weights is None else np.asarray(weights, dtype=np.float64).reshape(-1)
    if w.shape[0] != p.shape[0] or np.any(w < 0):
        raise ParameterError("weights must be non-negative, one per pair")
    total = w.sum()
    if not total > 0:
        raise DegenerateModelError("all weights are zero")
    cp = w @ p / total
    cq = w @ q / total
    pc = p - cp
    qc = q - cq
    H = np.einsum("n,ni,nj->ij", w, pc, qc)
    spread = np.linalg.svd(np.einsum("n,ni,nj->ij", w, pc, pc), compute_uv=False)
    if spread[0] <= 0 or spread[1] <= 1e-12 * spread[0]:
        raise DegenerateModelError("source points are collinear or coincident")
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    return Pose(R, cq - R @ cp)


def _kabsch_triplets(P: np.ndarray, Q: np.ndarray):
    """Batched unweighted Kabsch for ``(B, 3, 3)`` stacks of point triplets."""
    cp = P.mean(axis=1)
    cq = Q.mean(axis=1)
    H = np.einsum("bni,bnj->bij", P - cp[:, None], Q - cq[:, None])
    U, _, Vt = np.linalg.svd(H)
    V = np.transpose(Vt, (0, 2, 1))
    Ut = np.transpose(U, (0, 2, 1))
    d = np.sign(np.linalg.det(np.einsum("bij,bjk->bik", V, Ut)))
    D = np.zeros_like(H)
    D[:, 0, 0] = 1.0
    D[:, 1, 1] = 1.0
    D[:, 2, 2] = d
    R = np.einsum("bij,bjk,bkl->bil", V, D, Ut)
    t = cq - np.einsum("bij,bj->bi", R, cp)
    return R, t


def _sample_triplets(rng: np.random.Generator, n: int, size: int) -> np.ndarray:
    i = rng.integers(0, n, size)
    j = rng.integers(0, n - 1, size)
    j = j + (j >= i)
    a, b = np.minimum(i, j), np.maximum(i, j)
    k = rng.integers(0, n - 2, size)
    k = k + (k >= a)
    k = k + (k >= b)
    return np.stack([i, j, k], axis=1)


def _triangle_area(T: np.ndarray) -> np.ndarray:
    return 0.5 * np.linalg.norm(np.cross(T[:, 1] - T[:, 0], T[:, 2] - T[:, 0]), axis=1)


@dataclass(eq=False)
class RansacResult:
    pose: Pose
    inliers: np.ndarray
    iterations: int
    converged: bool

    @property
    def inlier_count(self) -> int:
        return int(self.inliers.shape[0])

    @property
    def low_confidence(self) -> bool:
        return not self.converged or self.inlier_count <= 3


def required_iterations(inlier_ratio: float, confidence: float = 0.99, sample_size: int = 3) -> float:
    """Hypotheses needed so that ``(1 - ratio^3)^k`` drops below ``1 - confidence``."""
    good = inlier_ratio**sample_size
    if good >= 1.0:
        return 1.0
    if good <= 0.0:
        return math.inf
    return math.log(1.0 - confidence) / math.log(1.0 - good)


def ransac(
    p,
    q,
    epsilon: float,
    max_iters: int = 50_000,
    rng_seed=0,
    confidence: float = 0.99,
    batch: int = 500,
    min_area: float = 1e-9,
) -> RansacResult:
    """3-point hypothesize-and-verify with a final Kabsch refit on the consensus set.

    Hypotheses are drawn in batches from one seeded generator; the best model
    is the first one reaching the highest inlier count. Stops early once the
    standard confidence bound is met. Returned inliers are recomputed under
    the returned pose, so each satisfies ``residual < epsilon``.
    """
    p, q = _as_pairs(p, q)
    n = p.shape[0]
    if n < 3:
        raise InsufficientDataError(f"RANSAC needs at least 3 pairs, got {n}")
    if not epsilon > 0:
        raise ParameterError("epsilon must be positive")
    rng = np.random.default_rng(rng_seed)
    best_count, best_R, best_t = -1, None, None
    done = 0
    converged = False
    while done < max_iters:
        size = min(batch, max_iters - done)
        idx = _sample_triplets(rng, n, size)
        P, Q = p[idx], q[idx]
        ok = (_triangle_area(P) >= min_area) & (_triangle_area(Q) >= min_area)
        done += size
        if np.any(ok):
            R, t = _kabsch_triplets(P[ok], Q[ok])
            counts = (residuals(R, t, p, q) < epsilon).sum(axis=1)
            k = int(np.argmax(counts))
            if counts[k] > best_count:
                best_count, best_R, best_t = int(counts[k]), R[k], t[k]
        if best_count > 0 and done >= required_iterations(best_count / n, confidence):
            converged = True
            break
    if best_R is None:
        raise DegenerateModelError("every sampled triplet was degenerate")

    pose = Pose(best_R, best_t)
    inliers = np.flatnonzero(residuals(best_R[None], best_t[None], p, q)[0] < epsilon)
    for _ in range(5):
        if inliers.shape[0] < 3:
            break
        try:
            refit = kabsch(p[inliers], q[inliers])
        except DegenerateModelError:
            break
        refit_inl = np.flatnonzero(
            residuals(refit.rotation[None], refit.translation[None], p, q)[0] < epsilon
        )
        if refit_inl.shape[0] < inliers.shape[0]:
            break
        same = np.array_equal(refit_inl, inliers)
        pose, inliers = refit, refit_inl
        if same:
            break
    return RansacResult(pose, inliers, done, converged)


# ---------------------------------------------------------------------------
# robust kernels


@dataclass(frozen=True)
class RobustKernel:
    kind: str = "squared"  # squared | huber | gm | tls
    c_bar: float = 1.0
    mu: float = 1.0
    delta: float = 1.0

    def __post_init__(self):
        if self.kind not in ("squared", "huber", "gm", "tls"):
            raise ParameterError(f"unknown kernel {self.kind!r}")
        if not (self.c_bar > 0 and self.mu > 0 and self.delta > 0):
            raise ParameterError("c_bar, mu and delta must be positive")

    def with_mu(self, mu: float) -> "RobustKernel":
        return RobustKernel(self.kind, self.c_bar, mu, self.delta)


def kernel_eval(k: RobustKernel, r):
    """Cost of residual(s) ``r`` under kernel ``k``."""
    r = np.abs(np.asarray(r, dtype=np.float64))
    r2 = r * r
    if k.kind == "squared":
        out = r2
    elif k.kind == "huber":
        out = np.where(r <= k.delta, 0.5 * r2, k.delta * (r - 0.5 * k.delta))
    elif k.kind == "gm":
        mc2 = k.mu * k.c_bar**2
        out = mc2 * r2 / (mc2 + r2)
    else:
        c2, mu = k.c_bar**2, k.mu
        lo = mu / (mu + 1.0) * c2
        hi = (mu + 1.0) / mu * c2
        mid = 2.0 * k.c_bar * r * math.sqrt(mu * (mu + 1.0)) - mu * (c2 + r2)
        out = np.where(r2 <= lo, r2, np.where(r2 <= hi, mid, c2))
    return out if out.ndim else float(out)


def kernel_weight(k: RobustKernel, r):
    """IRLS weight ``rho'(r) / (2 r)`` (for Huber ``rho'(r) / r``), so squared residuals weigh 1.

    GM: ``(mu c^2 / (mu c^2 + r^2))^2``. TLS: 1 below the inner bound,
    ``c sqrt(mu (mu + 1)) / |r| - mu`` between the bounds, 0 above.
    """
    r = np.abs(np.asarray(r, dtype=np.float64))
    if k.kind == "squared":
        return np.ones_like(r)
    if k.kind == "huber":
        return np.where(r <= k.delta, 1.0, k.delta / np.maximum(r, 1e-300))
    if k.kind == "gm":
        mc2 = k.mu * k.c_bar**2
        return (mc2 / (mc2 + r * r)) ** 2
    c2, mu = k.c_bar**2, k.mu
    r2 = r * r
    lo = mu / (mu + 1.0) * c2
    hi = (mu + 1.0) / mu * c2
    mid = k.c_bar * math.sqrt(mu * (mu + 1.0)) / np.maximum(r, 1e-300) - mu
    return np.where(r2 <= lo, 1.0, np.where(r2 <= hi, mid, 0.0))


@dataclass(eq=False)
class IrlsResult:
    pose: Pose
    costs: list  # (mu, cost) after every weighted solve
    iterations: int
    stalled: bool = False


def _total_cost(k: RobustKernel, pose: Pose, p, q) -> float:
    r = np.linalg.norm(pose.apply(p) - q, axis=1)
    return float(np.sum(kernel_eval(k, r)))


def irls_refine(
    p,
    q,
    initial: Pose,
    kernel: RobustKernel,
    iters: int = 20,
    gnc: bool = False,
    gnc_factor: float | None = None,
    tol: float = 1e-12,
) -> IrlsResult:
    """Iteratively reweighted Kabsch on a robust kernel.

    With ``gnc`` the kernel's ``mu`` follows a graduated schedule: GM starts
    large and halves down to ``kernel.mu``; TLS starts near zero and grows by
    ``1.4`` up to ``kernel.mu``. At each ``mu`` up to ``iters`` reweighting
    steps run; the total robust cost never increases at fixed ``mu``.
    """
    p, q = _as_pairs(p, q)
    if p.shape[0] < 3:
        raise InsufficientDataError("need at least 3 pairs")
    pose = initial
    r0 = np.linalg.norm(pose.apply(p) - q, axis=1)
    schedule = [kernel.mu]
    if gnc and kernel.kind in ("gm", "tls"):
        r_max2 = max(float(np.max(r0 * r0)), kernel.c_bar**2 * 1.01)
        c2 = kernel.c_bar**2
        if kernel.kind == "gm":
            factor = gnc_factor or 2.0
            mu = max(2.0 * r_max2 / c2, kernel.mu)
            schedule = []
            while mu > kernel.mu:
                schedule.append(mu)
                mu /= factor
            schedule.append(kernel.mu)
        else:
            factor = gnc_factor or 1.4
            mu = min(c2 / (2.0 * r_max2 - c2), kernel.mu)
            schedule = []
            while mu < kernel.mu:
                schedule.append(mu)
                mu *= factor
            schedule.append(kernel.mu)
    costs = []
    n_iter = 0
    for mu in schedule:
        k = kernel.with_mu(mu)
        prev = _total_cost(k, pose, p, q)
        for _ in range(iters):
            r = np.linalg.norm(pose.apply(p) - q, axis=1)
            w = kernel_weight(k, r)
            if np.all(w < 1e-12):
                return IrlsResult(pose, costs, n_iter, stalled=True)
            try:
                cand = kabsch(p, q, w)
            except DegenerateModelError:
                return IrlsResult(pose, costs, n_iter, stalled=True)
            n_iter += 1
            cost = _total_cost(k, cand, p, q)
            if cost > prev:
                # a majorization step cannot increase the cost beyond rounding
                cost = prev
                costs.append((mu, cost))
                break
            pose = cand
            costs.append((mu, cost))
            if prev - cost <= tol * max(prev, 1.0):
                break
            prev = cost
    return IrlsResult(pose, costs, n_iter)


# ---------------------------------------------------------------------------
# global optimum ambiguity on L-shaped clouds


def lshape_cloud(long_arm: float = 4.0, short_arm: float = 2.0, spacing: float = 0.1) -> np.ndarray:
    """Planar L: a long arm along +x and a short arm along +y meeting at the origin."""
    n_long = int(round(long_arm / spacing))
    n_short = int(round(short_arm / spacing))
    xs = np.arange(n_long + 1) * spacing
    ys = np.arange(1, n_short + 1) * spacing
    long_pts = np.column_stack([xs, np.zeros_like(xs), np.zeros_like(xs)])
    short_pts = np.column_stack([np.zeros_like(ys), ys, np.zeros_like(ys)])
    return np.vstack([long_pts, short_pts])


LSHAPE_CASES = {
    # long arms coincide, short arm flipped to -y (half-turn about x)
    "long": np.diag([1.0, -1.0, -1.0]),
    # short arms coincide, long arm flipped to -x (half-turn about y)
    "short": np.diag([-1.0, 1.0, -1.0]),
    "full": np.eye(3),
}


def lshape_residuals(case: str, cloud: np.ndarray | None = None) -> np.ndarray:
    """Nearest-neighbor residuals of the aligned source L against the target L."""
    cloud = lshape_cloud() if cloud is None else cloud
    moved = cloud @ LSHAPE_CASES[case].T
    dist, _ = cKDTree(cloud).query(moved)
    return dist


def lshape_ambiguity_demo(mus=(0.1, 1.0, 10.0, 100.0), c_bars=(0.1, 1.0)) -> list[dict]:
    """Total GM and TLS cost of the long-overlap, short-overlap and full-overlap alignments.

    Returns one row per ``(kernel, mu, c_bar, case)``.
    """
    res = {case: lshape_residuals(case) for case in LSHAPE_CASES}
    rows = []
    for kind in ("gm", "tls"):
        for mu in mus:
            for c_bar in c_bars:
                k = RobustKernel(kind, c_bar=c_bar, mu=mu)
                for case in ("long", "short", "full"):
                    cost = float(np.sum(kernel_eval(k, res[case])))
                    rows.append({"kernel": kind, "mu": mu, "c_bar": c_bar, "case": case, "cost": cost})
    return rows
