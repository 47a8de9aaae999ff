"""Cross-scale consensus maximization over per-pair candidate transforms."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyInputError, InsufficientConsensusError, ParameterError

# candidates scored per block; bounds the (block, N, 3) residual buffer
_BLOCK = 256


@dataclass(eq=False)
class CandidateSet:
    """Aligned candidate transforms and point pairs pooled from all scales.

    Row ``n`` of every array belongs to the same match: candidate
    ``(rotations[n], translations[n])`` was derived from pair
    ``(p[n], q[n])`` found at ``scales[n]``.
    """

    rotations: np.ndarray
    translations: np.ndarray
    p: np.ndarray
    q: np.ndarray
    scales: np.ndarray

    def __post_init__(self):
        n = self.rotations.shape[0]
        if not (self.translations.shape[0] == self.p.shape[0] == self.q.shape[0] == len(self.scales) == n):
            raise ParameterError("candidate and pair arrays must have the same length")

    def __len__(self) -> int:
        return self.rotations.shape[0]

    @classmethod
    def concatenate(cls, parts: list["CandidateSet"]) -> "CandidateSet":
        if not parts:
            return cls(np.zeros((0, 3, 3)), np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 3)), np.array([], dtype=object))
        return cls(
            np.concatenate([c.rotations for c in parts]),
            np.concatenate([c.translations for c in parts]),
            np.concatenate([c.p for c in parts]),
            np.concatenate([c.q for c in parts]),
            np.concatenate([np.asarray(c.scales, dtype=object) for c in parts]),
        )


@dataclass(eq=False)
class ConsensusResult:
    best_index: int
    rotation: np.ndarray
    translation: np.ndarray
    inliers: np.ndarray
    mean_residual: float
    n_evaluated: int

    @property
    def inlier_count(self) -> int:
        return int(self.inliers.shape[0])


def default_epsilon(voxel_size: float, override: float | None = None) -> float:
    """Inlier threshold: ``override`` if given, else twice the voxel size."""
    if override is not None:
        return float(override)
    if not voxel_size > 0:
        raise ParameterError("voxel size must be positive")
    return 2.0 * voxel_size


def residuals(R: np.ndarray, t: np.ndarray, p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """``||R_b p_n + t_b - q_n||`` for a stack of transforms, shape ``(B, N)``."""
    moved = np.einsum("bij,nj->bni", R, p) + t[:, None, :]
    diff = moved - q[None]
    return np.sqrt(np.einsum("bni,bni->bn", diff, diff))


def score_candidates(cands: CandidateSet, which: np.ndarray, epsilon: float):
    """Inlier counts and mean inlier residuals of the selected candidates over all pairs."""
    counts = np.empty(which.shape[0], dtype=np.int64)
    means = np.empty(which.shape[0])
    for start in range(0, which.shape[0], _BLOCK):
        sel = which[start : start + _BLOCK]
        res = residuals(cands.rotations[sel], cands.translations[sel], cands.p, cands.q)
        inl = res < epsilon
        c = inl.sum(axis=1)
        counts[start : start + sel.shape[0]] = c
        s = np.where(inl, res, 0.0).sum(axis=1)
        means[start : start + sel.shape[0]] = np.where(c > 0, s / np.maximum(c, 1), np.inf)
    return counts, means


def consensus_maximize(
    cands: CandidateSet,
    epsilon: float,
    max_candidates: int = 5000,
    rng_seed=0,
    min_inliers: int = 3,
) -> ConsensusResult:
    """Candidate with the most pairs inside ``epsilon``; ties go to the lower mean residual, then lower index.

    When there are more than ``max_candidates`` candidates a seeded uniform
    subset of them is evaluated; every pair is always scored.

    Raises
    ------
    EmptyInputError
        No candidates.
    InsufficientConsensusError
        The winner has fewer than ``min_inliers`` inliers. The best result found
        is attached as ``err.result``.
    """
    n = len(cands)
    if n == 0:
        raise EmptyInputError("no candidate transforms")
    if not epsilon > 0:
        raise ParameterError("epsilon must be positive")
    if n > max_candidates:
        rng = np.random.default_rng(rng_seed)
        which = np.sort(rng.choice(n, size=max_candidates, replace=False))
    else:
        which = np.arange(n)
    counts, means = score_candidates(cands, which, epsilon)
    # lexicographic: most inliers, then smallest mean residual, then lowest index
    order = np.lexsort((which, means, -counts))
    best = int(which[order[0]])
    R, t = cands.rotations[best], cands.translations[best]
    res = residuals(R[None], t[None], cands.p, cands.q)[0]
    inliers = np.flatnonzero(res < epsilon)
    mean_res = float(res[inliers].mean()) if inliers.size else float("inf")
    result = ConsensusResult(best, R, t, inliers, mean_res, int(which.shape[0]))
    if inliers.size < min_inliers:
        err = InsufficientConsensusError(f"best candidate has only {inliers.size} inliers")
        err.result = result
        raise err
    return result
