"""Intra-scale mutual matching and per-pair rigid transforms."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ParameterError
from .so3 import align_to_z, align_to_z_batch, yaw_rotation  # noqa: F401  (re-exported)


@dataclass(frozen=True)
class ScaleMatches:
    scale: str
    pairs: np.ndarray  # (K, 2) rows of (p keypoint index, q keypoint index)

    @property
    def count(self) -> int:
        return int(self.pairs.shape[0])


@dataclass(frozen=True, eq=False)
class CandidateTransform:
    rotation: np.ndarray
    translation: np.ndarray
    source_pair: tuple  # (scale, p index, q index)
    yaw_offset: float


def _sq_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # explicit expansion without BLAS keeps results independent of thread count
    aa = np.einsum("ij,ij->i", a, a)
    bb = np.einsum("ij,ij->i", b, b)
    return aa[:, None] + bb[None, :] - 2.0 * np.einsum("ik,jk->ij", a, b)


def mutual_match(f_p: np.ndarray, f_q: np.ndarray, scale: str = "") -> ScaleMatches:
    """Pairs ``(i, j)`` that are each other's nearest neighbor in feature space.

    Ties go to the lowest index.
    """
    f_p = np.asarray(f_p, dtype=np.float64)
    f_q = np.asarray(f_q, dtype=np.float64)
    if f_p.shape[0] == 0 or f_q.shape[0] == 0:
        return ScaleMatches(scale, np.zeros((0, 2), dtype=np.int64))
    d = _sq_distances(f_p, f_q)
    nn_pq = np.argmin(d, axis=1)
    nn_qp = np.argmin(d, axis=0)
    i = np.arange(f_p.shape[0])
    ok = nn_qp[nn_pq] == i
    pairs = np.stack([i[ok], nn_pq[ok]], axis=1).astype(np.int64)
    return ScaleMatches(scale, pairs)


def yaw_score(c_p: np.ndarray, c_q: np.ndarray) -> np.ndarray:
    """Circular cross-correlation over the azimuth axis.

    ``beta[w] = sum_{h, w', d} c_p[h, w', d] * c_q[h, (w' + w) mod W, d]``.
    Accepts single maps ``(H, W, D)`` or stacks ``(K, H, W, D)``.
    """
    c_p = np.asarray(c_p, dtype=np.float64)
    c_q = np.asarray(c_q, dtype=np.float64)
    if c_p.shape != c_q.shape:
        raise ParameterError(f"shape mismatch {c_p.shape} vs {c_q.shape}")
    W = c_p.shape[-2]
    # correlation theorem along the azimuth axis
    fp = np.fft.rfft(c_p, axis=-2)
    fq = np.fft.rfft(c_q, axis=-2)
    corr = np.fft.irfft(np.conj(fp) * fq, n=W, axis=-2)
    return corr.sum(axis=(-3, -1))


def soft_offset(beta: np.ndarray, temperature: float = 0.1, recenter: bool = False) -> float:
    """Softmax-weighted sector index ``d = sum_w softmax(beta / T)_w * w`` with ``w = 1..W``.

    ``beta[w - 1]`` scores offset ``w`` (offset ``W`` is the zero shift). With
    ``recenter`` the scores are rolled so the peak sits mid-array before
    averaging and the roll is undone afterwards, which avoids the bias of
    averaging a circular index across the wrap; the result then lies in
    ``[1, W + 1)``.
    """
    beta = np.asarray(beta, dtype=np.float64).reshape(-1)
    W = beta.shape[0]
    if W < 2:
        raise ParameterError("need at least two sectors")
    if not temperature > 0:
        raise ParameterError("temperature must be positive")
    shift = 0
    if recenter:
        shift = math.ceil(W / 2) - (int(np.argmax(beta)) + 1)
        beta = np.roll(beta, shift)
    logits = beta / temperature
    logits = logits - logits.max()
    p = np.exp(logits)
    p /= p.sum()
    d = float(np.dot(p, np.arange(1, W + 1))) - shift
    if recenter:
        d = (d - 1.0) % W + 1.0
    return d


def shift_scores_to_offsets(beta: np.ndarray) -> np.ndarray:
    """Reorder zero-based shift scores into the 1..W offset order used by :func:`soft_offset`."""
    return np.roll(np.asarray(beta), -1, axis=-1)


def pair_transform(
    patch_p,
    cyl_p: np.ndarray,
    patch_q,
    cyl_q: np.ndarray,
    temperature: float = 0.1,
    source_pair: tuple = ("", 0, 0),
) -> CandidateTransform:
    """Rigid transform mapping patch ``p`` onto patch ``q``.

    ``R = R_q^T R_yaw R_p`` where ``R_p``/``R_q`` take each patch's normal axis
    to +z and the yaw comes from the cylindrical correlation;
    ``t = q - R p`` for the two keypoints.
    """
    R, t, d = pair_transforms_batch(
        patch_p.rotation[None], patch_p.center[None], cyl_p[None],
        patch_q.rotation[None], patch_q.center[None], cyl_q[None],
        temperature,
    )
    return CandidateTransform(R[0], t[0], source_pair, float(d[0]))


def normalized_yaw_scores(cyl_p: np.ndarray, cyl_q: np.ndarray) -> np.ndarray:
    """Yaw scores divided by the product of map norms (cosine correlation), offset order 1..W."""
    beta = yaw_score(cyl_p, cyl_q)
    norm = np.sqrt(np.einsum("...ijk,...ijk->...", cyl_p, cyl_p) * np.einsum("...ijk,...ijk->...", cyl_q, cyl_q))
    beta = beta / np.maximum(norm, 1e-300)[..., None]
    return shift_scores_to_offsets(beta)


def pair_transforms_batch(rot_p, center_p, cyl_p, rot_q, center_q, cyl_q, temperature=0.1):
    """Vectorized :func:`pair_transform`; returns ``(R (K,3,3), t (K,3), d (K,))``."""
    W = cyl_p.shape[-2]
    beta = normalized_yaw_scores(cyl_p, cyl_q)
    d = np.array([soft_offset(b, temperature, recenter=True) for b in beta])
    a = 2.0 * np.pi * d / W
    c, s = np.cos(a), np.sin(a)
    yaw = np.zeros((d.shape[0], 3, 3))
    yaw[:, 0, 0] = c
    yaw[:, 0, 1] = -s
    yaw[:, 1, 0] = s
    yaw[:, 1, 1] = c
    yaw[:, 2, 2] = 1.0
    R = np.einsum("kji,kjl,klm->kim", rot_q, yaw, rot_p)
    t = center_q - np.einsum("kij,kj->ki", R, center_p)
    return R, t, d
