"""Multi-scale patch extraction and cylindrical descriptors.

A patch is the neighborhood of a keypoint within the scale radius, rotated so
that its smallest principal axis points along +z and divided by the radius.
The handcrafted descriptor bins that patch into an ``H x W`` (height x azimuth)
cylinder with ``D`` channels per cell. Rotating a patch about z by whole
sectors rolls the map along the azimuth axis, which is what yaw recovery in
:mod:`zeroreg.matching` relies on; the pooled vector is azimuth-invariant.
"""

from __future__ import annotations

import hashlib
import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cloud import PcaFrame, PointCloud, SpatialIndex, farthest_point_sampling, pca_batch
from .errors import ParameterError, ParseError, ScaleEmptyError, SparsePatchError
from .so3 import align_to_z_batch

log = logging.getLogger(__name__)

SCALE_CODES = {"local": 0, "middle": 1, "global": 2}
MIN_PATCH_POINTS = 5
SUMMARY_WEIGHT = 0.3  # weight of the four per-cell summary channels in the pooled vector


@dataclass(frozen=True)
class DescriptorShape:
    H: int = 7
    W: int = 20
    D: int = 32

    def __post_init__(self):
        if self.H < 1 or self.W < 2 or self.D < self.H + 4:
            raise ParameterError("need H >= 1, W >= 2 and D >= H + 4")
        if (self.D - 4) % self.H:
            raise ParameterError("D - 4 must be a multiple of H")

    @property
    def radial_bins(self) -> int:
        """Radial bins per height row of the histogram block."""
        return (self.D - 4) // self.H


@dataclass(frozen=True, eq=False)
class Patch:
    """Normalized neighborhood of one keypoint.

    ``rotation`` maps world offsets into the patch frame; its third row is the
    patch's smallest principal axis ``frame.v3``. ``points`` are
    ``rotation @ (p - center) / radius`` and all lie in the unit ball.
    """

    center: np.ndarray
    scale: str
    radius: float
    frame: PcaFrame
    rotation: np.ndarray
    points: np.ndarray
    keypoint_index: int = 0


@dataclass(frozen=True, eq=False)
class PatchDescriptor:
    cyl: np.ndarray
    vec: np.ndarray
    keypoint_index: int


# ---------------------------------------------------------------------------
# patch extraction


def _gather(cloud_pts, neighbor_lists, n_patch, seeds):
    picked = []
    for nbrs, seed in zip(neighbor_lists, seeds):
        if nbrs.shape[0] > n_patch:
            rng = np.random.default_rng(seed)
            nbrs = np.sort(rng.choice(nbrs, size=n_patch, replace=False))
        picked.append(nbrs)
    return picked


def _build_patches(cloud_pts, centers, picked, radius, scale, keypoint_indices):
    m = max(p.shape[0] for p in picked)
    P = len(picked)
    padded = np.zeros((P, m, 3))
    mask = np.zeros((P, m))
    for i, idx in enumerate(picked):
        padded[i, : idx.shape[0]] = cloud_pts[idx]
        mask[i, : idx.shape[0]] = 1.0
    evals, evecs, means = pca_batch(padded, mask, centers)
    rots = align_to_z_batch(evecs[:, :, 2])
    patches = []
    for i, idx in enumerate(picked):
        local = (cloud_pts[idx] - centers[i]) @ rots[i].T / radius
        norms = np.linalg.norm(local, axis=1)
        over = norms > 1.0
        if np.any(over):
            local[over] /= norms[over, None]
        patches.append(
            Patch(
                center=centers[i].copy(),
                scale=scale,
                radius=float(radius),
                frame=PcaFrame(evals[i], evecs[i], means[i]),
                rotation=rots[i],
                points=local,
                keypoint_index=int(keypoint_indices[i]),
            )
        )
    return patches


def extract_patch(
    cloud: PointCloud,
    index: SpatialIndex,
    keypoint,
    r: float,
    n_patch: int = 512,
    rng_seed=0,
    scale: str = "middle",
    keypoint_index: int = 0,
) -> Patch:
    """Collect, subsample and normalize the neighborhood of ``keypoint``.

    Raises :class:`SparsePatchError` when fewer than five points fall within ``r``.
    """
    if not r > 0:
        raise ParameterError("patch radius must be positive")
    center = np.asarray(keypoint, dtype=np.float64).reshape(1, 3)
    nbrs = index.radius_batch(center, r)[0]
    if nbrs.shape[0] < MIN_PATCH_POINTS:
        raise SparsePatchError(f"only {nbrs.shape[0]} points within radius {r}")
    picked = _gather(cloud.points, [nbrs], n_patch, [rng_seed])
    return _build_patches(cloud.points, center, picked, r, scale, [keypoint_index])[0]


# ---------------------------------------------------------------------------
# descriptors


def describe_points(point_sets: list[np.ndarray], shape: DescriptorShape = DescriptorShape()):
    """Cylindrical maps ``(P, H, W, D)`` and pooled vectors ``(P, D)`` for normalized point sets.

    Channels per cell: a joint histogram over height bin x radial bin of the
    distance to the z-axis (``H * (D - 4) / H`` channels, radial bins over
    [0, 1]), occupancy, mean and standard deviation of z, and mean radial
    distance. Histogram and occupancy are fractions of the patch's point
    count. A point in height row ``h`` only feeds that row's histogram block,
    so pooling over all cells keeps the height/radius layout of the patch.
    Bins are half-open ``[lo, hi)``; azimuth sector 0 starts at -pi.

    ``vec`` pools ``cyl`` over all cells, takes the square root of the
    histogram block (Hellinger mapping), scales the four summary channels
    by ``SUMMARY_WEIGHT`` and L2-normalizes.
    """
    H, W, D = shape.H, shape.W, shape.D
    nr = shape.radial_bins
    C = D - 4
    P = len(point_sets)
    counts = np.array([p.shape[0] for p in point_sets])
    if P == 0:
        return np.zeros((0, H, W, D)), np.zeros((0, D))
    if np.any(counts == 0):
        raise SparsePatchError("cannot describe an empty patch")
    pts = np.concatenate(point_sets)
    pid = np.repeat(np.arange(P), counts)
    x, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
    rho = np.sqrt(x * x + y * y)
    h = np.clip(np.floor((z + 1.0) * 0.5 * H).astype(np.int64), 0, H - 1)
    w = np.floor((np.arctan2(y, x) + np.pi) / (2.0 * np.pi / W)).astype(np.int64) % W
    rb = np.clip(np.floor(rho * nr).astype(np.int64), 0, nr - 1)
    inv_n = 1.0 / counts[pid]

    n_cells = P * H * W
    cell = (pid * H + h) * W + w
    hist = np.bincount(cell * C + h * nr + rb, weights=inv_n, minlength=n_cells * C).reshape(P, H, W, C)
    cnt = np.bincount(cell, minlength=n_cells).astype(np.float64)
    occ = np.bincount(cell, weights=inv_n, minlength=n_cells)
    safe = np.maximum(cnt, 1.0)
    mean_z = np.bincount(cell, weights=z, minlength=n_cells) / safe
    dz = z - mean_z[cell]
    std_z = np.sqrt(np.bincount(cell, weights=dz * dz, minlength=n_cells) / safe)
    mean_rho = np.bincount(cell, weights=rho, minlength=n_cells) / safe

    extra = np.stack([occ, mean_z, std_z, mean_rho], axis=1).reshape(P, H, W, 4)
    cyl = np.concatenate([hist, extra], axis=3)
    vec = cyl.mean(axis=(1, 2))
    vec[:, :C] = np.sqrt(vec[:, :C])
    vec[:, C:] *= SUMMARY_WEIGHT
    norms = np.linalg.norm(vec, axis=1, keepdims=True)
    vec = np.divide(vec, norms, out=np.zeros_like(vec), where=norms > 0)
    return cyl, vec


class HandcraftedBackend:
    """Built-in descriptor computed directly from the patch geometry."""

    def __init__(self, shape: DescriptorShape = DescriptorShape()):
        self.shape = shape

    def describe_batch(self, patches: list[Patch], cloud_id: str = ""):
        return describe_points([p.points for p in patches], self.shape)


def cloud_id_hash(cloud_id: str) -> bytes:
    """8-byte key identifying a cloud in descriptor files."""
    return hashlib.sha256(cloud_id.encode("utf-8")).digest()[:8]


def _record_struct(shape: DescriptorShape) -> struct.Struct:
    n = shape.H * shape.W * shape.D + shape.D
    return struct.Struct(f"<8sBI{n}f")


def write_descriptor_records(path, records, shape: DescriptorShape = DescriptorShape()) -> None:
    """Write ``(cloud_id, scale, keypoint_index, cyl, vec)`` tuples in the external backend format."""
    rec = _record_struct(shape)
    with open(path, "wb") as fh:
        for cloud_id, scale, kp, cyl, vec in records:
            cyl = np.asarray(cyl, dtype="<f4").reshape(shape.H, shape.W, shape.D)
            vec = np.asarray(vec, dtype="<f4").reshape(shape.D)
            fh.write(rec.pack(cloud_id_hash(cloud_id), SCALE_CODES[scale], int(kp), *cyl.ravel(), *vec))


def read_descriptor_records(path, shape: DescriptorShape = DescriptorShape()) -> dict:
    """Load an external descriptor file into ``{(hash, scale_code, index): (cyl, vec)}``."""
    data = Path(path).read_bytes()
    header = struct.Struct("<8sBI")
    n_floats = shape.H * shape.W * shape.D + shape.D
    size = header.size + 4 * n_floats
    if len(data) % size:
        raise ParseError(
            f"{path}: truncated record at byte offset {len(data) - len(data) % size}"
        )
    out = {}
    for off in range(0, len(data), size):
        key_hash, scale, kp = header.unpack_from(data, off)
        if scale not in SCALE_CODES.values():
            raise ParseError(f"{path}: invalid scale byte {scale} at byte offset {off + 8}")
        floats = np.frombuffer(data, dtype="<f4", count=n_floats, offset=off + header.size)
        if not np.all(np.isfinite(floats)):
            raise ParseError(f"{path}: non-finite descriptor value in record at byte offset {off}")
        cyl = floats[: n_floats - shape.D].astype(np.float64).reshape(shape.H, shape.W, shape.D)
        vec = floats[n_floats - shape.D :].astype(np.float64)
        out[(key_hash, scale, kp)] = (cyl, vec)
    return out


class ExternalBackend:
    """Precomputed descriptors loaded from one or more record files."""

    def __init__(self, paths, shape: DescriptorShape = DescriptorShape()):
        self.shape = shape
        if isinstance(paths, (str, Path)):
            paths = [paths]
        self.table = {}
        for p in paths:
            self.table.update(read_descriptor_records(p, shape))

    def describe_batch(self, patches: list[Patch], cloud_id: str = ""):
        key_hash = cloud_id_hash(cloud_id)
        cyl = np.zeros((len(patches), self.shape.H, self.shape.W, self.shape.D))
        vec = np.zeros((len(patches), self.shape.D))
        for i, patch in enumerate(patches):
            key = (key_hash, SCALE_CODES[patch.scale], patch.keypoint_index)
            if key not in self.table:
                raise ParseError(
                    f"no external descriptor for {cloud_id!r} {patch.scale} keypoint {patch.keypoint_index}"
                )
            cyl[i], vec[i] = self.table[key]
        return cyl, vec


def describe(patch: Patch, backend=None, cloud_id: str = "") -> PatchDescriptor:
    backend = backend or HandcraftedBackend()
    cyl, vec = backend.describe_batch([patch], cloud_id)
    return PatchDescriptor(cyl[0], vec[0], patch.keypoint_index)


# ---------------------------------------------------------------------------
# per-cloud embedding


@dataclass(eq=False)
class ScaleEmbedding:
    scale: str
    radius: float
    keypoints: np.ndarray  # (K, 3) keypoint coordinates
    point_indices: np.ndarray  # index of each keypoint in the cloud
    patches: list
    cyl: np.ndarray
    vec: np.ndarray
    n_dropped: int

    def __len__(self) -> int:
        return self.keypoints.shape[0]


def _child_seeds(seq: np.random.SeedSequence, n: int) -> list:
    # like spawn() but without advancing the caller's sequence, so reuse is pure
    return [np.random.SeedSequence(seq.entropy, spawn_key=seq.spawn_key + (i,), pool_size=seq.pool_size) for i in range(n)]


def embed_scale(
    cloud: PointCloud,
    index: SpatialIndex,
    radius: float,
    scale: str,
    n_fps: int,
    n_patch: int,
    backend,
    seed_seq: np.random.SeedSequence,
    cloud_id: str = "",
) -> ScaleEmbedding:
    fps_seed, patch_seed = _child_seeds(seed_seq, 2)
    start = int(np.random.default_rng(fps_seed).integers(len(cloud)))
    fps = farthest_point_sampling(cloud, n_fps, start=start)
    centers = cloud.points[fps]
    neighbor_lists = index.radius_batch(centers, radius)
    keep = [i for i, nb in enumerate(neighbor_lists) if nb.shape[0] >= MIN_PATCH_POINTS]
    base = patch_seed.generate_state(1)[0]
    picked = _gather(cloud.points, [neighbor_lists[i] for i in keep], n_patch, [(base, int(i)) for i in keep])
    n_dropped = len(neighbor_lists) - len(keep)
    patches = []
    if keep:
        patches = _build_patches(cloud.points, centers[keep], picked, radius, scale, keep)
    shape = backend.shape
    if patches:
        cyl, vec = backend.describe_batch(patches, cloud_id)
    else:
        cyl, vec = np.zeros((0, shape.H, shape.W, shape.D)), np.zeros((0, shape.D))
    if n_dropped:
        log.debug("%s scale: dropped %d sparse keypoints", scale, n_dropped)
    return ScaleEmbedding(scale, float(radius), centers[keep], fps[keep], patches, cyl, vec, n_dropped)


def embed_cloud(
    cloud: PointCloud,
    radii,
    n_fps: int = 1500,
    backend=None,
    rng_seed=0,
    n_patch: int = 512,
    scales=("local", "middle", "global"),
    cloud_id: str = "",
    index: SpatialIndex | None = None,
) -> list[ScaleEmbedding]:
    """Independent farthest point sampling, patches and descriptors at each scale.

    ``radii`` pairs with ``scales``. Sparse keypoints are dropped. A scale with
    no surviving keypoint is omitted from the result; if every scale is empty
    :class:`ScaleEmptyError` is raised.
    """
    backend = backend or HandcraftedBackend()
    index = index or SpatialIndex.build(cloud)
    if len(radii) != len(scales):
        raise ParameterError("need one radius per scale")
    seed_seq = rng_seed if isinstance(rng_seed, np.random.SeedSequence) else np.random.SeedSequence(rng_seed)
    out = []
    for scale, r, child in zip(scales, radii, _child_seeds(seed_seq, len(scales))):
        emb = embed_scale(cloud, index, r, scale, n_fps, n_patch, backend, child, cloud_id)
        if len(emb) == 0:
            log.warning("%s scale has no usable keypoints", scale)
            continue
        out.append(emb)
    if not out:
        raise ScaleEmptyError("every scale is empty")
    return out
