"""Point cloud and pose file formats.

Clouds: ``ply_ascii``, ``ply_binary_le``, ``kitti_bin`` (packed little-endian
float32 x, y, z, intensity) and ``xyz_text``. Poses: ``kitti_odometry``
(row-major 3x4 per line) and ``tum`` (timestamp tx ty tz qx qy qz qw).
Every parser rejects truncated or non-finite input with a :class:`ParseError`
naming the byte offset or line number.
"""

from __future__ import annotations

import logging
import math
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from .bench import GroundTruthPose
from .cloud import PointCloud
from .errors import ParameterError, ParseError
from .so3 import project_to_so3

log = logging.getLogger(__name__)

CLOUD_FORMATS = ("ply_ascii", "ply_binary_le", "kitti_bin", "xyz_text")
POSE_FORMATS = ("kitti_odometry", "tum")
ORTHONORMAL_TOL = 1e-3

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def guess_cloud_format(path) -> str:
    suffix = Path(path).suffix.lower()
    if suffix == ".bin":
        return "kitti_bin"
    if suffix in (".xyz", ".txt"):
        return "xyz_text"
    if suffix == ".ply":
        with open(path, "rb") as fh:
            head = fh.read(512)
        return "ply_binary_le" if b"binary_little_endian" in head else "ply_ascii"
    raise ParameterError(f"cannot infer the cloud format of {path}")


def _check_finite(arr: np.ndarray, where) -> None:
    bad = ~np.isfinite(arr)
    if bad.any():
        row = int(np.flatnonzero(bad.any(axis=1) if arr.ndim > 1 else bad)[0])
        raise ParseError(f"non-finite value in record {row} ({where(row)})")


# ---------------------------------------------------------------------------
# PLY


def _read_ply_header(data: bytes):
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise ParseError("byte 0: not a PLY file (missing 'ply' magic or 'end_header')")
    nl = data.find(b"\n", end)
    body_start = len(data) if nl < 0 else nl + 1
    fmt, n_vertex, props = None, None, []
    current = None
    offset = 0
    for raw in data[:end].split(b"\n"):
        line = raw.decode("ascii", errors="replace").strip()
        tok = line.split()
        if tok and tok[0] == "format":
            fmt = tok[1] if len(tok) > 1 else ""
        elif tok and tok[0] == "element":
            if len(tok) != 3:
                raise ParseError(f"byte {offset}: malformed element line {line!r}")
            current = tok[1]
            if current == "vertex":
                try:
                    n_vertex = int(tok[2])
                except ValueError:
                    raise ParseError(f"byte {offset}: bad vertex count {tok[2]!r}") from None
            elif n_vertex is None:
                raise ParseError(f"byte {offset}: elements before 'vertex' are not supported")
        elif tok and tok[0] == "property" and current == "vertex":
            if len(tok) != 3 or tok[1] not in _PLY_TYPES:
                raise ParseError(f"byte {offset}: unsupported vertex property {line!r}")
            props.append((tok[2], _PLY_TYPES[tok[1]]))
        offset += len(raw) + 1
    if fmt not in ("ascii", "binary_little_endian"):
        raise ParseError(f"byte 0: unsupported PLY format {fmt!r}")
    if n_vertex is None:
        raise ParseError("byte 0: PLY header has no vertex element")
    names = [p[0] for p in props]
    for axis in "xyz":
        if axis not in names:
            raise ParseError(f"byte 0: PLY vertex element lacks property {axis!r}")
    return fmt, n_vertex, props, body_start


def _load_ply(path, expect: str | None) -> PointCloud:
    data = Path(path).read_bytes()
    fmt, n, props, start = _read_ply_header(data)
    kind = "ply_ascii" if fmt == "ascii" else "ply_binary_le"
    if expect is not None and kind != expect:
        raise ParseError(f"byte 0: expected {expect} but the header says {fmt}")
    names = [p[0] for p in props]
    if kind == "ply_binary_le":
        dtype = np.dtype([(name, "<" + t) for name, t in props])
        need = n * dtype.itemsize
        if len(data) - start < need:
            rec = (len(data) - start) // dtype.itemsize
            raise ParseError(f"byte {start + rec * dtype.itemsize}: truncated vertex record {rec} of {n}")
        rec = np.frombuffer(data, dtype=dtype, count=n, offset=start)
        pts = np.column_stack([rec[a].astype(np.float64) for a in "xyz"])
        inten = rec["intensity"].astype(np.float64) if "intensity" in names else None
        where = lambda i: f"byte {start + i * dtype.itemsize}"  # noqa: E731
    else:
        lines = data[start:].decode("ascii", errors="replace").splitlines()
        header_lines = data[:start].count(b"\n")
        rows = []
        for i in range(n):
            if i >= len(lines):
                raise ParseError(f"line {header_lines + i + 1}: truncated, expected {n} vertices")
            tok = lines[i].split()
            if len(tok) < len(props):
                raise ParseError(f"line {header_lines + i + 1}: expected {len(props)} values, got {len(tok)}")
            try:
                rows.append([float(x) for x in tok[: len(props)]])
            except ValueError as exc:
                raise ParseError(f"line {header_lines + i + 1}: {exc}") from None
        table = np.array(rows, dtype=np.float64).reshape(n, len(props))
        pts = table[:, [names.index(a) for a in "xyz"]]
        inten = table[:, names.index("intensity")] if "intensity" in names else None
        where = lambda i: f"line {header_lines + i + 1}"  # noqa: E731
    _check_finite(pts, where)
    if inten is not None:
        _check_finite(inten, where)
    return PointCloud(pts, inten)


def _write_ply(path, cloud: PointCloud, binary: bool) -> None:
    props = ["x", "y", "z"] + (["intensity"] if cloud.intensity is not None else [])
    head = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0", f"element vertex {len(cloud)}"]
    head += [f"property {'float' if binary else 'double'} {p}" for p in props]
    head.append("end_header")
    cols = [cloud.points] + ([cloud.intensity[:, None]] if cloud.intensity is not None else [])
    table = np.hstack(cols) if cols else np.zeros((0, 3))
    with open(path, "wb") as fh:
        fh.write(("\n".join(head) + "\n").encode("ascii"))
        if binary:
            fh.write(table.astype("<f4").tobytes())
        else:
            for row in table:
                fh.write((" ".join(repr(float(x)) for x in row) + "\n").encode("ascii"))


# ---------------------------------------------------------------------------
# KITTI .bin and plain text


def _load_kitti_bin(path) -> PointCloud:
    data = Path(path).read_bytes()
    if len(data) % 16:
        good = len(data) // 16 * 16
        raise ParseError(f"byte {good}: truncated record ({len(data) - good} of 16 bytes)")
    rec = np.frombuffer(data, dtype="<f4").reshape(-1, 4).astype(np.float64)
    _check_finite(rec, lambda i: f"byte {16 * i}")
    return PointCloud(rec[:, :3], rec[:, 3])


def _write_kitti_bin(path, cloud: PointCloud) -> None:
    inten = cloud.intensity if cloud.intensity is not None else np.zeros(len(cloud))
    Path(path).write_bytes(np.column_stack([cloud.points, inten]).astype("<f4").tobytes())


def _load_xyz(path) -> PointCloud:
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            tok = line.split()
            if not tok or tok[0].startswith("#"):
                continue
            if len(tok) < 3:
                raise ParseError(f"line {lineno}: expected 3 values, got {len(tok)}")
            try:
                xyz = [float(x) for x in tok[:3]]
            except ValueError as exc:
                raise ParseError(f"line {lineno}: {exc}") from None
            if not all(math.isfinite(x) for x in xyz):
                raise ParseError(f"line {lineno}: non-finite coordinate")
            rows.append(xyz)
    return PointCloud(np.array(rows, dtype=np.float64).reshape(-1, 3))


def _write_xyz(path, cloud: PointCloud) -> None:
    with open(path, "w") as fh:
        for row in cloud.points.tolist():
            fh.write(" ".join(repr(x) for x in row) + "\n")


def load_cloud(path, format: str | None = None) -> PointCloud:
    """Read a point cloud; ``format`` is inferred from the extension when omitted."""
    fmt = format or guess_cloud_format(path)
    if fmt in ("ply_ascii", "ply_binary_le"):
        return _load_ply(path, fmt)
    if fmt == "kitti_bin":
        return _load_kitti_bin(path)
    if fmt == "xyz_text":
        return _load_xyz(path)
    raise ParameterError(f"unknown cloud format {fmt!r}; choose from {CLOUD_FORMATS}")


def write_cloud(path, cloud: PointCloud, format: str | None = None) -> None:
    fmt = format
    if fmt is None:
        suffix = Path(path).suffix.lower()
        fmt = {".bin": "kitti_bin", ".xyz": "xyz_text", ".txt": "xyz_text", ".ply": "ply_binary_le"}.get(suffix)
    if fmt == "ply_ascii":
        _write_ply(path, cloud, binary=False)
    elif fmt == "ply_binary_le":
        _write_ply(path, cloud, binary=True)
    elif fmt == "kitti_bin":
        _write_kitti_bin(path, cloud)
    elif fmt == "xyz_text":
        _write_xyz(path, cloud)
    else:
        raise ParameterError(f"unknown cloud format {fmt!r}; choose from {CLOUD_FORMATS}")


# ---------------------------------------------------------------------------
# poses


def _checked_rotation(R: np.ndarray, lineno: int) -> np.ndarray:
    err = np.abs(R.T @ R - np.eye(3)).max()
    if err > ORTHONORMAL_TOL or np.linalg.det(R) <= 0:
        log.warning("line %d: rotation is off SO(3) by %.2e; re-orthonormalizing", lineno, err)
    return project_to_so3(R)


def load_poses(path, format: str = "kitti_odometry") -> list[GroundTruthPose]:
    """Read a trajectory. Rotations off SO(3) are projected back with a warning."""
    if format not in POSE_FORMATS:
        raise ParameterError(f"unknown pose format {format!r}; choose from {POSE_FORMATS}")
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            tok = line.split()
            if not tok or tok[0].startswith("#"):
                continue
            want = 12 if format == "kitti_odometry" else 8
            if len(tok) != want:
                raise ParseError(f"line {lineno}: expected {want} values, got {len(tok)}")
            try:
                vals = np.array([float(x) for x in tok])
            except ValueError as exc:
                raise ParseError(f"line {lineno}: {exc}") from None
            if not np.all(np.isfinite(vals)):
                raise ParseError(f"line {lineno}: non-finite value")
            if format == "kitti_odometry":
                M = vals.reshape(3, 4)
                R, t = _checked_rotation(M[:, :3], lineno), M[:, 3]
            else:
                quat = vals[4:8]
                norm = np.linalg.norm(quat)
                if norm < 1e-12:
                    raise ParseError(f"line {lineno}: zero quaternion")
                R, t = Rotation.from_quat(quat / norm).as_matrix(), vals[1:4]
            out.append(GroundTruthPose(R, t))
    return out


def write_poses(path, poses, format: str = "kitti_odometry", timestamps=None) -> None:
    if format not in POSE_FORMATS:
        raise ParameterError(f"unknown pose format {format!r}; choose from {POSE_FORMATS}")
    with open(path, "w") as fh:
        for i, pose in enumerate(poses):
            R, t = np.asarray(pose.rotation), np.asarray(pose.translation)
            if format == "kitti_odometry":
                vals = np.hstack([R, t[:, None]]).ravel()
                fh.write(" ".join(repr(float(x)) for x in vals) + "\n")
            else:
                ts = float(timestamps[i]) if timestamps is not None else float(i)
                q = Rotation.from_matrix(R).as_quat()
                fh.write(" ".join(repr(float(x)) for x in [ts, *t, *q]) + "\n")


def relative_pose(poses, src_idx: int, tgt_idx: int) -> GroundTruthPose:
    """Transform taking frame ``src_idx`` into frame ``tgt_idx`` given sensor-to-world poses."""
    n = len(poses)
    for i in (src_idx, tgt_idx):
        if not 0 <= i < n:
            raise ParameterError(f"pose index {i} out of range for {n} poses")
    a, b = poses[src_idx], poses[tgt_idx]
    R = b.rotation.T @ a.rotation
    t = b.rotation.T @ (a.translation - b.translation)
    return GroundTruthPose(project_to_so3(R), t)
