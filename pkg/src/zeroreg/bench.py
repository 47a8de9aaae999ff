"""Evaluation harness: pose error metrics, success criteria, summaries and synthetic scenes."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from .bootstrap import BootstrapConfig, compute_voxel_size
from .cloud import PointCloud
from .errors import ParameterError
from .so3 import is_rotation


@dataclass(frozen=True, eq=False)
class GroundTruthPose:
    """Transform taking source coordinates into the target frame: ``q = R p + t``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64)
        if not is_rotation(R, 1e-6):
            raise ParameterError("ground-truth rotation is not in SO(3)")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T


@dataclass(frozen=True)
class SuccessCriteria:
    tau_trans: float  # meters
    tau_rot: float  # degrees

    def __post_init__(self):
        if not (self.tau_trans > 0 and self.tau_rot > 0):
            raise ParameterError("success thresholds must be positive")


CRITERIA_PRESETS = {
    "scannetpp_i": SuccessCriteria(0.3, 15.0),
    "scannetpp_f": SuccessCriteria(0.3, 15.0),
    "tiers": SuccessCriteria(2.0, 5.0),
    "wod": SuccessCriteria(2.0, 5.0),
    "kitti": SuccessCriteria(2.0, 5.0),
    "eth": SuccessCriteria(0.3, 2.0),
    "kaist": SuccessCriteria(2.0, 5.0),
    "mit": SuccessCriteria(2.0, 5.0),
    "oxford": SuccessCriteria(2.0, 5.0),
}
DEFAULT_CRITERIA = SuccessCriteria(2.0, 5.0)


def criteria_for(name: str) -> SuccessCriteria:
    """Named preset, ``"<meters>,<degrees>"``, or the default for unknown names."""
    key = name.strip().lower().replace("+", "p").replace("-", "_")
    if key in CRITERIA_PRESETS:
        return CRITERIA_PRESETS[key]
    if "," in name:
        try:
            t, r = (float(x) for x in name.split(","))
        except ValueError as exc:
            raise ParameterError(f"bad criteria {name!r}") from exc
        return SuccessCriteria(t, r)
    return DEFAULT_CRITERIA


def rotation_error(r_hat, r_gt) -> float:
    """Angle in degrees of ``r_hat^T r_gt``."""
    c = (np.trace(np.asarray(r_hat).T @ np.asarray(r_gt)) - 1.0) / 2.0
    return float(np.degrees(abs(math.acos(min(1.0, max(-1.0, c))))))


def translation_error(t_hat, t_gt, squared: bool = False) -> float:
    """Translation error in centimeters (``squared`` gives cm^2 of the squared difference)."""
    diff = (np.asarray(t_gt, dtype=np.float64) - np.asarray(t_hat, dtype=np.float64)) * 100.0
    sq = float(np.dot(diff, diff))
    return sq if squared else math.sqrt(sq)


@dataclass
class PairRecord:
    rte_cm: float
    rre_deg: float
    success: bool
    name: str = ""
    status: str = "ok"
    time_ms: float = 0.0


def evaluate_pair(rotation, translation, gt: GroundTruthPose, crit: SuccessCriteria, name: str = "") -> PairRecord:
    """Success iff both errors are within the thresholds (inclusive)."""
    rre = rotation_error(rotation, gt.rotation)
    rte_m = float(np.linalg.norm(gt.translation - np.asarray(translation, dtype=np.float64)))
    ok = rte_m <= crit.tau_trans and rre <= crit.tau_rot
    return PairRecord(rte_m * 100.0, rre, bool(ok), name)


@dataclass
class BenchmarkSummary:
    n_pairs: int
    n_success: int
    success_rate: float
    mean_rte_cm: float
    mean_rre_deg: float
    records: list = field(default_factory=list)

    @classmethod
    def from_records(cls, records: list[PairRecord]) -> "BenchmarkSummary":
        n = len(records)
        ok = [r for r in records if r.success]
        rte = float(np.mean([r.rte_cm for r in ok])) if ok else float("nan")
        rre = float(np.mean([r.rre_deg for r in ok])) if ok else float("nan")
        rate = 100.0 * len(ok) / n if n else 0.0
        return cls(n, len(ok), rate, rte, rre, list(records))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schema"] = 1
        return d

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    def write_csv(self, path) -> None:
        write_records_csv(path, self.records)


def write_records_csv(path, records: list[PairRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["name", "status", "success", "rte_cm", "rre_deg", "time_ms"])
        for r in records:
            w.writerow([r.name, r.status, int(r.success), f"{r.rte_cm:.6f}", f"{r.rre_deg:.6f}", f"{r.time_ms:.3f}"])


def write_sweep_csv(path, rows: list[dict]) -> None:
    """Plot-ready CSV of parameter-sweep rows (all rows share the keys of the first)."""
    if not rows:
        open(path, "w").close()
        return
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def make_pairs_by_distance(positions, tau_dist: float = 10.0) -> list[tuple[int, int]]:
    """Greedy frame pairs whose displacement reaches ``tau_dist``.

    ``positions`` holds translations ``(N, 3)`` or poses with a ``translation``
    attribute. From frame ``i`` the pair ends at the first later frame ``j`` at
    least ``tau_dist`` away; the walk then continues from ``j``.
    """
    pos = np.array([getattr(p, "translation", p) for p in positions], dtype=np.float64).reshape(-1, 3)
    if pos.shape[0] < 2:
        raise ParameterError("need at least two poses")
    pairs = []
    i = 0
    while i < pos.shape[0] - 1:
        d = np.linalg.norm(pos[i + 1 :] - pos[i], axis=1)
        hit = np.flatnonzero(d >= tau_dist)
        if hit.size == 0:
            break
        j = i + 1 + int(hit[0])
        pairs.append((i, j))
        i = j
    return pairs


# ---------------------------------------------------------------------------
# synthetic scenes


@dataclass(frozen=True)
class SynthParams:
    overlap: float = 0.6
    noise_factor: float = 0.5  # noise sigma as a multiple of the bootstrap voxel size
    noise_sigma: float | None = None  # absolute override in meters
    density: float | None = None  # surface points per m^2
    n_objects: int | None = None
    max_rotation_deg: float = 180.0
    max_translation: float | None = None  # meters

    def __post_init__(self):
        if not 0 < self.overlap <= 1:
            raise ParameterError("overlap must lie in (0, 1]")
        if self.noise_factor < 0 or (self.noise_sigma is not None and self.noise_sigma < 0):
            raise ParameterError("noise must be non-negative")
        if self.density is not None and not self.density > 0:
            raise ParameterError("density must be positive")
        if not 0 <= self.max_rotation_deg <= 180:
            raise ParameterError("max_rotation_deg must lie in [0, 180]")


def _rect(rng, origin, u, v, density):
    # uniform samples on the parallelogram origin + a u + b v
    area = np.linalg.norm(np.cross(u, v))
    n = max(1, int(rng.poisson(area * density)))
    ab = rng.random((n, 2))
    return origin + ab[:, :1] * u + ab[:, 1:] * v


def _box(rng, lo, hi, density, bottom=True):
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    dx, dy, dz = np.diag(hi - lo)
    faces = [
        (lo, dx, dy), (lo + dz, dx, dy),
        (lo, dx, dz), (lo + dy, dx, dz),
        (lo, dy, dz), (lo + dx, dy, dz),
    ]
    if not bottom:
        faces = faces[1:]
    return np.vstack([_rect(rng, o, u, v, density) for o, u, v in faces])


def _cylinder(rng, base, radius, height, density):
    n = max(1, int(rng.poisson(2 * np.pi * radius * height * density)))
    a = rng.uniform(0, 2 * np.pi, n)
    z = rng.uniform(0, height, n)
    return np.asarray(base) + np.column_stack([radius * np.cos(a), radius * np.sin(a), z])


def _sphere(rng, center, radius, density):
    n = max(1, int(rng.poisson(4 * np.pi * radius**2 * density)))
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return np.asarray(center) + radius * d


def _indoor_room(rng, density, n_objects):
    L, Wd, Hh = rng.uniform(7.0, 9.0), rng.uniform(5.0, 7.0), rng.uniform(2.6, 3.2)
    parts = [_box(rng, (0, 0, 0), (L, Wd, Hh), density)]
    for _ in range(n_objects):
        kind = rng.integers(3)
        sx, sy = rng.uniform(0.3, 1.5, 2)
        cx, cy = rng.uniform(0.2 + sx / 2, L - 0.2 - sx / 2), rng.uniform(0.2 + sy / 2, Wd - 0.2 - sy / 2)
        if kind == 0:
            hz = rng.uniform(0.4, 2.0)
            parts.append(_box(rng, (cx - sx / 2, cy - sy / 2, 0), (cx + sx / 2, cy + sy / 2, hz), density, bottom=False))
        elif kind == 1:
            rad = rng.uniform(0.15, 0.5)
            parts.append(_cylinder(rng, (cx, cy, 0), rad, rng.uniform(0.5, 2.2), density))
        else:
            rad = rng.uniform(0.2, 0.6)
            parts.append(_sphere(rng, (cx, cy, rng.uniform(rad, 2.0)), rad, density))
    # coordinates centered on the room, like a scanner standing in its middle
    return np.vstack(parts) - np.array([L / 2, Wd / 2, Hh / 2])


def _lidar_sweep(rng, density, n_objects):
    sensor_h = 1.8
    parts = []
    # ground returns on concentric rings, spaced like downward beams
    elev = np.deg2rad(np.linspace(-30.0, -2.6, 24))
    ring_r = sensor_h / np.tan(-elev)
    ring_r = ring_r[ring_r <= 45.0]
    for r in ring_r:
        n = int(2 * np.pi * r * density * 0.25)
        n = min(max(n, 200), 1800)
        a = rng.uniform(0, 2 * np.pi, n)
        parts.append(np.column_stack([r * np.cos(a), r * np.sin(a), np.zeros(n)]))
    for _ in range(n_objects):
        kind = rng.integers(4)
        rad = rng.uniform(6.0, 38.0)
        ang = rng.uniform(0, 2 * np.pi)
        c = np.array([rad * np.cos(ang), rad * np.sin(ang), 0.0])
        if kind == 0:
            # building facade segment
            length, height, depth = rng.uniform(6, 18), rng.uniform(3, 6), rng.uniform(3, 8)
            lo = c - np.array([length / 2, depth / 2, 0])
            hi = c + np.array([length / 2, depth / 2, height])
            pts = _box(rng, lo, hi, density * 0.5, bottom=False)
        elif kind == 1:
            pts = _cylinder(rng, c, rng.uniform(0.1, 0.3), rng.uniform(3.0, 6.0), density)
        elif kind == 2:
            lo = c - np.array([2.2, 0.9, 0])
            pts = _box(rng, lo, lo + np.array([4.5, 1.8, 1.5]), density, bottom=False)
        else:
            trunk = _cylinder(rng, c, 0.2, 2.5, density)
            crown = _sphere(rng, c + np.array([0, 0, 3.5]), rng.uniform(1.0, 2.0), density * 0.5)
            pts = np.vstack([trunk, crown])
        # random heading
        th = rng.uniform(0, 2 * np.pi)
        Rz = np.array([[np.cos(th), -np.sin(th), 0], [np.sin(th), np.cos(th), 0], [0, 0, 1]])
        parts.append((pts - c) @ Rz.T + c)
    return np.vstack(parts)


_SCENE_DEFAULTS = {
    # kind: (density, n_objects, max_translation)
    "indoor_room": (150.0, 12, 2.0),
    "lidar_sweep": (40.0, 30, 10.0),
}


def synth_scene(kind: str, params: SynthParams = SynthParams(), rng_seed=0):
    """Two overlapping noisy crops of a synthetic scene and the transform between them.

    ``indoor_room`` is a closed room with random furniture-like clutter
    (high sphericity); ``lidar_sweep`` is ground rings around a sensor plus
    buildings, poles, cars and trees (disc-like). The scene is split along x
    into two windows sharing ``overlap`` of their length. The second window
    is moved by a random rigid transform ``(R, t)`` so that ``q = R p + t``.

    Returns ``(source, target, GroundTruthPose)``.
    """
    if kind not in _SCENE_DEFAULTS:
        raise ParameterError(f"unknown scene kind {kind!r}")
    density, n_objects, max_t = _SCENE_DEFAULTS[kind]
    density = params.density or density
    n_objects = n_objects if params.n_objects is None else params.n_objects
    max_t = max_t if params.max_translation is None else params.max_translation

    rng = np.random.default_rng(rng_seed)
    scene = _indoor_room(rng, density, n_objects) if kind == "indoor_room" else _lidar_sweep(rng, density, n_objects)

    x = scene[:, 0]
    x0, x1 = x.min(), x.max()
    width = (x1 - x0) / (2.0 - params.overlap)
    if params.overlap >= 1.0:
        # both windows span the scene; avoids dropping endpoints to rounding
        src, tgt = scene, scene.copy()
    else:
        src = scene[x <= x0 + width]
        tgt = scene[x >= x1 - width]

    if params.max_rotation_deg >= 180.0:
        R = Rotation.random(random_state=rng).as_matrix()
    elif params.max_rotation_deg > 0:
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        R = Rotation.from_rotvec(axis * np.deg2rad(rng.uniform(0, params.max_rotation_deg))).as_matrix()
    else:
        R = np.eye(3)
    t = np.zeros(3)
    if max_t > 0:
        d = rng.normal(size=3)
        t = d / np.linalg.norm(d) * max_t * rng.random() ** (1.0 / 3.0)

    sigma = params.noise_sigma
    if sigma is None:
        sigma = 0.0
        if params.noise_factor > 0:
            v, *_ = compute_voxel_size(PointCloud(src), BootstrapConfig(), rng_seed=0)
            sigma = params.noise_factor * v
    if sigma > 0:
        src = src + rng.normal(scale=sigma, size=src.shape)
        tgt = tgt + rng.normal(scale=sigma, size=tgt.shape)
    tgt = tgt @ R.T + t
    return PointCloud(src), PointCloud(tgt), GroundTruthPose(R, t)
