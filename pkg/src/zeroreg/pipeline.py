"""End-to-end registration: bootstrap, multi-scale embedding, hierarchical inlier search, RANSAC."""

from __future__ import annotations

import logging
import os
import time
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .bench import (
    CRITERIA_PRESETS,
    DEFAULT_CRITERIA,
    BenchmarkSummary,
    GroundTruthPose,
    PairRecord,
    SuccessCriteria,
    SynthParams,
    evaluate_pair,
    synth_scene,
)
from .bootstrap import compute_voxel_size, estimate_radii, select_larger
from .cloud import PointCloud, SpatialIndex, voxel_downsample
from .consensus import CandidateSet, consensus_maximize, default_epsilon
from .errors import (
    DegenerateGeometryError,
    EmptyInputError,
    InsufficientConsensusError,
    InsufficientDataError,
    RegistrationError,
    ScaleEmptyError,
)
from .matching import mutual_match, pair_transforms_batch
from .patch import HandcraftedBackend, embed_cloud
from .config import PipelineConfig
from .solver import Pose, RobustKernel, irls_refine, ransac

log = logging.getLogger(__name__)

THREADS_ENV = "ZEROREG_THREADS"

SYNTH_CRITERIA = {
    "indoor_room": CRITERIA_PRESETS["scannetpp_i"],
    "lidar_sweep": CRITERIA_PRESETS["kitti"],
}


@dataclass
class RegistrationReport:
    status: str = "ok"
    pose: Pose = field(default_factory=Pose)
    voxel_size: float = float("nan")
    radii: dict = field(default_factory=dict)
    sphericity: float = float("nan")
    spread: float = float("nan")
    branch: str = ""
    epsilon: float = float("nan")
    n_points: dict = field(default_factory=dict)
    n_keypoints: dict = field(default_factory=dict)
    n_matches: dict = field(default_factory=dict)
    n_candidates: int = 0
    consensus_inliers: int = 0
    ransac_inliers: int = 0
    ransac_iterations: int = 0
    degraded: list = field(default_factory=list)
    message: str = ""
    timing_ms: dict = field(default_factory=dict)
    rte_cm: float | None = None
    rre_deg: float | None = None
    success: bool | None = None

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    def to_dict(self) -> dict:
        R, t = self.pose.rotation, self.pose.translation
        d = {
            "schema": 1,
            "version": __version__,
            "status": self.status,
            "pose": np.hstack([R, t[:, None]]).tolist(),
            "bootstrap": {
                "voxel_size": self.voxel_size,
                "radii": self.radii,
                "sphericity": self.sphericity,
                "spread": self.spread,
                "branch": self.branch,
            },
            "epsilon": self.epsilon,
            "n_points": self.n_points,
            "n_keypoints": self.n_keypoints,
            "n_matches": self.n_matches,
            "n_candidates": self.n_candidates,
            "inliers": {"consensus": self.consensus_inliers, "ransac": self.ransac_inliers},
            "ransac_iterations": self.ransac_iterations,
            "degraded": list(self.degraded),
            "message": self.message,
            "timing_ms": self.timing_ms,
        }
        if self.success is not None:
            d["evaluation"] = {"rte_cm": self.rte_cm, "rre_deg": self.rre_deg, "success": self.success}
        return d


class _Timer:
    def __init__(self):
        self.stages = {}
        self._t0 = time.perf_counter()

    @contextmanager
    def stage(self, name):
        t = time.perf_counter()
        try:
            yield
        finally:
            self.stages[name] = self.stages.get(name, 0.0) + 1e3 * (time.perf_counter() - t)

    def finish(self) -> dict:
        out = dict(self.stages)
        out["total"] = 1e3 * (time.perf_counter() - self._t0)
        return out


@contextmanager
def _thread_limit():
    n = os.environ.get(THREADS_ENV)
    if not n:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=int(n)):
        yield


def _candidates_for_scale(emb_p, emb_q, temperature):
    matches = mutual_match(emb_p.vec, emb_q.vec, emb_p.scale)
    if matches.count == 0:
        return matches, None
    i, j = matches.pairs[:, 0], matches.pairs[:, 1]
    rot_p = np.stack([emb_p.patches[k].rotation for k in i])
    rot_q = np.stack([emb_q.patches[k].rotation for k in j])
    R, t, _ = pair_transforms_batch(
        rot_p, emb_p.keypoints[i], emb_p.cyl[i], rot_q, emb_q.keypoints[j], emb_q.cyl[j], temperature
    )
    cands = CandidateSet(R, t, emb_p.keypoints[i], emb_q.keypoints[j], np.array([emb_p.scale] * matches.count, dtype=object))
    return matches, cands


def register(
    p: PointCloud,
    q: PointCloud,
    cfg: PipelineConfig = PipelineConfig(),
    backend=None,
    gt: GroundTruthPose | None = None,
    criteria: SuccessCriteria | None = None,
    cloud_ids: tuple[str, str] = ("source", "target"),
) -> RegistrationReport:
    """Estimate the pose taking ``p`` onto ``q``.

    Errors do not propagate: they end the run with a distinct ``status``
    (``degenerate_geometry``, ``scale_empty``, ``insufficient_data``,
    ``empty_input`` ...). A consensus that is too small is not fatal; RANSAC
    then runs on every pooled pair and ``degraded`` records it.
    """
    with _thread_limit():
        report = RegistrationReport()
        timer = _Timer()
        try:
            _run(p, q, cfg, backend or HandcraftedBackend(cfg.shape), report, timer, cloud_ids)
        except RegistrationError as exc:
            report.status = exc.status
            report.message = str(exc)
            log.warning("registration failed: %s", exc)
        report.timing_ms = timer.finish()
    if gt is not None:
        rec = evaluate_pair(report.pose.rotation, report.pose.translation, gt, criteria or DEFAULT_CRITERIA)
        report.rte_cm, report.rre_deg, report.success = rec.rte_cm, rec.rre_deg, rec.success and report.ok
    return report


@dataclass(eq=False)
class PairBootstrap:
    voxel_size: float
    sphericity: float
    spread: float
    branch: str
    radii: tuple
    source: PointCloud  # voxelized
    target: PointCloud


def bootstrap_pair(p: PointCloud, q: PointCloud, cfg: PipelineConfig = PipelineConfig(), voxel_seed=0, radii_seed=0) -> PairBootstrap:
    """Voxel size from the larger cloud, both clouds voxelized, radii from the larger voxelized cloud."""
    v, sph, spread, branch = compute_voxel_size(select_larger(p, q), cfg.bootstrap, voxel_seed)
    pv = voxel_downsample(p, v)
    qv = voxel_downsample(q, v)
    radii = estimate_radii(select_larger(pv, qv), cfg.bootstrap, radii_seed)
    for name, r in zip(("local", "middle", "global"), radii):
        if not r > 0:
            raise DegenerateGeometryError(f"{name} radius is zero")
    return PairBootstrap(v, sph, spread, branch, radii, pv, qv)


def _run(p, q, cfg: PipelineConfig, backend, report: RegistrationReport, timer: _Timer, cloud_ids):
    if len(p) == 0 or len(q) == 0:
        raise EmptyInputError("both clouds must be non-empty")
    # both clouds share the embedding seed so identical inputs embed identically
    s_voxel, s_radii, s_embed, s_cons, s_ransac = np.random.SeedSequence(cfg.rng_seed).spawn(5)

    with timer.stage("bootstrap"):
        boot = bootstrap_pair(p, q, cfg, s_voxel, s_radii)
        v, radii, pv, qv = boot.voxel_size, boot.radii, boot.source, boot.target
        report.voxel_size, report.sphericity, report.spread, report.branch = v, boot.sphericity, boot.spread, boot.branch
        report.n_points = {"source": len(p), "target": len(q), "source_voxelized": len(pv), "target_voxelized": len(qv)}
        report.radii = dict(zip(("local", "middle", "global"), radii))
    eps = default_epsilon(v, cfg.epsilon)
    report.epsilon = eps

    with timer.stage("embed"):
        radii_used = cfg.scale_radii(radii)
        emb_p = embed_cloud(pv, radii_used, cfg.n_fps, backend, s_embed, cfg.n_patch, cfg.scales, cloud_ids[0], SpatialIndex.build(pv))
        emb_q = embed_cloud(qv, radii_used, cfg.n_fps, backend, s_embed, cfg.n_patch, cfg.scales, cloud_ids[1], SpatialIndex.build(qv))
    by_scale_q = {e.scale: e for e in emb_q}
    report.n_keypoints = {
        "source": {e.scale: len(e) for e in emb_p},
        "target": {e.scale: len(e) for e in emb_q},
    }

    with timer.stage("match"):
        parts = []
        for ep in emb_p:
            eq = by_scale_q.get(ep.scale)
            if eq is None:
                continue
            matches, cands = _candidates_for_scale(ep, eq, cfg.temperature)
            report.n_matches[ep.scale] = matches.count
            if cands is not None:
                parts.append(cands)
        if not parts:
            raise ScaleEmptyError("no scale produced any mutual match")
        pooled = CandidateSet.concatenate(parts)
        report.n_candidates = len(pooled)

    with timer.stage("consensus"):
        try:
            cons = consensus_maximize(pooled, eps, cfg.max_candidates, s_cons)
            inliers = cons.inliers
        except InsufficientConsensusError as exc:
            report.degraded.append("insufficient_consensus")
            log.info("consensus too small (%s); solving on all pairs", exc)
            inliers = np.arange(len(pooled))
        report.consensus_inliers = int(inliers.shape[0])

    with timer.stage("solve"):
        if inliers.shape[0] < 3:
            raise InsufficientDataError(f"only {inliers.shape[0]} correspondences for the final solve")
        src, dst = pooled.p[inliers], pooled.q[inliers]
        rs = ransac(src, dst, eps, cfg.ransac_max_iters, s_ransac, cfg.ransac_confidence)
        report.pose = rs.pose
        report.ransac_inliers = rs.inlier_count
        report.ransac_iterations = rs.iterations
        if rs.low_confidence:
            report.degraded.append("ransac_low_confidence")

    if cfg.refine:
        with timer.stage("refine"):
            kernel = RobustKernel(cfg.kernel, c_bar=cfg.c_bar or eps, mu=cfg.mu, delta=cfg.delta)
            res = irls_refine(src, dst, report.pose, kernel, gnc=cfg.gnc)
            report.pose = res.pose
            if res.stalled:
                report.degraded.append("refinement_stalled")


def register_pair_record(p, q, gt, criteria, cfg=PipelineConfig(), name="", **kw) -> tuple[PairRecord, RegistrationReport]:
    rep = register(p, q, cfg, gt=gt, criteria=criteria, **kw)
    rec = PairRecord(rep.rte_cm, rep.rre_deg, bool(rep.success), name, rep.status, rep.timing_ms["total"])
    return rec, rep


def run_synth_suite(
    kind: str,
    trials: int,
    cfg: PipelineConfig = PipelineConfig(),
    params: SynthParams = SynthParams(),
    criteria: SuccessCriteria | None = None,
    first_seed: int = 0,
    callback=None,
) -> BenchmarkSummary:
    """Register ``trials`` seeded synthetic pairs of one kind and summarize.

    Seeds run from ``first_seed``; the pipeline seed stays ``cfg.rng_seed``
    for every pair. ``criteria`` defaults to (0.3 m, 15 deg) for
    ``indoor_room`` and (2.0 m, 5 deg) for ``lidar_sweep``.
    """
    if criteria is None:
        criteria = SYNTH_CRITERIA[kind]
    records = []
    for seed in range(first_seed, first_seed + trials):
        p, q, gt = synth_scene(kind, params, rng_seed=seed)
        rec, rep = register_pair_record(p, q, gt, criteria, cfg, name=f"{kind}-{seed}")
        records.append(rec)
        if callback is not None:
            callback(rec, rep)
    return BenchmarkSummary.from_records(records)
