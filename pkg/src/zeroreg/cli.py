"""Command-line interface.

Exit codes: 0 success, 1 a registration ended with a failure status, 2 usage
or input errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .bench import BenchmarkSummary, SynthParams, criteria_for, write_sweep_csv
from .config import PipelineConfig, load_config
from .errors import ParameterError, ParseError
from .io import CLOUD_FORMATS, POSE_FORMATS, load_cloud, load_poses, relative_pose
from .pipeline import SYNTH_CRITERIA, register, register_pair_record, run_synth_suite
from .solver import lshape_ambiguity_demo

EXIT_OK, EXIT_FAILED, EXIT_USAGE = 0, 1, 2


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise _UsageError(f"{self.prog}: error: {message}")


def _index_pair(text: str) -> tuple[int, int]:
    try:
        i, j = (int(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected 'i,j', got {text!r}") from None
    return i, j


def _config(path) -> PipelineConfig:
    return load_config(path) if path else PipelineConfig()


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="zeroreg", description="Zero-shot pairwise point cloud registration.")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    r = sub.add_parser("register", help="register a source cloud onto a target cloud")
    r.add_argument("src")
    r.add_argument("tgt")
    r.add_argument("--src-format", choices=CLOUD_FORMATS)
    r.add_argument("--tgt-format", choices=CLOUD_FORMATS)
    r.add_argument("--gt", help="pose file holding sensor-to-world poses")
    r.add_argument("--gt-index", type=_index_pair, help="'i,j': source and target pose indices")
    r.add_argument("--gt-format", choices=POSE_FORMATS, default="kitti_odometry")
    r.add_argument("--criteria", default="default", help="preset name or 'meters,degrees'")
    r.add_argument("--config")
    r.add_argument("--json", help="write the report here")

    b = sub.add_parser("bench", help="evaluate a pairs manifest")
    b.add_argument("manifest", help="lines of: src tgt gt_pose_file src_idx tgt_idx")
    b.add_argument("--criteria", default="default")
    b.add_argument("--gt-format", choices=POSE_FORMATS, default="kitti_odometry")
    b.add_argument("--config")
    b.add_argument("--csv", help="per-pair records")
    b.add_argument("--json", help="summary document")

    s = sub.add_parser("synth", help="run seeded synthetic registration trials")
    s.add_argument("kind", choices=sorted(SYNTH_CRITERIA))
    s.add_argument("--trials", type=int, default=100)
    s.add_argument("--first-seed", type=int, default=0)
    s.add_argument("--criteria", help="defaults to the scene kind's thresholds")
    s.add_argument("--scales", help="comma-separated subset of local,middle,global")
    s.add_argument("--config")
    s.add_argument("--csv")
    s.add_argument("--json")

    d = sub.add_parser("demo-lshape", help="robust costs of the L-shape alignment cases")
    d.add_argument("--csv")
    return ap


def _cmd_register(args) -> int:
    cfg = _config(args.config)
    if (args.gt is None) != (args.gt_index is None):
        raise _UsageError("--gt and --gt-index go together")
    p = load_cloud(args.src, args.src_format)
    q = load_cloud(args.tgt, args.tgt_format)
    gt = None
    if args.gt:
        gt = relative_pose(load_poses(args.gt, args.gt_format), *args.gt_index)
    rep = register(p, q, cfg, gt=gt, criteria=criteria_for(args.criteria), cloud_ids=(args.src, args.tgt))
    doc = rep.to_dict()
    if args.json:
        Path(args.json).write_text(json.dumps(doc, indent=2))
    print(json.dumps({"status": doc["status"], "pose": doc["pose"], **({"evaluation": doc["evaluation"]} if "evaluation" in doc else {})}))
    return EXIT_OK if rep.ok else EXIT_FAILED


def _read_manifest(path):
    base = Path(path).parent
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            tok = line.split()
            if not tok or tok[0].startswith("#"):
                continue
            if len(tok) != 5:
                raise ParseError(f"line {lineno}: expected 'src tgt gt_pose_file src_idx tgt_idx'")
            try:
                i, j = int(tok[3]), int(tok[4])
            except ValueError:
                raise ParseError(f"line {lineno}: pose indices must be integers") from None
            rows.append(tuple(str(base / t) for t in tok[:3]) + (i, j))
    return rows


def _cmd_bench(args) -> int:
    cfg = _config(args.config)
    crit = criteria_for(args.criteria)
    poses_cache = {}
    records = []
    for src, tgt, gt_path, i, j in _read_manifest(args.manifest):
        if gt_path not in poses_cache:
            poses_cache[gt_path] = load_poses(gt_path, args.gt_format)
        gt = relative_pose(poses_cache[gt_path], i, j)
        rec, _ = register_pair_record(load_cloud(src), load_cloud(tgt), gt, crit, cfg, name=f"{Path(src).name}->{Path(tgt).name}", cloud_ids=(src, tgt))
        records.append(rec)
        logging.info("%s %s rte=%.2fcm rre=%.3fdeg success=%s", rec.name, rec.status, rec.rte_cm, rec.rre_deg, rec.success)
    summary = BenchmarkSummary.from_records(records)
    _emit_summary(summary, args)
    return EXIT_OK if all(r.status == "ok" for r in records) else EXIT_FAILED


def _emit_summary(summary: BenchmarkSummary, args) -> None:
    if args.csv:
        summary.write_csv(args.csv)
    if args.json:
        summary.write_json(args.json)
    doc = summary.to_dict()
    doc.pop("records")
    print(json.dumps(doc))


def _cmd_synth(args) -> int:
    cfg = _config(args.config)
    if args.scales:
        from .config import config_from_dict

        cfg = config_from_dict({"scales": args.scales.split(",")}, base=cfg)
    if args.trials < 1:
        raise _UsageError("--trials must be positive")
    crit = criteria_for(args.criteria) if args.criteria else None

    def progress(rec, rep):
        logging.info("%s %s rte=%.2fcm rre=%.3fdeg success=%s", rec.name, rec.status, rec.rte_cm, rec.rre_deg, rec.success)

    summary = run_synth_suite(args.kind, args.trials, cfg, SynthParams(), crit, args.first_seed, progress)
    _emit_summary(summary, args)
    return EXIT_OK if all(r.status == "ok" for r in summary.records) else EXIT_FAILED


def _cmd_demo(args) -> int:
    rows = lshape_ambiguity_demo()
    if args.csv:
        write_sweep_csv(args.csv, rows)
    print(f"{'kernel':<6} {'mu':>7} {'c_bar':>6} {'case':<6} {'cost':>12}")
    for r in rows:
        print(f"{r['kernel']:<6} {r['mu']:>7g} {r['c_bar']:>6g} {r['case']:<6} {r['cost']:>12.6g}")
    return EXIT_OK


_COMMANDS = {"register": _cmd_register, "bench": _cmd_bench, "synth": _cmd_synth, "demo-lshape": _cmd_demo}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
    try:
        return _COMMANDS[args.command](args)
    except _UsageError as exc:
        print(f"zeroreg: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ParseError, ParameterError, OSError) as exc:
        print(f"zeroreg: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
