"""Command-line entry point: ``smalldet <command> [options]``."""
from __future__ import annotations

import argparse
import csv
import datetime as _dt
import io
import json
import os
import sys
from pathlib import Path
from typing import List, Optional, Sequence

from . import checks
from .config import OUT_DIR_ENV, ConfigError, RunConfig, load_config
from .evalmap import (
    AnnotationError,
    average_precision,
    dets_to_coco,
    format_report,
    get_scheme,
    gt_to_coco,
    load_coco_dets,
    load_coco_gt,
)
from .gradcheck import FDSpec
from .synthgen import PerturbSpec, generate_scene, perturb
from .trainer import COMPONENTS, TrainingDiverged, build_fixtures, compute_losses, train_demo

EXIT_OK, EXIT_FAILED, EXIT_INVALID = 0, 1, 2


def _parse_eta(text: str):
    try:
        values = tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"--eta expects six comma-separated numbers, got {text!r}") from None
    if len(values) != 6:
        raise argparse.ArgumentTypeError(f"--eta expects six values, got {len(values)}")
    return values


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON configuration file")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help=f"output directory (default: ${OUT_DIR_ENV} or ./runs)")
    p.add_argument("--scheme", choices=["visdrone", "soda-d"])
    p.add_argument("--beta", type=float)
    p.add_argument("--theta", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--eta", type=_parse_eta, help="six comma-separated expansion rates, one per decoder layer")
    p.add_argument("--target-mode", choices=["c_times_s", "c_only"])
    p.add_argument("--strict-min", action="store_true", default=None)
    p.add_argument("--share-branch-convs", action="store_true", default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="smalldet", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("losses", help="compute every loss component on a synthetic fixture")
    _common(p)
    p.add_argument("--identity", action="store_true", help="predictions equal ground truth")
    p.add_argument("--outside-fraction", type=float)
    p.add_argument("--num-scenes", type=int)

    p = sub.add_parser("gradcheck", help="finite-difference check of all analytic gradients")
    _common(p)
    p.add_argument("--checks", help="comma-separated check names; 'none' selects nothing (default: all)")
    p.add_argument("--samples", type=int, help="override samples per check")
    p.add_argument("--fault", help="scale one check's analytic gradient by 1.01 (fault injection)")
    p.add_argument("--list", action="store_true", help="list registered checks and exit")

    p = sub.add_parser("train-demo", help="gradient descent on the total loss")
    _common(p)
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float, dest="learning_rate")
    p.add_argument("--num-scenes", type=int)

    p = sub.add_parser("eval-ap", help="COCO-style AP with size buckets")
    _common(p)
    p.add_argument("--gt", type=Path, required=True)
    p.add_argument("--dets", type=Path, required=True)
    p.add_argument("--max-dets", type=int, default=100)

    p = sub.add_parser("synth", help="write synthetic COCO-format ground truth and detections")
    _common(p)
    p.add_argument("--num-scenes", type=int)
    p.add_argument("--identity", action="store_true")
    p.add_argument("--drop-rate", type=float, default=0.0)
    p.add_argument("--clutter-rate", type=float, default=0.0)

    p = sub.add_parser("report", help="pretty-print a previous run")
    p.add_argument("run_dir", type=Path)
    return parser


def _config_from_args(args) -> RunConfig:
    overrides = {
        "seed": args.seed, "beta": args.beta, "theta": args.theta, "alpha": args.alpha, "gamma": args.gamma,
        "eta": args.eta, "target_mode": args.target_mode, "strict_min": args.strict_min,
        "share_branch_convs": args.share_branch_convs, "out_dir": args.out,
        "scheme": args.scheme.replace("-", "_") if args.scheme else None,
    }
    for name in ("steps", "learning_rate", "num_scenes", "outside_fraction"):
        overrides[name] = getattr(args, name, None)
    return load_config(args.config, **overrides)


def _out_root(cfg: RunConfig) -> Path:
    return Path(cfg.out_dir or os.environ.get(OUT_DIR_ENV) or "runs")


def _write_report(run_dir: Path, command: str, report: dict, table: str) -> None:
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "report.json").write_text(json.dumps({"command": command, **report}, indent=2, sort_keys=True) + "\n")
    stamp = _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")
    (run_dir / "report.txt").write_text(f"# {command} run at {stamp}\n{table}\n")


def _table(rows: Sequence[Sequence[object]], header: Sequence[str]) -> str:
    cells = [list(map(str, header))] + [[f"{v:.6g}" if isinstance(v, float) else str(v) for v in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    return "\n".join("  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in cells)


def cmd_losses(args) -> int:
    cfg = _config_from_args(args)
    pspec = PerturbSpec.identity() if args.identity else None
    result = compute_losses(cfg, build_fixtures(cfg, perturb_spec=pspec))
    report = {"config": cfg.to_dict() | {"out_dir": None}, "identity": bool(args.identity),
              "components": result.components, "per_query": result.per_query}
    keys = ["image_id", "query", "u", "rho", "c", "t", "s", "w_cls", "w_reg", "r_cls", "r_reg"]
    table = _table([[k, v] for k, v in result.components.items()], ["component", "value"])
    table += "\n\n" + _table([[q[k] for k in keys] for q in result.per_query], keys)
    run_dir = _out_root(cfg) / f"losses-{cfg.run_id('losses', bool(args.identity))}"
    _write_report(run_dir, "losses", report, table)
    print(table)
    print(f"\nreport written to {run_dir}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    if args.list:
        for name in checks.build_registry():
            print(name)
        return EXIT_OK
    cfg = _config_from_args(args)
    registry = checks.build_registry(cfg.scale_target(), cfg.focal(), cfg.strict_min, cfg.share_branch_convs,
                                     fault=args.fault)
    if args.checks is None:
        names = list(registry)
    elif args.checks.strip().lower() == "none":
        names = []
    else:
        names = [n.strip() for n in args.checks.split(",") if n.strip()]
        unknown = [n for n in names if n not in registry]
        if unknown:
            raise ConfigError(f"unknown checks: {', '.join(unknown)}; known: {', '.join(registry)}")
    reports = checks.run_suite(registry, names, samples=args.samples, spec=FDSpec(), seed=cfg.seed)
    ok = all(r.passed for r in reports)
    report = {"passed": ok, "checks": [r.to_dict() for r in reports], "fault": args.fault}
    rows = [[r.name, r.samples, r.max_rel_error, "pass" if r.passed else "FAIL"] for r in reports]
    table = _table(rows, ["check", "samples", "max_rel_error", "status"])
    for r in reports:
        if not r.passed:
            first = r.failures[0]
            table += f"\nFAIL {r.name}: {r.failure_count} of {r.samples} samples, first at sample {first['sample']} " \
                     f"(rel error {first['rel_error']:.3e})"
    run_dir = _out_root(cfg) / f"gradcheck-{cfg.run_id('gradcheck', names, args.samples, args.fault)}"
    _write_report(run_dir, "gradcheck", report, table)
    print(table)
    print(f"\n{len(reports)} checks, {'all passed' if ok else 'FAILURES'}; report written to {run_dir}")
    return EXIT_OK if ok else EXIT_FAILED


def curve_csv(curve) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["step", *COMPONENTS])
    for rec in curve:
        writer.writerow([rec["step"], *(repr(float(rec[k])) for k in COMPONENTS)])
    return buf.getvalue()


def cmd_train_demo(args) -> int:
    cfg = _config_from_args(args)
    try:
        curve = train_demo(cfg)
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILED
    first, last = curve[0], curve[-1]
    reduction = 1.0 - last["total"] / first["total"] if first["total"] > 0 else 0.0
    report = {"config": cfg.to_dict() | {"out_dir": None}, "steps": cfg.steps, "learning_rate": cfg.learning_rate,
              "initial": first, "final": last, "total_reduction": reduction}
    run_dir = _out_root(cfg) / f"train-{cfg.run_id('train-demo')}"
    rows = [[k, first[k], last[k]] for k in COMPONENTS]
    table = _table(rows, ["component", "step 0", f"step {last['step']}"]) + f"\n\ntotal reduction: {reduction:.4%}"
    _write_report(run_dir, "train-demo", report, table)
    (run_dir / "loss_curve.csv").write_text(curve_csv(curve))
    print(table)
    print(f"\nreport and loss curve written to {run_dir}")
    return EXIT_OK


def cmd_eval_ap(args) -> int:
    cfg = _config_from_args(args)
    gts, categories, _ = load_coco_gt(args.gt)
    dets = load_coco_dets(args.dets, categories)
    scheme = get_scheme(args.scheme or cfg.scheme)
    report = average_precision(gts, dets, scheme, max_dets=args.max_dets)
    report["scheme"] = scheme.name
    table = format_report({k: v for k, v in report.items() if k != "scheme"})
    digest = cfg.run_id("eval-ap", args.gt.read_text(), args.dets.read_text(), scheme.name, args.max_dets)
    run_dir = _out_root(cfg) / f"eval-{digest}"
    _write_report(run_dir, "eval-ap", report, table)
    print(table)
    print(f"\nreport written to {run_dir}")
    return EXIT_OK


def cmd_synth(args) -> int:
    cfg = _config_from_args(args)
    spec = cfg.scene_spec()
    pspec = PerturbSpec.identity() if args.identity else PerturbSpec(
        cfg.center_jitter, cfg.scale_jitter, cfg.score_noise, args.drop_rate, args.clutter_rate)
    scenes = [generate_scene(spec, image_id=i) for i in range(cfg.num_scenes)]
    gts = [g for s in scenes for g in s.gts]
    dets = [d for s in scenes for d in perturb(s, pspec, cfg.seed)]
    categories = {c: f"class_{c}" for c in range(1, cfg.num_categories + 1)}
    run_dir = _out_root(cfg) / f"synth-{cfg.run_id('synth', args.identity, args.drop_rate, args.clutter_rate)}"
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "gt.json").write_text(json.dumps(gt_to_coco(gts, [s.image_record() for s in scenes], categories), indent=1))
    (run_dir / "dets.json").write_text(json.dumps(dets_to_coco(dets), indent=1))
    print(f"{len(scenes)} scenes, {len(gts)} objects, {len(dets)} detections written to {run_dir}")
    return EXIT_OK


def cmd_report(args) -> int:
    path = args.run_dir / "report.json"
    if not path.exists():
        raise ConfigError(f"no report.json in {args.run_dir}")
    txt = args.run_dir / "report.txt"
    if txt.exists():
        print(txt.read_text().rstrip())
    else:
        print(json.dumps(json.loads(path.read_text()), indent=2))
    return EXIT_OK


COMMANDS = {
    "losses": cmd_losses,
    "gradcheck": cmd_gradcheck,
    "train-demo": cmd_train_demo,
    "eval-ap": cmd_eval_ap,
    "synth": cmd_synth,
    "report": cmd_report,
}


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, AnnotationError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
