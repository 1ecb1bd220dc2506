"""Command-line entry point: ``sparse3d {verify,gradcheck,bench,distill}``.

Every command writes its artifacts plus a ``manifest.json`` (command, seed,
resolved config, file list) under ``--out``. Set ``SPARSE3D_NUM_THREADS`` to pin
the BLAS thread pool for comparable timings.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from contextlib import nullcontext
from dataclasses import asdict, dataclass, field
from pathlib import Path

from . import bench as B
from . import gradcheck as G
from .attention import VARIANTS, inject_fault
from .checkpoint import save_checkpoint
from .distill import DistillConfig, distill_train
from .encoder import init_params, make_student_config, make_teacher_config
from .rng import Rng
from .verify import run_verification

THREADS_ENV = "SPARSE3D_NUM_THREADS"
FAULTS = {"flash-sign": "flash_sign"}


@dataclass
class RunConfig:
    command: str
    seed: int
    scale: str
    out: str
    overrides: dict = field(default_factory=dict)


def _write_manifest(out: Path, run: RunConfig, files: list[str], extra: dict | None = None) -> None:
    manifest = {**asdict(run), "files": sorted(files), **(extra or {})}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _scale(label: str) -> str:
    return "paper" if label in ("paper", "paper-shape") else label


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _variant_list(text: str) -> list[str]:
    names = [t.strip() for t in text.split(",") if t.strip()]
    for n in names:
        if n not in VARIANTS:
            raise argparse.ArgumentTypeError(f"unknown variant {n!r}; choose from {VARIANTS}")
    return names


# ------------------------------------------------------------------ commands

def cmd_verify(args) -> int:
    out = Path(args.out)
    fault = inject_fault(FAULTS[args.inject_fault]) if args.inject_fault else nullcontext()
    with fault:
        checks = run_verification(_scale(args.scale), args.tiles, args.seed)
    report = {"seed": args.seed, "scale": args.scale, "tiles": args.tiles,
              "checks": [asdict(c) for c in checks]}
    (out / "verify_report.json").write_text(json.dumps(report, indent=2) + "\n")
    for c in checks:
        print(c.line())
    run = RunConfig("verify", args.seed, args.scale, str(out),
                    {"tiles": args.tiles, "inject_fault": args.inject_fault})
    _write_manifest(out, run, ["verify_report.json"])
    failed = [c.name for c in checks if not c.passed]
    if failed:
        print("failed checks: " + ", ".join(failed), file=sys.stderr)
        return 1
    return 0


def cmd_gradcheck(args) -> int:
    out = Path(args.out)
    results = G.run_all(seed=args.seed, threshold=args.threshold)
    lines = []
    for r in results:
        status = "pass" if r.passed else "FAIL"
        lines.append(f"{r.name}: {status} (rel_err={r.max_rel_err:.3e}, "
                     f"threshold={r.threshold:.0e}, elements={r.n_checked})")
    (out / "gradcheck_report.txt").write_text("\n".join(lines) + "\n")
    ops = sorted(G.CASES)
    (out / "gradcheck_report.json").write_text(json.dumps(
        {"seed": args.seed, "threshold": args.threshold, "ops": ops,
         "results": [{**asdict(r), "passed": r.passed} for r in results]}, indent=2) + "\n")
    print("\n".join(lines))
    run = RunConfig("gradcheck", args.seed, args.scale, str(out), {"threshold": args.threshold})
    _write_manifest(out, run, ["gradcheck_report.txt", "gradcheck_report.json"])
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"{len(failed)} of {len(results)} gradient checks failed: " + ", ".join(failed),
              file=sys.stderr)
        return 1
    return 0


def cmd_bench(args) -> int:
    out = Path(args.out)
    if args.reps < 11 or args.warmups < 3:
        print("bench needs --reps >= 11 and --warmups >= 3", file=sys.stderr)
        return 2
    reports = []
    for n in args.sweep:
        w = args.w if args.w is not None else n // 8
        if "sparse_flash" in args.variant and (w < 1 or n % (w * args.r)):
            print(f"invalid sweep point: N={n} is not divisible by w*r={w}*{args.r}",
                  file=sys.stderr)
            return 2
        configs = [B.BenchConfig(v, n, args.d, args.h, w, args.r, args.tiles, args.tiles)
                   for v in args.variant]
        reports.extend(B.compare_variants(configs, args.seed, args.reps, args.warmups))
    B.write_reports(reports, out)
    print(B.reports_to_csv(reports), end="")
    run = RunConfig("bench", args.seed, args.scale, str(out),
                    {"sweep": args.sweep, "variant": args.variant, "d": args.d, "h": args.h,
                     "w": args.w, "r": args.r, "tiles": args.tiles, "reps": args.reps,
                     "warmups": args.warmups})
    _write_manifest(out, run, ["bench.csv", "bench.json"],
                    {"timing_fields": list(B.CostReport.TIMING_FIELDS),
                     "memory_metric": "peak transient scratch bytes in the attention core"})
    return 0


def cmd_distill(args) -> int:
    out = Path(args.out)
    scale = _scale(args.scale)
    overrides = {}
    if args.variant:
        overrides["attention_variant"] = args.variant
    if args.w is not None:
        overrides["segment_size"] = args.w
    if args.r is not None:
        overrides["dilation"] = args.r
    if args.tiles is not None:
        overrides["block_rows"] = overrides["block_cols"] = args.tiles
    try:
        tcfg = make_teacher_config(scale)
        scfg = make_student_config(scale, **overrides)
        cfg = DistillConfig(total_iterations=args.iterations, batch_size=args.batch,
                            learning_rate=args.lr, logit_phase_iterations=args.logit_iterations,
                            seed=args.seed, loss_mode=args.loss_mode)
    except ValueError as exc:
        print(f"incompatible overrides: {exc}", file=sys.stderr)
        return 2
    rng = Rng(args.seed)
    tparams = init_params(tcfg, rng.fork("teacher"))
    sparams = init_params(scfg, rng.fork("student"))
    result = distill_train(tcfg, tparams, scfg, sparams, cfg)
    result.history.write(out / "history.jsonl")
    save_checkpoint(out / "student.ckpt", {**result.student_params, **result.projections},
                    {"config": scfg.to_dict(), "seed": args.seed, "role": "student"})
    save_checkpoint(out / "teacher.ckpt", tparams,
                    {"config": tcfg.to_dict(), "seed": args.seed, "role": "teacher"})
    layer = result.history.phase("layerwise")
    print(f"layer-wise loss {layer[0].loss:.4f} -> {layer[-1].loss:.4f}; "
          f"k trace {result.history.k_trace}")
    run = RunConfig("distill", args.seed, args.scale, str(out),
                    {"teacher": tcfg.to_dict(), "student": scfg.to_dict(),
                     "distill": asdict(cfg)})
    _write_manifest(out, run, ["history.jsonl", "student.ckpt", "teacher.ckpt"],
                    {"teacher_checksum": result.teacher_checksum,
                     "timing_fields": ["elapsed_ms"]})
    return 0


# -------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--scale", choices=("toy", "paper", "paper-shape"), default="toy")
    common.add_argument("--out", default="runs")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="sparse3d", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    v = sub.add_parser("verify", parents=[common], help="oracle-equivalence and structure checks")
    v.add_argument("--tiles", type=int, default=16)
    v.add_argument("--inject-fault", choices=sorted(FAULTS), default=None,
                   help="deliberately break a kernel to exercise failure reporting")
    v.set_defaults(func=cmd_verify)

    g = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    g.add_argument("--threshold", type=float, default=G.DEFAULT_THRESHOLD)
    g.set_defaults(func=cmd_gradcheck)

    b = sub.add_parser("bench", parents=[common], help="flops / memory / time per variant")
    b.add_argument("--sweep", type=_int_list, default=[256, 1024, 4096], help="token counts N")
    b.add_argument("--variant", type=_variant_list, default=list(VARIANTS))
    b.add_argument("--d", type=int, default=64)
    b.add_argument("--h", type=int, default=4)
    b.add_argument("--w", type=int, default=None, help="segment size (default N/8)")
    b.add_argument("--r", type=int, default=2)
    b.add_argument("--tiles", type=int, default=16)
    b.add_argument("--reps", type=int, default=11)
    b.add_argument("--warmups", type=int, default=3)
    b.set_defaults(func=cmd_bench)

    d = sub.add_parser("distill", parents=[common], help="layer-wise progressive distillation")
    d.add_argument("--iterations", type=int, default=36)
    d.add_argument("--logit-iterations", type=int, default=12)
    d.add_argument("--batch", type=int, default=16)
    d.add_argument("--lr", type=float, default=5e-3)
    d.add_argument("--loss-mode", choices=("plain_l2", "rms"), default="plain_l2")
    d.add_argument("--variant", choices=VARIANTS, default=None, help="student attention variant")
    d.add_argument("--w", type=int, default=None)
    d.add_argument("--r", type=int, default=None)
    d.add_argument("--tiles", type=int, default=None)
    d.set_defaults(func=cmd_distill)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    Path(args.out).mkdir(parents=True, exist_ok=True)
    threads = os.environ.get(THREADS_ENV)
    if threads:
        from threadpoolctl import threadpool_limits
        with threadpool_limits(limits=int(threads)):
            return args.func(args)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
