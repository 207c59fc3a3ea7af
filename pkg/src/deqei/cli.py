"""Command-line entry point: ``deqei {train,eval,equivariance,gradcheck,report}``.

Exit codes: 0 success, 1 verification or metric failure, 2 usage or
configuration error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

from .config import ConfigError, load_config
from .experiment import (build_denoiser, build_experiment, build_reconstructor, checkpoint_config,
                         make_checkpoint, read_history, restore_checkpoint, run_training, write_history)
from .formats import FormatError, atomic_write, read_checkpoint, write_checkpoint, write_pgm
from .gradcheck import check_instance, scalar_suite
from .linops import GroupElement
from .metrics import MetricReport, operator_equivariance_error, pipeline_equivariance_error, psnr, reconstruct

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

REPORT_COLUMNS = ["task", "method", "loss_mode", "backprop", "best_test_psnr", "final_test_psnr",
                  "pinv_test_psnr", "epochs", "config_hash"]


class UsageError(Exception):
    pass


def _write_json(path, obj):
    atomic_write(path, (json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n").encode())


def _load(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _out_dir(args, cfg):
    return Path(args.out if args.out else cfg.output_dir)


def _method(cfg):
    m = cfg.model
    if m.kind == "deq":
        return f"deq-{m.template}"
    if m.kind == "unrolled":
        return f"unrolled-{m.unrolled_template}-k{m.steps}"
    return m.kind


def _checkpoint_for(args, cfg):
    try:
        ck = read_checkpoint(args.checkpoint)
    except FileNotFoundError:
        raise UsageError(f"checkpoint not found: {args.checkpoint}") from None
    except FormatError as exc:
        raise UsageError(f"malformed checkpoint {args.checkpoint}: {exc}") from None
    ck_hash = checkpoint_config(ck).hash()
    if ck_hash != cfg.hash():
        raise UsageError(f"checkpoint {args.checkpoint} was written for config {ck_hash}, "
                         f"not {cfg.hash()}; refusing to mix them")
    return ck


def _reconstructor(args, cfg, exp):
    den = build_denoiser(cfg, pretrain=args.checkpoint is None)
    f = build_reconstructor(cfg, den, exp.A)
    if args.checkpoint is not None:
        restore_checkpoint(_checkpoint_for(args, cfg), f)
    elif cfg.model.kind not in ("pnp", "red"):
        print("note: no checkpoint given, evaluating the untrained model", file=sys.stderr)
    return f


def cmd_train(args):
    cfg = _load(args)
    out = _out_dir(args, cfg)
    out.mkdir(parents=True, exist_ok=True)
    resume = None
    if args.checkpoint is not None:
        ck = _checkpoint_for(args, cfg)
        hist_path = Path(args.checkpoint).with_name("history.csv")
        best_path = Path(args.checkpoint).with_name("best.deq1")
        history = read_history(hist_path) if hist_path.exists() else None
        if history is None:
            raise UsageError(f"cannot resume: {hist_path} is missing")
        best = read_checkpoint(best_path) if best_path.exists() else None
        resume = (ck, history, best)
    t0 = time.perf_counter()
    f, state, exp = run_training(cfg, out, resume)
    if not len(state.history):
        ck = make_checkpoint(cfg, f, state)
        write_checkpoint(out / "checkpoint.deq1", ck)
        write_checkpoint(out / "best.deq1", ck)
        write_history(out / "history.csv", state.history, cfg.hash())
    pinv = [psnr(a, b) for a, b in zip(exp.A.pseudoinverse(exp.y_test), exp.dataset.test)] if len(exp.y_test) else []
    recs = state.history.records
    summary = {
        "config_hash": cfg.hash(),
        "task": cfg.task.name,
        "method": _method(cfg),
        "loss_mode": cfg.loss.mode,
        "backprop": cfg.model.backprop if cfg.model.kind == "deq" else "",
        "epochs": len(recs),
        "best_test_psnr": state.best_psnr if recs else None,
        "final_test_psnr": recs[-1].test_psnr if recs else None,
        "pinv_test_psnr": MetricReport("psnr", pinv).mean if pinv else None,
        "wall_time": time.perf_counter() - t0,
    }
    _write_json(out / "summary.json", summary)
    print(f"trained {summary['method']} ({cfg.loss.mode}) for {len(recs)} epochs; "
          f"best test PSNR {summary['best_test_psnr']}; outputs in {out}")
    return EXIT_OK


def cmd_eval(args):
    cfg = _load(args)
    exp = build_experiment(cfg)
    f = _reconstructor(args, cfg, exp)
    out = _out_dir(args, cfg)
    xhat = reconstruct(f, exp.y_test)
    rep = MetricReport("psnr", [psnr(a, b) for a, b in zip(xhat, exp.dataset.test)], config_hash=cfg.hash())
    rep.write(out / "eval")
    for i in range(min(args.dump, len(xhat))):
        write_pgm(out / f"recon_{i:03d}.pgm", xhat[i, 0], comment=f"config_hash={cfg.hash()}")
    print(rep)
    return EXIT_OK


def cmd_equivariance(args):
    cfg = _load(args)
    if args.which == "operator" and cfg.model.kind != "deq":
        raise UsageError(f"operator equivariance needs a DEQ model, not {cfg.model.kind!r}")
    exp = build_experiment(cfg)
    f = _reconstructor(args, cfg, exp)
    g = GroupElement(args.angle)
    x = exp.dataset.test
    if args.which == "pipeline":
        rep = pipeline_equivariance_error(f, exp.A, x, g)
    else:
        rep = operator_equivariance_error(f.fixed_point_map, exp.A, x, g)
    rep.config_hash = cfg.hash()
    rep.write(_out_dir(args, cfg) / f"equivariance_{args.which}")
    print(rep)
    return EXIT_OK


def cmd_gradcheck(args):
    cfg = _load(args)
    gc = cfg.gradcheck
    failures = []
    for name, value, expected in scalar_suite():
        err = abs(value - expected) / abs(expected)
        ok = err <= gc.tol
        print(f"{'ok  ' if ok else 'FAIL'} {name}: {value:.10g} (expected {expected:g}, rel err {err:.2e})")
        if not ok:
            failures.append(name)
    for i in range(gc.instances):
        for loss in ("supervised", "equivariant-imaging"):
            rep = check_instance(cfg.seed + i, cfg.model.template, loss, gc.tol, gc.fd_step, gc.size,
                                 gc.hidden_channels, gc.unrolled_steps)
            ok = rep.passed(gc.tol)
            print(f"{'ok  ' if ok else 'FAIL'} {rep.name}: implicit vs finite differences {rep.fd_error:.2e}, "
                  f"vs unrolled {rep.unrolled_error:.2e}; jacobian-free cosine {rep.jfb_cosine:.4f} "
                  f"(informational)")
            if not ok:
                failures.append(f"{rep.name} [{', '.join(rep.failing_blocks)}]")
    if failures:
        print("gradient check failed for: " + "; ".join(failures), file=sys.stderr)
        return EXIT_FAIL
    print(f"all gradient checks within {gc.tol:g}")
    return EXIT_OK


def cmd_report(args):
    rows, seen = [], set()
    for d in args.run_dirs:
        path = Path(d) / "summary.json"
        try:
            s = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            print(f"warning: skipping {d}: {exc}", file=sys.stderr)
            continue
        if s.get("config_hash") in seen:
            continue
        seen.add(s.get("config_hash"))
        rows.append([s.get(c, "") for c in REPORT_COLUMNS])
    rows.sort(key=lambda r: tuple(str(v) for v in r[:4]))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    w.writerows(rows)
    if args.out:
        atomic_write(Path(args.out) / "report.csv", buf.getvalue().encode())
    print(_table(rows))
    return EXIT_OK


def _fmt(v):
    if isinstance(v, float):
        return "inf" if math.isinf(v) else f"{v:.2f}"
    return "" if v is None else str(v)


def _table(rows):
    cells = [REPORT_COLUMNS] + [[_fmt(v) for v in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(REPORT_COLUMNS))]
    lines = ["  ".join(c.ljust(wd) for c, wd in zip(r, widths)).rstrip() for r in cells]
    lines.insert(1, "  ".join("-" * wd for wd in widths))
    return "\n".join(lines)


def build_parser():
    p = argparse.ArgumentParser(prog="deqei", description="Train and evaluate equilibrium reconstruction models.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, checkpoint=False):
        sp.add_argument("--config", required=True, metavar="PATH")
        sp.add_argument("--out", metavar="DIR", help="output directory (default: the config's output_dir)")
        sp.add_argument("--seed", type=int, metavar="N", help="override the config's root seed")
        sp.add_argument("--checkpoint", metavar="PATH", required=checkpoint)

    sp = sub.add_parser("train", help="train a model; --checkpoint resumes a run")
    common(sp)
    sp.set_defaults(func=cmd_train)
    sp = sub.add_parser("eval", help="test-split PSNR of a checkpoint")
    common(sp)
    sp.add_argument("--dump", type=int, default=0, metavar="K", help="write the first K reconstructions as PGM")
    sp.set_defaults(func=cmd_eval)
    sp = sub.add_parser("equivariance", help="pipeline or operator equivariance error")
    common(sp)
    sp.add_argument("--which", choices=("pipeline", "operator"), default="pipeline")
    sp.add_argument("--angle", type=float, default=90.0, help="rotation angle in degrees (default 90)")
    sp.set_defaults(func=cmd_equivariance)
    sp = sub.add_parser("gradcheck", help="verify implicit gradients on small random models")
    sp.add_argument("--config", required=True, metavar="PATH")
    sp.add_argument("--seed", type=int, metavar="N")
    sp.set_defaults(func=cmd_gradcheck)
    sp = sub.add_parser("report", help="tabulate summaries of several runs")
    sp.add_argument("run_dirs", nargs="+", metavar="RUN_DIR")
    sp.add_argument("--out", metavar="DIR")
    sp.set_defaults(func=cmd_report)
    return p


def _thread_limit():
    n = os.environ.get("DEQEI_THREADS")
    if not n:
        return None
    try:
        n = int(n)
    except ValueError:
        raise UsageError(f"DEQEI_THREADS must be an integer, got {n!r}") from None
    if n < 1:
        raise UsageError("DEQEI_THREADS must be >= 1")
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        limiter = _thread_limit()
        try:
            return args.func(args)
        finally:
            if limiter is not None:
                limiter.restore_original_limits()
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except np.linalg.LinAlgError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
