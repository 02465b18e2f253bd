"""Command-line entry point: ``istar <command> ...``.

Exit codes: 0 success, 1 a check reported FAIL, 2 input or parse error,
3 config/checkpoint mismatch, 4 non-finite value during a computation.
"""
from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig
from .data import (bicubic_upscale, load_dataset, load_png, make_corpus, make_pair, save_png,
                   write_corpus, write_lr_cache)
from .ista import IstaProblem, solve
from .model import PAPER_PARAMS, CheckpointError, IstarModel, gradcheck_model
from .tensor import NonFiniteError

log = logging.getLogger("istar")

EXIT_FAIL, EXIT_INPUT, EXIT_MISMATCH, EXIT_NUMERIC = 1, 2, 3, 4


def _run_dir(args, seed) -> Path:
    if args.out_dir:
        out = Path(args.out_dir)
    else:
        out = Path("runs") / f"{time.strftime('%Y%m%d-%H%M%S')}-seed{seed}"
    out.mkdir(parents=True, exist_ok=True)
    return out


def _config(args) -> RunConfig:
    cfg = RunConfig.build(getattr(args, "config", None), getattr(args, "set", None) or ())
    if getattr(args, "seed", None) is not None:
        cfg.set("train.seed", args.seed)
    return cfg


def _pairs(root, count, size, seed, scale, use_cache=True):
    if root:
        return load_dataset(root, scale, use_cache=use_cache)
    return [make_pair(im, scale, f"img_{i:03d}") for i, im in enumerate(make_corpus(count, size, seed))]


def _load_checkpoint(path, scale=None, channels=None) -> IstarModel:
    if not Path(path).is_file():
        raise FileNotFoundError(f"checkpoint {path} not found")
    model, _ = IstarModel.load(path)
    if scale is not None and scale != model.config.scale:
        raise CheckpointError(f"--scale {scale} but checkpoint was trained for x{model.config.scale}")
    if channels is not None and channels != model.config.channels:
        raise CheckpointError(f"channels {channels} but checkpoint has {model.config.channels}")
    return model


# -- commands ----------------------------------------------------------------

def cmd_ista_solve(args) -> int:
    cfg = _config(args)
    for key, val in (("solver.alpha", args.alpha), ("solver.max_iters", args.max_iters),
                     ("solver.tol", args.tol)):
        if val is not None:
            cfg.set(key, val)
    problem = IstaProblem.load(args.problem)
    if args.lam is not None:
        problem = IstaProblem(problem.D, problem.y, args.lam)
    x, trace = solve(problem, cfg.solver_config())
    if args.trace_out:
        trace_path = Path(args.trace_out)
        trace_path.parent.mkdir(parents=True, exist_ok=True)
    else:
        trace_path = _run_dir(args, 0) / "trace.csv"
    trace.write_csv(trace_path)
    cfg.write(trace_path.with_name("run.cfg"))
    from .plotting import plot_objective
    plot_objective(trace, trace_path.with_name("objective.png"))
    print("solution:", " ".join(repr(float(v)) for v in x))
    print(f"objective: {trace.objectives[-1]!r}")
    print(f"alpha: {trace.alpha!r}")
    if trace.converged:
        print(f"converged after {trace.converged_iter} iteration(s) ({trace.iterations} run)")
    else:
        print(f"not converged after {trace.iterations} iterations")
    print(f"trace: {trace_path}")
    return 0


def cmd_make_dataset(args) -> int:
    paths = write_corpus(args.root, count=args.count, size=args.size, seed=args.seed)
    print(f"wrote {len(paths)} HR images to {Path(args.root) / 'HR'}")
    for r in args.cache_scale or ():
        n = write_lr_cache(args.root, r)
        print(f"wrote {n} LR images to {Path(args.root) / f'LRx{r}'}")
    return 0


def cmd_train(args) -> int:
    from .plotting import plot_loss
    from .train import read_loss_log, train
    if args.resume and not args.config:
        saved = Path(args.resume).parent / "run.cfg"
        if saved.is_file():
            args.config = str(saved)
    cfg = _config(args)
    if args.data:
        cfg.set("data.root", args.data)
    mcfg, tcfg = cfg.model_config(), cfg.train_config()
    start = 0
    if args.resume:
        model, meta = IstarModel.load(args.resume)
        if model.config != mcfg:
            raise CheckpointError(f"checkpoint config {model.config} does not match run config {mcfg}")
        start = int(meta.get("state.step", model.params.step))
        out = Path(args.out_dir) if args.out_dir else Path(args.resume).parent
        out.mkdir(parents=True, exist_ok=True)
    else:
        model = IstarModel(mcfg, seed=tcfg.seed)
        out = _run_dir(args, tcfg.seed)
    pairs = _pairs(cfg["data.root"], cfg["data.count"], cfg["data.size"], cfg["data.seed"],
                   mcfg.scale, cfg["data.use_cache"])
    cfg.write(out / "run.cfg")
    print(f"training {model.count_params():,} parameters on {len(pairs)} images, "
          f"steps {start}..{tcfg.total_steps}, output {out}")
    records = train(model, pairs, tcfg, out_dir=out, start_step=start)
    if records:
        print(f"final loss {records[-1].loss:.6f} at step {records[-1].step}")
    plot_loss(read_loss_log(out / "loss.csv"), out / "loss.png")
    print(f"checkpoint: {out / 'last.istar'}")
    return 0


def cmd_eval(args) -> int:
    from .plotting import plot_eval
    from .train import bicubic_model, evaluate
    cfg = _config(args)
    model = _load_checkpoint(args.checkpoint, args.scale)
    r = model.config.scale
    root = args.dataset or cfg["eval.root"]
    pairs = _pairs(root, cfg["eval.count"], cfg["data.size"], cfg["eval.seed"], r)
    mode = args.mode or cfg["eval.mode"]
    workers = args.workers or cfg["eval.workers"]
    report = evaluate(model, pairs, r, mode=mode, workers=workers)
    base = evaluate(bicubic_model(r), pairs, r, mode=mode, workers=workers)
    out = _run_dir(args, cfg["train.seed"])
    report.write_csv(out / "eval.csv")
    base.write_csv(out / "bicubic.csv")
    cfg.write(out / "run.cfg")
    plot_eval(report, base, out / "eval_psnr.png")
    print(report.table())
    print(f"{'bicubic mean':<20} {base.mean_psnr:>10.4f} {base.mean_ssim:>8.4f}")
    print(f"report: {out / 'eval.csv'}")
    return 0


def cmd_infer(args) -> int:
    model = _load_checkpoint(args.checkpoint, args.scale)
    lr = load_png(args.input)
    sr = np.clip(model.predict(lr), 0, 1)
    save_png(sr, args.output)
    print(f"{args.input}: {lr.shape[2]}x{lr.shape[1]} -> {args.output}: {sr.shape[2]}x{sr.shape[1]}")
    if args.side_by_side:
        panels = [bicubic_upscale(lr, model.config.scale), sr]
        if args.hr:
            hr = load_png(args.hr)
            if hr.shape != sr.shape:
                raise ValueError(f"HR image {hr.shape} does not match SR output {sr.shape}")
            panels.append(hr)
        save_png(np.concatenate(panels, axis=2), args.side_by_side)
        print(f"comparison ({' | '.join(['bicubic', 'model', 'HR'][:len(panels)])}): {args.side_by_side}")
    return 0


def cmd_gradcheck(args) -> int:
    res = gradcheck_model(size=args.size, iterations=args.iters, channels=args.channels,
                          seed=args.seed, max_coords=args.max_coords)
    verdict = "PASS" if res.passed(args.tol) else "FAIL"
    print(f"gradcheck K={args.iters} C={args.channels} {args.size}x{args.size} float64: "
          f"max relative error {res.max_rel_error:.3e} at {res.worst or '-'}, "
          f"{res.checked} coordinates checked, {res.skipped} skipped near kinks")
    print(f"{verdict} (tolerance {args.tol:g})")
    return 0 if verdict == "PASS" else EXIT_FAIL


def cmd_params(args) -> int:
    cfg = _config(args)
    model = IstarModel(cfg.model_config())
    total = model.count_params()
    c = model.config
    print(f"config: scale={c.scale} channels={c.channels} iterations={c.iterations} "
          f"st_channels={c.st_channels}")
    for name, n in model.param_breakdown().items():
        print(f"  {name:<12} {n:>12,}")
    print(f"total parameters: {total:,} ({total / 1e6:.3f} M)")
    print(f"reference: {PAPER_PARAMS / 1e6:.2f} M, deviation {100 * (total / PAPER_PARAMS - 1):+.2f}%")
    macs = model.estimate_macs(args.size, args.size)
    print(f"MACs for a {args.size}x{args.size} LR input: {macs:,} ({macs / 1e9:.3f} G)")
    return 0


# -- parser ------------------------------------------------------------------

def _add_config_flags(p):
    p.add_argument("--config", help="key=value run config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    p.add_argument("--seed", type=int, help="seed for init and patch sampling (sets train.seed)")
    p.add_argument("--out-dir", help="output directory (default runs/<timestamp>-seed<seed>)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="istar", description="Unfolded-ISTA super-resolution toolkit")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ista-solve", help="solve an l1 least-squares problem with ISTA")
    p.add_argument("problem")
    p.add_argument("--alpha", type=float)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--max-iters", type=int)
    p.add_argument("--tol", type=float)
    p.add_argument("--trace-out")
    _add_config_flags(p)
    p.set_defaults(func=cmd_ista_solve)

    p = sub.add_parser("make-dataset", help="write the synthetic mini-corpus as PNGs")
    p.add_argument("root")
    p.add_argument("--count", type=int, default=20)
    p.add_argument("--size", type=int, default=96)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--cache-scale", type=int, action="append", help="also write LRx{r} PNGs")
    p.set_defaults(func=cmd_make_dataset)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--data", help="dataset root with HR/*.png (default: synthetic corpus)")
    p.add_argument("--resume", help="checkpoint to continue from")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="PSNR/SSIM of a checkpoint against bicubic")
    p.add_argument("checkpoint")
    p.add_argument("dataset", nargs="?", help="dataset root (default: synthetic held-out corpus)")
    p.add_argument("--scale", type=int)
    p.add_argument("--mode", choices=["Y", "RGB"])
    p.add_argument("--workers", type=int)
    _add_config_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="super-resolve one PNG")
    p.add_argument("checkpoint")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--scale", type=int)
    p.add_argument("--side-by-side", metavar="PNG", help="also write bicubic|model|HR comparison")
    p.add_argument("--hr", help="ground-truth HR PNG for the comparison panel")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full model")
    p.add_argument("--size", type=int, default=8)
    p.add_argument("--iters", type=int, default=1, help="number of ISTA blocks K")
    p.add_argument("--channels", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--max-coords", type=int, help="sample at most this many coordinates per tensor")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("params", help="parameter count and MAC estimate")
    p.add_argument("--size", type=int, default=48, help="LR input side for the MAC estimate")
    _add_config_flags(p)
    p.set_defaults(func=cmd_params)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NonFiniteError as exc:
        print(f"error: non-finite value: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except (ConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
