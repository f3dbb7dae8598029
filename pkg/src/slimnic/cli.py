"""Command-line entry point: train, prune, search, bench, eval and sweep.

Every flag can also come from a ``--config`` file of ``key = value`` lines
(keys are flag names, dashes or underscores); flags on the command line win.
Each CSV starts with ``#`` lines holding the tool version and the effective
configuration. Path-valued settings are echoed by file name only, so runs
into different output directories produce identical CSVs.
"""

from __future__ import annotations

import argparse
import csv
import io
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from .abcm import DETERMINISTIC, MODES, GateConfig, effective_channels
from .codec import ChannelConfig, build_model, evaluate
from .costbench import (DEFAULT_ROUNDS, DEFAULT_WARMUP, bench, bench_pair, compare,
                        compare_csv, cost_table_csv, count_flops, timing_csv)
from .data import crop_to_multiple, default_output_dir, load_images, to_tensor
from .errors import DegeneratePlanError, SlimNICError
from .greedy import ORDERS, PAIRED, SearchConfig, curve_report, greedy_search
from .pruner import extract_plan, prune, verify_equivalence
from .serialize import load_model, save_model
from .trainer import DEFAULT_GAMMA, DEFAULT_LAMBDA, TrainConfig, gamma_sweep, train

PROG = "slimnic"
PATH_KEYS = {"config", "model", "baseline", "data", "holdout", "inputs", "out", "model_out"}


class CliError(Exception):
    """A one-line diagnostic; the CLI exits 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(f"{self.prog}: error: {message}")


class _UsageError(Exception):
    pass


# ---------------------------------------------------------------- config files


def read_config_file(path: str) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as err:
        raise CliError(f"cannot read config file {path}: {err.strerror}") from None
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise CliError(f"{path}:{n}: expected 'key = value'")
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def _apply_file_defaults(parser: argparse.ArgumentParser, values: dict) -> None:
    actions = {a.dest: a for a in parser._actions}
    defaults = {}
    for key, text in values.items():
        action = actions.get(key)
        if action is None or key in ("help", "config"):
            raise CliError(f"unknown config key {key!r}")
        if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
            if text.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise CliError(f"config key {key!r} expects true/false, got {text!r}")
            defaults[key] = text.lower() in ("true", "1", "yes")
            continue
        try:
            value = action.type(text) if action.type else text
        except (TypeError, ValueError):
            raise CliError(f"config key {key!r}: bad value {text!r}") from None
        if action.choices is not None and value not in action.choices:
            raise CliError(f"config key {key!r}: {value!r} not in {list(action.choices)}")
        defaults[key] = value
    parser.set_defaults(**defaults)


def effective_config(command: str, args: argparse.Namespace) -> list[str]:
    lines = [f"{PROG} {__version__}", f"command = {command}"]
    for key in sorted(vars(args)):
        if key in ("command", "func", "config", "out"):
            continue
        value = getattr(args, key)
        if key in PATH_KEYS and value is not None and not str(value).startswith("synthetic:"):
            value = Path(str(value)).name
        lines.append(f"{key} = {value}")
    return lines


# ---------------------------------------------------------------- helpers


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _out_dir(args) -> Path:
    out = Path(args.out or default_output_dir())
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write(path: Path, text: str) -> None:
    path.write_text(text, encoding="utf-8", newline="")


def _csv(header_lines: list[str], columns: list[str], rows: list[list]) -> str:
    buf = io.StringIO()
    for line in header_lines:
        buf.write(f"# {line}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    w.writerows(rows)
    return buf.getvalue()


def _images(spec: str, multiple: int):
    try:
        records = load_images(spec)
    except (FileNotFoundError, ValueError) as err:
        raise CliError(str(err)) from None
    return to_tensor(crop_to_multiple(records, multiple))


def _model(path: str):
    if not os.path.exists(path):
        raise CliError(f"model file not found: {path}")
    return load_model(path)


def _channel_config(args) -> ChannelConfig:
    cfg = ChannelConfig.from_widths(args.ga_widths, args.gs_widths, args.kernel, 2)
    try:
        cfg.validate()
    except ValueError as err:
        raise CliError(f"bad channel widths: {err}") from None
    return cfg


def _train_config(args) -> TrainConfig:
    try:
        return TrainConfig(lmbda=args.lmbda, gamma=getattr(args, "gamma", DEFAULT_GAMMA), lr=args.lr, steps=args.steps,
                           batch_size=args.batch_size, patch_size=args.patch_size, seed=args.seed,
                           lr_halve_step=args.lr_halve_step, mask_lr=args.mask_lr)
    except ValueError as err:
        raise CliError(str(err)) from None


def _f(x: float) -> str:
    return f"{x:.6f}"


# ---------------------------------------------------------------- subcommands


def cmd_train(args) -> int:
    out = _out_dir(args)
    cfg = _train_config(args)
    config = _channel_config(args)
    gate_cfg = GateConfig(args.gate_mode, args.epsilon, args.tau)
    model = build_model(config, gate_cfg, seed=args.seed, abcm=not args.no_abcm)
    data = _images(args.data, config.downsample)
    holdout = _images(args.holdout, config.downsample) if args.holdout else None
    report = train(model, data, cfg, holdout)
    header = effective_config("train", args)
    save_model(model, out / args.model_out)
    _write(out / "train.csv", _csv(header, ["step", "R", "D", "s_mean", "total"],
                                   [[s, _f(r), _f(d), _f(sm), _f(t)] for s, r, d, sm, t in report.rows]))
    rows = [[sid, kept, total, _f(kept / total)] for sid, kept, total in report.sparsity]
    rows.append(["final", "", "", _f(report.mean_sparsity)])
    _write(out / "sparsity.csv", _csv(header + [f"final_bpp = {report.final_bpp:.6f}",
                                                f"final_psnr = {report.final_psnr:.6f}"],
                                      ["layer", "kept", "total", "ratio"], rows))
    print(f"trained {cfg.steps} steps: bpp {report.final_bpp:.4f}, PSNR {report.final_psnr:.2f} dB, "
          f"mean channel ratio {report.mean_sparsity:.3f} -> {out / args.model_out}")
    return 0


def cmd_prune(args) -> int:
    out = _out_dir(args)
    model = _model(args.model)
    plan = extract_plan(model)
    slim = prune(model, plan)
    inputs = _images(args.inputs, model.config.downsample)
    report = verify_equivalence(model, slim, inputs, tol=args.tolerance)
    header = effective_config("prune", args)

    ga0, gs0 = plan.source.widths()
    ga1, gs1 = plan.config.widths()
    rows = []
    for sid in model.slot_ids():
        pos = int(sid[2:]) + 1
        before = (ga0 if sid.startswith("ga") else gs0)[pos]
        after = (ga1 if sid.startswith("ga") else gs1)[pos]
        rows.append([sid, before, after, " ".join(map(str, plan.keep[sid]))])
    _write(out / "plan.csv", _csv(header, ["layer", "channels_before", "channels_after", "keep"], rows))
    eq_rows = [[c.index, repr(c.max_abs_diff), c.where, repr(c.latent_diff), repr(c.recon_diff),
                repr(c.rate_diff), _f(c.psnr_masked), _f(c.psnr_pruned)] for c in report.checks]
    _write(out / "equivalence.csv",
           _csv(header + [f"tolerance = {args.tolerance!r}", f"passed = {report.passed}"],
                ["input", "max_abs_diff", "where", "latent_diff", "recon_diff", "rate_diff",
                 "psnr_masked", "psnr_pruned"], eq_rows))
    if not report.passed:
        raise CliError(f"equivalence check failed: {report.summary()}; "
                       f"raise --tolerance to emit the model anyway")
    cost = compare(model, slim, inputs)
    _write(out / "cost.csv", compare_csv(cost, args.quality, header))
    _write(out / "cost_layers.csv", cost_table_csv(cost.pruned, header))
    save_model(slim, out / args.model_out)
    print(f"pruned {plan.pruned_fraction():.1%} of maskable channels; {report.summary()}; "
          f"FLOP ratio {cost.flops_ratio:.3f}, params ratio {cost.params_ratio:.3f} "
          f"-> {out / args.model_out}")
    return 0


def cmd_search(args) -> int:
    out = _out_dir(args)
    model = _model(args.model)
    images = _images(args.data, model.config.downsample)
    results = []
    for thr in args.threshold:
        try:
            cfg = SearchConfig(thr, args.order, args.start)
        except ValueError as err:
            raise CliError(str(err)) from None
        results.append(greedy_search(model, images, cfg))
    header = effective_config("search", args)
    curve_report(results if len(results) > 1 else results[0], out / "search.csv",
                 out / "search.svg" if args.svg else None, header)
    rows = [[_f(r.threshold), _f(r.baseline_psnr), _f(r.pruning_ratio), _f(r.final_drop),
             r.evaluations, r.plan(model).to_text()] for r in results]
    _write(out / "search_summary.csv",
           _csv(header, ["threshold", "baseline_psnr", "pruning_ratio", "psnr_drop_percent",
                         "evaluations", "keep"], rows))
    for r in results:
        print(f"threshold {r.threshold:g}%: pruning ratio {r.pruning_ratio:.3f}, "
              f"PSNR drop {r.final_drop:.3f}% after {r.evaluations} evaluations")
    return 0


def cmd_bench(args) -> int:
    out = _out_dir(args)
    model = _model(args.model)
    h, w = args.height, args.width
    if args.baseline:
        base = _model(args.baseline)
        report = bench_pair(base, model, h, w, args.warmup, args.rounds, args.seed, args.threads)
    else:
        report = bench(model, h, w, args.warmup, args.rounds, args.seed, args.threads)
    header = effective_config("bench", args)
    _write(out / "bench.csv", timing_csv(report, header))
    table = count_flops(model, h, w)
    _write(out / "bench_cost.csv", cost_table_csv(table, header))
    if args.svg:
        from .plot import bar_chart
        _write(out / "bench_flops.svg", bar_chart([r.layer for r in table.rows],
                                                  [r.flops for r in table.rows], "FLOPs",
                                                  f"per-layer FLOPs at {h}x{w}"))
    msg = f"mean {report.mean * 1e3:.2f} ms over {report.rounds} rounds"
    if report.speedup is not None:
        msg += f"; speedup {report.speedup:.3f}x over baseline"
    print(msg)
    return 0


def cmd_eval(args) -> int:
    out = _out_dir(args)
    model = _model(args.model)
    images = _images(args.data, model.config.downsample)
    rows = []
    for i in range(images.shape[0]):
        from .tensor import Tensor
        res = evaluate(model, Tensor(images.data[i:i + 1]))
        rows.append([i, _f(res.bpp), _f(res.mse), _f(res.psnr)])
    total = evaluate(model, images)
    rows.append(["all", _f(total.bpp), _f(total.mse), _f(total.psnr)])
    _write(out / "eval.csv", _csv(effective_config("eval", args), ["image", "bpp", "mse", "psnr"], rows))
    print(f"{images.shape[0]} images: bpp {total.bpp:.4f}, PSNR {total.psnr:.2f} dB")
    return 0


def cmd_sweep(args) -> int:
    out = _out_dir(args)
    cfg = _train_config(args)
    config = _channel_config(args)
    template = build_model(config, GateConfig(args.gate_mode, args.epsilon, args.tau), seed=args.seed)
    data = _images(args.data, config.downsample)
    holdout = _images(args.holdout, config.downsample) if args.holdout else None
    report = gamma_sweep(template, data, cfg, args.gammas, holdout, workers=args.workers)
    slots = [sid for sid, _, _ in report.rows[0].per_layer] if report.rows else []
    rows = [[_f(r.gamma), _f(r.psnr), _f(r.bpp), _f(r.mean_sparsity)] + [k for _, k, _ in r.per_layer]
            for r in report.rows]
    header = effective_config("sweep", args)
    _write(out / "sweep.csv", _csv(header, ["gamma", "psnr", "bpp", "mean_sparsity"] +
                                   [f"kept_{s}" for s in slots], rows))
    if args.svg:
        from .plot import line_chart
        pts = [(r.mean_sparsity, r.psnr) for r in report.rows]
        _write(out / "sweep.svg", line_chart({"gamma sweep": pts}, "effective channel ratio",
                                             "PSNR (dB)", "PSNR vs. effective channel ratio"))
    for r in report.rows:
        print(f"gamma {r.gamma:g}: PSNR {r.psnr:.2f} dB, bpp {r.bpp:.4f}, "
              f"channel ratio {r.mean_sparsity:.3f}")
    return 0


# ---------------------------------------------------------------- parser


def _add_common(p):
    p.add_argument("--config", help="key = value file; flags override its values")
    p.add_argument("--out", help="output directory (default: $SLIMNIC_OUT or .)")
    p.add_argument("--seed", type=int, default=0)


def _add_training(p):
    desk_ga, desk_gs = ChannelConfig.desk().widths()
    d = TrainConfig()
    p.add_argument("--data", default="synthetic:1:16:64",
                   help="PPM directory/file or synthetic:<seed>:<count>:<size>")
    p.add_argument("--holdout", default="synthetic:2:4:64")
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--lmbda", "--lambda", dest="lmbda", type=float, default=DEFAULT_LAMBDA)
    p.add_argument("--lr", type=float, default=d.lr)
    p.add_argument("--mask-lr", type=float, default=d.mask_lr)
    p.add_argument("--batch-size", type=int, default=d.batch_size)
    p.add_argument("--patch-size", type=int, default=d.patch_size)
    p.add_argument("--lr-halve-step", type=int, default=None)
    p.add_argument("--gate-mode", choices=MODES, default=DETERMINISTIC)
    p.add_argument("--epsilon", type=float, default=4.0)
    p.add_argument("--tau", type=float, default=1.0)
    p.add_argument("--ga-widths", type=_ints, default=desk_ga)
    p.add_argument("--gs-widths", type=_ints, default=desk_gs)
    p.add_argument("--kernel", type=int, default=5)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog=PROG, description="Channel-masked learned image codec toolkit.")
    parser.add_argument("--version", action="version", version=f"{PROG} {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train a codec (with mask slots unless --no-abcm)")
    _add_common(p)
    _add_training(p)
    p.add_argument("--gamma", type=float, default=DEFAULT_GAMMA)
    p.add_argument("--no-abcm", action="store_true")
    p.add_argument("--model-out", default="model.abcm")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("prune", help="slice a masked model to its kept channels and verify it")
    _add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--inputs", default="synthetic:3:4:64")
    p.add_argument("--tolerance", type=float, default=0.0)
    p.add_argument("--quality", default="desk", help="tag for the comparison row")
    p.add_argument("--model-out", default="slim.abcm")
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("search", help="greedy per-layer channel search")
    _add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--data", default="synthetic:2:4:64")
    p.add_argument("--threshold", type=_floats, default=[1.0], help="PSNR drop %%, comma list")
    p.add_argument("--order", choices=ORDERS, default=PAIRED)
    p.add_argument("--start", choices=("gates", "dense"), default="gates")
    p.add_argument("--svg", action="store_true")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("bench", help="time eval-phase inference")
    _add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--baseline", help="second model; reports speedup baseline/model")
    p.add_argument("--height", type=int, default=256)
    p.add_argument("--width", type=int, default=256)
    p.add_argument("--warmup", type=int, default=DEFAULT_WARMUP)
    p.add_argument("--rounds", type=int, default=DEFAULT_ROUNDS)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--svg", action="store_true")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("eval", help="bpp and PSNR on an image set")
    _add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--data", default="synthetic:2:4:64")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="gamma ablation: one training run per gamma")
    _add_common(p)
    _add_training(p)
    p.add_argument("--gammas", type=_floats, default=[0.0, 0.01, 0.1])
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--svg", action="store_true")
    p.set_defaults(func=cmd_sweep)
    return parser


def parse_args(argv: Sequence[str]) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        sub = parser._subparsers._group_actions[0].choices[args.command]
        _apply_file_defaults(sub, read_config_file(args.config))
        args = parser.parse_args(argv)
    return args


def run(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse_args(argv)
    except _UsageError as err:
        print(str(err), file=sys.stderr)
        return 2
    except CliError as err:
        print(f"{PROG}: error: {err}", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except DegeneratePlanError as err:
        print(f"{PROG}: error: {err}", file=sys.stderr)
        return 1
    except (CliError, SlimNICError, FileNotFoundError) as err:
        print(f"{PROG}: error: {err}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())
