"""``fp8emu`` command line: format tables, numerical studies, training.

Exit status: 0 success, 1 usage error, 2 data or I/O error, 3 divergence.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
import time
import zipfile
from dataclasses import replace
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np

from fp8emu import __version__
from fp8emu.config import (
    FORMAT_ROLES,
    ROUNDING_ROLES,
    ConfigError,
    RunConfig,
    load_config,
    merge,
    parse_triple,
)
from fp8emu.data import DataError, SyntheticSpec, load_digits, load_idx_dataset, load_synthetic
from fp8emu.experiments import (
    DRIFT_COLUMNS,
    ROUND_COLUMNS,
    SWEEP_COLUMNS,
    SweepSpec,
    accumulation_drift,
    captured_chunk_sweep,
    chunk_sweep,
    rounding_update_study,
    synthetic_gradient_operands,
)
from fp8emu.kernels import KernelStats
from fp8emu.minifloat import FP16, NEAREST, STOCHASTIC, RoundingMode, format_by_name, value_table
from fp8emu.nn import (
    Dataset,
    DivergenceError,
    Network,
    OptimizerConfig,
    PrecisionPolicy,
    evaluate,
    train,
)
from fp8emu.nn.layers import Conv2d

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3
TRAIN_COLUMNS = ["epoch", "train_loss", "test_error", "saturation_count"]
MNIST_FILES = ("train-images-idx3-ubyte", "train-labels-idx1-ubyte",
               "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# --- argument parsing ---------------------------------------------------------

def _int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(s) for s in text.split(",") if s.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _lengths(text: str) -> tuple[int, ...]:
    """``a..b`` spans the powers of two from a to b; otherwise a comma list."""
    if ".." in text:
        lo, hi = text.split("..", 1)
        try:
            a, b = int(lo), int(hi)
        except ValueError:
            raise argparse.ArgumentTypeError(f"bad range {text!r}")
        if a < 1 or b < a or a & (a - 1) or b & (b - 1):
            raise argparse.ArgumentTypeError(f"range ends must be powers of two with a <= b: {text!r}")
        out, n = [], a
        while n <= b:
            out.append(n)
            n *= 2
        return tuple(out)
    return _int_list(text)


def _format_override(text: str) -> tuple[str, tuple[int, int, int]]:
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected ROLE=exp,man[,bias], got {text!r}")
    role, spec = text.split("=", 1)
    role = role.strip()
    if role not in FORMAT_ROLES:
        raise argparse.ArgumentTypeError(f"unknown format role {role!r}; choose from {FORMAT_ROLES}")
    try:
        return role, parse_triple(spec)
    except ConfigError as e:
        raise argparse.ArgumentTypeError(str(e))


def _mode(text: str) -> str:
    try:
        return RoundingMode.parse(text).value
    except ValueError as e:
        raise argparse.ArgumentTypeError(str(e))


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="INI config file; command-line flags override it")
    common.add_argument("--seed", type=int)
    common.add_argument("--output-dir", help="defaults to $FP8EMU_OUTPUT_DIR or ./runs")
    common.add_argument("--format", dest="formats", action="append", type=_format_override,
                        metavar="ROLE=E,M[,BIAS]",
                        help=f"override a format; roles: {', '.join(FORMAT_ROLES)}")
    common.add_argument("--chunk", type=int, help="chunk length for every GEMM (>= 1)")
    for role in ROUNDING_ROLES:
        common.add_argument(f"--{role}-rounding", type=_mode, metavar="MODE")

    p = _Parser(prog="fp8emu", description="Reduced-precision training emulator.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="subcommand", required=True, parser_class=_Parser)

    d = sub.add_parser("dump-format", parents=[common], help="print every value of a format")
    d.add_argument("--name", dest="format", help="fp8, fp16 or e<E>m<M>[b<bias>]")

    d = sub.add_parser("drift", parents=[common], help="long-sum accumulation error")
    d.add_argument("--lengths", type=_lengths)
    d.add_argument("--chunks", type=_int_list)
    d.add_argument("--mode", dest="modes", action="append", type=_mode)
    d.add_argument("--trials", type=int)
    d.add_argument("--mean", type=float)
    d.add_argument("--stdev", type=float)

    def training_flags(sp, policy=True):
        sp.add_argument("--model")
        sp.add_argument("--dataset", choices=["digits", "mnist", "synthetic"])
        sp.add_argument("--data-dir")
        sp.add_argument("--upsample", type=int)
        sp.add_argument("--border", type=int)
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--batch-size", type=int)
        sp.add_argument("--learning-rate", "--lr", type=float)
        sp.add_argument("--momentum", type=float)
        sp.add_argument("--l2-lambda", type=float)
        sp.add_argument("--loss-scale", type=float)
        if policy:
            sp.add_argument("--policy", choices=["fp8", "fp32", "update-nearest", "update-stochastic"])

    d = sub.add_parser("chunk-sweep", parents=[common], help="GEMM error versus chunk length")
    d.add_argument("--source", choices=["captured", "synthetic"])
    d.add_argument("--chunks", type=_int_list, help="0 stands for a single chunk")
    d.add_argument("--warmup-epochs", type=int)
    d.add_argument("--batches", type=int, help="captured minibatches to average over")
    d.add_argument("--rows", type=int)
    d.add_argument("--inner", type=int)
    d.add_argument("--cols", type=int)
    for flag in ("--model", "--dataset", "--data-dir", "--upsample", "--border", "--batch-size",
                 "--learning-rate", "--momentum", "--l2-lambda", "--loss-scale"):
        kw: dict[str, Any] = {}
        if flag in ("--upsample", "--border", "--batch-size"):
            kw["type"] = int
        elif flag in ("--learning-rate", "--momentum", "--l2-lambda", "--loss-scale"):
            kw["type"] = float
        d.add_argument(flag, **kw)

    d = sub.add_parser("round-study", parents=[common], help="nearest vs stochastic updates")
    training_flags(d, policy=False)
    d.add_argument("--seeds", type=_int_list)
    d.add_argument("--classes", type=int)
    d.add_argument("--dimension", type=int)
    d.add_argument("--separation", type=float)
    d.add_argument("--count", type=int)

    d = sub.add_parser("train", parents=[common], help="train a model")
    training_flags(d)
    d.add_argument("--classes", type=int)
    d.add_argument("--dimension", type=int)
    d.add_argument("--separation", type=float)
    d.add_argument("--count", type=int)

    d = sub.add_parser("eval", parents=[common], help="evaluate a trained run directory")
    d.add_argument("run_dir", nargs="?")
    d.add_argument("--batch-size", type=int)
    return p


_NOT_PARAMS = {"subcommand", "config", "seed", "output_dir", "formats", "chunk"} | {
    f"{r}_rounding" for r in ROUNDING_ROLES}


def parse_args(argv: Optional[Sequence[str]] = None) -> RunConfig:
    """Parse argv into a merged RunConfig; raises UsageError on bad input."""
    ns = build_parser().parse_args(argv)
    cli: dict[str, Any] = {
        "seed": ns.seed,
        "output_dir": ns.output_dir,
        "chunk": ns.chunk,
        "formats": dict(ns.formats or []),
        "rounding": {r: getattr(ns, f"{r}_rounding") for r in ROUNDING_ROLES
                     if getattr(ns, f"{r}_rounding") is not None},
        "params": {k: (tuple(v) if isinstance(v, list) else v) for k, v in vars(ns).items()
                   if k not in _NOT_PARAMS and v is not None},
    }
    if ns.chunk is not None and ns.chunk < 1:
        raise UsageError(f"--chunk must be >= 1, got {ns.chunk}")
    try:
        file_kw = load_config(ns.config, ns.subcommand) if ns.config else {}
        return merge(ns.subcommand, file_kw, cli, ns.config)
    except ConfigError as e:
        raise UsageError(str(e)) from None


# --- building blocks from a RunConfig -----------------------------------------

def build_policy(cfg: RunConfig, name: Optional[str] = None) -> PrecisionPolicy:
    p = cfg.params
    name = name or p.get("policy", "fp8")
    loss_scale = p.get("loss_scale", 1000.0)
    if name == "fp8":
        pol = PrecisionPolicy.fp8_scheme(cfg.chunk or 64, loss_scale)
    elif name == "fp32":
        pol = PrecisionPolicy.fp32_baseline()
    elif name in ("update-nearest", "update-stochastic"):
        mode = NEAREST if name == "update-nearest" else STOCHASTIC
        pol = PrecisionPolicy.update_study(mode, loss_scale)
    else:
        raise ConfigError(f"unknown policy {name!r}")
    g = pol.gemm
    if cfg.chunk is not None:
        g = g.with_(chunk=cfg.chunk, emulate=True)
    g = g.with_(fp_mult=cfg.format("mult", g.fp_mult), fp_acc=cfg.format("acc", g.fp_acc),
                acc_rounding=cfg.rounding_mode("acc", g.acc_rounding))
    return replace(
        pol, gemm=g,
        first_layer_input_format=cfg.format("input", pol.first_layer_input_format),
        last_layer_gemm_format=cfg.format("last", pol.last_layer_gemm_format),
        error_format=cfg.format("error", pol.error_format),
        update_format=cfg.format("update", pol.update_format),
        update_rounding=cfg.rounding_mode("update", pol.update_rounding),
        compute_weight_rounding=cfg.rounding_mode("compute", pol.compute_weight_rounding),
    )


def build_optimizer(cfg: RunConfig) -> OptimizerConfig:
    p = cfg.params
    try:
        return OptimizerConfig(p["learning_rate"], p["momentum"], p["l2_lambda"])
    except ValueError as e:
        raise ConfigError(str(e)) from None


def load_dataset(cfg: RunConfig) -> Dataset:
    p = cfg.params
    kind = p["dataset"]
    if kind == "digits":
        return load_digits(upsample=p["upsample"], border=p["border"])
    if kind == "mnist":
        if not p["data_dir"]:
            raise DataError("dataset = mnist needs data_dir")
        root = Path(p["data_dir"])
        paths = [root / f for f in MNIST_FILES]
        missing = [str(x) for x in paths if not x.exists()]
        if missing:
            raise DataError(f"missing IDX files: {', '.join(missing)}")
        return load_idx_dataset(*paths)
    if kind == "synthetic":
        try:
            spec = SyntheticSpec(p["classes"], p["dimension"], p["separation"], p["count"], cfg.seed)
        except ValueError as e:
            raise ConfigError(str(e)) from None
        return load_synthetic(spec)
    raise ConfigError(f"unknown dataset {kind!r}")


def build_model(cfg: RunConfig, data: Dataset, policy: PrecisionPolicy) -> Network:
    try:
        return Network.from_spec(cfg.params["model"], data.input_shape, data.classes, policy, cfg.seed)
    except ValueError as e:
        raise ConfigError(f"model: {e}") from None


# --- reporting ----------------------------------------------------------------

def _cell(v: Any) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


def csv_text(rows: list[dict], columns: Sequence[str], comments: Sequence[str] = ()) -> str:
    buf = io.StringIO()
    for c in comments:
        buf.write(f"# {c}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_cell(r[c]) for c in columns])
    return buf.getvalue()


def save_arrays(path: Path, arrays: dict[str, np.ndarray]) -> None:
    """``.npz`` with fixed member timestamps so reruns are byte-identical."""
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            info = zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0))
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arrays[name]), allow_pickle=False)
            zf.writestr(info, buf.getvalue())


def _json_safe(v: Any) -> Any:
    if isinstance(v, dict):
        return {k: _json_safe(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_json_safe(x) for x in v]
    if isinstance(v, (float, np.floating)):
        return float(v) if math.isfinite(v) else None
    if isinstance(v, np.integer):
        return int(v)
    return v


def write_report(cfg: RunConfig, files: dict[str, str], summary: dict[str, Any],
                 arrays: Optional[dict[str, np.ndarray]] = None) -> Path:
    """Write CSVs, the merged config echo and summary.json into the output dir."""
    out = Path(cfg.output_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        for name, text in files.items():
            (out / name).write_text(text)
        (out / "config.ini").write_text(cfg.echo())
        if arrays is not None:
            save_arrays(out / "model.npz", arrays)
        full = {"subcommand": cfg.subcommand, "seed": cfg.seed, "version": __version__,
                **summary}
        (out / "summary.json").write_text(json.dumps(_json_safe(full), indent=2, sort_keys=True) + "\n")
    except OSError as e:
        raise DataError(f"cannot write to output directory {out}: {e.strerror}") from None
    return out


def _formats_meta(policy: PrecisionPolicy) -> dict[str, str]:
    g = policy.gemm
    return {"mult": g.fp_mult.name, "acc": g.fp_acc.name, "chunk": str(g.chunk.length),
            "acc_rounding": g.acc_rounding.value, "update": policy.update_format.name,
            "update_rounding": policy.update_rounding.value}


# --- subcommands --------------------------------------------------------------

def cmd_dump_format(cfg: RunConfig, out=None) -> int:
    out = out or sys.stdout
    try:
        fmt = format_by_name(cfg.params["format"])
    except ValueError as e:
        raise ConfigError(str(e)) from None
    if fmt.total_bits > 16:
        raise ConfigError(f"{fmt.name} has {fmt.total_bits} bits; dump-format lists at most 16")
    out.write(csv_text(value_table(fmt), ["bits", "sign", "exponent", "mantissa", "value"]))
    return EXIT_OK


def cmd_drift(cfg: RunConfig, log=print) -> int:
    p = cfg.params
    mult = cfg.format("mult", FP16)
    acc = cfg.format("acc", FP16)
    chunks = (cfg.chunk,) if cfg.chunk else tuple(p["chunks"])
    modes = tuple(RoundingMode.parse(m) for m in p["modes"])
    spec = SweepSpec(p["mean"], p["stdev"], tuple(p["lengths"]), chunks, modes, p["trials"],
                     cfg.seed, mult, acc)
    t0 = time.perf_counter()
    rows = accumulation_drift(spec)
    for r in rows:
        log(f"n={r['n']:>8} chunk={r['chunk']:>5} {r['mode']:<10} rel_error={r['rel_error']:.4g}")
    note = [f"relative error is the mean over {spec.trials} trials of |acc - ref| / |ref|",
            f"addends uniform mean={spec.mean!r} stdev={spec.stdev!r} in {mult.name}; accumulator {acc.name}"]
    write_report(cfg, {"drift.csv": csv_text(rows, DRIFT_COLUMNS, note)},
                 {"rows": len(rows), "wall_time_s": time.perf_counter() - t0, "diverged": False})
    return EXIT_OK


def cmd_chunk_sweep(cfg: RunConfig, log=print) -> int:
    p = cfg.params
    t0 = time.perf_counter()
    policy = build_policy(cfg, "fp8")
    gemm = policy.gemm
    if p["source"] == "synthetic":
        operands = synthetic_gradient_operands(p["rows"], p["inner"], p["cols"], cfg.seed,
                                               fmt=gemm.fp_mult)
    else:
        data = load_dataset(cfg)
        model = build_model(cfg, data, policy)
        if p["warmup_epochs"]:
            train(model, data, build_optimizer(cfg), p["warmup_epochs"], cfg.seed, p["batch_size"])
        if not any(isinstance(l, Conv2d) for l in model.gemm_layers):
            raise ConfigError(f"model {p['model']!r} has no conv layers to capture")
        try:
            rows = captured_chunk_sweep(model, data.x_train, data.y_train, p["chunks"],
                                        p["batch_size"], p["batches"], gemm)
        except ValueError as e:
            raise ConfigError(str(e)) from None
    if p["source"] == "synthetic":
        rows = chunk_sweep(operands, p["chunks"], gemm)
    for r in rows:
        log(f"{r['operand']:<12} chunk={r['chunk']:>6} l2={r['l2_distance']:.4g}")
    write_report(cfg, {"chunk_sweep.csv": csv_text(rows, SWEEP_COLUMNS)},
                 {"rows": len(rows), "wall_time_s": time.perf_counter() - t0, "diverged": False,
                  "formats": _formats_meta(policy)})
    return EXIT_OK


def cmd_round_study(cfg: RunConfig, log=print) -> int:
    p = cfg.params
    t0 = time.perf_counter()
    data = load_dataset(cfg)
    res = rounding_update_study(p["model"], data, build_optimizer(cfg), p["seeds"], p["epochs"],
                                p["batch_size"], loss_scale=p["loss_scale"])
    for r in res.rows:
        log(f"{r['mode']:<11} seed={r['seed']} test_error={r['test_error']:.3f}")
    modes = sorted({r["mode"] for r in res.rows})
    write_report(cfg, {"round_study.csv": csv_text(res.rows, ROUND_COLUMNS)},
                 {"mean_test_error": {m: res.mean_error(m) for m in modes},
                  "wall_time_s": time.perf_counter() - t0,
                  "diverged": any(r["diverged"] for r in res.rows)})
    return EXIT_OK


def cmd_train(cfg: RunConfig, log=print) -> int:
    p = cfg.params
    data = load_dataset(cfg)
    policy = build_policy(cfg)
    model = build_model(cfg, data, policy)
    opt = build_optimizer(cfg)
    t0 = time.perf_counter()

    def show(row):
        log(f"epoch {row.epoch:>3} loss={row.train_loss:.5g} test_error={row.test_error:.3f}% "
            f"saturations={row.saturation_count}")

    diverged, message = False, ""
    try:
        res = train(model, data, opt, p["epochs"], cfg.seed, p["batch_size"], log=show)
        history, stats = res.history, res.stats
    except DivergenceError as e:
        diverged, message = True, str(e)
        history, stats = e.history, KernelStats()
        log(f"diverged: {message}")
    rows = [vars(r) for r in history]
    summary = {
        "final_test_error": history[-1].test_error,
        "final_train_loss": history[-1].train_loss,
        "epochs_completed": history[-1].epoch,
        "kernel_stats": stats.as_dict(),
        "saturation_count": sum(r.saturation_count for r in history),
        "formats": _formats_meta(policy),
        "model": model.describe(),
        "dataset": data.name,
        "wall_time_s": time.perf_counter() - t0,
        "diverged": diverged,
    }
    if diverged:
        summary["divergence"] = message
    write_report(cfg, {"train_metrics.csv": csv_text(rows, TRAIN_COLUMNS)}, summary,
                 None if diverged else model.state_arrays())
    return EXIT_DIVERGED if diverged else EXIT_OK


def cmd_eval(cfg: RunConfig, log=print) -> int:
    run_dir = cfg.params["run_dir"]
    if not run_dir:
        raise ConfigError("eval needs a run directory")
    run = Path(run_dir)
    if not (run / "config.ini").exists() or not (run / "model.npz").exists():
        raise DataError(f"{run} has no config.ini/model.npz from a completed train run")
    train_cfg = merge("train", load_config(str(run / "config.ini"), "train"), {})
    t0 = time.perf_counter()
    data = load_dataset(train_cfg)
    model = build_model(train_cfg, data, build_policy(train_cfg))
    with np.load(run / "model.npz") as z:
        model.load_state_arrays({k: z[k] for k in z.files})
    err = evaluate(model, data.x_test, data.y_test, cfg.params["batch_size"])
    log(f"test_error={err:.3f}%")
    write_report(cfg, {"eval_metrics.csv": csv_text([{"run_dir": run_dir, "test_error": err}],
                                                    ["run_dir", "test_error"])},
                 {"final_test_error": err, "wall_time_s": time.perf_counter() - t0,
                  "diverged": False})
    return EXIT_OK


COMMANDS = {"dump-format": cmd_dump_format, "drift": cmd_drift, "chunk-sweep": cmd_chunk_sweep,
            "round-study": cmd_round_study, "train": cmd_train, "eval": cmd_eval}


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        cfg = parse_args(argv)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:  # --help / --version
        return int(e.code or 0)
    log = lambda msg: print(msg, file=sys.stderr)
    try:
        if cfg.subcommand == "dump-format":
            return cmd_dump_format(cfg)
        return COMMANDS[cfg.subcommand](cfg, log=log)
    except ConfigError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
