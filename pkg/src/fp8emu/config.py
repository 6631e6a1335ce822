"""Run configuration: INI files merged with command-line overrides.

A run is fully determined by its ``RunConfig``. The file format is plain
``key = value`` lines grouped in sections::

    [run]
    seed = 1
    output_dir = runs/toy

    [formats]
    mult = 5,2,15
    acc = 6,9,31

    [gemm]
    chunk = 64
    acc_rounding = nearest
    update_rounding = stochastic

    [train]
    model = cnn
    epochs = 10

Only the section named after the subcommand is read for experiment
parameters; other sections are ignored. ``echo()`` writes the merged
config back in the same format, and parsing the echo gives an equal
``RunConfig``.
"""

from __future__ import annotations

import configparser
import io
import os
from dataclasses import dataclass, field
from typing import Any, Mapping, Optional

from fp8emu.minifloat import FloatFormat, RoundingMode

OUTPUT_ENV = "FP8EMU_OUTPUT_DIR"
SUBCOMMANDS = ("dump-format", "drift", "chunk-sweep", "round-study", "train", "eval")

# overridable formats, keyed by their role in the precision policy
FORMAT_ROLES = ("mult", "acc", "update", "input", "last", "error")
ROUNDING_ROLES = ("acc", "update", "compute")

_TRAIN = {
    "model": "cnn",
    "policy": "fp8",
    "dataset": "digits",
    "data_dir": "",
    "upsample": 1,
    "border": 0,
    "classes": 2,
    "dimension": 16,
    "separation": 4.0,
    "count": 1024,
    "epochs": 10,
    "batch_size": 64,
    "learning_rate": 0.05,
    "momentum": 0.9,
    "l2_lambda": 1e-4,
    "loss_scale": 1000.0,
}

SCHEMA: dict[str, dict[str, Any]] = {
    "dump-format": {"format": "fp8"},
    "drift": {
        "lengths": (1024, 4096, 16384, 65536, 262144, 1048576),
        "chunks": (1, 8, 32, 64),
        "modes": ("nearest", "stochastic"),
        "trials": 16,
        "mean": 1.0,
        "stdev": 1.0,
    },
    "chunk-sweep": {
        "source": "captured",
        "chunks": (1, 4, 16, 64, 256, 1024, 0),
        "warmup_epochs": 1,
        "batches": 4,
        "rows": 16,
        "inner": 4096,
        "cols": 72,
        **{k: _TRAIN[k] for k in ("model", "dataset", "data_dir", "upsample", "border",
                                  "batch_size", "learning_rate", "momentum", "l2_lambda",
                                  "loss_scale")},
    },
    "round-study": {
        **{k: v for k, v in _TRAIN.items() if k != "policy"},
        "model": "mlp",
        "seeds": (0, 1, 2),
    },
    "train": dict(_TRAIN),
    "eval": {"run_dir": "", "batch_size": 256},
}


class ConfigError(ValueError):
    """Invalid configuration value (reported as a usage error)."""


def default_output_dir() -> str:
    return os.environ.get(OUTPUT_ENV, "runs")


def parse_triple(text: str) -> tuple[int, int, int]:
    """``"5,2"`` or ``"5,2,15"`` or ``"e5m2b15"`` -> (exp, man, bias)."""
    t = text.strip().lower().replace(" ", "")
    try:
        if t.startswith("e"):
            from fp8emu.minifloat import format_by_name
            f = format_by_name(t)
        else:
            parts = [int(p) for p in t.split(",")]
            if len(parts) not in (2, 3):
                raise ValueError
            f = FloatFormat(*parts)
    except (ValueError, TypeError, KeyError) as e:
        raise ConfigError(f"bad format {text!r}: expected exp,man[,bias]") from e
    return (f.exp_bits, f.man_bits, f.bias)


def _parse_value(default: Any, text: str, key: str) -> Any:
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            items = [s.strip() for s in text.split(",") if s.strip()]
            if default and isinstance(default[0], int):
                return tuple(int(s) for s in items)
            return tuple(items)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {text!r}") from None
    return text


def _format_value(v: Any) -> str:
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


@dataclass
class RunConfig:
    subcommand: str
    seed: int = 0
    output_dir: str = field(default_factory=default_output_dir)
    formats: dict[str, tuple[int, int, int]] = field(default_factory=dict)
    chunk: Optional[int] = None
    rounding: dict[str, str] = field(default_factory=dict)
    params: dict[str, Any] = field(default_factory=dict)
    config_path: Optional[str] = field(default=None, compare=False)

    def __post_init__(self):
        if self.subcommand not in SCHEMA:
            raise ConfigError(f"unknown subcommand {self.subcommand!r}")
        merged = dict(SCHEMA[self.subcommand])
        for k, v in self.params.items():
            if k not in merged:
                raise ConfigError(f"unknown key {k!r} for {self.subcommand}")
            merged[k] = v
        self.params = merged
        self.validate()

    def validate(self) -> None:
        if self.chunk is not None and self.chunk < 1:
            raise ConfigError("chunk must be >= 1")
        for role in self.formats:
            if role not in FORMAT_ROLES:
                raise ConfigError(f"unknown format role {role!r}; choose from {FORMAT_ROLES}")
        for role, mode in self.rounding.items():
            if role not in ROUNDING_ROLES:
                raise ConfigError(f"unknown rounding role {role!r}; choose from {ROUNDING_ROLES}")
            try:
                RoundingMode.parse(mode)
            except ValueError as e:
                raise ConfigError(str(e)) from None
        p = self.params
        for key in ("epochs", "trials", "warmup_epochs"):
            if key in p and p[key] < 0:
                raise ConfigError(f"{key} must be >= 0")
        if "trials" in p and p["trials"] < 1:
            raise ConfigError("trials must be >= 1")
        if "batches" in p and p["batches"] < 1:
            raise ConfigError("batches must be >= 1")
        if "batch_size" in p and p["batch_size"] < 1:
            raise ConfigError("batch_size must be >= 1")
        if "chunks" in p:
            bad = [c for c in p["chunks"] if c < (0 if self.subcommand == "chunk-sweep" else 1)]
            if bad:
                raise ConfigError(f"chunk sizes must be >= 1, got {bad}")
        if "lengths" in p and (not p["lengths"] or min(p["lengths"]) < 1):
            raise ConfigError("lengths must be >= 1")
        if "modes" in p:
            for m in p["modes"]:
                try:
                    RoundingMode.parse(m)
                except ValueError as e:
                    raise ConfigError(str(e)) from None

    def format(self, role: str, default: FloatFormat) -> FloatFormat:
        t = self.formats.get(role)
        return FloatFormat(*t) if t else default

    def rounding_mode(self, role: str, default: RoundingMode) -> RoundingMode:
        m = self.rounding.get(role)
        return RoundingMode.parse(m) if m else default

    def echo(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        cp["run"] = {"subcommand": self.subcommand, "seed": str(self.seed),
                     "output_dir": self.output_dir}
        if self.formats:
            cp["formats"] = {k: ",".join(map(str, v)) for k, v in sorted(self.formats.items())}
        gemm = {}
        if self.chunk is not None:
            gemm["chunk"] = str(self.chunk)
        gemm.update({f"{k}_rounding": v for k, v in sorted(self.rounding.items())})
        if gemm:
            cp["gemm"] = gemm
        cp[self.subcommand] = {k: _format_value(v) for k, v in self.params.items()}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()


def read_config_text(text: str, subcommand: str, source: str = "<config>") -> dict[str, Any]:
    """Parse INI text into RunConfig keyword arguments (no defaults applied)."""
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text, source=source)
    except configparser.Error as e:
        raise ConfigError(f"{source}: {e}") from None
    out: dict[str, Any] = {}
    if cp.has_section("run"):
        run = cp["run"]
        for key in run:
            if key not in ("subcommand", "seed", "output_dir"):
                raise ConfigError(f"{source}: unknown key [run] {key}")
        if "seed" in run:
            out["seed"] = _parse_value(0, run["seed"], "seed")
        if "output_dir" in run:
            out["output_dir"] = run["output_dir"]
    if cp.has_section("formats"):
        out["formats"] = {k: parse_triple(v) for k, v in cp["formats"].items()}
    if cp.has_section("gemm"):
        rounding = {}
        for k, v in cp["gemm"].items():
            if k == "chunk":
                out["chunk"] = _parse_value(0, v, "chunk")
            elif k.endswith("_rounding"):
                rounding[k[: -len("_rounding")]] = v.strip()
            else:
                raise ConfigError(f"{source}: unknown key [gemm] {k}")
        out["rounding"] = rounding
    schema = SCHEMA[subcommand]
    if cp.has_section(subcommand):
        params = {}
        for k, v in cp[subcommand].items():
            if k not in schema:
                raise ConfigError(f"{source}: unknown key [{subcommand}] {k}")
            params[k] = _parse_value(schema[k], v, k)
        out["params"] = params
    return out


def load_config(path: str, subcommand: str) -> dict[str, Any]:
    try:
        with open(path) as f:
            text = f.read()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    return read_config_text(text, subcommand, path)


def merge(subcommand: str, file_kw: Mapping[str, Any], cli_kw: Mapping[str, Any],
          config_path: Optional[str] = None) -> RunConfig:
    """Defaults < config file < command line."""
    kw: dict[str, Any] = {"formats": {}, "rounding": {}, "params": {}}
    for src in (file_kw, cli_kw):
        for k, v in src.items():
            if v is None:
                continue
            if k in ("formats", "rounding", "params"):
                kw[k].update(v)
            else:
                kw[k] = v
    return RunConfig(subcommand, config_path=config_path, **kw)
