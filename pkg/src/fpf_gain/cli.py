"""Command-line entry point.

    fpf-gain <command> --config <path> [--seed n] [--out path] [--threads k]

The config file is a flat JSON object. Reserved keys are ``command``,
``seed``, ``output`` and ``threads``; every other key is a parameter of the
command. Flags override the file. Each run writes the results CSV and a
sidecar ``<output>.config.json`` holding the effective config, the seed and
the package version.
"""

from __future__ import annotations

import argparse
import copy
import csv
import io
import json
import logging
import math
import os
import sys
import tempfile
from dataclasses import dataclass, field

import numpy as np

from . import __version__, experiments
from .errors import FpfGainError
from .gain import METHOD_CONSTANT, METHOD_DIFFUSION_MAP, ConstantGain, diffusion_map_gain, median_bandwidth
from .oracles import BenesParams

log = logging.getLogger("fpf_gain")

EXIT_OK = 0
EXIT_IO = 1
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3

COMMANDS = ("gain-sweep", "filter-static", "benes", "bench", "gain-once")
RESERVED = ("command", "seed", "output", "threads")

CSV_COLUMNS = {
    "gain-sweep": ["epsilon", "N", "d", "method", "mse", "wall_time_s"],
    "filter-static": ["t", "method", "mse"],
    "benes": ["t", "method", "mse"],
    "bench": ["N", "method", "seconds"],
}


class ConfigError(ValueError):
    """Invalid run configuration; ``path`` names the offending field."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


# parameter schemas: name -> (default, validator)


def _int(lo=None):
    def check(path, v):
        if isinstance(v, bool) or not isinstance(v, int):
            if isinstance(v, float) and v.is_integer():
                v = int(v)
            else:
                raise ConfigError(path, f"expected an integer, got {v!r}")
        if lo is not None and v < lo:
            raise ConfigError(path, f"must be >= {lo}, got {v}")
        return v
    return check


def _float(positive=False, nonneg=False, optional=False):
    def check(path, v):
        if v is None and optional:
            return None
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ConfigError(path, f"expected a number, got {v!r}")
        v = float(v)
        if not math.isfinite(v):
            raise ConfigError(path, f"must be finite, got {v}")
        if positive and not v > 0:
            raise ConfigError(path, f"must be positive, got {v}")
        if nonneg and v < 0:
            raise ConfigError(path, f"must be non-negative, got {v}")
        return v
    return check


def _bool(path, v):
    if not isinstance(v, bool):
        raise ConfigError(path, f"expected true or false, got {v!r}")
    return v


def _list(item, increasing=False):
    def check(path, v):
        if not isinstance(v, list) or not v:
            raise ConfigError(path, "expected a non-empty list")
        out = [item(f"{path}[{i}]", x) for i, x in enumerate(v)]
        if increasing and any(b <= a for a, b in zip(out, out[1:])):
            raise ConfigError(path, "must be strictly increasing")
        return out
    return check


def _choice(options):
    def check(path, v):
        if v not in options:
            raise ConfigError(path, f"must be one of {sorted(options)}, got {v!r}")
        return v
    return check


def _positions(path, v):
    if not isinstance(v, list) or len(v) < 2:
        raise ConfigError(path, "expected a list of at least 2 particles")
    rows = []
    for i, p in enumerate(v):
        p = p if isinstance(p, list) else [p]
        rows.append([_float()(f"{path}[{i}]", c) for c in p])
    if len({len(r) for r in rows}) != 1 or not rows[0]:
        raise ConfigError(path, "all particles need the same non-zero dimension")
    return rows


_DEFAULT_EPSILONS = [float(e) for e in np.logspace(-2, 1, 13)]

SCHEMAS = {
    "gain-sweep": {
        "Ns": ([200], _list(_int(2))),
        "dims": ([1], _list(_int(1))),
        "sigma_sq": (0.2, _float(positive=True)),
        "M": (100, _int(1)),
        "epsilons": (_DEFAULT_EPSILONS, _list(_float(positive=True))),
        "iterations": (1000, _int(1)),
        "tol": (1e-10, _float(nonneg=True)),
        "methods": ([METHOD_CONSTANT, METHOD_DIFFUSION_MAP],
                    _list(_choice({METHOD_CONSTANT, METHOD_DIFFUSION_MAP, "exact-oracle"}))),
        "timing": (False, _bool),
    },
    "filter-static": {
        "N": (200, _int(2)),
        "M": (30, _int(1)),
        "sigma_w": (0.1, _float(positive=True)),
        "dt": (0.001, _float(positive=True)),
        "steps": (500, _int(1)),
        "epsilon": (0.1, _float(positive=True, optional=True)),
        "iterations": (100, _int(1)),
        "tol": (1e-10, _float(nonneg=True)),
        "warm_start": (False, _bool),
        "reselect": (False, _bool),
        "methods": (list(experiments.FILTER_METHODS), _list(_choice(set(experiments.FILTER_METHODS)))),
    },
    "benes": {
        "mu": (0.5, _float()),
        "sigma_B": (0.8, _float(positive=True)),
        "h1": (0.4, _float()),
        "h2": (0.0, _float()),
        "x0": (1.0, _float()),
        "N": (200, _int(2)),
        "M": (30, _int(1)),
        "dt": (0.01, _float(positive=True)),
        "T": (10.0, _float(positive=True)),
        "epsilon": (None, _float(positive=True, optional=True)),
        "iterations": (100, _int(1)),
        "tol": (1e-10, _float(nonneg=True)),
        "warm_start": (True, _bool),
        "reselect": (True, _bool),
        "methods": (list(experiments.FILTER_METHODS), _list(_choice(set(experiments.FILTER_METHODS)))),
    },
    "bench": {
        "Ns": ([250, 500, 1000, 2000], _list(_int(2), increasing=True)),
        "d": (1, _int(1)),
        "repeats": (5, _int(1)),
        "iterations": (100, _int(1)),
    },
    "gain-once": {
        "positions": ([[0.0], [1.0]], _positions),
        "epsilon": (0.25, _float(positive=True, optional=True)),
        "iterations": (1000, _int(1)),
        "tol": (1e-10, _float(nonneg=True)),
        "h": ("x", _choice({"x", "abs"})),
        "methods": ([METHOD_DIFFUSION_MAP, METHOD_CONSTANT],
                    _list(_choice({METHOD_CONSTANT, METHOD_DIFFUSION_MAP}))),
    },
}


@dataclass
class RunConfig:
    command: str
    seed: int
    output: str
    threads: int = 1
    params: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {"command": self.command, "seed": self.seed, "output": self.output, "threads": self.threads}
        out.update(copy.deepcopy(self.params))
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def parse_config(data, command: str | None = None, seed=None, output=None, threads=None) -> RunConfig:
    """Validate a config mapping (or JSON text) and fill in defaults.

    Keyword arguments override the corresponding entries of ``data``.

    Raises:
        ConfigError: on unknown keys, missing required fields or
            out-of-range values.
    """
    if isinstance(data, (str, bytes)):
        try:
            data = json.loads(data)
        except json.JSONDecodeError as exc:
            raise ConfigError("<config>", f"invalid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("<config>", "expected a JSON object")
    data = dict(data)
    file_command = data.pop("command", None)
    if command is None:
        command = file_command
    elif file_command is not None and file_command != command:
        raise ConfigError("command", f"config is for {file_command!r}, not {command!r}")
    if command not in COMMANDS:
        raise ConfigError("command", f"must be one of {list(COMMANDS)}, got {command!r}")

    file_seed, file_output, file_threads = data.pop("seed", None), data.pop("output", None), data.pop("threads", 1)
    seed = file_seed if seed is None else seed
    if seed is None:
        raise ConfigError("seed", "required")
    seed = _int(0)("seed", seed)
    output = file_output if output is None else output
    if not isinstance(output, str) or not output:
        raise ConfigError("output", "required (a file path)")
    threads = _int(1)("threads", file_threads if threads is None else threads)

    schema = SCHEMAS[command]
    unknown = sorted(set(data) - set(schema))
    if unknown:
        raise ConfigError(unknown[0], f"unknown key for {command}")
    params = {}
    for name, (default, check) in schema.items():
        params[name] = check(name, data[name]) if name in data else copy.deepcopy(default)
    return RunConfig(command, seed, output, threads, params)


# output


def fmt(v) -> str:
    """CSV cell: ints as-is, floats with 17 significant digits."""
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([fmt(v) for v in row])
    return buf.getvalue()


def atomic_write(path: str, text: str):
    """Write ``text`` to a temporary file beside ``path`` and rename it."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def sidecar_path(output: str) -> str:
    return output + ".config.json"


# commands


class AllCellsFailed(FpfGainError):
    pass


def _gain_sweep(cfg: RunConfig):
    p = cfg.params
    spec = experiments.SweepSpec(
        epsilons=tuple(p["epsilons"]), Ns=tuple(p["Ns"]), dims=tuple(p["dims"]), M=p["M"],
        sigma_sq=p["sigma_sq"], seed=cfg.seed, iterations=p["iterations"], tol=p["tol"],
        methods=tuple(p["methods"]),
    )
    records = experiments.gain_mse_sweep(spec, threads=cfg.threads)
    if all(math.isnan(r.mse) for r in records):
        raise AllCellsFailed("every sweep cell failed")
    rows = [(r.epsilon, r.N, r.d, r.method, r.mse, r.wall_time if p["timing"] else math.nan) for r in records]
    return csv_text(CSV_COLUMNS["gain-sweep"], rows), []


def _series_rows(result: experiments.FilteringResult):
    rows = []
    for k, t in enumerate(result.times):
        for method in sorted(result.mse):
            rows.append((float(t), method, float(result.mse[method][k])))
    return rows


def _settings(p) -> experiments.FilterSettings:
    return experiments.FilterSettings(N=p["N"], epsilon=p["epsilon"], iterations=p["iterations"], tol=p["tol"],
                                      warm_start=p["warm_start"], reselect=p["reselect"])


def _filter_static(cfg: RunConfig):
    p = cfg.params
    result = experiments.static_filtering_run(
        M=p["M"], methods=tuple(p["methods"]), settings=_settings(p), sigma_w=p["sigma_w"], dt=p["dt"],
        steps=p["steps"], seed=cfg.seed, threads=cfg.threads,
    )
    summary = [f"time-averaged mse {m}: {fmt(result.time_average(m))}" for m in sorted(result.mse)]
    return csv_text(CSV_COLUMNS["filter-static"], _series_rows(result)), summary


def _benes(cfg: RunConfig):
    p = cfg.params
    params = BenesParams(mu=p["mu"], sigma_B=p["sigma_B"], h1=p["h1"], h2=p["h2"], x0=p["x0"])
    result = experiments.benes_run(params, M=p["M"], methods=tuple(p["methods"]), settings=_settings(p),
                                   dt=p["dt"], T=p["T"], seed=cfg.seed, threads=cfg.threads)
    summary = [f"time-averaged mse {m}: {fmt(result.time_average(m))}" for m in sorted(result.mse)]
    return csv_text(CSV_COLUMNS["benes"], _series_rows(result)), summary


def _bench(cfg: RunConfig):
    p = cfg.params
    records, slopes = experiments.runtime_bench(p["Ns"], d=p["d"], repeats=p["repeats"],
                                                iterations=p["iterations"], seed=cfg.seed)
    rows = [(r.N, r.method, r.seconds) for r in records]
    summary = [f"slope {m}: {slopes[m]:.3f}" for m in sorted(slopes)]
    return csv_text(CSV_COLUMNS["bench"], rows), summary


def _gain_once(cfg: RunConfig):
    p = cfg.params
    x = np.asarray(p["positions"], dtype=float)
    h = x[:, 0] if p["h"] == "x" else np.abs(x[:, 0])
    d = x.shape[1]
    rows = []
    for method in p["methods"]:
        if method == METHOD_DIFFUSION_MAP:
            eps = p["epsilon"] if p["epsilon"] is not None else median_bandwidth(x)
            gains = diffusion_map_gain(x, h, eps, L=p["iterations"], tol=p["tol"])[0].gains
        else:
            gains = ConstantGain()(x, h).gains
        rows += [(i, method, *gains[i]) for i in range(x.shape[0])]
    header = ["particle", "method"] + [f"k_{j + 1}" for j in range(d)]
    text = csv_text(header, rows)
    return text, text.rstrip("\n").split("\n")


RUNNERS = {
    "gain-sweep": _gain_sweep,
    "filter-static": _filter_static,
    "benes": _benes,
    "bench": _bench,
    "gain-once": _gain_once,
}


def run(cfg: RunConfig, stdout=None) -> int:
    """Execute ``cfg``, write the CSV and sidecar, return the exit status."""
    stdout = sys.stdout if stdout is None else stdout
    try:
        text, summary = RUNNERS[cfg.command](cfg)
    except FpfGainError as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERICAL
    sidecar = {"config": cfg.to_dict(), "seed": cfg.seed, "version": __version__}
    try:
        atomic_write(cfg.output, text)
        atomic_write(sidecar_path(cfg.output), json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        log.error("cannot write output: %s", exc)
        return EXIT_IO
    for line in summary:
        print(line, file=stdout)
    return EXIT_OK


def _configure_logging():
    level = os.environ.get("FPF_GAIN_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fpf-gain", description="Feedback particle filter gain experiments.")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--out", help="results CSV path")
    parser.add_argument("--threads", type=int)
    return parser


def main(argv=None) -> int:
    _configure_logging()
    args = build_parser().parse_args(argv)
    data = {}
    if args.config:
        try:
            with open(args.config) as fh:
                data = fh.read()
        except OSError as exc:
            print(f"error: cannot read config: {exc}", file=sys.stderr)
            return EXIT_IO
    try:
        cfg = parse_config(data, command=args.command, seed=args.seed, output=args.out, threads=args.threads)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return run(cfg)


if __name__ == "__main__":
    sys.exit(main())
