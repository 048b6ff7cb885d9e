"""Configuration, orchestration, and report emission.

One JSON config document drives everything; CLI flags override config keys
one-for-one, and the environment variable APVERIFY_SEED may override the
seed (only the seed). Reports are byte-stable for a fixed (config, seed):
floats are rounded to 12 significant digits, keys sorted, and the worker
count never reaches the numbers.

Exit codes: 0 pass, 1 a gated claim was violated, 2 config error, 3 i/o
error.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
import time
from dataclasses import asdict, dataclass, field, fields

from . import __version__, experiments
from .duality import Verdict
from .engine import GridSpec
from .errors import ApverifyError, ConfigError, ConstraintViolated, InvalidP, IoError
from .params import ControlParams, CounterexampleParams, DensityVariant, \
    select_counterexample_params

EXPERIMENTS = ("counterexample", "control", "ap-check", "duality-check",
               "bmo-check", "all")

EXIT_PASS = 0
EXIT_VIOLATED = 1
EXIT_CONFIG = 2
EXIT_IO = 3

_SEED_ENV = "APVERIFY_SEED"


@dataclass
class ExperimentConfig:
    """Flat experiment configuration; round-trips through JSON unchanged."""

    experiment: str = "all"
    # Jump-market parameters.
    a: float = 0.5
    p: float = 4.0
    b: float | None = 0.7
    variant: str = "corrected"
    # Control-market parameters.
    mpr: float = 0.5
    maturity: float = 1.0
    vol: float = 0.2
    # Grid.
    dt: float = 2.0 ** -8
    inner_dt: float = 2.0 ** -5
    t_max: float | None = None
    refine_threshold: float = 1.9
    refine_factor: int = 16
    # Sample sizes.
    n_paths: int = 100_000
    n_outer: int = 20_000
    n_outer_states: int = 200
    n_inner: int = 2_000
    # Run control.
    seed: int = 20240
    confidence_level: float = 0.997
    out_dir: str = "out"
    workers: int = 2
    antithetic: bool = False
    paths_csv: bool = False

    def validate(self) -> None:
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(
                f"experiment: unknown value {self.experiment!r}; "
                f"expected one of {EXPERIMENTS}")
        positive = ("dt", "inner_dt", "n_paths", "n_outer", "n_outer_states",
                    "n_inner", "maturity", "vol", "refine_threshold",
                    "refine_factor", "workers")
        for key in positive:
            if not getattr(self, key) > 0:
                raise ConfigError(f"{key}: must be positive, got "
                                  f"{getattr(self, key)}")
        if self.t_max is not None and self.t_max <= 0:
            raise ConfigError(f"t_max: must be positive, got {self.t_max}")
        if not 0.0 < self.confidence_level < 1.0:
            raise ConfigError(
                f"confidence_level: must be in (0, 1), got "
                f"{self.confidence_level}")
        if self.seed < 0:
            raise ConfigError(f"seed: must be nonnegative, got {self.seed}")
        try:
            DensityVariant(self.variant)
        except ValueError:
            raise ConfigError(f"variant: unknown value {self.variant!r}")
        try:
            self.counterexample_params()
        except (InvalidP, ConstraintViolated) as exc:
            raise ConfigError(f"a/p/b: {exc}") from exc
        try:
            self.control_params()
        except ConstraintViolated as exc:
            raise ConfigError(f"mpr/maturity/vol: {exc}") from exc

    def counterexample_params(self) -> CounterexampleParams:
        return select_counterexample_params(self.a, self.p, self.b,
                                            self.variant_enum())

    def variant_enum(self) -> DensityVariant:
        return DensityVariant(self.variant)

    def control_params(self) -> ControlParams:
        return ControlParams(mpr=self.mpr, maturity=self.maturity,
                             vol=self.vol)

    def grid(self, params: CounterexampleParams, inner: bool = False
             ) -> GridSpec:
        dt = self.inner_dt if inner else self.dt
        if self.t_max is None:
            return GridSpec.for_params(params, dt=dt,
                                       refine_threshold=self.refine_threshold,
                                       refine_factor=self.refine_factor)
        return GridSpec(t_max=self.t_max, dt=dt,
                        refine_threshold=self.refine_threshold,
                        refine_factor=self.refine_factor)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, obj: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ConfigError(f"{sorted(unknown)[0]}: unknown config key")
        cfg = cls(**obj)
        cfg.validate()
        return cfg


@dataclass
class RunManifest:
    """Run record: config echo, verdicts, artifact paths, timing."""

    config: dict
    version: str
    wall_time_s: float
    verdicts: dict[str, str]
    gated: dict[str, bool]
    censored_mass: float | None
    artifacts: list[str]
    error: str | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def _round_floats(obj, sig: int = 12):
    """Recursively round floats to ``sig`` significant digits for byte-stable
    JSON (shortest-repr of the rounded double is deterministic)."""
    if isinstance(obj, float):
        if obj != obj or obj in (math.inf, -math.inf):
            return repr(obj)
        return float(f"{obj:.{sig}g}")
    if isinstance(obj, dict):
        return {k: _round_floats(v, sig) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round_floats(v, sig) for v in obj]
    if isinstance(obj, Verdict):
        return obj.value
    if isinstance(obj, bool) or obj is None or isinstance(obj, (int, str)):
        return obj
    return repr(obj)


def _write_json(path: str, obj) -> None:
    try:
        with open(path, "w") as fh:
            json.dump(_round_floats(obj), fh, sort_keys=True, indent=2)
            fh.write("\n")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def _write_csv(path: str, rows: list[dict]) -> None:
    if not rows:
        return
    cols = sorted({k for row in rows for k in row})
    try:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=cols)
            writer.writeheader()
            for row in rows:
                writer.writerow({k: _csv_cell(row.get(k)) for k in cols})
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def _csv_cell(v):
    if isinstance(v, float):
        return f"{v:.12g}"
    return v


def run_experiment(config: ExperimentConfig) -> RunManifest:
    """Execute the configured suite and write reports to ``out_dir``.

    The manifest is written even when a section fails part-way; the summary
    holds only deterministic content.
    """
    config.validate()
    t0 = time.time()
    try:
        os.makedirs(config.out_dir, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create out_dir {config.out_dir}: {exc}") from exc

    verdicts: dict[str, str] = {}
    gated: dict[str, bool] = {}
    estimates: dict = {}
    tables: dict[str, list[dict]] = {}
    censored_mass = None
    error = None
    try:
        sections = experiments.run_sections(config)
        for sec in sections:
            for key, verdict in sec.verdicts.items():
                verdicts[key] = verdict.value
                gated[key] = sec.gated.get(key, True)
            estimates[sec.name] = sec.estimates
            for stem, rows in sec.tables.items():
                tables.setdefault(stem, []).extend(rows)
            if sec.censored_mass is not None:
                censored_mass = sec.censored_mass
    except ApverifyError:
        raise
    except Exception as exc:  # pragma: no cover - defensive
        error = f"{type(exc).__name__}: {exc}"

    artifacts = []
    summary = {
        "config": config.to_dict(),
        "version": __version__,
        "experiment": config.experiment,
        "verdicts": verdicts,
        "gated": gated,
        "estimates": estimates,
        "censored_mass": censored_mass,
    }
    summary_path = os.path.join(config.out_dir, "summary.json")
    _write_json(summary_path, summary)
    artifacts.append(summary_path)

    ap_rows = []
    duality_rows = []
    for stem, rows in tables.items():
        if stem.startswith(("ap_", "prop1", "sandwich", "sharpness", "bmo",
                            "tail")):
            for row in rows:
                ap_rows.append({"table": stem, **row})
        else:
            for row in rows:
                duality_rows.append({"table": stem, **row})
    if ap_rows:
        path = os.path.join(config.out_dir, "ap_report.csv")
        _write_csv(path, ap_rows)
        artifacts.append(path)
    if duality_rows:
        path = os.path.join(config.out_dir, "duality_report.csv")
        _write_csv(path, duality_rows)
        artifacts.append(path)

    if config.paths_csv and config.experiment in ("counterexample",
                                                  "duality-check", "all"):
        from .engine import STREAM_MAIN, simulate_paths, write_paths_csv
        params = config.counterexample_params()
        bundle = simulate_paths(params, config.grid(params), config.n_paths,
                                config.seed, stream=STREAM_MAIN,
                                workers=config.workers,
                                antithetic=config.antithetic)
        path = os.path.join(config.out_dir, "paths.csv")
        write_paths_csv(bundle, path)
        artifacts.append(path)

    manifest = RunManifest(config.to_dict(), __version__,
                           time.time() - t0, verdicts, gated, censored_mass,
                           artifacts, error)
    manifest_path = os.path.join(config.out_dir, "manifest.json")
    _write_json(manifest_path, manifest.to_dict())
    return manifest


def exit_code_for(manifest: RunManifest) -> int:
    if manifest.error:
        return EXIT_VIOLATED
    for key, verdict in manifest.verdicts.items():
        if manifest.gated.get(key, True) and verdict == Verdict.VIOLATED.value:
            return EXIT_VIOLATED
    return EXIT_PASS


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="apverify",
        description="Monte Carlo diagnostics for martingale-measure "
                    "conditions on two built-in markets.")
    parser.add_argument("experiment", choices=EXPERIMENTS)
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("--a", type=float, help="relative risk-aversion")
    parser.add_argument("--p", type=float, help="functional exponent")
    parser.add_argument("--b", type=float,
                        help="density exponent (omit to auto-search)")
    parser.add_argument("--paths", type=int, dest="n_paths",
                        help="terminal ensemble size")
    parser.add_argument("--inner", type=int, dest="n_inner",
                        help="inner ensemble size")
    parser.add_argument("--outer", type=int, dest="n_outer",
                        help="outer ensemble size for nested campaigns")
    parser.add_argument("--outer-states", type=int, dest="n_outer_states",
                        help="stopped states per rule")
    parser.add_argument("--seed", type=int,
                        help=f"master seed (env {_SEED_ENV} overrides the "
                             "config; this flag overrides both)")
    parser.add_argument("--dt", type=float, help="base time step")
    parser.add_argument("--tmax", type=float, dest="t_max",
                        help="horizon cap (default: from the tail policy)")
    parser.add_argument("--variant", choices=[v.value for v in DensityVariant])
    parser.add_argument("--workers", type=int,
                        help="worker threads (never affects outputs)")
    parser.add_argument("--out", dest="out_dir", help="output directory")
    parser.add_argument("--antithetic", action="store_true", default=None)
    parser.add_argument("--paths-csv", action="store_true", default=None,
                        dest="paths_csv",
                        help="emit per-path summary paths.csv")
    return parser


def config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    obj: dict = {}
    if args.config:
        try:
            with open(args.config) as fh:
                obj = json.load(fh)
        except OSError as exc:
            raise IoError(f"cannot read config {args.config}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config: invalid JSON ({exc})") from exc
    obj["experiment"] = args.experiment
    if _SEED_ENV in os.environ:
        try:
            obj["seed"] = int(os.environ[_SEED_ENV])
        except ValueError as exc:
            raise ConfigError(f"seed: invalid {_SEED_ENV} value "
                              f"{os.environ[_SEED_ENV]!r}") from exc
    for key in ("a", "p", "b", "n_paths", "n_inner", "n_outer",
                "n_outer_states", "seed", "dt", "t_max", "variant",
                "workers", "out_dir", "antithetic", "paths_csv"):
        value = getattr(args, key, None)
        if value is not None:
            obj[key] = value
    return ExperimentConfig.from_dict(obj)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = config_from_args(args)
        manifest = run_experiment(config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except IoError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    for key in sorted(manifest.verdicts):
        gate = "gated" if manifest.gated.get(key, True) else "info"
        print(f"{manifest.verdicts[key]:<24} [{gate}] {key}")
    code = exit_code_for(manifest)
    print(f"exit {code}; reports in {config.out_dir}")
    return code


if __name__ == "__main__":
    sys.exit(main())
