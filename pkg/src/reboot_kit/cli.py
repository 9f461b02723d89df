"""Config-driven experiment runner.

Scenario files are flat ``key = value`` text (with repeated ``m =`` lines
for the shard grid and ``#`` comments), chosen over nested formats for
diffability.  A run writes ``metrics.csv`` (one row per shard count and
method, byte-deterministic given config and seed) and ``figure.plot``, a
gnuplot script that lays the MSE and bias panels out side by side.
"""

from __future__ import annotations

import argparse
import csv
import math
import os
import sys
from dataclasses import dataclass, replace
from importlib import resources
from typing import Optional, Sequence

from .sim import MetricsRow, Scenario, ScenarioKind, monte_carlo

THREADS_ENV_VAR = "REBOOT_KIT_THREADS"

CSV_COLUMNS = (
    "scenario",
    "method",
    "m",
    "n",
    "replications_used",
    "failures",
    "mse",
    "mse_se",
    "bias",
)


class ParseError(Exception):
    """Malformed scenario text; the message carries the line number."""


class ValidationError(Exception):
    """Well-formed scenario text describing an invalid scenario."""


@dataclass(frozen=True)
class RunConfig:
    """One CLI invocation: scenario file, output directory, and overrides."""

    scenario_path: str
    out_dir: str = "."
    methods: Optional[tuple[str, ...]] = None
    threads: int = 0
    replications: Optional[int] = None
    master_seed: Optional[int] = None


_SCALAR_KEYS = {
    "name": str,
    "kind": str,
    "N": int,
    "p": int,
    "replications": int,
    "master_seed": int,
    "n_tilde_factor": float,
    "savgm_rate": float,
    "rho": float,
    "pr_t_max": int,
    "pr_mu": float,
    "pr_refit_mu": float,
    "reboot_features": str,
}
_LIST_KEYS = {"beta_star", "csl_rounds"}
_KNOWN_KEYS = set(_SCALAR_KEYS) | _LIST_KEYS | {"m"}
_REQUIRED_KEYS = ("name", "kind", "N", "p", "beta_star", "replications", "master_seed")


def parse_config(text: str) -> Scenario:
    """Parse and validate scenario text into a :class:`Scenario`.

    Unknown keys, duplicate scalars, and bad literals raise
    :class:`ParseError` with the offending line number; structurally valid
    text that describes an impossible scenario (say, a shard count that does
    not divide N) raises :class:`ValidationError`.
    """
    raw: dict[str, tuple[str, int]] = {}
    m_grid: list[int] = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ParseError(f"line {lineno}: expected 'key = value'")
        key, _, value = stripped.partition("=")
        key, value = key.strip(), value.strip()
        if key not in _KNOWN_KEYS:
            raise ParseError(f"line {lineno}: unknown key {key!r}")
        if not value:
            raise ParseError(f"line {lineno}: empty value for {key!r}")
        if key == "m":
            try:
                m_grid.append(int(value))
            except ValueError:
                raise ParseError(f"line {lineno}: invalid integer {value!r}") from None
            continue
        if key in raw:
            raise ParseError(f"line {lineno}: duplicate key {key!r}")
        raw[key] = (value, lineno)

    missing = [k for k in _REQUIRED_KEYS if k not in raw]
    if missing:
        raise ValidationError(f"missing required keys: {', '.join(missing)}")
    if not m_grid:
        raise ValidationError("at least one 'm =' line is required")

    def scalar(key: str):
        value, lineno = raw[key]
        try:
            return _SCALAR_KEYS[key](value)
        except ValueError:
            raise ParseError(
                f"line {lineno}: invalid {_SCALAR_KEYS[key].__name__} {value!r}"
            ) from None

    def float_list(key: str) -> list[float]:
        value, lineno = raw[key]
        try:
            return [float(part) for part in value.split(",")]
        except ValueError:
            raise ParseError(f"line {lineno}: invalid number list {value!r}") from None

    kind_text = scalar("kind")
    try:
        kind = ScenarioKind(kind_text)
    except ValueError:
        raise ValidationError(f"unknown scenario kind {kind_text!r}") from None

    p = scalar("p")
    beta_parts = float_list("beta_star")
    if len(beta_parts) == 1:
        beta_star = beta_parts * p
    else:
        beta_star = beta_parts

    fields: dict = {
        "name": scalar("name"),
        "kind": kind,
        "n_total": scalar("N"),
        "p": p,
        "beta_star": beta_star,
        "m_grid": tuple(m_grid),
        "replications": scalar("replications"),
        "master_seed": scalar("master_seed"),
    }
    for key in ("n_tilde_factor", "savgm_rate", "rho", "pr_t_max", "pr_mu", "pr_refit_mu", "reboot_features"):
        if key in raw:
            fields[key] = scalar(key)
    if "csl_rounds" in raw:
        fields["csl_rounds"] = tuple(int(r) for r in float_list("csl_rounds"))
    if kind is ScenarioKind.LOGISTIC_AR1 and "rho" not in raw:
        raise ValidationError("logistic_ar1 scenarios require a 'rho' key")

    try:
        return Scenario(**fields)
    except ValueError as exc:
        raise ValidationError(str(exc)) from None


def load_scenario(path: str) -> Scenario:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())


def bundled_scenario_path(name: str):
    """Filesystem path of a scenario file shipped with the package."""
    return resources.files("reboot_kit").joinpath("scenarios", name)


def _format_value(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_metrics_csv(path: str, rows: Sequence[MetricsRow]) -> None:
    """Write rows in the fixed column order, LF endings, shortest-round-trip
    floats, header always present."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(CSV_COLUMNS) + "\n")
        for row in rows:
            fields = (
                row.scenario,
                row.method,
                row.m,
                row.n,
                row.replications_used,
                row.failures,
                row.mse,
                row.mse_se,
                row.bias,
            )
            fh.write(",".join(_format_value(v) for v in fields) + "\n")


def read_metrics_csv(path: str) -> list[MetricsRow]:
    """Read a metrics file back into rows equal to what was written."""
    rows = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != CSV_COLUMNS:
            raise ValidationError(f"unexpected CSV header: {header}")
        for record in reader:
            rows.append(
                MetricsRow(
                    scenario=record[0],
                    method=record[1],
                    m=int(record[2]),
                    n=int(record[3]),
                    replications_used=int(record[4]),
                    failures=int(record[5]),
                    mse=float(record[6]),
                    mse_se=float(record[7]),
                    bias=float(record[8]),
                )
            )
    return rows


def write_plot_script(path: str, scenario: Scenario, methods: Sequence[str], csv_name: str = "metrics.csv") -> None:
    """Emit a gnuplot script with MSE and bias panels versus shard count."""
    dagger = scenario.kind is ScenarioKind.PHASE_RETRIEVAL
    mse_label = "MSE (sign-invariant)" if dagger else "MSE"
    bias_label = "bias (sign-invariant)" if dagger else "bias"
    lines = [
        f"# Plot layout for scenario '{scenario.name}'. Run: gnuplot figure.plot",
        'set datafile separator ","',
        "set terminal pngcairo size 1200,480",
        'set output "figure.png"',
        f'set multiplot layout 1,2 title "{scenario.name}"',
        'set xlabel "number of machines m"',
        "set logscale y",
        "set key outside right",
    ]
    def panel(ylabel: str, column: int) -> list[str]:
        plot_terms = [
            f'"{csv_name}" skip 1 using 3:(strcol(2) eq "{method}" ? column({column}) : NaN) '
            f'with linespoints title "{method}"'
            for method in methods
        ]
        return [f'set ylabel "{ylabel}"', "plot \\", ",\\\n".join("     " + t for t in plot_terms)]

    lines += panel(mse_label, 7)
    lines += panel(bias_label, 9)
    lines.append("unset multiplot")
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("\n".join(lines) + "\n")


def _resolve_threads(flag_value: Optional[int]) -> int:
    if flag_value is not None:
        return flag_value
    env = os.environ.get(THREADS_ENV_VAR)
    if env:
        try:
            return int(env)
        except ValueError:
            raise ValidationError(f"{THREADS_ENV_VAR} must be an integer, got {env!r}") from None
    return 0


def run(config: RunConfig) -> int:
    """Execute one scenario run and write its outputs; returns an exit code."""
    scenario = load_scenario(config.scenario_path)
    overrides = {}
    if config.replications is not None:
        overrides["replications"] = config.replications
    if config.master_seed is not None:
        overrides["master_seed"] = config.master_seed
    if overrides:
        scenario = replace(scenario, **overrides)

    rows = monte_carlo(scenario, methods=config.methods, threads=config.threads)
    os.makedirs(config.out_dir, exist_ok=True)
    write_metrics_csv(os.path.join(config.out_dir, "metrics.csv"), rows)
    seen = []
    for row in rows:
        if row.method not in seen:
            seen.append(row.method)
    write_plot_script(os.path.join(config.out_dir, "figure.plot"), scenario, seen)
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="reboot-kit", description="Run distributed-estimation Monte Carlo scenarios."
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run a scenario and write metrics.csv / figure.plot")
    run_p.add_argument("scenario", help="path to a .scenario file")
    run_p.add_argument("--out", default=".", help="output directory (created if missing)")
    run_p.add_argument("--threads", type=int, default=None, help="worker threads (0 = auto)")
    run_p.add_argument("--seed", type=int, default=None, help="override master_seed")
    run_p.add_argument("--reps", type=int, default=None, help="override replications")
    run_p.add_argument(
        "--methods",
        default=None,
        help="comma-separated method filter; the full-sample baseline is always kept",
    )

    val_p = sub.add_parser("validate", help="parse and validate a scenario file")
    val_p.add_argument("scenario", help="path to a .scenario file")

    sub.add_parser("version", help="print the package version")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "version":
            from . import __version__

            print(__version__)
            return 0
        if args.command == "validate":
            scenario = load_scenario(args.scenario)
            print(
                f"ok: scenario {scenario.name!r} ({scenario.kind.value}), "
                f"N={scenario.n_total}, p={scenario.p}, "
                f"m grid {list(scenario.m_grid)}, {scenario.replications} replications"
            )
            return 0
        methods = tuple(args.methods.split(",")) if args.methods else None
        config = RunConfig(
            scenario_path=args.scenario,
            out_dir=args.out,
            methods=methods,
            threads=_resolve_threads(args.threads),
            replications=args.reps,
            master_seed=args.seed,
        )
        return run(config)
    except (ParseError, ValidationError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
