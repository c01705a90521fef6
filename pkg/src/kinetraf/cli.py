"""Command-line front end.

Usage::

    kinetraf equilibrium --config cf-t --s 0.6
    kinetraf relax --config two-speed --out relax.csv
    kinetraf diagram --config cf-cs-t --out diagram.csv
    kinetraf validate --config cf-cs-t

``--config`` accepts a YAML file or the name of a bundled preset.

Exit codes: 0 success, 1 failed validation, 2 configuration error,
3 convergence failure, 4 input/output error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
from pathlib import Path
from typing import Sequence, TextIO

import numpy as np

from .config import ConfigError, RunConfig, load_config, preset_names
from .diagrams import DiagramPoint, fundamental_diagram
from .equilibria import closed_form_equilibrium
from .kinetics import KineticState
from .model import ModelError, build_grids, eval_probability, occupied_fraction
from .relaxation import initial_dt, relax_to_equilibrium
from .validation import run_checks

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_CONFIG = 2
EXIT_UNCONVERGED = 3
EXIT_IO = 4


class CliError(Exception):
    def __init__(self, message: str, code: int) -> None:
        super().__init__(message)
        self.code = code


def fmt(x: float) -> str:
    """Locale-independent representation with 17 significant digits."""
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return ""
    return format(float(x), ".17g")


def _parse_rho(items: Sequence[str] | None) -> dict[str, float]:
    out: dict[str, float] = {}
    for item in items or []:
        name, sep, value = item.partition("=")
        if not sep or not name:
            raise ConfigError(f"--rho: expected CLASS=VALUE, got {item!r}")
        try:
            out[name] = float(value)
        except ValueError as exc:
            raise ConfigError(f"--rho {name}: {value!r} is not a number") from exc
    return out


def _mixture(cfg: RunConfig, args: argparse.Namespace):
    dens = cfg.resolve_densities(_parse_rho(args.rho), args.s)
    try:
        return cfg.mixture(dict(zip([c.name for c in cfg.classes], dens)))
    except ModelError as exc:
        raise ConfigError(f"densities: {exc}") from exc


class _Output:
    """Standard output or a file opened lazily; I/O errors map to exit code 4."""

    def __init__(self, path: str | None) -> None:
        self.path = path

    def __enter__(self) -> TextIO:
        if self.path is None:
            self.handle = sys.stdout
            return self.handle
        try:
            self.handle = open(self.path, "w", newline="", encoding="utf-8")
        except OSError as exc:
            raise CliError(f"cannot open {self.path}: {exc}", EXIT_IO) from exc
        return self.handle

    def __exit__(self, *exc: object) -> None:
        if self.path is not None:
            self.handle.close()


def cmd_equilibrium(cfg: RunConfig, args: argparse.Namespace) -> int:
    mix = _mixture(cfg, args)
    classes = mix.classes
    s = occupied_fraction(mix)
    P = eval_probability(cfg.probability_law(), s)
    closed = len(classes) <= 2 and len({c.delta_v for c in classes}) == 1 and np.ptp(mix.rates) == 0
    if closed:
        order = sorted(range(len(classes)), key=lambda i: -classes[i].v_max)
        rho = [mix.densities[i] for i in order]
        sol = closed_form_equilibrium(rho[0], rho[1] if len(rho) > 1 else 0.0, [classes[i] for i in order], P)
        values = [None] * len(classes)
        for pos, i in enumerate(order):
            values[i] = np.asarray(sol.values[pos])
        spacing = [c.delta_v for c in classes]
        converged = True
    else:
        print("notice: no closed form for this mixture, using numerical relaxation (r=1)", file=sys.stderr)
        grids = build_grids(classes, 1)
        rep = relax_to_equilibrium(
            KineticState.uniform(grids, mix.densities), mix, P=P, tol=cfg.tolerance,
            t_max=cfg.t_max or math.inf, max_steps=cfg.max_steps,
        )
        values = [np.asarray(v) for v in rep.final_state.values]
        spacing = [g.dv for g in grids]
        converged = rep.converged
    width = max(len(v) for v in values)
    flux = [math.fsum(v * np.arange(len(v)) * dv) for v, dv in zip(values, spacing)]
    N_v = math.fsum(mix.densities)
    Q = math.fsum(flux)
    with _Output(args.out) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["class", "rho", "q", "u"] + [f"f_{j + 1}" for j in range(width)])
        for c, rho, v, q in zip(classes, mix.densities, values, flux):
            u = q / rho if rho > 0 else math.nan
            w.writerow([c.id, fmt(rho), fmt(q), fmt(u)] + [fmt(x) for x in v] + [""] * (width - len(v)))
        w.writerow(["ALL", fmt(N_v), fmt(Q), fmt(Q / N_v if N_v > 0 else math.nan)] + [""] * width)
    print(f"s = {fmt(s)}, P = {fmt(P)}, converged = {converged}", file=sys.stderr)
    return EXIT_OK if converged else EXIT_UNCONVERGED


def _load_initial(path: str, grids) -> KineticState:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise CliError(f"cannot read initial state {path}: {exc}", EXIT_IO) from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"--initial: malformed JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise ConfigError("--initial: expected an object mapping class names to lists")
    vals = []
    for g in grids:
        if g.class_id not in data:
            raise ConfigError(f"--initial: missing class {g.class_id!r}")
        v = np.asarray(data[g.class_id], dtype=float)
        if v.shape != (g.n,):
            raise ConfigError(f"--initial.{g.class_id}: expected {g.n} values, got {v.size}")
        if np.any(v < 0):
            raise ConfigError(f"--initial.{g.class_id}: values must be non-negative")
        vals.append(v)
    return KineticState(tuple(grids), tuple(vals))


def cmd_relax(cfg: RunConfig, args: argparse.Namespace) -> int:
    classes = cfg.vehicle_classes()
    grids = build_grids(classes, cfg.grid_r)
    if args.initial and args.initial != "uniform":
        state0 = _load_initial(args.initial, grids)
        mix = cfg.mixture(dict(zip([c.id for c in classes], state0.densities)))
    else:
        mix = _mixture(cfg, args)
        state0 = KineticState.uniform(grids, mix.densities)
    dt0 = initial_dt(np.asarray(mix.densities), mix.rates)
    times = [0.0] + ([dt0 * 2.0**k for k in range(80)] if math.isfinite(dt0) else [])
    rep = relax_to_equilibrium(
        state0, mix, cfg.probability_law(), tol=cfg.tolerance,
        t_max=cfg.t_max or math.inf, max_steps=cfg.max_steps, output_times=times,
    )
    header = ["t"] + [f"f_{g.class_id}_{j + 1}" for g in grids for j in range(g.n)] + ["final"]
    with _Output(args.out) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for t, st in rep.trajectory:
            w.writerow([fmt(t)] + [fmt(x) for x in st.flat] + [0])
        w.writerow([fmt(rep.elapsed_model_time)] + [fmt(x) for x in rep.final_state.flat] + [1])
    print(
        f"P = {fmt(rep.P)}, steps = {rep.steps}, t = {fmt(rep.elapsed_model_time)} h, "
        f"residual = {rep.residual:.3e}, converged = {rep.converged}",
        file=sys.stderr,
    )
    return EXIT_OK if rep.converged else EXIT_UNCONVERGED


def diagram_rows(points: Sequence[DiagramPoint]) -> tuple[list[str], list[list[str]]]:
    ids = points[0].class_ids if points else ()
    header = ["s", "N_v"] + [f"rho_{c}" for c in ids] + [f"q_{c}" for c in ids] + ["Q", "U", "P", "converged"]
    rows = [
        [fmt(p.s), fmt(p.N_v)] + [fmt(r) for r in p.densities] + [fmt(q) for q in p.flux]
        + [fmt(p.Q), fmt(p.U), fmt(p.P), str(int(p.converged))]
        for p in points
    ]
    return header, rows


def cmd_diagram(cfg: RunConfig, args: argparse.Namespace) -> int:
    seed = cfg.seed if args.seed is None else args.seed
    points = fundamental_diagram(
        cfg.vehicle_classes(), cfg.probability_law(), cfg.s_points, cfg.samples_per_s, seed,
        rates=cfg.rate_matrix(), frozen_shares=cfg.sampling == "frozen", tol=cfg.tolerance, max_steps=cfg.max_steps,
    )
    header, rows = diagram_rows(points)
    if not points:
        header = ["s", "N_v"] + [f"rho_{c.name}" for c in cfg.classes] + [f"q_{c.name}" for c in cfg.classes] + ["Q", "U", "P", "converged"]
    with _Output(args.out) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    bad = sum(not p.converged for p in points)
    if bad:
        print(f"warning: {bad} point(s) did not converge (flagged in the table)", file=sys.stderr)
        return EXIT_UNCONVERGED
    return EXIT_OK


def cmd_validate(cfg: RunConfig, args: argparse.Namespace) -> int:
    results = run_checks(cfg)
    buf = io.StringIO()
    for res in results:
        print(res.line(), file=buf)
    with _Output(args.out) as fh:
        fh.write(buf.getvalue())
    return EXIT_OK if all(r.passed for r in results) else EXIT_VALIDATION


COMMANDS = {
    "equilibrium": cmd_equilibrium,
    "relax": cmd_relax,
    "diagram": cmd_diagram,
    "validate": cmd_validate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kinetraf", description="Multi-population kinetic traffic model.")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", required=True, help=f"YAML file or preset ({', '.join(preset_names())})")
    parser.add_argument("--out", help="output file (default: standard output)")
    parser.add_argument("--seed", type=int, help="override the configured seed")
    parser.add_argument("--s", type=float, help="occupied fraction, split evenly between classes")
    parser.add_argument("--rho", nargs="+", action="extend", metavar="CLASS=VALUE", help="density per class in veh/km")
    parser.add_argument("--initial", default="uniform", help="'uniform' or a JSON file of per-class cell values (relax)")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = cfg.replace(seed=args.seed)
        return COMMANDS[args.command](cfg, args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ConfigError, ModelError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
