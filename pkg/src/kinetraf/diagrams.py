"""Fundamental diagrams from sampled equilibria.

For every occupancy level on a uniform grid, a few random mixtures with that
occupancy are drawn, their stable equilibria computed and the equilibrium
fluxes recorded. Mixtures of one or two classes with a shared jump and
uniform interaction rates use the closed forms; anything else is relaxed
numerically on the coarsest grid.

Randomness is keyed per ``(seed, s index, sample index)`` so that results do
not depend on evaluation order or on how the work is split across threads.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .equilibria import closed_form_equilibrium, mean_speed
from .kinetics import assemble_operator
from .model import (
    ConstraintViolation,
    ProbabilityLaw,
    VehicleClass,
    build_grids,
    eval_probability,
)
from .relaxation import relax_batch

__all__ = [
    "DiagramPoint",
    "sample_mixture",
    "s_grid",
    "fundamental_diagram",
    "critical_s",
    "capacity_drop",
    "thread_count",
]

Seed = int | Sequence[int]


@dataclass(frozen=True)
class DiagramPoint:
    """One equilibrium on the diagram.

    Attributes
    ----------
    s : float
        Occupied fraction.
    class_ids : tuple of str
    densities : tuple of float
        veh/km per class.
    N_v : float
        Total density in veh/km.
    flux : tuple of float
        Per-class flux in veh/h.
    speeds : tuple of float or None
        Per-class mean speed in km/h; ``None`` for absent classes.
    Q : float
        Total flux in veh/h.
    U : float
        Mean speed ``Q / N_v`` in km/h (``nan`` on an empty road).
    P : float
    converged : bool
    """

    s: float
    class_ids: tuple[str, ...]
    densities: tuple[float, ...]
    N_v: float
    flux: tuple[float, ...]
    speeds: tuple[float | None, ...]
    Q: float
    U: float
    P: float
    converged: bool


def _entropy(seed: Seed) -> list[int]:
    return [int(seed)] if np.ndim(seed) == 0 else [int(x) for x in seed]  # type: ignore[union-attr]


def sample_mixture(classes: Sequence[VehicleClass], s: float, count: int, seed: Seed) -> list[tuple[float, ...]]:
    """Random density vectors with occupied fraction ``s``.

    Occupancy shares are uniform on the simplex (normalised exponential
    draws). Sample ``k`` only depends on ``(seed, k)``.
    """
    if not (0.0 <= s <= 1.0):
        raise ConstraintViolation(f"s must lie in [0, 1], got {s!r}")
    if count < 1:
        raise ConstraintViolation(f"count must be at least 1, got {count!r}")
    base = _entropy(seed)
    out = []
    for k in range(count):
        draws = np.random.default_rng(base + [k]).exponential(size=len(classes))
        shares = draws / draws.sum()
        out.append(tuple(float(w * s / c.length) for w, c in zip(shares, classes)))
    return out


def s_grid(s_points: int) -> np.ndarray:
    """Cell midpoints ``(i - 1/2) / s_points`` of a uniform partition of (0, 1]."""
    if s_points < 2:
        raise ConstraintViolation(f"s_points must be at least 2, got {s_points!r}")
    return (np.arange(1, s_points + 1) - 0.5) / s_points


def critical_s(law: ProbabilityLaw) -> float:
    """Occupancy at which the acceleration probability equals 1/2."""
    return float(law.s_cr)


def thread_count() -> int:
    """Worker threads, capped by the ``KINETRAF_THREADS`` environment variable."""
    n = os.cpu_count() or 1
    cap = os.environ.get("KINETRAF_THREADS")
    if cap:
        try:
            n = min(n, max(1, int(cap)))
        except ValueError:
            pass
    return n


def _closed_form_ok(classes: Sequence[VehicleClass], rates: np.ndarray | None) -> bool:
    # uniform rates only rescale time, other rate matrices move the equilibrium
    uniform = rates is None or np.ptp(rates) == 0
    return len(classes) <= 2 and len({c.delta_v for c in classes}) == 1 and uniform


def _closed_form_point(classes: Sequence[VehicleClass], rho: Sequence[float], P: float) -> tuple[list[float], bool]:
    if len(classes) == 1:
        sol = closed_form_equilibrium(rho[0], 0.0, classes, P)
        values = sol.values
    else:
        order = [0, 1] if classes[0].v_max >= classes[1].v_max else [1, 0]
        sol = closed_form_equilibrium(rho[order[0]], rho[order[1]], [classes[i] for i in order], P)
        values = [None, None]
        for pos, i in enumerate(order):
            values[i] = sol.values[pos]
    flux = [math.fsum(v * np.arange(len(v)) * c.delta_v) for v, c in zip(values, classes)]
    return flux, True


def _make_point(s: float, classes: Sequence[VehicleClass], rho: Sequence[float], flux: Sequence[float], P: float, converged: bool) -> DiagramPoint:
    speeds = tuple(mean_speed(q, r) if r > 0 else None for q, r in zip(flux, rho))
    N_v = math.fsum(rho)
    Q = math.fsum(flux)
    U = Q / N_v if N_v > 0 else math.nan
    return DiagramPoint(
        float(s), tuple(c.id for c in classes), tuple(float(r) for r in rho), N_v,
        tuple(float(q) for q in flux), speeds, Q, U, float(P), bool(converged),
    )


def fundamental_diagram(
    classes: Sequence[VehicleClass],
    law: ProbabilityLaw,
    s_points: int = 200,
    samples_per_s: int = 3,
    seed: int = 0,
    *,
    rates: np.ndarray | None = None,
    frozen_shares: bool = False,
    s_values: Iterable[float] | None = None,
    tol: float = 1e-12,
    max_steps: int = 200_000,
    workers: int | None = None,
) -> list[DiagramPoint]:
    """Equilibrium diagram points for every ``(s, sample)`` pair.

    Parameters
    ----------
    classes : sequence of VehicleClass
    law : ProbabilityLaw
    s_points : int
        Size of the occupancy grid (see :func:`s_grid`).
    samples_per_s : int
        Random mixtures per occupancy level.
    seed : int
    rates : ndarray, optional
        Interaction rates; all ones by default.
    frozen_shares : bool
        Reuse the same occupancy shares at every ``s``, producing one sweep
        per sample instead of a scatter.
    s_values : iterable of float, optional
        Explicit occupancy levels replacing the grid.
    tol, max_steps :
        Passed to the relaxation for mixtures without a closed form.
    workers : int, optional
        Threads for the relaxation; defaults to :func:`thread_count`.

    Returns
    -------
    list of DiagramPoint
        Ordered by ``s`` and then by sample. Points whose relaxation did not
        converge are kept and flagged.
    """
    classes = tuple(classes)
    grid = np.asarray(list(s_values), dtype=float) if s_values is not None else s_grid(s_points)
    jobs: list[tuple[float, tuple[float, ...], float]] = []
    for i, s in enumerate(grid):
        sub = (seed,) if frozen_shares else (seed, i)
        P = eval_probability(law, float(s))
        for rho in sample_mixture(classes, float(s), samples_per_s, sub):
            jobs.append((float(s), rho, P))

    if _closed_form_ok(classes, rates):
        return [_make_point(s, classes, rho, *_closed_form_point(classes, rho, P), P) for s, rho, P in jobs]

    grids = build_grids(classes, 1)
    C = len(classes)
    op = assemble_operator(grids, np.ones((C, C)) if rates is None else rates)
    y0 = np.array([np.concatenate([np.full(g.n, r / g.n) for r, g in zip(rho, grids)]) for _, rho, _ in jobs])
    y0 = y0.reshape(len(jobs), op.size)
    P_all = np.array([P for _, _, P in jobs])

    n_workers = max(1, min(workers or thread_count(), len(jobs)))
    chunks = np.array_split(np.arange(len(jobs)), n_workers)

    def run(rows: np.ndarray):
        return rows, relax_batch(op, y0[rows], P_all[rows], tol=tol, max_steps=max_steps)

    if n_workers == 1:
        results = [run(chunks[0])]
    else:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            results = list(pool.map(run, chunks))
    Y = np.zeros_like(y0)
    conv = np.zeros(len(jobs), dtype=bool)
    for rows, res in results:
        Y[rows] = res.y
        conv[rows] = res.converged
    nodes = np.concatenate([np.arange(g.n) * g.dv for g in grids])
    points = []
    for t, (s, rho, P) in enumerate(jobs):
        flux = [math.fsum(Y[t, op.offsets[c] : op.offsets[c + 1]] * nodes[op.offsets[c] : op.offsets[c + 1]]) for c in range(C)]
        points.append(_make_point(s, classes, rho, flux, P, conv[t]))
    return points


def capacity_drop(points: Sequence[DiagramPoint], law: ProbabilityLaw) -> float:
    """Largest free-phase flux minus largest congested-phase flux (veh/h).

    Raises
    ------
    ConstraintViolation
        If either phase has no points.
    """
    s_cr = critical_s(law)
    free = [p.Q for p in points if p.s <= s_cr]
    congested = [p.Q for p in points if p.s > s_cr]
    if not free:
        raise ConstraintViolation("no points in the free phase (s <= critical s)")
    if not congested:
        raise ConstraintViolation("no points in the congested phase (s > critical s)")
    return max(free) - max(congested)
