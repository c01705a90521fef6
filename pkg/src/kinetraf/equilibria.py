"""Closed-form stable equilibria and equilibrium observables.

For one or two classes sharing the velocity jump, the stable equilibrium is
supported on the multiples of the jump and its values follow from a chain of
quadratic equations, solved node by node from the lowest speed upwards. For
two classes with ``V1 > V2``:

* nodes below ``V2`` are separable, each class following the single-class
  recursion with its own density;
* class 2 places its remaining mass at ``V2``;
* class 1 at ``V2`` and above solves coupled quadratics, and its top node
  closes the mass balance.

Each quadratic ``a x**2 + b x + c = 0`` has ``a = (3P - 2)/2`` and the stable
root is ``(-b - sqrt(b**2 - 4ac)) / (2a)``. It is evaluated in the
cancellation-free form ``2c / (-b + sqrt(...))`` whenever ``b < 0``, which
also covers ``P = 2/3`` where ``a`` vanishes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .kinetics import KineticState
from .model import (
    AssumptionViolation,
    ConstraintViolation,
    VehicleClass,
    VelocityGrid,
    build_grid,
)

__all__ = [
    "ConsistencyError",
    "UndefinedSpeed",
    "EquilibriumSolution",
    "closed_form_equilibrium",
    "single_class_equilibrium",
    "lowest_node_fraction",
    "is_quantized",
    "equilibrium_flux",
    "discrete_flux",
    "mean_speed",
    "coarse_values",
]

#: Relative size of a negative discriminant attributed to round-off.
DISCRIMINANT_SLACK = 1e-12


class ConsistencyError(RuntimeError):
    """An internal identity of the closed form failed (negative discriminant)."""


class UndefinedSpeed(ZeroDivisionError):
    """Mean speed requested for a class with zero density."""


def _stable_root(a: float, b: float, c: float, scale: float, label: str, diag: dict[str, float]) -> float:
    disc = b * b - 4.0 * a * c
    diag[label] = disc
    if disc < 0:
        if disc < -DISCRIMINANT_SLACK * max(b * b, abs(4.0 * a * c), scale * scale):
            raise ConsistencyError(f"negative discriminant {disc!r} at {label}")
        disc = 0.0
    root = math.sqrt(disc)
    if b < 0:
        x = 2.0 * c / (root - b)
    elif a != 0:
        x = (-b - root) / (2.0 * a)
    else:
        x = -c / b if b != 0 else 0.0
    if not math.isfinite(x):
        raise ConsistencyError(f"non-finite root at {label}")
    return x


def _clean(x: float, scale: float, label: str) -> float:
    """Clip round-off below zero; flag genuinely negative values."""
    if x < 0:
        if x < -1e-12 * max(scale, 1e-300):
            raise ConsistencyError(f"negative equilibrium value {x!r} at {label}")
        return 0.0
    return x


def lowest_node_fraction(P: float) -> float:
    """Share of a class at rest: ``0`` for ``P >= 1/2``, else ``2(2P-1)/(3P-2)``."""
    if P >= 0.5:
        return 0.0
    return 2.0 * (2.0 * P - 1.0) / (3.0 * P - 2.0)


def _lower_nodes(rho: float, P: float, count: int, tag: str, diag: dict[str, float]) -> list[float]:
    """First ``count`` coarse nodes of one class, from the separable recursion."""
    f = [0.0] * count
    if count == 0 or rho == 0:
        return f
    f[0] = lowest_node_fraction(P) * rho
    if P >= 0.5:
        return f
    a = (3.0 * P - 2.0) / 2.0
    for l in range(1, count):
        S = math.fsum(f[:l])
        prev = f[l - 1]
        b = (3.0 * P - 2.0) * S + (1.0 - 2.0 * P) * rho
        c = P * prev * (-0.5 * prev + rho - math.fsum(f[: l - 1]))
        f[l] = _clean(_stable_root(a, b, c, rho, f"{tag}:{l + 1}", diag), rho, f"{tag}:{l + 1}")
    return f


@dataclass(frozen=True)
class EquilibriumSolution:
    """Stable equilibrium on the coarse nodes ``0, dv, 2 dv, ...``.

    Attributes
    ----------
    classes : tuple of VehicleClass
    densities : tuple of float
    values : tuple of ndarray
        ``values[p][j]`` is the density of class ``p`` at speed ``j * spacing``.
    spacing : float
        Node spacing in km/h.
    P : float
    discriminants : dict
        Discriminant of every quadratic solved, keyed by ``class:node``
        (1-based coarse node).
    method : str
        ``"closed_form"`` or ``"relaxation"``.
    converged : bool
    """

    classes: tuple[VehicleClass, ...]
    densities: tuple[float, ...]
    values: tuple[np.ndarray, ...] = field(compare=False)
    spacing: float
    P: float
    discriminants: dict[str, float] = field(default_factory=dict, compare=False)
    method: str = "closed_form"
    converged: bool = True

    def __post_init__(self) -> None:
        vals = []
        for v in self.values:
            arr = np.array(v, dtype=float)
            arr.setflags(write=False)
            vals.append(arr)
        object.__setattr__(self, "values", tuple(vals))

    def index(self, class_id: str) -> int:
        ids = [c.id for c in self.classes]
        if class_id not in ids:
            raise KeyError(class_id)
        return ids.index(class_id)

    def node_speeds(self, p: int) -> np.ndarray:
        return np.arange(len(self.values[p])) * self.spacing

    def refine(self, grids: Sequence[VelocityGrid]) -> KineticState:
        """Place the coarse values on refined grids (zeros between nodes)."""
        out = []
        for p, g in enumerate(grids):
            step = int(round(self.spacing / g.dv))
            if abs(step * g.dv - self.spacing) > 1e-9 * self.spacing or (len(self.values[p]) - 1) * step + 1 != g.n:
                raise AssumptionViolation(f"grid of {g.class_id!r} is not a refinement of the node spacing")
            fine = np.zeros(g.n)
            fine[::step] = self.values[p]
            out.append(fine)
        return KineticState(tuple(grids), tuple(out))


def single_class_equilibrium(rho: float, T: int, P: float, diag: dict[str, float] | None = None, tag: str = "1") -> np.ndarray:
    """Coarse equilibrium of one class with ``T`` jumps up to its top speed."""
    diag = {} if diag is None else diag
    lower = _lower_nodes(rho, P, T, tag, diag)
    top = _clean(rho - math.fsum(lower), rho, f"{tag}:{T + 1}")
    return np.array(lower + [top])


def closed_form_equilibrium(
    rho1: float,
    rho2: float,
    classes: Sequence[VehicleClass],
    P: float,
) -> EquilibriumSolution:
    """Stable equilibrium of one or two classes with a shared velocity jump.

    Parameters
    ----------
    rho1, rho2 : float
        Densities in veh/km. ``rho2`` is ignored when a single class is given.
    classes : sequence of VehicleClass
        One or two classes. The first must have the larger (or equal) top
        speed.
    P : float
        Acceleration probability.

    Raises
    ------
    AssumptionViolation
        For unequal jumps, wrong ordering or more than two classes.
    ConsistencyError
        If a discriminant is genuinely negative.
    """
    classes = tuple(classes)
    if not (0.0 <= P <= 1.0):
        raise ConstraintViolation(f"P must lie in [0, 1], got {P!r}")
    if len(classes) not in (1, 2):
        raise AssumptionViolation("closed forms exist for one or two classes only")
    rhos = (float(rho1),) if len(classes) == 1 else (float(rho1), float(rho2))
    if any(not (math.isfinite(r) and r >= 0) for r in rhos):
        raise ConstraintViolation("densities must be finite and non-negative")
    s = math.fsum(c.length * r for c, r in zip(classes, rhos))
    if s > 1.0 + 1e-12:
        raise ConstraintViolation(f"occupied fraction {s!r} exceeds 1")
    dv = classes[0].delta_v
    if any(c.delta_v != dv for c in classes):
        raise AssumptionViolation("closed forms require a shared velocity jump")
    diag: dict[str, float] = {}
    if len(classes) == 1:
        f = single_class_equilibrium(rhos[0], classes[0].T, P, diag, classes[0].id)
        return EquilibriumSolution(classes, rhos, (f,), dv, float(P), diag)

    c1, c2 = classes
    if c1.v_max < c2.v_max:
        raise AssumptionViolation("order the classes so that the first has the larger top speed")
    r1, r2 = rhos
    T1, T2 = c1.T, c2.T
    if T1 == T2:
        f1 = single_class_equilibrium(r1, T1, P, diag, c1.id)
        f2 = single_class_equilibrium(r2, T2, P, diag, c2.id)
        return EquilibriumSolution(classes, rhos, (f1, f2), dv, float(P), diag)

    a = (3.0 * P - 2.0) / 2.0
    f1 = _lower_nodes(r1, P, T2, c1.id, diag)
    f2 = _lower_nodes(r2, P, T2, c2.id, diag)
    f2.append(_clean(r2 - math.fsum(f2), r2, f"{c2.id}:{T2 + 1}"))
    scale = r1 + r2

    # class 1 at the top speed of class 2
    S1, S2 = math.fsum(f1), math.fsum(f2[:T2])
    p1 = f1[T2 - 1]
    p2 = f2[T2 - 1]
    below = math.fsum(f1[: T2 - 1]) + math.fsum(f2[: T2 - 1])
    b = (3.0 * P - 2.0) * S1 + (P / 4.0) * S2 + (1.0 - 2.0 * P) * r1 + (0.75 * P - 1.0) * r2
    c = (1.0 - P) * (r1 - S1) * (r2 - S2) + P * p1 * (-0.5 * (p1 + p2) + r1 + r2 - below)
    label = f"{c1.id}:{T2 + 1}"
    f1.append(_clean(_stable_root(a, b, c, scale, label, diag), scale, label))

    # class 1 between the two top speeds
    for node in range(T2 + 2, T1 + 1):
        prev = f1[node - 2]
        S = math.fsum(f1[: node - 1])
        b = (3.0 * P - 2.0) * S + (1.0 - 2.0 * P) * r1 + (P - 1.0) * r2
        extra = 0.25 * f2[T2] if node == T2 + 2 else 0.0
        c = P * prev * (-0.5 * prev + extra + r1 - math.fsum(f1[: node - 2]))
        label = f"{c1.id}:{node}"
        f1.append(_clean(_stable_root(a, b, c, scale, label, diag), scale, label))
    f1.append(_clean(r1 - math.fsum(f1), r1, f"{c1.id}:{T1 + 1}"))
    return EquilibriumSolution(classes, rhos, (np.array(f1), np.array(f2)), dv, float(P), diag)


def coarse_values(state: KineticState, spacing: float) -> tuple[np.ndarray, ...]:
    """Values of a fine state at the multiples of ``spacing``."""
    out = []
    for g, v in zip(state.grids, state.values):
        step = int(round(spacing / g.dv))
        if step < 1 or abs(step * g.dv - spacing) > 1e-9 * spacing:
            raise AssumptionViolation(f"spacing {spacing!r} is not a multiple of the cell width of {g.class_id!r}")
        out.append(np.array(v[::step]))
    return tuple(out)


def is_quantized(fine_state: KineticState, r: int | Sequence[int], tol: float = 1e-8) -> bool:
    """True when every cell off the multiples of ``r`` holds at most ``tol``.

    ``r`` may be one integer or one integer per class.
    """
    steps = [int(r)] * len(fine_state.grids) if np.ndim(r) == 0 else [int(x) for x in r]  # type: ignore[arg-type]
    for step, v in zip(steps, fine_state.values):
        off = np.arange(len(v)) % step != 0
        if np.any(v[off] > tol):
            return False
    return True


def equilibrium_flux(solution: EquilibriumSolution, p: int | str) -> float:
    """Exact flux ``sum_j f_j * (j - 1) * spacing`` of class ``p`` (veh/h)."""
    idx = solution.index(p) if isinstance(p, str) else p
    v = solution.values[idx]
    return float(math.fsum(v * solution.node_speeds(idx)))


def discrete_flux(state: KineticState, p: int | str) -> float:
    """Flux from the cell midpoints of the grid (veh/h)."""
    ids = [g.class_id for g in state.grids]
    idx = ids.index(p) if isinstance(p, str) else p
    return float(math.fsum(state.values[idx] * state.grids[idx].midpoints))


def mean_speed(q: float, rho: float) -> float:
    """Macroscopic speed ``q / rho`` in km/h.

    Raises
    ------
    UndefinedSpeed
        When ``rho == 0``.
    """
    if rho == 0:
        raise UndefinedSpeed("mean speed is undefined for a class with zero density")
    if rho < 0:
        raise ConstraintViolation(f"density must be non-negative, got {rho!r}")
    return q / rho


def grid_for(vclass: VehicleClass, r: int) -> VelocityGrid:
    """Convenience alias for :func:`kinetraf.model.build_grid`."""
    return build_grid(vclass, r)
