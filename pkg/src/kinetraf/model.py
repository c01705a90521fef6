"""Domain types for vehicle classes, mixtures, probability laws and grids.

Units are fixed throughout the package: lengths in km, densities in veh/km,
speeds in km/h and fluxes in veh/h. The fraction of occupied space ``s`` is
dimensionless and is computed as ``sum(length * density)`` over classes.

Two families of acceleration probability are provided. :class:`GammaLaw`
implements ``P(s) = 1 - s**gamma``. :class:`PiecewiseLaw` is linear up to a
critical occupancy ``s_cr`` (where ``P = 1/2``) and quadratic afterwards, with
the quadratic fixed by continuity at ``s_cr``, ``P(1) = 0`` and a prescribed
right derivative ``mu`` at ``s_cr``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Mapping, Sequence

import numpy as np

__all__ = [
    "ModelError",
    "AssumptionViolation",
    "ConstraintViolation",
    "VehicleClass",
    "Mixture",
    "GammaLaw",
    "PiecewiseLaw",
    "CustomLaw",
    "ProbabilityLaw",
    "VelocityGrid",
    "occupied_fraction",
    "eval_probability",
    "piecewise_coefficients",
    "build_grid",
    "build_grids",
]

#: Slack allowed when checking that the road is not over-occupied.
OCCUPANCY_SLACK = 1e-12
#: Tolerance of the numerical monotonicity check on probability laws.
MONOTONICITY_TOL = 1e-12


class ModelError(ValueError):
    """Base class for invalid model inputs."""


class AssumptionViolation(ModelError):
    """A structural modelling assumption (integer grids, shared spacing) fails."""


class ConstraintViolation(ModelError):
    """A parameter lies outside its admissible range."""


def _integer_ratio(num: float, den: float, what: str) -> int:
    """Return ``num / den`` as an int, or raise if it is not an integer."""
    ratio = Fraction(num).limit_denominator(10**9) / Fraction(den).limit_denominator(10**9)
    if ratio.denominator != 1 or ratio <= 0:
        raise AssumptionViolation(f"{what} must be a positive integer, got {float(ratio)!r}")
    return int(ratio)


@dataclass(frozen=True)
class VehicleClass:
    """Physical identity of a vehicle population.

    Parameters
    ----------
    id : str
        Short label such as ``"Cf"``.
    length : float
        Typical vehicle length in km.
    v_max : float
        Maximum speed in km/h.
    delta_v : float
        Velocity jump on acceleration in km/h. ``v_max / delta_v`` must be a
        positive integer.
    """

    id: str
    length: float
    v_max: float
    delta_v: float

    def __post_init__(self) -> None:
        for name in ("length", "v_max", "delta_v"):
            value = getattr(self, name)
            if not (isinstance(value, (int, float)) and math.isfinite(value) and value > 0):
                raise ConstraintViolation(f"{name} must be a positive finite number, got {value!r}")
        if not self.id:
            raise ConstraintViolation("class id must be a non-empty string")
        _integer_ratio(self.v_max, self.delta_v, f"v_max/delta_v for class {self.id!r}")

    @property
    def T(self) -> int:
        """Number of velocity jumps between rest and ``v_max``."""
        return _integer_ratio(self.v_max, self.delta_v, f"v_max/delta_v for class {self.id!r}")

    @property
    def rho_max(self) -> float:
        """Bumper-to-bumper density in veh/km."""
        return 1.0 / self.length


@dataclass(frozen=True)
class Mixture:
    """Vehicle classes together with their densities and interaction rates.

    Parameters
    ----------
    classes : tuple of VehicleClass
        Ordered classes; ids must be unique.
    densities : tuple of float
        Density of each class in veh/km.
    rates : ndarray, optional
        Square matrix of interaction rates. The diagonal holds the self rates
        and entry ``(p, q)`` the rate at which class ``p`` reacts to ``q``.
        Defaults to all ones.
    """

    classes: tuple[VehicleClass, ...]
    densities: tuple[float, ...]
    rates: np.ndarray = field(default=None, compare=False)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        object.__setattr__(self, "classes", tuple(self.classes))
        object.__setattr__(self, "densities", tuple(float(d) for d in self.densities))
        if not self.classes:
            raise ConstraintViolation("a mixture needs at least one class")
        ids = [c.id for c in self.classes]
        if len(set(ids)) != len(ids):
            raise ConstraintViolation(f"class ids must be unique, got {ids}")
        if len(self.densities) != len(self.classes):
            raise ConstraintViolation("one density per class is required")
        for c, d in zip(self.classes, self.densities):
            if not (math.isfinite(d) and d >= 0):
                raise ConstraintViolation(f"density of {c.id!r} must be finite and >= 0, got {d!r}")
        C = len(self.classes)
        rates = np.ones((C, C)) if self.rates is None else np.array(self.rates, dtype=float)
        if rates.shape != (C, C):
            raise ConstraintViolation(f"rates must have shape {(C, C)}, got {rates.shape}")
        if not np.all(np.isfinite(rates)) or np.any(rates <= 0):
            raise ConstraintViolation("all interaction rates must be positive and finite")
        rates.setflags(write=False)
        object.__setattr__(self, "rates", rates)
        occupied_fraction(self)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Mixture):
            return NotImplemented
        return (
            self.classes == other.classes
            and self.densities == other.densities
            and np.array_equal(self.rates, other.rates)
        )

    __hash__ = None  # type: ignore[assignment]

    @property
    def ids(self) -> tuple[str, ...]:
        return tuple(c.id for c in self.classes)

    def with_densities(self, densities: Sequence[float]) -> "Mixture":
        """Return a copy with new densities and the same rates."""
        return Mixture(self.classes, tuple(densities), self.rates)

    def with_rates(self, rates: np.ndarray) -> "Mixture":
        return Mixture(self.classes, self.densities, rates)

    @classmethod
    def from_rate_overrides(
        cls,
        classes: Sequence[VehicleClass],
        densities: Sequence[float],
        default: float = 1.0,
        self_rates: Mapping[str, float] | None = None,
        cross_rates: Mapping[tuple[str, str], float] | None = None,
    ) -> "Mixture":
        """Build a mixture from a default rate plus per-class and per-pair overrides."""
        ids = [c.id for c in classes]
        rates = np.full((len(ids), len(ids)), float(default))
        for cid, value in (self_rates or {}).items():
            if cid not in ids:
                raise ConstraintViolation(f"unknown class {cid!r} in self rates")
            rates[ids.index(cid), ids.index(cid)] = value
        for (p, q), value in (cross_rates or {}).items():
            if p not in ids or q not in ids:
                raise ConstraintViolation(f"unknown class pair {(p, q)!r} in cross rates")
            if p == q:
                raise ConstraintViolation(f"cross rate {(p, q)!r} must involve two classes")
            rates[ids.index(p), ids.index(q)] = value
        return cls(tuple(classes), tuple(densities), rates)


def occupied_fraction(mixture: Mixture) -> float:
    """Fraction of road length covered by vehicles.

    Raises
    ------
    ConstraintViolation
        If the occupancy exceeds one.
    """
    s = math.fsum(c.length * d for c, d in zip(mixture.classes, mixture.densities))
    if s > 1.0 + OCCUPANCY_SLACK:
        raise ConstraintViolation(f"occupied fraction {s!r} exceeds 1 (over-occupied road)")
    return s


def _check_monotone(func: Callable[[np.ndarray], np.ndarray], label: str) -> None:
    grid = np.linspace(0.0, 1.0, 1001)
    values = np.asarray(func(grid), dtype=float)
    if np.any(values < -MONOTONICITY_TOL) or np.any(values > 1 + MONOTONICITY_TOL):
        raise ConstraintViolation(f"{label}: probability leaves [0, 1]")
    if np.any(np.diff(values) > MONOTONICITY_TOL):
        raise ConstraintViolation(f"{label}: probability is not non-increasing in s")


@dataclass(frozen=True)
class GammaLaw:
    """``P(s) = 1 - s**gamma`` with ``gamma`` in (0, 1]."""

    gamma: float = 1.0

    def __post_init__(self) -> None:
        if not (0.0 < self.gamma <= 1.0):
            raise ConstraintViolation(f"gamma must lie in (0, 1], got {self.gamma!r}")

    def __call__(self, s: float | np.ndarray) -> float | np.ndarray:
        return 1.0 - np.power(s, self.gamma)

    @property
    def s_cr(self) -> float:
        return 0.5 ** (1.0 / self.gamma)


def piecewise_coefficients(s_cr: float, mu: float, gamma: float | None = None) -> tuple[float, float, float]:
    """Coefficients ``(a, b, c)`` of the congested branch of :class:`PiecewiseLaw`.

    Parameters
    ----------
    s_cr : float
        Critical occupancy in (0, 1).
    mu : float
        Right derivative at ``s_cr``. Must be negative and steeper than the
        bound ``-gamma * s_cr**(gamma - 1)``.
    gamma : float, optional
        Exponent used for the bound. By default it is tied to ``s_cr`` through
        ``s_cr = (1/2)**(1/gamma)``.

    Raises
    ------
    ConstraintViolation
        Naming the violated property.
    """
    if not (0.0 < s_cr < 1.0):
        raise ConstraintViolation(f"s_cr must lie in (0, 1), got {s_cr!r}")
    if gamma is None:
        gamma = math.log(0.5) / math.log(s_cr)
    if not mu < 0:
        raise ConstraintViolation(f"mu must be negative (monotone decrease), got {mu!r}")
    bound = -gamma * s_cr ** (gamma - 1.0)
    if not mu > bound:
        raise ConstraintViolation(
            f"mu must exceed -gamma*s_cr**(gamma-1) = {bound!r} so that the law dominates "
            f"the gamma law past s_cr, got {mu!r}"
        )
    d = s_cr - 1.0
    a = (2.0 * mu * d - 1.0) / (2.0 * d * d)
    b = -(mu * (s_cr * s_cr - 1.0) - s_cr) / (d * d)
    c = (2.0 * s_cr * (mu * d - 1.0) + 1.0) / (2.0 * d * d)
    return a, b, c


@dataclass(frozen=True)
class PiecewiseLaw:
    """Linear-then-quadratic probability law.

    ``P(s) = 1 - s/(2 s_cr)`` on ``[0, s_cr]`` and ``a s**2 + b s + c`` beyond.
    """

    s_cr: float = 0.5
    mu: float = -0.125
    gamma: float | None = None

    def __post_init__(self) -> None:
        piecewise_coefficients(self.s_cr, self.mu, self.gamma)
        _check_monotone(self.__call__, "PiecewiseLaw")

    @property
    def coefficients(self) -> tuple[float, float, float]:
        return piecewise_coefficients(self.s_cr, self.mu, self.gamma)

    def __call__(self, s: float | np.ndarray) -> float | np.ndarray:
        a, b, c = self.coefficients
        s_arr = np.asarray(s, dtype=float)
        out = np.where(s_arr <= self.s_cr, 1.0 - s_arr / (2.0 * self.s_cr), (a * s_arr + b) * s_arr + c)
        return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class CustomLaw:
    """Arbitrary non-increasing law, mainly for degenerate test scenarios.

    Parameters
    ----------
    func : callable
        Vectorised map from ``s`` to ``P``.
    critical : float
        Occupancy where ``P`` crosses 1/2.
    """

    func: Callable[[np.ndarray], np.ndarray]
    critical: float
    name: str = "custom"

    def __post_init__(self) -> None:
        _check_monotone(lambda x: np.broadcast_to(self.func(x), np.shape(x)), self.name)

    def __call__(self, s: float | np.ndarray) -> float | np.ndarray:
        out = np.asarray(self.func(np.asarray(s, dtype=float)), dtype=float)
        return float(out) if out.ndim == 0 else out

    @property
    def s_cr(self) -> float:
        return self.critical


ProbabilityLaw = GammaLaw | PiecewiseLaw | CustomLaw


def eval_probability(law: ProbabilityLaw, s: float) -> float:
    """Evaluate the acceleration probability at occupancy ``s``.

    The result is clipped to ``[0, 1]`` to absorb round-off at the ends.
    """
    if not (0.0 <= s <= 1.0):
        if 1.0 < s <= 1.0 + OCCUPANCY_SLACK:
            s = 1.0
        else:
            raise ConstraintViolation(f"s must lie in [0, 1], got {s!r}")
    return float(min(1.0, max(0.0, float(law(s)))))


@dataclass(frozen=True)
class VelocityGrid:
    """Cell decomposition of ``[0, v_max]`` for one class.

    Cell ``j`` (1-based) covers ``[(j - 3/2) dv, (j - 1/2) dv]`` clipped to
    ``[0, v_max]``, so the two end cells have half width.

    Parameters
    ----------
    class_id : str
    v_max : float
    delta_v : float
        Velocity jump of the class.
    r : int
        Number of cells per velocity jump.
    """

    class_id: str
    v_max: float
    delta_v: float
    r: int

    @property
    def dv(self) -> float:
        """Cell spacing ``delta_v / r``."""
        return self.delta_v / self.r

    @property
    def T(self) -> int:
        return _integer_ratio(self.v_max, self.delta_v, "v_max/delta_v")

    @property
    def n(self) -> int:
        return self.T * self.r + 1

    @property
    def delta_v_cells(self) -> int:
        """Cells travelled by one acceleration (equals ``r``)."""
        return self.r

    @property
    def midpoints(self) -> np.ndarray:
        v = np.arange(self.n, dtype=float) * self.dv
        v[0] = self.dv / 4.0
        v[-1] = self.v_max - self.dv / 4.0
        return v

    @property
    def widths(self) -> np.ndarray:
        w = np.full(self.n, self.dv)
        w[0] = w[-1] = self.dv / 2.0
        return w

    @property
    def nodes(self) -> np.ndarray:
        """Cell centres without the endpoint offset, ``(j - 1) dv``."""
        return np.arange(self.n, dtype=float) * self.dv

    def half_cell_bounds(self, j: int) -> tuple[int, int]:
        """Bounds of cell ``j`` (1-based) in units of ``dv/2``."""
        return max(0, 2 * j - 3), min(2 * (self.n - 1), 2 * j - 1)


def build_grid(vclass: VehicleClass, r: int) -> VelocityGrid:
    """Velocity grid of ``vclass`` with ``r`` cells per velocity jump."""
    if not (isinstance(r, (int, np.integer)) and r >= 1):
        raise AssumptionViolation(f"refinement r must be a positive integer, got {r!r}")
    vclass.T  # validates the integer ratio
    return VelocityGrid(vclass.id, vclass.v_max, vclass.delta_v, int(r))


def build_grids(classes: Sequence[VehicleClass], r: int = 1) -> tuple[VelocityGrid, ...]:
    """Grids of all classes on a common spacing.

    The spacing is ``min(delta_v) / r``; each class gets ``delta_v / spacing``
    cells per jump, which must be an integer.
    """
    if not (isinstance(r, (int, np.integer)) and r >= 1):
        raise AssumptionViolation(f"refinement r must be a positive integer, got {r!r}")
    base = min(c.delta_v for c in classes)
    grids = []
    for c in classes:
        ratio = _integer_ratio(c.delta_v, base, f"delta_v ratio of class {c.id!r} to the smallest jump")
        grids.append(build_grid(c, ratio * int(r)))
    return tuple(grids)
