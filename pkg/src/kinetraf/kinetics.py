"""Interaction matrices and the collision right-hand side.

A binary interaction involves a candidate vehicle of class ``p`` (speed
``v_*``) and a field vehicle of class ``q`` (speed ``v^*``). If the candidate
is not faster it accelerates by one jump with probability ``P`` (capped at its
maximum speed) and otherwise keeps its speed; if it is faster it brakes to the
field speed with probability ``1 - P`` and otherwise keeps its speed.

Discretising velocities into cells, the probability that a candidate in cell
``h`` interacting with a field vehicle in cell ``k`` lands in cell ``j`` is
``M[j, h, k] = const + P * slope``. The constant and slope only depend on the
relative position of the two cells, through the probability that a uniform
speed in cell ``h`` does not exceed a uniform speed in cell ``k``. That
probability is 0, 1/4, 1/2, 3/4 or 1 and is computed exactly with fractions.

:func:`collision_rhs_direct` evaluates the same right-hand side from explicit
sum formulas, without any matrix, and is kept as an independent check.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache
from typing import Sequence

import numpy as np

from .model import AssumptionViolation, ConstraintViolation, ModelError, Mixture, VelocityGrid

__all__ = [
    "DimensionMismatch",
    "KineticState",
    "MatrixFamily",
    "InteractionMatrixSet",
    "AssembledOperator",
    "build_self_matrices",
    "build_cross_matrices",
    "build_interaction_matrices",
    "collision_rhs",
    "collision_rhs_direct",
    "assemble_operator",
]


class DimensionMismatch(ModelError):
    """State, grids and matrices do not fit together."""


def _check_P(P: float) -> float:
    P = float(P)
    if not (0.0 <= P <= 1.0):
        raise ConstraintViolation(f"P must lie in [0, 1], got {P!r}")
    return P


@dataclass(frozen=True)
class KineticState:
    """Per-class discrete distributions on their velocity grids.

    Parameters
    ----------
    grids : tuple of VelocityGrid
    values : tuple of ndarray
        ``values[p][j]`` is the density of class ``p`` in cell ``j`` (veh/km).
    """

    grids: tuple[VelocityGrid, ...]
    values: tuple[np.ndarray, ...] = field(compare=False)

    def __post_init__(self) -> None:
        grids = tuple(self.grids)
        values = []
        if len(self.values) != len(grids):
            raise DimensionMismatch("one value vector per grid is required")
        for g, v in zip(grids, self.values):
            arr = np.array(v, dtype=float)
            if arr.shape != (g.n,):
                raise DimensionMismatch(f"class {g.class_id!r} expects {g.n} cells, got shape {arr.shape}")
            arr.setflags(write=False)
            values.append(arr)
        object.__setattr__(self, "grids", grids)
        object.__setattr__(self, "values", tuple(values))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, KineticState):
            return NotImplemented
        return self.grids == other.grids and all(np.array_equal(a, b) for a, b in zip(self.values, other.values))

    __hash__ = None  # type: ignore[assignment]

    @classmethod
    def uniform(cls, grids: Sequence[VelocityGrid], densities: Sequence[float]) -> "KineticState":
        """Each class spread evenly over its cells."""
        return cls(tuple(grids), tuple(np.full(g.n, float(d) / g.n) for g, d in zip(grids, densities)))

    @classmethod
    def from_flat(cls, grids: Sequence[VelocityGrid], flat: np.ndarray) -> "KineticState":
        grids = tuple(grids)
        offsets = np.cumsum([0] + [g.n for g in grids])
        if np.shape(flat) != (offsets[-1],):
            raise DimensionMismatch(f"flat state must have length {offsets[-1]}")
        return cls(grids, tuple(flat[offsets[i] : offsets[i + 1]] for i in range(len(grids))))

    @property
    def flat(self) -> np.ndarray:
        return np.concatenate(self.values)

    @property
    def densities(self) -> tuple[float, ...]:
        return tuple(float(np.sum(v)) for v in self.values)


# ---------------------------------------------------------------------------
# Transition coefficients


def _ramp_integral(y: int, lo: int, width: int) -> Fraction:
    """Integral up to ``y`` of ``clip((t - lo) / width, 0, 1)``."""
    if y <= lo:
        return Fraction(0)
    if y >= lo + width:
        return Fraction(width, 2) + (y - lo - width)
    return Fraction((y - lo) ** 2, 2 * width)


def _not_faster(cand: tuple[int, int], fld: tuple[int, int]) -> Fraction:
    """Probability that a uniform draw on ``cand`` is <= a uniform draw on ``fld``."""
    a1, b1 = cand
    a2, b2 = fld
    return (_ramp_integral(b2, a1, b1 - a1) - _ramp_integral(a2, a1, b1 - a1)) / (b2 - a2)


@lru_cache(maxsize=256)
def _transition_terms(grid_p: VelocityGrid, grid_q: VelocityGrid) -> tuple[np.ndarray, ...]:
    """Sorted, merged triples ``(j, h, k)`` with their constant and slope parts."""
    if abs(grid_p.dv - grid_q.dv) > 1e-12 * max(grid_p.dv, grid_q.dv):
        raise AssumptionViolation(
            f"grids of {grid_p.class_id!r} and {grid_q.class_id!r} have different spacings "
            f"{grid_p.dv!r} and {grid_q.dv!r}"
        )
    n_p, n_q, r = grid_p.n, grid_q.n, grid_p.r
    acc: dict[tuple[int, int, int], list[Fraction]] = {}

    def add(j: int, h: int, k: int, const: Fraction, slope: Fraction) -> None:
        if const == 0 and slope == 0:
            return
        entry = acc.setdefault((j, h, k), [Fraction(0), Fraction(0)])
        entry[0] += const
        entry[1] += slope

    for h in range(1, n_p + 1):
        cand = grid_p.half_cell_bounds(h)
        for k in range(1, n_q + 1):
            frac = _not_faster(cand, grid_q.half_cell_bounds(k))
            # keep speed: slower with prob 1-P, faster with prob P
            add(h, h, k, frac, 1 - 2 * frac)
            # accelerate by one jump, capped at the top cell
            add(min(h + r, n_p), h, k, Fraction(0), frac)
            # brake to the field cell; k <= n_p whenever frac < 1
            if frac < 1:
                add(k, h, k, 1 - frac, frac - 1)

    keys = sorted(acc)
    j, h, k = (np.array(col, dtype=np.int64) - 1 for col in zip(*keys))
    const = np.array([float(acc[key][0]) for key in keys])
    slope = np.array([float(acc[key][1]) for key in keys])
    keep = (const != 0) | (slope != 0)
    out = tuple(a[keep] for a in (j, h, k, const, slope))
    for a in out:
        a.setflags(write=False)
    return out


@dataclass(frozen=True)
class MatrixFamily:
    """The ``n_p`` transition matrices of one ordered class pair at fixed ``P``.

    Stored as coordinate triples: matrix ``j[t]`` has entry ``value[t]`` at
    row ``h[t]`` and column ``k[t]`` (all 0-based).
    """

    p: str
    q: str
    shape: tuple[int, int]
    P: float
    j: np.ndarray = field(repr=False)
    h: np.ndarray = field(repr=False)
    k: np.ndarray = field(repr=False)
    value: np.ndarray = field(repr=False)

    def __len__(self) -> int:
        return self.shape[0]

    def __getitem__(self, j: int) -> np.ndarray:
        """Dense matrix for output cell ``j`` (0-based)."""
        if not (0 <= j < self.shape[0]):
            raise IndexError(j)
        out = np.zeros(self.shape)
        sel = self.j == j
        np.add.at(out, (self.h[sel], self.k[sel]), self.value[sel])
        return out

    def triples(self, j: int) -> list[tuple[int, int, float]]:
        """Nonzero ``(h, k, value)`` triples of matrix ``j`` (0-based)."""
        sel = np.flatnonzero(self.j == j)
        return [(int(self.h[t]), int(self.k[t]), float(self.value[t])) for t in sel]

    def dense(self) -> np.ndarray:
        """All matrices stacked as an array of shape ``(n_p, n_p, n_q)``."""
        out = np.zeros((self.shape[0],) + self.shape)
        np.add.at(out, (self.j, self.h, self.k), self.value)
        return out

    def gain(self, f_p: np.ndarray, f_q: np.ndarray) -> np.ndarray:
        """Quadratic forms ``f_p^T M_j f_q`` for every ``j``."""
        terms = self.value * f_p[self.h] * f_q[self.k]
        return np.bincount(self.j, weights=terms, minlength=self.shape[0])


def _family(grid_p: VelocityGrid, grid_q: VelocityGrid, P: float) -> MatrixFamily:
    P = _check_P(P)
    j, h, k, const, slope = _transition_terms(grid_p, grid_q)
    value = const + P * slope
    value.setflags(write=False)
    return MatrixFamily(grid_p.class_id, grid_q.class_id, (grid_p.n, grid_q.n), P, j, h, k, value)


def build_self_matrices(grid: VelocityGrid, P: float) -> MatrixFamily:
    """Self-interaction matrices ``A^{p,j}`` of one class."""
    return _family(grid, grid, P)


def build_cross_matrices(grid_p: VelocityGrid, grid_q: VelocityGrid, P: float) -> MatrixFamily:
    """Cross-interaction matrices ``B^{pq,j}``, candidate ``p`` and field ``q``.

    Raises
    ------
    AssumptionViolation
        If the two grids do not share their cell spacing.
    """
    return _family(grid_p, grid_q, P)


@dataclass(frozen=True)
class InteractionMatrixSet:
    """Matrix families for every ordered class pair, built at one ``P``."""

    grids: tuple[VelocityGrid, ...]
    P: float
    families: dict[tuple[int, int], MatrixFamily] = field(compare=False, repr=False)

    def self_matrices(self, p: int) -> MatrixFamily:
        return self.families[(p, p)]

    def cross_matrices(self, p: int, q: int) -> MatrixFamily:
        return self.families[(p, q)]


def build_interaction_matrices(grids: Sequence[VelocityGrid], P: float) -> InteractionMatrixSet:
    grids = tuple(grids)
    families = {
        (p, q): (build_self_matrices(gp, P) if p == q else build_cross_matrices(gp, gq, P))
        for p, gp in enumerate(grids)
        for q, gq in enumerate(grids)
    }
    return InteractionMatrixSet(grids, _check_P(P), families)


def _check_state(state: KineticState, grids: Sequence[VelocityGrid], mixture: Mixture) -> None:
    if tuple(state.grids) != tuple(grids):
        raise DimensionMismatch("state grids differ from the grids of the interaction matrices")
    if len(state.grids) != len(mixture.classes):
        raise DimensionMismatch("state and mixture have different numbers of classes")
    for g, c in zip(state.grids, mixture.classes):
        if g.class_id != c.id:
            raise DimensionMismatch(f"grid {g.class_id!r} does not match class {c.id!r}")


def collision_rhs(state: KineticState, matrices: InteractionMatrixSet, mixture: Mixture) -> tuple[np.ndarray, ...]:
    """Time derivative of every class distribution.

    Gains come from the matrix quadratic forms; the loss of cell ``j`` is
    ``f_j * sum_q eta_pq * rho_q`` with ``rho_q`` the current class masses.
    """
    _check_state(state, matrices.grids, mixture)
    eta = mixture.rates
    rho = [float(np.sum(v)) for v in state.values]
    out = []
    for p, f_p in enumerate(state.values):
        total = np.zeros_like(f_p)
        loss_rate = 0.0
        for q, f_q in enumerate(state.values):
            total += eta[p, q] * matrices.families[(p, q)].gain(f_p, f_q)
            loss_rate += eta[p, q] * rho[q]
        out.append(total - loss_rate * f_p)
    return tuple(out)


# ---------------------------------------------------------------------------
# Explicit sum formulas (independent of the matrices)


def _self_direct(f: np.ndarray, r: int, P: float) -> np.ndarray:
    n = len(f)
    F = np.concatenate(([0.0], f))  # 1-based
    S = lambda a, b: float(np.sum(F[a : b + 1])) if b >= a else 0.0  # noqa: E731
    out = np.zeros(n + 1)
    for j in range(1, n + 1):
        if j < n:
            val = (
                (1 - P / 2) * F[j] * F[j]
                + P * F[j] * S(1, j - 1)
                + (1 - P) * F[j] * S(j + 1, n)
                + (1 - P) * F[j] * S(j + 1, n)
                - F[j] * S(1, n)
            )
            if j > r:
                val += P / 2 * F[j - r] * F[j - r] + P * F[j - r] * S(j - r + 1, n)
        else:
            val = (
                P * sum(F[h] * (0.5 * F[h] + S(h + 1, n)) for h in range(n - r, n))
                + F[n] * F[n]
                + P * F[n] * S(1, n - 1)
                - F[n] * S(1, n)
            )
        out[j] = val
    return out[1:]


def _subset_direct(fp: np.ndarray, fq: np.ndarray, r: int, P: float) -> np.ndarray:
    """Class ``p`` with the smaller (or equal) velocity range."""
    n_p, n_q = len(fp), len(fq)
    A = np.concatenate(([0.0], fp))
    B = np.concatenate(([0.0], fq))
    Sa = lambda a, b: float(np.sum(A[a : b + 1])) if b >= a else 0.0  # noqa: E731
    Sb = lambda a, b: float(np.sum(B[a : b + 1])) if b >= a else 0.0  # noqa: E731
    out = np.zeros(n_p + 1)
    for j in range(1, n_p + 1):
        if j < n_p:
            val = (
                (1 - P / 2) * B[j] * A[j]
                + P * A[j] * Sb(1, j - 1)
                + (1 - P) * A[j] * Sb(j + 1, n_q)
                + (1 - P) * B[j] * Sa(j + 1, n_p)
                - A[j] * Sb(1, n_q)
            )
            if j > r:
                val += P / 2 * B[j - r] * A[j - r] + P * A[j - r] * Sb(j - r + 1, n_q)
        else:
            val = (
                P * sum(A[h] * (0.5 * B[h] + Sb(h + 1, n_q)) for h in range(n_p - r, n_p))
                + A[n_p] * (B[n_p] + Sb(n_p + 1, n_q))
                + P * A[n_p] * Sb(1, n_p - 1)
                - A[n_p] * Sb(1, n_q)
            )
        out[j] = val
    return out[1:]


def _superset_direct(fp: np.ndarray, fq: np.ndarray, r: int, P: float) -> np.ndarray:
    """Class ``p`` with the strictly larger velocity range."""
    n_p, n_q = len(fp), len(fq)
    if n_q < r + 1 or n_p < n_q + r:
        raise AssumptionViolation("explicit formulas need n_q > r and n_p >= n_q + r")
    A = np.concatenate(([0.0], fp))
    B = np.concatenate(([0.0], fq))
    Sa = lambda a, b: float(np.sum(A[a : b + 1])) if b >= a else 0.0  # noqa: E731
    Sb = lambda a, b: float(np.sum(B[a : b + 1])) if b >= a else 0.0  # noqa: E731
    tot_q = Sb(1, n_q)
    out = np.zeros(n_p + 1)
    for j in range(1, n_p + 1):
        if j < n_q:
            val = (
                (1 - P / 2) * B[j] * A[j]
                + P * A[j] * Sb(1, j - 1)
                + (1 - P) * A[j] * Sb(j + 1, n_q)
                + (1 - P) * B[j] * Sa(j + 1, n_p)
                - A[j] * tot_q
            )
            if j > r:
                val += P / 2 * B[j - r] * A[j - r] + P * A[j - r] * Sb(j - r + 1, n_q)
        elif j == n_q:
            val = (
                P / 2 * B[n_q - r] * A[n_q - r]
                + (1 - P / 4) * B[n_q] * A[n_q]
                + P * A[n_q - r] * Sb(n_q - r + 1, n_q)
                + P * A[n_q] * Sb(1, n_q - 1)
                + (1 - P) * B[n_q] * Sa(n_q + 1, n_p)
                - A[n_q] * tot_q
            )
        elif j < n_q + r:
            val = P / 2 * B[j - r] * A[j - r] + P * A[j - r] * Sb(j - r + 1, n_q) + P * A[j] * tot_q - A[j] * tot_q
        elif j == n_q + r:
            val = P / 4 * B[n_q] * A[n_q] + P * A[j] * tot_q - A[j] * tot_q
        else:
            val = P * A[j] * tot_q - A[j] * tot_q
        out[j] = val
    return out[1:]


def collision_rhs_direct(state: KineticState, P: float, mixture: Mixture) -> tuple[np.ndarray, ...]:
    """Reference right-hand side evaluated from explicit sum formulas."""
    P = _check_P(P)
    if len(state.grids) != len(mixture.classes):
        raise DimensionMismatch("state and mixture have different numbers of classes")
    out = []
    for p, (gp, fp) in enumerate(zip(state.grids, state.values)):
        total = mixture.rates[p, p] * _self_direct(fp, gp.r, P)
        for q, (gq, fq) in enumerate(zip(state.grids, state.values)):
            if q == p:
                continue
            if abs(gp.dv - gq.dv) > 1e-12 * max(gp.dv, gq.dv):
                raise AssumptionViolation("grids must share their cell spacing")
            if gp.n <= gq.n:
                term = _subset_direct(fp, fq, gp.r, P)
            else:
                term = _superset_direct(fp, fq, gp.r, P)
            total = total + mixture.rates[p, q] * term
        out.append(total)
    return tuple(out)


# ---------------------------------------------------------------------------
# Flattened operator for batched time integration


@dataclass(frozen=True)
class AssembledOperator:
    """All matrix families of a mixture flattened onto one state vector.

    The state of all classes is concatenated into a vector of length ``N``.
    Triples are sorted by output index so that gains reduce with
    ``np.add.reduceat``; every reduction runs row by row in a fixed order,
    so results for one state do not depend on what else is in the batch.
    """

    grids: tuple[VelocityGrid, ...]
    rates: np.ndarray = field(repr=False)
    offsets: np.ndarray = field(repr=False)
    class_of: np.ndarray = field(repr=False)
    J: np.ndarray = field(repr=False)
    H: np.ndarray = field(repr=False)
    K: np.ndarray = field(repr=False)
    const: np.ndarray = field(repr=False)
    slope: np.ndarray = field(repr=False)
    starts: np.ndarray = field(repr=False)

    @property
    def size(self) -> int:
        return int(self.offsets[-1])

    def weights(self, P: float | np.ndarray) -> np.ndarray:
        """Rate-weighted matrix entries, shape ``(T,)`` or ``(B, T)``."""
        P = np.asarray(P, dtype=float)
        if P.ndim == 0:
            return self.const + float(P) * self.slope
        return self.const[None, :] + P[:, None] * self.slope[None, :]

    def masses(self, y: np.ndarray) -> np.ndarray:
        return np.add.reduceat(y, self.offsets[:-1], axis=-1)

    def loss_rates(self, masses: np.ndarray) -> np.ndarray:
        """``R_p = sum_q eta_pq m_q``, accumulated in a fixed order."""
        C = len(self.grids)
        out = np.zeros_like(masses)
        for q in range(C):
            out += masses[..., q : q + 1] * self.rates[:, q]
        return out

    def rhs(self, y: np.ndarray, w: np.ndarray) -> np.ndarray:
        """Right-hand side for a state ``(N,)`` or a batch ``(B, N)``."""
        gains = np.add.reduceat(w * y[..., self.H] * y[..., self.K], self.starts, axis=-1)
        R = self.loss_rates(self.masses(y))
        return gains - y * R[..., self.class_of]

    def jacobian(self, y: np.ndarray, w: np.ndarray) -> np.ndarray:
        """Dense Jacobian of :meth:`rhs` for a single state."""
        N = self.size
        jac = np.zeros((N, N))
        np.add.at(jac, (self.J, self.H), w * y[self.K])
        np.add.at(jac, (self.J, self.K), w * y[self.H])
        R = self.loss_rates(self.masses(y))
        jac[np.arange(N), np.arange(N)] -= R[self.class_of]
        jac -= y[:, None] * self.rates[self.class_of][:, self.class_of]
        return jac


def assemble_operator(grids: Sequence[VelocityGrid], rates: np.ndarray) -> AssembledOperator:
    """Flatten the families of every ordered pair, weighted by their rates."""
    grids = tuple(grids)
    rates = np.array(rates, dtype=float)
    if rates.shape != (len(grids), len(grids)):
        raise DimensionMismatch("rate matrix does not match the number of grids")
    offsets = np.cumsum([0] + [g.n for g in grids])
    cols: list[list[np.ndarray]] = [[], [], [], [], []]
    for p, gp in enumerate(grids):
        for q, gq in enumerate(grids):
            j, h, k, const, slope = _transition_terms(gp, gq)
            for store, arr in zip(cols, (j + offsets[p], h + offsets[p], k + offsets[q], rates[p, q] * const, rates[p, q] * slope)):
                store.append(arr)
    J, H, K, const, slope = (np.concatenate(c) for c in cols)
    order = np.lexsort((K, H, J))
    J, H, K, const, slope = (a[order] for a in (J, H, K, const, slope))
    starts = np.searchsorted(J, np.arange(offsets[-1]))
    if np.any(np.diff(np.append(starts, len(J))) == 0):
        raise DimensionMismatch("every cell must receive at least one transition")
    class_of = np.repeat(np.arange(len(grids)), [g.n for g in grids])
    arrays = (rates, offsets, class_of, J, H, K, const, slope, starts)
    for a in arrays:
        a.setflags(write=False)
    return AssembledOperator(grids, *arrays)
