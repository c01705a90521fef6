"""Time integration of the space-homogeneous system towards equilibrium.

The integrator is the classical fourth-order Runge-Kutta scheme with a fixed
step ``dt = 0.1 / max_p R_p``, where ``R_p = sum_q eta_pq rho_q`` is the loss
rate of class ``p``. A step that produces a value below ``-1e-12`` is
rejected and retried with half the step. After every accepted step each
class is rescaled to its exact mass.

Many independent runs are advanced together by :func:`relax_batch`. Each run
keeps its own step size and clock, so a run's trajectory is the same whether
it is integrated alone or inside a batch.

At ``P = 1/2`` the lowest cells decay only algebraically. Runs that are still
unconverged after ``polish_after`` steps are handed to a guarded Newton
iteration on the mass-constrained steady-state equations; its result is kept
only when it meets the residual threshold, stays admissible and is linearly
stable. If Newton fails, backward Euler steps of doubling length continue the
flow until the threshold is met, under the same acceptance guards.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .kinetics import (
    AssembledOperator,
    InteractionMatrixSet,
    KineticState,
    assemble_operator,
    collision_rhs,
)
from .model import ConstraintViolation, Mixture, ProbabilityLaw, eval_probability, occupied_fraction

__all__ = [
    "StepRejected",
    "AccuracyWarning",
    "RelaxationReport",
    "BatchResult",
    "integrate_step",
    "relax_to_equilibrium",
    "relax_batch",
    "initial_dt",
    "NEGATIVITY_TOL",
]

#: Most negative value an accepted step may produce.
NEGATIVITY_TOL = 1e-12
#: Relative mass correction above which an accuracy warning is issued.
CORRECTION_WARN = 1e-10
#: Step-size factor relative to the fastest loss rate.
DT_FACTOR = 0.1
#: Maximum number of consecutive halvings of one step.
MAX_HALVINGS = 60


class StepRejected(ArithmeticError):
    """A step would make some cell density negative."""


class AccuracyWarning(UserWarning):
    """Mass renormalisation corrected more than ``1e-10 * rho``."""


def initial_dt(masses: np.ndarray, rates: np.ndarray) -> float:
    """``0.1 / max_p R_p``, or ``inf`` for an empty road."""
    R = rates @ np.asarray(masses, dtype=float)
    top = float(np.max(R)) if R.size else 0.0
    return DT_FACTOR / top if top > 0 else math.inf


def _rk4(op: AssembledOperator, y: np.ndarray, w: np.ndarray, dt: np.ndarray, k1: np.ndarray) -> np.ndarray:
    h = dt[..., None]
    k2 = op.rhs(y + 0.5 * h * k1, w)
    k3 = op.rhs(y + 0.5 * h * k2, w)
    k4 = op.rhs(y + h * k3, w)
    return y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _renormalise(op: AssembledOperator, y: np.ndarray, rho: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Rescale each class to its target mass; return the state and relative corrections."""
    m = op.masses(y)
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = np.where(m > 0, rho / np.where(m > 0, m, 1.0), 0.0)
        rel = np.where(rho > 0, np.abs(m - rho) / np.where(rho > 0, rho, 1.0), np.abs(m))
    y = y * scale[..., op.class_of]
    # put the last rounding residue on the largest cell of each class
    resid = rho - op.masses(y)
    for c in range(len(op.grids)):
        lo, hi = op.offsets[c], op.offsets[c + 1]
        arg = lo + np.argmax(y[..., lo:hi], axis=-1)
        rows = np.arange(y.shape[0])
        y[rows, arg] += resid[:, c]
    return y, rel


@dataclass(frozen=True)
class BatchResult:
    """Arrays describing a batch of relaxation runs (one row per run)."""

    y: np.ndarray
    P: np.ndarray
    time: np.ndarray
    steps: np.ndarray
    residual: np.ndarray
    threshold: np.ndarray
    converged: np.ndarray
    polished: np.ndarray
    rejections: np.ndarray
    max_correction: np.ndarray
    min_value: np.ndarray
    max_excess: np.ndarray
    max_mass_error: np.ndarray
    trajectories: tuple[list[tuple[float, np.ndarray]], ...] = field(repr=False)


def _tangent_spectrum_max(op: AssembledOperator, y: np.ndarray, w: np.ndarray) -> float:
    """Largest real part of the Jacobian on the mass-preserving subspace."""
    E = np.zeros((len(op.grids), op.size))
    for c in range(len(op.grids)):
        E[c, op.offsets[c] : op.offsets[c + 1]] = 1.0
    _, _, vt = np.linalg.svd(E)
    Z = vt[len(op.grids) :].T
    if Z.shape[1] == 0:
        return -math.inf
    return float(np.max(np.linalg.eigvals(Z.T @ op.jacobian(y, w) @ Z).real))


def _newton_polish(
    op: AssembledOperator,
    y0: np.ndarray,
    w: np.ndarray,
    rho: np.ndarray,
    threshold: float,
    max_iter: int = 100,
    patience: int = 8,
) -> np.ndarray | None:
    """Solve ``rhs(y) = 0`` at fixed class masses, starting from ``y0``.

    The last equation of every class is replaced by its mass constraint.
    The best iterate is returned only if it meets ``threshold``, is
    admissible and is linearly stable on the mass-preserving subspace, which
    rules out the unstable equilibria living on invariant sub-manifolds.
    """
    last = op.offsets[1:] - 1
    y = y0.copy()
    best, best_res, since = None, math.inf, 0
    for _ in range(max_iter):
        g = op.rhs(y, w)
        res = float(np.sum(np.abs(g)))
        if res < best_res:
            best, best_res, since = y.copy(), res, 0
        else:
            since += 1
            if since >= patience:
                break
        g[last] = op.masses(y) - rho
        jac = op.jacobian(y, w)
        for c, row in enumerate(last):
            jac[row] = 0.0
            jac[row, op.offsets[c] : op.offsets[c + 1]] = 1.0
        try:
            delta = np.linalg.solve(jac, -g)
        except np.linalg.LinAlgError:
            delta = np.linalg.lstsq(jac, -g, rcond=None)[0]
        if not np.all(np.isfinite(delta)):
            break
        y = np.maximum(y + delta, 0.0)
    if best is None:
        return None
    y, _ = _renormalise(op, best[None, :], rho[None, :])
    y = y[0]
    if np.sum(np.abs(op.rhs(y, w))) > threshold:
        return None
    return y if _admissible_and_stable(op, y, w, rho) else None


def _implicit_continuation(
    op: AssembledOperator,
    y0: np.ndarray,
    w: np.ndarray,
    rho: np.ndarray,
    threshold: float,
    dt: float,
    max_steps: int = 20_000,
) -> tuple[np.ndarray, float, int, bool]:
    """Backward Euler with doubling steps, for runs that approach a degenerate equilibrium.

    Near a multiple root the explicit flow decays only algebraically. Implicit
    steps follow the same flow but may grow geometrically. A step whose inner
    Newton solve fails or which leaves the admissible set is retried with a
    quarter of the step.

    Returns the state, the model time added, the accepted steps and whether the
    residual met ``threshold``.
    """
    eye = np.eye(op.size)
    y = y0.copy()
    t = 0.0
    tol = 1e-12 * max(float(rho.sum()), 1.0)
    for k in range(max_steps):
        if np.sum(np.abs(op.rhs(y, w))) <= threshold:
            return y, t, k, True
        z = y.copy()
        ok = False
        for _ in range(30):
            try:
                d = np.linalg.solve(eye - dt * op.jacobian(z, w), -(z - y - dt * op.rhs(z, w)))
            except np.linalg.LinAlgError:
                break
            z = z + d
            if np.sum(np.abs(d)) <= tol:
                ok = bool(np.all(np.isfinite(z)))
                break
        if not ok or z.min() < -NEGATIVITY_TOL:
            dt *= 0.25
            if dt == 0.0:
                break
            continue
        y = _renormalise(op, np.maximum(z, 0.0)[None, :], rho[None, :])[0][0]
        t += dt
        dt *= 2.0
    return y, t, max_steps, bool(np.sum(np.abs(op.rhs(y, w))) <= threshold)


def _admissible_and_stable(op: AssembledOperator, y: np.ndarray, w: np.ndarray, rho: np.ndarray) -> bool:
    if np.any(y < 0) or np.any(y > rho[op.class_of] + 1e-10):
        return False
    Rmax = float(np.max(op.loss_rates(rho)))
    return _tangent_spectrum_max(op, y, w) <= 1e-8 * Rmax


def relax_batch(
    op: AssembledOperator,
    y0: np.ndarray,
    P: Sequence[float] | np.ndarray,
    tol: float = 1e-12,
    t_max: float = math.inf,
    max_steps: int = 200_000,
    polish_after: int | None = 20_000,
    output_times: Sequence[float] | None = None,
) -> BatchResult:
    """Relax many independent states of the same mixture structure.

    Parameters
    ----------
    op : AssembledOperator
        Flattened operator including the interaction rates.
    y0 : ndarray, shape (B, N)
        Initial states; their class masses are conserved.
    P : array_like, shape (B,)
        Acceleration probability of each run.
    tol : float
        Converged when the 1-norm of the right-hand side is at most
        ``tol * max(sum(rho), 1) * max(eta)``.
    t_max : float
        Model-time horizon in hours.
    max_steps : int
        Accepted-step budget per run.
    polish_after : int or None
        Step count after which a stalled run is finished once by a Newton
        polish or, failing that, by implicit continuation.
    output_times : sequence of float, optional
        Times at which the state is recorded (first accepted step at or past
        each time).
    """
    y = np.array(y0, dtype=float, ndmin=2).copy()
    B, N = y.shape
    if N != op.size:
        raise ConstraintViolation(f"states have {N} cells, operator expects {op.size}")
    P = np.broadcast_to(np.asarray(P, dtype=float), (B,)).copy()
    if np.any((P < 0) | (P > 1)):
        raise ConstraintViolation("P must lie in [0, 1]")
    if not tol > 0:
        raise ConstraintViolation("tol must be positive")
    if np.any(y < -NEGATIVITY_TOL):
        raise ConstraintViolation("initial states must be non-negative")
    rho = op.masses(y)
    W = op.weights(P)
    eta_max = float(np.max(op.rates))
    threshold = tol * np.maximum(rho.sum(axis=1), 1.0) * eta_max
    R = op.loss_rates(rho)
    Rmax = R.max(axis=1)
    with np.errstate(divide="ignore"):
        dt = np.where(Rmax > 0, DT_FACTOR / np.where(Rmax > 0, Rmax, 1.0), math.inf)

    time = np.zeros(B)
    steps = np.zeros(B, dtype=np.int64)
    residual = np.full(B, np.inf)
    converged = np.zeros(B, dtype=bool)
    polished = np.zeros(B, dtype=bool)
    tried_polish = np.zeros(B, dtype=bool)
    rejections = np.zeros(B, dtype=np.int64)
    halvings = np.zeros(B, dtype=np.int64)
    max_corr = np.zeros(B)
    min_val = y.min(axis=1)
    max_excess = (y - rho[:, op.class_of]).max(axis=1)
    max_mass_err = np.zeros(B)
    times = list(output_times) if output_times is not None else []
    next_out = np.zeros(B, dtype=np.int64)
    traj: tuple[list[tuple[float, np.ndarray]], ...] = tuple([] for _ in range(B))

    def record(rows: np.ndarray) -> None:
        for i in rows:
            while next_out[i] < len(times) and time[i] >= times[next_out[i]]:
                if not traj[i] or traj[i][-1][0] != time[i]:
                    traj[i].append((float(time[i]), y[i].copy()))
                next_out[i] += 1

    record(np.arange(B))
    active = np.ones(B, dtype=bool)
    while True:
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        ya = y[idx]
        k1 = op.rhs(ya, W[idx])
        res = np.abs(k1).sum(axis=1)
        residual[idx] = res
        done = res <= threshold[idx]
        converged[idx[done]] = True
        out_of_budget = (steps[idx] >= max_steps) | (time[idx] >= t_max) | (halvings[idx] > MAX_HALVINGS)
        # one Newton attempt for runs that stall
        if polish_after is not None:
            stall = ~done & ~out_of_budget & (steps[idx] >= polish_after) & ~tried_polish[idx]
            for pos in np.flatnonzero(stall):
                i = idx[pos]
                tried_polish[i] = True
                new = _newton_polish(op, y[i], W[i], rho[i], float(threshold[i]))
                if new is None:
                    cand_y, extra_t, extra_steps, ok = _implicit_continuation(
                        op, y[i], W[i], rho[i], float(threshold[i]), float(dt[i])
                    )
                    if ok and _admissible_and_stable(op, cand_y, W[i], rho[i]) and time[i] + extra_t <= t_max:
                        new = cand_y
                        time[i] += extra_t
                        steps[i] += extra_steps
                if new is not None:
                    y[i] = new
                    polished[i] = True
                    converged[i] = True
                    residual[i] = float(np.sum(np.abs(op.rhs(new, W[i]))))
                    min_val[i] = min(min_val[i], new.min())
                    max_excess[i] = max(max_excess[i], (new - rho[i, op.class_of]).max())
                    done[pos] = True
        stop = done | out_of_budget
        active[idx[stop]] = False
        go = ~stop
        if not np.any(go):
            continue
        idx, ya, k1 = idx[go], ya[go], k1[go]
        h = np.minimum(dt[idx], t_max - time[idx])
        cand = _rk4(op, ya, W[idx], h, k1)
        bad = cand.min(axis=1) < -NEGATIVITY_TOL
        if np.any(bad):
            rejections[idx[bad]] += 1
            halvings[idx[bad]] += 1
            dt[idx[bad]] *= 0.5
        ok = ~bad
        if not np.any(ok):
            continue
        rows = idx[ok]
        new, rel = _renormalise(op, cand[ok], rho[rows])
        y[rows] = new
        time[rows] += h[ok]
        steps[rows] += 1
        halvings[rows] = 0
        max_corr[rows] = np.maximum(max_corr[rows], rel.max(axis=1))
        min_val[rows] = np.minimum(min_val[rows], new.min(axis=1))
        max_excess[rows] = np.maximum(max_excess[rows], (new - rho[rows][:, op.class_of]).max(axis=1))
        mass_err = np.abs(op.masses(new) - rho[rows]).max(axis=1)
        max_mass_err[rows] = np.maximum(max_mass_err[rows], mass_err)
        if times:
            record(rows)

    if np.any(max_corr > CORRECTION_WARN):
        warnings.warn(
            f"mass renormalisation exceeded {CORRECTION_WARN:g} relative in "
            f"{int(np.sum(max_corr > CORRECTION_WARN))} run(s)",
            AccuracyWarning,
            stacklevel=2,
        )
    for i in range(B):
        if times and (not traj[i] or traj[i][-1][0] != time[i]):
            traj[i].append((float(time[i]), y[i].copy()))
    return BatchResult(
        y, P, time, steps, residual, threshold, converged, polished, rejections,
        max_corr, min_val, max_excess, max_mass_err, traj,
    )


@dataclass(frozen=True)
class RelaxationReport:
    """Outcome of one relaxation run.

    Attributes
    ----------
    final_state : KineticState
    elapsed_model_time : float
        Hours of model time integrated.
    steps : int
        Accepted steps.
    residual : float
        1-norm of the right-hand side at the final state.
    converged : bool
    threshold : float
        Residual level that counts as converged.
    P : float
    polished : bool
        Whether the final state came from the Newton polish or the implicit
        continuation.
    rejections : int
    max_correction : float
        Largest relative mass correction applied after a step.
    min_value, max_excess, max_mass_error : float
        Extremes over all accepted steps of ``min f``, ``max(f - rho)`` and
        ``|sum f - rho|``.
    trajectory : tuple of (float, KineticState)
        Recorded states, when output times were requested.
    """

    final_state: KineticState
    elapsed_model_time: float
    steps: int
    residual: float
    converged: bool
    threshold: float
    P: float
    polished: bool = False
    rejections: int = 0
    max_correction: float = 0.0
    min_value: float = 0.0
    max_excess: float = 0.0
    max_mass_error: float = 0.0
    trajectory: tuple[tuple[float, KineticState], ...] = field(default=(), repr=False)

    def __post_init__(self) -> None:
        if self.converged and not self.residual <= self.threshold:
            raise ValueError("a converged report needs residual <= threshold")


def _check_mixture(state: KineticState, mixture: Mixture) -> None:
    if tuple(g.class_id for g in state.grids) != mixture.ids:
        raise ConstraintViolation("state grids do not match the mixture classes")


def integrate_step(
    state: KineticState,
    matrices: InteractionMatrixSet,
    mixture: Mixture,
    dt: float,
    return_correction: bool = False,
) -> KineticState | tuple[KineticState, float]:
    """One fourth-order Runge-Kutta step followed by per-class renormalisation.

    Raises
    ------
    StepRejected
        If any cell would drop below ``-1e-12``.
    """
    if not (dt >= 0 and math.isfinite(dt)):
        raise ConstraintViolation(f"dt must be finite and >= 0, got {dt!r}")
    _check_mixture(state, mixture)
    if dt == 0:
        return (state, 0.0) if return_correction else state

    def f(values: Sequence[np.ndarray]) -> tuple[np.ndarray, ...]:
        return collision_rhs(KineticState(state.grids, tuple(values)), matrices, mixture)

    y = state.values
    k1 = f(y)
    k2 = f([a + 0.5 * dt * b for a, b in zip(y, k1)])
    k3 = f([a + 0.5 * dt * b for a, b in zip(y, k2)])
    k4 = f([a + dt * b for a, b in zip(y, k3)])
    new = [a + dt / 6.0 * (b1 + 2 * b2 + 2 * b3 + b4) for a, b1, b2, b3, b4 in zip(y, k1, k2, k3, k4)]
    lowest = min(float(v.min()) for v in new)
    if lowest < -NEGATIVITY_TOL:
        raise StepRejected(f"step of {dt!r} h drives a cell to {lowest!r}")
    correction = 0.0
    out = []
    for before, after in zip(y, new):
        rho, m = float(np.sum(before)), float(np.sum(after))
        if rho > 0:
            correction = max(correction, abs(m - rho) / rho)
            after = after * (rho / m)
            after[np.argmax(after)] += rho - float(np.sum(after))
        else:
            after = np.zeros_like(after)
        out.append(after)
    if correction > CORRECTION_WARN:
        warnings.warn(f"mass correction {correction:.3g} exceeds {CORRECTION_WARN:g}", AccuracyWarning, stacklevel=2)
    result = KineticState(state.grids, tuple(out))
    return (result, correction) if return_correction else result


def relax_to_equilibrium(
    state0: KineticState,
    mixture: Mixture,
    law: ProbabilityLaw | None = None,
    tol: float = 1e-12,
    t_max: float = math.inf,
    *,
    P: float | None = None,
    max_steps: int = 200_000,
    polish_after: int | None = 20_000,
    output_times: Sequence[float] | None = None,
) -> RelaxationReport:
    """Integrate ``state0`` until the right-hand side vanishes.

    ``P`` is taken from ``law`` at the occupancy of ``state0`` unless given
    explicitly. Reaching ``t_max`` or the step budget yields an unconverged
    report rather than an exception.
    """
    _check_mixture(state0, mixture)
    if P is None:
        if law is None:
            raise ConstraintViolation("either a law or an explicit P is required")
        P = eval_probability(law, occupied_fraction(mixture.with_densities(state0.densities)))
    op = assemble_operator(state0.grids, mixture.rates)
    res = relax_batch(
        op, state0.flat[None, :], [P], tol=tol, t_max=t_max, max_steps=max_steps,
        polish_after=polish_after, output_times=output_times,
    )
    traj = tuple((t, KineticState.from_flat(state0.grids, v)) for t, v in res.trajectories[0])
    return RelaxationReport(
        final_state=KineticState.from_flat(state0.grids, res.y[0]),
        elapsed_model_time=float(res.time[0]),
        steps=int(res.steps[0]),
        residual=float(res.residual[0]),
        converged=bool(res.converged[0]),
        threshold=float(res.threshold[0]),
        P=float(P),
        polished=bool(res.polished[0]),
        rejections=int(res.rejections[0]),
        max_correction=float(res.max_correction[0]),
        min_value=float(res.min_value[0]),
        max_excess=float(res.max_excess[0]),
        max_mass_error=float(res.max_mass_error[0]),
        trajectory=traj,
    )
