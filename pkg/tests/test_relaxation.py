from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kinetraf.kinetics import KineticState, assemble_operator, build_interaction_matrices
from kinetraf.model import ConstraintViolation, GammaLaw, Mixture, VehicleClass, build_grids
from kinetraf.relaxation import (
    RelaxationReport,
    StepRejected,
    initial_dt,
    integrate_step,
    relax_batch,
    relax_to_equilibrium,
)

CF = VehicleClass("Cf", 0.004, 120.0, 40.0)
TR = VehicleClass("T", 0.012, 80.0, 40.0)


def test_initial_dt():
    assert initial_dt(np.array([50.0, 25.0]), np.ones((2, 2))) == pytest.approx(0.1 / 75.0)
    assert initial_dt(np.zeros(2), np.ones((2, 2))) == math.inf


def test_zero_step_is_identity():
    grids = build_grids((CF,), 1)
    st0 = KineticState.uniform(grids, [40.0])
    mats = build_interaction_matrices(grids, 0.5)
    st1 = integrate_step(st0, mats, Mixture((CF,), (40.0,)), 0.0)
    assert np.array_equal(st0.flat, st1.flat)


def test_oversized_step_is_rejected():
    grids = build_grids((CF,), 1)
    st0 = KineticState(grids, (np.array([1e-6, 1e-6, 1e-6, 200.0]),))
    mats = build_interaction_matrices(grids, 1.0)
    with pytest.raises(StepRejected):
        integrate_step(st0, mats, Mixture((CF,), (st0.densities[0],)), 10.0)


@given(st.integers(0, 2**32 - 1), st.floats(0.0, 1.0))
@settings(max_examples=25, deadline=None)
def test_steps_preserve_mass_and_positivity(seed, P):
    rng = np.random.default_rng(seed)
    grids = build_grids((CF, TR), 2)
    rho = rng.uniform(1.0, 40.0, size=2)
    st0 = KineticState(grids, tuple(rng.dirichlet(np.ones(g.n)) * r for g, r in zip(grids, rho)))
    mix = Mixture((CF, TR), tuple(rho))
    mats = build_interaction_matrices(grids, P)
    dt = initial_dt(rho, mix.rates)
    state = st0
    for _ in range(20):
        state = integrate_step(state, mats, mix, dt)
        assert min(v.min() for v in state.values) >= -1e-12
        for v, r in zip(state.values, rho):
            assert abs(v.sum() - r) <= 4 * np.finfo(float).eps * r
            assert v.max() <= r + 1e-10


def test_converged_report_meets_threshold():
    grids = build_grids((CF, TR), 1)
    rep = relax_to_equilibrium(KineticState.uniform(grids, [50.0, 20.0]), Mixture((CF, TR), (50.0, 20.0)), GammaLaw(1.0))
    assert rep.converged
    assert rep.residual <= rep.threshold
    assert rep.P == pytest.approx(1 - (50 * 0.004 + 20 * 0.012))


def test_horizon_gives_unconverged_report():
    grids = build_grids((CF,), 1)
    rep = relax_to_equilibrium(KineticState.uniform(grids, [100.0]), Mixture((CF,), (100.0,)), GammaLaw(1.0), t_max=1e-3)
    assert not rep.converged
    assert rep.elapsed_model_time == pytest.approx(1e-3)


def test_report_rejects_inconsistent_flags():
    grids = build_grids((CF,), 1)
    with pytest.raises(ValueError):
        RelaxationReport(KineticState.uniform(grids, [1.0]), 0.0, 0, 1.0, True, 1e-12, 0.5)


def test_requires_law_or_probability():
    grids = build_grids((CF,), 1)
    with pytest.raises(ConstraintViolation):
        relax_to_equilibrium(KineticState.uniform(grids, [1.0]), Mixture((CF,), (1.0,)))


def test_batch_rows_do_not_depend_on_batch_composition():
    rng = np.random.default_rng(11)
    grids = build_grids((CF, TR), 1)
    op = assemble_operator(grids, np.ones((2, 2)))
    ys = np.array([np.concatenate([rng.dirichlet(np.ones(g.n)) * r for g, r in zip(grids, rng.uniform(5, 60, 2))]) for _ in range(6)])
    P = rng.random(6)
    together = relax_batch(op, ys, P)
    for i in range(6):
        alone = relax_batch(op, ys[i : i + 1], P[i : i + 1])
        assert np.array_equal(alone.y[0], together.y[i])
        assert alone.time[0] == together.time[i]


def test_degenerate_probability_still_converges():
    rho = 125.0
    grids = build_grids((CF,), 1)
    rep = relax_to_equilibrium(KineticState.uniform(grids, [rho]), Mixture((CF,), (rho,)), P=0.5)
    assert rep.converged and rep.polished
    assert rep.final_state.values[0][0] / rho <= 1e-8
