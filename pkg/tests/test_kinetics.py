from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kinetraf.kinetics import (
    DimensionMismatch,
    KineticState,
    assemble_operator,
    build_cross_matrices,
    build_interaction_matrices,
    build_self_matrices,
    collision_rhs,
    collision_rhs_direct,
)
from kinetraf.model import AssumptionViolation, Mixture, VehicleClass, build_grid, build_grids

CF = VehicleClass("Cf", 0.004, 120.0, 40.0)
CS = VehicleClass("Cs", 0.004, 80.0, 40.0)
TR = VehicleClass("T", 0.012, 80.0, 40.0)
FAST = VehicleClass("fast", 0.004, 100.0, 20.0)
SLOW = VehicleClass("slow", 0.012, 50.0, 10.0)


def random_state(rng, grids, total=1.0):
    rho = rng.random(len(grids))
    rho *= total / rho.sum()
    return KineticState(tuple(grids), tuple(rng.dirichlet(np.ones(g.n)) * r for g, r in zip(grids, rho)))


class TestMatrices:
    def test_single_class_r1_known_entries(self):
        # two cells per class: candidate at 0 meets field at 0 or at top speed
        g = build_grid(VehicleClass("x", 0.004, 40.0, 40.0), 1)
        fam = build_self_matrices(g, 0.5)
        A1, A2 = fam[0], fam[1]
        # field at top: slower candidate accelerates with probability P
        assert A1[0, 1] == pytest.approx(0.5)
        assert A2[0, 1] == pytest.approx(0.5)
        # field below: faster candidate brakes with probability 1 - P
        assert A1[1, 0] == pytest.approx(0.5)
        # equal cells: half the time the candidate is the slower one
        assert A1[0, 0] == pytest.approx(0.75)
        assert A2[0, 0] == pytest.approx(0.25)
        # at top speed both accelerating and braking leave the candidate in place
        assert A2[1, 1] == 1.0

    @pytest.mark.parametrize("P", [0.0, 0.3, 0.5, 1.0])
    @pytest.mark.parametrize("r", [1, 2, 3])
    def test_families_are_stochastic(self, P, r):
        for classes in ((CF, CS, TR), (FAST, SLOW)):
            mats = build_interaction_matrices(build_grids(classes, r), P)
            for fam in mats.families.values():
                stack = fam.dense()
                assert np.all(stack >= 0)
                assert np.max(np.abs(stack.sum(axis=0) - 1.0)) <= 1e-14

    def test_mismatched_spacing_is_rejected(self):
        with pytest.raises(AssumptionViolation):
            build_cross_matrices(build_grid(CF, 1), build_grid(CS, 2), 0.5)

    def test_index_out_of_range(self):
        fam = build_self_matrices(build_grid(CF, 1), 0.5)
        with pytest.raises(IndexError):
            fam[len(fam)]


class TestCollisionOperator:
    @given(st.integers(0, 2**32 - 1), st.sampled_from([1, 2]), st.floats(0.0, 1.0))
    @settings(max_examples=40, deadline=None)
    def test_matches_direct_formulas(self, seed, r, P):
        rng = np.random.default_rng(seed)
        for classes in ((CF, CS, TR), (FAST, SLOW)):
            grids = build_grids(classes, r)
            state = random_state(rng, grids)
            mix = Mixture(classes, (0.0,) * len(classes))
            a = collision_rhs(state, build_interaction_matrices(grids, P), mix)
            b = collision_rhs_direct(state, P, mix)
            for x, y in zip(a, b):
                assert np.max(np.abs(x - y)) <= 1e-13

    @given(st.integers(0, 2**32 - 1), st.floats(0.0, 1.0), st.floats(1.0, 250.0))
    @settings(max_examples=40, deadline=None)
    def test_conserves_class_mass(self, seed, P, total):
        rng = np.random.default_rng(seed)
        grids = build_grids((CF, CS, TR), 2)
        state = random_state(rng, grids, total)
        rates = rng.uniform(0.1, 5.0, size=(3, 3))
        rhs = collision_rhs(state, build_interaction_matrices(grids, P), Mixture((CF, CS, TR), (0.0,) * 3, rates))
        scale = sum(float(np.abs(v).sum()) for v in rhs) + 1e-300
        for v in rhs:
            assert abs(v.sum()) <= 1e-13 * scale

    def test_assembled_operator_agrees_with_matrix_form(self):
        rng = np.random.default_rng(3)
        grids = build_grids((FAST, SLOW), 2)
        rates = np.array([[1.0, 2.0], [0.5, 1.5]])
        op = assemble_operator(grids, rates)
        for P in (0.1, 0.5, 0.9):
            state = random_state(rng, grids, 50.0)
            ref = collision_rhs(state, build_interaction_matrices(grids, P), Mixture((FAST, SLOW), (0.0, 0.0), rates))
            assert np.allclose(op.rhs(state.flat, op.weights(P)), np.concatenate(ref), atol=1e-12, rtol=0)

    def test_jacobian_matches_finite_differences(self):
        rng = np.random.default_rng(4)
        grids = build_grids((CF, TR), 1)
        op = assemble_operator(grids, np.ones((2, 2)))
        y = random_state(rng, grids, 10.0).flat
        w = op.weights(0.4)
        J = op.jacobian(y, w)
        h = 1e-6
        for i in range(op.size):
            e = np.zeros(op.size)
            e[i] = h
            fd = (op.rhs(y + e, w) - op.rhs(y - e, w)) / (2 * h)
            assert np.allclose(J[:, i], fd, atol=1e-6)

    def test_shape_errors(self):
        grids = build_grids((CF,), 1)
        with pytest.raises(DimensionMismatch):
            KineticState(grids, (np.ones(3),))
        state = KineticState.uniform(grids, [1.0])
        with pytest.raises(DimensionMismatch):
            collision_rhs(state, build_interaction_matrices(grids, 0.5), Mixture((CF, TR), (1.0, 1.0)))
