from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kinetraf.model import (
    AssumptionViolation,
    ConstraintViolation,
    CustomLaw,
    GammaLaw,
    Mixture,
    PiecewiseLaw,
    VehicleClass,
    build_grid,
    build_grids,
    eval_probability,
    occupied_fraction,
    piecewise_coefficients,
)

CF = VehicleClass("Cf", 0.004, 120.0, 40.0)
T = VehicleClass("T", 0.012, 80.0, 40.0)


class TestVehicleClass:
    def test_derived_quantities(self):
        assert CF.T == 3
        assert CF.rho_max == pytest.approx(250.0)

    def test_non_integer_speed_ratio_is_rejected(self):
        with pytest.raises(AssumptionViolation, match="v_max/delta_v"):
            VehicleClass("x", 0.004, 100.0, 30.0).T

    @pytest.mark.parametrize("field", ["length", "v_max", "delta_v"])
    def test_non_positive_parameters_are_rejected(self, field):
        kwargs = dict(id="x", length=0.004, v_max=120.0, delta_v=40.0)
        kwargs[field] = 0.0
        with pytest.raises(ConstraintViolation):
            VehicleClass(**kwargs)


class TestMixture:
    def test_default_rates_are_ones(self):
        m = Mixture((CF, T), (10.0, 5.0))
        assert np.array_equal(m.rates, np.ones((2, 2)))

    def test_occupied_fraction(self):
        m = Mixture((CF, T), (50.0, 25.0))
        assert occupied_fraction(m) == pytest.approx(0.5)

    def test_over_occupied_road_is_rejected(self):
        with pytest.raises(ConstraintViolation, match="exceeds 1"):
            occupied_fraction(Mixture((CF,), (300.0,)))

    def test_negative_density_is_rejected(self):
        with pytest.raises(ConstraintViolation):
            Mixture((CF,), (-1.0,))

    def test_duplicate_ids_are_rejected(self):
        with pytest.raises(ConstraintViolation, match="unique"):
            Mixture((CF, CF), (1.0, 1.0))

    def test_rate_overrides(self):
        m = Mixture.from_rate_overrides((CF, T), (1.0, 1.0), 2.0, {"T": 3.0}, {("Cf", "T"): 0.5})
        assert m.rates.tolist() == [[2.0, 0.5], [2.0, 3.0]]


class TestProbabilityLaws:
    def test_gamma_law_critical_occupancy(self):
        assert GammaLaw(1.0).s_cr == pytest.approx(0.5)
        assert GammaLaw(0.5).s_cr == pytest.approx(0.25)

    def test_gamma_out_of_range(self):
        with pytest.raises(ConstraintViolation):
            GammaLaw(1.5)

    def test_piecewise_is_continuous_with_prescribed_slope(self):
        law = PiecewiseLaw(0.5, -0.125)
        h = 1e-7
        assert law(0.5) == pytest.approx(0.5)
        assert (law(0.5 + h) - law(0.5)) / h == pytest.approx(-0.125, rel=1e-5)
        assert law(1.0) == pytest.approx(0.0, abs=1e-15)

    @pytest.mark.parametrize("mu,match", [(0.1, "negative"), (-2.0, "exceed")])
    def test_piecewise_rejects_bad_slopes(self, mu, match):
        with pytest.raises(ConstraintViolation, match=match):
            piecewise_coefficients(0.5, mu)

    def test_custom_law_must_be_monotone(self):
        with pytest.raises(ConstraintViolation, match="non-increasing"):
            CustomLaw(lambda s: np.asarray(s) * 0.5, critical=0.5, name="rising")

    def test_eval_probability_checks_range(self):
        with pytest.raises(ConstraintViolation):
            eval_probability(GammaLaw(1.0), 1.5)

    @given(st.floats(0.05, 0.95), st.floats(0.05, 0.95), st.floats(0.0, 1.0))
    @settings(max_examples=60, deadline=None)
    def test_accepted_piecewise_laws_are_valid(self, s_cr, frac, s):
        gamma = np.log(0.5) / np.log(s_cr)
        bound = -gamma * s_cr ** (gamma - 1.0)
        try:
            law = PiecewiseLaw(s_cr, frac * bound)
        except ConstraintViolation:
            return
        h = 1e-3
        p = eval_probability(law, s)
        assert 0.0 <= p <= 1.0
        assert eval_probability(law, min(s + h, 1.0)) <= p + 1e-12


class TestGrids:
    def test_cell_layout(self):
        g = build_grid(CF, 2)
        assert g.n == 7
        assert g.dv == 20.0
        assert g.widths.sum() == pytest.approx(CF.v_max)
        assert g.midpoints[0] == pytest.approx(5.0)
        assert g.midpoints[-1] == pytest.approx(115.0)

    def test_half_cell_bounds(self):
        g = build_grid(CF, 1)
        assert g.half_cell_bounds(1) == (0, 1)
        assert g.half_cell_bounds(2) == (1, 3)
        assert g.half_cell_bounds(g.n) == (2 * g.n - 3, 2 * (g.n - 1))

    def test_common_spacing_with_different_jumps(self):
        a = VehicleClass("a", 0.004, 100.0, 20.0)
        b = VehicleClass("b", 0.012, 50.0, 10.0)
        ga, gb = build_grids((a, b), 2)
        assert ga.dv == gb.dv == 5.0
        assert ga.r == 4 and gb.r == 2

    def test_invalid_refinement(self):
        with pytest.raises(AssumptionViolation):
            build_grid(CF, 0)
