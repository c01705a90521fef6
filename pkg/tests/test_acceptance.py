"""Acceptance suite: one test per criterion at its stated tolerance.

Each test records a PASS/FAIL line that is repeated in the terminal summary.
Run alone with ``pytest tests/test_acceptance.py -v``.
"""

from __future__ import annotations

import time

import numpy as np
import pytest

from kinetraf.config import load_config
from kinetraf.diagrams import capacity_drop, fundamental_diagram, s_grid
from kinetraf.equilibria import closed_form_equilibrium, coarse_values, lowest_node_fraction
from kinetraf.kinetics import (
    KineticState,
    assemble_operator,
    build_interaction_matrices,
    collision_rhs,
    collision_rhs_direct,
)
from kinetraf.model import (
    GammaLaw,
    Mixture,
    PiecewiseLaw,
    VehicleClass,
    build_grids,
    eval_probability,
    piecewise_coefficients,
)
from kinetraf.relaxation import relax_batch, relax_to_equilibrium

CF = VehicleClass("Cf", 0.004, 120.0, 40.0)
S_POINTS = 200


def _random_state(rng, grids, total=1.0):
    rho = rng.random(len(grids))
    rho *= total / rho.sum()
    vals = []
    for g, r in zip(grids, rho):
        v = rng.random(g.n)
        vals.append(v / v.sum() * r)
    return KineticState(tuple(grids), tuple(vals))


@pytest.fixture(scope="module")
def diagrams():
    cache = {}

    def get(preset, law, frozen=False):
        key = (preset, repr(law), frozen)
        if key not in cache:
            cfg = load_config(preset)
            cache[key] = fundamental_diagram(
                cfg.vehicle_classes(), law, S_POINTS, 3, cfg.seed, frozen_shares=frozen
            )
        return cache[key]

    return get


def test_criterion_01_closed_form_matches_relaxation(record):
    cfg = load_config("two-speed")
    fast, slow = cfg.vehicle_classes()
    law = GammaLaw(1.0)
    worst_nodes = worst_off = slowest = 0.0
    for s in (0.2, 0.6):
        rho = cfg.resolve_densities(s=s)
        P = eval_probability(law, s)
        sol = closed_form_equilibrium(rho[0], rho[1], (fast, slow), P)
        for r in (1, 3):
            grids = build_grids((fast, slow), r)
            t0 = time.perf_counter()
            rep = relax_to_equilibrium(KineticState.uniform(grids, rho), Mixture((fast, slow), tuple(rho)), law)
            slowest = max(slowest, time.perf_counter() - t0)
            assert rep.converged
            got = coarse_values(rep.final_state, fast.delta_v)
            worst_nodes = max(worst_nodes, *(float(np.max(np.abs(a - b))) for a, b in zip(got, sol.values)))
            for v in rep.final_state.values:
                off = np.arange(len(v)) % r != 0
                if off.any():
                    worst_off = max(worst_off, float(np.max(np.abs(v[off]))))
    ok = worst_nodes <= 1e-8 and worst_off <= 1e-8 and slowest < 1.0
    record(1, ok, f"node error {worst_nodes:.2e}, off-node {worst_off:.2e} (<= 1e-8), slowest case {slowest:.2f} s (< 1 s)")
    assert ok


def test_criterion_02_quantization_with_per_class_jumps(record):
    cfg = load_config("two-jumps")
    classes = cfg.vehicle_classes()
    law = cfg.probability_law()
    worst = 0.0
    for s in (0.2, 0.6, 0.9):
        rho = cfg.resolve_densities(s=s)
        for r in (1, 2):
            grids = build_grids(classes, r)
            assert grids[0].delta_v_cells == 2 * grids[1].delta_v_cells
            rep = relax_to_equilibrium(KineticState.uniform(grids, rho), Mixture(classes, tuple(rho)), law)
            assert rep.converged
            for g, v in zip(grids, rep.final_state.values):
                off = np.abs(np.remainder(g.nodes + 5.0, 10.0) - 5.0) > 1e-9
                if off.any():
                    worst = max(worst, float(np.max(np.abs(v[off]))))
    ok = worst <= 1e-8
    record(2, ok, f"largest value off multiples of 10 km/h {worst:.2e} (<= 1e-8)")
    assert ok


def test_criterion_03_bifurcation_values(record):
    rho = 0.5 / CF.length
    err_formula = err_relax = 0.0
    for P in (0.5, 0.7, 1.0, 0.1, 0.3, 0.49):
        expected = 0.0 if P >= 0.5 else 2 * (2 * P - 1) / (3 * P - 2)
        closed = closed_form_equilibrium(rho, 0.0, (CF,), P).values[0][0] / rho
        err_formula = max(err_formula, abs(closed - expected), abs(lowest_node_fraction(P) - expected))
        grids = build_grids((CF,), 1)
        rep = relax_to_equilibrium(KineticState.uniform(grids, [rho]), Mixture((CF,), (rho,)), P=P)
        assert rep.converged, f"P = {P}"
        err_relax = max(err_relax, abs(rep.final_state.values[0][0] / rho - expected))
    ok = err_formula <= 1e-12 and err_relax <= 1e-8
    record(3, ok, f"closed form {err_formula:.2e} (<= 1e-12), relaxation {err_relax:.2e} (<= 1e-8)")
    assert ok


def test_criterion_04_critical_occupancy(record, diagrams):
    step = 1.0 / S_POINTS
    parts = []
    ok = True
    for gamma, target in ((1.0, 0.5), (0.5, 0.25)):
        points = diagrams("cf-cs-t", GammaLaw(gamma), frozen=True)
        peaks = []
        for k in range(3):
            sweep = points[k::3]
            peaks.append(sweep[int(np.argmax([p.Q for p in sweep]))].s)
        ok &= all(abs(s - target) <= step + 1e-12 for s in peaks)
        parts.append(f"gamma={gamma:g}: peaks {', '.join(f'{s:.4f}' for s in peaks)} vs {target}")
    record(4, ok, "; ".join(parts) + f" (within {step:g})")
    assert ok


def test_criterion_05_free_phase_cone(record, diagrams):
    law = GammaLaw(1.0)
    points = diagrams("cf-cs-t", law)
    free = [p for p in points if p.s <= law.s_cr]
    lo = min((p.Q - 80.0 * p.N_v) / (80.0 * p.N_v) for p in free)
    hi = min((120.0 * p.N_v - p.Q) / (120.0 * p.N_v) for p in free)
    ok = lo >= -1e-9 and hi >= -1e-9 and all(p.converged for p in points)
    record(5, ok, f"{len(free)} free-phase points, relative margins {lo:.2e} (80 km/h) and {hi:.2e} (120 km/h), tolerance 1e-9")
    assert ok


def test_criterion_06_capacity_drop_reduction(record, diagrams):
    piecewise = PiecewiseLaw(0.5, -0.125)
    gamma = GammaLaw(1.0)
    d_pw = capacity_drop(diagrams("cf-v-t", piecewise), piecewise)
    d_g = capacity_drop(diagrams("cf-v-t", gamma), gamma)
    ok = d_pw < d_g
    record(6, ok, f"piecewise {d_pw:.1f} veh/h < gamma=1 {d_g:.1f} veh/h")
    assert ok


def test_criterion_07_indifferentiability_trajectory(record):
    rng = np.random.default_rng(7)
    twins = (VehicleClass("a", CF.length, CF.v_max, CF.delta_v), VehicleClass("b", CF.length, CF.v_max, CF.delta_v))
    law = GammaLaw(1.0)
    worst = 0.0
    for r in (1, 2):
        g2 = build_grids(twins, r)
        g1 = build_grids((CF,), r)
        for _ in range(5):
            st = _random_state(rng, g2, total=float(rng.uniform(10.0, 240.0)))
            rho = st.densities
            single = KineticState(g1, (st.values[0] + st.values[1],))
            times = list(np.linspace(0.0, 0.2, 21))
            kw = dict(tol=1e-300, t_max=0.2, polish_after=None, output_times=times)
            a = relax_to_equilibrium(st, Mixture(twins, rho), law, **kw)
            b = relax_to_equilibrium(single, Mixture((CF,), (sum(rho),)), law, **kw)
            assert len(a.trajectory) == len(b.trajectory) >= len(times)
            for (ta, sa), (tb, sb) in zip(a.trajectory, b.trajectory):
                assert ta == pytest.approx(tb, rel=1e-12)
                worst = max(worst, float(np.max(np.abs(sa.values[0] + sa.values[1] - sb.values[0]))))
    ok = worst <= 1e-10
    record(7, ok, f"largest trajectory deviation {worst:.2e} (<= 1e-10)")
    assert ok


def test_criterion_08_well_posedness_invariants(record):
    rng = np.random.default_rng(8)
    runs = 0
    min_val = np.inf
    excess = mass = -np.inf
    for preset, count in (("cf-cs-t", 400), ("two-jumps", 300), ("two-speed", 300)):
        cfg = load_config(preset)
        classes = cfg.vehicle_classes()
        for r in (1, 2):
            grids = build_grids(classes, r)
            op = assemble_operator(grids, np.ones((len(classes),) * 2))
            n = count // 2
            ys = []
            for _ in range(n):
                s = rng.uniform(0.01, 1.0)
                share = rng.dirichlet(np.ones(len(classes)))
                rho = [w * s / c.length for w, c in zip(share, classes)]
                ys.append(np.concatenate([rng.dirichlet(np.ones(g.n)) * m for g, m in zip(grids, rho)]))
            res = relax_batch(op, np.array(ys), rng.random(n), max_steps=3000, polish_after=None)
            rho_all = op.masses(np.array(ys))
            runs += n
            min_val = min(min_val, float(res.min_value.min()))
            excess = max(excess, float(res.max_excess.max()))
            mass = max(mass, float(np.max(res.max_mass_error / rho_all.max(axis=1))))
    eps = np.finfo(float).eps
    ok = runs >= 1000 and min_val >= -1e-12 and excess <= 1e-10 and mass <= 8 * eps
    record(8, ok, f"{runs} runs: min f {min_val:.2e} (>= -1e-12), max f - rho {excess:.2e} (<= 1e-10), relative mass error {mass:.2e} (<= 8 ulp)")
    assert ok


def test_criterion_09_matrix_oracle_equivalence(record):
    rng = np.random.default_rng(9)
    worst = stoch = 0.0
    states = 0
    m_seen = set()
    for preset in ("cf-cs-t", "two-jumps"):
        classes = load_config(preset).vehicle_classes()
        mix = Mixture(classes, (0.0,) * len(classes))
        for r in (1, 2):
            grids = build_grids(classes, r)
            m_seen |= {gp.delta_v_cells // gq.delta_v_cells for gp in grids for gq in grids if gp.delta_v_cells >= gq.delta_v_cells}
            for _ in range(25):
                P = float(rng.random())
                st = _random_state(rng, grids)
                mats = build_interaction_matrices(grids, P)
                a = collision_rhs(st, mats, mix)
                b = collision_rhs_direct(st, P, mix)
                worst = max(worst, *(float(np.max(np.abs(x - y))) for x, y in zip(a, b)))
                states += 1
                for fam in mats.families.values():
                    stoch = max(stoch, float(np.max(np.abs(fam.dense().sum(axis=0) - 1.0))))
    ok = worst <= 1e-13 and stoch <= 1e-14 and states >= 100 and {1, 2} <= m_seen
    record(9, ok, f"{states} states, jump ratios {sorted(m_seen)}: rhs deviation {worst:.2e} (<= 1e-13), column sums {stoch:.2e} (<= 1e-14)")
    assert ok


def test_criterion_10_rate_invariance(record):
    worst = 0.0
    ratios = []
    cases = []
    for preset in ("cf-cs-t", "two-speed"):
        cfg = load_config(preset)
        classes = cfg.vehicle_classes()
        for s in (0.3, 0.6, 0.8):
            cases.append((classes, cfg.resolve_densities(s=s), cfg.probability_law(), np.ones((len(classes),) * 2)))
    classes = load_config("cf-cs-t").vehicle_classes()
    cases.append((classes, load_config("cf-cs-t").resolve_densities(s=0.6), GammaLaw(1.0), np.array([[1.0, 0.5, 2.0], [0.7, 1.0, 1.3], [1.5, 0.8, 1.0]])))
    for classes, rho, law, rates in cases:
        grids = build_grids(classes, 1)
        st = KineticState.uniform(grids, rho)
        base = relax_to_equilibrium(st, Mixture(classes, tuple(rho), rates), law)
        fast = relax_to_equilibrium(st, Mixture(classes, tuple(rho), 10.0 * rates), law)
        assert base.converged and fast.converged
        worst = max(worst, float(np.max(np.abs(base.final_state.flat - fast.final_state.flat))))
        ratios.append(base.elapsed_model_time / fast.elapsed_model_time)
    ok = worst <= 1e-10 and all(abs(q - 10.0) <= 0.5 for q in ratios)
    record(10, ok, f"state change {worst:.2e} (<= 1e-10), time ratios {min(ratios):.3f}..{max(ratios):.3f} (10 +- 5%)")
    assert ok


def test_criterion_11_piecewise_coefficients(record):
    s, mu = 0.5, -0.125
    # continuity, slope and P(1) = 0 as a linear system in (a, b, c)
    A = np.array([[s * s, s, 1.0], [2 * s, 1.0, 0.0], [1.0, 1.0, 1.0]])
    solved = np.linalg.solve(A, np.array([1.0 - s / (2 * s), mu, 0.0]))
    got = np.array(piecewise_coefficients(s, mu))
    expected = np.array([-7 / 4, 13 / 8, 1 / 8])
    err = max(float(np.max(np.abs(got - solved))), float(np.max(np.abs(got - expected))))
    ok = err <= 1e-14
    record(11, ok, f"(a, b, c) = ({got[0]:g}, {got[1]:g}, {got[2]:g}), deviation {err:.2e} (<= 1e-14)")
    assert ok


def test_s_grid_used_by_diagrams_has_expected_step():
    assert np.allclose(np.diff(s_grid(S_POINTS)), 1.0 / S_POINTS)
