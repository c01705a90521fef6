"""Self-checks run by ``kinetraf validate``.

Each check returns the largest deviation it measured and the tolerance it
was held to.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .config import RunConfig
from .diagrams import critical_s
from .equilibria import closed_form_equilibrium, coarse_values, is_quantized, lowest_node_fraction
from .kinetics import (
    KineticState,
    build_interaction_matrices,
    collision_rhs,
    collision_rhs_direct,
)
from .model import Mixture, VehicleClass, build_grids, eval_probability
from .relaxation import relax_to_equilibrium

__all__ = ["CheckResult", "run_checks", "CHECKS"]


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    measured: float
    tolerance: float
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f" ({self.detail})" if self.detail else ""
        return f"{status} {self.name}: measured {self.measured:.3e}, tolerance {self.tolerance:.0e}{extra}"


def _random_state(rng: np.random.Generator, grids, total: float = 1.0) -> KineticState:
    rho = rng.random(len(grids))
    rho *= total / rho.sum()
    vals = []
    for g, r in zip(grids, rho):
        v = rng.random(g.n)
        vals.append(v / v.sum() * r)
    return KineticState(tuple(grids), tuple(vals))


def check_stochasticity(cfg: RunConfig) -> CheckResult:
    grids = build_grids(cfg.vehicle_classes(), cfg.grid_r)
    worst = 0.0
    corrupt = bool(cfg.hook("corrupt_matrix", False))
    for P in (0.0, 0.25, 0.5, 0.75, 1.0):
        mats = build_interaction_matrices(grids, P)
        for key, fam in sorted(mats.families.items()):
            stack = fam.dense()
            if corrupt and key == (0, 0) and P == 0.5:
                stack[0, 0, 0] += 1e-3
            worst = max(worst, float(np.max(np.abs(stack.sum(axis=0) - 1.0))))
    return CheckResult("matrix stochasticity", worst <= 1e-14, worst, 1e-14)


def check_oracle(cfg: RunConfig, samples: int = 20) -> CheckResult:
    rng = np.random.default_rng(cfg.seed)
    classes = cfg.vehicle_classes()
    mix = Mixture(classes, (0.0,) * len(classes), cfg.rate_matrix())
    worst = 0.0
    for r in sorted({1, cfg.grid_r}):
        grids = build_grids(classes, r)
        for _ in range(samples):
            P = float(rng.random())
            st = _random_state(rng, grids)
            a = collision_rhs(st, build_interaction_matrices(grids, P), mix)
            b = collision_rhs_direct(st, P, mix)
            worst = max(worst, max(float(np.max(np.abs(x - y))) for x, y in zip(a, b)))
    return CheckResult("oracle equivalence", worst <= 1e-13, worst, 1e-13, "normalised densities")


def check_conservation(cfg: RunConfig, samples: int = 20) -> CheckResult:
    rng = np.random.default_rng(cfg.seed + 1)
    classes = cfg.vehicle_classes()
    grids = build_grids(classes, cfg.grid_r)
    mix = Mixture(classes, (0.0,) * len(classes), cfg.rate_matrix())
    worst = 0.0
    for _ in range(samples):
        P = float(rng.random())
        st = _random_state(rng, grids, total=100.0)
        rhs = collision_rhs(st, build_interaction_matrices(grids, P), mix)
        scale = max(float(np.sum(np.abs(np.concatenate(rhs)))), 1e-300)
        worst = max(worst, max(abs(float(np.sum(x))) for x in rhs) / scale)
    return CheckResult("mass conservation", worst <= 1e-12, worst, 1e-12, "relative")


def check_indifferentiability(cfg: RunConfig, samples: int = 20) -> CheckResult:
    rng = np.random.default_rng(cfg.seed + 2)
    base = cfg.vehicle_classes()[0]
    twins = (VehicleClass("a", base.length, base.v_max, base.delta_v), VehicleClass("b", base.length, base.v_max, base.delta_v))
    single = (VehicleClass("ab", base.length, base.v_max, base.delta_v),)
    g2 = build_grids(twins, cfg.grid_r)
    g1 = build_grids(single, cfg.grid_r)
    m2 = Mixture(twins, (0.0, 0.0))
    m1 = Mixture(single, (0.0,))
    worst = 0.0
    for _ in range(samples):
        P = float(rng.random())
        st = _random_state(rng, g2)
        summed = np.sum(collision_rhs(st, build_interaction_matrices(g2, P), m2), axis=0)
        tot = KineticState(g1, (st.values[0] + st.values[1],))
        ref = collision_rhs(tot, build_interaction_matrices(g1, P), m1)[0]
        worst = max(worst, float(np.max(np.abs(summed - ref))))
    return CheckResult("indifferentiability", worst <= 1e-13, worst, 1e-13, "normalised densities")


def _closed_form_pair(cfg: RunConfig) -> tuple[VehicleClass, VehicleClass] | None:
    classes = sorted(cfg.vehicle_classes(), key=lambda c: -c.v_max)
    for i, c1 in enumerate(classes):
        for c2 in classes[i + 1 :]:
            if c1.delta_v == c2.delta_v and c1.v_max > c2.v_max:
                return c1, c2
    for i, c1 in enumerate(classes):
        for c2 in classes[i + 1 :]:
            if c1.delta_v == c2.delta_v:
                return c1, c2
    return None


def check_grid_independence(cfg: RunConfig) -> CheckResult:
    pair = _closed_form_pair(cfg)
    if pair is None:
        one = cfg.vehicle_classes()[0]
        pair = (one,)
    law = cfg.probability_law()
    s = 0.6
    rho = [s / len(pair) / c.length for c in pair]
    P = eval_probability(law, s)
    sol = closed_form_equilibrium(rho[0], rho[1] if len(pair) > 1 else 0.0, pair, P)
    worst = 0.0
    quantized = True
    for r in (1, 2, 3):
        grids = build_grids(pair, r)
        mix = Mixture(pair, tuple(rho))
        rep = relax_to_equilibrium(KineticState.uniform(grids, rho), mix, P=P, tol=cfg.tolerance)
        got = coarse_values(rep.final_state, pair[0].delta_v)
        worst = max(worst, max(float(np.max(np.abs(a - b))) for a, b in zip(got, sol.values)))
        quantized &= is_quantized(rep.final_state, r, 1e-8)
    ok = worst <= 1e-8 and quantized
    return CheckResult("grid independence", ok, worst, 1e-8, f"classes {', '.join(c.id for c in pair)}, s = {s}, r = 1..3")


def check_bifurcation(cfg: RunConfig) -> CheckResult:
    c = cfg.vehicle_classes()[0]
    worst = 0.0
    for P in (0.5, 0.7, 1.0, 0.1, 0.3, 0.49):
        rho = 0.5 / c.length
        sol = closed_form_equilibrium(rho, 0.0, (c,), P)
        expected = 0.0 if P >= 0.5 else 2 * (2 * P - 1) / (3 * P - 2) * rho
        worst = max(worst, abs(sol.values[0][0] - expected) / rho, abs(lowest_node_fraction(P) * rho - expected) / rho)
    s_cr = critical_s(cfg.probability_law())
    return CheckResult("bifurcation", worst <= 1e-12, worst, 1e-12, f"critical s = {s_cr:.6g}")


CHECKS: tuple[Callable[[RunConfig], CheckResult], ...] = (
    check_stochasticity,
    check_oracle,
    check_conservation,
    check_indifferentiability,
    check_grid_independence,
    check_bifurcation,
)


def run_checks(cfg: RunConfig) -> list[CheckResult]:
    return [check(cfg) for check in CHECKS]
