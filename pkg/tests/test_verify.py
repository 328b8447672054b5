import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from blowup.model import make_fk, make_model
from blowup.oracles import bm_interval_survival, catalog_entry
from blowup.paths import SimConfig
from blowup.pde import PDEGrid, solve_cauchy
from blowup.verify import (ContinuityBoundParams, JetMismatchError, continuity_bound,
                           continuity_check, ito_residual, make_jet, viscosity_residual)

BM = catalog_entry("bm_unit_interval")
BM_KILLED = catalog_entry("bm_unit_interval_killed")


# ---- test-function jets --------------------------------------------------

def test_jet_self_check_accepts_correct_derivatives():
    jet = make_jet("exp(-t)*sin(x1)*x2^2", "-exp(-t)*sin(x1)*x2^2",
                   ["exp(-t)*cos(x1)*x2^2", "2*exp(-t)*sin(x1)*x2"],
                   [["-exp(-t)*sin(x1)*x2^2", "2*exp(-t)*cos(x1)*x2"],
                    ["2*exp(-t)*cos(x1)*x2", "2*exp(-t)*sin(x1)"]], n=2)
    assert jet.n == 2


def test_jet_self_check_rejects_wrong_derivative():
    with pytest.raises(JetMismatchError):
        make_jet("x^3", "0", "3*x^2", "3*x")


def test_generator_of_quadratic():
    jet = make_jet("x^2", "0", "2*x", "2")
    model = make_model("x", "2")
    # phi_t - (a/2 phi'' + b phi' - h phi) = -(4 + 2 x^2 - h x^2)
    g = jet.generator(model, make_fk("1", "1"), 0.0, np.array([[3.0]]))
    assert g[0] == pytest.approx(-(4 + 18 - 9))


# ---- Ito residual --------------------------------------------------------

def test_constant_jet_residual_exactly_zero():
    jet = make_jet("1", "0", "0", "0")
    r = ito_residual(BM.model, BM.fk, jet, 0.2, [0.5], 2000, SimConfig(1e-3, 0.2, rng_seed=1),
                     delta=0.1)
    assert r.max_abs == 0.0 and r.mean == 0.0


def test_deterministic_path_residual_order_dt():
    model = make_model("1", "0", 0.0, 1.0)
    jet = make_jet("x^2", "0", "2*x", "2")
    out = []
    for dt in (1e-3, 5e-4):
        r = ito_residual(model, make_fk(), jet, 0.2, [0.5], 4, SimConfig(dt, 0.2), delta=0.1)
        assert r.sd == 0.0
        out.append(abs(r.mean))
    assert out[0] <= 10 * 1e-3 * 2.0
    assert out[0] / out[1] == pytest.approx(2.0, rel=1e-6)


def test_bm_quadratic_martingale_part_centred():
    jet = make_jet("x^2", "0", "2*x", "2")
    r = ito_residual(BM.model, BM.fk, jet, 0.2, [0.5], 20000, SimConfig(1e-3, 0.2, rng_seed=2),
                     delta=0.1)
    assert abs(r.martingale_mean) <= 3 * r.martingale_std_error


def test_centred_quartic_residual_is_first_order():
    """E[D] = 3 dt E[nu] for phi = (x - 1/2)^4: resolved and halving with dt."""
    jet = make_jet("(x-0.5)^4", "0", "4*(x-0.5)^3", "12*(x-0.5)^2")
    res = [ito_residual(BM.model, BM.fk, jet, 0.2, [0.5], 10000,
                        SimConfig(dt, 0.2, rng_seed=3), delta=0.1) for dt in (1e-3, 5e-4)]
    for r in res:
        assert r.mean > 3 * r.std_error
        assert r.mean == pytest.approx(3 * r.dt * r.mean_nu, rel=0.15)
    assert 1.5 <= res[0].mean / res[1].mean <= 2.5


def test_killed_residual_martingale_centred():
    jet = make_jet("x*(1-x)", "0", "1-2*x", "-2")
    r = ito_residual(BM_KILLED.model, BM_KILLED.fk, jet, 0.2, [0.5], 10000,
                     SimConfig(1e-3, 0.2, rng_seed=4), delta=0.1)
    assert abs(r.martingale_mean) <= 3 * r.martingale_std_error


# ---- viscosity residual --------------------------------------------------

def test_bm_solver_residual_decreases():
    sol = solve_cauchy(BM.model, BM.fk, None, PDEGrid(0.05, 0.005, 0.2))
    tab = viscosity_residual(sol, BM.model, BM.fk, 3, (0.05, 0.2))
    assert tab.median_decreasing


def test_exact_series_residual_second_order():
    sol = solve_cauchy(BM.model, BM.fk, None, PDEGrid(0.05, 0.005, 0.2))
    tab = viscosity_residual(sol, BM.model, BM.fk, 3, (0.05, 0.2),
                             field=lambda t, x: bm_interval_survival(max(t, 1e-3), x))
    assert all(3.0 <= r <= 5.0 for r in tab.median_ratios)


def test_constant_solution_zero_residual():
    model = make_model("x", "1 + x^2/4", unit=2.0)
    sol = solve_cauchy(model, make_fk("3", "0"), 1, PDEGrid(0.1, 0.01, 0.1))
    tab = viscosity_residual(sol, model, make_fk("3", "0"), 2, (0.02, 0.1),
                             field=lambda t, x: np.full_like(x, 3.0))
    assert tab.maxima == [0.0, 0.0]


def test_explosive_case_residual_bounded_and_decreasing():
    cu = catalog_entry("cubic_drift")
    sol = solve_cauchy(cu.model, cu.fk, 1, PDEGrid(0.02, 0.01, 1.0))
    tab = viscosity_residual(sol, cu.model, cu.fk, 3, (0.05, 1.0, (-2.0, 2.0)))
    assert tab.median_decreasing
    assert all(b < a for a, b in zip(tab.maxima, tab.maxima[1:]))
    assert max(tab.maxima) < 1.0


def test_viscosity_needs_two_levels():
    sol = solve_cauchy(BM.model, BM.fk, None, PDEGrid(0.1, 0.01, 0.1))
    with pytest.raises(ValueError):
        viscosity_residual(sol, BM.model, BM.fk, 1)


# ---- continuity modulus --------------------------------------------------

def _gamma_literal(C0, C, Ca, alpha, Cp, mode, t, tp, du):
    s = abs(t - tp)
    if mode == "holder_f":
        last = Ca * (8 * s * C + 2 * (t - tp) ** 2 * C ** 2) ** (alpha / 2)
    else:
        last = (8 * s * Cp + 2 * (t - tp) ** 2 * Cp ** 2) ** 0.5
    return np.exp(max(t, tp) * C0) * (C0 * du + C0 * (np.exp(s * C0) - 1) + last)


def test_bound_vanishes_at_equal_times():
    p = ContinuityBoundParams(1.0, "holder_f", C=1.0, C_alpha=1.0, alpha=0.5)
    assert continuity_bound(p, 0.3, 0.3, 0.0) == 0.0


def test_bound_reduces_to_smooth_branch_when_c0_zero():
    p = ContinuityBoundParams(0.0, "smooth_f", C_prime=2.0)
    s = 0.1
    assert continuity_bound(p, 0.5, 0.4, 0.3) == pytest.approx(math.sqrt(8 * s * 2 + 2 * s * s * 4))


def test_bound_holder_example_matches_literal():
    p = ContinuityBoundParams(1.0, "holder_f", C=1.0, C_alpha=1.0, alpha=1.0)
    ref = _gamma_literal(1.0, 1.0, 1.0, 1.0, None, "holder_f", 1.0, 0.9, 0.01)
    assert continuity_bound(p, 1.0, 0.9, 0.01) == pytest.approx(ref, rel=1e-14)
    assert ref == pytest.approx(2.774575900841682, rel=1e-14)


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 3), st.floats(0.01, 3), st.floats(0.01, 3), st.floats(0.05, 1),
       st.floats(0, 1), st.floats(0, 2), st.floats(0, 2), st.sampled_from(["holder_f", "smooth_f"]))
def test_bound_nondecreasing_in_gap(C0, C, Cp, alpha, du, s1, s2, mode):
    p = ContinuityBoundParams(C0, mode, C=C, C_alpha=1.5, alpha=alpha, C_prime=Cp)
    lo, hi = sorted((s1, s2))
    assert continuity_bound(p, 1.0, 1.0 + lo, du) <= continuity_bound(p, 1.0, 1.0 + hi, du)


def test_params_validated():
    with pytest.raises(ValueError):
        ContinuityBoundParams(1.0, "holder_f", C=1.0, C_alpha=1.0, alpha=1.5)
    with pytest.raises(ValueError):
        ContinuityBoundParams(1.0, "smooth_f")
    with pytest.raises(ValueError):
        ContinuityBoundParams(-1.0, "smooth_f", C_prime=1.0)


T_GRID = [0.05 * k for k in range(1, 11)]


def test_continuity_check_bm_no_violations():
    p = ContinuityBoundParams(1.0, "smooth_f", C_prime=1.0)
    rep = continuity_check(BM.model, BM.fk, p, [0.5], T_GRID, 4000,
                           SimConfig(1e-3, 0.5, rng_seed=6))
    assert rep.ok and len(rep.pairs) == 9


def test_continuity_check_constant_potential():
    p = ContinuityBoundParams(1.0, "smooth_f", C_prime=1.0)
    rep = continuity_check(BM_KILLED.model, BM_KILLED.fk, p, [0.5], T_GRID, 4000,
                           SimConfig(1e-3, 0.5, rng_seed=7))
    assert rep.ok


def test_continuity_check_single_time_empty():
    p = ContinuityBoundParams(1.0, "smooth_f", C_prime=1.0)
    rep = continuity_check(BM.model, BM.fk, p, [0.5], [0.1], 10, SimConfig(1e-3, 0.1))
    assert rep.ok and rep.pairs == []


def test_continuity_check_requires_clean_validation():
    p = ContinuityBoundParams(1.0, "smooth_f", C_prime=1.0)
    with pytest.raises(ValueError, match="declared bounds"):
        continuity_check(BM.model, make_fk("1", "-1"), p, [0.5], [0.1, 0.2], 10,
                         SimConfig(1e-3, 0.2))
