import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from blowup.model import make_fk, make_model
from blowup.montecarlo import estimate_u
from blowup.oracles import bm_interval_survival, catalog_entry
from blowup.paths import SimConfig
from blowup.pde import (AlignmentError, PDEGrid, check_supersolution, minimal_solution,
                        solve_cauchy)

BM = catalog_entry("bm_unit_interval")
CUBIC = catalog_entry("cubic_drift")


def _series_error(sol, t):
    x = sol.x
    inner = (x > 0) & (x < 1)
    exact = bm_interval_survival(t, x[inner])
    return float(np.max(np.abs(sol.slice_at(t)[inner] - exact)))


def test_zero_data_stays_zero():
    sol = solve_cauchy(BM.model, make_fk("0", "3"), None, PDEGrid(0.02, 1e-3, 0.1))
    assert np.all(sol.values == 0.0)


def test_crank_nicolson_matches_series():
    sol = solve_cauchy(BM.model, BM.fk, None, PDEGrid(1e-3, 1e-4, 0.1, save_every=100))
    assert _series_error(sol, 0.1) <= 1e-3


def test_grid_convergence_rate():
    errs = []
    for dx, dt in ((0.02, 2e-3), (0.01, 1e-3), (0.005, 5e-4)):
        sol = solve_cauchy(BM.model, BM.fk, None, PDEGrid(dx, dt, 0.2))
        errs.append(max(_series_error(sol, t) for t in (0.02, 0.1, 0.2)))
    assert errs[0] / errs[1] >= 1.7 and errs[1] / errs[2] >= 1.7


@pytest.mark.parametrize("theta, upwind", [(1.0, True), (0.5, False), (1.0, False)])
def test_constant_potential_factorization(theta, upwind):
    grid = PDEGrid(0.02, 1e-3, 0.5, theta=theta, upwind=upwind)
    plain = solve_cauchy(CUBIC.model, CUBIC.fk, 1, grid)
    killed = solve_cauchy(CUBIC.model, make_fk("1", "1.7"), 1, grid)
    scale = np.exp(-1.7 * plain.times)[:, None]
    assert np.max(np.abs(killed.values - scale * plain.values)) <= 1e-8


@settings(max_examples=12, deadline=None)
@given(st.sampled_from(["x^3", "-x", "sin(3*x)", "2 - x^2"]),
       st.sampled_from(["1", "0.3 + x^2/10", "1 + 0.5*sin(x)"]),
       st.sampled_from(["1", "exp(-x^2)", "abs(sin(x))"]),
       st.sampled_from(["0", "x^2", "1 + cos(x)"]))
def test_discrete_maximum_principle(b, s, f, h):
    model = make_model(b, s, unit=1.0)
    sol = solve_cauchy(model, make_fk(f, h), 2, PDEGrid(0.05, 0.01, 0.5, theta=1.0, upwind=True))
    fmax = float(np.max(sol.values[0]))
    assert np.all(sol.values >= 0.0)
    # the linear solves round; the upper bound holds to a few ulps of max f
    assert np.all(sol.values <= fmax * (1 + 4 * np.finfo(float).eps))


@settings(max_examples=6, deadline=None)
@given(st.sampled_from(["x^3", "x", "-x^3 + 2*x"]), st.sampled_from(["1", "1 + x^2/4"]))
def test_truncation_monotone(b, s):
    model = make_model(b, s, unit=1.0)
    res = minimal_solution(model, make_fk(), PDEGrid(0.05, 0.01, 0.5, theta=1.0, upwind=True),
                           range(1, 5))
    for entry in res.report[1:]:
        assert entry["monotone_violation"] <= 1e-8


def test_conservative_ou_near_one():
    e = catalog_entry("ou")
    sol = solve_cauchy(e.model, e.fk, 1, PDEGrid(0.02, 0.01, 1.0, theta=1.0, upwind=True))
    assert sol.x[0] == -10.0 and sol.x[-1] == 10.0
    j = sol.node_index([0.0])
    assert np.all(sol.values[:, j[0]] >= 1 - 1e-2)


def test_cubic_minimal_solution_below_one_and_matches_mc():
    grid = PDEGrid(0.01, 1e-3, 1.0, theta=1.0, upwind=True, save_every=100)
    res = minimal_solution(CUBIC.model, CUBIC.fk, grid, range(1, 5), tol=1e-2,
                           window=[(-2.0, 2.0)])
    u = res.solution.at(1.0, [0.0])
    assert res.converged
    assert u < 1 - 10 * 1e-8
    mc = estimate_u(CUBIC.model, [0.0], [0.5, 1.0], 20000, SimConfig(5e-4, 1.0, rng_seed=19))
    assert abs(u - mc[1].value) <= max(3 * mc[1].std_error, 1e-2)
    # the minimal solution and the Monte Carlo values dominate each other within slack
    rep = check_supersolution(res.solution, mc, CUBIC.fk)
    assert rep.dominated and rep.reverse_holds


def test_single_truncation_not_converged_unless_allowed():
    grid = PDEGrid(0.05, 0.01, 0.2, theta=1.0, upwind=True)
    assert not minimal_solution(CUBIC.model, CUBIC.fk, grid, [2]).converged
    res = minimal_solution(CUBIC.model, CUBIC.fk, grid, [2], allow_degenerate=True)
    assert res.converged and len(res.report) == 1


def test_minimal_needs_monotone_scheme():
    with pytest.raises(ValueError):
        minimal_solution(CUBIC.model, CUBIC.fk, PDEGrid(0.05, 0.01, 0.2), [1, 2])


def test_explicit_stability_rejected_unless_forced():
    grid = PDEGrid(0.01, 1e-3, 0.01, theta=0.0)
    with pytest.raises(ValueError, match="stability"):
        solve_cauchy(BM.model, BM.fk, None, grid)
    sol = solve_cauchy(BM.model, BM.fk, None, grid, force=True)
    assert sol.values.shape[0] == 11


def test_explicit_scheme_within_limit():
    sol = solve_cauchy(BM.model, BM.fk, None, PDEGrid(0.02, 1e-4, 0.1, theta=0.0))
    assert _series_error(sol, 0.1) <= 2e-3


def test_degenerate_diffusion_rejected():
    with pytest.raises(ValueError):
        solve_cauchy(make_model("0", "x", -1, 1), make_fk(), None, PDEGrid(0.05, 0.01, 0.1))


def test_two_dimensional_product_solution():
    model = make_model(["0", "0"], [["1", "0"], ["0", "1"]], [0, 0], [1, 1])
    sol = solve_cauchy(model, make_fk("1", "0", 2), None, PDEGrid(0.02, 1e-3, 0.1))
    x = sol.axes[0][1:-1]
    exact = np.outer(bm_interval_survival(0.1, x), bm_interval_survival(0.1, sol.axes[1][1:-1]))
    assert np.max(np.abs(sol.slice_at(0.1)[1:-1, 1:-1] - exact)) <= 2e-3


def test_two_dimensional_cross_term_rejected():
    model = make_model(["0", "0"], [["1", "0"], ["1", "1"]], [0, 0], [1, 1])
    with pytest.raises(ValueError):
        solve_cauchy(model, make_fk("1", "0", 2), None, PDEGrid(0.05, 1e-2, 0.1))


def test_at_requires_alignment():
    sol = solve_cauchy(BM.model, BM.fk, None, PDEGrid(0.05, 0.01, 0.1))
    assert sol.at(0.1, [0.5]) == sol.slice_at(0.1)[10]
    with pytest.raises(AlignmentError):
        sol.at(0.1, [0.51])
    with pytest.raises(AlignmentError):
        sol.at(0.105, [0.5])


def test_export(tmp_path):
    sol = solve_cauchy(BM.model, BM.fk, None, PDEGrid(0.25, 0.05, 0.1))
    csv_path, json_path = sol.write(tmp_path / "s")
    lines = open(csv_path).read().splitlines()
    assert lines[0] == "t,x,u"
    assert len(lines) == 1 + 3 * 5
    meta = json.load(open(json_path))
    assert meta["scheme"]["theta"] == 0.5 and meta["scheme"]["upwind"] is False
    assert meta["m"] is None and meta["box"] == [[0.0, 1.0]]


# ---- supersolution domination --------------------------------------------

def test_constant_candidate_dominates_mc():
    e = catalog_entry("bm_unit_interval_killed")
    est = estimate_u(e.model, [0.5], [0.05, 0.1, 0.2], 2000, SimConfig(1e-3, 0.2, rng_seed=4))
    rep = check_supersolution(1.0, est, e.fk)
    assert rep.dominated and rep.margin > 0


def test_constant_candidate_must_cover_f():
    est = estimate_u(BM.model, [0.5], [0.1], 100, SimConfig(1e-2, 0.1, rng_seed=4))
    with pytest.raises(ValueError):
        check_supersolution(0.5, est, BM.fk)
    with pytest.raises(ValueError):
        check_supersolution(-1.0, est)


def test_misaligned_reference_raises():
    sol = solve_cauchy(BM.model, BM.fk, None, PDEGrid(0.1, 0.01, 0.1))
    est = estimate_u(BM.model, [0.55], [0.1], 50, SimConfig(1e-2, 0.1, rng_seed=4))
    with pytest.raises(AlignmentError):
        check_supersolution(sol, est, BM.fk)


def test_pde_reference_on_common_nodes():
    coarse = solve_cauchy(BM.model, BM.fk, None, PDEGrid(0.1, 0.01, 0.1, theta=1.0, upwind=True))
    rep = check_supersolution(coarse, coarse, BM.fk)
    assert rep.dominated and rep.reverse_holds and rep.worst_violation <= 0
