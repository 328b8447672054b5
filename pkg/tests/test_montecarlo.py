import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from blowup.expr import EvaluationError
from blowup.model import make_fk, make_model
from blowup.montecarlo import (check_martingale, estimate_feynman_kac, estimate_u,
                               estimates_to_json, mean_and_sd, write_estimates_csv)
from blowup.oracles import bm_interval_survival, catalog_entry
from blowup.paths import SimConfig

BM = catalog_entry("bm_unit_interval")
BM_KILLED = catalog_entry("bm_unit_interval_killed")


def test_initial_condition_exact():
    cfg = SimConfig(1e-3, 0.1, rng_seed=1)
    u = estimate_u(BM.model, [0.5], [0.0, 0.1], 1000, cfg)
    assert u[0].value == 1.0 and u[0].std_error == 0.0
    fk = make_fk("x^2 + 1", "0")
    v = estimate_feynman_kac(BM.model, fk, [0.3], [0.0, 0.1], 1000, cfg)
    assert v[0].value == 0.3 ** 2 + 1 and v[0].std_error == 0.0


def test_conservative_ou_survives():
    e = catalog_entry("ou")
    u = estimate_u(e.model, [0.0], [1.0], 5000, SimConfig(1e-2, 1.0, rng_seed=3))[0]
    assert abs(u.value - 1.0) <= 3 * u.std_error + 1e-15


def test_bm_interval_bias_shrinks_like_sqrt_dt():
    """Grid-time exit detection overestimates survival by O(sqrt(dt))."""
    exact = bm_interval_survival(0.1, 0.5)
    bias, se = [], []
    for dt in (4e-3, 1e-3):
        u = estimate_u(BM.model, [0.5], [0.1], 40000, SimConfig(dt, 0.1, rng_seed=77))[0]
        bias.append(u.value - exact)
        se.append(u.std_error)
    assert bias[0] > 3 * se[0] and bias[1] > 3 * se[1]
    assert 1.5 <= bias[0] / bias[1] <= 2.7


def test_constant_potential_factorizes_exactly():
    cfg = SimConfig(1e-3, 0.3, rng_seed=5)
    ts = [0.1, 0.2, 0.3]
    u = estimate_u(BM.model, [0.5], ts, 5000, cfg)
    v = estimate_feynman_kac(BM_KILLED.model, BM_KILLED.fk, [0.5], ts, 5000, cfg)
    for a, b in zip(u, v):
        assert b.value == pytest.approx(math.exp(-a.t) * a.value, rel=1e-12, abs=0)


def test_bounded_payoff_bounded_estimate():
    fk = make_fk("1 + sin(5*x)", "x^2")
    cfg = SimConfig(1e-3, 0.5, rng_seed=9)
    for est in estimate_feynman_kac(catalog_entry("ou").model, fk, [0.1], [0.1, 0.5], 4000, cfg):
        assert est.value <= 2.0 + 3 * est.std_error


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**63), st.floats(0.05, 0.95))
def test_survival_monotone_and_in_unit_interval(seed, x0):
    ts = [0.01 * k for k in range(1, 21)]
    u = [e.value for e in estimate_u(BM.model, [x0], ts, 300, SimConfig(1e-3, 0.2, rng_seed=seed))]
    assert all(0.0 <= v <= 1.0 for v in u)
    assert all(b <= a for a, b in zip(u, u[1:]))


def test_seed_determinism_bitwise():
    cfg = SimConfig(1e-3, 0.2, rng_seed=123)
    a = estimate_feynman_kac(BM_KILLED.model, BM_KILLED.fk, [0.4], [0.1, 0.2], 3000, cfg)
    b = estimate_feynman_kac(BM_KILLED.model, BM_KILLED.fk, [0.4], [0.1, 0.2], 3000, cfg)
    assert a == b


def test_worker_count_independent():
    e = catalog_entry("cubic_drift")
    cfg = SimConfig(1e-3, 0.5, rng_seed=6)
    a = estimate_u(e.model, [0.0], [0.25, 0.5], 9000, cfg, workers=1)
    b = estimate_u(e.model, [0.0], [0.25, 0.5], 9000, cfg, workers=3)
    for x, y in zip(a, b):
        assert x.value == pytest.approx(y.value, rel=1e-12)


def test_truncation_monotone_in_m():
    model = make_model("x^3", "1", unit=0.5)
    vals = []
    for m in (1, 2, 3, 4, None):
        cfg = SimConfig(1e-3, 1.0, truncation_index=m, rng_seed=31)
        vals.append(estimate_u(model, [0.0], [1.0], 4000, cfg)[0].value)
    assert all(a <= b for a, b in zip(vals, vals[1:]))


def test_std_error_scales_inverse_sqrt_n():
    e = catalog_entry("cubic_drift")
    small = estimate_u(e.model, [0.0], [1.0], 4000, SimConfig(2e-3, 1.0, rng_seed=1))[0]
    big = estimate_u(e.model, [0.0], [1.0], 16000, SimConfig(2e-3, 1.0, rng_seed=2))[0]
    assert 0.8 * 2 <= small.std_error / big.std_error <= 1.2 * 2


def test_zero_valid_paths_raises():
    model = make_model("sqrt(x)", "1")
    with pytest.raises(ArithmeticError):
        estimate_u(model, [-1.0], [0.1], 50, SimConfig(1e-2, 0.1))


def test_payoff_failure_at_survivor_raises():
    with pytest.raises(EvaluationError):
        estimate_feynman_kac(catalog_entry("bm_line").model, make_fk("log(x)"), [0.1], [0.5],
                             500, SimConfig(1e-2, 0.5, rng_seed=1))


def test_invalid_paths_counted():
    model = make_model("sqrt(x)", "1")
    u = estimate_u(model, [0.05], [1.0], 500, SimConfig(1e-2, 1.0, rng_seed=3))[0]
    assert u.n_invalid > 0 and u.n_paths == 500 - u.n_invalid


def test_grid_validation():
    cfg = SimConfig(1e-2, 1.0)
    with pytest.raises(ValueError):
        estimate_u(BM.model, [0.5], [0.2, 0.1], 10, cfg)
    with pytest.raises(ValueError):
        estimate_u(BM.model, [0.5], [0.105], 10, cfg)
    with pytest.raises(ValueError):
        estimate_u(BM.model, [1.5], [0.1], 10, cfg)


def test_mean_and_sd_exact_for_constants():
    assert mean_and_sd(np.full(1001, 0.1)) == (0.1, 0.0)


def test_martingale_frozen_dynamics():
    model = make_model("0", "0", 0.0, 1.0)
    r = check_martingale(model, make_fk(), 0.5, [0.5], 0.1, 20, 20, SimConfig(1e-3, 0.5))
    assert r.lhs == 1.0 and r.rhs == 1.0 and r.std_error == 0.0


def test_martingale_bm_interval_small():
    r = check_martingale(BM.model, BM.fk, 0.2, [0.5], 0.1, 150, 150,
                         SimConfig(1e-3, 0.2, rng_seed=41))
    assert r.discrepancy <= 3 * r.std_error


def test_martingale_constant_potential_scales():
    cfg = SimConfig(1e-3, 0.2, rng_seed=42)
    plain = check_martingale(BM.model, BM.fk, 0.2, [0.5], 0.1, 60, 60, cfg)
    killed = check_martingale(BM_KILLED.model, BM_KILLED.fk, 0.2, [0.5], 0.1, 60, 60, cfg)
    s = math.exp(-0.2)
    assert killed.lhs == pytest.approx(s * plain.lhs, rel=1e-12)
    assert killed.rhs == pytest.approx(s * plain.rhs, rel=1e-12)
    assert abs(killed.discrepancy - s * plain.discrepancy) <= 3 * killed.std_error


@pytest.mark.parametrize("t_star, delta, x, dt", [
    (0.2, 0.005, 0.5, 1e-3),   # delta not above 10 dt
    (0.05, 0.1, 0.5, 1e-3),    # delta >= t_star
    (0.2, 0.1, 0.05, 1e-3),    # ball leaves the domain
])
def test_martingale_geometry_rejected(t_star, delta, x, dt):
    with pytest.raises(ValueError):
        check_martingale(BM.model, BM.fk, t_star, [x], delta, 5, 5, SimConfig(dt, t_star))


def test_csv_and_json_outputs(tmp_path):
    est = estimate_u(BM.model, [0.5], [0.1, 0.2], 200, SimConfig(1e-2, 0.2, rng_seed=8))
    write_estimates_csv(est, tmp_path / "e.csv")
    with open(tmp_path / "e.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["t", "x", "value", "std_error", "n_paths", "n_invalid", "seed"]
    assert float(rows[1]["value"]) == est[1].value
    doc = json.loads(estimates_to_json(est, model="bm"))
    assert doc["model"] == "bm"
    assert doc["estimates"][0]["x"] == [0.5]
