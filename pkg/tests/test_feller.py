import json
import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from blowup.expr import EvaluationError
from blowup.feller import FellerQuad, feller_classify
from blowup.model import make_model
from blowup.montecarlo import estimate_u
from blowup.oracles import catalog_entry
from blowup.paths import SimConfig

# v(+-inf) for b = x^3, sigma = 1, c = 0 by 30-digit mpmath double quadrature
CUBIC_V = 1.6431309008246093


def test_brownian_motion_conservative():
    r = feller_classify(catalog_entry("bm_line").model)
    assert r.classification == "conservative"
    assert r.v_left == math.inf and r.v_right == math.inf


def test_ou_conservative():
    assert feller_classify(catalog_entry("ou").model).classification == "conservative"


def test_cubic_explosive_both_with_oracle_value():
    r = feller_classify(catalog_entry("cubic_drift").model)
    assert r.classification == "explosive_both"
    assert r.v_left == pytest.approx(CUBIC_V, rel=1e-8)
    assert r.v_right == pytest.approx(CUBIC_V, rel=1e-8)


def test_bounded_interval_closed_form():
    """For b = 0, sigma = 1 on (0, 1), v(x) = (x - c)^2."""
    r = feller_classify(catalog_entry("bm_unit_interval").model)
    assert r.classification == "explosive_both"
    assert r.v_left == pytest.approx(0.25, rel=1e-8)
    assert r.v_right == pytest.approx(0.25, rel=1e-8)


def test_half_line_explodes_on_finite_side_only():
    r = feller_classify(make_model("0", "1", 0.0, math.inf))
    assert r.c == 1.0
    assert r.classification == "explosive_left"


def test_one_sided_drift():
    # x^3 for x > 0 and 0 below: explodes to +inf only
    r = feller_classify(make_model("(x + abs(x))^3 / 8", "1"))
    assert r.classification == "explosive_right"


@settings(max_examples=8, deadline=None)
@given(st.floats(-5, 5), st.sampled_from(["y^3", "-y", "0", "2*y^3 - y"]))
def test_shift_invariance(k, drift):
    shifted = make_model(drift.replace("y", f"(x - {k!r})"), "1")
    base = make_model(drift.replace("y", "x"), "1")
    a = feller_classify(base, c=0.0)
    b = feller_classify(shifted, c=k)
    assert a.classification == b.classification
    if math.isfinite(a.v_right):
        assert b.v_right == pytest.approx(a.v_right, rel=1e-6)


def test_slow_divergence_flagged():
    # v ~ log x for b = x: diverges too slowly for the threshold rule
    r = feller_classify(make_model("x", "1"))
    assert r.right.slow_divergence_suspected


def test_errors():
    with pytest.raises(ValueError):
        feller_classify(make_model(["0", "0"], [["1", "0"], ["0", "1"]]))
    with pytest.raises(ValueError):
        feller_classify(catalog_entry("bm_unit_interval").model, c=2.0)
    with pytest.raises(EvaluationError):
        feller_classify(make_model("0", "x"), c=-1.0)


def test_report_json():
    r = feller_classify(catalog_entry("bm_line").model, quad=FellerQuad(threshold=1e6))
    d = json.loads(r.to_json())
    assert d["v_left"] == "inf" and d["left"]["endpoint"] == "-inf"
    assert d["classification"] == "conservative"


@pytest.mark.parametrize("name", ["bm_line", "ou", "cubic_drift"])
def test_consistent_with_monte_carlo(name):
    e = catalog_entry(name)
    rep = feller_classify(e.model)
    u = estimate_u(e.model, [0.0], [2.0], 4000, SimConfig(1e-3, 2.0, rng_seed=13))[0]
    if rep.explosive:
        assert u.value < 1 - 5 * u.std_error
    else:
        assert abs(u.value - 1) <= 3 * u.std_error
