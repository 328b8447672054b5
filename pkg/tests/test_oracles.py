import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from blowup.model import validate_model
from blowup.oracles import (NoBlowupError, bm_interval_survival, bm_interval_tail_bound,
                            catalog, catalog_entry, ode_explosion_time)


def test_series_reference_value():
    # leading 50 odd terms summed independently with mpmath at 30 digits
    assert bm_interval_survival(0.1, 0.5) == pytest.approx(0.77231160685859060, rel=1e-14)


@settings(max_examples=100, deadline=None)
@given(st.floats(0.01, 2.0), st.floats(0.0, 1.0))
def test_symmetry(t, x):
    assert abs(bm_interval_survival(t, x) - bm_interval_survival(t, 1 - x)) <= 1e-14


def test_large_time_leading_term():
    lead = 4 / math.pi * math.exp(-math.pi ** 2 / 2)
    assert bm_interval_survival(1.0, 0.5) == pytest.approx(lead, rel=1e-6)


@settings(max_examples=100, deadline=None)
@given(st.floats(0.01, 1.0), st.floats(1e-3, 1.0), st.floats(0.01, 0.99))
def test_decreasing_in_time(t1, dt, x):
    assert bm_interval_survival(t1 + dt, x) < bm_interval_survival(t1, x)


@settings(max_examples=100, deadline=None)
@given(st.floats(0.01, 2.0), st.floats(0.0, 1.0), st.integers(25, 60))
def test_values_in_unit_interval(t, x, n):
    assert 0.0 <= bm_interval_survival(t, x, n) <= 1.0


@settings(max_examples=50, deadline=None)
@given(st.floats(0.01, 1.0), st.floats(0.0, 1.0), st.integers(1, 40))
def test_doubling_terms_within_tail_bound(t, x, n):
    diff = abs(bm_interval_survival(t, x, 2 * n) - bm_interval_survival(t, x, n))
    assert diff <= bm_interval_tail_bound(t, n) + 1e-15


def test_array_input_and_boundary():
    v = bm_interval_survival(0.1, np.array([0.0, 0.5, 1.0]))
    assert v[0] == 0.0 and v[2] == 0.0 and v[1] == bm_interval_survival(0.1, 0.5)


def test_series_errors():
    with pytest.raises(ValueError):
        bm_interval_survival(0.0, 0.5)
    with pytest.raises(ValueError):
        bm_interval_survival(0.1, 1.5)


def test_tan_blowup():
    assert abs(ode_explosion_time("1 + x^2", 0.0) - math.pi / 2) <= 1e-3


def test_reciprocal_blowup():
    assert abs(ode_explosion_time("x^2", 1.0) - 1.0) <= 1e-3


def test_linear_growth_hits_cap():
    with pytest.raises(NoBlowupError):
        ode_explosion_time("1", 0.0, R=1e6)


def test_catalog_contents():
    cat = catalog()
    base = ["bm_unit_interval", "bm_line", "ou", "cubic_drift", "deterministic_tan"]
    for name in base:
        assert name in cat and f"{name}_killed" in cat
        assert cat[f"{name}_killed"].fk.h.constant_value() == 1.0
    assert cat["cubic_drift"].explosive and not cat["ou"].explosive


def test_catalog_models_validate():
    for e in catalog().values():
        assert validate_model(e.model, e.fk).ok


def test_unknown_catalog_name():
    with pytest.raises(KeyError, match="available"):
        catalog_entry("nope")
