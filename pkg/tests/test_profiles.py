from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from nashkuiper.errors import NKError
from nashkuiper.grid import GridSpec, from_function
from nashkuiper.profiles import KINDS, TrigPoly, build_tower, evaluate, phase, tower_from_poly

phases = st.floats(-50, 50, allow_nan=False)


@given(phases)
def test_nash_pair(t):
    g = build_tower("nash_gamma", 1)
    gb = build_tower("nash_gammabar", 1)
    assert g(-1, t) ** 2 + gb(-1, t) ** 2 == pytest.approx(1.0, abs=1e-14)


@given(phases)
def test_kuiper_pair(t):
    g = build_tower("kuiper_gamma", 1)
    gb = build_tower("kuiper_gammabar", 1)
    assert g(-1, t) ** 2 + 2 * gb(-1, t) == pytest.approx(1.0, abs=1e-14)


@given(phases)
def test_ddbar_and_product(t):
    g = build_tower("kuiper_gamma", 1)
    assert build_tower("kuiper_ddbar", 1)(0, t) == pytest.approx(g(0, t) ** 2 - 1, abs=1e-14)
    assert build_tower("product_gammagammaprime", 1)(0, t) == pytest.approx(g(0, t) * g(-1, t), abs=1e-14)


@pytest.mark.parametrize("kind", KINDS)
def test_towers_are_zero_mean(kind):
    tower = build_tower(kind, 8)
    for i in range(tower.depth + 1):
        assert tower.level(i).const == 0.0


@pytest.mark.parametrize("kind", KINDS)
def test_levels_differentiate_down(kind):
    tower = build_tower(kind, 6)
    for i in range(1, 7):
        d = tower.level(i).derivative()
        for (m1, s1, c1), (m2, s2, c2) in zip(d.terms, tower.level(i - 1).terms):
            assert m1 == m2 and s1 == pytest.approx(s2, abs=1e-15) and c1 == pytest.approx(c2, abs=1e-15)


def test_periodicity_and_mean_by_quadrature():
    tower = build_tower("kuiper_gammabar", 4)
    t = np.linspace(0, 2 * math.pi, 4097)[:-1]
    for i in range(5):
        vals = tower(i, t)
        assert abs(vals.mean()) < 1e-14
        assert tower(i, 0.3) == pytest.approx(tower(i, 0.3 + 2 * math.pi), abs=1e-13)


def test_nonzero_mean_rejected():
    with pytest.raises(NKError) as e:
        tower_from_poly("custom", TrigPoly(((1, 1.0, 0.0),), const=0.5), 2)
    assert e.value.code == "unbounded-primitive"


def test_level_range():
    tower = build_tower("nash_gamma", 3, max_deriv=4)
    with pytest.raises(NKError):
        tower.level(4)
    with pytest.raises(NKError):
        tower.level(-5)
    assert tower.level(-4)(0.2) == pytest.approx(math.sin(0.2))


def test_unknown_kind():
    with pytest.raises(NKError) as e:
        build_tower("square_wave", 2)
    assert e.value.code == "config-invalid"


def test_sup_bound_dominates():
    tower = build_tower("kuiper_gamma", 3)
    t = np.linspace(0, 7, 1001)
    for i in range(4):
        assert np.max(np.abs(tower(i, t))) <= tower.level(i).sup_bound() + 1e-15


def test_evaluate_on_field():
    spec = GridSpec(9)
    tfield = from_function(spec, lambda x, y: x + 0 * y)
    out = evaluate(build_tower("nash_gamma", 1), 0, 3.0, tfield)
    np.testing.assert_allclose(out.data, np.sin(3.0 * tfield.data))


def test_phase():
    x = np.array([[0.2, 0.4]])
    assert phase(x, (1.0, 0.0))[0] == 0.2
    assert phase(x, (0.6, 0.8))[0] == pytest.approx(0.44)


def test_json_dump(tmp_path):
    import json

    tower = build_tower("kuiper_gamma", 2)
    tower.dump_json(tmp_path / "t.json")
    d = json.loads((tmp_path / "t.json").read_text())
    assert d["depth"] == 2 and len(d["levels"]) == 3
