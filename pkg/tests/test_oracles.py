"""Values computed symbolically (sympy, exact rationals) and frozen here."""

from __future__ import annotations

import numpy as np
import pytest

from nashkuiper.cancellation import ibp_coefficients
from nashkuiper.grid import GridSpec, from_function
from nashkuiper.metric import gauss_curvature, r0_corner_search
from nashkuiper.profiles import build_tower

# g = exp(2 phi) Id with phi = sin(x) cos(y) / 10, curvature at (0.3, 0.6)
CONFORMAL_K = 0.046458222301230982775

# eta2 coefficients of H = (1 + x^2 y/3, x y^2/5 - x/7, 1/2 + x^3/11 + y^2/13) at (1/4, 3/5)
IBP_L = [
    (1.4318912319027587, -1.4819947981125484),
    (0.2, -0.64176190476190476),
    (1.1313708498984760, -2.4513035081133648),
]
IBP_P = [1.5770413336663337, 0.59403703969967007, 2.0266666666666667]

# Kuiper Gamma tower levels 0..4 at t = 0.7
KUIPER_LEVELS = [
    0.91106139041217144,
    -1.0816501943328263,
    -0.91106139041217144,
    1.0816501943328263,
    0.91106139041217144,
]


def conformal_metric(spec):
    def f(x, y):
        lam = np.exp(0.2 * np.sin(x) * np.cos(y))
        return lam, 0 * x, lam

    return from_function(spec, f, "sym2")


def test_conformal_curvature_at_node():
    spec = GridSpec(641)  # (0.3, 0.6) is node (192, 384)
    K = gauss_curvature(conformal_metric(spec)).data
    assert K[192, 384] == pytest.approx(CONFORMAL_K, rel=1e-8)


def test_conformal_closed_form_matches_oracle():
    x, y = 0.3, 0.6
    phi = 0.1 * np.sin(x) * np.cos(y)
    lap = -0.2 * np.sin(x) * np.cos(y)
    assert -np.exp(-2 * phi) * lap == pytest.approx(CONFORMAL_K, rel=1e-15)


def test_ibp_eta2_coefficients():
    spec = GridSpec(21)  # (1/4, 3/5) is node (5, 12)
    H = from_function(
        spec,
        lambda x, y: (1 + x * x * y / 3, x * y * y / 5 - x / 7, 0.5 + x**3 / 11 + y * y / 13),
        "sym2",
    )
    coef = ibp_coefficients(H, "eta2", 2)
    for i in range(3):
        np.testing.assert_allclose(coef.L[i][5, 12], IBP_L[i], rtol=1e-11)
        assert coef.P[i][5, 12] == pytest.approx(IBP_P[i], rel=1e-11)


def test_kuiper_tower_levels():
    tower = build_tower("kuiper_gamma", 4)
    for i, v in enumerate(KUIPER_LEVELS):
        assert tower(i, 0.7) == pytest.approx(v, abs=1e-15)


def test_corner_deviation_is_twice_radius():
    for r in (0.05, 0.25):
        assert r0_corner_search(r)["max_deviation"] == pytest.approx(2 * r, abs=1e-15)
