from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from nashkuiper.errors import NKError
from nashkuiper.grid import GridSpec, from_function
from nashkuiper.kallen import kallen_decompose
from nashkuiper.metric import H0, sym_field


def near_h0(spec, eps=0.05, k=2.0):
    return from_function(
        spec,
        lambda x, y: (1.5 + eps * np.sin(k * x), 0.5 + eps * np.cos(k * y) * x, 1.5 - eps * x * y),
        "sym2",
    )


def test_constant_h0_is_exact():
    spec = GridSpec(17)
    res = kallen_decompose(sym_field(spec, H0), 10.0, 20.0, 3)
    for a in (res.a1, res.a2, res.a3):
        np.testing.assert_allclose(a.data, 1.0)
    assert res.iterations == 1 and np.max(np.abs(res.F.data)) == 0.0


def test_reconstruction_identity():
    spec = GridSpec(65)
    H = near_h0(spec)
    lam, kappa = 10.0, 25.0
    res = kallen_decompose(H, lam, kappa, 4)
    assert np.max(np.abs(res.reconstruct(lam, kappa) - H.data)) < 1e-13
    assert res.amplitude_range[0] >= 0.5


def test_residual_decays_geometrically():
    spec = GridSpec(129)
    H = near_h0(spec, 0.1, 5.0)
    res = kallen_decompose(H, 8.0, 16.0, 4)
    h = res.residual_history
    assert all(b < a for a, b in zip(h, h[1:]))


@given(st.floats(0.0, 0.1), st.floats(1.0, 4.0))
def test_amplitudes_stay_in_band(eps, k):
    spec = GridSpec(33)
    res = kallen_decompose(near_h0(spec, eps, k), 10.0, 20.0, 3)
    lo, hi = res.amplitude_range
    assert 0.5 <= lo <= hi <= 1.5


def test_precondition_strict_and_lenient():
    spec = GridSpec(17)
    H = sym_field(spec, [1.5 + 0.2, 0.5, 1.5])
    with pytest.raises(NKError) as e:
        kallen_decompose(H, 10.0, 20.0, 2)
    assert e.value.code == "assumption-violated"
    res = kallen_decompose(H, 10.0, 20.0, 2, strict=False)
    assert res.warnings and "violated" in res.warnings[0]


def test_frequency_order_and_depth():
    spec = GridSpec(17, max_deriv=3)
    H = sym_field(spec, H0)
    with pytest.raises(NKError):
        kallen_decompose(H, 20.0, 10.0, 2)
    with pytest.raises(NKError) as e:
        kallen_decompose(H, 10.0, 20.0, 4)
    assert e.value.code == "derivative-depth-exceeded"


def test_left_ball():
    spec = GridSpec(17)
    H = sym_field(spec, [1.0, 0.9, 1.0])
    with pytest.raises(NKError) as e:
        kallen_decompose(H, 10.0, 20.0, 2, strict=False)
    assert e.value.code == "decomposition-left-ball"


def test_history_csv(tmp_path):
    spec = GridSpec(33)
    res = kallen_decompose(near_h0(spec), 10.0, 20.0, 3)
    res.write_history_csv(tmp_path / "h.csv")
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert lines[0] == "iteration,F_sup" and len(lines) == 1 + len(res.residual_history)
