from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from nashkuiper.errors import NKError
from nashkuiper.grid import (
    GridField,
    GridSpec,
    check_resolution,
    constant,
    d1,
    d2,
    derivative,
    from_function,
    holder_seminorm,
    load_field,
    load_field_csv,
    mollifier_kernel,
    mollify,
    partial,
    save_field,
    save_field_csv,
    sup_norm,
)

# one-sided closure weights (times 12h), solved symbolically for exactness on quartics
CLOSURE_0 = [-25, 48, -36, 16, -3]
CLOSURE_1 = [-3, -10, 18, -6, 1]


def test_spec_rejects_small_grids():
    with pytest.raises(NKError) as e:
        GridSpec(8)
    assert e.value.code == "config-invalid"


def test_spacing_and_coords():
    spec = GridSpec(17)
    assert spec.h == 1 / 16
    x1, x2 = spec.coords()
    assert x1[3, 0] == 3 / 16 and x2[0, 5] == 5 / 16
    assert x1[-1, 0] == 1.0


def test_resolution_rule():
    spec = GridSpec(513)
    lim = spec.max_frequency()
    assert math.isclose(lim * spec.h, 2 * math.pi / 32)
    check_resolution(spec, lim)
    with pytest.raises(NKError) as e:
        check_resolution(spec, lim * 1.01)
    assert e.value.code == "grid-underresolved"
    with pytest.raises(NKError):
        check_resolution(spec, lim, diagonal=True)


def test_boundary_closure_weights():
    spec = GridSpec(9)
    for k, (c0, c1) in enumerate(zip(CLOSURE_0, CLOSURE_1)):
        e = np.zeros(spec.n)
        e[k] = 1.0
        out = d1(e, 0, 1 / 12)
        assert out[0] == c0 and out[1] == c1


@pytest.mark.parametrize("deg", [0, 1, 2, 3, 4])
def test_d1_exact_on_polynomials(deg):
    spec = GridSpec(21)
    x1, x2 = spec.coords()
    f = x1**deg + 0.5 * x2**deg
    df = deg * x1 ** max(deg - 1, 0) if deg else 0 * x1
    assert np.max(np.abs(d1(f, 0, spec.h) - df)) < 1e-10


def test_d2_fourth_order():
    errs = []
    for n in (65, 129):
        spec = GridSpec(n)
        x1, _ = spec.coords()
        errs.append(np.max(np.abs(d2(np.sin(3 * x1), 0, spec.h) + 9 * np.sin(3 * x1))))
    assert math.log2(errs[0] / errs[1]) > 3.5


def test_derivative_budget():
    spec = GridSpec(17, max_deriv=2)
    f = constant(spec, 1.0)
    with pytest.raises(NKError) as e:
        derivative(f, 1, 3)
    assert e.value.code == "derivative-depth-exceeded"
    with pytest.raises(NKError):
        partial(f, 2, 1)
    with pytest.raises(NKError):
        sup_norm(f, 3)


def test_field_shape_and_grid_checks():
    spec = GridSpec(9)
    with pytest.raises(NKError):
        GridField(spec, "vec4", np.zeros((9, 9, 3)))
    a = constant(spec, 1.0)
    b = constant(GridSpec(11), 1.0)
    with pytest.raises(NKError) as e:
        a + b
    assert e.value.code == "grid-mismatch"
    bad = a.with_data(np.full((9, 9), np.nan))
    with pytest.raises(NKError):
        bad.require_finite()


def test_from_function_components():
    spec = GridSpec(9)
    f = from_function(spec, lambda x, y: (x, y, x * y, 1 + 0 * x), "vec4")
    assert f.data.shape == (9, 9, 4)
    assert f.data[2, 3, 2] == pytest.approx(2 / 8 * 3 / 8)


def test_mollifier_kernel_normalized():
    w = mollifier_kernel(0.1, 0.01)
    assert w.sum() == pytest.approx(1.0, abs=1e-14)
    np.testing.assert_allclose(w, w.T)
    np.testing.assert_allclose(w, w[::-1, ::-1])


def test_mollify_preserves_affine():
    spec = GridSpec(65)
    f = from_function(spec, lambda x, y: 0.3 + 2 * x - y)
    out = mollify(f, 0.1)
    assert np.max(np.abs(out.data - f.data)) < 1e-12


def test_mollify_unresolved():
    spec = GridSpec(33)
    with pytest.raises(NKError) as e:
        mollify(constant(spec, 1.0), 1.5 * spec.h)
    assert e.value.code == "kernel-unresolved"


def test_sup_norm_orders():
    spec = GridSpec(129)
    f = from_function(spec, lambda x, y: np.sin(2 * x) * np.cos(y))
    # sin(2x) peaks at x = pi/4 inside the square
    assert sup_norm(f, 0) == pytest.approx(1.0, rel=1e-3)
    assert sup_norm(f, 2) == pytest.approx(4.0, rel=1e-3)


def test_holder_of_linear():
    spec = GridSpec(33)
    f = from_function(spec, lambda x, y: x)
    assert holder_seminorm(f, 1.0) == pytest.approx(1.0)
    # alpha < 1 picks up the largest separation
    assert holder_seminorm(f, 0.5) == pytest.approx(1.0)


def test_binary_roundtrip(tmp_path):
    spec = GridSpec(9)
    f = from_function(spec, lambda x, y: (x, y, x * y), "sym2")
    save_field(f, tmp_path / "f.nkgf")
    g = load_field(tmp_path / "f.nkgf")
    assert g.arity == "sym2" and np.array_equal(g.data, f.data)


def test_csv_roundtrip(tmp_path):
    spec = GridSpec(9)
    f = from_function(spec, lambda x, y: np.exp(x) / 3 + y, "scalar")
    save_field_csv(f, tmp_path / "f.csv")
    g = load_field_csv(tmp_path / "f.csv", "scalar")
    assert np.array_equal(g.data, f.data)


@given(
    st.floats(-2, 2),
    st.floats(-2, 2),
    st.floats(0.5, 3),
)
def test_d1_linearity_and_accuracy(a, b, k):
    spec = GridSpec(65)
    x1, x2 = spec.coords()
    f = a * np.sin(k * x1) + b * np.cos(k * x2)
    df = d1(f, 0, spec.h)
    assert np.max(np.abs(df - a * k * np.cos(k * x1))) < 1e-4 * (1 + abs(a)) * k**5
