from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from nashkuiper.errors import NKError
from nashkuiper.grid import GridSpec, from_function, grad
from nashkuiper.metric import (
    DIRECTIONS,
    H0,
    SymMat2,
    abar_decompose,
    abar_reconstruct,
    defect,
    gauss_curvature,
    immersion_bounds_check,
    mat_to_sym,
    outer_sym,
    pou_decompose,
    pullback,
    r0_constant,
    r0_corner_search,
    rank_one,
    sym_eigenvalues,
    sym_field,
    sym_to_mat,
)

entries = st.floats(-3, 3, allow_nan=False)


def test_h0_is_sum_of_rank_ones():
    total = sum(rank_one(e) for e in DIRECTIONS.etas)
    np.testing.assert_allclose(total, H0.as_array(), atol=1e-15)
    assert H0.max_entry() == 1.5


@given(entries, entries, entries)
def test_abar_roundtrip(a, b, c):
    H = np.array([a, b, c])
    np.testing.assert_allclose(abar_reconstruct(*abar_decompose(H)), H, atol=1e-12)


def test_abar_of_h0_is_ones():
    assert abar_decompose(H0) == (1.0, 1.0, 1.0)


def test_r0_ball():
    r0 = r0_constant()
    rep = r0_corner_search(r0)
    assert rep["corners"] == 64 and rep["ok"]
    # on the vertices the deviation is exactly twice the radius
    assert rep["max_deviation"] == pytest.approx(2 * r0, abs=1e-15)
    assert not r0_corner_search(1.01 * r0)["ok"]


@given(entries, entries, entries)
def test_sym_mat_roundtrip(a, b, c):
    s = np.array([a, b, c])
    np.testing.assert_array_equal(mat_to_sym(sym_to_mat(s)), s)
    lo, hi = sym_eigenvalues(s)
    ev = np.linalg.eigvalsh(sym_to_mat(s))
    np.testing.assert_allclose([lo, hi], ev, atol=1e-12)


def test_symmat_algebra():
    A = SymMat2(2.0, 0.5, 1.0)
    B = SymMat2.from_matrix([[1.0, 0.2], [0.4, 3.0]])
    assert B.a12 == pytest.approx(0.3)
    assert (A + B - B) == A
    assert (2 * A).a22 == 2.0
    assert A.is_positive_definite()
    assert not SymMat2(1, 2, 1).is_positive_definite()


@given(st.floats(-2, 2), st.floats(-2, 2))
def test_outer_sym_symmetric(p0, p1):
    p = np.array([p0, p1])
    q = np.array([p1 + 0.3, -p0])
    np.testing.assert_allclose(outer_sym(p, q), outer_sym(q, p))
    np.testing.assert_allclose(outer_sym(p, p), rank_one(p))


def test_pullback_of_isometry():
    du = np.zeros((2, 2, 4, 2))
    du[..., 0, 0] = 1.0
    du[..., 2, 1] = 1.0
    np.testing.assert_allclose(pullback(du), np.broadcast_to([1.0, 0.0, 1.0], (2, 2, 3)))


def test_defect_of_flat_map():
    spec = GridSpec(17)
    u = from_function(spec, lambda x, y: (0.5 * x, 0.5 * y, 0 * x, 0 * x), "vec4")
    g = sym_field(spec, [1.0, 0.0, 1.0])
    d = defect(g, u)
    np.testing.assert_allclose(d.data, np.broadcast_to([0.75, 0.0, 0.75], d.data.shape), atol=1e-12)
    with pytest.raises(NKError):
        defect(g, from_function(GridSpec(9), lambda x, y: (x, y, x, y), "vec4"))


def test_gauss_curvature_flat_and_sphere_like():
    spec = GridSpec(65)
    g = sym_field(spec, [1.0, 0.0, 1.0])
    assert np.max(np.abs(gauss_curvature(g).data)) < 1e-12
    bad = sym_field(spec, [1.0, 2.0, 1.0])
    with pytest.raises(NKError) as e:
        gauss_curvature(bad)
    assert e.value.code == "degenerate-metric"


def test_bounds_check():
    spec = GridSpec(17)
    u = from_function(spec, lambda x, y: (0.5 * x, 0.5 * y, 0 * x, 0 * x), "vec4")
    rep = immersion_bounds_check(u, 5.0)
    assert rep.passed and rep.min_eigenvalue == pytest.approx(0.25)
    with pytest.raises(NKError) as e:
        immersion_bounds_check(u, 3.0)
    assert e.value.code == "immersion-bounds-violated"
    assert not immersion_bounds_check(u, 3.0, raise_on_fail=False).passed


def test_pou_decomposition_reconstructs():
    spec = GridSpec(33)
    H = from_function(
        spec,
        lambda x, y: (1.5 + 0.3 * np.sin(3 * x), 0.4 * np.cos(2 * y), 1.2 + 0.2 * x * y),
        "sym2",
    )
    res = pou_decompose(H, (0.5, 2.5))
    recon = sum(phi.data[..., None] ** 2 * rank_one(eta) for phi, eta in res)
    assert np.max(np.abs(recon - H.data)) < 1e-12
    assert res.residual < 1e-12
    assert all((phi.data >= 0).all() for phi, _ in res)
    merged = pou_decompose(H, (0.5, 2.5), merge=True)
    assert len(merged) <= 8 and merged.residual < 1e-12


def test_pou_rejects_outside():
    spec = GridSpec(9)
    H = sym_field(spec, [1.0, 0.0, 1.0])
    with pytest.raises(NKError) as e:
        pou_decompose(H, (1.5, 2.0))
    assert e.value.code == "outside-compact-cone"


def test_pullback_matches_fd_gradient():
    spec = GridSpec(33)
    u = from_function(spec, lambda x, y: (x, y, 0.1 * x * y, 0.05 * x * x), "vec4")
    du = grad(u.data, spec.h)
    P = pullback(du)
    x, y = spec.coords()
    expected_11 = 1 + (0.1 * y) ** 2 + (0.1 * x) ** 2
    assert np.max(np.abs(P[..., 0] - expected_11)) < 1e-10
