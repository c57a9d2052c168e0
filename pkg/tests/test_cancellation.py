from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nashkuiper.cancellation import (
    DIRECTION_VECTORS,
    RESIDUAL_VECTORS,
    build_w_field,
    build_w_field_array,
    closed_form_coefficients,
    ibp_coefficients,
    ibp_reconstruct,
    split_sym,
)
from nashkuiper.errors import NKError
from nashkuiper.grid import GridSpec, from_function
from nashkuiper.metric import outer_sym, rank_one
from nashkuiper.profiles import build_tower

directions = st.sampled_from(sorted(DIRECTION_VECTORS))


def smooth_H(spec, c=0.0):
    return from_function(
        spec,
        lambda x, y: (np.sin(2 * x + c) * y, np.cos(x * y + c), 0.5 + x * np.exp(-y)),
        "sym2",
    )


@given(directions, st.floats(-3, 3), st.floats(-3, 3), st.floats(-3, 3))
def test_split_reconstructs(direction, a, b, c):
    M = np.array([a, b, c])
    L, P = split_sym(M, direction)
    eta = np.array(DIRECTION_VECTORS[direction])
    recon = outer_sym(L, eta) + P * rank_one(RESIDUAL_VECTORS[direction])
    np.testing.assert_allclose(recon, M, atol=1e-12)


@pytest.mark.parametrize("direction", sorted(DIRECTION_VECTORS))
def test_recursion_matches_closed_form(direction):
    spec = GridSpec(65)
    H = smooth_H(spec, 0.3)
    a = ibp_coefficients(H, direction, 3)
    b = closed_form_coefficients(H, direction, 3)
    for i in range(4):
        scale = 1 + np.max(np.abs(a.L[i]))
        assert np.max(np.abs(a.L[i] - b.L[i])) < 1e-9 * scale
        assert np.max(np.abs(a.P[i] - b.P[i])) < 1e-9 * scale


@settings(max_examples=8)
@given(directions, st.integers(0, 4), st.floats(-1, 1))
def test_reconstruction_to_rounding(direction, k, c):
    spec = GridSpec(129)
    tower = build_tower("kuiper_gamma", k + 1)
    rep = ibp_reconstruct(smooth_H(spec, c), direction, k, tower, 8.0)
    assert rep["relative_residual"] < 1e-12


def test_remainder_decays_with_depth():
    spec = GridSpec(257)
    H = smooth_H(spec)
    norms = [
        ibp_reconstruct(H, "eta1", k, build_tower("kuiper_gamma", k + 1), 20.0)["remainder_norm"] for k in range(4)
    ]
    assert all(b < a for a, b in zip(norms, norms[1:]))


def test_depth_budget():
    spec = GridSpec(33, max_deriv=3)
    with pytest.raises(NKError) as e:
        ibp_coefficients(smooth_H(spec), "eta1", 3)
    assert e.value.code == "derivative-depth-exceeded"


def test_unknown_direction():
    with pytest.raises(NKError):
        ibp_coefficients(smooth_H(GridSpec(17)), "eta4", 1)


def test_w_field_contract_and_blocking():
    spec = GridSpec(129)
    S = {k: smooth_H(spec, 0.2 * i).data for i, k in enumerate(("S1", "S2", "S3", "S4"))}
    x = np.stack(spec.coords(), axis=-1)
    t = x[..., 0]
    full = build_w_field_array(S, 12.0, 2, "eta1", t, spec.h, spec.max_deriv)
    blocked = build_w_field_array(S, 12.0, 2, "eta1", t, spec.h, spec.max_deriv, block=23)
    for name in ("W", "grad_W", "G", "Gcal"):
        np.testing.assert_array_equal(getattr(full, name), getattr(blocked, name))
    W, G, Gcal = build_w_field({k: smooth_H(spec, 0.2 * i) for i, k in enumerate(S)}, 12.0, 2, "eta1")
    np.testing.assert_array_equal(W.data, full.W)
    assert G.arity == "scalar" and Gcal.arity == "sym2"
