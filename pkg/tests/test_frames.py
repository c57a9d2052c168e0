from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from nashkuiper.errors import NKError
from nashkuiper.frames import (
    ImmersionState,
    check_frame,
    compatible_frame_gradients,
    compatible_unit_gradient,
    frame_residuals,
    initial_normal_frame,
    normal_projection_apply,
    propagate_frame,
    propagate_frame_array,
    tangent_frame,
    tangent_frame_array,
)
from nashkuiper.grid import GridSpec, from_function, grad


def graph(spec, a=0.1, b=0.05):
    return from_function(spec, lambda x, y: (x, y, a * np.sin(2 * x) * y, b * np.cos(3 * y) + a * x * y), "vec4")


def test_tangent_frame_is_dual():
    spec = GridSpec(33)
    u = graph(spec)
    du = grad(u.data, spec.h)
    T = tangent_frame(u, du).data
    prod = np.matmul(np.swapaxes(du, -1, -2), T)
    np.testing.assert_allclose(prod, np.broadcast_to(np.eye(2), prod.shape), atol=1e-12)


def test_normal_projection_kills_tangents():
    spec = GridSpec(17)
    du = grad(graph(spec).data, spec.h)
    v = normal_projection_apply(du, du[..., :, 0])
    assert np.max(np.abs(v)) < 1e-12


@given(st.floats(-0.3, 0.3), st.floats(-0.3, 0.3))
def test_initial_frame_invariants(a, b):
    spec = GridSpec(17)
    u = graph(spec, a, b)
    du = grad(u.data, spec.h)
    E1, E2 = initial_normal_frame(u, du)
    res = check_frame(du, E1.data, E2.data)
    assert res["normal"] < 1e-12 and res["orthogonal"] < 1e-12 and res["unit"] < 1e-12


def test_initial_frame_degenerate():
    spec = GridSpec(9)
    # the image contains the e3 direction, so e3 cannot be projected
    u = from_function(spec, lambda x, y: (0 * x, y, x, 0 * x), "vec4")
    with pytest.raises(NKError) as e:
        initial_normal_frame(u)
    assert e.value.code == "frame-degenerate"


def test_singular_gram():
    du = np.zeros((2, 2, 4, 2))
    du[..., 0, 0] = 1.0
    du[..., 0, 1] = 1.0
    with pytest.raises(NKError) as e:
        tangent_frame_array(du)
    assert e.value.code == "degenerate-immersion"


def test_propagation_keeps_invariants_and_tracks_gap():
    spec = GridSpec(33)
    u = graph(spec)
    v = graph(spec, 0.12, 0.04)
    E1, E2 = initial_normal_frame(u)
    F1, F2 = propagate_frame(u, v, E1, E2, rho=0.5)
    dv = grad(v.data, spec.h)
    res = frame_residuals(dv, F1.data, F2.data)
    assert max(res.values()) < 1e-12
    # the carried frame stays close to the old one
    gap = np.max(np.abs(grad(v.data, spec.h) - grad(u.data, spec.h)))
    assert np.max(np.abs(F1.data - E1.data)) < 10 * gap


def test_propagation_rejects_far_maps():
    spec = GridSpec(17)
    du = grad(graph(spec).data, spec.h)
    dv = 2.0 * du
    E1, E2 = initial_normal_frame(graph(spec), du)
    with pytest.raises(NKError) as e:
        propagate_frame_array(du, dv, E1.data, E2.data, rho=0.1)
    assert e.value.code == "frames-too-far"


def test_compatible_gradients_identities():
    spec = GridSpec(33)
    u = graph(spec, 0.25, 0.2)
    E1, E2 = initial_normal_frame(u)
    g1, g2 = compatible_frame_gradients(E1.data, E2.data, spec.h)

    def vt(e, g):
        return np.einsum("...k,...kj->...j", e, g)

    assert np.max(np.abs(vt(E1.data, g1))) < 1e-13
    assert np.max(np.abs(vt(E2.data, g2))) < 1e-13
    assert np.max(np.abs(vt(E1.data, g2) + vt(E2.data, g1))) < 1e-13
    # the correction is of truncation size
    assert np.max(np.abs(g1 - grad(E1.data, spec.h))) < 1e-4
    gu = compatible_unit_gradient(E1.data, spec.h)
    assert np.max(np.abs(vt(E1.data, gu))) < 1e-13


def test_state_from_immersion():
    spec = GridSpec(17)
    state = ImmersionState.from_immersion(graph(spec), delta=0.1)
    assert max(state.residuals().values()) < 1e-12
    assert state.spec == spec
    assert state.evolve(delta=0.05).delta == 0.05
    assert state.tangent().shape == (17, 17, 4, 2)
