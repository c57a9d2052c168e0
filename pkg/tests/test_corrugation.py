from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nashkuiper.corrugation import kuiper_step, nash_spiral_step, nash_spiral_step_array, verify_step_identity
from nashkuiper.errors import NKError
from nashkuiper.frames import initial_normal_frame
from nashkuiper.grid import GridSpec, from_function, grad

SPEC = GridSpec(129)


def base_map(c):
    return from_function(
        SPEC,
        lambda x, y: (x + c * y * y, y, c * np.sin(2 * x + y), 0.5 * c * np.cos(x - 2 * y)),
        "vec4",
    )


def amplitude(c):
    return from_function(SPEC, lambda x, y: 0.3 + 0.1 * np.sin(3 * x + c) * np.cos(2 * y))


def setup(c):
    u = base_map(c)
    du = grad(u.data, SPEC.h)
    E1, E2 = initial_normal_frame(u, du)
    return u, du, E1, E2


directions = st.sampled_from([(1.0, 0.0), (0.0, 1.0), (2**-0.5, 2**-0.5), (0.6, 0.8)])


@settings(max_examples=10)
@given(st.floats(-0.3, 0.3), directions, st.floats(4.0, 17.0))
def test_nash_identity(c, eta, lam):
    u, du, E1, E2 = setup(c)
    res = nash_spiral_step(u, E1, E2, amplitude(c), eta, lam, du=du)
    rep = verify_step_identity(res)
    assert rep["passed"] and rep["residual"] < 1e-12


@settings(max_examples=10)
@given(st.floats(-0.3, 0.3), directions, st.floats(4.0, 17.0))
def test_kuiper_identity(c, eta, lam):
    u, du, E1, _ = setup(c)
    w = from_function(SPEC, lambda x, y: (0.01 * np.sin(x * y), 0.02 * x), "vec2")
    res = kuiper_step(u, E1, amplitude(c), eta, lam, w=w, du=du)
    rep = verify_step_identity(res)
    assert rep["passed"] and rep["residual"] < 1e-12
    assert set(res.S) == {"S1", "S2", "S3", "S4"}


def test_nash_principal_is_rank_one():
    u, du, E1, E2 = setup(0.1)
    res = nash_spiral_step(u, E1, E2, amplitude(0.0), (1.0, 0.0), 10.0, du=du)
    np.testing.assert_allclose(res.principal[..., 1:], 0.0)
    np.testing.assert_allclose(res.principal[..., 0], amplitude(0.0).data ** 2)


def test_error_terms_shrink_with_frequency():
    u, du, E1, E2 = setup(0.2)
    a = amplitude(0.1)
    low = verify_step_identity(nash_spiral_step(u, E1, E2, a, (1.0, 0.0), 5.0, du=du))["terms"]["R"]
    high = verify_step_identity(nash_spiral_step(u, E1, E2, a, (1.0, 0.0), 20.0, du=du))["terms"]["R"]
    assert high < low / 2.5


def test_fault_is_detected():
    u, du, E1, _ = setup(0.1)
    res = kuiper_step(u, E1, amplitude(0.2), (1.0, 0.0), 12.0, du=du, fault={"S3": 1.01})
    assert not verify_step_identity(res)["passed"]


def test_underresolved_frequency():
    u, du, E1, E2 = setup(0.0)
    with pytest.raises(NKError) as e:
        nash_spiral_step(u, E1, E2, amplitude(0.0), (1.0, 0.0), 100.0, du=du)
    assert e.value.code == "grid-underresolved"


def test_non_unit_direction():
    u, du, E1, E2 = setup(0.0)
    with pytest.raises(NKError):
        nash_spiral_step(u, E1, E2, amplitude(0.0), (1.0, 1.0), 5.0, du=du)


def test_bad_frame_rejected():
    u, du, E1, E2 = setup(0.1)
    with pytest.raises(NKError) as e:
        nash_spiral_step(u, E1.with_data(E1.data * 1.1), E2, amplitude(0.0), (1.0, 0.0), 5.0, du=du)
    assert e.value.code == "frame-invariant-violated"


def test_centered_profile_same_gradient():
    u, du, E1, E2 = setup(0.1)
    x = np.stack(SPEC.coords(), axis=-1)
    a = amplitude(0.0).data
    plain = nash_spiral_step_array(du, x, u.data, E1.data, E2.data, a, (1.0, 0.0), 3.0, SPEC.h)
    cent = nash_spiral_step_array(du, x, u.data, E1.data, E2.data, a, (1.0, 0.0), 3.0, SPEC.h, centered=True)
    np.testing.assert_allclose(cent[2], plain[2])
    # the centered displacement vanishes where the phase does
    assert np.max(np.abs(cent[0][0] - u.data[0])) < 1e-15
