"""Tangent and normal frames of immersions of the square into R^4."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import NKError
from .grid import GridField, grad
from .metric import sym_det

# tolerances of the frame invariants
NORMAL_TOL = 1e-8
ORTHO_TOL = 1e-10
# thresholds for the explicit constructions
INITIAL_FLOOR = 0.1
PROPAGATION_FLOOR = 0.25
DEFAULT_RHO = 0.2


def _inverse_gram(du: np.ndarray) -> np.ndarray:
    """``((grad u)^T grad u)^{-1}`` as a full ``(..., 2, 2)`` array."""
    g11 = _dot(du[..., 0], du[..., 0])
    g12 = _dot(du[..., 0], du[..., 1])
    g22 = _dot(du[..., 1], du[..., 1])
    det = g11 * g22 - g12**2
    scale = np.maximum(np.abs(g11), np.abs(g22))
    if not (det > 1e-14 * scale**2).all():
        bad = np.argwhere(~(det > 1e-14 * scale**2))[0]
        raise NKError("degenerate-immersion", f"singular pullback metric at node ({bad[0]},{bad[1]})")
    inv = np.empty(det.shape + (2, 2))
    inv[..., 0, 0] = g22 / det
    inv[..., 0, 1] = inv[..., 1, 0] = -g12 / det
    inv[..., 1, 1] = g11 / det
    return inv


def tangent_frame_array(du: np.ndarray) -> np.ndarray:
    """``T_u = grad u ((grad u)^T grad u)^{-1}`` for a raw gradient array."""
    return np.matmul(du, _inverse_gram(du))


def tangent_frame(u: GridField, du: np.ndarray | None = None) -> GridField:
    """Tangent field ``T_u`` as a ``mat42`` field; ``(grad u)^T T_u = Id``."""
    if du is None:
        du = grad(u.data, u.spec.h)
    return u.with_data(tangent_frame_array(du), "mat42")


def _vt_m(v: np.ndarray, m: np.ndarray) -> np.ndarray:
    """``v^T m`` node-wise for ``v (..., k)`` and ``m (..., k, j)``."""
    return np.matmul(v[..., None, :], m)[..., 0, :]


def _m_v(m: np.ndarray, v: np.ndarray) -> np.ndarray:
    """``m v`` node-wise."""
    return np.matmul(m, v[..., None])[..., 0]


def _dot(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return (a * b).sum(axis=-1)


def _normalize(v: np.ndarray, floor: float, code: str, what: str) -> np.ndarray:
    norm = np.sqrt(_dot(v, v))
    if not (norm >= floor).all():
        i, j = np.unravel_index(int(np.argmin(norm)), norm.shape)
        raise NKError(code, f"{what}: norm {norm[i, j]:.4g} < {floor} at node ({i},{j})", node=(int(i), int(j)))
    return v / norm[..., None]


def normal_projection_apply(du: np.ndarray, xi: np.ndarray) -> np.ndarray:
    """``(Id - grad u G^{-1} grad u^T) xi`` node-wise."""
    T = tangent_frame_array(du)
    coeff = _vt_m(np.broadcast_to(xi, du.shape[:-1]), du)
    return xi - _m_v(T, coeff)


def initial_normal_frame(u: GridField, du: np.ndarray | None = None) -> tuple[GridField, GridField]:
    """Project ``e3, e4`` onto the normal space and orthonormalize."""
    if du is None:
        du = grad(u.data, u.spec.h)
    xi1 = np.array([0.0, 0.0, 1.0, 0.0])
    xi2 = np.array([0.0, 0.0, 0.0, 1.0])
    nu1 = normal_projection_apply(du, xi1)
    e1 = _normalize(nu1, INITIAL_FLOOR, "frame-degenerate", "projected e3")
    nu2 = normal_projection_apply(du, xi2)
    nu2 = nu2 - _dot(e1, nu2)[..., None] * e1
    e2 = _normalize(nu2, INITIAL_FLOOR, "frame-degenerate", "projected e4 after Gram-Schmidt")
    return u.with_data(e1), u.with_data(e2)


def propagate_frame_array(
    du: np.ndarray, dv: np.ndarray, e1: np.ndarray, e2: np.ndarray, rho: float = DEFAULT_RHO
) -> tuple[np.ndarray, np.ndarray, float]:
    """Carry the normal frame of ``u`` to ``v``; also returns ``|grad v - grad u|_0``."""
    gap = float(np.max(np.abs(dv - du)))
    if gap > rho:
        raise NKError("frames-too-far", f"|grad v - grad u|_0 = {gap:.4g} exceeds rho = {rho}", gap=gap)
    Tv = tangent_frame_array(dv)
    diff = dv - du

    def carry(e: np.ndarray) -> np.ndarray:
        c = _vt_m(e, diff)
        return e - _m_v(Tv, c)

    n1 = _normalize(carry(e1), PROPAGATION_FLOOR, "propagation-degenerate", "carried E1")
    nu2 = carry(e2)
    nu2 = nu2 - _dot(n1, nu2)[..., None] * n1
    n2 = _normalize(nu2, PROPAGATION_FLOOR, "propagation-degenerate", "carried E2")
    return n1, n2, gap


def propagate_frame(
    u: GridField,
    v: GridField,
    E1: GridField,
    E2: GridField,
    rho: float = DEFAULT_RHO,
    du: np.ndarray | None = None,
    dv: np.ndarray | None = None,
) -> tuple[GridField, GridField]:
    """Normal frame of ``v`` obtained from the frame of a nearby ``u``."""
    if du is None:
        du = grad(u.data, u.spec.h)
    if dv is None:
        dv = grad(v.data, v.spec.h)
    n1, n2, _ = propagate_frame_array(du, dv, E1.data, E2.data, rho)
    return v.with_data(n1), v.with_data(n2)


def frame_residuals(du: np.ndarray, e1: np.ndarray, e2: np.ndarray | None = None) -> dict[str, float]:
    """Normality, unit-length and orthogonality defects of a frame."""
    frames = [e1] if e2 is None else [e1, e2]
    normal = max(float(np.max(np.abs(_vt_m(e, du)))) for e in frames)
    unit = max(float(np.max(np.abs(np.sqrt(_dot(e, e)) - 1.0))) for e in frames)
    ortho = 0.0 if e2 is None else float(np.max(np.abs(_dot(e1, e2))))
    return {"normal": normal, "unit": unit, "orthogonal": ortho}


def check_frame(du: np.ndarray, e1: np.ndarray, e2: np.ndarray, where: str = "") -> dict[str, float]:
    res = frame_residuals(du, e1, e2)
    if res["normal"] > NORMAL_TOL or res["unit"] > ORTHO_TOL or res["orthogonal"] > ORTHO_TOL:
        raise NKError("frame-invariant-violated", f"{where} {res}", residuals=res)
    return res


def compatible_frame_gradients(e1: np.ndarray, e2: np.ndarray, h: float) -> tuple[np.ndarray, np.ndarray]:
    """Finite-difference gradients of an orthonormal pair, made consistent.

    Differentiating ``|E|^2 = 1`` and ``<E1, E2> = 0`` gives
    ``E^T dE = 0`` and ``E1^T dE2 = -E2^T dE1``.  Finite differences break
    these relations at truncation order; the components that violate them
    are removed so that algebraic identities built on the frame hold to
    rounding.  The correction is of the size of the truncation error.
    """
    g1 = grad(e1, h)
    g2 = grad(e2, h)
    c11 = _vt_m(e1, g1)
    c22 = _vt_m(e2, g2)
    c12 = _vt_m(e2, g1)
    c21 = _vt_m(e1, g2)
    avg = 0.5 * (c12 + c21)
    g1 = g1 - e1[..., :, None] * c11[..., None, :] - e2[..., :, None] * avg[..., None, :]
    g2 = g2 - e2[..., :, None] * c22[..., None, :] - e1[..., :, None] * avg[..., None, :]
    return g1, g2


def compatible_unit_gradient(e: np.ndarray, h: float) -> np.ndarray:
    """Finite-difference gradient of a unit field with ``E^T dE = 0`` enforced."""
    g = grad(e, h)
    c = _vt_m(e, g)
    return g - e[..., :, None] * c[..., None, :]


@dataclass
class ImmersionState:
    """An immersion with its normal frame, assembled gradient and scales."""

    u: GridField
    E1: GridField
    E2: GridField
    du: np.ndarray
    delta: float = float("nan")
    mu: float = float("nan")
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_immersion(cls, u: GridField, delta: float = float("nan"), mu: float = float("nan")) -> "ImmersionState":
        du = grad(u.data, u.spec.h)
        E1, E2 = initial_normal_frame(u, du)
        return cls(u, E1, E2, du, delta, mu)

    @property
    def spec(self):
        return self.u.spec

    def residuals(self) -> dict[str, float]:
        return frame_residuals(self.du, self.E1.data, self.E2.data)

    def tangent(self) -> np.ndarray:
        return tangent_frame_array(self.du)

    def evolve(self, **changes) -> "ImmersionState":
        return replace(self, **changes)


def metric_determinant(du: np.ndarray) -> np.ndarray:
    from .metric import pullback

    return sym_det(pullback(du))
