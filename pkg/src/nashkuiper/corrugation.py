"""Nash spirals and Kuiper corrugations with exact error bookkeeping.

Both steps return the new immersion together with its gradient assembled
from the product rule (profiles differentiated exactly, base fields by
finite differences).  Differencing the new immersion directly would mix
the truncation error of a high-frequency field into every identity test.

The identities checked by ``verify_step_identity`` are algebraic once the
frame relations ``E^T dE = 0`` and ``E1^T dE2 = -E2^T dE1`` hold, which is
why the frame gradients come from ``frames.compatible_*``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NKError
from .frames import (
    compatible_frame_gradients,
    compatible_unit_gradient,
    frame_residuals,
    tangent_frame_array,
    NORMAL_TOL,
)
from .grid import GridField, check_resolution, grad
from .metric import gram, mat_to_sym, outer_sym, pullback, rank_one
from .profiles import phase

IDENTITY_TOL = 1e-9
SQRT2 = math.sqrt(2.0)


@dataclass
class StepResult:
    """Output of one Step.

    ``errors`` holds every error term already multiplied by its oscillatory
    prefactor, so ``pullback(grad_new) - pullback(grad_old)`` equals
    ``principal + sum(errors)``.  ``S`` keeps the bare principal
    oscillatory coefficients of a Kuiper step (``S1 .. S4``) for the
    cancellation module.
    """

    kind: str
    u_new: GridField
    grad_new: np.ndarray
    grad_old: np.ndarray
    principal: np.ndarray
    errors: dict[str, np.ndarray]
    S: dict[str, np.ndarray] = field(default_factory=dict)
    lam: float = float("nan")
    eta: tuple[float, float] = (1.0, 0.0)

    @property
    def spec(self):
        return self.u_new.spec

    def error_field(self, label: str) -> GridField:
        return self.u_new.with_data(self.errors[label], "sym2")

    def grad_field(self) -> GridField:
        return self.u_new.with_data(self.grad_new, "mat42")


def _axis_aligned(eta) -> bool:
    return abs(eta[0]) < 1e-14 or abs(eta[1]) < 1e-14


def _unit(eta) -> np.ndarray:
    e = np.asarray(eta, float)
    nrm = float(np.hypot(e[0], e[1]))
    if abs(nrm - 1.0) > 1e-12:
        raise NKError("config-invalid", f"direction {tuple(e)} is not a unit vector")
    return e


def _outer(v: np.ndarray, w: np.ndarray) -> np.ndarray:
    """``v (x) w`` for ``v`` of shape ``(..., 4)`` and ``w`` of shape ``(..., 2)``."""
    return v[..., :, None] * np.broadcast_to(w, v.shape[:-1] + (2,))[..., None, :]


def _sym_full(m: np.ndarray) -> np.ndarray:
    return mat_to_sym(m)


def _apply_dT(dT: np.ndarray, v: np.ndarray) -> np.ndarray:
    """``[(d1 T) v, (d2 T) v]`` for ``dT`` of shape ``(..., 4, 2, 2)`` (last axis = derivative)."""
    v = np.broadcast_to(v, dT.shape[:-3] + (2,))
    return np.matmul(v[..., None, None, :], dT)[..., 0, :]


def _vecmat(v: np.ndarray, m: np.ndarray) -> np.ndarray:
    """``v^T m`` for ``v`` of shape ``(..., k)`` and ``m`` of shape ``(..., k, j)``."""
    return np.matmul(v[..., None, :], m)[..., 0, :]


def _matvec(m: np.ndarray, v: np.ndarray) -> np.ndarray:
    v = np.broadcast_to(v, m.shape[:-2] + (m.shape[-1],))
    return np.matmul(m, v[..., None])[..., 0]


def _check_normal(du: np.ndarray, *frames: np.ndarray) -> None:
    for e in frames:
        res = frame_residuals(du, e)
        if res["normal"] > NORMAL_TOL or res["unit"] > NORMAL_TOL:
            raise NKError("frame-invariant-violated", f"step frame residuals {res}", residuals=res)


def nash_spiral_step_array(
    du: np.ndarray,
    x: np.ndarray,
    u: np.ndarray,
    e1: np.ndarray,
    e2: np.ndarray,
    a: np.ndarray,
    eta,
    lam: float,
    h: float,
    gE: tuple[np.ndarray, np.ndarray] | None = None,
    centered: bool = False,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, dict[str, np.ndarray]]:
    """Raw-array Nash spiral; returns ``(u_new, grad_new, principal, errors)``.

    ``centered=True`` uses ``cos t - 1`` in place of ``cos t``.  The
    derivatives, and hence the principal term, are unchanged, but the
    displacement stays ``O(lam)`` instead of ``O(1/lam)`` as ``lam -> 0``,
    which keeps rounding noise in the frame gradients from being amplified
    at very low frequencies.
    """
    eta = _unit(eta)
    t = lam * phase(x, eta)
    G, Gp = np.sin(t), np.cos(t)
    Gb, Gbp = np.cos(t), -np.sin(t)
    if centered:
        Gb = Gb - 1.0
    g1, g2 = gE if gE is not None else compatible_frame_gradients(e1, e2, h)
    ga = grad(a, h)

    a_ = a[..., None]
    u_new = u + (G / lam)[..., None] * a_ * e1 + (Gb / lam)[..., None] * a_ * e2
    grad_new = (
        du
        + (Gp * a)[..., None, None] * _outer(e1, eta)
        + (G / lam)[..., None, None] * (a[..., None, None] * g1 + _outer(e1, ga))
        + (Gbp * a)[..., None, None] * _outer(e2, eta)
        + (Gb / lam)[..., None, None] * (a[..., None, None] * g2 + _outer(e2, ga))
    )

    principal = (a * a)[..., None] * rank_one(eta)
    v = _vecmat(e1, g2)
    R = (
        (2.0 * G / lam * a)[..., None] * _sym_full(gram(du, g1))
        + (2.0 * Gb / lam * a)[..., None] * _sym_full(gram(du, g2))
        + (2.0 / lam * a * a)[..., None] * outer_sym(v, np.broadcast_to(eta, v.shape))
        + (G * G / lam**2 * a * a)[..., None] * _sym_full(gram(g1, g1))
        + (Gb * Gb / lam**2 * a * a)[..., None] * _sym_full(gram(g2, g2))
        + (2.0 * G * Gb / lam**2 * a * a)[..., None] * _sym_full(gram(g1, g2))
        + outer_sym(ga, ga) / lam**2
    )
    return u_new, grad_new, principal, {"R": R}


def nash_spiral_step(
    u: GridField,
    E1: GridField,
    E2: GridField,
    a: GridField,
    eta,
    lam: float,
    du: np.ndarray | None = None,
) -> StepResult:
    """``u + (sin(lam t)/lam) a E1 + (cos(lam t)/lam) a E2`` with ``t = <x, eta>``."""
    spec = u.spec
    check_resolution(spec, lam, diagonal=not _axis_aligned(eta), what="spiral frequency")
    if du is None:
        du = grad(u.data, spec.h)
    _check_normal(du, E1.data, E2.data)
    x = np.stack(spec.coords(), axis=-1)
    u_new, grad_new, principal, errors = nash_spiral_step_array(
        du, x, u.data, E1.data, E2.data, a.data, eta, lam, spec.h
    )
    return StepResult("nash", u.with_data(u_new), grad_new, du, principal, errors, lam=lam, eta=tuple(eta))


@dataclass
class KuiperParts:
    """Intermediate fields of a Kuiper step reused by callers."""

    T: np.ndarray
    dT: np.ndarray
    gE: np.ndarray


@dataclass
class KuiperPrep:
    """Fields of a Kuiper step that do not depend on the phase or on ``w``."""

    eta: np.ndarray
    a: np.ndarray
    e: np.ndarray
    du: np.ndarray
    parts: KuiperParts
    ga: np.ndarray
    Teta: np.ndarray
    dA: np.ndarray
    S: dict[str, np.ndarray]

    def rows(self, sl: slice) -> "KuiperPrep":
        """Restriction to a block of grid rows (all fields are node-wise)."""
        parts = KuiperParts(self.parts.T[sl], self.parts.dT[sl], self.parts.gE[sl])
        return KuiperPrep(
            self.eta,
            self.a[sl],
            self.e[sl],
            self.du[sl],
            parts,
            self.ga[sl],
            self.Teta[sl],
            self.dA[sl],
            {k: v[sl] for k, v in self.S.items()},
        )


def kuiper_apply_blocked(
    prep: KuiperPrep, x: np.ndarray, u: np.ndarray, lam: float, w: np.ndarray, dw: np.ndarray, block: int = 256
):
    """``kuiper_apply`` over blocks of rows; bounds the size of temporaries."""
    n = u.shape[0]
    u_new = np.empty_like(u)
    grad_new = np.empty_like(prep.du)
    principal = None
    errors: dict[str, np.ndarray] = {}
    for start in range(0, n, block):
        sl = slice(start, min(n, start + block))
        un, gn, pr, er = kuiper_apply(prep.rows(sl), x[sl], u[sl], lam, w[sl], dw[sl])
        u_new[sl] = un
        grad_new[sl] = gn
        if principal is None:
            principal = np.empty(u.shape[:2] + (3,))
            errors = {k: np.empty(u.shape[:2] + (3,)) for k in er}
        principal[sl] = pr
        for k, v in er.items():
            errors[k][sl] = v
    return u_new, grad_new, principal, errors


def kuiper_prepare(
    du: np.ndarray,
    e: np.ndarray,
    a: np.ndarray,
    eta,
    h: float,
    parts: KuiperParts | None = None,
    fault: dict[str, float] | None = None,
) -> KuiperPrep:
    """Tangent data and the principal coefficients ``S1 .. S4``."""
    eta = _unit(eta)
    if parts is None:
        T = tangent_frame_array(du)
        parts = KuiperParts(T, grad(T, h), compatible_unit_gradient(e, h))
    T, dT, gE = parts.T, parts.dT, parts.gE
    ga = grad(a, h)
    a2 = a * a
    Teta = _matvec(T, eta)
    dA = 2.0 * _outer(Teta, a[..., None] * ga) + a2[..., None, None] * _apply_dT(dT, eta)
    eta_b = np.broadcast_to(eta, ga.shape)
    S = {
        "S1": outer_sym(ga, ga),
        "S2": 2.0 * a[..., None] * outer_sym(ga, eta_b),
        "S3": 2.0 * a[..., None] * _sym_full(gram(du, gE)),
        "S4": 2.0 * _sym_full(gram(du, dA)),
    }
    if fault:
        S = {k: v * fault.get(k, 1.0) for k, v in S.items()}
    return KuiperPrep(eta, a, e, du, parts, ga, Teta, dA, S)


def kuiper_apply(prep: KuiperPrep, x: np.ndarray, u: np.ndarray, lam: float, w: np.ndarray, dw: np.ndarray):
    """Corrugate with frequency ``lam`` and tangential field ``w`` (gradient ``dw``).

    Returns ``(u_new, grad_new, principal, errors)``.
    """
    eta, a, e, du = prep.eta, prep.a, prep.e, prep.du
    T, dT, gE = prep.parts.T, prep.parts.dT, prep.parts.gE
    ga, Teta, dA, S = prep.ga, prep.Teta, prep.dA, prep.S
    t = lam * phase(x, eta)
    s1, c1 = np.sin(t), np.cos(t)
    s2, c2 = np.sin(2.0 * t), np.cos(2.0 * t)
    G, Gp = SQRT2 * s1, SQRT2 * c1
    Gb, Gbp = -0.25 * s2, -0.5 * c2

    a2 = a * a
    A = a2[..., None] * Teta
    Tw = _matvec(T, w)
    dTw_part = _apply_dT(dT, w)
    dTw = np.matmul(T, dw) + dTw_part
    daE = a[..., None, None] * gE + _outer(e, ga)

    u_new = u + (G / lam * a)[..., None] * e + (Gb / lam)[..., None] * A + Tw
    grad_new = (
        du
        + (a * Gp)[..., None, None] * _outer(e, eta)
        + (a2 * Gbp)[..., None, None] * _outer(Teta, eta)
        + dTw
        + (G / lam)[..., None, None] * daE
        + (Gb / lam)[..., None, None] * dA
    )

    eta_b = np.broadcast_to(eta, ga.shape)
    principal = a2[..., None] * rank_one(eta)
    EdA = _vecmat(e, dA)
    TeGE = _vecmat(Teta, gE)
    TedA = _vecmat(Teta, dA)
    R1 = (
        (Gbp**2 * a2 * a2 * np.einsum("...k,...k->...", Teta, Teta))[..., None] * rank_one(eta)
        + (2.0 * Gp * Gb / lam * a)[..., None] * outer_sym(eta_b, EdA)
        + (2.0 * G * Gbp / lam * a2 * a)[..., None] * outer_sym(eta_b, TeGE)
        + (2.0 * Gb * Gbp / lam * a2)[..., None] * outer_sym(eta_b, TedA)
        + (G * G / lam**2 * a2)[..., None] * _sym_full(gram(gE, gE))
        + (2.0 * G * Gb / lam**2)[..., None] * _sym_full(gram(daE, dA))
        + (Gb * Gb / lam**2)[..., None] * _sym_full(gram(dA, dA))
    )
    EdTw = _vecmat(e, dTw)
    TedTw = _vecmat(Teta, dTw)
    R2 = (
        2.0 * _sym_full(gram(du, dTw_part))
        + (2.0 * Gp * a)[..., None] * outer_sym(eta_b, EdTw)
        + (2.0 * Gbp * a2)[..., None] * outer_sym(eta_b, TedTw)
        + _sym_full(gram(dTw, dTw))
        + (2.0 * G / lam)[..., None] * _sym_full(gram(daE, dTw))
        + (2.0 * Gb / lam)[..., None] * _sym_full(gram(dA, dTw))
    )
    errors = {
        "nabla_term": S["S1"] / lam**2,
        "S1": ((G * G - 1.0) / lam**2)[..., None] * S["S1"],
        "S2": (G * Gp / lam)[..., None] * S["S2"],
        "S3": (G / lam)[..., None] * S["S3"],
        "S4": (Gb / lam)[..., None] * S["S4"],
        "sym_grad_w": 2.0 * mat_to_sym(dw),
        "R1": R1,
        "R2": R2,
    }
    return u_new, grad_new, principal, errors


def kuiper_step_array(
    du: np.ndarray,
    x: np.ndarray,
    u: np.ndarray,
    e: np.ndarray,
    a: np.ndarray,
    eta,
    lam: float,
    w: np.ndarray,
    h: float,
    parts: KuiperParts | None = None,
    dw: np.ndarray | None = None,
    fault: dict[str, float] | None = None,
):
    """Raw-array Kuiper corrugation.

    Returns ``(u_new, grad_new, principal, errors, S, parts)``.  ``dw`` may
    supply an exact gradient of ``w``; by default it is differenced.
    """
    prep = kuiper_prepare(du, e, a, eta, h, parts, fault)
    if dw is None:
        dw = grad(w, h)
    u_new, grad_new, principal, errors = kuiper_apply(prep, x, u, lam, w, dw)
    return u_new, grad_new, principal, errors, prep.S, prep.parts


def kuiper_step(
    u: GridField,
    E: GridField,
    a: GridField,
    eta,
    lam: float,
    w: GridField | None = None,
    du: np.ndarray | None = None,
    fault: dict[str, float] | None = None,
) -> StepResult:
    """``u + (Gamma(lam t)/lam) a E + T_u((Gammabar(lam t)/lam) a^2 eta + w)``.

    ``Gamma = sqrt2 sin`` and ``Gammabar = -sin(2t)/4``.  ``fault`` scales
    named ``S`` terms in the reported bookkeeping (a test hook; the new
    immersion itself is unaffected).
    """
    spec = u.spec
    check_resolution(spec, lam, diagonal=not _axis_aligned(eta), what="corrugation frequency")
    if du is None:
        du = grad(u.data, spec.h)
    _check_normal(du, E.data)
    wd = np.zeros((spec.n, spec.n, 2)) if w is None else w.require_finite().data
    x = np.stack(spec.coords(), axis=-1)
    u_new, grad_new, principal, errors, S, _ = kuiper_step_array(
        du, x, u.data, E.data, a.data, eta, lam, wd, spec.h, fault=fault
    )
    return StepResult("kuiper", u.with_data(u_new), grad_new, du, principal, errors, S, lam, tuple(eta))


def verify_step_identity(result: StepResult, tol: float = IDENTITY_TOL) -> dict:
    """Residual of ``pullback(new) - pullback(old) = principal + sum(errors)``.

    The residual is a max-entry norm divided by ``max|principal|`` (or by 1
    when the principal term vanishes).
    """
    lhs = pullback(result.grad_new) - pullback(result.grad_old)
    rhs = result.principal + sum(result.errors.values())
    scale = float(np.max(np.abs(result.principal)))
    scale = scale if scale > 0.0 else 1.0
    residual = float(np.max(np.abs(lhs - rhs))) / scale
    return {
        "kind": result.kind,
        "residual": residual,
        "scale": scale,
        "passed": bool(residual <= tol),
        "terms": {k: float(np.max(np.abs(v))) for k, v in result.errors.items()},
    }
