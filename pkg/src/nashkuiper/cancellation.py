"""Oscillatory defect cancellation by repeated integration by parts.

For a direction ``eta`` in ``{e1, (e1+e2)/sqrt2, e2}`` and a profile
tower ``Gamma_i`` with ``Gamma_{i+1}' = Gamma_i``,

    Gamma_0(lam t)/lam H
        = (-1)^{k+1} Gamma_{k+1}(lam t)/lam^{k+2} sym grad L_k
          + sym grad( sum_i (-1)^i Gamma_{i+1}(lam t)/lam^{i+2} L_i )
          + ( sum_i (-1)^i Gamma_i(lam t)/lam^{i+1} P_i ) r (x) r,

where ``t = <x, eta>`` and ``r`` is ``e2`` for the first two directions
and ``e1`` for the third.  The coefficients satisfy

    H = sym(L_0 (x) eta) + P_0 r (x) r,
    sym grad L_i = sym(L_{i+1} (x) eta) + P_{i+1} r (x) r,

and are generated here by that recursion, so the discrete identity holds
to rounding.  ``closed_form_coefficients`` gives the explicit formulas as
an independent cross-check.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import NKError
from .grid import GridField, dmulti, grad
from .metric import mat_to_sym
from .profiles import ProfileTower, build_tower, phase

SQRT2 = math.sqrt(2.0)

DIRECTION_VECTORS = {
    "eta1": (1.0, 0.0),
    "eta2": (1.0 / SQRT2, 1.0 / SQRT2),
    "eta3": (0.0, 1.0),
}
RESIDUAL_VECTORS = {"eta1": (0.0, 1.0), "eta2": (0.0, 1.0), "eta3": (1.0, 0.0)}

# profile kind and power of 1/lam for each principal Kuiper term
S_PROFILES = {
    "S1": ("kuiper_ddbar", 2),
    "S2": ("product_gammagammaprime", 1),
    "S3": ("kuiper_gamma", 1),
    "S4": ("kuiper_gammabar", 1),
}


def _check_direction(direction: str) -> None:
    if direction not in DIRECTION_VECTORS:
        raise NKError("config-invalid", f"direction must be one of {tuple(DIRECTION_VECTORS)}, got {direction!r}")


def split_sym(M: np.ndarray, direction: str) -> tuple[np.ndarray, np.ndarray]:
    """Write ``M = sym(L (x) eta) + P r (x) r``; returns ``(L, P)``."""
    m11, m12, m22 = M[..., 0], M[..., 1], M[..., 2]
    if direction == "eta1":
        L = np.stack([m11, 2.0 * m12], axis=-1)
        P = m22
    elif direction == "eta3":
        L = np.stack([2.0 * m12, m22], axis=-1)
        P = m11
    elif direction == "eta2":
        L = SQRT2 * np.stack([m11, 2.0 * m12 - m11], axis=-1)
        P = m22 - 2.0 * m12 + m11
    else:
        _check_direction(direction)
    return L, P


def _sym_grad(L: np.ndarray, h: float) -> np.ndarray:
    """``sym grad L`` for a vector field ``L`` (``(..., 2)``), in sym2 storage."""
    return mat_to_sym(grad(L, h))


@dataclass
class IbpCoefficients:
    direction: str
    k: int
    L: list[np.ndarray]
    P: list[np.ndarray]
    h: float

    @property
    def eta(self) -> np.ndarray:
        return np.array(DIRECTION_VECTORS[self.direction])

    @property
    def residual_direction(self) -> np.ndarray:
        return np.array(RESIDUAL_VECTORS[self.direction])

    def grad_L(self, i: int) -> np.ndarray:
        return grad(self.L[i], self.h)


def ibp_coefficients_array(H: np.ndarray, direction: str, k: int, h: float, max_deriv: int) -> IbpCoefficients:
    _check_direction(direction)
    if k < 0 or k > max_deriv - 1:
        raise NKError(
            "derivative-depth-exceeded",
            f"depth k={k} needs {k + 1} derivatives, budget is {max_deriv}",
        )
    L0, P0 = split_sym(H, direction)
    Ls, Ps = [L0], [P0]
    for _ in range(k):
        Li, Pi = split_sym(_sym_grad(Ls[-1], h), direction)
        Ls.append(Li)
        Ps.append(Pi)
    return IbpCoefficients(direction, k, Ls, Ps, h)


def ibp_coefficients(H: GridField, direction: str, k: int) -> IbpCoefficients:
    """Coefficient fields ``L_0..L_k`` and ``P_0..P_k`` of ``H`` for one direction."""
    if H.arity != "sym2":
        raise NKError("invalid-field", f"H must be sym2, got {H.arity}")
    H.require_finite()
    return ibp_coefficients_array(H.data, direction, k, H.spec.h, H.spec.max_deriv)


def closed_form_coefficients(H: GridField, direction: str, k: int) -> IbpCoefficients:
    """The explicit per-direction formulas for ``L_i``, ``P_i``.

    Mixed derivatives are products of the same one-dimensional operators as
    in the recursion, so both routes agree to rounding on the grid.
    """
    _check_direction(direction)
    h = H.spec.h
    H11, H12, H22 = (H.data[..., c] for c in range(3))

    def D(f, p, q):
        if p < 0 or q < 0:
            return np.zeros_like(f)
        return dmulti(f, p, q, h)

    L0, P0 = split_sym(H.data, direction)
    Ls, Ps = [L0], [P0]
    for i in range(1, k + 1):
        if direction == "eta1":
            L = np.stack([D(H11, i, 0), 2.0 * D(H12, i, 0) + i * D(H11, i - 1, 1)], axis=-1)
            P = 2.0 * D(H12, i - 1, 1) + (i - 1) * D(H11, i - 2, 2)
        elif direction == "eta3":
            L = np.stack([2.0 * D(H12, 0, i) + i * D(H22, 1, i - 1), D(H22, 0, i)], axis=-1)
            P = 2.0 * D(H12, 1, i - 1) + (i - 1) * D(H22, 2, i - 2)
        else:
            # derivatives of H11 along x1 appear with index (i) in both
            # places where the printed formula carries a subscript i
            L = 2.0 ** ((i + 1) / 2) * np.stack(
                [D(H11, i, 0), 2.0 * D(H12, i, 0) + i * D(H11, i - 1, 1) - (i + 1) * D(H11, i, 0)], axis=-1
            )
            P = 2.0 ** (i / 2) * (
                2.0 * D(H12, i - 1, 1)
                - 2.0 * D(H12, i, 0)
                + (i - 1) * D(H11, i - 2, 2)
                - 2.0 * i * D(H11, i - 1, 1)
                + (i + 1) * D(H11, i, 0)
            )
        Ls.append(L)
        Ps.append(P)
    return IbpCoefficients(direction, k, Ls, Ps, h)


@dataclass
class IbpGroups:
    """The three right-hand groups of the decomposition, in sym2 storage."""

    remainder: np.ndarray
    gradient: np.ndarray
    residual: np.ndarray
    V: np.ndarray
    grad_V: np.ndarray
    P_series: np.ndarray


def ibp_groups(
    coef: IbpCoefficients, tower: ProfileTower, lam: float, t: np.ndarray, weight: float = 1.0
) -> IbpGroups:
    """Assemble the groups for ``weight * Gamma_0(lam t)/lam H``.

    ``sym grad`` of the oscillatory series is expanded by the product rule
    (``grad(Gamma(lam t) L) = Gamma grad L + lam Gamma' L (x) eta``), so no
    high-frequency field is ever differenced.
    """
    k = coef.k
    if tower.depth < k + 1:
        raise NKError("config-invalid", f"tower depth {tower.depth} < k+1 = {k + 1}")
    eta = coef.eta
    r = coef.residual_direction
    phi = lam * t
    shape = t.shape
    V = np.zeros(shape + (2,))
    grad_V = np.zeros(shape + (2, 2))
    P_series = np.zeros(shape)
    for i in range(k + 1):
        s = weight * (-1.0) ** i
        g_next = tower(i + 1, phi)
        g_cur = tower(i, phi)
        c_next = s * g_next / lam ** (i + 2)
        c_cur = s * g_cur / lam ** (i + 1)
        V += c_next[..., None] * coef.L[i]
        grad_V += c_next[..., None, None] * coef.grad_L(i) + c_cur[..., None, None] * (
            coef.L[i][..., :, None] * eta[None, :]
        )
        P_series += c_cur * coef.P[i]
    remainder = (weight * (-1.0) ** (k + 1) * tower(k + 1, phi) / lam ** (k + 2))[..., None] * _sym_grad(
        coef.L[k], coef.h
    )
    rr = np.array([r[0] * r[0], r[0] * r[1], r[1] * r[1]])
    return IbpGroups(remainder, mat_to_sym(grad_V), P_series[..., None] * rr, V, grad_V, P_series)


def ibp_reconstruct(H: GridField, direction: str, k: int, tower: ProfileTower, lam: float) -> dict:
    """Compare ``Gamma_0(lam t)/lam H`` with the sum of its three groups."""
    coef = ibp_coefficients(H, direction, k)
    x = np.stack(H.spec.coords(), axis=-1)
    t = phase(x, DIRECTION_VECTORS[direction])
    grp = ibp_groups(coef, tower, lam, t)
    lhs = (tower(0, lam * t) / lam)[..., None] * H.data
    rhs = grp.remainder + grp.gradient + grp.residual
    scale = max(float(np.max(np.abs(lhs))), 1e-300)
    res = float(np.max(np.abs(lhs - rhs)))
    return {
        "direction": direction,
        "k": k,
        "lambda": lam,
        "residual": res,
        "relative_residual": res / scale,
        "remainder_norm": float(np.max(np.abs(grp.remainder))),
        "gradient_norm": float(np.max(np.abs(grp.gradient))),
        "residual_group_norm": float(np.max(np.abs(grp.residual))),
    }


@dataclass
class WField:
    """Tangential correction ``W`` with its gradient and the leftover terms.

    Contract: ``sum(osc terms) + 2 sym grad W = Gcal + G r (x) r``.
    """

    W: np.ndarray
    grad_W: np.ndarray
    G: np.ndarray
    Gcal: np.ndarray
    direction: str

    def contract_residual(self, osc_sum: np.ndarray) -> float:
        r = RESIDUAL_VECTORS[self.direction]
        rr = np.array([r[0] * r[0], r[0] * r[1], r[1] * r[1]])
        lhs = osc_sum + 2.0 * mat_to_sym(self.grad_W)
        return float(np.max(np.abs(lhs - self.Gcal - self.G[..., None] * rr)))


def build_w_field_array(
    S_terms: dict[str, np.ndarray],
    lam: float,
    k: int,
    direction: str,
    t: np.ndarray,
    h: float,
    max_deriv: int,
    profiles: dict[str, tuple[str, int]] | None = None,
    towers: dict[str, ProfileTower] | None = None,
    block: int | None = None,
) -> WField:
    profiles = profiles or S_PROFILES
    towers = dict(towers or {})
    n = t.shape[0]
    if block is not None and n > block:
        # derivatives reach 2 rows further per application, so a halo of
        # 2(k+2) rows reproduces the full-grid values inside each block
        halo = 2 * (k + 2)
        parts = []
        for start in range(0, n, block):
            stop = min(n, start + block)
            lo, hi = max(0, start - halo), min(n, stop + halo)
            wf = build_w_field_array(
                {key: v[lo:hi] for key, v in S_terms.items()}, lam, k, direction, t[lo:hi], h, max_deriv, profiles, towers
            )
            inner = slice(start - lo, stop - lo)
            parts.append((wf.W[inner], wf.grad_W[inner], wf.G[inner], wf.Gcal[inner]))
            del wf
        W, grad_W, G, Gcal = (np.concatenate(c, axis=0) for c in zip(*parts))
        return WField(W, grad_W, G, Gcal, direction)
    shape = t.shape
    V = np.zeros(shape + (2,))
    grad_V = np.zeros(shape + (2, 2))
    G = np.zeros(shape)
    Gcal = np.zeros(shape + (3,))
    for label, S in S_terms.items():
        kind, power = profiles[label]
        tower = towers.get(kind)
        if tower is None or tower.depth < k + 1:
            tower = build_tower(kind, k + 1, max_deriv)
            towers[kind] = tower
        coef = ibp_coefficients_array(S, direction, k, h, max_deriv)
        # Gamma_0/lam^power S = lam^{1-power} * Gamma_0/lam S
        grp = ibp_groups(coef, tower, lam, t, weight=lam ** (1 - power))
        V += grp.V
        grad_V += grp.grad_V
        G += grp.P_series
        Gcal += grp.remainder
    return WField(-0.5 * V, -0.5 * grad_V, G, Gcal, direction)


def build_w_field(
    S_terms: dict[str, GridField],
    lam: float,
    k: int,
    direction: str,
    profiles: dict[str, tuple[str, int]] | None = None,
    towers: dict[str, ProfileTower] | None = None,
) -> tuple[GridField, GridField, GridField]:
    """``(W, G, Gcal)`` for labeled ``S`` terms oscillating along ``direction``.

    Each term ``S_j`` enters as ``Gamma^{(j)}_0(lam t)/lam^{p_j} S_j`` with
    its own profile kind and power (``S_PROFILES`` by default).  ``W`` is
    returned with the factor ``-1/2`` already applied.
    """
    if not S_terms:
        raise NKError("config-invalid", "no S terms given")
    first = next(iter(S_terms.values()))
    spec = first.spec
    x = np.stack(spec.coords(), axis=-1)
    t = phase(x, DIRECTION_VECTORS[direction])
    wf = build_w_field_array(
        {k_: v.data for k_, v in S_terms.items()}, lam, k, direction, t, spec.h, spec.max_deriv, profiles, towers
    )
    return (
        first.with_data(wf.W, "vec2"),
        first.with_data(wf.G, "scalar"),
        first.with_data(wf.Gcal, "sym2"),
    )
