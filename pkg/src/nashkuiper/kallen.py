"""Fixed-point decomposition that absorbs the ``grad a (x) grad a`` terms.

Starting from ``a_{i,0} = 0`` the iteration sets

    a_{i,j} = abar_i(H - E_{j-1})^{1/2},
    E_j = |lam|^{-2} grad a_{1,j} (x) grad a_{1,j} + |kappa|^{-2} grad a_{2,j} (x) grad a_{2,j},

so that ``H = sum_i a_{i,j}^2 eta_i (x) eta_i + E_{j-1}`` at every step and
the leftover ``F_j = E_{j-1} - E_j`` shrinks like ``(lam/mu)^{-2j}``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import NKError
from .grid import GridField, grad
from .metric import DIRECTIONS, H0, abar_decompose, outer_sym, rank_one

LOWER = 0.5
UPPER = 1.5


@dataclass
class KallenResult:
    a1: GridField
    a2: GridField
    a3: GridField
    F: GridField
    iterations: int
    residual_history: list[float]
    E_last: GridField
    amplitude_range: tuple[float, float]
    warnings: list[str] = field(default_factory=list)

    def reconstruct(self, lam: float, kappa: float) -> np.ndarray:
        h = self.a1.spec.h
        g1 = grad(self.a1.data, h)
        g2 = grad(self.a2.data, h)
        out = self.F.data + outer_sym(g1, g1) / lam**2 + outer_sym(g2, g2) / kappa**2
        for a, eta in zip((self.a1, self.a2, self.a3), DIRECTIONS.etas):
            out = out + (a.data**2)[..., None] * rank_one(eta)
        return out

    def write_history_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["iteration", "F_sup"])
            for j, v in enumerate(self.residual_history, start=1):
                wr.writerow([j, f"{v:.17g}"])


def _error_term(a1: np.ndarray, a2: np.ndarray, lam: float, kappa: float, h: float) -> np.ndarray:
    g1 = grad(a1, h)
    g2 = grad(a2, h)
    return outer_sym(g1, g1) / lam**2 + outer_sym(g2, g2) / kappa**2


def kallen_decompose(
    H: GridField,
    lam: float,
    kappa: float,
    N: int,
    M: int | None = None,
    strict: bool = True,
) -> KallenResult:
    """Run ``N`` steps of the fixed point and return ``a_{i,N}`` and ``F``.

    ``strict=False`` turns the ``|H - H0| <= r0/2`` precondition into a
    recorded warning; the square-root guard ``a^2 >= 1/2`` always applies.
    """
    if H.arity != "sym2":
        raise NKError("invalid-field", f"H must be sym2, got {H.arity}")
    H.require_finite()
    if not (kappa > lam > 1.0):
        raise NKError("config-invalid", f"need kappa > lam > 1, got lam={lam:.6g}, kappa={kappa:.6g}")
    if N < 1:
        raise NKError("config-invalid", f"iteration count N={N} must be >= 1")
    M = H.spec.max_deriv if M is None else M
    if N > M:
        raise NKError("derivative-depth-exceeded", f"N={N} iterations need {N} derivatives, budget M={M}")
    warnings: list[str] = []
    dev = float(np.max(np.abs(H.data - H0.as_array())))
    if dev > DIRECTIONS.r0 / 2:
        msg = f"|H - H0|_0 <= r0/2 violated: lhs={dev:.6g}, rhs={DIRECTIONS.r0 / 2:.6g}"
        if strict:
            raise NKError("assumption-violated", msg, lhs=dev)
        warnings.append(msg)

    h = H.spec.h
    E_prev = np.zeros_like(H.data)
    history: list[float] = []
    lo_all, hi_all = np.inf, -np.inf
    a = None
    E_cur = E_prev
    j = 0
    for j in range(1, N + 1):
        a2 = abar_decompose(H.data - E_prev)
        lo = float(min(np.min(c) for c in a2))
        hi = float(max(np.max(c) for c in a2))
        if lo < LOWER:
            node = np.unravel_index(int(np.argmin(np.minimum(np.minimum(a2[0], a2[1]), a2[2]))), a2[0].shape)
            raise NKError(
                "decomposition-left-ball",
                f"a^2 = {lo:.6g} < 1/2 at iteration {j}, node {tuple(int(v) for v in node)}",
                iteration=j,
                value=lo,
            )
        if hi > UPPER:
            warnings.append(f"iteration {j}: a^2 = {hi:.6g} exceeds 3/2")
        lo_all, hi_all = min(lo_all, lo), max(hi_all, hi)
        a = [np.sqrt(c) for c in a2]
        E_cur = _error_term(a[0], a[1], lam, kappa, h)
        F_sup = float(np.max(np.abs(E_prev - E_cur)))
        history.append(F_sup)
        if len(history) >= 3 and history[-1] > history[-2] > history[-3]:
            raise NKError(
                "kallen-diverging",
                f"residual grew twice in a row: {history[-3]:.3g} -> {history[-2]:.3g} -> {history[-1]:.3g}",
                history=list(history),
            )
        if F_sup == 0.0:
            break
        if j < N:
            E_prev = E_cur
    F = E_prev - E_cur
    return KallenResult(
        H.with_data(a[0], "scalar"),
        H.with_data(a[1], "scalar"),
        H.with_data(a[2], "scalar"),
        H.with_data(F),
        j,
        history,
        H.with_data(E_cur),
        (lo_all, hi_all),
        warnings,
    )
