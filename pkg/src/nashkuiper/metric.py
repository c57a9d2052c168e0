"""Symmetric 2x2 matrix fields: defects, rank-one decompositions, curvature.

Matrix-valued fields use the ``sym2`` storage ``(a11, a12, a22)`` from
``grid``.  The helpers ``sym_to_mat`` / ``mat_to_sym`` convert to full
``(..., 2, 2)`` arrays when products are needed.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NKError
from .grid import GridField, GridSpec, d1, d2, grad

SQRT2 = math.sqrt(2.0)


# ---------------------------------------------------------------------------
# small helpers on raw arrays
# ---------------------------------------------------------------------------


def sym_to_mat(s: np.ndarray) -> np.ndarray:
    out = np.empty(s.shape[:-1] + (2, 2))
    out[..., 0, 0] = s[..., 0]
    out[..., 0, 1] = s[..., 1]
    out[..., 1, 0] = s[..., 1]
    out[..., 1, 1] = s[..., 2]
    return out


def mat_to_sym(m: np.ndarray) -> np.ndarray:
    """Symmetric part of ``m`` in ``(a11, a12, a22)`` storage."""
    return np.stack([m[..., 0, 0], 0.5 * (m[..., 0, 1] + m[..., 1, 0]), m[..., 1, 1]], axis=-1)


def outer_sym(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """``sym(p (x) q)`` for 2-vectors, in sym2 storage."""
    return np.stack(
        [p[..., 0] * q[..., 0], 0.5 * (p[..., 0] * q[..., 1] + p[..., 1] * q[..., 0]), p[..., 1] * q[..., 1]],
        axis=-1,
    )


def gram(a: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    """``a^T b`` for ``(..., 4, 2)`` arrays, returned as full ``(..., 2, 2)``."""
    if b is None:
        b = a
    return np.matmul(np.swapaxes(a, -1, -2), b)


def pullback(du: np.ndarray) -> np.ndarray:
    """``(grad u)^T grad u`` in sym2 storage for ``du`` of shape ``(..., 4, 2)``."""
    m = gram(du)
    return np.stack([m[..., 0, 0], 0.5 * (m[..., 0, 1] + m[..., 1, 0]), m[..., 1, 1]], axis=-1)


def sym_eigenvalues(s: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Closed-form eigenvalues ``(low, high)`` of sym2 data."""
    m = 0.5 * (s[..., 0] + s[..., 2])
    r = np.hypot(0.5 * (s[..., 0] - s[..., 2]), s[..., 1])
    return m - r, m + r


def sym_det(s: np.ndarray) -> np.ndarray:
    return s[..., 0] * s[..., 2] - s[..., 1] ** 2


def max_entry(s: np.ndarray) -> float:
    return float(np.max(np.abs(s))) if s.size else 0.0


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SymMat2:
    a11: float
    a12: float
    a22: float

    @classmethod
    def from_matrix(cls, m) -> "SymMat2":
        m = np.asarray(m, float)
        return cls(float(m[0, 0]), float(0.5 * (m[0, 1] + m[1, 0])), float(m[1, 1]))

    def as_array(self) -> np.ndarray:
        return np.array([self.a11, self.a12, self.a22])

    def as_matrix(self) -> np.ndarray:
        return np.array([[self.a11, self.a12], [self.a12, self.a22]])

    @property
    def det(self) -> float:
        return self.a11 * self.a22 - self.a12**2

    def is_positive_definite(self) -> bool:
        return self.a11 > 0 and self.det > 0

    def eigenvalues(self) -> tuple[float, float]:
        lo, hi = sym_eigenvalues(self.as_array())
        return float(lo), float(hi)

    def __add__(self, other: "SymMat2") -> "SymMat2":
        return SymMat2(self.a11 + other.a11, self.a12 + other.a12, self.a22 + other.a22)

    def __sub__(self, other: "SymMat2") -> "SymMat2":
        return SymMat2(self.a11 - other.a11, self.a12 - other.a12, self.a22 - other.a22)

    def __mul__(self, c: float) -> "SymMat2":
        return SymMat2(c * self.a11, c * self.a12, c * self.a22)

    __rmul__ = __mul__

    def max_entry(self) -> float:
        return max(abs(self.a11), abs(self.a12), abs(self.a22))


def rank_one(eta) -> np.ndarray:
    """``eta (x) eta`` in sym2 storage."""
    e = np.asarray(eta, float)
    return np.array([e[0] * e[0], e[0] * e[1], e[1] * e[1]])


@dataclass(frozen=True)
class PrimitiveDirections:
    """The fixed directions ``e1, (e1+e2)/sqrt2, e2`` and ``H0 = sum eta_i (x) eta_i``."""

    eta1: tuple[float, float] = (1.0, 0.0)
    eta2: tuple[float, float] = (1.0 / SQRT2, 1.0 / SQRT2)
    eta3: tuple[float, float] = (0.0, 1.0)
    H0: SymMat2 = field(default_factory=lambda: SymMat2(1.5, 0.5, 1.5))
    r0: float = 0.25

    @property
    def etas(self) -> tuple[tuple[float, float], ...]:
        return (self.eta1, self.eta2, self.eta3)


DIRECTIONS = PrimitiveDirections()
H0 = DIRECTIONS.H0


# ---------------------------------------------------------------------------
# defect and the fixed decomposition
# ---------------------------------------------------------------------------


def defect(g: GridField, u: GridField, du: np.ndarray | None = None) -> GridField:
    """``g - (grad u)^T grad u`` per node.

    ``du`` may supply an already assembled gradient of ``u`` (shape
    ``(n, n, 4, 2)``); otherwise it is taken by finite differences.
    """
    if g.spec != u.spec:
        raise NKError("grid-mismatch", f"g on n={g.spec.n}, u on n={u.spec.n}")
    if g.arity != "sym2" or u.arity != "vec4":
        raise NKError("grid-mismatch", f"defect needs sym2 and vec4 fields, got {g.arity}, {u.arity}")
    if du is None:
        du = grad(u.data, u.spec.h)
    return g.with_data(g.data - pullback(du))


def abar_decompose(H):
    """Coefficients ``(H11 - H12, 2 H12, H22 - H12)`` of ``H`` on ``eta_1, eta_2, eta_3``.

    Accepts a ``SymMat2``, a length-3 array, or sym2 data of any leading shape.
    """
    if isinstance(H, SymMat2):
        return (H.a11 - H.a12, 2.0 * H.a12, H.a22 - H.a12)
    if isinstance(H, GridField):
        H = H.data
    s = np.asarray(H, float)
    return (s[..., 0] - s[..., 1], 2.0 * s[..., 1], s[..., 2] - s[..., 1])


def abar_reconstruct(a1, a2, a3) -> np.ndarray:
    """``sum a_i eta_i (x) eta_i`` in sym2 storage."""
    a1, a2, a3 = (np.asarray(v, float) for v in (a1, a2, a3))
    return np.stack([a1 + 0.5 * a2, 0.5 * a2, a3 + 0.5 * a2], axis=-1)


def r0_constant() -> float:
    """Radius of the max-entry ball around ``H0`` on which every coefficient stays in ``[1/2, 3/2]``.

    Each coefficient map has max-entry operator norm 2, hence ``r0 = 1/4``.
    """
    return 0.25


def r0_corner_search(radius: float, levels: int = 4) -> dict[str, float]:
    """Scan a ``levels^3`` lattice of the max-entry ball (vertices included).

    Because the coefficient maps are linear, the extreme deviation is
    attained on the 8 vertices, which the lattice always contains.
    """
    grid_pts = np.linspace(-radius, radius, levels)
    worst = 0.0
    count = 0
    for p in itertools.product(grid_pts, repeat=3):
        H = SymMat2(1.5 + p[0], 0.5 + p[1], 1.5 + p[2])
        dev = max(abs(a - 1.0) for a in abar_decompose(H))
        worst = max(worst, dev)
        count += 1
    return {"radius": radius, "corners": count, "max_deviation": worst, "ok": worst <= 0.5 + 1e-15}


# ---------------------------------------------------------------------------
# partition-of-unity decomposition over a compact set
# ---------------------------------------------------------------------------

FAN = tuple((math.cos(k * math.pi / 8), math.sin(k * math.pi / 8)) for k in range(8))


def _smooth_step(x: np.ndarray) -> np.ndarray:
    out = np.zeros_like(x)
    pos = x > 0
    out[pos] = np.exp(-1.0 / x[pos])
    return out


def _chi(t: np.ndarray) -> np.ndarray:
    """1-D smooth partition of unity on the integers: ``sum_k chi(t - k) = 1``."""
    a = np.abs(t)
    num = _smooth_step(1.0 - a)
    den = num + _smooth_step(a)
    out = np.zeros_like(t)
    inside = a < 1.0
    out[inside] = num[inside] / den[inside]
    return out


def _triple_solver(triple: tuple[int, int, int]) -> np.ndarray:
    """Matrix mapping sym2 entries to coefficients on three fan directions."""
    basis = np.stack([rank_one(FAN[k]) for k in triple], axis=1)  # columns
    return np.linalg.inv(basis)


_TRIPLES = list(itertools.combinations(range(8), 3))
_SOLVERS = {t: _triple_solver(t) for t in _TRIPLES}


@dataclass
class PouTerm:
    phi: GridField
    eta: tuple[float, float]
    fan_index: int
    lattice_point: tuple[int, int, int] | None = None


@dataclass
class PouResult:
    terms: list[PouTerm]
    max_active: int
    residual: float
    spacing: float

    def __iter__(self):
        return iter((t.phi, t.eta) for t in self.terms)

    def __len__(self) -> int:
        return len(self.terms)


def _choose_triple(center: np.ndarray, half_width: float) -> tuple[tuple[int, int, int], float]:
    """Pick three fan directions with positive coefficients on a lattice cube.

    Among the triples whose worst coefficient over the cube is at least half
    of the best achievable worst coefficient, the first in lexicographic
    order wins.  Neighbouring lattice points then tend to agree, which keeps
    the number of distinct directions small.
    """
    corners = np.array([center + half_width * np.array(s) for s in itertools.product((-1, 1), repeat=3)])
    vals = {t: float((corners @ _SOLVERS[t].T).min()) for t in _TRIPLES}
    best_val = max(vals.values())
    for t in _TRIPLES:
        if vals[t] >= 0.5 * best_val:
            return t, vals[t]
    return max(vals, key=vals.get), best_val


def pou_decompose(H: GridField, bounds: tuple[float, float], merge: bool = False) -> PouResult:
    """Write ``H = sum phi_i^2 eta_i (x) eta_i`` with smooth ``phi_i >= 0``.

    The matrices with eigenvalues in ``bounds`` are covered by a cubic
    lattice (max-entry spacing ``0.1*lambda_min``).  A smooth product
    partition of unity ``psi_j`` subordinate to the lattice cubes sums to one
    exactly.  At each lattice point three fan directions are selected whose
    linear coefficients stay positive on the whole cube; then
    ``phi_{j,i} = sqrt(psi_j(H) c_{j,i}(H))``.

    With ``merge=True`` the terms sharing a fan direction are combined,
    which keeps the term count at most 8 but gives up smoothness of the
    amplitude wherever a merged coefficient vanishes.
    """
    lam_min, lam_max = bounds
    if not (0 < lam_min <= lam_max):
        raise NKError("config-invalid", f"bad eigenvalue bounds {bounds}")
    s = H.data
    lo, hi = sym_eigenvalues(s)
    tol = 1e-12 * max(1.0, lam_max)
    bad = (lo < lam_min - tol) | (hi > lam_max + tol)
    if bad.any():
        i, j = np.argwhere(bad)[0]
        x = (i * H.spec.h, j * H.spec.h)
        raise NKError(
            "outside-compact-cone",
            f"node ({i},{j}) at x=({x[0]:.4g},{x[1]:.4g}) has eigenvalues "
            f"({lo[i, j]:.6g}, {hi[i, j]:.6g}) outside [{lam_min}, {lam_max}]",
            node=(int(i), int(j)),
        )
    spacing = 0.1 * lam_min
    scaled = s / spacing
    base = np.floor(scaled).astype(int)
    frac = scaled - base
    # each coordinate sees at most two lattice values: base and base+1
    weights_lo = _chi(frac)
    weights_hi = _chi(frac - 1.0)
    acc: dict[tuple, np.ndarray] = {}
    lattice_of: dict[tuple, tuple[int, int, int]] = {}
    active = np.zeros(s.shape[:2], dtype=int)
    # enumerate the lattice points touched by the data
    keys = set()
    for corner in itertools.product((0, 1), repeat=3):
        idx = base + np.array(corner)
        w = np.ones(s.shape[:2])
        for c in range(3):
            w = w * (weights_hi[..., c] if corner[c] else weights_lo[..., c])
        for key in {tuple(v) for v in np.unique(idx[w > 0].reshape(-1, 3), axis=0)}:
            keys.add(key)
    triples: dict[tuple[int, int, int], tuple[int, int, int]] = {}
    for key in sorted(keys):
        center = np.array(key, float) * spacing
        t, val = _choose_triple(center, spacing)
        if val <= 0:
            raise NKError(
                "outside-compact-cone",
                f"no fan triple has positive coefficients around lattice point {center.tolist()}",
            )
        triples[key] = t
    for corner in itertools.product((0, 1), repeat=3):
        idx = base + np.array(corner)
        w = np.ones(s.shape[:2])
        for c in range(3):
            w = w * (weights_hi[..., c] if corner[c] else weights_lo[..., c])
        active += (w > 0).astype(int) * 3
        for key in sorted({tuple(v) for v in np.unique(idx[w > 0].reshape(-1, 3), axis=0)}):
            mask = np.all(idx == np.array(key), axis=-1) & (w > 0)
            t = triples[key]
            coeff = s @ _SOLVERS[t].T  # (n, n, 3)
            for slot, k in enumerate(t):
                contrib = np.where(mask, w * np.clip(coeff[..., slot], 0.0, None), 0.0)
                tag = (k,) if merge else (key, k)
                if tag in acc:
                    acc[tag] = acc[tag] + contrib
                else:
                    acc[tag] = contrib
                lattice_of[tag] = key
    terms = []
    recon = np.zeros_like(s)
    for tag in sorted(acc, key=lambda x: (x if merge else (x[1], x[0]))):
        sq = acc[tag]
        if not np.any(sq > 0):
            continue
        k = tag[-1]
        phi = np.sqrt(sq)
        terms.append(PouTerm(H.with_data(phi, "scalar"), FAN[k], k, None if merge else lattice_of[tag]))
        recon = recon + sq[..., None] * rank_one(FAN[k])
    residual = max_entry(recon - s)
    return PouResult(terms, int(active.max()), residual, spacing)


# ---------------------------------------------------------------------------
# curvature and immersion bounds
# ---------------------------------------------------------------------------


def gauss_curvature(g: GridField) -> GridField:
    """Gaussian curvature of the metric ``g`` by the Brioschi formula."""
    s = g.data
    lo, _ = sym_eigenvalues(s)
    if (lo <= 0).any() or not np.isfinite(s).all():
        i, j = np.argwhere(~(lo > 0))[0]
        raise NKError("degenerate-metric", f"metric not positive definite at node ({i},{j})", node=(int(i), int(j)))
    h = g.spec.h
    E, F, G = s[..., 0], s[..., 1], s[..., 2]
    Eu, Ev = d1(E, 0, h), d1(E, 1, h)
    Fu, Fv = d1(F, 0, h), d1(F, 1, h)
    Gu, Gv = d1(G, 0, h), d1(G, 1, h)
    Evv = d2(E, 1, h)
    Guu = d2(G, 0, h)
    Fuv = d1(Fu, 1, h)
    A = np.empty(E.shape + (3, 3))
    A[..., 0, 0] = -0.5 * Evv + Fuv - 0.5 * Guu
    A[..., 0, 1] = 0.5 * Eu
    A[..., 0, 2] = Fu - 0.5 * Ev
    A[..., 1, 0] = Fv - 0.5 * Gu
    A[..., 1, 1] = E
    A[..., 1, 2] = F
    A[..., 2, 0] = 0.5 * Gv
    A[..., 2, 1] = F
    A[..., 2, 2] = G
    B = np.zeros_like(A)
    B[..., 0, 1] = B[..., 1, 0] = 0.5 * Ev
    B[..., 0, 2] = B[..., 2, 0] = 0.5 * Gu
    B[..., 1, 1] = E
    B[..., 1, 2] = B[..., 2, 1] = F
    B[..., 2, 2] = G
    k = (np.linalg.det(A) - np.linalg.det(B)) / (E * G - F**2) ** 2
    return g.with_data(k, "scalar")


@dataclass
class BoundsReport:
    gamma: float
    min_eigenvalue: float
    max_eigenvalue: float
    grad_sup: float
    det_min: float
    det_max: float
    passed: bool
    det_bounds_ok: bool
    worst_node: tuple[int, int]
    worst_x: tuple[float, float]

    def as_dict(self) -> dict[str, object]:
        return dict(self.__dict__)


def immersion_bounds_check(
    u: GridField, gamma: float, du: np.ndarray | None = None, raise_on_fail: bool = True
) -> BoundsReport:
    """Test ``(1/gamma) Id <= (grad u)^T grad u <= gamma Id`` at every node."""
    if gamma <= 1:
        raise NKError("config-invalid", f"gamma={gamma} must exceed 1")
    if du is None:
        du = grad(u.data, u.spec.h)
    P = pullback(du)
    lo, hi = sym_eigenvalues(P)
    det = sym_det(P)
    slack_lo = lo - 1.0 / gamma
    slack_hi = gamma - hi
    slack = np.minimum(slack_lo, slack_hi)
    i, j = np.unravel_index(int(np.argmin(slack)), slack.shape)
    passed = bool(slack.min() >= 0)
    rep = BoundsReport(
        gamma=gamma,
        min_eigenvalue=float(lo.min()),
        max_eigenvalue=float(hi.max()),
        grad_sup=float(np.abs(du).max()),
        det_min=float(det.min()),
        det_max=float(det.max()),
        passed=passed,
        det_bounds_ok=bool(det.min() >= 1.0 / gamma**2 - 1e-14 and det.max() <= 2.0 * gamma**2),
        worst_node=(int(i), int(j)),
        worst_x=(float(i * u.spec.h), float(j * u.spec.h)),
    )
    if raise_on_fail and not passed:
        raise NKError(
            "immersion-bounds-violated",
            f"eigenvalues ({lo[i, j]:.6g}, {hi[i, j]:.6g}) outside [1/{gamma:g}, {gamma:g}] "
            f"at node ({i},{j})",
            report=rep.as_dict(),
        )
    return rep


def sym_field(spec: GridSpec, m: SymMat2 | np.ndarray) -> GridField:
    arr = m.as_array() if isinstance(m, SymMat2) else np.asarray(m, float)
    return GridField(spec, "sym2", np.broadcast_to(arr, (spec.n, spec.n, 3)).copy())


__all__ = [
    "SymMat2",
    "PrimitiveDirections",
    "DIRECTIONS",
    "H0",
    "FAN",
    "defect",
    "abar_decompose",
    "abar_reconstruct",
    "r0_constant",
    "r0_corner_search",
    "pou_decompose",
    "gauss_curvature",
    "immersion_bounds_check",
    "BoundsReport",
    "sym_field",
]
