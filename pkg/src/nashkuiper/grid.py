"""Uniform-grid fields on the unit square.

Fields are stored node-major: ``data[i, j, ...]`` is the value at the node
``x = (i*h, j*h)``, so axis 0 of the array is the ``x1`` direction and axis 1
is ``x2``.  Trailing axes hold the components (see ``ARITY_SHAPES``).  A
``sym2`` field stores the three independent entries ``(a11, a12, a22)``.

Derivatives use the classical five-point fourth-order stencil in the
interior and fourth-order one-sided closures on the two outermost nodes at
each end.  Higher orders are repeated applications of the first-order
operator, which keeps the operators along the two axes exactly commuting.
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field
from itertools import product
from pathlib import Path
from typing import Iterable

import numpy as np
from scipy.signal import fftconvolve

from .errors import NKError

ARITY_SHAPES: dict[str, tuple[int, ...]] = {
    "scalar": (),
    "vec2": (2,),
    "vec4": (4,),
    "sym2": (3,),
    "mat42": (4, 2),
}

# minimum nodes per period for any oscillation frequency used in a run
NODES_PER_PERIOD = 32
DEFAULT_MAX_DERIV = 6


@dataclass(frozen=True)
class GridSpec:
    """Uniform ``n x n`` node grid on ``[0, 1]^2``.

    ``max_deriv`` is the derivative budget for the run; it does not take
    part in equality so fields built under different budgets still combine.
    """

    n: int
    max_deriv: int = field(default=DEFAULT_MAX_DERIV, compare=False)

    def __post_init__(self) -> None:
        if int(self.n) != self.n or self.n < 9:
            raise NKError("config-invalid", f"grid resolution n={self.n} must be an integer >= 9")

    @property
    def h(self) -> float:
        return 1.0 / (self.n - 1)

    def coords(self) -> tuple[np.ndarray, np.ndarray]:
        """Node coordinates ``(x1, x2)`` as two ``(n, n)`` arrays."""
        t = np.arange(self.n) * self.h
        t[-1] = 1.0
        return np.meshgrid(t, t, indexing="ij")

    def with_budget(self, max_deriv: int) -> "GridSpec":
        return GridSpec(self.n, max_deriv)

    def max_frequency(self, diagonal: bool = False) -> float:
        """Largest oscillation frequency the resolution rule admits."""
        scale = math.sqrt(2.0) if diagonal else 1.0
        return 2.0 * math.pi / NODES_PER_PERIOD / (self.h * scale)


def check_resolution(spec: GridSpec, freq: float, diagonal: bool = False, what: str = "frequency") -> None:
    """Raise ``grid-underresolved`` unless ``freq*h <= 2*pi/32``.

    For phases along the diagonal direction the frequency is multiplied by
    ``sqrt(2)`` before the test.
    """
    eff = freq * (math.sqrt(2.0) if diagonal else 1.0)
    if eff * spec.h > 2.0 * math.pi / NODES_PER_PERIOD * (1.0 + 1e-12):
        raise NKError(
            "grid-underresolved",
            f"{what}={freq:.6g} needs freq*h <= 2pi/{NODES_PER_PERIOD} "
            f"(have {eff * spec.h:.4g}, limit {2 * math.pi / NODES_PER_PERIOD:.4g}) at n={spec.n}",
            frequency=freq,
            n=spec.n,
        )


@dataclass(frozen=True)
class GridField:
    """Values of a scalar, vector or matrix function at the grid nodes."""

    spec: GridSpec
    arity: str
    data: np.ndarray

    def __post_init__(self) -> None:
        if self.arity not in ARITY_SHAPES:
            raise NKError("invalid-field", f"unknown arity {self.arity!r}")
        want = (self.spec.n, self.spec.n) + ARITY_SHAPES[self.arity]
        if self.data.shape != want:
            raise NKError("invalid-field", f"{self.arity} field needs shape {want}, got {self.data.shape}")

    @property
    def components(self) -> int:
        return int(np.prod(ARITY_SHAPES[self.arity], dtype=int))

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.data).all())

    def require_finite(self) -> "GridField":
        if not self.is_finite():
            raise NKError("invalid-field", f"{self.arity} field contains NaN or Inf")
        return self

    def with_data(self, data: np.ndarray, arity: str | None = None) -> "GridField":
        return GridField(self.spec, arity or self.arity, data)

    def __add__(self, other: "GridField") -> "GridField":
        _same_grid(self, other)
        return self.with_data(self.data + other.data)

    def __sub__(self, other: "GridField") -> "GridField":
        _same_grid(self, other)
        return self.with_data(self.data - other.data)

    def __mul__(self, c: float) -> "GridField":
        return self.with_data(self.data * c)

    __rmul__ = __mul__


def _same_grid(a: GridField, b: GridField) -> None:
    if a.spec != b.spec:
        raise NKError("grid-mismatch", f"n={a.spec.n} vs n={b.spec.n}")
    if a.arity != b.arity:
        raise NKError("grid-mismatch", f"arity {a.arity} vs {b.arity}")


def from_function(spec: GridSpec, fn, arity: str = "scalar") -> GridField:
    """Sample ``fn(x1, x2)`` at the nodes.

    ``fn`` receives the two coordinate arrays and returns either an array of
    node shape or a sequence of component arrays.
    """
    x1, x2 = spec.coords()
    out = fn(x1, x2)
    if isinstance(out, (list, tuple)):
        out = np.stack([np.broadcast_to(np.asarray(c, float), x1.shape) for c in out], axis=-1)
        if arity == "mat42":
            out = out.reshape(spec.n, spec.n, 4, 2)
    else:
        out = np.broadcast_to(np.asarray(out, float), x1.shape + ARITY_SHAPES[arity]).copy()
    return GridField(spec, arity, np.ascontiguousarray(out, dtype=float))


def constant(spec: GridSpec, value, arity: str = "scalar") -> GridField:
    shape = (spec.n, spec.n) + ARITY_SHAPES[arity]
    return GridField(spec, arity, np.broadcast_to(np.asarray(value, float), shape).copy())


# ---------------------------------------------------------------------------
# finite differences on raw arrays
# ---------------------------------------------------------------------------


def d1(arr: np.ndarray, axis: int, h: float) -> np.ndarray:
    """First derivative of ``arr`` along node axis 0 or 1 (fourth order)."""
    f = np.moveaxis(arr, axis, 0)
    if f.shape[0] < 5:
        raise NKError("invalid-field", "at least 5 nodes are needed along each axis")
    out = np.empty_like(f)
    out[2:-2] = (f[:-4] - 8.0 * f[1:-3] + 8.0 * f[3:-1] - f[4:])
    out[0] = -25.0 * f[0] + 48.0 * f[1] - 36.0 * f[2] + 16.0 * f[3] - 3.0 * f[4]
    out[1] = -3.0 * f[0] - 10.0 * f[1] + 18.0 * f[2] - 6.0 * f[3] + f[4]
    out[-1] = 25.0 * f[-1] - 48.0 * f[-2] + 36.0 * f[-3] - 16.0 * f[-4] + 3.0 * f[-5]
    out[-2] = 3.0 * f[-1] + 10.0 * f[-2] - 18.0 * f[-3] + 6.0 * f[-4] - f[-5]
    out /= 12.0 * h
    return np.moveaxis(out, 0, axis)


def d2(arr: np.ndarray, axis: int, h: float) -> np.ndarray:
    """Pure second derivative along one axis with a dedicated fourth-order stencil.

    Repeating ``d1`` along the same axis loses one order in the two boundary
    layers; this operator keeps fourth order up to the edge.  It is used
    where accuracy matters more than exact consistency with ``d1``.
    """
    f = np.moveaxis(arr, axis, 0)
    if f.shape[0] < 6:
        raise NKError("invalid-field", "at least 6 nodes are needed along each axis")
    out = np.empty_like(f)
    out[2:-2] = -f[:-4] + 16.0 * f[1:-3] - 30.0 * f[2:-2] + 16.0 * f[3:-1] - f[4:]
    out[0] = 45.0 * f[0] - 154.0 * f[1] + 214.0 * f[2] - 156.0 * f[3] + 61.0 * f[4] - 10.0 * f[5]
    out[1] = 10.0 * f[0] - 15.0 * f[1] - 4.0 * f[2] + 14.0 * f[3] - 6.0 * f[4] + f[5]
    out[-1] = 45.0 * f[-1] - 154.0 * f[-2] + 214.0 * f[-3] - 156.0 * f[-4] + 61.0 * f[-5] - 10.0 * f[-6]
    out[-2] = 10.0 * f[-1] - 15.0 * f[-2] - 4.0 * f[-3] + 14.0 * f[-4] - 6.0 * f[-5] + f[-6]
    out /= 12.0 * h * h
    return np.moveaxis(out, 0, axis)


def dmulti(arr: np.ndarray, p: int, q: int, h: float) -> np.ndarray:
    """``d1^p d2^q`` applied to a raw array."""
    out = arr
    for _ in range(p):
        out = d1(out, 0, h)
    for _ in range(q):
        out = d1(out, 1, h)
    return out


def grad(arr: np.ndarray, h: float) -> np.ndarray:
    """Gradient of a raw array; a trailing axis of length 2 is appended."""
    return np.stack([d1(arr, 0, h), d1(arr, 1, h)], axis=-1)


def derivative(f: GridField, axis: int, order: int = 1) -> GridField:
    """``order``-th partial derivative of ``f`` along ``axis`` (1 or 2)."""
    if axis not in (1, 2):
        raise NKError("invalid-field", f"axis must be 1 or 2, got {axis}")
    if order < 1:
        raise NKError("invalid-field", f"order must be positive, got {order}")
    if order > f.spec.max_deriv:
        raise NKError(
            "derivative-depth-exceeded",
            f"order {order} exceeds the configured maximum {f.spec.max_deriv}",
        )
    f.require_finite()
    out = f.data
    for _ in range(order):
        out = d1(out, axis - 1, f.spec.h)
    return f.with_data(out)


def partial(f: GridField, p: int, q: int) -> GridField:
    """Mixed partial ``d1^p d2^q f`` under the derivative budget."""
    if p + q > f.spec.max_deriv:
        raise NKError(
            "derivative-depth-exceeded",
            f"order {p + q} exceeds the configured maximum {f.spec.max_deriv}",
        )
    f.require_finite()
    return f.with_data(dmulti(f.data, p, q, f.spec.h))


# ---------------------------------------------------------------------------
# mollification
# ---------------------------------------------------------------------------


def mollifier_kernel(l: float, h: float) -> np.ndarray:
    """Discrete bump ``c*exp(-1/(1-|x|^2))`` of radius ``l``, weights summing to one."""
    r = int(math.floor(l / h))
    k = np.arange(-r, r + 1) * h / l
    rho2 = k[:, None] ** 2 + k[None, :] ** 2
    w = np.zeros_like(rho2)
    inside = rho2 < 1.0
    w[inside] = np.exp(-1.0 / (1.0 - rho2[inside]))
    w /= w.sum()
    return w


def mollify(f: GridField, l: float) -> GridField:
    """Convolve with the normalized bump of radius ``l`` (odd mirror extension)."""
    if not (0.0 < l <= 1.0):
        raise NKError("config-invalid", f"mollification radius l={l} must lie in (0, 1]")
    if l < 2.0 * f.spec.h:
        raise NKError("kernel-unresolved", f"l={l:.4g} < 2h={2 * f.spec.h:.4g}")
    f.require_finite()
    w = mollifier_kernel(l, f.spec.h)
    r = w.shape[0] // 2
    n = f.spec.n
    if r > n - 1:
        raise NKError("kernel-unresolved", f"kernel radius {r} nodes exceeds the grid")
    flat = f.data.reshape(n, n, -1)
    out = np.empty_like(flat)
    for c in range(flat.shape[-1]):
        # odd reflection reproduces affine functions exactly near the edge
        padded = np.pad(flat[:, :, c], r, mode="reflect", reflect_type="odd")
        out[:, :, c] = fftconvolve(padded, w, mode="valid")
    return f.with_data(out.reshape(f.data.shape))


# ---------------------------------------------------------------------------
# norms
# ---------------------------------------------------------------------------


def multi_indices(order: int) -> Iterable[tuple[int, int]]:
    return ((p, order - p) for p in range(order + 1))


def sup_norm(f: GridField, m: int = 0) -> float:
    """``max_{j<=m} max |d^j f|`` over nodes, components and multi-indices."""
    if m > f.spec.max_deriv:
        raise NKError(
            "derivative-depth-exceeded",
            f"order {m} exceeds the configured maximum {f.spec.max_deriv}",
        )
    f.require_finite()
    best = float(np.max(np.abs(f.data))) if f.data.size else 0.0
    # reuse lower-order derivatives: walk d1^p first, then d2^q
    h = f.spec.h
    along1 = f.data
    for p in range(m + 1):
        cur = along1
        for q in range(m - p + 1):
            if p + q > 0:
                best = max(best, float(np.max(np.abs(cur))))
            if q < m - p:
                cur = d1(cur, 1, h)
        if p < m:
            along1 = d1(along1, 0, h)
    return best


def holder_seminorm(f: GridField, alpha: float) -> float:
    """Discrete Hölder quotient over dyadic node separations.

    Pairs are taken along both axes and both diagonals at separations
    ``2^k`` nodes, ``k = 0 .. floor(log2 n)``.  Differences of vector or
    matrix fields use the max-entry norm.
    """
    if not (0.0 < alpha <= 1.0):
        raise NKError("config-invalid", f"alpha={alpha} must lie in (0, 1]")
    f.require_finite()
    n, h = f.spec.n, f.spec.h
    data = f.data.reshape(n, n, -1)
    best = 0.0
    k = 0
    while (1 << k) < n:
        s = 1 << k
        for di, dj in ((s, 0), (0, s), (s, s), (s, -s)):
            a = data[max(0, -di): n - max(0, di), max(0, -dj): n - max(0, dj)]
            b = data[max(0, di): n - max(0, -di) or None, max(0, dj): n - max(0, -dj) or None]
            if a.size == 0:
                continue
            diff = float(np.max(np.abs(a - b)))
            dist = h * math.hypot(di, dj)
            best = max(best, diff / dist**alpha)
        k += 1
    return best


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

_MAGIC = b"NKGF"
_VERSION = 1


def save_field(f: GridField, path: str | Path) -> None:
    """Binary container: magic, version, n, arity tag, little-endian float64 payload."""
    tag = f.arity.encode("ascii").ljust(8, b"\0")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<HI", _VERSION, f.spec.n))
        fh.write(tag)
        fh.write(np.ascontiguousarray(f.data, dtype="<f8").tobytes())


def load_field(path: str | Path, max_deriv: int = DEFAULT_MAX_DERIV) -> GridField:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != _MAGIC:
        raise NKError("invalid-field", f"{path}: bad magic {raw[:4]!r}")
    version, n = struct.unpack("<HI", raw[4:10])
    if version != _VERSION:
        raise NKError("invalid-field", f"{path}: unsupported version {version}")
    arity = raw[10:18].rstrip(b"\0").decode("ascii")
    spec = GridSpec(n, max_deriv)
    shape = (n, n) + ARITY_SHAPES.get(arity, (-1,))
    payload = np.frombuffer(raw[18:], dtype="<f8")
    if payload.size != int(np.prod(shape)):
        raise NKError("invalid-field", f"{path}: payload size {payload.size} does not match {shape}")
    return GridField(spec, arity, payload.reshape(shape).astype(float))


def save_field_csv(f: GridField, path: str | Path) -> None:
    """CSV with columns ``i, j, x1, x2, c0, c1, ...`` at 17 significant digits."""
    n = f.spec.n
    x1, x2 = f.spec.coords()
    flat = f.data.reshape(n, n, -1)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["i", "j", "x1", "x2"] + [f"c{c}" for c in range(flat.shape[-1])])
        for i, j in product(range(n), range(n)):
            w.writerow([i, j, f"{x1[i, j]:.17g}", f"{x2[i, j]:.17g}"] + [f"{v:.17g}" for v in flat[i, j]])


def load_field_csv(path: str | Path, arity: str, max_deriv: int = DEFAULT_MAX_DERIV) -> GridField:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    n = int(round(math.sqrt(len(rows))))
    spec = GridSpec(n, max_deriv)
    comps = len(rows[0]) - 4
    data = np.empty((n, n, comps))
    for row in rows:
        data[int(row[0]), int(row[1])] = [float(v) for v in row[4:]]
    return GridField(spec, arity, data.reshape((n, n) + ARITY_SHAPES[arity]))
