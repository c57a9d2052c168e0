"""Mesh export of a map into R^4: ASCII OBJ and legacy-ASCII VTK structured grids."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import NKError
from .grid import GridField
from .metric import pullback


def projection_matrix(spec: str | np.ndarray) -> np.ndarray:
    """A ``3 x 4`` projection from ``"drop:k"`` (0-based coordinate) or an explicit matrix."""
    if isinstance(spec, str):
        if not spec.startswith("drop:"):
            raise NKError("config-invalid", f"projection {spec!r} must be 'drop:k' or a 3x4 matrix")
        try:
            k = int(spec[5:])
        except ValueError:
            raise NKError("config-invalid", f"bad coordinate index in {spec!r}") from None
        if not 0 <= k < 4:
            raise NKError("config-invalid", f"coordinate index {k} outside 0..3")
        keep = [i for i in range(4) if i != k]
        P = np.zeros((3, 4))
        P[range(3), keep] = 1.0
        return P
    P = np.asarray(spec, dtype=float)
    if P.shape != (3, 4) or not np.isfinite(P).all():
        raise NKError("config-invalid", f"projection matrix must be finite 3x4, got shape {P.shape}")
    if np.linalg.matrix_rank(P) < 3:
        raise NKError("config-invalid", "projection matrix must have rank 3")
    return P


def project(u: GridField, projection) -> np.ndarray:
    if u.arity != "vec4":
        raise NKError("invalid-field", f"export needs a vec4 field, got {u.arity}")
    P = projection_matrix(projection)
    return np.einsum("ij,...j->...i", P, u.data)


def defect_attribute(g: GridField, du: np.ndarray) -> GridField:
    """Local max-entry norm of ``g - (grad u)^T grad u``."""
    return g.with_data(np.max(np.abs(g.data - pullback(du)), axis=-1), "scalar")


def _quads(n: int) -> np.ndarray:
    idx = np.arange(n * n).reshape(n, n)
    a = idx[:-1, :-1].ravel()
    b = idx[1:, :-1].ravel()
    c = idx[1:, 1:].ravel()
    d = idx[:-1, 1:].ravel()
    return np.stack([a, b, c, d], axis=1)


def write_obj(path: str | Path, u: GridField, projection="drop:3", attribute: GridField | None = None) -> int:
    """Quad mesh with one vertex per node; returns the vertex count.

    A scalar attribute is written as the first texture coordinate of each
    vertex (the second is 0) and referenced by every face.
    """
    X = project(u, projection).reshape(-1, 3)
    n = u.spec.n
    lines = [f"# nodes {n}x{n}", "o surface"]
    lines += [f"v {x:.17g} {y:.17g} {z:.17g}" for x, y, z in X]
    if attribute is not None:
        vals = np.asarray(attribute.data, float).ravel()
        if vals.size != n * n:
            raise NKError("grid-mismatch", "attribute size does not match the mesh")
        lines += [f"vt {v:.17g} 0" for v in vals]
        lines += [f"f {a + 1}/{a + 1} {b + 1}/{b + 1} {c + 1}/{c + 1} {d + 1}/{d + 1}" for a, b, c, d in _quads(n)]
    else:
        lines += [f"f {a + 1} {b + 1} {c + 1} {d + 1}" for a, b, c, d in _quads(n)]
    Path(path).write_text("\n".join(lines) + "\n")
    return n * n


def write_vtk(
    path: str | Path,
    u: GridField,
    projection="drop:3",
    attributes: dict[str, GridField] | None = None,
    title: str = "nashkuiper surface",
) -> int:
    """Legacy ASCII structured grid with scalar point data; returns the point count.

    Points are ordered with the first grid index varying fastest, as the
    format requires.
    """
    X = project(u, projection)
    n = u.spec.n
    pts = np.transpose(X, (1, 0, 2)).reshape(-1, 3)
    lines = [
        "# vtk DataFile Version 3.0",
        title.replace("\n", " ")[:255],
        "ASCII",
        "DATASET STRUCTURED_GRID",
        f"DIMENSIONS {n} {n} 1",
        f"POINTS {n * n} double",
    ]
    lines += [f"{x:.17g} {y:.17g} {z:.17g}" for x, y, z in pts]
    if attributes:
        lines.append(f"POINT_DATA {n * n}")
        for name, f in attributes.items():
            if f.arity != "scalar" or f.spec.n != n:
                raise NKError("grid-mismatch", f"attribute {name!r} must be a scalar field on the same grid")
            safe = "".join(ch if ch.isalnum() or ch in "_-" else "_" for ch in name)
            lines += [f"SCALARS {safe} double 1", "LOOKUP_TABLE default"]
            lines += [f"{v:.17g}" for v in np.transpose(f.data).ravel()]
    Path(path).write_text("\n".join(lines) + "\n")
    return n * n


def read_vtk_points(path: str | Path) -> tuple[tuple[int, int, int], np.ndarray, dict[str, np.ndarray]]:
    """Minimal reader for files written by :func:`write_vtk` (used for round-trip checks)."""
    tokens = Path(path).read_text().split("\n")
    if not tokens[0].startswith("# vtk DataFile Version"):
        raise NKError("config-invalid", "not a legacy VTK file")
    i = 4
    dims = tuple(int(v) for v in tokens[i].split()[1:4])
    npts = int(tokens[i + 1].split()[1])
    pts = np.array([[float(v) for v in tokens[i + 2 + k].split()] for k in range(npts)])
    i = i + 2 + npts
    data: dict[str, np.ndarray] = {}
    if i < len(tokens) and tokens[i].startswith("POINT_DATA"):
        i += 1
        while i < len(tokens) and tokens[i].startswith("SCALARS"):
            name = tokens[i].split()[1]
            vals = np.array([float(tokens[i + 2 + k]) for k in range(npts)])
            data[name] = vals
            i += 2 + npts
    return dims, pts, data
