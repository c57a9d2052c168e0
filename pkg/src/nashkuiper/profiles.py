"""Periodic oscillation profiles and their zero-mean antiderivative towers.

A profile is a finite trigonometric polynomial

    c0 + sum_m ( s_m sin(m t) + c_m cos(m t) ).

Level 0 of a tower is the profile itself, level ``i > 0`` is the
``i``-th antiderivative normalized to zero mean, and level ``-j`` is the
``j``-th derivative.  All levels are kept as coefficient lists, so
identities such as ``d/dt level(i) == level(i-1)`` hold coefficient-wise
and nothing is ever sampled or differenced.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import NKError
from .grid import DEFAULT_MAX_DERIV, GridField

MAX_DEPTH = 64
KINDS = (
    "nash_gamma",
    "nash_gammabar",
    "kuiper_gamma",
    "kuiper_gammabar",
    "kuiper_ddbar",
    "product_gammagammaprime",
)


@dataclass(frozen=True)
class TrigPoly:
    """``const + sum s sin(m t) + c cos(m t)`` over integer multiples ``m >= 1``."""

    terms: tuple[tuple[int, float, float], ...]
    const: float = 0.0

    def derivative(self) -> "TrigPoly":
        return TrigPoly(tuple((m, -m * c, m * s) for m, s, c in self.terms), 0.0)

    def antiderivative(self) -> "TrigPoly":
        """Zero-mean antiderivative; requires a zero constant term."""
        if self.const != 0.0:
            raise NKError(
                "unbounded-primitive",
                f"profile has mean {self.const:.6g}; its primitive grows linearly",
            )
        return TrigPoly(tuple((m, c / m, -s / m) for m, s, c in self.terms), 0.0)

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        out = np.full(t.shape, self.const)
        for m, s, c in self.terms:
            if s:
                out = out + s * np.sin(m * t)
            if c:
                out = out + c * np.cos(m * t)
        return out

    def sup_bound(self) -> float:
        return abs(self.const) + sum(abs(s) + abs(c) for _, s, c in self.terms)

    def as_dict(self) -> dict:
        return {"const": self.const, "terms": [{"m": m, "sin": s, "cos": c} for m, s, c in self.terms]}


def _base_profile(kind: str) -> TrigPoly:
    r2 = math.sqrt(2.0)
    table = {
        "nash_gamma": TrigPoly(((1, 1.0, 0.0),)),
        "nash_gammabar": TrigPoly(((1, 0.0, 1.0),)),
        "kuiper_gamma": TrigPoly(((1, r2, 0.0),)),
        "kuiper_gammabar": TrigPoly(((2, -0.25, 0.0),)),
        # Gamma^2 - 1 = 2 sin^2 t - 1 = -cos 2t
        "kuiper_ddbar": TrigPoly(((2, 0.0, -1.0),)),
        # Gamma Gamma' = 2 sin t cos t = sin 2t
        "product_gammagammaprime": TrigPoly(((2, 1.0, 0.0),)),
    }
    try:
        return table[kind]
    except KeyError:
        raise NKError("config-invalid", f"unknown profile kind {kind!r}; expected one of {KINDS}") from None


@dataclass(frozen=True)
class ProfileTower:
    kind: str
    depth: int
    levels: tuple[TrigPoly, ...]
    max_deriv: int = DEFAULT_MAX_DERIV

    def level(self, i: int) -> TrigPoly:
        if i > self.depth or i < -self.max_deriv:
            raise NKError(
                "level-out-of-range",
                f"level {i} outside [-{self.max_deriv}, {self.depth}] for tower {self.kind}",
            )
        if i >= 0:
            return self.levels[i]
        p = self.levels[0]
        for _ in range(-i):
            p = p.derivative()
        return p

    def __call__(self, i: int, phase):
        """``Gamma_i(phase)`` on raw arrays."""
        return self.level(i)(phase)

    def as_dict(self) -> dict:
        return {"kind": self.kind, "depth": self.depth, "levels": [p.as_dict() for p in self.levels]}

    def dump_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.as_dict(), indent=2))


def tower_from_poly(kind: str, base: TrigPoly, depth: int, max_deriv: int = DEFAULT_MAX_DERIV) -> ProfileTower:
    if not 0 <= depth <= MAX_DEPTH:
        raise NKError("config-invalid", f"tower depth {depth} outside [0, {MAX_DEPTH}]")
    if base.const != 0.0:
        raise NKError("unbounded-primitive", f"profile {kind} has nonzero mean {base.const:.6g}")
    levels = [base]
    for _ in range(depth):
        levels.append(levels[-1].antiderivative())
    return ProfileTower(kind, depth, tuple(levels), max_deriv)


def build_tower(kind: str, depth: int, max_deriv: int = DEFAULT_MAX_DERIV) -> ProfileTower:
    """Tower of zero-mean antiderivatives ``Gamma_0 .. Gamma_depth`` of a named profile."""
    return tower_from_poly(kind, _base_profile(kind), depth, max_deriv)


def evaluate(tower: ProfileTower, level: int, lam: float, t_field: GridField) -> GridField:
    """``Gamma_level(lam * t)`` node-wise (negative levels are derivatives)."""
    if t_field.arity != "scalar":
        raise NKError("invalid-field", f"phase field must be scalar, got {t_field.arity}")
    return t_field.with_data(tower(level, lam * t_field.data))


def phase(x: np.ndarray, eta) -> np.ndarray:
    """``t = <x, eta>`` for coordinate arrays ``x`` of shape ``(..., 2)``."""
    e = np.asarray(eta, float)
    return x[..., 0] * e[0] + x[..., 1] * e[1]
