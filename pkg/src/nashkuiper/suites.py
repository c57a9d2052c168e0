"""Identity suites shared by ``nashkuiper verify`` and the test-suite.

Each suite returns a :class:`SuiteResult` with the worst residual, its
tolerance and per-case details.  Random inputs are drawn from a seeded
generator so results are reproducible.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .cancellation import ibp_reconstruct
from .corrugation import kuiper_step, nash_spiral_step, verify_step_identity
from .errors import NKError
from .frames import frame_residuals, initial_normal_frame, propagate_frame
from .grid import GridField, GridSpec, check_resolution, from_function, grad
from .kallen import kallen_decompose
from .profiles import KINDS, build_tower
from .metric import abar_decompose, abar_reconstruct, r0_corner_search

STEP_TOL = 1e-9
PROFILE_TOL = 1e-14
IBP_TOL = 1e-9
KALLEN_TOL = 1e-9
FRAME_TOL = 1e-8


@dataclass
class SuiteResult:
    name: str
    residual: float
    tol: float
    passed: bool
    cases: list[dict] = field(default_factory=list)
    seconds: float = 0.0
    note: str = ""

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def _finish(name: str, cases: list[dict], tol: float, t0: float, key: str = "residual", extra_ok: bool = True, note: str = "") -> SuiteResult:
    worst = max((c[key] for c in cases), default=0.0)
    ok = extra_ok and all(c.get("passed", c[key] <= tol) for c in cases)
    return SuiteResult(name, worst, tol, ok, cases, time.perf_counter() - t0, note)


# ---------------------------------------------------------------------------
# random smooth inputs
# ---------------------------------------------------------------------------


def random_immersion(spec: GridSpec, rng: np.random.Generator, strength: float = 0.3) -> GridField:
    """``(x1, x2, 0, 0)`` plus a few low-frequency trigonometric bumps in every component."""
    c = rng.uniform(-1, 1, size=(4, 3, 4))

    def fn(x, y):
        out = []
        for k in range(4):
            base = x if k == 0 else (y if k == 1 else 0.0 * x)
            s = base
            for j in range(3):
                f1, f2, ph, amp = c[k, j]
                s = s + strength / (j + 1) * amp * np.sin((j + 1) * (f1 * x + f2 * y) + 3 * ph)
            out.append(s)
        return tuple(out)

    return from_function(spec, fn, "vec4")


def random_amplitude(spec: GridSpec, rng: np.random.Generator) -> GridField:
    c = rng.uniform(-1, 1, size=4)
    return from_function(spec, lambda x, y: 0.6 + 0.2 * np.sin(c[0] * x + c[1] * y + c[2]) * np.cos(c[3] * x * y), "scalar")


def random_tangent(spec: GridSpec, rng: np.random.Generator) -> GridField:
    c = rng.uniform(-1, 1, size=4)
    return from_function(
        spec, lambda x, y: (0.02 * np.sin(c[0] * x + c[1] * y), 0.02 * np.cos(c[2] * x - c[3] * y)), "vec2"
    )


def random_direction(rng: np.random.Generator) -> tuple[float, float]:
    th = rng.uniform(0, math.pi)
    return (math.cos(th), math.sin(th))


# ---------------------------------------------------------------------------
# suites
# ---------------------------------------------------------------------------


def profile_suite(n_phases: int = 1000, seed: int = 0) -> SuiteResult:
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    t = rng.uniform(-50, 50, n_phases)
    nash_g = build_tower("nash_gamma", 0).level(-1)(t)
    nash_gb = build_tower("nash_gammabar", 0).level(-1)(t)
    kg = build_tower("kuiper_gamma", 0).level(-1)(t)
    kgb = build_tower("kuiper_gammabar", 0).level(-1)(t)
    cases = [
        {"case": "nash", "residual": float(np.max(np.abs(nash_g**2 + nash_gb**2 - 1.0)))},
        {"case": "kuiper", "residual": float(np.max(np.abs(kg**2 + 2.0 * kgb - 1.0)))},
    ]
    for kind in KINDS:
        tw = build_tower(kind, 8)
        consts = [abs(p.const) for p in tw.levels]
        deriv = 0.0
        for i in range(1, tw.depth + 1):
            d = tw.level(i).derivative()
            deriv = max(deriv, float(np.max(np.abs(d(t[:50]) - tw.level(i - 1)(t[:50])))))
        cases.append({"case": f"tower:{kind}", "residual": max(max(consts), deriv), "zero_mean": max(consts) == 0.0})
    ok = all(c.get("zero_mean", True) for c in cases)
    return _finish("profiles", cases, PROFILE_TOL, t0, extra_ok=ok)


def step_suite(
    n: int = 513,
    count: int = 20,
    lam_max: float = 16 * math.pi,
    seed: int = 1,
    fault: dict[str, float] | None = None,
    kinds: tuple[str, ...] = ("nash", "kuiper"),
) -> SuiteResult:
    """Nash and Kuiper step identities on ``count`` random inputs each.

    Residuals are max-entry and relative to ``sup |a^2 eta (x) eta|``.
    ``fault`` scales named Kuiper error terms to exercise the failure path.
    """
    t0 = time.perf_counter()
    spec = GridSpec(n)
    check_resolution(spec, lam_max, True, "step frequency")
    rng = np.random.default_rng(seed)
    cases = []
    for i in range(count):
        u = random_immersion(spec, rng)
        E1, E2 = initial_normal_frame(u)
        a = random_amplitude(spec, rng)
        eta = random_direction(rng)
        lam = float(rng.uniform(0.5, 1.0) * lam_max)
        if "nash" in kinds:
            r = nash_spiral_step(u, E1, E2, a, eta, lam)
            v = verify_step_identity(r, STEP_TOL)
            cases.append({"case": f"nash[{i}]", "lam": lam, "residual": v["residual"], "passed": v["passed"]})
        if "kuiper" in kinds:
            w = random_tangent(spec, rng)
            E = E1 if i % 2 == 0 else E2
            r = kuiper_step(u, E, a, eta, lam, w, fault=fault)
            v = verify_step_identity(r, STEP_TOL)
            cases.append({"case": f"kuiper[{i}]", "lam": lam, "residual": v["residual"], "passed": v["passed"]})
    return _finish("steps", cases, STEP_TOL, t0)


def trig_sym2(spec: GridSpec) -> GridField:
    return from_function(
        spec, lambda x, y: (1 + 0.3 * np.sin(2 * x + y), 0.2 * np.cos(x - 3 * y), 0.5 + 0.1 * np.sin(x * y)), "sym2"
    )


def ibp_suite(n: int = 513, depths=(0, 1, 2, 4), lam: float = 8 * math.pi) -> SuiteResult:
    """Reconstruction of ``Gamma(lam t)/lam H`` for every direction and depth, plus the remainder scaling."""
    t0 = time.perf_counter()
    spec = GridSpec(n)
    check_resolution(spec, 2 * lam, True, "IBP frequency")
    H = trig_sym2(spec)
    cases = []
    for d in ("eta1", "eta2", "eta3"):
        for k in depths:
            tw = build_tower("kuiper_gamma", k + 1)
            r1 = ibp_reconstruct(H, d, k, tw, lam)
            r2 = ibp_reconstruct(H, d, k, tw, 2 * lam)
            slope = math.log2(r1["remainder_norm"] / r2["remainder_norm"])
            slope_ok = abs(slope - (k + 2)) <= 0.25 * (k + 2)
            res = max(r1["residual"], r2["residual"])
            cases.append(
                {
                    "case": f"{d}/k={k}",
                    "residual": res,
                    "remainder_slope": slope,
                    "expected_slope": k + 2,
                    "passed": res <= IBP_TOL and slope_ok,
                }
            )
    return _finish("ibp", cases, IBP_TOL, t0)


def kallen_field(spec: GridSpec) -> GridField:
    return from_function(
        spec, lambda x, y: (1.5 + 0.1 * np.sin(2 * np.pi * x), 0.5 + 0.05 * np.cos(2 * np.pi * y), 1.5 + 0 * x), "sym2"
    )


def kallen_suite(n: int = 257, N: int = 3, lam: float = 40 * math.pi) -> SuiteResult:
    t0 = time.perf_counter()
    spec = GridSpec(n)
    H = kallen_field(spec)
    r1 = kallen_decompose(H, lam, 2 * lam, N)
    r2 = kallen_decompose(H, 2 * lam, 4 * lam, N)
    rec = float(np.max(np.abs(r1.reconstruct(lam, 2 * lam) - H.data)))
    hist = r1.residual_history
    decreasing = all(b < a for a, b in zip(hist[:-1], hist[1:]))
    ratio = hist[-1] / r2.residual_history[-1]
    target = 2.0 ** (2 * N)
    cases = [
        {"case": "reconstruction", "residual": rec, "passed": rec <= KALLEN_TOL},
        {"case": "history", "residual": 0.0, "history": hist, "passed": decreasing},
        {
            "case": "lambda-doubling",
            "residual": 0.0,
            "ratio": ratio,
            "target": target,
            "passed": abs(ratio / target - 1.0) <= 0.3,
        },
    ]
    return _finish("kallen", cases, KALLEN_TOL, t0)


def propagation_slope(n: int = 129, eps=(1e-2, 5e-3, 2.5e-3), seed: int = 3) -> tuple[float, list[float]]:
    """Slope of ``log |E(u + eps v) - E(u)|`` against ``log eps``."""
    spec = GridSpec(n)
    rng = np.random.default_rng(seed)
    u = random_immersion(spec, rng)
    v = random_immersion(spec, rng, strength=1.0)
    E1, E2 = initial_normal_frame(u)
    diffs = []
    for e in eps:
        w = u + v.with_data(e * v.data)
        n1, _ = propagate_frame(u, w, E1, E2, rho=1.0)
        diffs.append(float(np.max(np.abs(n1.data - E1.data))))
    slope = float(np.polyfit(np.log(eps), np.log(diffs), 1)[0])
    return slope, diffs


def frame_suite(n: int = 257, count: int = 5, seed: int = 2) -> SuiteResult:
    t0 = time.perf_counter()
    spec = GridSpec(n)
    rng = np.random.default_rng(seed)
    cases = []
    for i in range(count):
        u = random_immersion(spec, rng)
        E1, E2 = initial_normal_frame(u)
        r0 = frame_residuals(_grad(u), E1.data, E2.data)
        v = u.with_data(u.data + 0.02 * random_immersion(spec, rng).data)
        n1, n2 = propagate_frame(u, v, E1, E2, rho=1.0)
        r1 = frame_residuals(_grad(v), n1.data, n2.data)
        res = max(max(r0.values()), max(r1.values()))
        cases.append({"case": f"frame[{i}]", "residual": res, "passed": res <= FRAME_TOL})
    slope, diffs = propagation_slope()
    cases.append({"case": "propagation-slope", "residual": 0.0, "slope": slope, "diffs": diffs, "passed": abs(slope - 1) <= 0.05})
    return _finish("frames", cases, FRAME_TOL, t0)


def _grad(u: GridField) -> np.ndarray:
    return grad(u.data, u.spec.h)


def decomposition_suite(samples: int = 10_000, seed: int = 4) -> SuiteResult:
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    M = rng.uniform(-3, 3, size=(samples, 3))
    rec = abar_reconstruct(*abar_decompose(M))
    res = float(np.max(np.abs(rec - M) / np.maximum(1.0, np.abs(M))))
    corners = r0_corner_search(0.25)
    over = r0_corner_search(0.26)
    cases = [
        {"case": "reconstruction", "residual": res, "passed": res <= 1e-14},
        {
            "case": "corners r=0.25",
            "residual": 0.0,
            "worst": corners["max_deviation"],
            "count": corners["corners"],
            "passed": bool(corners["ok"]) and corners["corners"] == 64,
        },
        {"case": "corners r=0.26", "residual": 0.0, "worst": over["max_deviation"], "passed": not over["ok"]},
    ]
    return _finish("decomposition", cases, 1e-14, t0)


SUITES = {
    "profiles": profile_suite,
    "steps": step_suite,
    "ibp": ibp_suite,
    "kallen": kallen_suite,
    "frames": frame_suite,
    "decomposition": decomposition_suite,
}


def run_suites(names=None, fault: dict[str, float] | None = None, n: int = 513, count: int = 20, lam_max: float = 16 * math.pi) -> list[SuiteResult]:
    names = list(names or SUITES)
    out = []
    for name in names:
        if name not in SUITES:
            raise NKError("config-invalid", f"unknown suite {name!r}; choose from {sorted(SUITES)}")
        if name == "steps":
            out.append(step_suite(n=n, count=count, lam_max=lam_max, fault=fault))
        else:
            out.append(SUITES[name]())
    return out
