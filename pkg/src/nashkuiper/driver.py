"""Outer iteration: doubly exponential schedule, feasibility report and stage sequencing."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import NKError
from .frames import ImmersionState
from .grid import GridField, GridSpec, grad, holder_seminorm
from .metric import DIRECTIONS, H0, pullback
from .stage import H0_ARR, InitialStageReport, StageParams, StageTrace, initial_stage, stage

log = logging.getLogger(__name__)

R0 = DIRECTIONS.r0
H0_NORM = H0.max_entry()


@dataclass(frozen=True)
class Schedule:
    """``delta_n = a^{-b^n}``, ``mu_n = a^{tau + (b^n - 1)/(2 theta)}``, ``sigma_{n+1} = (delta_n/delta_{n+1})^{1/S}``.

    ``S = N K`` and ``J = 2K + N`` come from the Stage; ``p`` is the exponent
    of the gate ``sigma^p delta^{1/2} <= 1`` (``(3N+3)/2`` by default).
    ``r_beta`` is the regularity ``r + beta`` of the metric, capped at 2.
    """

    a: float = 1.0e4
    b: float = 1.05
    theta: float = 0.3
    tau: float = 4.0
    N: int = 4
    K: int = 4
    p: float | None = None
    r_beta: float = 2.0

    def __post_init__(self) -> None:
        if not (self.a > 1 and self.b > 1):
            raise NKError("config-invalid", f"schedule needs a > 1 and b > 1, got a={self.a}, b={self.b}")
        if not (0 < self.theta < 1):
            raise NKError("config-invalid", f"theta={self.theta} must lie in (0, 1)")

    @property
    def S(self) -> int:
        return self.N * self.K

    @property
    def J(self) -> int:
        return 2 * self.K + self.N

    @property
    def p_exp(self) -> float:
        return (3 * self.N + 3) / 2.0 if self.p is None else self.p

    def delta(self, n: int) -> float:
        # built by the recursion so that delta_{n+1} = delta_n / sigma_{n+1}^S
        # holds exactly in floating point, as the stages use it
        d = 1.0 / self.a
        for m in range(1, n + 1):
            d = d / self.sigma(m) ** self.S
        return d

    def mu(self, n: int) -> float:
        return self.a ** (self.tau + (self.b**n - 1.0) / (2.0 * self.theta))

    def sigma(self, n: int) -> float:
        """``sigma_n`` for ``n >= 1``, i.e. the ratio used by the stage from ``n-1`` to ``n``."""
        if n < 1:
            raise NKError("config-invalid", "sigma_n is defined for n >= 1")
        return self.a ** ((self.b**n - self.b ** (n - 1)) / self.S)

    def theta_ceiling(self) -> float:
        return min(self.r_beta / 2.0, 1.0 / (1.0 + 2.0 * self.J / self.S))

    def check_alpha(self, alpha: float) -> None:
        """Gate ``alpha < theta < min{(r+beta)/2, 1/(1+2J/S)}``."""
        top = self.theta_ceiling()
        if not (0 < alpha < top):
            raise NKError(
                "alpha-out-of-range",
                f"Holder exponent range 0 < alpha < min{{(r+beta)/2, 1/(1+2J/S)}} violated: "
                f"alpha={alpha:.6g}, ceiling={top:.6g}",
                alpha=alpha,
                ceiling=top,
            )
        if not (alpha < self.theta < top):
            raise NKError(
                "alpha-out-of-range",
                f"smoothing exponent range alpha < theta < min{{(r+beta)/2, 1/(1+2J/S)}} violated: "
                f"alpha={alpha:.6g}, theta={self.theta:.6g}, ceiling={top:.6g}",
                alpha=alpha,
                theta=self.theta,
                ceiling=top,
            )

    def stage_params(self, n: int, base: StageParams) -> StageParams:
        return replace(base, N=self.N, K=self.K, sigma=self.sigma(n + 1), delta=self.delta(n), mu=self.mu(n))

    def as_dict(self) -> dict:
        return {
            "a": self.a,
            "b": self.b,
            "theta": self.theta,
            "tau": self.tau,
            "N": self.N,
            "K": self.K,
            "S": self.S,
            "J": self.J,
            "p": self.p_exp,
            "r_beta": self.r_beta,
        }


def validate_schedule(
    sched: Schedule,
    horizon: int,
    measured_C: float = 1.0,
    sigma_floor: float = 1.0,
    g_norm: float = 0.0,
    delta_ceiling: float = 1.0,
    spec: GridSpec | None = None,
    base: StageParams | None = None,
) -> dict:
    """Evaluate the per-iteration feasibility inequalities for ``n = 0 .. horizon - 1``.

    Report only; nothing is raised.  ``g_norm`` is ``|g|_{r,beta}`` and
    ``measured_C`` the Stage constant.  With ``spec`` the stage frequencies
    of every iteration are also checked against the grid ceiling.
    """
    rows = []
    first = None
    for n in range(horizon):
        d0, d1 = sched.delta(n), sched.delta(n + 1)
        m0, m1 = sched.mu(n), sched.mu(n + 1)
        s1 = sched.sigma(n + 1)
        checks = [
            ("sigma_{n+1} >= sigma_floor", s1, sigma_floor, s1 >= sigma_floor),
            ("sigma_{n+1}^p delta_n^(1/2) <= 1", s1**sched.p_exp * math.sqrt(d0), 1.0, s1**sched.p_exp * math.sqrt(d0) <= 1.0),
            ("delta_{n+1} <= delta_ceiling", d1, delta_ceiling, d1 <= delta_ceiling),
            ("mu_{n+1} delta_{n+1}^(1/2) >= 1", m1 * math.sqrt(d1), 1.0, m1 * math.sqrt(d1) >= 1.0),
            (
                "(r0/5) delta_n/sigma^S + |g|/mu_n^(r+beta) <= (r0/4) delta_{n+1}",
                R0 / 5 * d0 / s1**sched.S + g_norm / m0**sched.r_beta,
                R0 / 4 * d1,
                R0 / 5 * d0 / s1**sched.S + g_norm / m0**sched.r_beta <= R0 / 4 * d1 * (1 + 1e-12),
            ),
            (
                "C mu_n delta_n^(1/2) sigma^J <= delta_{n+1}^(1/2) mu_{n+1}",
                measured_C * m0 * math.sqrt(d0) * s1**sched.J,
                math.sqrt(d1) * m1,
                measured_C * m0 * math.sqrt(d0) * s1**sched.J <= math.sqrt(d1) * m1,
            ),
        ]
        if spec is not None:
            sp = sched.stage_params(n, base or StageParams())
            worst = max(
                (r["frequency"] / r["limit"] for r in sp.resolution_report(spec)),
                default=0.0,
            )
            checks.append(("stage frequencies resolvable (max f/f_max <= 1)", worst, 1.0, worst <= 1.0 + 1e-12))
        row = {"n": n, "delta_n": d0, "delta_next": d1, "mu_n": m0, "mu_next": m1, "sigma_next": s1, "checks": []}
        for name, lhs, rhs, ok in checks:
            row["checks"].append({"name": name, "lhs": lhs, "rhs": rhs, "ok": bool(ok)})
            if not ok and first is None:
                first = {"n": n, "name": name, "lhs": lhs, "rhs": rhs}
        rows.append(row)
    return {"schedule": sched.as_dict(), "horizon": horizon, "feasible": first is None, "first_failure": first, "rows": rows}


def format_failure(report: dict) -> str:
    f = report.get("first_failure")
    if not f:
        return "schedule feasible"
    return f"n={f['n']}: {f['name']} violated: lhs={f['lhs']:.6g}, rhs={f['rhs']:.6g}"


# ---------------------------------------------------------------------------
# iterates and reports
# ---------------------------------------------------------------------------


@dataclass
class Iterate:
    n: int
    state: ImmersionState
    delta: float
    mu: float
    sigma: float | None
    metrics: dict = field(default_factory=dict)
    trace: StageTrace | None = None


def _c1(du_a: np.ndarray, du_b: np.ndarray, u_a: np.ndarray, u_b: np.ndarray) -> float:
    return max(float(np.max(np.abs(u_a - u_b))), float(np.max(np.abs(du_a - du_b))))


def _c2(du_a: np.ndarray, du_b: np.ndarray, h: float) -> float:
    return float(np.max(np.abs(grad(du_a - du_b, h))))


def iterate_metrics(g: GridField, it: Iterate, u_bar: GridField) -> dict:
    P = pullback(it.state.du)
    return {
        "n": it.n,
        "delta": it.delta,
        "mu": it.mu,
        "sigma": it.sigma,
        "defect": float(np.max(np.abs(g.data - P))),
        "shifted_defect": float(np.max(np.abs(g.data - it.delta * H0_ARR - P))),
        "shifted_target": R0 / 4 * it.delta,
        "defect_target": (R0 / 4 + H0_NORM) * it.delta,
        "c0_to_ubar": float(np.max(np.abs(it.state.u.data - u_bar.data))),
        "u_c2": float(np.max(np.abs(grad(it.state.du, g.spec.h)))),
    }


@dataclass
class ConvergenceReport:
    rows: list[dict]
    ratios: list[float]
    status: str
    alpha: float
    holder: list[float]
    defect_trend: list[float]
    truncated: bool = False
    stop_reason: str = ""

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def convergence_report(iterates: list[Iterate], alpha: float = 0.1, truncated: bool = False, stop_reason: str = "") -> ConvergenceReport:
    """Per-iteration increments and the Holder-interpolation surrogate.

    The surrogate ``|du_{n+1} - du_n|_2^alpha |u_{n+1} - u_n|_1^{1-alpha}``
    bounds the ``C^{1,alpha}`` increment; the report gives the ratios of
    successive surrogates.  Zero increments are reported as "stationary".
    """
    if len(iterates) < 2:
        raise NKError("config-invalid", "convergence_report needs at least two iterates")
    rows = []
    surr = []
    for a, b in zip(iterates[:-1], iterates[1:]):
        h = a.state.spec.h
        c1 = _c1(b.state.du, a.state.du, b.state.u.data, a.state.u.data)
        c2 = _c2(b.state.du, a.state.du, h)
        s = (c2**alpha) * (c1 ** (1 - alpha)) if c1 > 0 else 0.0
        surr.append(s)
        rows.append({"n": a.n, "c1_increment": c1, "c2_increment": c2, "surrogate": s})
    if all(s == 0.0 for s in surr):
        status = "stationary"
        ratios: list[float] = []
    else:
        ratios = [s1 / s0 if s0 > 0 else float("inf") for s0, s1 in zip(surr[:-1], surr[1:])]
        status = "contracting" if all(r < 1 for r in ratios) else ("single-step" if not ratios else "not-contracting")
    holder = []
    for it in iterates:
        du = GridField(it.state.spec, "mat42", it.state.du)
        holder.append(holder_seminorm(du, alpha))
    defects = [it.metrics.get("defect", float("nan")) for it in iterates]
    return ConvergenceReport(rows, ratios, status, alpha, holder, defects, truncated, stop_reason)


@dataclass
class RunResult:
    iterates: list[Iterate]
    report: ConvergenceReport | None
    initial: InitialStageReport
    schedule: Schedule
    status: str
    error: dict | None = None

    def metrics_rows(self) -> list[dict]:
        return [it.metrics for it in self.iterates]


def default_tau(n_terms: int, r_beta: float = 2.0) -> float:
    """``tau = (1 + 1/(r+beta)) N0 + 1`` from the initial stage's spiral count."""
    return (1.0 + 1.0 / r_beta) * n_terms + 1.0


def run(
    g: GridField,
    u_bar: GridField,
    alpha: float,
    epsilon: float,
    sched: Schedule,
    params: StageParams,
    n_iters: int,
    *,
    initial_ratio: float | None = None,
    tau_from_initial: bool = False,
    callback=None,
) -> RunResult:
    """Initial stage followed by up to ``n_iters`` stages along the schedule.

    A stage whose frequencies exceed the grid ceiling ends the run cleanly
    with status "truncated-by-resolution".  Stage errors are re-raised with
    the iteration index and the partial result in ``err.context``.
    """
    sched.check_alpha(alpha)
    if not 0 < epsilon:
        raise NKError("config-invalid", f"epsilon={epsilon} must be positive")
    spec = u_bar.spec
    delta0 = sched.delta(0)
    st, init = initial_stage(g, u_bar, delta0, ratio=initial_ratio)
    if tau_from_initial:
        sched = replace(sched, tau=default_tau(init.terms, sched.r_beta))
    st.delta, st.mu = delta0, sched.mu(0)
    base = replace(params, gamma_lower=max(params.gamma_lower, st.meta.get("gamma_lower", params.gamma_lower)))
    it0 = Iterate(0, st, delta0, sched.mu(0), None)
    it0.metrics = iterate_metrics(g, it0, u_bar)
    iterates = [it0]
    status, stop = "ok", ""
    err_out = None

    def proximity(it: Iterate) -> None:
        if it.metrics["c0_to_ubar"] > epsilon:
            raise NKError(
                "proximity-violated",
                f"|u_n - u_bar|_0 <= epsilon violated at n={it.n}: lhs={it.metrics['c0_to_ubar']:.6g}, rhs={epsilon:.6g}",
                iteration=it.n,
            )

    proximity(it0)
    if callback:
        callback(it0)
    for n in range(n_iters):
        sp = sched.stage_params(n, base)
        if not all(r["ok"] for r in sp.resolution_report(spec)):
            status, stop = "truncated-by-resolution", f"stage {n} frequencies exceed the grid ceiling"
            log.warning("run truncated at n=%d: %s", n, stop)
            break
        try:
            new, trace = stage(g, iterates[-1].state, sp)
        except NKError as err:
            err.context.setdefault("iteration", n)
            err.context["partial"] = RunResult(iterates, None, init, sched, "failed", err.as_dict())
            raise
        it = Iterate(n + 1, new, sched.delta(n + 1), sched.mu(n + 1), sp.sigma, trace=trace)
        it.metrics = iterate_metrics(g, it, u_bar)
        it.metrics["stage_defect_out"] = trace.summary.get("defect_out")
        iterates.append(it)
        proximity(it)
        if callback:
            callback(it)
    report = convergence_report(iterates, alpha, status != "ok", stop) if len(iterates) >= 2 else None
    return RunResult(iterates, report, init, sched, status, err_out)


def write_manifest(path: str | Path, payload: dict) -> None:
    from .stage import _jsonable

    Path(path).write_text(json.dumps(_jsonable(payload), indent=2, sort_keys=True))
