"""The initial Stage (Nash spirals) and the main Stage (triple corrugations).

All gradients are carried analytically: every step returns the gradient
of the new immersion assembled by the product rule, and the next step
uses it directly.  Frames, tangent fields and amplitudes are the only
finite-differenced fields.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .cancellation import DIRECTION_VECTORS, RESIDUAL_VECTORS, build_w_field_array
from .corrugation import (
    _axis_aligned,
    kuiper_apply,
    kuiper_prepare,
    nash_spiral_step_array,
)
from .errors import NKError
from .frames import (
    ImmersionState,
    check_frame,
    compatible_frame_gradients,
    initial_normal_frame,
    propagate_frame_array,
    tangent_frame_array,
)
from .grid import GridField, GridSpec, check_resolution, grad, mollify, sup_norm
from .kallen import kallen_decompose
from .profiles import phase
from .metric import DIRECTIONS, H0, immersion_bounds_check, mat_to_sym, pou_decompose, pullback, sym_eigenvalues

log = logging.getLogger(__name__)

R0 = DIRECTIONS.r0
H0_ARR = H0.as_array()
H0_NORM = 1.5  # max-entry norm of H0


def _sup(a: np.ndarray) -> float:
    return float(np.max(np.abs(a))) if a.size else 0.0


def _coords(spec: GridSpec) -> np.ndarray:
    return np.stack(spec.coords(), axis=-1)


def second_derivative_sup(du: np.ndarray, h: float) -> float:
    """``max |d^2 u|`` over nodes and components, from an assembled gradient."""
    return _sup(grad(du, h))


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


@dataclass
class StageParams:
    """Parameters of one Stage and its derived frequency/defect schedule.

    ``normalization`` selects how the Kallen input is scaled: ``"delta"``
    divides the target defect by ``delta_k``; ``"increment"`` divides by
    ``delta_k - delta_{k+1}``, which keeps the input at ``H0`` when the
    defect is already on target and ``sigma^N`` is moderate.

    ``ibp_depth`` is the integration-by-parts depth of the first two
    corrugations (``N`` when unset); ``third_depth`` that of the third.
    """

    N: int = 4
    K: int = 4
    sigma: float = 1.26
    delta: float = 0.031
    mu: float = 5.7
    gamma_lower: float = 2.0
    rho: float = 0.5
    normalization: str = "increment"
    third_depth: int = 1
    ibp_depth: int | None = None
    mollify: bool = True
    check_identities: bool = True
    strict_kallen: bool = False
    block: int = 256

    @property
    def depth(self) -> int:
        return self.N if self.ibp_depth is None else self.ibp_depth

    def delta_k(self, k: int) -> float:
        return self.delta / self.sigma ** (k * self.N)

    def mu_k(self, k: int) -> float:
        return self.mu * self.sigma ** (2 * k + 0.5 * self.N * (k + 1))

    def frequencies(self, k: int) -> tuple[float, float, float]:
        """``(lam, kappa, mu_{k+1})`` used by inner step ``k``."""
        m = self.mu_k(k)
        return m * self.sigma, m * self.sigma**2, self.mu_k(k + 1)

    def gates(self) -> list[dict]:
        """Parameter inequalities that must hold before a Stage runs."""
        N, s, d, m = self.N, self.sigma, self.delta, self.mu
        return [
            {"name": "N >= 4", "lhs": N, "rhs": 4, "ok": N >= 4},
            {"name": "K >= 4", "lhs": self.K, "rhs": 4, "ok": self.K >= 4},
            {"name": "sigma > 1", "lhs": s, "rhs": 1.0, "ok": s > 1.0},
            {"name": "0 < delta < 1", "lhs": d, "rhs": 1.0, "ok": 0.0 < d < 1.0},
            {"name": "mu*delta^(1/2) >= 1", "lhs": m * math.sqrt(d), "rhs": 1.0, "ok": m * math.sqrt(d) >= 1.0},
            {
                "name": "sigma^(3N+3)*delta <= 1",
                "lhs": s ** (3 * N + 3) * d,
                "rhs": 1.0,
                "ok": s ** (3 * N + 3) * d <= 1.0,
            },
        ]

    def resolution_report(self, spec: GridSpec) -> list[dict]:
        rows = []
        for k in range(self.K):
            lam, kappa, mnext = self.frequencies(k)
            for what, f, diag in (("lambda", lam, False), ("kappa", kappa, True), ("mu_next", mnext, False)):
                lim = spec.max_frequency(diag)
                rows.append({"k": k, "what": what, "frequency": f, "limit": lim, "ok": f <= lim * (1 + 1e-12)})
        return rows

    def validate(self, spec: GridSpec | None = None) -> None:
        if self.normalization not in ("delta", "increment"):
            raise NKError("config-invalid", f"normalization must be 'delta' or 'increment', got {self.normalization!r}")
        if self.third_depth < 0 or (self.ibp_depth is not None and self.ibp_depth < 0):
            raise NKError("config-invalid", "integration-by-parts depths must be >= 0")
        for g in self.gates():
            if not g["ok"]:
                raise NKError(
                    "assumption-violated",
                    f"stage gate {g['name']} violated: lhs={g['lhs']:.6g}, rhs={g['rhs']:.6g}",
                    gate=g["name"],
                    lhs=g["lhs"],
                )
        if spec is not None:
            for k in range(self.K):
                lam, kappa, mnext = self.frequencies(k)
                check_resolution(spec, lam, False, f"lambda at k={k}")
                check_resolution(spec, kappa, True, f"kappa at k={k}")
                check_resolution(spec, mnext, False, f"mu_{k + 1}")
            depth = max(self.third_depth, self.depth)
            if depth + 1 > spec.max_deriv:
                raise NKError(
                    "derivative-depth-exceeded",
                    f"cancellation depth {depth} needs {depth + 1} derivatives, budget {spec.max_deriv}",
                )

    def as_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# trace
# ---------------------------------------------------------------------------


@dataclass
class StageTrace:
    params: dict
    rows: list[dict] = field(default_factory=list)
    per_k: list[dict] = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    status: str = "ok"
    error: dict | None = None

    CSV_FIELDS = (
        "k",
        "step",
        "delta_k",
        "delta_next",
        "mu_k",
        "frequency",
        "defect_before",
        "defect_after",
        "amp_min",
        "amp_max",
        "identity_residual",
        "contract_residual",
        "G_sup",
        "Gcal_sup",
        "R1_sup",
        "R2_sup",
        "F_sup",
        "frame_gap",
        "frame_normal",
        "frame_ortho",
    )

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(self.CSV_FIELDS)
            for r in self.rows:
                wr.writerow([_fmt(r.get(k, "")) for k in self.CSV_FIELDS])

    def as_dict(self) -> dict:
        return {
            "params": self.params,
            "status": self.status,
            "error": self.error,
            "summary": self.summary,
            "per_k": self.per_k,
            "rows": self.rows,
        }

    def to_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(_jsonable(self.as_dict()), indent=2))


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.17g}"
    return str(v)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, float) and not math.isfinite(obj):
        return str(obj)
    return obj


# ---------------------------------------------------------------------------
# one Kuiper corrugation with cancellation
# ---------------------------------------------------------------------------


@dataclass
class CorrugationOutput:
    u: np.ndarray
    du: np.ndarray
    G: np.ndarray
    identity_residual: float
    contract_residual: float
    norms: dict


def _corrugate(
    x: np.ndarray,
    u: np.ndarray,
    du: np.ndarray,
    e: np.ndarray,
    a: np.ndarray,
    direction: str,
    lam: float,
    depth: int,
    h: float,
    max_deriv: int,
    labels: tuple[str, ...],
    check: bool,
    block: int,
) -> CorrugationOutput:
    eta = DIRECTION_VECTORS[direction]
    t = phase(x, eta)
    r = RESIDUAL_VECTORS[direction]
    rr = np.array([r[0] * r[0], r[0] * r[1], r[1] * r[1]])
    # Everything is computed on row blocks.  Each block carries a halo wide
    # enough for the nested derivatives (one for the frame gradients, depth+2
    # inside the W construction, two rows each), so the interior values equal
    # the full-grid ones exactly while temporaries stay block sized.
    n = u.shape[0]
    halo = 2 * (depth + 3)
    u_new = np.empty_like(u)
    du_new = np.empty_like(du)
    G = np.empty(u.shape[:2])
    scale = 1e-300
    contract = 0.0
    ident_abs = 0.0
    norms: dict[str, float] = {}
    for start in range(0, n, block):
        stop = min(n, start + block)
        lo, hi = max(0, start - halo), min(n, stop + halo)
        prep = kuiper_prepare(du[lo:hi], e[lo:hi], a[lo:hi], eta, h)
        wf = build_w_field_array({k: prep.S[k] for k in labels}, lam, depth, direction, t[lo:hi], h, max_deriv)
        inner = slice(start - lo, stop - lo)
        sl = slice(start, stop)
        W, grad_W, Gcal = wf.W[inner], wf.grad_W[inner], wf.Gcal[inner]
        G[sl] = wf.G[inner]
        un, gn, principal, errors = kuiper_apply(prep.rows(inner), x[sl], u[sl], lam, W, grad_W)
        del prep, wf
        u_new[sl] = un
        du_new[sl] = gn
        scale = max(scale, _sup(principal))
        osc = sum(errors[k] for k in labels)
        lhs = osc + 2.0 * mat_to_sym(grad_W) - Gcal - G[sl][..., None] * rr
        contract = max(contract, _sup(lhs))
        if check:
            diff = pullback(gn) - pullback(du[sl]) - principal - sum(errors.values())
            ident_abs = max(ident_abs, _sup(diff))
        for k, v in errors.items():
            norms[k] = max(norms.get(k, 0.0), _sup(v))
        norms["Gcal"] = max(norms.get("Gcal", 0.0), _sup(Gcal))
        norms["W"] = max(norms.get("W", 0.0), _sup(W))
    contract /= scale
    ident = ident_abs / scale if check else float("nan")
    norms["G"] = _sup(G)
    return CorrugationOutput(u_new, du_new, G, ident, contract, norms)


def _frames_row(du: np.ndarray, e1: np.ndarray, e2: np.ndarray) -> dict:
    res = check_frame(du, e1, e2)
    return {"frame_normal": res["normal"], "frame_ortho": max(res["orthogonal"], res["unit"])}


def _propagate_or_record(
    du: np.ndarray, c: CorrugationOutput, e1: np.ndarray, e2: np.ndarray, rho: float, rows: list[dict], row: dict
):
    """Propagate the frame; on failure attach the rows so far plus the failing step."""
    try:
        return propagate_frame_array(du, c.du, e1, e2, rho)
    except NKError as err:
        gap = np.max(np.abs(c.du - du), axis=(-2, -1))
        i, j = np.unravel_index(int(np.argmax(gap)), gap.shape)
        row = dict(
            row,
            identity_residual=c.identity_residual,
            contract_residual=c.contract_residual,
            G_sup=c.norms["G"],
            Gcal_sup=c.norms["Gcal"],
            R1_sup=c.norms["R1"],
            R2_sup=c.norms["R2"],
            W_sup=c.norms["W"],
            frame_gap=float(gap[i, j]),
            worst_node=(int(i), int(j)),
        )
        err.context["rows"] = rows + [row]
        raise


def triple_corrugation(
    state: ImmersionState,
    g0: np.ndarray,
    delta_k: float,
    delta_next: float,
    mu_k: float,
    sigma: float,
    N: int,
    params: StageParams | None = None,
    k: int = 0,
    frequencies: tuple[float, float, float] | None = None,
) -> tuple[ImmersionState, list[dict]]:
    """Inner step ``k``: Kallen decomposition and three Kuiper corrugations.

    ``g0`` is raw sym2 data of the (mollified) target metric.  The
    frequencies default to ``(mu_k sigma, mu_k sigma^2, mu_k sigma^{N/2+2})``.
    """
    params = params or StageParams(N=N, sigma=sigma)
    spec = state.spec
    h = spec.h
    md = spec.max_deriv
    x = _coords(spec)
    if frequencies is None:
        lam, kappa, mu_next = mu_k * sigma, mu_k * sigma**2, mu_k * sigma ** (0.5 * N + 2)
    else:
        lam, kappa, mu_next = frequencies
    check_resolution(spec, lam, False, "lambda")
    check_resolution(spec, kappa, True, "kappa")
    check_resolution(spec, mu_next, False, "mu_next")

    u, du = state.u.data, state.du
    E1, E2 = state.E1.data, state.E2.data
    target = g0 - delta_next * H0_ARR
    D = target - pullback(du)
    scale = delta_k - delta_next if params.normalization == "increment" else delta_k
    base = {"k": k, "delta_k": delta_k, "delta_next": delta_next, "mu_k": mu_k}
    rows: list[dict] = []

    kal = kallen_decompose(GridField(spec, "sym2", D / scale), lam, kappa, N, strict=params.strict_kallen)
    sq = math.sqrt(scale)
    a1, a2, a3 = (sq * kal.a1.data, sq * kal.a2.data, sq * kal.a3.data)
    F_sup = scale * _sup(kal.F.data)
    kal_iterations, kal_warnings = kal.iterations, list(kal.warnings)
    before = _sup(D)
    del kal, D

    # first corrugation: eta_1 at lam, normal E1
    c1 = _corrugate(x, u, du, E1, a1, "eta1", lam, params.depth, h, md, ("S1", "S2", "S3", "S4"), params.check_identities, params.block)
    n1, n2, gap1 = _propagate_or_record(du, c1, E1, E2, params.rho, rows, dict(base, step=1, frequency=lam))
    immersion_bounds_check(GridField(spec, "vec4", c1.u), 3 * params.gamma_lower, du=c1.du)
    after = _sup(target - pullback(c1.du))
    rows.append(
        dict(
            base,
            step=1,
            frequency=lam,
            defect_before=before,
            defect_after=after,
            amp_min=float(a1.min()),
            amp_max=float(a1.max()),
            identity_residual=c1.identity_residual,
            contract_residual=c1.contract_residual,
            G_sup=c1.norms["G"],
            Gcal_sup=c1.norms["Gcal"],
            R1_sup=c1.norms["R1"],
            R2_sup=c1.norms["R2"],
            F_sup=F_sup,
            frame_gap=gap1,
            kallen_iterations=kal_iterations,
            kallen_warnings=kal_warnings,
            **_frames_row(c1.du, n1, n2),
        )
    )

    # second corrugation: eta_2 at kappa, normal E1 of U
    before = after
    c2 = _corrugate(
        x, c1.u, c1.du, n1, a2, "eta2", kappa, params.depth, h, md, ("S1", "S2", "S3", "S4"), params.check_identities, params.block
    )
    m1, m2, gap2 = _propagate_or_record(c1.du, c2, n1, n2, params.rho, rows, dict(base, step=2, frequency=kappa))
    immersion_bounds_check(GridField(spec, "vec4", c2.u), 3 * params.gamma_lower, du=c2.du)
    after = _sup(target - pullback(c2.du))
    rows.append(
        dict(
            base,
            step=2,
            frequency=kappa,
            defect_before=before,
            defect_after=after,
            amp_min=float(a2.min()),
            amp_max=float(a2.max()),
            identity_residual=c2.identity_residual,
            contract_residual=c2.contract_residual,
            G_sup=c2.norms["G"],
            Gcal_sup=c2.norms["Gcal"],
            R1_sup=c2.norms["R1"],
            R2_sup=c2.norms["R2"],
            frame_gap=gap2,
            **_frames_row(c2.du, m1, m2),
        )
    )
    G1, G1_sup = c1.G, c1.norms["G"]
    del c1, n1, n2

    # amplitude of the third corrugation
    b2 = a3 * a3 - G1 - c2.G
    bmin = float(b2.min())
    guard = scale / 8.0
    if bmin < guard:
        i, j = np.unravel_index(int(np.argmin(b2)), b2.shape)
        raise NKError(
            "amplitude-collapse",
            f"b^2 = a3^2 - G - Gbar reaches {bmin:.4g} < {guard:.4g} at node ({i},{j}), k={k}; "
            f"|G|_0={G1_sup:.4g}, |Gbar|_0={c2.norms['G']:.4g}, min a3^2={float((a3 * a3).min()):.4g}",
            k=k,
            b2_min=bmin,
            G_sup=G1_sup,
            Gbar_sup=c2.norms["G"],
            a3_sq_min=float((a3 * a3).min()),
            rows=rows,
        )
    margin_note = "" if bmin >= scale / 4.0 else "b^2 between 1/8 and 1/4 of the defect scale"
    b = np.sqrt(b2)

    # third corrugation: eta_3 = e2 at mu_next, normal E2 of Ubar
    before = after
    c3 = _corrugate(
        x, c2.u, c2.du, m2, b, "eta3", mu_next, params.third_depth, h, md, ("S2", "S3", "S4"),
        params.check_identities, params.block,
    )
    # the normal part of the third displacement points along E2 only
    disp = c3.u - c2.u
    Tb = tangent_frame_array(c2.du)
    tang_coeff = np.einsum("...ki,...k->...i", c2.du, disp)
    normal_part = disp - np.einsum("...ki,...i->...k", Tb, tang_coeff)
    e1_leak = _sup(np.einsum("...k,...k->...", normal_part, m1))
    del Tb, disp, normal_part
    p1, p2, gap3 = _propagate_or_record(c2.du, c3, m1, m2, params.rho, rows, dict(base, step=3, frequency=mu_next))
    immersion_bounds_check(GridField(spec, "vec4", c3.u), 3 * params.gamma_lower, du=c3.du)
    after = _sup(target - pullback(c3.du))
    rows.append(
        dict(
            base,
            step=3,
            frequency=mu_next,
            defect_before=before,
            defect_after=after,
            amp_min=float(b.min()),
            amp_max=float(b.max()),
            identity_residual=c3.identity_residual,
            contract_residual=c3.contract_residual,
            G_sup=c3.norms["G"],
            Gcal_sup=c3.norms["Gcal"],
            R1_sup=c3.norms["R1"],
            R2_sup=c3.norms["R2"],
            frame_gap=gap3,
            e1_leak=e1_leak,
            b2_min=bmin,
            b2_note=margin_note,
            **_frames_row(c3.du, p1, p2),
        )
    )
    new_state = ImmersionState(
        GridField(spec, "vec4", c3.u),
        GridField(spec, "vec4", p1),
        GridField(spec, "vec4", p2),
        c3.du,
        delta_next,
        mu_next,
        dict(state.meta),
    )
    return new_state, rows


# ---------------------------------------------------------------------------
# the Stage
# ---------------------------------------------------------------------------


def _c1_distance(u1: np.ndarray, du1: np.ndarray, u0: np.ndarray, du0: np.ndarray) -> float:
    return max(_sup(u1 - u0), _sup(du1 - du0))


def calibrate_mollification(u: GridField, du: np.ndarray, mu: float, delta: float) -> tuple[float, float, float]:
    """Smallest ``C`` in ``l = 1/(C mu)`` whose commutator stays below ``(r0/12) delta``.

    Returns ``(C, l, commutator)``.  Candidates double from 1 while the
    kernel stays resolved; the last resolved value is used if none passes.
    """
    spec = u.spec
    P = GridField(spec, "sym2", pullback(du))
    C = 1.0
    best = None
    while True:
        l = min(1.0, 1.0 / (C * mu))
        if l < 2.0 * spec.h:
            break
        du_l = mollify(GridField(spec, "mat42", du), l).data
        comm = _sup(pullback(du_l) - mollify(P, l).data)
        best = (C, l, comm)
        if comm <= R0 / 12.0 * delta:
            return best
        C *= 2.0
    if best is None:
        raise NKError("kernel-unresolved", f"l = 1/mu = {1 / mu:.4g} is below 2h = {2 * spec.h:.4g}")
    return best


def stage(g: GridField, state: ImmersionState, params: StageParams) -> tuple[ImmersionState, StageTrace]:
    """Run ``K`` triple corrugations, reducing the defect scale by ``sigma^{NK}``.

    Errors raised inside the loop are re-raised with the trace attached as
    ``err.context['trace']`` so callers can still report partial progress.
    """
    spec = state.spec
    params.validate(spec)
    trace = StageTrace(params.as_dict())
    delta, mu = params.delta, params.mu

    immersion_bounds_check(state.u, 2 * params.gamma_lower, du=state.du)
    D_in = _sup(g.data - delta * H0_ARR - pullback(state.du))
    if D_in > R0 / 4 * delta * (1 + 1e-12):
        raise NKError(
            "assumption-violated",
            f"stage gate |D(g - delta H0, u)|_0 <= r0/4 delta violated: lhs={D_in:.6g}, rhs={R0 / 4 * delta:.6g}",
            gate="defect",
            lhs=D_in,
        )
    u2 = second_derivative_sup(state.du, spec.h)
    if u2 > math.sqrt(delta) * mu:
        raise NKError(
            "assumption-violated",
            f"stage gate |d^2 u|_0 <= delta^(1/2) mu violated: lhs={u2:.6g}, rhs={math.sqrt(delta) * mu:.6g}",
            gate="second-derivatives",
            lhs=u2,
        )

    # mollification
    if params.mollify:
        C, l, comm = calibrate_mollification(state.u, state.du, mu, delta)
        u0 = mollify(state.u, l)
        du0 = mollify(GridField(spec, "mat42", state.du), l).data
        g0 = mollify(g, l).data
    else:
        C, l, comm = float("nan"), 0.0, 0.0
        u0, du0, g0 = state.u, state.du, g.data
    g_gap = _sup(g.data - g0)
    e1, e2, _ = propagate_frame_array(state.du, du0, state.E1.data, state.E2.data, rho=math.inf)
    cur = ImmersionState(u0, GridField(spec, "vec4", e1), GridField(spec, "vec4", e2), du0, delta, mu, dict(state.meta))
    trace.summary.update(
        mollification_C=C,
        mollification_l=l,
        commutator=comm,
        commutator_target=R0 / 12 * delta,
        g_gap=g_gap,
        defect_in=D_in,
        second_derivatives_in=u2,
    )

    u_start, du_start = state.u.data, state.du
    prev_defect = _sup(g0 - delta * H0_ARR - pullback(du0))
    try:
        for k in range(params.K):
            dk, dn = params.delta_k(k), params.delta_k(k + 1)
            mk = params.mu_k(k)
            new, rows = triple_corrugation(
                cur, g0, dk, dn, mk, params.sigma, params.N, params, k, params.frequencies(k)
            )
            trace.rows.extend(rows)
            after = _sup(g0 - dn * H0_ARR - pullback(new.du))
            c1 = _c1_distance(new.u.data, new.du, cur.u.data, cur.du)
            fd1 = _sup(new.E1.data - cur.E1.data)
            fd2 = _sup(new.E2.data - cur.E2.data)
            trace.per_k.append(
                {
                    "k": k,
                    "delta_k": dk,
                    "delta_next": dn,
                    "mu_k": mk,
                    "defect_before": prev_defect,
                    "defect_after": after,
                    "defect_ratio": after / prev_defect if prev_defect > 0 else float("nan"),
                    "ratio_target": 2.0 / params.sigma**params.N,
                    "defect_over_delta_next": after / dn,
                    "c1_drift": c1,
                    "c1_constant": c1 / math.sqrt(dk),
                    "frame_drift": max(fd1, fd2),
                    "frame_constant": max(fd1, fd2) / math.sqrt(dk),
                }
            )
            prev_defect = after
            cur = new
    except NKError as err:
        trace.status = "failed"
        trace.error = {k: v for k, v in err.as_dict().items() if k != "rows"}
        partial = err.context.get("rows")
        if partial:
            trace.rows.extend(partial)
        err.context["trace"] = trace
        raise

    dK = params.delta_k(params.K)
    out_defect0 = _sup(g0 - dK * H0_ARR - pullback(cur.du))
    out_defect = _sup(g.data - dK * H0_ARR - pullback(cur.du))
    c1_total = _c1_distance(cur.u.data, cur.du, u_start, du_start)
    trace.summary.update(
        defect_out_g0=out_defect0,
        defect_out=out_defect,
        defect_target=2 * delta / params.sigma ** (params.N * params.K),
        c1_total=c1_total,
        c1_constant=c1_total / math.sqrt(delta),
        second_derivatives_out=second_derivative_sup(cur.du, spec.h),
    )
    cur.delta = dK
    cur.mu = params.mu_k(params.K)
    return cur, trace


# ---------------------------------------------------------------------------
# the initial Stage
# ---------------------------------------------------------------------------


@dataclass
class InitialStageReport:
    delta: float
    l: float
    ratio: float
    frequencies: list[float]
    directions: list[tuple[float, float]]
    defect: float
    target: float
    c0_distance: float
    c1_distance: float
    bounds: dict
    calibration: list[dict]
    terms: int

    def as_dict(self) -> dict:
        return asdict(self)


def _spiral_ladder(
    x: np.ndarray,
    u: np.ndarray,
    du: np.ndarray,
    amps: list[np.ndarray],
    etas: list[tuple[float, float]],
    freqs: list[float],
    h: float,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    spec = GridSpec(u.shape[0])
    e1, e2 = (f.data for f in initial_normal_frame(GridField(spec, "vec4", u), du))
    for a, eta, lam in zip(amps, etas, freqs):
        gE = compatible_frame_gradients(e1, e2, h)
        u_new, du_new, _, _ = nash_spiral_step_array(du, x, u, e1, e2, a, eta, lam, h, gE, centered=True)
        # a spiral turns the tangent plane by O(a); carrying the frame keeps it
        # smooth where re-projecting fixed axes would degenerate
        e1, e2, _ = propagate_frame_array(du, du_new, e1, e2, rho=math.inf)
        u, du = u_new, du_new
    return u, du, e1, e2


def initial_stage(
    g: GridField,
    u_bar: GridField,
    delta: float,
    *,
    du_bar: np.ndarray | None = None,
    ratio: float | None = None,
    max_calibration: int = 5,
    recenter: bool = True,
) -> tuple[ImmersionState, InitialStageReport]:
    """Nash spirals bringing ``D(g - delta H0, u)`` below ``(r0/4) delta``.

    The spiral frequencies form a geometric ladder ending at the grid's
    frequency ceiling; the common ratio plays the role of ``1/(eps l)`` and
    is calibrated by trial runs when not given.
    """
    spec = u_bar.spec
    h = spec.h
    if du_bar is None:
        du_bar = grad(u_bar.data, h)
    D = g.data - pullback(du_bar)
    lo, _ = sym_eigenvalues(D)
    if not (lo > 0).all():
        i, j = np.unravel_index(int(np.argmin(lo)), lo.shape)
        raise NKError(
            "not-short",
            f"g - (grad u)^T grad u has eigenvalue {lo[i, j]:.4g} <= 0 at node ({i},{j})",
            node=(int(i), int(j)),
        )
    if not (0.0 < delta < 1.0):
        raise NKError("config-invalid", f"delta={delta} must lie in (0, 1)")
    target = R0 / 4 * delta

    # mollification of g at a scale matched to delta (smooth g: r + beta = 2)
    cbar = sup_norm(g, 2) if spec.max_deriv >= 2 else 0.0
    l = 0.25 if cbar <= 1e-12 else min(0.25, math.sqrt(R0 * delta / (8.0 * cbar)))
    l = max(l, 2.0 * h)
    g_l = mollify(g, l)
    Dl = g_l.data - delta * H0_ARR - pullback(du_bar)
    lo, hi = sym_eigenvalues(Dl)
    if not (lo > 0).all():
        raise NKError("not-short", f"defect minus delta*H0 is not positive definite (min eigenvalue {lo.min():.4g})")
    bounds = (0.5 * float(lo.min()), 2.0 * float(hi.max()))
    pou = pou_decompose(GridField(spec, "sym2", Dl), bounds, merge=True)
    amps = [t.phi.data for t in pou.terms]
    etas = [t.eta for t in pou.terms]
    n_terms = len(amps)
    tops = [spec.max_frequency(diagonal=not _axis_aligned(e)) for e in etas]
    lam_top = min(tops)
    x = _coords(spec)

    def ladder(r: float) -> list[float]:
        return [lam_top * r ** (-(n_terms - 1 - i)) for i in range(n_terms)]

    def attempt(r: float):
        u, du, e1, e2 = _spiral_ladder(x, u_bar.data.copy(), du_bar, amps, etas, ladder(r), h)
        err = _sup(g.data - delta * H0_ARR - pullback(du))
        return u, du, e1, e2, err

    calibration = []
    r = ratio if ratio is not None else 100.0
    u = du = e1 = e2 = None
    err = float("inf")
    for it in range(max_calibration if ratio is None else 1):
        u, du, e1, e2, err = attempt(r)
        calibration.append({"ratio": r, "defect": err})
        log.info("initial stage trial ratio=%.4g defect=%.4g target=%.4g", r, err, target)
        if err <= target:
            break
        # the spiral errors scale like 1/ratio; aim at half the target
        r = r * max(2.0, err / (0.5 * target))
    if err > target:
        raise NKError(
            "initial-stage-failed",
            f"achieved |D(g - delta H0, u0)|_0 = {err:.4g} > target {target:.4g}; "
            "increase the grid resolution or decrease delta",
            achieved=err,
            target=target,
            calibration=calibration,
        )
    if recenter:
        # a constant shift is an isometry; remove the large offsets of the
        # low-frequency spirals
        u = u - (u - u_bar.data).mean(axis=(0, 1))
    gb = immersion_bounds_check(u_bar, 1.0 + 1e-9, du=du_bar, raise_on_fail=False)
    gamma = max(1.0 / gb.min_eigenvalue, gb.max_eigenvalue)
    gamma_lower = max(2.0 * gamma, gamma + 2.0 * _sup(D) + 1.0)
    u_field = GridField(spec, "vec4", u)
    rep_bounds = immersion_bounds_check(u_field, gamma_lower, du=du)
    E1, E2 = GridField(spec, "vec4", e1), GridField(spec, "vec4", e2)
    st = ImmersionState(u_field, E1, E2, du, delta, ladder(r)[-1], {"gamma_lower": gamma_lower})
    report = InitialStageReport(
        delta=delta,
        l=l,
        ratio=r,
        frequencies=ladder(r),
        directions=[tuple(e) for e in etas],
        defect=err,
        target=target,
        c0_distance=_sup(u - u_bar.data),
        c1_distance=_sup(du - du_bar),
        bounds=rep_bounds.as_dict(),
        calibration=calibration,
        terms=n_terms,
    )
    return st, report


# ---------------------------------------------------------------------------
# flat presets
# ---------------------------------------------------------------------------


def flat_metric(spec: GridSpec) -> GridField:
    """The Euclidean metric ``g = Id`` on the grid."""
    return GridField(spec, "sym2", np.broadcast_to(np.array([1.0, 0.0, 1.0]), (spec.n, spec.n, 3)).copy())


def flat_short_map(spec: GridSpec, scale: float = 0.5) -> GridField:
    """``u(x) = scale * (x1, x2, 0, 0)``: strictly short for ``g = Id`` when ``scale < 1``."""
    x1, x2 = spec.coords()
    z = np.zeros_like(x1)
    return GridField(spec, "vec4", scale * np.stack([x1, x2, z, z], axis=-1))


def flat_stage_input(spec: GridSpec, delta: float) -> ImmersionState:
    """Linear map ``u = A x`` with ``A^T A = Id - delta H0``, so the defect is exactly ``delta H0``.

    This is a Stage input with zero mismatch: the normalized Kallen input is
    ``H0`` itself and the amplitudes are constant.
    """
    M = np.eye(2) - delta * H0.as_matrix()
    w, V = np.linalg.eigh(M)
    root = V @ np.diag(np.sqrt(w)) @ V.T
    A = np.zeros((4, 2))
    A[:2] = root
    x = _coords(spec)
    u = np.einsum("kj,...j->...k", A, x)
    du = np.broadcast_to(A, (spec.n, spec.n, 4, 2)).copy()
    uf = GridField(spec, "vec4", u)
    E1, E2 = initial_normal_frame(uf, du)
    return ImmersionState(uf, E1, E2, du, delta, float("nan"))
