"""
Run diagnostics: energy and Lyapunov budgets, density conservation, long-time
limits, hydrostatic-convergence conditions and regularity tracking.

A run produces one row per output time (see :func:`compute_row`).  Quantities
that do not change in time (integrals of the equilibrium and the potential)
go into ``series.meta`` so that the Lyapunov functional can be rebuilt for any
``(gamma, beta)`` after the fact::

    |rho + rho_s + gamma f - beta|^2
        = |A|^2 + gamma^2 |f|^2 + beta^2 |Omega| + 2 gamma (A, f) - 2 beta (A, 1) - 2 gamma beta (f, 1)

with ``A = rho + rho_s`` the total density.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.integrate import cumulative_simpson, cumulative_trapezoid

from .elliptic import recover_pressure
from .errors import NotConverged
from .spectral import AnnulusGrid, ScalarField, VectorField, grad_tensor, integrate, norm

__all__ = [
    "RowContext",
    "compute_row",
    "dissipation",
    "test_dictionary",
    "pressure_balance_residual",
    "energy_identity_residual",
    "time_integral",
    "lyapunov_check",
    "LyapunovReport",
    "conservation_drift",
    "lq_drift",
    "asymptotics_report",
    "theorem16_conditions",
    "regularity_flags",
    "weighted_functional_report",
    "deviation_sq",
    "write_csv",
    "read_csv",
]

CORE_COLUMNS = ["t", "KE", "PE_coupling", "H1u", "L2ut", "Lyap", "L2_rho_total_drift",
                "bc_res_a", "bc_res_b", "CFL"]


# ---------------------------------------------------------------------------
# per-row quantities


def dissipation(u: VectorField, nu: float, slip_a, grid: AnnulusGrid | None = None) -> float:
    """``nu |grad u|^2 + nu/b oint_b u_theta^2 + nu oint_a c_a u_theta^2``.

    ``slip_a`` is the inner-wall coefficient ``c_a`` (``1/a + alpha/nu`` for
    Navier slip, ``-1/a`` stress-free); a scalar or per-node array.
    """
    g = u.grid
    grad = integrate(sum(G**2 for G in grad_tensor(u)), g)
    ut = u.u_theta.values
    wb = np.sum(g.w_bnd_b * ut[-1] ** 2) / g.b
    wa = np.sum(g.w_bnd_a * np.asarray(slip_a) * ut[0] ** 2)
    return nu * (grad + wb + wa)


def test_dictionary(grid: AnnulusGrid):
    """Twenty smooth solenoidal wall-compatible fields and their H1 norms.

    ``w = grad_perp [ (r-a)^2 (b-r)^2 T_k(x) q(theta) ]`` for ``k = 0..3`` and
    ``q`` in ``{1, cos, sin, cos 2, sin 2}``.
    """
    a, b = grid.a, grid.b
    R, TH = grid.R, grid.TH
    x = (2 * R - a - b) / (b - a)
    out = []
    for k in range(4):
        Tk = np.polynomial.chebyshev.Chebyshev.basis(k)
        for q, dq in ((lambda t: 1 + 0 * t, lambda t: 0 * t),
                      (np.cos, lambda t: -np.sin(t)), (np.sin, np.cos),
                      (lambda t: np.cos(2 * t), lambda t: -2 * np.sin(2 * t)),
                      (lambda t: np.sin(2 * t), lambda t: 2 * np.cos(2 * t))):
            s = (R - a) ** 2 * (b - R) ** 2 * Tk(x)
            ds = grid.dr(s)
            ur = -s * dq(TH) / R
            ut = ds * q(TH)
            w = VectorField.from_arrays(grid, ur, ut)
            out.append((w, norm(w, "H1")))
    return out


def pressure_balance_residual(state, params, potential, P: ScalarField | None = None,
                              dictionary=None, u_t: VectorField | None = None) -> float:
    """``max_w |(grad P + rho grad f, w)| / |w|_H1`` over :func:`test_dictionary`.

    ``rho`` is the perturbation density and ``P`` the perturbation pressure
    (recovered from the momentum balance when not given).
    """
    g = state.grid
    if P is None:
        P = recover_pressure(state.u, state.rho, params, potential, u_t=u_t)
    dictionary = dictionary or test_dictionary(g)
    Pr = g.dr(P.values)
    Pt = g.dtheta(P.values) / g.R
    rho = state.rho.values
    Fr = Pr + rho * potential.gradf.u_r.values
    Ft = Pt + rho * potential.gradf.u_theta.values
    best = 0.0
    for w, h1 in dictionary:
        val = abs(integrate(Fr * w.u_r.values + Ft * w.u_theta.values, g)) / h1
        best = max(best, val)
    return best


class RowContext:
    """Precomputed constants shared by all rows of one run."""

    def __init__(self, cfg):
        self.cfg = cfg
        g = cfg.grid
        eq = cfg.equilibrium
        pot = eq.potential
        p = cfg.params
        self.grid = g
        self.f = pot.f.values
        self.rho_s = eq.rho_s.values
        self.slip_a = p.slip_coefficient(g.a, cfg.bc_set)
        self.phi = p.phi(g.a) if cfg.bc_set == "paper_mixed" else 0.0
        self.gamma = float(cfg.gamma_lyap)
        self.beta = float(cfg.beta_lyap)
        self.dictionary = test_dictionary(g)
        self.polar = cfg.mode == "linear_polar"
        self.h0 = float(eq.h.values.flat[0]) if self.polar else None
        self.meta = {
            "int_f": integrate(self.f, g),
            "L2sq_f": integrate(self.f**2, g),
            "int_rho_s_f": integrate(self.rho_s * self.f, g),
            "L2_rho_s": math.sqrt(integrate(self.rho_s**2, g)),
            "area": g.area,
            "a": g.a,
            "b": g.b,
            "gamma_lyap": self.gamma,
            "beta_lyap": self.beta,
            "nu": p.nu,
            "rho_star": p.rho_star,
            "dt": cfg.dt,
            "cadence": cfg.cadence,
            "bc_set": cfg.bc_set,
            "mode": cfg.mode,
        }
        if self.polar:
            self.meta["h0"] = self.h0
        self.total0 = None


def compute_row(state, cfg, ctx: RowContext | None = None) -> dict:
    """One diagnostics row; columns start with :data:`CORE_COLUMNS`."""
    ctx = ctx or RowContext(cfg)
    g = ctx.grid
    p = cfg.params
    u = state.u
    rho = state.rho.values
    total = rho + ctx.rho_s
    stepper = cfg.stepper
    u_t = stepper.velocity_rate(state)
    uL2sq = integrate(u.dot(u).values, g)
    l2_total = math.sqrt(integrate(total**2, g))
    if ctx.total0 is None:
        ctx.total0 = l2_total
    dev = total + ctx.gamma * ctx.f - ctx.beta
    w = state.omega.values
    bc_a = np.max(np.abs(w[0] - ctx.phi * u.u_theta.values[0]))
    bc_b = np.max(np.abs(w[-1]))
    rho_grad = ScalarField(g, rho)
    from .spectral import gradient

    gr = gradient(rho_grad)
    row = {
        "t": state.t,
        "KE": 0.5 * p.rho_star * uL2sq,
        "PE_coupling": integrate(rho * ctx.f, g),
        "H1u": norm(u, "H1"),
        "L2ut": norm(u_t, "L2"),
        "Lyap": ctx.gamma * p.rho_star * uL2sq + integrate(dev**2, g),
        "L2_rho_total_drift": (l2_total - ctx.total0) / ctx.total0 if ctx.total0 else 0.0,
        "bc_res_a": float(bc_a),
        "bc_res_b": float(bc_b),
        "CFL": stepper.cfl(state),
        "dissipation": p.rho_star * dissipation(u, p.nu, ctx.slip_a),
        "H2u": norm(u, "H2"),
        "H1ut": norm(u_t, "H1"),
        "L2u": math.sqrt(uL2sq),
        "L2_rho": math.sqrt(integrate(rho**2, g)),
        "L2_rho_total": l2_total,
        "L1_rho_total": integrate(np.abs(total), g),
        "L4_rho_total": integrate(total**4, g) ** 0.25,
        "mass_total": integrate(total, g),
        "L2_grad_rho": math.sqrt(integrate(gr.u_r.values**2 + gr.u_theta.values**2, g)),
        "L2_omega": math.sqrt(integrate(w**2, g)),
        "pressure_balance": pressure_balance_residual(state, p, cfg.equilibrium.potential,
                                                      dictionary=ctx.dictionary, u_t=u_t),
    }
    if ctx.polar:
        h0 = ctx.h0
        r2 = g.R**2
        grad_sq = gr.u_r.values**2 + gr.u_theta.values**2
        row["weighted_W"] = (integrate((grad_sq / (-2 * h0) + 0.5 * w**2) * r2, g)
                             - integrate(rho**2, g) / (-2 * h0))
    return row


# ---------------------------------------------------------------------------
# series-level checks


def _col(series, name):
    return np.array([row[name] for row in series], dtype=float)


def deviation_sq(series, gamma: float, beta: float) -> np.ndarray:
    """``|rho + rho_s + gamma f - beta|^2`` per row for any ``(gamma, beta)``."""
    meta = getattr(series, "meta", {}) or {}
    if meta and gamma == meta.get("gamma_lyap") and beta == meta.get("beta_lyap"):
        return _col(series, "Lyap") - gamma * 2.0 * _col(series, "KE")
    A2 = _col(series, "L2_rho_total") ** 2
    Af = _col(series, "PE_coupling") + meta["int_rho_s_f"]
    A1 = _col(series, "mass_total")
    return (A2 + gamma**2 * meta["L2sq_f"] + beta**2 * meta["area"] + 2 * gamma * Af
            - 2 * beta * A1 - 2 * gamma * beta * meta["int_f"])


def time_integral(t, y) -> np.ndarray:
    """Running integral ``int_0^t y``: composite Simpson, trapezoid for two samples."""
    t = np.asarray(t, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(t) < 3:
        return cumulative_trapezoid(y, t, initial=0.0)
    return cumulative_simpson(y, x=t, initial=0.0)


def _relative_to_start(x: np.ndarray) -> float:
    return abs(x[0]) if x[0] != 0 else (float(np.max(np.abs(x))) or 1.0)


def energy_identity_residual(series) -> float:
    """``max_t |E(t) - E(0) + 2 int_0^t D| / |E(0)|`` with ``E = rho*|u|^2 + 2 int rho f``.

    ``D`` is the ``dissipation`` column; falls back to ``max |E|`` when ``E(0) = 0``.
    """
    if len(series) < 2:
        return 0.0
    t = _col(series, "t")
    E = 2.0 * _col(series, "KE") + 2.0 * _col(series, "PE_coupling")
    cum = time_integral(t, _col(series, "dissipation"))
    return float(np.max(np.abs(E - E[0] + 2.0 * cum)) / _relative_to_start(E))


@dataclass
class LyapunovReport:
    combined_violation: float
    monotone_violation: float
    tol: float
    ok: bool
    V0: float


def lyapunov_check(series, gamma: float, beta: float, tol: float = 1e-6) -> LyapunovReport:
    """Check that ``V + 2 gamma int_0^t rho* D`` is constant and ``V`` nonincreasing.

    Both violations are relative to ``|V(0)|``.  ``series`` must carry the
    dissipation column (already multiplied by ``rho*``).
    """
    t = _col(series, "t")
    V = gamma * 2.0 * _col(series, "KE") + deviation_sq(series, gamma, beta)
    D = _col(series, "dissipation")
    C = V + 2.0 * gamma * time_integral(t, D)
    scale = _relative_to_start(V)
    comb = float(np.max(np.abs(C - C[0]))) / scale
    mono = float(max(0.0, np.max(np.diff(V)) if len(V) > 1 else 0.0)) / scale
    return LyapunovReport(comb, mono, tol, comb <= tol and mono <= tol, float(V[0]))


def conservation_drift(series) -> float:
    """Largest relative change of ``|rho + rho_s|_L2`` from the first row."""
    x = _col(series, "L2_rho_total")
    if x[0] == 0:
        return float(np.max(np.abs(x)))
    return float(np.max(np.abs(x / x[0] - 1.0)))


def lq_drift(series) -> dict:
    """Relative drift of ``|rho + rho_s|_{L^q}`` for ``q`` in 1, 2, 4."""
    out = {}
    for q, name in ((1, "L1_rho_total"), (2, "L2_rho_total"), (4, "L4_rho_total")):
        x = _col(series, name)
        out[q] = float(np.max(np.abs(x / x[0] - 1.0))) if x[0] else float(np.max(np.abs(x)))
    return out


def _tail(series, frac=0.1):
    n = len(series)
    k = max(2, int(math.ceil(frac * n)))
    return slice(n - k, n)


def _slope(t, y):
    if len(t) < 2 or np.ptp(t) == 0:
        return 0.0
    return float(np.polyfit(t - t.mean(), y, 1)[0])


def asymptotics_report(series, gamma: float, beta: float, slope_tol: float = 1e-6,
                       rel_tol: float = 1e-3, raise_on_drift: bool = True) -> dict:
    """Limits of the coupling and Lyapunov deviation and the three relations between them.

    ``I1`` and ``I2`` are means over the final 10% of rows.  Relations::

        I1 <= rho*|u0|^2/2 + int rho0 f
        0 <= I2 <= gamma rho* |u0|^2 + |rho0 + rho_s + gamma f - beta|^2
        |rho0 + rho_s + gamma f - beta|^2 - I2 = 2 gamma (int rho0 f - I1)
    """
    t = _col(series, "t")
    pe = _col(series, "PE_coupling")
    dev = deviation_sq(series, gamma, beta)
    KE = _col(series, "KE")
    sl = _tail(series)
    slope = _slope(t[sl], pe[sl])
    if raise_on_drift and abs(slope) > slope_tol:
        raise NotConverged(f"coupling integral still drifting: slope {slope:.3e} > {slope_tol:g}")
    I1 = float(np.mean(pe[sl]))
    I2 = float(np.mean(dev[sl]))
    ub1 = KE[0] + pe[0]
    ub2 = gamma * 2.0 * KE[0] + dev[0]
    link = (dev[0] - I2) - 2.0 * gamma * (pe[0] - I1)
    scale = max(abs(dev[0]), abs(2 * gamma * pe[0]), abs(ub2), 1e-300)
    rel1 = (I1 - ub1) / max(abs(ub1), abs(I1), 1e-300)
    rel2 = (I2 - ub2) / scale
    report = {
        "I1": I1,
        "I2": I2,
        "pe_tail_slope": slope,
        "H1u_tail": float(_col(series, "H1u")[-1]),
        "H1u_peak": float(np.max(_col(series, "H1u"))),
        "L2ut_tail": float(_col(series, "L2ut")[-1]),
        "H1u_tail_slope": _slope(t[sl], _col(series, "H1u")[sl]),
        "L2ut_tail_slope": _slope(t[sl], _col(series, "L2ut")[sl]),
        "bound_I1": ub1,
        "bound_I2": ub2,
        "rel_excess_I1": float(rel1),
        "rel_excess_I2": float(rel2),
        "linkage_residual": float(abs(link) / scale),
    }
    report["relation_I1"] = bool(rel1 <= rel_tol)
    report["relation_I2"] = bool(I2 >= -rel_tol * scale and rel2 <= rel_tol)
    report["relation_link"] = bool(report["linkage_residual"] <= rel_tol)
    return report


def theorem16_conditions(series, gamma: float, beta: float, slope_tol: float = 1e-6,
                         raise_on_drift: bool = True) -> dict:
    """Residuals of the two equivalent convergence conditions.

    ``condA = | dev0 - lim dev - 2 gamma int rho0 f |`` is small exactly when
    ``int rho f -> 0``; ``condB = | 2 gamma lim (int rho0 f - int rho f) - dev0 |``
    is small exactly when the total density tends to ``-gamma f + beta``.
    """
    t = _col(series, "t")
    pe = _col(series, "PE_coupling")
    dev = deviation_sq(series, gamma, beta)
    sl = _tail(series)
    slope = _slope(t[sl], pe[sl])
    if raise_on_drift and abs(slope) > slope_tol:
        raise NotConverged(f"coupling integral still drifting: slope {slope:.3e} > {slope_tol:g}")
    I1 = float(np.mean(pe[sl]))
    I2 = float(np.mean(dev[sl]))
    condA = abs(dev[0] - I2 - 2 * gamma * pe[0])
    condB = abs(2 * gamma * (pe[0] - I1) - dev[0])
    return {
        "condA": float(condA),
        "condB": float(condB),
        "terminal_deviation": float(math.sqrt(max(dev[-1], 0.0))),
        "terminal_coupling": float(pe[-1]),
        "pe_tail_slope": slope,
    }


def regularity_flags(series, trend_factor: float = 1.5) -> dict:
    """Boundedness flags for the velocity and density norms, with margins.

    ``H2_bounded``: finite and the final-quarter maximum does not exceed the
    earlier maximum by more than ``trend_factor``.  ``ut_H1_integrable``: the
    trapezoid integral of ``|u_t|_H1^2`` is finite.  ``rho_bounded``: the
    density norm stays below ``|rho0| + 2 |rho_s|`` (conservation bound).
    """
    t = _col(series, "t")
    H2 = _col(series, "H2u")
    H1ut = _col(series, "H1ut")
    rho = _col(series, "L2_rho")
    n = len(series)
    q = max(1, n // 4)
    early = np.max(H2[: n - q]) if n > q else np.max(H2)
    late = np.max(H2[n - q:])
    finite = bool(np.all(np.isfinite(H2)))
    ut_int = float(np.trapezoid(H1ut**2, t)) if n > 1 else 0.0
    meta = getattr(series, "meta", {}) or {}
    rho_bound = rho[0] + 2.0 * meta.get("L2_rho_s", 0.0)
    return {
        "H2_bounded": finite and late <= trend_factor * early + 1e-300,
        "H2_sup": float(np.max(H2)),
        "H2_margin": float(trend_factor * early - late),
        "ut_H1_integrable": bool(np.isfinite(ut_int)),
        "ut_H1_sq_integral": ut_int,
        "rho_bounded": bool(np.all(np.isfinite(rho)) and np.max(rho) <= rho_bound + 1e-12),
        "rho_sup": float(np.max(rho)),
        "rho_margin": float(rho_bound - np.max(rho)),
    }


def weighted_functional_report(series) -> dict:
    """Weighted gradient functional of the linear ``f = g r`` problem.

    ``W = int (|grad rho|^2/(-2 h0) + omega^2/2) r^2 - int rho^2/(-2 h0)``
    satisfies ``dW/dt <= 2 nu |omega|^2`` when ``rho`` vanishes on the walls,
    so ``W(t) <= W(0) + 2 nu int_0^t |omega|^2`` and
    ``|grad rho|^2 <= (-2 h0 / a^2) (that envelope + |rho|^2/(-2 h0))``.
    """
    meta = series.meta
    h0, nu = meta["h0"], meta["nu"]
    a = meta.get("a", 1.0)
    t = _col(series, "t")
    W = _col(series, "weighted_W")
    om = _col(series, "L2_omega")
    env = W[0] + 2.0 * nu * time_integral(t, om**2)
    rho2 = _col(series, "L2_rho") ** 2
    grad_env = np.sqrt(np.maximum((-2 * h0 / a**2) * (env + rho2 / (-2 * h0)), 0.0))
    g = _col(series, "L2_grad_rho")
    scale = max(abs(W[0]), 1e-300)
    return {
        "W_excess": float(np.max(W - env) / scale),
        "grad_rho_within_envelope": bool(np.all(g <= grad_env * (1 + 1e-8) + 1e-300)),
        "grad_rho_max_ratio": float(np.max(g) / g[0]) if g[0] > 0 else float("inf"),
    }


# ---------------------------------------------------------------------------
# CSV


def _fmt(v):
    if isinstance(v, float):
        return repr(float(v))
    return str(v)


def write_csv(series, fh=None) -> str:
    """Serialize rows with ``repr`` floats (exact round trip)."""
    buf = io.StringIO() if fh is None else fh
    cols = list(series[0].keys()) if series else CORE_COLUMNS
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for row in series:
        w.writerow([_fmt(row[c]) for c in cols])
    return buf.getvalue() if fh is None else ""


def read_csv(text: str, meta: dict | None = None):
    from .timestepper import TimeSeries

    rows = list(csv.reader(io.StringIO(text)))
    cols = rows[0]
    out = TimeSeries()
    for r in rows[1:]:
        out.append({c: float(v) for c, v in zip(cols, r)})
    out.meta = dict(meta or {})
    return out
