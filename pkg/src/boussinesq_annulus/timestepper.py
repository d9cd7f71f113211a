"""
IMEX time integration of the perturbation Boussinesq system in vorticity form.

State variables are the perturbation vorticity ``omega``, the perturbation
density ``rho`` (total density minus the equilibrium profile) and the
azimuthal-mean velocity ``u0(r)``, which carries the circulation that the
vorticity alone does not determine.  Evolution equations::

    omega_t + u.grad omega = nu Laplacian omega + (1/rho*) grad rho . grad_perp f
    rho_t   + u.grad rho   = -h u.grad f
    u0_t = nu (u0'' + u0'/r - u0/r^2) - <omega u_r> - (1/rho*) <rho (1/r) d_theta f>

where ``<.>`` is the azimuthal mean.  Diffusion is implicit (Crank-Nicolson
or BDF2) with the wall conditions closed by the influence data of
:class:`~boussinesq_annulus.elliptic.VorticitySolver`; everything else is
Adams-Bashforth with 2/3-rule dealiasing in ``theta``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Callable

import numpy as np

from .elliptic import VorticitySolver, mean_streamfunction, mean_velocity_rows, velocity_from_psi
from .equilibrium import BC_SETS, HydrostaticEquilibrium, PhysicsParams
from .errors import ArgError, CFLViolation, SeedError, SolverFailure, VariantError
from .spectral import AnnulusGrid, ScalarField, VectorField, load_field, norm, save_field

__all__ = [
    "SeedSpec",
    "SimConfig",
    "SimState",
    "Stepper",
    "init",
    "state_from_fields",
    "random_fields",
    "stokes_fields",
    "step_nonlinear",
    "step_linear",
    "run",
    "save_state",
    "TimeSeries",
]

SCHEMES = ("CNAB2", "IMEXBDF2")
MODES = ("nonlinear", "linear_general", "linear_polar")


@dataclass(frozen=True)
class SeedSpec:
    """Initial perturbation.

    ``kind`` is ``random`` (band-limited solenoidal noise), ``stokes`` (random
    combination of the slowest viscous decay modes, free of start-up
    transients), ``eigenmode``
    (needs ``stability`` on the config), ``file`` (a prefix written by
    :func:`save_state`) or ``zero``.  ``amplitude`` sets ``|u0|_L2`` for random
    seeds and multiplies both fields for the others.  ``rho_scale`` adds a
    random density perturbation with ``|rho|_L2 = rho_scale * amplitude``.
    ``modes`` is the highest azimuthal wavenumber of random seeds and
    ``radial`` the number of decay modes per wavenumber for ``stokes`` seeds.
    """

    kind: str = "random"
    amplitude: float = 1e-3
    seed: int = 0
    path: str = ""
    rho_scale: float = 0.0
    modes: int = 8
    radial: int = 2


@dataclass
class SimConfig:
    params: PhysicsParams
    equilibrium: HydrostaticEquilibrium
    dt: float
    T_end: float
    scheme: str = "CNAB2"
    bc_set: str = "paper_mixed"
    seed: SeedSpec = field(default_factory=SeedSpec)
    cadence: int = 1
    mode: str = "nonlinear"
    workers: int = 1
    gamma_lyap: float = 1.0
    beta_lyap: float = 0.0
    snapshot_every: int = 0
    stability: object = None
    cfl_max: float = 0.8

    def __post_init__(self):
        if not (self.dt > 0):
            raise ArgError(f"dt must be positive, got {self.dt}")
        if self.T_end < 0:
            raise ArgError(f"T_end must be >= 0, got {self.T_end}")
        if self.scheme not in SCHEMES:
            raise ArgError(f"unknown scheme {self.scheme!r}; expected one of {SCHEMES}")
        if self.bc_set not in BC_SETS:
            raise ArgError(f"unknown bc_set {self.bc_set!r}")
        if self.mode not in MODES:
            raise ArgError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if int(self.cadence) < 1:
            raise ArgError("cadence must be >= 1")
        if not self.params.alpha_is_constant:
            raise ArgError("the time stepper needs a constant slip coefficient alpha")
        self.params.validate_for(self.grid.a)

    @property
    def grid(self) -> AnnulusGrid:
        return self.equilibrium.grid

    @property
    def n_steps(self) -> int:
        return int(round(self.T_end / self.dt))

    @cached_property
    def stepper(self) -> "Stepper":
        return Stepper(self)


@dataclass(frozen=True, eq=False)
class SimState:
    """Snapshot of the evolving perturbation.

    ``hist`` carries the multistep history (previous explicit terms and the
    previous level for BDF2, recent velocities for the time derivative).
    """

    t: float
    omega: ScalarField
    rho: ScalarField
    u0: np.ndarray
    psi: ScalarField
    u: VectorField
    step: int = 0
    hist: dict = field(default_factory=dict, repr=False)

    @property
    def grid(self) -> AnnulusGrid:
        return self.omega.grid


# ---------------------------------------------------------------------------
# the stepper


class Stepper:
    """Cached operators and explicit-term evaluation for one configuration."""

    def __init__(self, cfg: SimConfig):
        self.cfg = cfg
        grid = cfg.grid
        self.grid = grid
        eq = cfg.equilibrium
        pot = eq.potential
        if cfg.mode == "nonlinear" and pot.non_harmonic:
            raise VariantError("the nonlinear solver needs a harmonic potential")
        if cfg.mode == "linear_polar":
            hv = eq.h.values
            if pot.kind != "radial_linear":
                raise VariantError("linear_polar needs the potential f = g r")
            if np.ptp(hv) > 1e-12 * (1 + np.max(np.abs(hv))):
                raise VariantError("linear_polar needs a constant h")
        self.nonlinear = cfg.mode == "nonlinear"
        self.fr = pot.gradf.u_r.values
        self.ft = pot.gradf.u_theta.values
        self.h = eq.h.values
        self.inv_rs = 1.0 / cfg.params.rho_star
        self.M = grid.m_dealias
        nu, dt = cfg.params.nu, cfg.dt
        self.ops_L0 = None
        from .elliptic import mode_operators

        ops = mode_operators(grid)
        self.L0 = ops.L0
        self.L1 = ops.L(1)
        self.m2 = (grid.m.astype(float) ** 2)[None, :] / grid.r_nodes[:, None] ** 2
        mk = lambda shift, kappa: VorticitySolver(grid, cfg.params, cfg.bc_set, shift, kappa,
                                                  cfg.workers, self.M)
        if cfg.scheme == "CNAB2":
            self.kappa = 0.5 * nu * dt
            self.main = mk(1.0, self.kappa)
        else:
            self.kappa = 2.0 * nu * dt / 3.0
            self.main = mk(1.0, self.kappa)
        self.half_kappa = 0.25 * nu * dt  # Crank-Nicolson over dt/2
        self.start = mk(1.0, self.half_kappa)
        self.rows0 = mean_velocity_rows(cfg.params, grid, cfg.bc_set)

    # -- helpers ----------------------------------------------------------

    def truncate(self, c: np.ndarray) -> np.ndarray:
        c = c.copy()
        c[..., self.M + 1:] = 0.0
        return c

    def L_hat(self, w_hat: np.ndarray) -> np.ndarray:
        return self.L0 @ w_hat - self.m2 * w_hat

    def explicit(self, state: SimState):
        """Explicit tendencies ``(N_omega_hat, N_u0, N_rho_hat)`` at the state."""
        g = self.grid
        R = g.R
        w = state.omega.values
        rho = state.rho.values
        ur, ut = state.u.u_r.values, state.u.u_theta.values
        rho_r = g.dr(rho)
        rho_t = g.dtheta(rho) / R
        fr, ft = self.fr, self.ft
        Nw = self.inv_rs * (rho_t * fr - rho_r * ft)
        Nrho = -self.h * (ur * fr + ut * ft)
        N0 = -self.inv_rs * np.mean(rho * ft, axis=1)
        if self.nonlinear:
            Nw = Nw - (ur * g.dr(w) + ut * g.dtheta(w) / R)
            Nrho = Nrho - (ur * rho_r + ut * rho_t)
            N0 = N0 - np.mean(w * ur, axis=1)
        return self.truncate(g.rfft(Nw)), N0, self.truncate(g.rfft(Nrho))

    def build(self, t, w_hat, psi_hat, u0, rho_hat, step, hist) -> SimState:
        g = self.grid
        u = velocity_from_psi(g, psi_hat, u0)
        return SimState(
            t=t,
            omega=ScalarField(g, g.irfft(w_hat)),
            rho=ScalarField(g, g.irfft(rho_hat)),
            u0=u0,
            psi=ScalarField(g, g.irfft(psi_hat)),
            u=u,
            step=step,
            hist=hist,
        )

    def cfl(self, state: SimState) -> float:
        umax = float(np.max(np.hypot(state.u.u_r.values, state.u.u_theta.values)))
        return self.cfg.dt * umax / self.grid.h_min

    # -- stepping ---------------------------------------------------------

    def _cn_substep(self, solver, kappa, dt, w_hat, u0, rho_hat, Nw, N0, Nr):
        rhs_w = w_hat + kappa * self.L_hat(w_hat) + dt * Nw
        rhs_u = u0 + kappa * (self.L1 @ u0) + dt * N0
        w_new, psi_new, u0_new = solver.solve(rhs_w, rhs_u)
        return w_new, psi_new, u0_new, rho_hat + dt * Nr

    def step(self, state: SimState) -> SimState:
        cfg = self.cfg
        g = self.grid
        dt = cfg.dt
        c = self.cfl(state)
        if not np.isfinite(c):
            raise SolverFailure(f"non-finite velocity at t={state.t:.6g}")
        if c >= cfg.cfl_max:
            raise CFLViolation(f"CFL {c:.3f} >= {cfg.cfl_max} at t={state.t:.6g}")
        w_hat = self.truncate(state.omega.coeffs)
        rho_hat = self.truncate(state.rho.coeffs)
        u0 = state.u0
        Nw, N0, Nr = self.explicit(state)
        hist = dict(state.hist)
        prev = hist.get("N_prev")
        if prev is None:
            # start-up: two Crank-Nicolson / forward-Euler half steps
            h = 0.5 * dt
            w1, p1, u1, r1 = self._cn_substep(self.start, self.half_kappa, h, w_hat, u0, rho_hat, Nw, N0, Nr)
            mid = self.build(state.t + h, w1, p1, u1, r1, state.step, {})
            Nw1, N01, Nr1 = self.explicit(mid)
            w_new, psi_new, u0_new, rho_new = self._cn_substep(
                self.start, self.half_kappa, h, w1, u1, r1, Nw1, N01, Nr1)
        elif cfg.scheme == "CNAB2":
            Nw_o, N0_o, Nr_o = prev
            rhs_w = w_hat + self.kappa * self.L_hat(w_hat) + dt * (1.5 * Nw - 0.5 * Nw_o)
            rhs_u = u0 + self.kappa * (self.L1 @ u0) + dt * (1.5 * N0 - 0.5 * N0_o)
            w_new, psi_new, u0_new = self.main.solve(rhs_w, rhs_u)
            rho_new = rho_hat + dt * (1.5 * Nr - 0.5 * Nr_o)
        else:
            Nw_o, N0_o, Nr_o = prev
            w_o, u0_o, rho_o = hist["level_prev"]
            rhs_w = (4.0 * w_hat - w_o) / 3.0 + (2.0 * dt / 3.0) * (2.0 * Nw - Nw_o)
            rhs_u = (4.0 * u0 - u0_o) / 3.0 + (2.0 * dt / 3.0) * (2.0 * N0 - N0_o)
            w_new, psi_new, u0_new = self.main.solve(rhs_w, rhs_u)
            rho_new = (4.0 * rho_hat - rho_o) / 3.0 + (2.0 * dt / 3.0) * (2.0 * Nr - Nr_o)
        hist["N_prev"] = (Nw, N0, Nr)
        hist["level_prev"] = (w_hat, u0, rho_hat)
        ulist = list(hist.get("u_prev", ()))
        ulist.append(state.u)
        hist["u_prev"] = tuple(ulist[-2:])
        new = self.build(state.t + dt, w_new, psi_new, u0_new, rho_new, state.step + 1, hist)
        if not (np.all(np.isfinite(new.omega.values)) and np.all(np.isfinite(new.rho.values))):
            raise SolverFailure(f"non-finite state after step {new.step}")
        return new

    def velocity_rate(self, state: SimState) -> VectorField:
        """Time derivative of the velocity by the scheme-consistent backward difference.

        BDF2 once two previous levels exist, first order after the first step,
        and the right-hand side tendency at the initial time.
        """
        g = self.grid
        prev = state.hist.get("u_prev", ())
        dt = self.cfg.dt
        u = state.u
        if len(prev) >= 2:
            u1, u2 = prev[-1], prev[-2]
            f = lambda a, b, c: (3.0 * a - 4.0 * b + c) / (2.0 * dt)
            return VectorField.from_arrays(
                g, f(u.u_r.values, u1.u_r.values, u2.u_r.values),
                f(u.u_theta.values, u1.u_theta.values, u2.u_theta.values))
        if len(prev) == 1:
            u1 = prev[-1]
            return VectorField.from_arrays(g, (u.u_r.values - u1.u_r.values) / dt,
                                           (u.u_theta.values - u1.u_theta.values) / dt)
        return self.tendency(state)

    def tendency(self, state: SimState) -> VectorField:
        """Velocity tendency evaluated from the right-hand side."""
        g = self.grid
        nu = self.cfg.params.nu
        Nw, N0, _ = self.explicit(state)
        w_hat = self.truncate(state.omega.coeffs)
        wt_hat = nu * self.L_hat(w_hat) + Nw
        from .elliptic import mode_operators

        ops = mode_operators(g)
        psi_t = np.zeros_like(wt_hat)
        for m in range(1, self.M + 1):
            psi_t[:, m] = ops.solve(m, 0.0, -1.0, wt_hat[:, m])
        u0t = nu * (self.L1 @ state.u0) + N0
        return velocity_from_psi(g, psi_t, u0t)


# ---------------------------------------------------------------------------
# initial data


def remove_potential_vortex(grid: AnnulusGrid, u0: np.ndarray) -> np.ndarray:
    """Project the mean azimuthal velocity off ``1/r``.

    With zero vorticity on both walls ``c/r`` is steady and ``int u0 dr`` is
    conserved (angular momentum is not: the walls exert torque), so this is
    the component that never decays.
    """
    r = grid.r_nodes
    w = grid.w_r
    return u0 - (np.sum(w * u0) / np.sum(w / r)) / r


def random_fields(grid: AnnulusGrid, seed: int, bc_set: str = "paper_mixed", max_mode: int = 8):
    """Band-limited solenoidal noise satisfying every wall condition.

    Returns ``(psi_hat, u0, rho)`` with unit-free random amplitudes.  The
    streamfunction profiles carry a ``(r-a)^3 (b-r)^3`` factor, so the wall
    velocity and wall vorticity vanish for both boundary-condition sets.
    For ``both_stress_free`` the potential-vortex component is removed (see
    :func:`remove_potential_vortex`).
    """
    rng = np.random.default_rng(seed)
    a, b = grid.a, grid.b
    r = grid.r_nodes
    x = (2 * r - a - b) / (b - a)
    bump = ((r - a) * (b - r)) ** 3 / ((b - a) / 2) ** 6
    top = max(1, min(max_mode, grid.m_dealias))
    psi_hat = np.zeros((grid.Nr, grid.nmodes), dtype=complex)
    for m in range(1, top + 1):
        cr = rng.standard_normal(4)
        ci = rng.standard_normal(4)
        q = np.polynomial.chebyshev.chebval(x, cr) + 1j * np.polynomial.chebyshev.chebval(x, ci)
        psi_hat[:, m] = bump * q / m
    c0 = rng.standard_normal(4)
    u0 = ((r - a) * (b - r)) ** 2 / ((b - a) / 2) ** 4 * np.polynomial.chebyshev.chebval(x, c0)
    if bc_set == "both_stress_free":
        u0 = remove_potential_vortex(grid, u0)
    rho_hat = np.zeros_like(psi_hat)
    for m in range(0, top + 1):
        cr = rng.standard_normal(4)
        ci = rng.standard_normal(4) if m else np.zeros(4)
        rho_hat[:, m] = (np.polynomial.chebyshev.chebval(x, cr)
                         + 1j * np.polynomial.chebyshev.chebval(x, ci)) / (1 + m)
    rho = grid.irfft(rho_hat)
    return psi_hat, u0, rho


def stokes_fields(grid: AnnulusGrid, params: PhysicsParams, seed: int, bc_set: str = "paper_mixed",
                  max_mode: int = 2, radial: int = 2):
    """Random combination of the slowest viscous decay modes.

    For each wavenumber ``0..max_mode`` the ``radial`` lowest eigenvectors of
    the dissipation form against the kinetic-energy form are combined with
    Gaussian weights (independent for the cos and sin families).  Such fields
    satisfy the wall conditions to all orders, so diffusion starts without a
    boundary-layer transient.  Steady (zero-dissipation) modes are skipped.
    Returns ``(psi_hat, u0, rho)`` like :func:`random_fields`.
    """
    import scipy.linalg as sla

    from .eigensolver import _Dof, _assemble

    rng = np.random.default_rng(seed)
    zero = lambda r, t: 0.0 * r * t
    psi_hat = np.zeros((grid.Nr, grid.nmodes), dtype=complex)
    u0 = np.zeros(grid.Nr)
    top = max(0, min(max_mode, grid.m_dealias))
    for m in range(0, top + 1):
        if m == 0:
            dofs = [_Dof(0, "mean", j) for j in range(grid.Nr)]
        else:
            dofs = [_Dof(m, "cos", j) for j in range(1, grid.Nr - 1)]
        M, K1, _, _, _ = _assemble(grid, dofs, params, bc_set, zero, lambda r, t: (zero(r, t), zero(r, t)),
                                   max(8, 4 * m + 4))
        vals, vecs = sla.eigh(K1, M)
        keep = np.flatnonzero(vals > 1e-8 * max(1.0, vals[-1]))[:radial]
        for k in keep:
            v = vecs[:, k] / np.sqrt(vecs[:, k] @ M @ vecs[:, k])
            if m == 0:
                u0 += rng.standard_normal() * v
                continue
            wc, ws = rng.standard_normal(2)
            psi_hat[1:-1, m] += (0.5 * wc - 0.5j * ws) * v
    _, _, rho = random_fields(grid, seed, bc_set, max(1, max_mode))
    return psi_hat, u0, rho


def state_from_fields(cfg: SimConfig, psi_hat: np.ndarray, u0: np.ndarray, rho: np.ndarray,
                      t: float = 0.0) -> SimState:
    """State from a streamfunction (modes >= 1), mean velocity and density."""
    g = cfg.grid
    psi_hat = np.array(psi_hat, dtype=complex)
    psi_hat[:, 0] = mean_streamfunction(g, u0)
    L = cfg.stepper.L_hat(psi_hat)
    w_hat = L.copy()
    w_hat[:, 0] = g.D @ u0 + u0 / g.r_nodes
    # boundary rows of the collocated Laplacian are not used by the solver;
    # the wall vorticity is evaluated from the same interior formula
    w_hat = cfg.stepper.truncate(w_hat)
    rho_hat = cfg.stepper.truncate(g.rfft(rho))
    return cfg.stepper.build(t, w_hat, psi_hat, np.array(u0, dtype=float), rho_hat, 0, {})


def init(cfg: SimConfig) -> SimState:
    """Initial state for the configured seed."""
    g = cfg.grid
    seed = cfg.seed
    amp = float(seed.amplitude)
    if seed.kind == "zero" or (seed.kind in ("random", "stokes") and amp == 0.0):
        z = np.zeros((g.Nr, g.nmodes), dtype=complex)
        return state_from_fields(cfg, z, np.zeros(g.Nr), np.zeros(g.shape))
    if seed.kind in ("random", "stokes"):
        if seed.kind == "random":
            psi_hat, u0, rho = random_fields(g, seed.seed, cfg.bc_set, seed.modes)
        else:
            psi_hat, u0, rho = stokes_fields(g, cfg.params, seed.seed, cfg.bc_set, seed.modes, seed.radial)
        st = state_from_fields(cfg, psi_hat, u0, np.zeros(g.shape))
        s = amp / norm(st.u, "L2")
        rn = norm(ScalarField(g, rho), "L2")
        rho = rho * (seed.rho_scale * amp / rn) if seed.rho_scale else np.zeros(g.shape)
        return state_from_fields(cfg, psi_hat * s, u0 * s, rho)
    if seed.kind == "eigenmode":
        res = cfg.stability
        if res is None or getattr(res, "eigenmode", None) is None:
            raise SeedError("eigenmode seed needs an unstable equilibrium with a computed eigenmode")
        psi, u, rho = res.eigenmode
        psi_hat = g.rfft(psi.values)
        u0 = np.mean(u.u_theta.values, axis=1)
        psi_hat[:, 0] = 0.0
        return state_from_fields(cfg, psi_hat * amp, u0 * amp, rho.values * amp)
    if seed.kind == "file":
        return load_state(cfg, seed.path, amp)
    raise SeedError(f"unknown seed kind {seed.kind!r}")


def save_state(prefix, state: SimState) -> None:
    """Write ``<prefix>.omega.annf`` and ``<prefix>.rho.annf`` with sidecars.

    The mean azimuthal velocity is stored in the omega sidecar.
    """
    prefix = str(prefix)
    save_field(prefix + ".omega.annf", state.omega,
               {"t": state.t, "step": state.step, "u_theta_mean": [float(v) for v in state.u0]})
    save_field(prefix + ".rho.annf", state.rho, {"t": state.t, "step": state.step})


def load_state(cfg: SimConfig, prefix, amplitude: float = 1.0) -> SimState:
    g = cfg.grid
    prefix = str(prefix)
    try:
        omega, meta = load_field(prefix + ".omega.annf", g)
        rho, _ = load_field(prefix + ".rho.annf", g)
    except FileNotFoundError as exc:
        raise SeedError(f"seed file missing: {exc.filename}") from None
    u0 = np.array(meta.get("u_theta_mean", np.zeros(g.Nr)), dtype=float)
    w_hat = omega.coeffs
    from .elliptic import mode_operators

    ops = mode_operators(g)
    psi_hat = np.zeros_like(w_hat)
    for m in range(1, g.nmodes - 1):
        psi_hat[:, m] = ops.solve(m, 0.0, -1.0, w_hat[:, m])
    psi_hat[:, 0] = mean_streamfunction(g, u0)
    if amplitude != 1.0:
        w_hat, psi_hat, u0 = w_hat * amplitude, psi_hat * amplitude, u0 * amplitude
        rho = rho * amplitude
    st = cfg.stepper.build(0.0, w_hat, psi_hat, u0, rho.coeffs, 0, {})
    # keep the stored samples bit-exact
    return replace(st, omega=omega * amplitude if amplitude != 1.0 else omega,
                   rho=rho)


# ---------------------------------------------------------------------------
# public stepping API


def step_nonlinear(state: SimState, config: SimConfig) -> SimState:
    if config.mode != "nonlinear":
        raise VariantError(f"config mode is {config.mode!r}, not nonlinear")
    return config.stepper.step(state)


def step_linear(state: SimState, config: SimConfig, variant: str = "general") -> SimState:
    want = {"general": "linear_general", "polar_f_gr": "linear_polar"}.get(variant)
    if want is None:
        raise VariantError(f"unknown linear variant {variant!r}")
    if config.mode != want:
        config = replace(config, mode=want)
    return config.stepper.step(state)


class TimeSeries(list):
    """Rows of diagnostics (dicts with a fixed column order) plus run constants in ``meta``."""

    meta: dict = {}

    @property
    def columns(self) -> list[str]:
        return list(self[0].keys()) if self else []

    def column(self, name: str) -> np.ndarray:
        return np.array([row[name] for row in self], dtype=float)


def run(config: SimConfig, hooks: list[Callable] | None = None, state: SimState | None = None,
        row_fn: Callable | None = None, on_row: Callable | None = None,
        on_snapshot: Callable | None = None):
    """Advance to ``T_end`` and collect diagnostics rows every ``cadence`` steps.

    ``row_fn(state, config)`` builds a row (default
    :func:`boussinesq_annulus.diagnostics.compute_row`); ``hooks`` are called
    as ``hook(state, row)``.  ``on_row`` receives each row as it is produced so
    callers can flush partial output; on an exception the rows gathered so far
    are attached to it as ``exc.series``.
    """
    from .diagnostics import compute_row, RowContext

    ctx = RowContext(config)
    row_fn = row_fn or (lambda st, cfg: compute_row(st, cfg, ctx))
    hooks = hooks or []
    series = TimeSeries()
    series.meta = ctx.meta
    st = init(config) if state is None else state

    def emit(s):
        row = row_fn(s, config)
        series.append(row)
        for hk in hooks:
            hk(s, row)
        if on_row is not None:
            on_row(row)

    try:
        emit(st)
        n = config.n_steps
        for k in range(1, n + 1):
            st = config.stepper.step(st)
            if k % config.cadence == 0 or k == n:
                emit(st)
            if on_snapshot is not None and config.snapshot_every and k % config.snapshot_every == 0:
                on_snapshot(st)
    except Exception as exc:
        exc.series = series
        raise
    return st, series
