"""
Gravitational potentials, hydrostatic equilibria and their linear-stability class.

An equilibrium is a density ``rho_s = R(f)`` composed with the potential, so the
level sets of density and potential coincide exactly and ``grad rho_s = h grad f``
with ``h = R'(f)``.  The sign of ``h`` decides stability: ``h < 0`` everywhere is
stable, ``h > 0`` anywhere is Rayleigh-Taylor unstable.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import sympy as sp

from .errors import ArgError, DomainError, HarmonicityError, RangeError
from .spectral import (
    AnnulusGrid,
    ScalarField,
    VectorField,
    gradient,
    laplacian,
    make_grid,
    norm,
    to_cartesian,
)

__all__ = [
    "PhysicsParams",
    "Potential",
    "Profile",
    "HydrostaticEquilibrium",
    "Stable",
    "Unstable",
    "Indeterminate",
    "make_potential",
    "make_profile",
    "linear_profile",
    "make_equilibrium",
    "parallel_residual",
    "classify",
    "linear_family",
    "closed_form_pressure_discrepancy",
]

BC_SETS = ("paper_mixed", "both_stress_free")


@dataclass(frozen=True)
class PhysicsParams:
    """Viscosity, reference density and Navier-slip coefficient on ``r = a``.

    ``alpha`` is a float or a callable of ``theta``.  Only the eigensolver and
    the diagnostics accept a callable; the time stepper needs a constant.
    """

    nu: float
    rho_star: float = 1.0
    alpha: float | Callable = 0.0
    g: float = 1.0

    def __post_init__(self):
        if not (self.nu > 0):
            raise ArgError(f"nu must be positive, got {self.nu}")
        if not (self.rho_star > 0):
            raise ArgError(f"rho_star must be positive, got {self.rho_star}")

    def alpha_at(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        if callable(self.alpha):
            return np.broadcast_to(np.asarray(self.alpha(theta), dtype=float), theta.shape)
        return np.full(theta.shape, float(self.alpha))

    @property
    def alpha_is_constant(self) -> bool:
        return not callable(self.alpha)

    def validate_for(self, a: float, theta=None) -> None:
        """Require ``nu/a + alpha >= 0`` on the inner wall."""
        theta = np.linspace(0, 2 * np.pi, 256, endpoint=False) if theta is None else theta
        worst = float(np.min(self.nu / a + self.alpha_at(theta)))
        if worst < 0:
            raise ArgError(f"nu/a + alpha must be >= 0 on r=a; minimum is {worst:.6g}")

    def slip_coefficient(self, a: float, bc_set: str = "paper_mixed", theta=None):
        """Coefficient ``c`` in the inner-wall boundary form ``c * u_theta^2``.

        ``1/a + alpha/nu`` for Navier slip, ``-1/a`` for a stress-free wall.
        """
        if bc_set == "both_stress_free":
            c = -1.0 / a
            return c if theta is None else np.full(np.shape(theta), c)
        if bc_set != "paper_mixed":
            raise ArgError(f"unknown bc_set {bc_set!r}")
        if theta is None:
            if not self.alpha_is_constant:
                raise ArgError("theta-dependent alpha needs explicit theta samples")
            return 1.0 / a + float(self.alpha) / self.nu
        return 1.0 / a + self.alpha_at(theta) / self.nu

    def phi(self, a: float) -> float:
        """Inner vorticity coefficient: ``omega(a) = phi * u_theta(a)``."""
        if not self.alpha_is_constant:
            raise ArgError("the time stepper and elliptic solvers need a constant alpha")
        return 2.0 / a + float(self.alpha) / self.nu


# ---------------------------------------------------------------------------
# potentials

POTENTIAL_KINDS = ("log_radial", "uniform_vertical", "harmonic_series", "radial_linear")


@dataclass(frozen=True, eq=False)
class Potential:
    """A potential ``f`` with analytic value and gradient callables.

    ``fn(r, theta)`` and ``grad_fn(r, theta) -> (f_r, f_theta/r)`` are used
    wherever the potential is needed off the collocation grid.
    """

    kind: str
    params: dict
    grid: AnnulusGrid
    fn: Callable
    grad_fn: Callable
    f: ScalarField
    gradf: VectorField
    non_harmonic: bool = False
    is_radial: bool = False

    def descriptor(self) -> dict:
        return {"kind": self.kind, **self.params}


def _series_terms(params):
    terms = []
    for item in params.get("terms", ()):
        m, ca, cb = item
        m = int(m)
        if m == 0:
            raise ArgError("use c0 and c_log for the m=0 part of a harmonic series")
        terms.append((m, float(ca), float(cb)))
    return terms


def make_potential(kind: str, params: dict | None, grid: AnnulusGrid, tol: float = 1e-8) -> Potential:
    """Build a potential on ``grid``.

    Kinds and parameters:

    - ``log_radial``: ``f = g ln r``
    - ``uniform_vertical``: ``f = g y``
    - ``harmonic_series``: ``f = c0 + c_log ln r + sum r^m (a_m cos m theta + b_m sin m theta)``
      with ``terms = [(m, a_m, b_m), ...]``; negative ``m`` gives decaying powers
    - ``radial_linear``: ``f = g r`` (not harmonic; linear solver only)
    """
    params = dict(params or {})
    if kind == "log_radial":
        g = float(params.setdefault("g", 1.0))
        fn = lambda r, t: g * np.log(r) + 0.0 * t
        grad_fn = lambda r, t: (g / r + 0.0 * t, 0.0 * r * t)
        radial = True
    elif kind == "uniform_vertical":
        g = float(params.setdefault("g", 1.0))
        fn = lambda r, t: g * r * np.sin(t)
        grad_fn = lambda r, t: (g * np.sin(t) + 0.0 * r, g * np.cos(t) + 0.0 * r)
        radial = False
    elif kind == "radial_linear":
        g = float(params.setdefault("g", 1.0))
        fn = lambda r, t: g * r + 0.0 * t
        grad_fn = lambda r, t: (g + 0.0 * r * t, 0.0 * r * t)
        radial = True
    elif kind == "harmonic_series":
        c0 = float(params.setdefault("c0", 0.0))
        clog = float(params.setdefault("c_log", 0.0))
        terms = _series_terms(params)
        params["terms"] = [list(tm) for tm in terms]

        def fn(r, t):
            out = c0 + clog * np.log(r) + 0.0 * t
            for m, ca, cb in terms:
                out = out + r**m * (ca * np.cos(m * t) + cb * np.sin(m * t))
            return out

        def grad_fn(r, t):
            fr = clog / r + 0.0 * t
            ft = 0.0 * r * t
            for m, ca, cb in terms:
                fr = fr + m * r ** (m - 1) * (ca * np.cos(m * t) + cb * np.sin(m * t))
                ft = ft + m * r ** (m - 1) * (-ca * np.sin(m * t) + cb * np.cos(m * t))
            return fr, ft

        radial = all(ca == 0 and cb == 0 for _, ca, cb in terms)
    else:
        raise ArgError(f"unknown potential kind {kind!r}; expected one of {POTENTIAL_KINDS}")

    f = grid.field(fn)
    fr, ft = grad_fn(grid.R, grid.TH)
    gradf = VectorField.from_arrays(grid, np.broadcast_to(fr, grid.shape), np.broadcast_to(ft, grid.shape))
    non_harmonic = kind == "radial_linear"
    if not non_harmonic:
        # judge f itself, not the working grid's resolution of it
        top = max([abs(m) for m, _, _ in params.get("terms", ())] + [1])
        check = make_grid(grid.a, grid.b, max(grid.Nr, 40), max(grid.Ntheta, 4 * top + 8))
        fc = check.field(fn)
        resid = norm(laplacian(fc), "L2")
        scale = norm(fc, "H1")
        if resid > tol * max(scale, 1e-300):
            raise HarmonicityError(
                f"{kind} potential has |Laplacian f| = {resid:.3e} > {tol:g} * |f|_H1 = {tol * scale:.3e}"
            )
    return Potential(kind, params, grid, fn, grad_fn, f, gradf, non_harmonic, radial)


# ---------------------------------------------------------------------------
# density profiles


@dataclass(frozen=True, eq=False)
class Profile:
    """Scalar density profile ``R(z)`` with derivative, optionally from an expression."""

    fn: Callable
    dfn: Callable
    expr: str = ""

    def __call__(self, z):
        return self.fn(z)


def make_profile(expr: str) -> Profile:
    """Parse a profile expression in the variable ``z`` (for example ``"-z + 2"``)."""
    z = sp.Symbol("z", real=True)
    try:
        e = sp.sympify(expr, locals={"z": z})
    except (sp.SympifyError, SyntaxError, TypeError) as exc:
        raise ArgError(f"cannot parse density profile {expr!r}: {exc}") from None
    extra = e.free_symbols - {z}
    if extra:
        raise ArgError(f"profile {expr!r} uses unknown symbols {sorted(map(str, extra))}")
    fn = sp.lambdify(z, e, "numpy")
    dfn = sp.lambdify(z, sp.diff(e, z), "numpy")
    wrap = lambda F: (lambda x: np.asarray(F(x), dtype=float) + 0.0 * np.asarray(x, dtype=float))
    return Profile(wrap(fn), wrap(dfn), str(e))


def linear_profile(gamma: float, beta: float) -> Profile:
    """``R(z) = -gamma z + beta``."""
    g, b = float(gamma), float(beta)
    return Profile(
        lambda x: -g * np.asarray(x, dtype=float) + b,
        lambda x: np.full(np.shape(x), -g),
        f"{-g!r}*z + {b!r}",
    )


# ---------------------------------------------------------------------------
# stability classes


@dataclass(frozen=True)
class Stable:
    h0: float

    def __str__(self):
        return f"Stable(h0={self.h0:.6g})"


@dataclass(frozen=True)
class Unstable:
    point: tuple  # (r, theta) of the maximizing node
    h_max: float = float("nan")

    def __str__(self):
        r, t = self.point
        return f"Unstable(r={r:.6g}, theta={t:.6g}, h={self.h_max:.6g})"


@dataclass(frozen=True)
class Indeterminate:
    h_max: float = 0.0

    def __str__(self):
        return "Indeterminate"


@dataclass(frozen=True, eq=False)
class HydrostaticEquilibrium:
    potential: Potential
    profile: Profile
    rho_s: ScalarField
    h: ScalarField
    stability: object = field(default=None)

    @property
    def grid(self) -> AnnulusGrid:
        return self.potential.grid

    def h_fn(self, r, t):
        return self.profile.dfn(self.potential.fn(r, t))

    def rho_fn(self, r, t):
        return self.profile.fn(self.potential.fn(r, t))

    @property
    def is_radial(self) -> bool:
        return self.potential.is_radial

    def descriptor(self, gamma=None, beta=None) -> dict:
        d = {"potential": self.potential.descriptor(), "profile": self.profile.expr,
             "stability": str(self.stability)}
        if gamma is not None:
            d["gamma"] = gamma
        if beta is not None:
            d["beta"] = beta
        return d

    def to_json(self, **kw) -> str:
        return json.dumps(self.descriptor(**kw), sort_keys=True)


def make_equilibrium(p: Potential, R: Profile | str) -> HydrostaticEquilibrium:
    """Compose a profile with a potential and classify the result."""
    if isinstance(R, str):
        R = make_profile(R)
    fvals = p.f.values
    with np.errstate(all="ignore"):
        rho = np.broadcast_to(R.fn(fvals), fvals.shape).astype(float)
        h = np.broadcast_to(R.dfn(fvals), fvals.shape).astype(float)
    if not (np.all(np.isfinite(rho)) and np.all(np.isfinite(h))):
        raise RangeError(
            f"profile {R.expr!r} is not finite on the potential range "
            f"[{fvals.min():.6g}, {fvals.max():.6g}]"
        )
    grid = p.grid
    eq = HydrostaticEquilibrium(p, R, ScalarField(grid, rho), ScalarField(grid, h))
    object.__setattr__(eq, "stability", classify(eq))
    return eq


def parallel_residual(rho_s: ScalarField, p: Potential) -> float:
    """L2 norm of the cross product ``d_y rho_s d_x f - d_x rho_s d_y f``."""
    if not rho_s.grid.same_as(p.grid):
        raise DomainError("density and potential live on different grids")
    rx, ry = to_cartesian(gradient(rho_s))
    fx, fy = to_cartesian(p.gradf)
    return norm(ScalarField(rho_s.grid, ry * fx - rx * fy), "L2")


def classify(eq_or_h, tol: float | None = None):
    """Stability class from the sign of ``h``.

    ``Unstable`` if ``max h > tol``, ``Stable(max h)`` if ``max h < -tol``,
    else ``Indeterminate``.  The default tolerance is ``1e-10 (1 + |h|_inf)``.
    """
    h = eq_or_h.h if isinstance(eq_or_h, HydrostaticEquilibrium) else eq_or_h
    vals = h.values
    if tol is None:
        tol = 1e-10 * (1.0 + float(np.max(np.abs(vals))))
    idx = np.unravel_index(int(np.argmax(vals)), vals.shape)
    hmax = float(vals[idx])
    if hmax > tol:
        g = h.grid
        return Unstable((float(g.r_nodes[idx[0]]), float(g.theta_nodes[idx[1]])), hmax)
    if hmax < -tol:
        return Stable(hmax)
    return Indeterminate(hmax)


def linear_family(p: Potential, gamma: float, beta: float) -> tuple[ScalarField, ScalarField]:
    """Density ``-gamma f + beta`` and its hydrostatic pressure.

    The pressure solves ``grad p_s = -rho_s grad f`` through the Neumann
    pressure solver and is normalized to zero mean.
    """
    from .elliptic import recover_pressure

    rho_s = p.f * (-float(gamma)) + float(beta)
    params = PhysicsParams(nu=1.0, rho_star=1.0)
    ps = recover_pressure(VectorField.zeros(p.grid), rho_s, params, p)
    return rho_s, ps


def closed_form_pressure_discrepancy(p: Potential, gamma: float, beta: float) -> float:
    """Relative L2 mismatch between ``grad(0.5 (gamma f - beta)^2)`` and ``-rho_s grad f``.

    Zero only for ``gamma = 1`` (or a trivial family); the solver never uses
    the closed form, this just quantifies how far it is from balance.
    """
    g = p.grid
    q = p.f * float(gamma) - float(beta)
    fr, ft = p.gradf.u_r.values, p.gradf.u_theta.values
    # grad(0.5 q^2) = gamma q grad f ; balance needs q grad f
    diff = VectorField.from_arrays(g, (gamma - 1.0) * q.values * fr, (gamma - 1.0) * q.values * ft)
    ref = VectorField.from_arrays(g, q.values * fr, q.values * ft)
    denom = norm(ref, "L2")
    return norm(diff, "L2") / denom if denom > 0 else 0.0
