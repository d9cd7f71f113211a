"""
Variational Rayleigh-Taylor growth rates.

For a trial velocity ``u`` (solenoidal, impermeable walls) define::

    J(u)  = int |u|^2
    E1(u) = int |grad u|^2 + (1/b) oint_b u_theta^2 + oint_a (1/a + alpha/nu) u_theta^2
    E2(u) = int h (u . grad f)^2
    E(s, u) = s nu E1(u) - E2(u) / rho*

and ``alpha(s) = min E(s, u) / J(u)``.  ``alpha`` is strictly increasing in
``s``; when it is negative somewhere the equation ``s^2 = -alpha(s)`` has a
unique root ``s*`` which is the largest growth rate of the linearized
system, with density ``rho = -h (u . grad f) / s*``.

Trial fields are ``u = grad_perp psi`` with ``psi`` a polynomial of degree
``Nr - 1`` in ``r`` vanishing on both walls for ``m >= 1`` (degrees of
freedom: its values at the interior Chebyshev nodes), and ``u_theta(r)`` of
the same degree for the mean mode.  Forms are assembled by Gauss-Legendre
quadrature in ``r`` (well beyond the polynomial degree) and a uniform rule in
``theta``.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
from scipy.optimize import brentq

from .elliptic import velocity_from_psi
from .equilibrium import HydrostaticEquilibrium, PhysicsParams, Stable, classify
from .errors import ArgError, BracketError, DegenerateError, EigenFailure
from .spectral import AnnulusGrid, ScalarField, VectorField

__all__ = [
    "FormSet",
    "ModeResult",
    "StabilityResult",
    "assemble_forms",
    "assemble_coupled",
    "alpha_of_s",
    "growth_rate",
    "eigenmode",
    "full_spectrum_check",
    "lower_bound",
    "upper_bound_line",
    "slope_bound",
    "poincare_minimum",
    "interp_matrix",
    "is_decoupled",
]


def interp_matrix(nodes: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Barycentric interpolation matrix from Chebyshev-Lobatto ``nodes`` to points ``x``."""
    n = len(nodes)
    w = (-1.0) ** np.arange(n)
    w[0] *= 0.5
    w[-1] *= 0.5
    diff = x[:, None] - nodes[None, :]
    exact = np.isclose(diff, 0.0, atol=1e-15 * (abs(nodes[-1]) + 1))
    diff[exact] = 1.0
    T = w[None, :] / diff
    T /= T.sum(axis=1, keepdims=True)
    rows = np.any(exact, axis=1)
    T[rows] = exact[rows].astype(float)
    return T


@dataclass
class _Radial:
    """Radial quadrature and cardinal-function samples for one grid."""

    r: np.ndarray
    w: np.ndarray
    phi: np.ndarray   # (nq, Nr) cardinal functions
    dphi: np.ndarray
    d2phi: np.ndarray
    end_phi: np.ndarray    # (2, Nr) values at a, b
    end_dphi: np.ndarray


def _radial(grid: AnnulusGrid, nq: int | None = None) -> _Radial:
    nq = nq or 2 * grid.Nr + 20
    x, wx = np.polynomial.legendre.leggauss(nq)
    half = 0.5 * (grid.b - grid.a)
    r = grid.a + half * (x + 1.0)
    T = interp_matrix(grid.r_nodes, r)
    Te = np.zeros((2, grid.Nr))
    Te[0, 0] = Te[1, -1] = 1.0
    return _Radial(r, wx * half, T, T @ grid.D, T @ grid.D2, Te, Te @ grid.D)


@dataclass(frozen=True)
class _Dof:
    m: int
    kind: str  # "cos", "sin" or "mean"
    j: int     # radial node index


@dataclass(eq=False)
class FormSet:
    """Quadratic forms on the trial space of one azimuthal mode (or all, if coupled).

    ``M`` discretizes ``J``, ``K1`` discretizes ``E1`` (boundary terms
    included), ``K2`` discretizes ``E2``.  ``m`` is ``None`` for a coupled set.
    """

    m: int | None
    M: np.ndarray
    K1: np.ndarray
    K2: np.ndarray
    dofs: list
    grid: AnnulusGrid
    nu: float
    rho_star: float
    equilibrium: HydrostaticEquilibrium | None = None
    coupled: bool = False
    h_sup: float = 0.0
    gradf_sup: float = 0.0
    _chol: object = field(default=None, repr=False)

    @property
    def size(self) -> int:
        return self.M.shape[0]

    def pencil(self, s: float) -> np.ndarray:
        return s * self.nu * self.K1 - self.K2 / self.rho_star

    def J(self, c) -> float:
        return float(c @ self.M @ c)

    def E1(self, c) -> float:
        return float(c @ self.K1 @ c)

    def E2(self, c) -> float:
        return float(c @ self.K2 @ c)

    def fields(self, c: np.ndarray):
        """Streamfunction coefficients and mean velocity on the grid for a coefficient vector."""
        g = self.grid
        psi_hat = np.zeros((g.Nr, g.nmodes), dtype=complex)
        u0 = np.zeros(g.Nr)
        for ci, d in zip(c, self.dofs):
            if d.kind == "mean":
                u0[d.j] += ci
            elif d.kind == "cos":
                psi_hat[d.j, d.m] += 0.5 * ci
            else:  # sin m theta = (e^{im} - e^{-im}) / 2i
                psi_hat[d.j, d.m] += -0.5j * ci
        return psi_hat, u0


def _angular(m, kind, th):
    """Angular factors ``(A, dA/m)`` with ``A`` the psi (or u_theta) factor."""
    if kind == "cos":
        return np.cos(m * th), -np.sin(m * th)
    if kind == "sin":
        return np.sin(m * th), np.cos(m * th)
    return np.ones_like(th), np.zeros_like(th)


def _samples(rad: _Radial, dofs, th):
    """Per-dof samples ``(u_r, u_theta, G_rr, G_rt, G_tr, G_tt)`` on the (r, theta) rule.

    Returns arrays of shape (ndof, nq, nt) and wall ``u_theta`` values (ndof, 2, nt).
    """
    r = rad.r[:, None]
    out = np.zeros((6, len(dofs), len(rad.r), len(th)))
    wall = np.zeros((len(dofs), 2, len(th)))
    for k, d in enumerate(dofs):
        A, B = _angular(d.m, d.kind, th)
        A = A[None, :]
        B = B[None, :]
        p = rad.phi[:, d.j][:, None]
        dp = rad.dphi[:, d.j][:, None]
        d2p = rad.d2phi[:, d.j][:, None]
        if d.kind == "mean":
            # u_theta = v(r)
            out[1, k] = p * A
            out[3, k] = -p / r * A
            out[4, k] = dp * A
            wall[k] = rad.end_phi[:, d.j][:, None] * A
            continue
        m = d.m
        # psi = phi(r) A(theta); u_r = -(1/r) psi_theta = -(m/r) phi B; u_theta = phi' A
        q = dp / r - p / r**2  # (phi/r)'
        out[0, k] = -(m / r) * p * B
        out[1, k] = dp * A
        out[2, k] = -m * q * B
        out[3, k] = (m * m * p / r**2 - dp / r) * A
        out[4, k] = d2p * A
        out[5, k] = m * q * B
        wall[k] = rad.end_dphi[:, d.j][:, None] * A
    return out, wall


def _assemble(grid, dofs, params, bc_set, h_fn, grad_fn, nt, nq=None, outer_coef=None):
    rad = _radial(grid, nq)
    th = 2 * np.pi * np.arange(nt) / nt
    dth = 2 * np.pi / nt
    S, wall = _samples(rad, dofs, th)
    W = (rad.w * rad.r)[:, None] * dth * np.ones(nt)[None, :]
    n = len(dofs)
    flat = lambda X: X.reshape(n, -1)
    Wf = W.reshape(-1)
    M = flat(S[0]) * Wf @ flat(S[0]).T + flat(S[1]) * Wf @ flat(S[1]).T
    K1 = sum(flat(S[i]) * Wf @ flat(S[i]).T for i in range(2, 6))
    ca = params.slip_coefficient(grid.a, bc_set, th)
    cb = 1.0 / grid.b if outer_coef is None else outer_coef
    K1 = K1 + (wall[:, 0, :] * (grid.a * dth * ca)) @ wall[:, 0, :].T
    K1 = K1 + (wall[:, 1, :] * (grid.b * dth * cb)) @ wall[:, 1, :].T
    R, TH = np.meshgrid(rad.r, th, indexing="ij")
    fr, ft = grad_fn(R, TH)
    fr = np.broadcast_to(fr, R.shape)
    ft = np.broadcast_to(ft, R.shape)
    h = np.broadcast_to(h_fn(R, TH), R.shape)
    ugf = S[0] * fr[None] + S[1] * ft[None]
    K2 = flat(ugf) * (Wf * h.reshape(-1)) @ flat(ugf).T
    sym = lambda X: 0.5 * (X + X.T)
    h_sup = float(np.max(np.abs(h)))
    gf_sup = float(np.max(np.hypot(fr, ft)))
    return sym(M), sym(K1), sym(K2), h_sup, gf_sup


def is_decoupled(eq: HydrostaticEquilibrium, params: PhysicsParams) -> bool:
    """Forms split by azimuthal mode when the potential is radial and alpha is constant."""
    return bool(eq.is_radial and params.alpha_is_constant)


def _mode_dofs(grid: AnnulusGrid, m: int):
    if m == 0:
        return [_Dof(0, "mean", j) for j in range(grid.Nr)]
    return [_Dof(m, "cos", j) for j in range(1, grid.Nr - 1)]


def assemble_forms(eq: HydrostaticEquilibrium, params: PhysicsParams, m: int,
                   bc_set: str = "paper_mixed", nq: int | None = None) -> FormSet:
    """Forms for azimuthal mode ``m`` (decoupled equilibria only).

    Only the ``cos(m theta)`` family is assembled; the ``sin`` family gives the
    identical pencil.
    """
    grid = eq.grid
    m = int(m)
    if not 0 <= m < grid.Ntheta // 2:
        raise ArgError(f"mode {m} outside 0..{grid.Ntheta // 2 - 1}")
    if not is_decoupled(eq, params):
        raise ArgError("equilibrium couples azimuthal modes; use assemble_coupled")
    dofs = _mode_dofs(grid, m)
    nt = max(8, 4 * m + 4)
    M, K1, K2, hs, gs = _assemble(grid, dofs, params, bc_set, eq.h_fn, eq.potential.grad_fn, nt, nq)
    return FormSet(m, M, K1, K2, dofs, grid, params.nu, params.rho_star, eq, False, hs, gs)


def assemble_coupled(eq: HydrostaticEquilibrium, params: PhysicsParams, bc_set: str = "paper_mixed",
                     nq: int | None = None, nt: int | None = None) -> FormSet:
    """Forms over every retained mode (``0 .. Ntheta/2 - 1``, both parities)."""
    grid = eq.grid
    if grid.Ntheta > 64:
        raise ArgError("coupled pencils are limited to Ntheta <= 64")
    dofs = _mode_dofs(grid, 0)
    for m in range(1, grid.Ntheta // 2):
        dofs += [_Dof(m, "cos", j) for j in range(1, grid.Nr - 1)]
        dofs += [_Dof(m, "sin", j) for j in range(1, grid.Nr - 1)]
    nt = nt or 4 * grid.Ntheta
    M, K1, K2, hs, gs = _assemble(grid, dofs, params, bc_set, eq.h_fn, eq.potential.grad_fn, nt, nq)
    return FormSet(None, M, K1, K2, dofs, grid, params.nu, params.rho_star, eq, True, hs, gs)


def _eig_lowest(forms: FormSet, s: float, k: int = 1):
    try:
        vals, vecs = sla.eigh(forms.pencil(s), forms.M, subset_by_index=[0, k - 1])
    except (sla.LinAlgError, ValueError) as exc:
        raise EigenFailure(f"generalized symmetric eigensolve failed at s={s:g}: {exc}") from None
    return vals, vecs


def alpha_of_s(forms: FormSet, s: float) -> float:
    """Smallest generalized eigenvalue of ``(s nu K1 - K2/rho*, M)``."""
    if not s > 0:
        raise ArgError(f"s must be positive, got {s}")
    vals, _ = _eig_lowest(forms, s)
    return float(vals[0])


def lower_bound(forms: FormSet) -> float:
    """``-|h|_inf |grad f|_inf^2 / rho*``, below every ``alpha(s)``."""
    return -forms.h_sup * forms.gradf_sup**2 / forms.rho_star


def upper_bound_line(forms: FormSet, c: np.ndarray | None = None) -> tuple[float, float]:
    """``(C1, C2)`` with ``alpha(s) <= -C1 + s C2`` from a trial vector.

    The default trial maximizes ``E2 / J``.
    """
    if c is None:
        vals, vecs = sla.eigh(forms.K2, forms.M, subset_by_index=[forms.size - 1, forms.size - 1])
        c = vecs[:, 0]
    c = c / math.sqrt(forms.J(c))
    return forms.E2(c) / forms.rho_star, forms.nu * forms.E1(c)


def slope_bound(forms: FormSet) -> float:
    """``nu * max E1/J``: an upper bound for ``d alpha / ds``."""
    vals = sla.eigh(forms.K1, forms.M, eigvals_only=True, subset_by_index=[forms.size - 1, forms.size - 1])
    return forms.nu * float(vals[0])


def growth_rate(forms: FormSet, bracket: tuple[float, float] | None = None, tol: float = 1e-10):
    """Root ``s*`` of ``-s^2 - alpha(s)``, or ``None`` when ``alpha(s_lo) > 0``.

    Without a bracket, ``s_hi`` starts at ``sqrt(-lower_bound)`` (where the
    function is certainly negative) and is widened tenfold up to six times.
    """
    user = bracket is not None
    s_lo, s_hi = bracket if user else (1e-6, None)
    if not s_lo > 0:
        raise ArgError(f"s_lo must be positive, got {s_lo}")
    Phi = lambda s: -s * s - alpha_of_s(forms, s)
    a_lo = alpha_of_s(forms, s_lo)
    if a_lo > 0:
        return None
    f_lo = -s_lo * s_lo - a_lo
    if s_hi is None:
        s_hi = max(2 * s_lo, 1.01 * math.sqrt(max(-lower_bound(forms), 0.0)) + 1e-12)
    f_hi = Phi(s_hi)
    tries = 0
    while f_lo * f_hi > 0 and not user and tries < 6:
        s_hi *= 10.0
        f_hi = Phi(s_hi)
        tries += 1
    if f_lo == 0:
        return s_lo
    if f_hi == 0:
        return s_hi
    if f_lo * f_hi > 0:
        raise BracketError(f"no sign change of s^2 + alpha(s) on [{s_lo:g}, {s_hi:g}]")
    s = brentq(Phi, s_lo, s_hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=300)
    # polish with secant steps if the defect is above tolerance
    for _ in range(5):
        d = Phi(s)
        if abs(d) <= tol * s * s:
            break
        h = 1e-7 * max(s, 1e-8)
        deriv = (Phi(s + h) - Phi(s - h)) / (2 * h)
        s = s - d / deriv
    return float(s)


def eigenmode(forms: FormSet, s_star: float):
    """Minimizing field at ``s*`` with ``J(u) = 1``; returns ``(psi, u, rho)`` on the grid.

    ``rho = -h (u . grad f) / s*``.  Raises :class:`DegenerateError` (with the
    triple attached as ``.result``) if the lowest eigenvalue is repeated.
    """
    vals, vecs = _eig_lowest(forms, s_star, k=min(2, forms.size))
    c = vecs[:, 0].copy()
    c /= math.sqrt(forms.J(c))
    c *= np.sign(c[np.argmax(np.abs(c))])
    g = forms.grid
    psi_hat, u0 = forms.fields(c)
    u = velocity_from_psi(g, psi_hat, u0)
    eq = forms.equilibrium
    ugf = u.u_r.values * eq.potential.gradf.u_r.values + u.u_theta.values * eq.potential.gradf.u_theta.values
    rho = ScalarField(g, -eq.h.values * ugf / s_star)
    psi_hat = psi_hat.copy()
    psi = ScalarField(g, g.irfft(psi_hat))
    result = (psi, u, rho)
    if len(vals) > 1 and abs(vals[1] - vals[0]) <= 1e-9 * max(1.0, abs(vals[0])):
        err = DegenerateError(f"lowest eigenvalue at s={s_star:g} has multiplicity >= 2")
        err.result = result
        err.multiplicity = 2
        raise err
    return result


@dataclass
class ModeResult:
    m: int | None
    alpha_curve: list
    s_star: float | None
    defect: float | None = None


@dataclass
class StabilityResult:
    per_mode: list
    lam: float | None
    mode: int | None
    eigenmode: tuple | None
    classification: object
    forms: FormSet | None = None

    @property
    def lambda_(self):
        return self.lam

    def summary(self) -> dict:
        best = next((pm for pm in self.per_mode if pm.m == self.mode), None)
        return {
            "lambda": self.lam,
            "mode": self.mode,
            "s_star": self.lam,
            "defect": None if best is None else best.defect,
            "classification": str(self.classification),
        }


def _sample_s(forms: FormSet, n: int):
    hi = max(1.0, 2 * math.sqrt(max(-lower_bound(forms), 1e-12)))
    return list(np.geomspace(1e-3 * hi, hi, n)) if n > 0 else []


def _mode_result(forms: FormSet, s_samples: int):
    curve = [(float(s), alpha_of_s(forms, s)) for s in _sample_s(forms, s_samples)]
    s = growth_rate(forms)
    defect = None if s is None else abs(s * s + alpha_of_s(forms, s)) / (s * s)
    return ModeResult(forms.m, curve, s, defect)


def full_spectrum_check(eq: HydrostaticEquilibrium, params: PhysicsParams, modes=None,
                        bc_set: str = "paper_mixed", s_samples: int = 8, workers: int = 1,
                        want_eigenmode: bool = True, nq: int | None = None) -> StabilityResult:
    """Growth rate per mode, the overall maximum and its eigenmode.

    Coupled equilibria (non-radial potential or theta-dependent alpha) are
    solved as one pencil and reported as a single entry with ``m = None``.
    """
    grid = eq.grid
    cls = classify(eq)
    if is_decoupled(eq, params):
        modes = list(range(0, 9)) if modes is None else [int(m) for m in modes]
        if not modes:
            raise ArgError("modes must be nonempty")
        build = lambda m: assemble_forms(eq, params, m, bc_set, nq)
        if workers > 1:
            with ThreadPoolExecutor(workers) as ex:
                formsets = list(ex.map(build, modes))
                results = list(ex.map(lambda f: _mode_result(f, s_samples), formsets))
        else:
            formsets = [build(m) for m in modes]
            results = [_mode_result(f, s_samples) for f in formsets]
    else:
        formsets = [assemble_coupled(eq, params, bc_set, nq)]
        results = [_mode_result(formsets[0], s_samples)]
    found = [(r.s_star, i) for i, r in enumerate(results) if r.s_star is not None]
    if isinstance(cls, Stable) and found:
        raise EigenFailure(f"stable equilibrium {cls} produced a growth rate {max(found)[0]:.3e}")
    if not found:
        return StabilityResult(results, None, None, None, cls)
    lam, i = max(found)
    em = None
    if want_eigenmode:
        try:
            em = eigenmode(formsets[i], lam)
        except DegenerateError as exc:
            em = exc.result
    return StabilityResult(results, lam, results[i].m, em, cls, formsets[i])


def poincare_minimum(grid: AnnulusGrid, modes=None, nq: int | None = None) -> float:
    """Smallest ``(|grad v|^2 + oint_b v_theta^2) / |v|^2`` over the trial space.

    The inverse is the discrete constant in the Poincare-type inequality
    ``|v|^2 <= C (|grad v|^2 + |v_theta|^2_{L2(r=b)})``.
    """
    modes = range(grid.Ntheta // 2) if modes is None else modes

    class _P:
        nu = 1.0
        alpha_is_constant = True

        @staticmethod
        def slip_coefficient(a, bc_set, theta=None):
            return np.zeros(np.shape(theta)) if theta is not None else 0.0

    best = np.inf
    for m in modes:
        dofs = _mode_dofs(grid, int(m))
        nt = max(8, 4 * int(m) + 4)
        zero = lambda r, t: np.zeros(np.broadcast(r, t).shape)
        M, K1, _, _, _ = _assemble(grid, dofs, _P, "paper_mixed", zero,
                                   lambda r, t: (zero(r, t), zero(r, t)), nt, nq, outer_coef=1.0)
        v = sla.eigh(K1, M, eigvals_only=True, subset_by_index=[0, 0])[0]
        best = min(best, float(v))
    return best

