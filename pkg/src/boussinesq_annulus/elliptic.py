"""
Per-mode radial solvers on the annulus.

Every azimuthal mode ``m`` reduces the polar Laplacian to the radial operator
``L_m = d_rr + (1/r) d_r - m^2/r^2``.  The dense matrices, their boundary-row
modified LU factors, and the boundary influence data used to close the
vorticity conditions are cached per grid.

Streamfunction convention: ``u = grad_perp psi`` so ``u_r = -(1/r) d_theta psi``,
``u_theta = d_r psi`` and ``vorticity(u) = Laplacian psi``.  Modes ``m >= 1``
have ``psi = 0`` on both walls.  The mean mode carries the circulation and is
handled through the azimuthal-mean velocity ``u_theta0(r)`` directly.
"""

from __future__ import annotations

import threading
import weakref
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .equilibrium import BC_SETS, PhysicsParams, Potential
from .errors import ArgError, CompatibilityError, InfluenceSingular, SingularError
from .spectral import (
    AnnulusGrid,
    ScalarField,
    VectorField,
    divergence,
    integrate,
    vorticity,
)

__all__ = [
    "BC",
    "ModeOperators",
    "mode_operators",
    "poisson_mode",
    "helmholtz_mode",
    "streamfunction",
    "velocity_from_psi",
    "InfluenceMatrix",
    "VorticitySolver",
    "mean_velocity_rows",
    "recover_pressure",
    "momentum_forcing",
    "solve_stokes",
]


@dataclass(frozen=True)
class BC:
    """One boundary row: ``value`` for Dirichlet, ``d_r u - coef * u`` for Robin."""

    kind: str = "dirichlet"
    coef: float = 0.0


DIRICHLET = BC()


def _solve_lu(lu, rhs: np.ndarray) -> np.ndarray:
    if np.iscomplexobj(rhs):
        return sla.lu_solve(lu, rhs.real) + 1j * sla.lu_solve(lu, rhs.imag)
    return sla.lu_solve(lu, rhs)


class ModeOperators:
    """Radial matrices and cached factorizations for one grid."""

    def __init__(self, grid: AnnulusGrid):
        self.grid = grid
        r = grid.r_nodes
        self.inv_r = 1.0 / r
        self.L0 = grid.D2 + self.inv_r[:, None] * grid.D
        self._factors: dict = {}
        self._influence: dict = {}
        self._lock = threading.Lock()

    def L(self, m: int) -> np.ndarray:
        return self.L0 - np.diag(m * m * self.inv_r**2)

    def _row(self, bc: BC, wall: str) -> np.ndarray:
        i = 0 if wall == "a" else -1
        n = self.grid.Nr
        if bc.kind == "dirichlet":
            row = np.zeros(n)
            row[i] = 1.0
        elif bc.kind == "robin":
            row = self.grid.D[i].copy()
            row[i] -= bc.coef
        elif bc.kind == "neumann":
            row = self.grid.D[i].copy()
        else:
            raise ArgError(f"unknown boundary row kind {bc.kind!r}")
        return row

    def matrix(self, m: int, shift: float, kappa: float, bc_a: BC, bc_b: BC) -> np.ndarray:
        """``shift I - kappa L_m`` with the first/last rows replaced by boundary rows."""
        A = shift * np.eye(self.grid.Nr) - kappa * self.L(m)
        A[0] = self._row(bc_a, "a")
        A[-1] = self._row(bc_b, "b")
        return A

    def factor(self, m: int, shift: float, kappa: float, bc_a: BC = DIRICHLET, bc_b: BC = DIRICHLET):
        key = (int(m), float(shift), float(kappa), bc_a, bc_b)
        lu = self._factors.get(key)
        if lu is None:
            with self._lock:
                lu = self._factors.get(key)
                if lu is None:
                    A = self.matrix(m, shift, kappa, bc_a, bc_b)
                    try:
                        lu = sla.lu_factor(A, check_finite=True)
                    except (ValueError, sla.LinAlgError) as exc:
                        raise SingularError(f"mode {m}: factorization failed ({exc})") from None
                    if np.min(np.abs(np.diag(lu[0]))) < 1e-14 * np.max(np.abs(np.diag(lu[0]))):
                        raise SingularError(f"mode {m}: radial operator is numerically singular")
                    self._factors[key] = lu
        return lu

    def solve(self, m, shift, kappa, rhs, va=0.0, vb=0.0, bc_a: BC = DIRICHLET, bc_b: BC = DIRICHLET):
        lu = self.factor(m, shift, kappa, bc_a, bc_b)
        rhs = np.array(rhs, dtype=np.result_type(rhs, va, vb, float), copy=True)
        rhs[0] = va
        rhs[-1] = vb
        return _solve_lu(lu, rhs)


_OPS: "weakref.WeakKeyDictionary[AnnulusGrid, ModeOperators]" = weakref.WeakKeyDictionary()
_OPS_LOCK = threading.Lock()


def mode_operators(grid: AnnulusGrid) -> ModeOperators:
    with _OPS_LOCK:
        ops = _OPS.get(grid)
        if ops is None:
            ops = ModeOperators(grid)
            _OPS[grid] = ops
    return ops


def _check_mode(grid, m):
    if abs(int(m)) > grid.Ntheta // 2:
        raise ArgError(f"mode {m} exceeds Ntheta/2 = {grid.Ntheta // 2}")
    return abs(int(m))


def poisson_mode(grid: AnnulusGrid, m: int, rhs_m, va=0.0, vb=0.0) -> np.ndarray:
    """Solve ``L_m psi = rhs`` with Dirichlet values ``psi(a)=va``, ``psi(b)=vb``."""
    m = _check_mode(grid, m)
    return mode_operators(grid).solve(m, 0.0, -1.0, np.asarray(rhs_m), va, vb)


def helmholtz_mode(grid: AnnulusGrid, m: int, kappa: float, rhs_m, va=0.0, vb=0.0,
                   bc_a: BC = DIRICHLET, bc_b: BC = DIRICHLET) -> np.ndarray:
    """Solve ``(I - kappa L_m) u = rhs`` with the given boundary rows and values."""
    if kappa < 0:
        raise ArgError(f"kappa must be >= 0, got {kappa}")
    m = _check_mode(grid, m)
    return mode_operators(grid).solve(m, 1.0, kappa, np.asarray(rhs_m), va, vb, bc_a, bc_b)


# ---------------------------------------------------------------------------
# streamfunction and velocity


def mean_velocity_rows(params: PhysicsParams, grid: AnnulusGrid, bc_set: str) -> tuple[BC, BC]:
    """Robin rows for the azimuthal-mean velocity implied by the vorticity conditions.

    ``omega = u' + u/r``; ``omega(a) = phi u(a)`` gives ``u' = (1/a + alpha/nu) u``
    on the inner wall and ``omega(b) = 0`` gives ``u' = -u/b`` on the outer one.
    """
    if bc_set not in BC_SETS:
        raise ArgError(f"unknown bc_set {bc_set!r}")
    ca = params.slip_coefficient(grid.a, bc_set)
    return BC("robin", ca), BC("robin", -1.0 / grid.b)


def velocity_from_psi(grid: AnnulusGrid, psi_hat: np.ndarray, u0: np.ndarray | None = None) -> VectorField:
    """Velocity from streamfunction coefficients; ``u0`` overrides the mean azimuthal part."""
    psi = grid.irfft(psi_hat)
    ur = -grid.dtheta(psi) / grid.R
    ut = grid.dr(psi)
    if u0 is not None:
        ut = ut - grid.dr(grid.irfft(_mean_only(psi_hat)))
        ut = ut + u0[:, None]
    ur[0] = 0.0
    ur[-1] = 0.0
    return VectorField.from_arrays(grid, ur, ut, wall_compatible=True)


def _mean_only(c):
    out = np.zeros_like(c)
    out[:, 0] = c[:, 0]
    return out


def streamfunction(omega: ScalarField, params: PhysicsParams, bc_set: str = "paper_mixed",
                   inner_circulation: float | None = None) -> tuple[ScalarField, VectorField]:
    """Recover ``psi`` and the velocity from the vorticity.

    Non-axisymmetric modes solve ``L_m psi_m = omega_m`` with ``psi_m = 0`` on
    both walls.  The mean mode needs the inner-wall velocity, which the
    vorticity alone does not fix (the potential vortex ``1/r`` has zero
    vorticity).  It is taken from ``inner_circulation`` (``= 2 pi a u_theta(a)``)
    when supplied; otherwise from the inner vorticity condition
    ``omega(a) = phi u_theta(a)`` for ``paper_mixed``, and zero for
    ``both_stress_free``.  ``psi`` is zero on ``r = b``.
    """
    grid = omega.grid
    if bc_set not in BC_SETS:
        raise ArgError(f"unknown bc_set {bc_set!r}")
    ops = mode_operators(grid)
    w_hat = omega.coeffs
    psi_hat = np.zeros_like(w_hat)
    for m in range(1, grid.nmodes - 1):
        psi_hat[:, m] = ops.solve(m, 0.0, -1.0, w_hat[:, m])
    if inner_circulation is not None:
        ua = float(inner_circulation) / (2 * np.pi * grid.a)
    elif bc_set == "paper_mixed":
        ua = float(w_hat[0, 0].real) / params.phi(grid.a)
    else:
        ua = 0.0
    # mean mode: L_0 psi0 = omega0, psi0'(a) = ua, psi0(b) = 0
    psi_hat[:, 0] = ops.solve(0, 0.0, -1.0, w_hat[:, 0].real, ua, 0.0, BC("neumann"), DIRICHLET)
    psi = ScalarField(grid, grid.irfft(psi_hat))
    return psi, velocity_from_psi(grid, psi_hat)


# ---------------------------------------------------------------------------
# implicit vorticity solves with boundary closure


@dataclass(frozen=True)
class InfluenceMatrix:
    """1x1 boundary closure for mode ``m`` of ``(shift - kappa L_m) omega = rhs``.

    ``green`` is the homogeneous solution with ``omega(a)=1, omega(b)=0``;
    ``psi_green`` its streamfunction; ``denom = 1 - phi psi_green'(a)``.
    """

    m: int
    green: np.ndarray
    psi_green: np.ndarray
    denom: float
    cond: float


class VorticitySolver:
    """Solve ``(shift I - kappa L) omega = rhs`` subject to the wall conditions.

    For ``m >= 1`` the conditions are ``psi = 0`` on both walls,
    ``omega(b) = 0`` and ``omega(a) = phi u_theta(a)`` (or ``0`` for
    ``both_stress_free``).  The mean mode is advanced as the azimuthal-mean
    velocity with the Robin rows of :func:`mean_velocity_rows`.

    Modes ``1..max_mode`` are solved in one batch with precomputed inverses of
    the boundary-row modified matrices; ``workers > 1`` splits the batch over
    threads.  Each mode is computed by the same elementwise loop either way, so
    results do not depend on the worker count.
    """

    def __init__(self, grid: AnnulusGrid, params: PhysicsParams, bc_set: str,
                 shift: float, kappa: float, workers: int = 1, max_mode: int | None = None):
        if bc_set not in BC_SETS:
            raise ArgError(f"unknown bc_set {bc_set!r}")
        self.grid = grid
        self.params = params
        self.bc_set = bc_set
        self.shift = float(shift)
        self.kappa = float(kappa)
        self.workers = max(1, int(workers))
        self.ops = mode_operators(grid)
        self.phi = params.phi(grid.a) if bc_set == "paper_mixed" else 0.0
        self.rows0 = mean_velocity_rows(params, grid, bc_set)
        top = grid.nmodes - 2 if max_mode is None else min(int(max_mode), grid.nmodes - 2)
        self.modes = np.arange(1, top + 1)
        self.influence = {int(m): self._influence(int(m)) for m in self.modes}
        eye = np.eye(grid.Nr)
        self.Hinv = np.array([sla.lu_solve(self.ops.factor(int(m), self.shift, self.kappa), eye)
                              for m in self.modes]).reshape(-1, grid.Nr, grid.Nr)
        self.Pinv = np.array([sla.lu_solve(self.ops.factor(int(m), 0.0, -1.0), eye)
                              for m in self.modes]).reshape(-1, grid.Nr, grid.Nr)
        self.green = np.array([self.influence[int(m)].green for m in self.modes]).reshape(-1, grid.Nr)
        self.psi_green = np.array([self.influence[int(m)].psi_green for m in self.modes]).reshape(-1, grid.Nr)
        self.denom = np.array([self.influence[int(m)].denom for m in self.modes])
        self.lu0 = self.ops.factor(1, self.shift, self.kappa, *self.rows0)

    def _influence(self, m: int) -> InfluenceMatrix:
        key = (m, self.bc_set, self.phi, self.shift, self.kappa)
        cached = self.ops._influence.get(key)
        if cached is not None:
            return cached
        Nr = self.grid.Nr
        green = self.ops.solve(m, self.shift, self.kappa, np.zeros(Nr), 1.0, 0.0)
        psi_g = self.ops.solve(m, 0.0, -1.0, green)
        slope = float(self.grid.D[0] @ psi_g)
        denom = 1.0 - self.phi * slope
        if self.bc_set == "paper_mixed" and abs(denom) < 1e-12:
            raise InfluenceSingular(f"mode {m}: influence coefficient {denom:.3e}")
        inf = InfluenceMatrix(m, green, psi_g, denom, 1.0 / abs(denom))
        with self.ops._lock:
            self.ops._influence[key] = inf
        return inf

    def _batch(self, sl: slice, rhs: np.ndarray):
        rhs = rhs.copy()
        rhs[:, 0] = 0.0
        rhs[:, -1] = 0.0
        w = np.einsum("mij,mj->mi", self.Hinv[sl], rhs)
        wz = w.copy()
        wz[:, 0] = 0.0
        wz[:, -1] = 0.0
        psi = np.einsum("mij,mj->mi", self.Pinv[sl], wz)
        if self.bc_set == "paper_mixed":
            slope = np.einsum("j,mj->m", self.grid.D[0], psi)
            tau = self.phi * slope / self.denom[sl]
            w = w + tau[:, None] * self.green[sl]
            psi = psi + tau[:, None] * self.psi_green[sl]
        return w, psi

    def solve(self, rhs_hat: np.ndarray, rhs_u0: np.ndarray):
        """Return ``(omega_hat, psi_hat, u0)`` for the new level.

        ``rhs_hat`` holds vorticity right-hand sides per mode (mean column
        ignored, columns above ``max_mode`` dropped); ``rhs_u0`` is the
        right-hand side for the mean azimuthal velocity.
        """
        grid = self.grid
        nm = len(self.modes)
        w_hat = np.zeros((grid.Nr, grid.nmodes), dtype=complex)
        psi_hat = np.zeros_like(w_hat)
        if nm:
            rhs = np.ascontiguousarray(rhs_hat[:, 1:nm + 1].T, dtype=complex)
            if self.workers > 1 and nm > 1:
                bounds = np.linspace(0, nm, min(self.workers, nm) + 1).astype(int)
                slices = [slice(lo, hi) for lo, hi in zip(bounds[:-1], bounds[1:])]
                with ThreadPoolExecutor(self.workers) as ex:
                    parts = list(ex.map(lambda s: self._batch(s, rhs[s]), slices))
                w = np.concatenate([p[0] for p in parts])
                psi = np.concatenate([p[1] for p in parts])
            else:
                w, psi = self._batch(slice(0, nm), rhs)
            w_hat[:, 1:nm + 1] = w.T
            psi_hat[:, 1:nm + 1] = psi.T
        rhs0 = np.array(rhs_u0, dtype=float)
        rhs0[0] = 0.0
        rhs0[-1] = 0.0
        u0 = sla.lu_solve(self.lu0, rhs0)
        w_hat[:, 0] = grid.D @ u0 + u0 / grid.r_nodes
        psi_hat[:, 0] = mean_streamfunction(grid, u0)
        return w_hat, psi_hat, u0


def mean_streamfunction(grid: AnnulusGrid, u0: np.ndarray) -> np.ndarray:
    """``psi0`` with ``psi0' = u0`` and ``psi0(b) = 0``."""
    A = grid.D.copy()
    A[-1] = 0.0
    A[-1, -1] = 1.0
    rhs = np.array(u0, dtype=float)
    rhs[-1] = 0.0
    return np.linalg.solve(A, rhs)


# ---------------------------------------------------------------------------
# pressure


def momentum_forcing(u: VectorField, rho_total: ScalarField, params: PhysicsParams, potential: Potential,
                     u_t: VectorField | None = None, advection: bool = True) -> VectorField:
    """Everything in the momentum balance except the pressure gradient.

    ``F = -rho grad f - rho* (u.grad)u + rho* nu Laplacian u - rho* u_t``; the
    viscous term is evaluated as ``grad_perp omega`` (equal for solenoidal u).
    """
    grid = u.grid
    R = grid.R
    rs = params.rho_star
    rho = rho_total.values
    fr, ft = potential.gradf.u_r.values, potential.gradf.u_theta.values
    w = vorticity(u).values
    Fr = -rho * fr + rs * params.nu * (-grid.dtheta(w) / R)
    Ft = -rho * ft + rs * params.nu * grid.dr(w)
    if advection:
        ur, ut = u.u_r.values, u.u_theta.values
        ke = 0.5 * (ur**2 + ut**2)
        # (u.grad)u = grad(|u|^2/2) + omega * (-u_theta, u_r)
        Fr -= rs * (grid.dr(ke) - w * ut)
        Ft -= rs * (grid.dtheta(ke) / R + w * ur)
    if u_t is not None:
        Fr -= rs * u_t.u_r.values
        Ft -= rs * u_t.u_theta.values
    return VectorField.from_arrays(grid, Fr, Ft)


def recover_pressure(u: VectorField, rho_total: ScalarField, params: PhysicsParams, potential: Potential,
                     u_t: VectorField | None = None, advection: bool = True,
                     return_defect: bool = False, defect_tol: float | None = None):
    """Pressure from the divergence of the momentum balance.

    Solves ``Laplacian P = div F`` with ``d_r P = F_r`` on both walls, mode by
    mode, and normalizes ``P`` to zero mean.  The mean mode is singular; a
    uniform source correction is solved for alongside so the Neumann problem is
    compatible.  Its size (relative to ``|div F| + |F|``) is the compatibility
    defect; it is returned when ``return_defect`` and raises
    :class:`CompatibilityError` above ``defect_tol`` when that is given.
    """
    grid = u.grid
    F = momentum_forcing(u, rho_total, params, potential, u_t, advection)
    src = grid.rfft(divergence(F).values)
    Fr_hat = grid.rfft(F.u_r.values)
    ops = mode_operators(grid)
    P_hat = np.zeros_like(src)
    nbc = BC("neumann")
    for m in range(1, grid.nmodes - 1):
        P_hat[:, m] = ops.solve(m, 0.0, -1.0, src[:, m], Fr_hat[0, m], Fr_hat[-1, m], nbc, nbc)
    # bordered system for the mean mode: L0 P + mu = src, Neumann rows, zero mean
    Nr = grid.Nr
    A = np.zeros((Nr + 1, Nr + 1))
    A[:Nr, :Nr] = ops.L0
    A[1:Nr - 1, Nr] = 1.0
    A[0, :Nr] = grid.D[0]
    A[Nr - 1, :Nr] = grid.D[-1]
    A[Nr, :Nr] = grid.w_r * grid.r_nodes
    b = np.zeros(Nr + 1)
    b[:Nr] = src[:, 0].real
    b[0] = Fr_hat[0, 0].real
    b[Nr - 1] = Fr_hat[-1, 0].real
    sol = np.linalg.solve(A, b)
    P_hat[:, 0] = sol[:Nr]
    mu = sol[Nr]
    P = ScalarField(grid, grid.irfft(P_hat))
    P = P - integrate(P) / grid.area
    scale = np.sqrt(integrate(F.dot(F))) / max(grid.b - grid.a, 1e-300) + 1e-300
    defect = abs(mu) / scale
    if defect_tol is not None and defect > defect_tol:
        raise CompatibilityError(f"Neumann pressure data incompatible: relative defect {defect:.3e}")
    return (P, defect) if return_defect else P


# ---------------------------------------------------------------------------
# Stokes


def solve_stokes(force: VectorField, params: PhysicsParams, bc_set: str = "paper_mixed"):
    """Solve ``-nu Laplacian v + grad P = F``, ``div v = 0`` with the flow's wall conditions.

    Taking the curl gives ``-nu Laplacian omega = curl F`` which is closed by the
    same influence data as the time stepper with a pure Poisson operator.
    Returns ``(v, P)`` with ``P`` of zero mean.  With ``both_stress_free`` the
    potential vortex ``1/r`` is a steady solution of the homogeneous problem,
    so the mean mode is singular and :class:`SingularError` is raised.
    """
    grid = force.grid
    nu = params.nu
    curl = grid.rfft(vorticity(force).values)
    solver = VorticitySolver(grid, params, bc_set, shift=0.0, kappa=nu)
    rhs_u0 = grid.rfft(force.u_theta.values)[:, 0].real
    _, psi_hat, u0 = solver.solve(curl, rhs_u0)
    v = velocity_from_psi(grid, psi_hat, u0)
    zero = ScalarField(grid, np.zeros(grid.shape))
    # pressure from grad P = F + nu Laplacian v, i.e. the momentum balance with
    # rho = 0, no advection, no time derivative, and F supplied as -rho* u_t
    pot = _NullPotential(grid)
    unit = PhysicsParams(nu=nu, rho_star=1.0)
    P = recover_pressure(v, zero, unit, pot, u_t=force * (-1.0), advection=False)
    return v, P


class _NullPotential:
    def __init__(self, grid):
        self.gradf = VectorField.zeros(grid)
