"""
Annulus discretization and polar spectral operators.

The radial direction uses Chebyshev-Gauss-Lobatto collocation mapped onto
``[a, b]``; the azimuthal direction is a uniform Fourier grid.  Area
quadrature combines Clenshaw-Curtis weights in ``r`` (with the Jacobian
``r`` folded in) and the trapezoid rule in ``theta``.

Azimuthal coefficients use ``numpy.fft.rfft(..., norm="forward")`` so that a
real field is ``sum_m c_m exp(i m theta)`` over the full spectrum and the
stored half spectrum holds ``m = 0 .. Ntheta/2``.  The Nyquist mode is
excluded from every derivative (it has no well-defined real derivative on the
grid).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

from .errors import ArgError, DomainError, SizeError

__all__ = [
    "AnnulusGrid",
    "ScalarField",
    "VectorField",
    "make_grid",
    "cheb_nodes",
    "cheb_diff",
    "clenshaw_curtis",
    "integrate",
    "boundary_integral",
    "gradient",
    "divergence",
    "vorticity",
    "laplacian",
    "vector_laplacian",
    "norm",
    "grad_tensor",
    "hessian_sq",
    "to_cartesian",
    "save_field",
    "load_field",
]


# ---------------------------------------------------------------------------
# one-dimensional building blocks


def cheb_nodes(n: int) -> np.ndarray:
    """Chebyshev-Gauss-Lobatto points on [-1, 1], increasing."""
    if n == 1:
        return np.zeros(1)
    j = np.arange(n)
    # sin form gives exact symmetry about 0
    x = np.sin(np.pi * (2 * j - (n - 1)) / (2 * (n - 1)))
    return x


def cheb_diff(n: int) -> np.ndarray:
    """First-derivative collocation matrix on :func:`cheb_nodes` (increasing order).

    Off-diagonal entries follow the classical closed form; the diagonal uses
    the negative-sum trick so that constants are differentiated to zero
    exactly.
    """
    if n == 1:
        return np.zeros((1, 1))
    x = cheb_nodes(n)
    c = np.ones(n)
    c[0] = c[-1] = 2.0
    c *= (-1.0) ** np.arange(n)
    dx = x[:, None] - x[None, :]
    D = np.outer(c, 1.0 / c) / (dx + np.eye(n))
    D -= np.diag(D.sum(axis=1))
    return D


def clenshaw_curtis(n: int) -> np.ndarray:
    """Clenshaw-Curtis weights on the ``n`` Lobatto nodes of [-1, 1]."""
    N = n - 1
    if N == 0:
        return np.array([2.0])
    theta = np.pi * np.arange(n) / N
    w = np.zeros(n)
    interior = np.arange(1, N)
    v = np.ones(N - 1)
    if N % 2 == 0:
        w[0] = w[N] = 1.0 / (N**2 - 1)
        for k in range(1, N // 2):
            v -= 2.0 * np.cos(2 * k * theta[interior]) / (4 * k**2 - 1)
        v -= np.cos(N * theta[interior]) / (N**2 - 1)
    else:
        w[0] = w[N] = 1.0 / N**2
        for k in range(1, (N - 1) // 2 + 1):
            v -= 2.0 * np.cos(2 * k * theta[interior]) / (4 * k**2 - 1)
    w[interior] = 2.0 * v / N
    return w  # symmetric, so node ordering does not matter


# ---------------------------------------------------------------------------
# grid


@dataclass(frozen=True, eq=False)
class AnnulusGrid:
    """Tensor-product collocation grid on ``a <= r <= b``.

    Build with :func:`make_grid`; the fields below are filled there.
    """

    a: float
    b: float
    Nr: int
    Ntheta: int
    r_nodes: np.ndarray
    theta_nodes: np.ndarray
    D: np.ndarray
    D2: np.ndarray
    w_r: np.ndarray
    w_area: np.ndarray
    w_bnd_a: np.ndarray
    w_bnd_b: np.ndarray

    @property
    def r(self) -> np.ndarray:
        return self.r_nodes

    @property
    def theta(self) -> np.ndarray:
        return self.theta_nodes

    @property
    def shape(self) -> tuple[int, int]:
        return (self.Nr, self.Ntheta)

    @cached_property
    def R(self) -> np.ndarray:
        return np.broadcast_to(self.r_nodes[:, None], self.shape)

    @cached_property
    def TH(self) -> np.ndarray:
        return np.broadcast_to(self.theta_nodes[None, :], self.shape)

    @property
    def nmodes(self) -> int:
        return self.Ntheta // 2 + 1

    @cached_property
    def m(self) -> np.ndarray:
        """Azimuthal wavenumbers of the half spectrum."""
        return np.arange(self.nmodes)

    @cached_property
    def m_deriv(self) -> np.ndarray:
        """Wavenumbers used for differentiation (Nyquist zeroed)."""
        m = self.m.astype(float)
        m[-1] = 0.0
        return m

    @cached_property
    def m_dealias(self) -> int:
        """Largest wavenumber kept by the 2/3 rule."""
        return (self.Ntheta - 1) // 3

    @cached_property
    def dealias_mask(self) -> np.ndarray:
        return self.m <= self.m_dealias

    @cached_property
    def dr_min(self) -> float:
        return float(np.min(np.diff(self.r_nodes)))

    @cached_property
    def h_min(self) -> float:
        return min(self.dr_min, self.a * 2 * np.pi / self.Ntheta)

    @property
    def area(self) -> float:
        return np.pi * (self.b**2 - self.a**2)

    def zeros(self) -> "ScalarField":
        return ScalarField(self, np.zeros(self.shape))

    def field(self, fn) -> "ScalarField":
        """Evaluate ``fn(r, theta)`` on the grid."""
        vals = np.asarray(fn(self.R, self.TH), dtype=float)
        return ScalarField(self, np.broadcast_to(vals, self.shape).copy())

    def rfft(self, values: np.ndarray) -> np.ndarray:
        return np.fft.rfft(values, axis=-1, norm="forward")

    def irfft(self, coeffs: np.ndarray) -> np.ndarray:
        return np.fft.irfft(coeffs, n=self.Ntheta, axis=-1, norm="forward")

    def dtheta(self, values: np.ndarray, order: int = 1) -> np.ndarray:
        c = self.rfft(values)
        return self.irfft(c * (1j * self.m_deriv) ** order)

    def dr(self, values: np.ndarray) -> np.ndarray:
        return self.D @ values

    def drr(self, values: np.ndarray) -> np.ndarray:
        return self.D2 @ values

    def dealias(self, values: np.ndarray) -> np.ndarray:
        c = self.rfft(values)
        c[..., ~self.dealias_mask] = 0.0
        return self.irfft(c)

    def same_as(self, other: "AnnulusGrid") -> bool:
        return self is other or (
            self.a == other.a and self.b == other.b
            and self.Nr == other.Nr and self.Ntheta == other.Ntheta
        )


def make_grid(a: float, b: float, Nr: int, Ntheta: int) -> AnnulusGrid:
    """Construct the collocation grid for the annulus ``a < r < b``.

    Parameters
    ----------
    a, b : float
        Inner and outer radius, ``0 < a < b``.
    Nr : int
        Number of radial Chebyshev-Lobatto nodes (``>= 3``).
    Ntheta : int
        Number of uniform azimuthal nodes (even, ``>= 4``).
    """
    a = float(a)
    b = float(b)
    if not (a > 0.0):
        raise DomainError(f"inner radius must be positive, got a={a}")
    if not (b > a):
        raise DomainError(f"outer radius must exceed inner radius, got a={a}, b={b}")
    if int(Ntheta) != Ntheta or Ntheta % 2:
        raise SizeError(f"Ntheta must be an even integer, got {Ntheta}")
    if Ntheta < 4:
        raise SizeError(f"Ntheta must be >= 4, got {Ntheta}")
    if int(Nr) != Nr or Nr < 3:
        raise SizeError(f"Nr must be an integer >= 3, got {Nr}")
    Nr, Ntheta = int(Nr), int(Ntheta)

    x = cheb_nodes(Nr)
    half = 0.5 * (b - a)
    r = a + half * (x + 1.0)
    r[0], r[-1] = a, b
    D = cheb_diff(Nr) / half
    D2 = D @ D
    w_r = clenshaw_curtis(Nr) * half
    theta = 2.0 * np.pi * np.arange(Ntheta) / Ntheta
    dth = 2.0 * np.pi / Ntheta
    w_area = (w_r * r)[:, None] * np.full(Ntheta, dth)[None, :]
    return AnnulusGrid(
        a=a, b=b, Nr=Nr, Ntheta=Ntheta,
        r_nodes=r, theta_nodes=theta, D=D, D2=D2, w_r=w_r, w_area=w_area,
        w_bnd_a=np.full(Ntheta, a * dth), w_bnd_b=np.full(Ntheta, b * dth),
    )


# ---------------------------------------------------------------------------
# fields


@dataclass(frozen=True, eq=False)
class ScalarField:
    """Collocation samples of a real scalar on an :class:`AnnulusGrid`."""

    grid: AnnulusGrid
    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.shape != self.grid.shape:
            raise SizeError(f"field shape {vals.shape} does not match grid {self.grid.shape}")
        object.__setattr__(self, "values", vals)

    @classmethod
    def from_coeffs(cls, grid: AnnulusGrid, coeffs: np.ndarray) -> "ScalarField":
        return cls(grid, grid.irfft(np.asarray(coeffs)))

    @property
    def coeffs(self) -> np.ndarray:
        return self.grid.rfft(self.values)

    def _other(self, other):
        if isinstance(other, ScalarField):
            return other.values
        return other

    def __add__(self, other):
        return ScalarField(self.grid, self.values + self._other(other))

    __radd__ = __add__

    def __sub__(self, other):
        return ScalarField(self.grid, self.values - self._other(other))

    def __rsub__(self, other):
        return ScalarField(self.grid, self._other(other) - self.values)

    def __mul__(self, other):
        return ScalarField(self.grid, self.values * self._other(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return ScalarField(self.grid, self.values / self._other(other))

    def __neg__(self):
        return ScalarField(self.grid, -self.values)

    def at_a(self) -> np.ndarray:
        return self.values[0]

    def at_b(self) -> np.ndarray:
        return self.values[-1]


@dataclass(frozen=True, eq=False)
class VectorField:
    """Polar components ``(u_r, u_theta)`` of a planar vector field."""

    grid: AnnulusGrid
    u_r: ScalarField
    u_theta: ScalarField
    wall_compatible: bool = False

    def __post_init__(self):
        if self.wall_compatible:
            worst = max(np.max(np.abs(self.u_r.at_a())), np.max(np.abs(self.u_r.at_b())))
            if worst > 1e-10:
                raise ArgError(f"field marked wall-compatible has |u_r| = {worst:.3e} on a wall")

    @classmethod
    def from_arrays(cls, grid, ur, ut, wall_compatible=False) -> "VectorField":
        return cls(grid, ScalarField(grid, ur), ScalarField(grid, ut), wall_compatible)

    @classmethod
    def zeros(cls, grid) -> "VectorField":
        return cls.from_arrays(grid, np.zeros(grid.shape), np.zeros(grid.shape), True)

    def __add__(self, other: "VectorField") -> "VectorField":
        return VectorField(self.grid, self.u_r + other.u_r, self.u_theta + other.u_theta)

    def __sub__(self, other: "VectorField") -> "VectorField":
        return VectorField(self.grid, self.u_r - other.u_r, self.u_theta - other.u_theta)

    def __mul__(self, c) -> "VectorField":
        if isinstance(c, ScalarField):
            c = c.values
        return VectorField(self.grid, self.u_r * c, self.u_theta * c)

    __rmul__ = __mul__

    def dot(self, other: "VectorField") -> ScalarField:
        return self.u_r * other.u_r + self.u_theta * other.u_theta

    def magnitude(self) -> ScalarField:
        return ScalarField(self.grid, np.hypot(self.u_r.values, self.u_theta.values))


# ---------------------------------------------------------------------------
# operators


def integrate(field: ScalarField | np.ndarray, grid: AnnulusGrid | None = None) -> float:
    """Area integral by the tensor Clenshaw-Curtis x trapezoid rule."""
    if isinstance(field, ScalarField):
        grid, vals = field.grid, field.values
    else:
        vals = np.asarray(field)
    if vals.shape != grid.shape:
        raise SizeError(f"field shape {vals.shape} does not match grid {grid.shape}")
    return float(np.sum(grid.w_area * vals))


def boundary_integral(values_on_wall: np.ndarray, grid: AnnulusGrid, wall: str) -> float:
    w = grid.w_bnd_a if wall == "a" else grid.w_bnd_b
    return float(np.sum(w * values_on_wall))


def gradient(s: ScalarField) -> VectorField:
    """``(d_r s, (1/r) d_theta s)``."""
    g = s.grid
    return VectorField.from_arrays(g, g.dr(s.values), g.dtheta(s.values) / g.R)


def divergence(v: VectorField) -> ScalarField:
    g = v.grid
    ur, ut = v.u_r.values, v.u_theta.values
    return ScalarField(g, g.dr(ur) + ur / g.R + g.dtheta(ut) / g.R)


def vorticity(v: VectorField) -> ScalarField:
    """``(1/r) [d_r(r u_theta) - d_theta u_r]``."""
    g = v.grid
    ur, ut = v.u_r.values, v.u_theta.values
    return ScalarField(g, g.dr(ut) + ut / g.R - g.dtheta(ur) / g.R)


def laplacian(s: ScalarField) -> ScalarField:
    g = s.grid
    v = s.values
    return ScalarField(g, g.drr(v) + g.dr(v) / g.R + g.dtheta(v, 2) / g.R**2)


def vector_laplacian(v: VectorField) -> VectorField:
    """Componentwise Cartesian Laplacian expressed in polar components."""
    g = v.grid
    ur, ut = v.u_r.values, v.u_theta.values
    lap = lambda f: g.drr(f) + g.dr(f) / g.R + g.dtheta(f, 2) / g.R**2
    R2 = g.R**2
    return VectorField.from_arrays(
        g,
        lap(ur) - ur / R2 - 2.0 * g.dtheta(ut) / R2,
        lap(ut) - ut / R2 + 2.0 * g.dtheta(ur) / R2,
    )


def grad_tensor(v: VectorField) -> tuple[np.ndarray, ...]:
    """Polar components ``(G_rr, G_rt, G_tr, G_tt)`` of the velocity gradient.

    Their squares sum to the Cartesian Frobenius norm ``|grad v|^2``.
    """
    g = v.grid
    ur, ut = v.u_r.values, v.u_theta.values
    return (
        g.dr(ur),
        g.dtheta(ur) / g.R - ut / g.R,
        g.dr(ut),
        g.dtheta(ut) / g.R + ur / g.R,
    )


def hessian_sq(s: np.ndarray, grid: AnnulusGrid) -> np.ndarray:
    """Pointwise squared Frobenius norm of the Cartesian Hessian of ``s``."""
    R = grid.R
    sr = grid.dr(s)
    srr = grid.drr(s)
    st = grid.dtheta(s)
    stt = grid.dtheta(s, 2)
    srt = grid.dtheta(sr)
    return srr**2 + 2.0 * (srt / R - st / R**2) ** 2 + (stt / R**2 + sr / R) ** 2


def to_cartesian(v: VectorField) -> tuple[np.ndarray, np.ndarray]:
    c, s = np.cos(v.grid.TH), np.sin(v.grid.TH)
    ur, ut = v.u_r.values, v.u_theta.values
    return ur * c - ut * s, ur * s + ut * c


def norm(x: ScalarField | VectorField, kind: str = "L2", q: float = 2.0) -> float:
    """Quadrature norms.

    ``kind`` is one of ``"Lq"`` (with exponent ``q``), ``"L2"``, ``"Linf"``,
    ``"H1"``, ``"H2"``, ``"boundary_a"``, ``"boundary_b"``.  For vector
    fields the pointwise magnitude is used, gradients are full Cartesian
    gradients, and the boundary norms measure the tangential component.
    Non-even ``q`` are quadrature-limited rather than spectrally accurate.
    """
    grid = x.grid
    vec = isinstance(x, VectorField)
    if kind == "L2":
        kind, q = "Lq", 2.0
    if kind == "Lq":
        if q < 1:
            raise ArgError(f"Lq norm needs q >= 1, got {q}")
        mag = x.magnitude().values if vec else np.abs(x.values)
        return integrate(mag**q, grid) ** (1.0 / q)
    if kind == "Linf":
        mag = x.magnitude().values if vec else np.abs(x.values)
        return float(np.max(mag))
    if kind in ("boundary_a", "boundary_b"):
        wall = kind[-1]
        vals = x.u_theta.values if vec else x.values
        row = vals[0] if wall == "a" else vals[-1]
        return boundary_integral(row**2, grid, wall) ** 0.5
    if kind == "H1":
        return (norm(x, "L2") ** 2 + _grad_sq(x)) ** 0.5
    if kind == "H2":
        if vec:
            comps = to_cartesian(x)
        else:
            comps = (x.values,)
        hess = sum(integrate(hessian_sq(c, grid), grid) for c in comps)
        return (norm(x, "H1") ** 2 + hess) ** 0.5
    raise ArgError(f"unknown norm kind {kind!r}")


def _grad_sq(x) -> float:
    if isinstance(x, VectorField):
        return integrate(sum(G**2 for G in grad_tensor(x)), x.grid)
    gv = gradient(x)
    return integrate(gv.u_r.values**2 + gv.u_theta.values**2, x.grid)


# ---------------------------------------------------------------------------
# snapshot files

_MAGIC = b"ANNF"
_VERSION = 1
_HEADER = struct.Struct("<4sIIIdd")  # 32 bytes


def save_field(path, field: ScalarField, meta: dict | None = None) -> Path:
    """Write a field snapshot plus a JSON sidecar (``<path>.json``).

    Binary layout (little endian): magic ``ANNF``, version u32, Nr u32,
    Ntheta u32, a f64, b f64, then Nr*Ntheta f64 values, row-major in r.
    """
    path = Path(path)
    g = field.grid
    header = _HEADER.pack(_MAGIC, _VERSION, g.Nr, g.Ntheta, g.a, g.b)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(field.values, dtype="<f8").tobytes())
    side = {"Nr": g.Nr, "Ntheta": g.Ntheta, "a": g.a, "b": g.b, "version": _VERSION}
    side.update(meta or {})
    Path(str(path) + ".json").write_text(json.dumps(side, indent=2, sort_keys=True) + "\n")
    return path


def load_field(path, grid: AnnulusGrid | None = None) -> tuple[ScalarField, dict]:
    path = Path(path)
    raw = path.read_bytes()
    magic, version, Nr, Ntheta, a, b = _HEADER.unpack_from(raw, 0)
    if magic != _MAGIC:
        raise ArgError(f"{path}: not a field snapshot (magic {magic!r})")
    if version != _VERSION:
        raise ArgError(f"{path}: unsupported snapshot version {version}")
    vals = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size)
    if vals.size != Nr * Ntheta:
        raise SizeError(f"{path}: expected {Nr * Ntheta} values, found {vals.size}")
    if grid is None:
        grid = make_grid(a, b, Nr, Ntheta)
    elif (grid.Nr, grid.Ntheta, grid.a, grid.b) != (Nr, Ntheta, a, b):
        raise SizeError(f"{path}: snapshot grid does not match the supplied grid")
    side = Path(str(path) + ".json")
    meta = json.loads(side.read_text()) if side.exists() else {}
    return ScalarField(grid, vals.reshape(Nr, Ntheta).astype(float)), meta
