"""Collocation discretisation and Newton solvers for periodic-orbit BVPs.

Two BVP flavours share one Gauss-Legendre collocation core:

* ``PeriodicBVP`` -- the full periodic problem u' = T*(f(u) + eps*grad H(u))
  on [0,1] with periodic boundary conditions, a phase condition and an
  unfolding parameter eps that is always an unknown and self-selects ~0 at
  solutions.

* ``SymmetricBVP`` -- reduced problems for reversible orbits posed on a
  quarter or half of the period with boundary conditions on the
  reversibility sections Sigma1 = {u2=u4=0} and Sigma2 = {u1=u3=0}.  These
  need neither unfolding nor a phase condition and stay regular at
  symmetry-breaking points of the full problem.

Solutions are stored as values at the representation points of each mesh
interval (ncol+1 points per interval, endpoints shared), i.e. a continuous
piecewise polynomial of degree ncol.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace as dc_replace
from enum import Enum
from functools import lru_cache

import numpy as np
import scipy.sparse as sp
from scipy.integrate import solve_ivp
from scipy.optimize import minimize_scalar
from scipy.sparse.linalg import splu

from . import model
from .model import Params

__all__ = [
    "Mesh",
    "OrbitSolution",
    "Symmetry",
    "PeriodicBVP",
    "SymmetricBVP",
    "BvpResidual",
    "FixPeriod",
    "FixEnergy",
    "FixBeta2",
    "ArclengthFree",
    "build_residual",
    "newton_solve",
    "evaluate",
    "eval_piecewise",
    "remesh",
    "seed_lyapunov_orbit",
    "seed_rstar_orbit",
    "find_rstar_guess",
    "NoConvergence",
    "SingularJacobian",
    "InconsistentConstraint",
    "NoImaginaryPair",
    "SegmentLeavesBox",
    "uniform_mesh",
    "classify_orbit_symmetry",
    "reverse_image",
]

ESCAPE_BOX = 50.0  # shooting aborts when any |u_i| exceeds this


class NoConvergence(RuntimeError):
    def __init__(self, iterations: int, final_norm: float, msg: str = ""):
        super().__init__(f"Newton did not converge in {iterations} iterations (residual {final_norm:.3e}) {msg}")
        self.iterations = iterations
        self.final_norm = final_norm


class SingularJacobian(RuntimeError):
    """The BVP linearisation is singular -- usually a bifurcation hit exactly."""


class InconsistentConstraint(ValueError):
    """The pinning choice over- or under-determines the system."""


class NoImaginaryPair(RuntimeError):
    """Equilibrium spectrum has no simple purely imaginary pair."""


class SegmentLeavesBox(RuntimeError):
    """A shooting segment left the configured phase-space box."""


# ---------------------------------------------------------------------------
# Lagrange basis tables
# ---------------------------------------------------------------------------

@lru_cache(maxsize=None)
def _basis(ncol: int):
    """Collocation tables for degree-ncol pieces on the unit interval.

    Representation nodes are i/ncol, collocation nodes the Gauss-Legendre
    points.  Returns (nodes, gauss, weights, L, D, poly, dpoly) where
    L[i,l] and D[i,l] are the i-th basis polynomial and its derivative at
    gauss[l], and poly/dpoly are monomial coefficient rows for np.polyval.
    """
    m = ncol
    nodes = np.arange(m + 1) / m
    x, w = np.polynomial.legendre.leggauss(m)
    gauss = 0.5 * (x + 1.0)
    weights = 0.5 * w
    poly = np.zeros((m + 1, m + 1))
    dpoly = np.zeros((m + 1, m))
    for i in range(m + 1):
        roots = np.delete(nodes, i)
        c = np.poly(roots)
        c = c / np.polyval(c, nodes[i])
        poly[i] = c
        dpoly[i] = np.polyder(c)
    L = np.empty((m + 1, m))
    D = np.empty((m + 1, m))
    for i in range(m + 1):
        L[i] = np.polyval(poly[i], gauss)
        D[i] = np.polyval(dpoly[i], gauss)
    return nodes, gauss, weights, L, D, poly, dpoly


@dataclass(frozen=True)
class Mesh:
    """Collocation mesh on [0,1]: ntst intervals, ncol Gauss points each."""

    ntst: int
    ncol: int
    breakpoints: np.ndarray

    def __post_init__(self):
        if self.ntst < 10:
            raise ValueError("ntst must be >= 10")
        if not 2 <= self.ncol <= 7:
            raise ValueError("ncol must be in 2..7")
        bp = np.asarray(self.breakpoints, dtype=float)
        if bp.shape != (self.ntst + 1,) or bp[0] != 0.0 or bp[-1] != 1.0 or np.any(np.diff(bp) <= 0):
            raise ValueError("breakpoints must be strictly increasing from 0 to 1")
        object.__setattr__(self, "breakpoints", bp)

    @property
    def h(self) -> np.ndarray:
        return np.diff(self.breakpoints)

    @property
    def n_points(self) -> int:
        return self.ntst * self.ncol + 1

    def collocation_times(self) -> np.ndarray:
        """All Gauss collocation abscissae, shape (ntst, ncol)."""
        _, gauss, _, _, _, _, _ = _basis(self.ncol)
        return self.breakpoints[:-1, None] + self.h[:, None] * gauss[None, :]

    def representation_times(self) -> np.ndarray:
        nodes, *_ = _basis(self.ncol)
        t = self.breakpoints[:-1, None] + self.h[:, None] * nodes[None, :]
        return np.append(t[:, :-1].ravel(), 1.0 * self.breakpoints[-1])


def uniform_mesh(ntst: int, ncol: int = 4) -> Mesh:
    return Mesh(ntst, ncol, np.linspace(0.0, 1.0, ntst + 1))


class Symmetry(Enum):
    RSTAR = "Rstar"
    R1_ONLY = "R1only"
    R2_ONLY = "R2only"
    NON_SYMMETRIC = "NonSymmetric"
    UNCLASSIFIED = "Unclassified"


@dataclass(frozen=True)
class OrbitSolution:
    """A converged periodic orbit stored as a collocation polynomial."""

    mesh: Mesh
    coeffs: np.ndarray       # (ntst*ncol+1, 4) values at representation points
    period: float
    eps: float
    params: Params
    energy: float
    symmetry: Symmetry = Symmetry.UNCLASSIFIED
    flags: tuple = ()

    @property
    def u0(self) -> np.ndarray:
        return self.coeffs[0]

    def evaluate(self, t, derivative: bool = False):
        return evaluate(self, t, derivative=derivative)

    def local_blocks(self) -> np.ndarray:
        """View of coefficients grouped per interval, shape (ntst, ncol+1, 4)."""
        m = self.mesh.ncol
        idx = np.arange(self.mesh.ntst)[:, None] * m + np.arange(m + 1)[None, :]
        return self.coeffs[idx]

    def with_symmetry(self, symmetry: Symmetry) -> "OrbitSolution":
        return dc_replace(self, symmetry=symmetry)


def _interval_index(mesh: Mesh, t: np.ndarray) -> np.ndarray:
    j = np.searchsorted(mesh.breakpoints, t, side="right") - 1
    return np.clip(j, 0, mesh.ntst - 1)


def eval_piecewise(mesh: Mesh, coeffs: np.ndarray, t, derivative: bool = False):
    """Evaluate the piecewise collocation polynomial at phases t in [0,1]."""
    t_arr = np.atleast_1d(np.asarray(t, dtype=float))
    tw = np.where(t_arr == 1.0, 1.0, np.mod(t_arr, 1.0))
    m = mesh.ncol
    *_, poly, dpoly = _basis(m)
    j = _interval_index(mesh, tw)
    h = mesh.h[j]
    sig = (tw - mesh.breakpoints[j]) / h
    P = _local_blocks_of(mesh, coeffs)[j]   # (n, m+1, 4)
    vals = np.stack([np.polyval(poly[i], sig) for i in range(m + 1)], axis=-1)  # (n, m+1)
    u = np.einsum("ni,nid->nd", vals, P)
    scalar = np.isscalar(t) or np.asarray(t).ndim == 0
    if scalar:
        u = u[0]
    if not derivative:
        return u
    dvals = np.stack([np.polyval(dpoly[i], sig) for i in range(m + 1)], axis=-1)
    du = np.einsum("ni,nid->nd", dvals, P) / h[:, None]
    if scalar:
        du = du[0]
    return u, du


def evaluate(orbit: OrbitSolution, t, derivative: bool = False):
    """Evaluate the orbit polynomial at phases t (periodically wrapped to [0,1]).

    With ``derivative=True`` returns (u, du/ds) where s is the unit-interval
    phase; the physical time derivative is du/ds / period.
    """
    return eval_piecewise(orbit.mesh, orbit.coeffs, t, derivative=derivative)


# ---------------------------------------------------------------------------
# Shared collocation assembly
# ---------------------------------------------------------------------------

def _colloc_blocks(mesh: Mesh, coeffs: np.ndarray, T_eff: float, eps, beta2_free: bool, p: Params):
    """Residual and Jacobian triplets of the collocation equations.

    T_eff is the time-rescaling factor of the posed problem (full period, or
    a quarter/half of it).  eps=None omits the unfolding term entirely.
    Returns (residual (ntst*ncol*4,), rows, cols, vals, extra_cols dict).
    """
    m = mesh.ncol
    N = mesh.ntst
    _, _, _, L, D, _, _ = _basis(m)
    h = mesh.h
    idx = np.arange(N)[:, None] * m + np.arange(m + 1)[None, :]
    P = coeffs[idx]                                  # (N, m+1, 4)
    V = np.einsum("il,jid->jld", L, P)               # (N, m, 4)
    DV = np.einsum("il,jid->jld", D, P)
    F = model.vector_field(V, p)
    DF = model.jacobian(V, p)
    if eps is not None:
        G = model.grad_H(V, p)
        F = F + eps * G
        DF = DF + eps * model.hessian_H(V, p)
    res = DV - (h[:, None, None] * T_eff) * F
    # coefficient block: val[j,l,i,ro,ci]
    hT = h * T_eff
    val = (np.einsum("il,rc->lirc", D, np.eye(4))[None, :, :, :, :]
           - hT[:, None, None, None, None]
           * np.einsum("il,jlrc->jlirc", L, DF))
    jj, ll, ii = np.meshgrid(np.arange(N), np.arange(m), np.arange(m + 1), indexing="ij")
    ro = np.arange(4)
    rows = ((jj * m + ll) * 4)[..., None, None] + ro[None, None, None, :, None]
    rows = np.broadcast_to(rows, val.shape)
    cols = ((jj * m + ii) * 4)[..., None, None] + ro[None, None, None, None, :]
    cols = np.broadcast_to(cols, val.shape)
    extra = {}
    extra["T"] = (-(h[:, None, None]) * F).reshape(N * m, 4)
    if eps is not None:
        extra["eps"] = (-(h[:, None, None] * T_eff) * model.grad_H(V, p)).reshape(N * m, 4)
    if beta2_free:
        dF = model.dfield_dbeta2(V, p)
        if eps is not None:
            dF = dF + eps * model.dgradH_dbeta2(V, p)
        extra["beta2"] = (-(h[:, None, None] * T_eff) * dF).reshape(N * m, 4)
    extra["V"] = V
    return res.ravel(), rows.ravel(), cols.ravel(), val.ravel(), extra


def _rms(r: np.ndarray) -> float:
    return float(np.sqrt(np.mean(r * r)))


# ---------------------------------------------------------------------------
# Constraints (spec surface)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FixPeriod:
    value: float | None = None


@dataclass(frozen=True)
class FixEnergy:
    h_target: float


@dataclass(frozen=True)
class FixBeta2:
    """Hold beta2 as a parameter with no scalar pin: the 1-parameter
    energy-family system, closed externally by an arclength condition."""


@dataclass(frozen=True)
class ArclengthFree:
    """beta2 joins the unknowns, H(u(0)) is pinned: the 1-parameter
    beta2-family system, closed externally by an arclength condition."""

    h_pin: float


@dataclass(frozen=True)
class _LinearPin:
    """Internal amplitude pin <w, u(0) - base> = value."""

    w: np.ndarray
    base: np.ndarray
    value: float


class PeriodicBVP:
    """Full periodic BVP with unfolding.

    Unknown vector x = [coeffs.ravel(), T, eps] (+ [beta2] when free).
    Equation rows: collocation, periodicity (4), phase (1), then pins.
    """

    def __init__(self, mesh: Mesh, params: Params, *, free_beta2: bool = False,
                 phase: str = "integral", reference: OrbitSolution | None = None,
                 pins: tuple = ()):
        self.mesh = mesh
        self.params = params
        self.free_beta2 = free_beta2
        self.phase = phase
        self.pins = tuple(pins)
        self.n_pts = mesh.n_points
        self.n_coeff = 4 * self.n_pts
        self.n_unknowns = self.n_coeff + 2 + (1 if free_beta2 else 0)
        self._iT = self.n_coeff
        self._ieps = self.n_coeff + 1
        self._ib2 = self.n_coeff + 2 if free_beta2 else None
        if phase == "integral":
            if reference is None:
                raise ValueError("integral phase condition needs a reference orbit")
            self._set_reference(reference)
        elif phase not in ("anchor", "none"):
            raise ValueError(f"unknown phase condition {phase!r}")

    def _set_reference(self, reference: OrbitSolution):
        tcol = self.mesh.collocation_times()
        _, du = evaluate(reference, tcol.ravel(), derivative=True)
        self._ref_du = du.reshape(self.mesh.ntst, self.mesh.ncol, 4)

    @property
    def n_equations(self) -> int:
        n = 4 * self.mesh.ntst * self.mesh.ncol + 4
        if self.phase != "none":
            n += 1
        return n + len(self.pins)

    # -- packing ------------------------------------------------------------
    def pack(self, coeffs: np.ndarray, T: float, eps: float, beta2: float | None = None) -> np.ndarray:
        parts = [np.asarray(coeffs, float).ravel(), [T, eps]]
        if self.free_beta2:
            parts.append([self.params.beta2 if beta2 is None else beta2])
        return np.concatenate([np.asarray(q, float).ravel() for q in parts])

    def unpack(self, x: np.ndarray):
        coeffs = x[: self.n_coeff].reshape(self.n_pts, 4)
        T = float(x[self._iT])
        eps = float(x[self._ieps])
        beta2 = float(x[self._ib2]) if self.free_beta2 else self.params.beta2
        return coeffs, T, eps, beta2

    def params_at(self, x: np.ndarray) -> Params:
        if not self.free_beta2:
            return self.params
        return self.params.replace(beta2=float(x[self._ib2]))

    def from_orbit(self, orbit: OrbitSolution) -> np.ndarray:
        return self.pack(orbit.coeffs, orbit.period, orbit.eps, orbit.params.beta2)

    def to_orbit(self, x: np.ndarray, symmetry: Symmetry = Symmetry.UNCLASSIFIED,
                 flags: tuple = ()) -> OrbitSolution:
        coeffs, T, eps, beta2 = self.unpack(x)
        p = self.params.replace(beta2=beta2)
        return OrbitSolution(mesh=self.mesh, coeffs=coeffs.copy(), period=T, eps=eps,
                             params=p, energy=float(model.hamiltonian(coeffs[0], p)),
                             symmetry=symmetry, flags=flags)

    # -- residual / jacobian --------------------------------------------------
    def residual(self, x: np.ndarray) -> np.ndarray:
        coeffs, T, eps, beta2 = self.unpack(x)
        p = self.params.replace(beta2=beta2)
        res_c, *_ , extra = _colloc_blocks(self.mesh, coeffs, T, eps, self.free_beta2, p)
        out = [res_c, coeffs[-1] - coeffs[0]]
        if self.phase == "integral":
            _, _, w, L, _, _, _ = _basis(self.mesh.ncol)
            V = extra["V"]
            integrand = np.einsum("jld,jld->jl", V, self._ref_du)
            out.append([float(np.sum(self.mesh.h[:, None] * w[None, :] * integrand))])
        elif self.phase == "anchor":
            out.append([coeffs[0, 1]])
        for pin in self.pins:
            out.append([self._pin_residual(pin, coeffs, T, eps, p)])
        return np.concatenate([np.asarray(q, float).ravel() for q in out])

    def _pin_residual(self, pin, coeffs, T, eps, p) -> float:
        if isinstance(pin, FixPeriod):
            return T - (pin.value if pin.value is not None else T)
        if isinstance(pin, FixEnergy):
            return float(model.hamiltonian(coeffs[0], p)) - pin.h_target
        if isinstance(pin, _LinearPin):
            return float(pin.w @ (coeffs[0] - pin.base)) - pin.value
        raise InconsistentConstraint(f"unsupported pin {pin!r}")

    def jacobian(self, x: np.ndarray) -> sp.csc_matrix:
        coeffs, T, eps, beta2 = self.unpack(x)
        p = self.params.replace(beta2=beta2)
        res_c, rows, cols, vals, extra = _colloc_blocks(self.mesh, coeffs, T, eps, self.free_beta2, p)
        N, m = self.mesh.ntst, self.mesh.ncol
        n_coll = 4 * N * m
        R, C, Vv = [rows], [cols], [vals]
        coll_rows = np.arange(n_coll)
        R.append(coll_rows); C.append(np.full(n_coll, self._iT)); Vv.append(extra["T"].ravel())
        R.append(coll_rows); C.append(np.full(n_coll, self._ieps)); Vv.append(extra["eps"].ravel())
        if self.free_beta2:
            R.append(coll_rows); C.append(np.full(n_coll, self._ib2)); Vv.append(extra["beta2"].ravel())
        r = n_coll
        # periodicity
        comp = np.arange(4)
        R.append(r + comp); C.append((self.n_pts - 1) * 4 + comp); Vv.append(np.ones(4))
        R.append(r + comp); C.append(comp); Vv.append(-np.ones(4))
        r += 4
        if self.phase == "integral":
            _, _, w, L, _, _, _ = _basis(m)
            # d/dcoeff of sum_j h_j sum_l w_l <V_jl, du_ref_jl>
            contrib = np.einsum("l,il,jld->jid", w, L, self._ref_du) * self.mesh.h[:, None, None]
            cidx = (np.arange(N)[:, None, None] * m + np.arange(m + 1)[None, :, None]) * 4 \
                + np.arange(4)[None, None, :]
            R.append(np.full(cidx.size, r)); C.append(cidx.ravel()); Vv.append(contrib.ravel())
            r += 1
        elif self.phase == "anchor":
            R.append([r]); C.append([1]); Vv.append([1.0])
            r += 1
        for pin in self.pins:
            rr, cc, vv = self._pin_jacobian(pin, coeffs, T, eps, p, r)
            R.append(rr); C.append(cc); Vv.append(vv)
            r += 1
        rows_a = np.concatenate([np.asarray(q, dtype=int).ravel() for q in R])
        cols_a = np.concatenate([np.asarray(q, dtype=int).ravel() for q in C])
        vals_a = np.concatenate([np.asarray(q, dtype=float).ravel() for q in Vv])
        return sp.csc_matrix((vals_a, (rows_a, cols_a)), shape=(r, self.n_unknowns))

    def _pin_jacobian(self, pin, coeffs, T, eps, p, r):
        if isinstance(pin, FixPeriod):
            return [r], [self._iT], [1.0]
        if isinstance(pin, FixEnergy):
            g = model.grad_H(coeffs[0], p)
            rr = [r] * 4
            cc = list(range(4))
            vv = list(g)
            if self.free_beta2:
                rr.append(r); cc.append(self._ib2)
                vv.append(float(model.dH_dbeta2(coeffs[0], p)))
            return rr, cc, vv
        if isinstance(pin, _LinearPin):
            return [r] * 4, list(range(4)), list(np.asarray(pin.w, float))
        raise InconsistentConstraint(f"unsupported pin {pin!r}")


_SECTION_COMPS = {"sigma1": (1, 3), "sigma2": (0, 2)}


class SymmetricBVP:
    """Reduced BVP on a quarter or half period for reversible orbits.

    flavor: 'quarter'  Sigma1 -> Sigma2, duration T/4 (R*-symmetric orbits)
            'half1'    Sigma1 -> Sigma1, duration T/2 (R1-symmetric orbits)
            'half2'    Sigma2 -> Sigma2, duration T/2 (R2-symmetric orbits)
    Unknowns x = [coeffs.ravel(), T] (+ [beta2] when free); T is the full
    orbit period.  No unfolding or phase condition is needed.
    """

    FRACTIONS = {"quarter": 0.25, "half1": 0.5, "half2": 0.5}

    def __init__(self, mesh: Mesh, params: Params, flavor: str, *,
                 free_beta2: bool = False, pins: tuple = ()):
        if flavor not in self.FRACTIONS:
            raise ValueError(f"unknown flavor {flavor!r}")
        self.mesh = mesh
        self.params = params
        self.flavor = flavor
        self.frac = self.FRACTIONS[flavor]
        self.free_beta2 = free_beta2
        self.pins = tuple(pins)
        self.n_pts = mesh.n_points
        self.n_coeff = 4 * self.n_pts
        self.n_unknowns = self.n_coeff + 1 + (1 if free_beta2 else 0)
        self._iT = self.n_coeff
        self._ib2 = self.n_coeff + 1 if free_beta2 else None
        if flavor == "quarter":
            self.bc_start, self.bc_end = _SECTION_COMPS["sigma1"], _SECTION_COMPS["sigma2"]
        elif flavor == "half1":
            self.bc_start = self.bc_end = _SECTION_COMPS["sigma1"]
        else:
            self.bc_start = self.bc_end = _SECTION_COMPS["sigma2"]

    @property
    def n_equations(self) -> int:
        return 4 * self.mesh.ntst * self.mesh.ncol + 4 + len(self.pins)

    def pack(self, coeffs, T, beta2=None) -> np.ndarray:
        parts = [np.asarray(coeffs, float).ravel(), [T]]
        if self.free_beta2:
            parts.append([self.params.beta2 if beta2 is None else beta2])
        return np.concatenate([np.asarray(q, float).ravel() for q in parts])

    def unpack(self, x):
        coeffs = x[: self.n_coeff].reshape(self.n_pts, 4)
        T = float(x[self._iT])
        beta2 = float(x[self._ib2]) if self.free_beta2 else self.params.beta2
        return coeffs, T, beta2

    def params_at(self, x) -> Params:
        if not self.free_beta2:
            return self.params
        return self.params.replace(beta2=float(x[self._ib2]))

    def residual(self, x: np.ndarray) -> np.ndarray:
        coeffs, T, beta2 = self.unpack(x)
        p = self.params.replace(beta2=beta2)
        res_c, *_ , _extra = _colloc_blocks(self.mesh, coeffs, T * self.frac, None, self.free_beta2, p)
        out = [res_c,
               [coeffs[0, self.bc_start[0]], coeffs[0, self.bc_start[1]],
                coeffs[-1, self.bc_end[0]], coeffs[-1, self.bc_end[1]]]]
        for pin in self.pins:
            if isinstance(pin, FixPeriod):
                out.append([T - (pin.value if pin.value is not None else T)])
            elif isinstance(pin, FixEnergy):
                out.append([float(model.hamiltonian(coeffs[0], p)) - pin.h_target])
            elif isinstance(pin, _LinearPin):
                out.append([float(pin.w @ (coeffs[0] - pin.base)) - pin.value])
            else:
                raise InconsistentConstraint(f"unsupported pin {pin!r}")
        return np.concatenate([np.asarray(q, float).ravel() for q in out])

    def jacobian(self, x: np.ndarray) -> sp.csc_matrix:
        coeffs, T, beta2 = self.unpack(x)
        p = self.params.replace(beta2=beta2)
        _, rows, cols, vals, extra = _colloc_blocks(self.mesh, coeffs, T * self.frac, None, self.free_beta2, p)
        N, m = self.mesh.ntst, self.mesh.ncol
        n_coll = 4 * N * m
        R, C, Vv = [rows], [cols], [vals]
        coll_rows = np.arange(n_coll)
        R.append(coll_rows); C.append(np.full(n_coll, self._iT)); Vv.append(self.frac * extra["T"].ravel())
        if self.free_beta2:
            R.append(coll_rows); C.append(np.full(n_coll, self._ib2)); Vv.append(extra["beta2"].ravel())
        r = n_coll
        for comp in self.bc_start:
            R.append([r]); C.append([comp]); Vv.append([1.0]); r += 1
        for comp in self.bc_end:
            R.append([r]); C.append([(self.n_pts - 1) * 4 + comp]); Vv.append([1.0]); r += 1
        for pin in self.pins:
            if isinstance(pin, FixPeriod):
                R.append([r]); C.append([self._iT]); Vv.append([1.0])
            elif isinstance(pin, FixEnergy):
                g = model.grad_H(coeffs[0], p)
                rr, cc, vv = [r] * 4, list(range(4)), list(g)
                if self.free_beta2:
                    rr.append(r); cc.append(self._ib2); vv.append(float(model.dH_dbeta2(coeffs[0], p)))
                R.append(rr); C.append(cc); Vv.append(vv)
            elif isinstance(pin, _LinearPin):
                R.append([r] * 4); C.append(list(range(4))); Vv.append(list(np.asarray(pin.w, float)))
            r += 1
        rows_a = np.concatenate([np.asarray(q, dtype=int).ravel() for q in R])
        cols_a = np.concatenate([np.asarray(q, dtype=int).ravel() for q in C])
        vals_a = np.concatenate([np.asarray(q, dtype=float).ravel() for q in Vv])
        return sp.csc_matrix((vals_a, (rows_a, cols_a)), shape=(r, self.n_unknowns))

    # -- assembly to a full periodic orbit ------------------------------------
    def to_orbit(self, x: np.ndarray, flags: tuple = ()) -> OrbitSolution:
        coeffs, T, beta2 = self.unpack(x)
        p = self.params.replace(beta2=beta2)
        if self.flavor == "quarter":
            full_bp, full_cf = _assemble_quarter(self.mesh, coeffs)
            symmetry = Symmetry.RSTAR
        elif self.flavor == "half1":
            full_bp, full_cf = _assemble_half(self.mesh, coeffs, model.R1_SIGNS)
            symmetry = Symmetry.R1_ONLY
        else:
            full_bp, full_cf = _assemble_half(self.mesh, coeffs, model.R2_SIGNS)
            symmetry = Symmetry.R2_ONLY
        full_mesh = Mesh(len(full_bp) - 1, self.mesh.ncol, full_bp)
        return OrbitSolution(mesh=full_mesh, coeffs=full_cf, period=T, eps=0.0, params=p,
                             energy=float(model.hamiltonian(full_cf[0], p)),
                             symmetry=symmetry, flags=flags)

    def from_orbit(self, orbit: OrbitSolution, anchor_t: float | None = None) -> np.ndarray:
        """Sample a (suitably symmetric) full orbit into this reduced system."""
        if anchor_t is None:
            anchor_t = _find_anchor(orbit, self.bc_start)
        t = anchor_t + self.frac * self.mesh.representation_times()
        coeffs = evaluate(orbit, t)
        # force exact section membership at the ends
        coeffs[0, self.bc_start[0]] = 0.0
        coeffs[0, self.bc_start[1]] = 0.0
        coeffs[-1, self.bc_end[0]] = 0.0
        coeffs[-1, self.bc_end[1]] = 0.0
        return self.pack(coeffs, orbit.period, orbit.params.beta2)


def _local_blocks_of(mesh: Mesh, coeffs: np.ndarray) -> np.ndarray:
    m = mesh.ncol
    idx = np.arange(mesh.ntst)[:, None] * m + np.arange(m + 1)[None, :]
    return coeffs[idx]


def _stack_segments(segs) -> np.ndarray:
    """Concatenate per-interval local blocks (lists of (m+1,4)) into a coeff array."""
    blocks = [b for seg in segs for b in seg]
    m = blocks[0].shape[0] - 1
    n = len(blocks)
    out = np.empty((n * m + 1, 4))
    for j, b in enumerate(blocks):
        out[j * m: (j + 1) * m + 1] = b
    return out


def _assemble_quarter(mesh: Mesh, w: np.ndarray):
    """Full orbit from a quarter segment: reflect with R2, then negate."""
    q = mesh.breakpoints
    blocks = _local_blocks_of(mesh, w)
    seg1 = [blocks[j] for j in range(mesh.ntst)]
    seg2 = [(blocks[k][::-1] * model.R2_SIGNS) for k in range(mesh.ntst - 1, -1, -1)]
    half = seg1 + seg2
    segs = [half, [-b for b in half]]
    bp = np.concatenate([
        q / 4.0,
        0.5 - q[::-1][1:] / 4.0,
        0.5 + q[1:] / 4.0,
        1.0 - q[::-1][1:] / 4.0,
    ])
    return bp, _stack_segments(segs)


def _assemble_half(mesh: Mesh, w: np.ndarray, signs: np.ndarray):
    q = mesh.breakpoints
    blocks = _local_blocks_of(mesh, w)
    seg1 = [blocks[j] for j in range(mesh.ntst)]
    seg2 = [(blocks[k][::-1] * signs) for k in range(mesh.ntst - 1, -1, -1)]
    bp = np.concatenate([q / 2.0, 1.0 - q[::-1][1:] / 2.0])
    return bp, _stack_segments([seg1, seg2])


def _find_anchor(orbit: OrbitSolution, comps: tuple) -> float:
    """Phase of the closest approach to the section {u_a = u_b = 0}."""
    ts = np.linspace(0.0, 1.0, 8 * orbit.mesh.ntst, endpoint=False)
    U = evaluate(orbit, ts)
    d = U[:, comps[0]] ** 2 + U[:, comps[1]] ** 2
    i = int(np.argmin(d))
    lo, hi = ts[i] - 2.0 / len(ts), ts[i] + 2.0 / len(ts)
    r = minimize_scalar(
        lambda t: float(np.sum(evaluate(orbit, t)[[comps[0], comps[1]]] ** 2)),
        bounds=(lo, hi), method="bounded",
        options={"xatol": 1e-14},
    )
    return float(np.mod(r.x, 1.0))


# ---------------------------------------------------------------------------
# build_residual / newton_solve (spec surface)
# ---------------------------------------------------------------------------

@dataclass
class BvpResidual:
    """The assembled residual of a periodic-orbit BVP at a given orbit."""

    system: PeriodicBVP
    x0: np.ndarray
    collocation: np.ndarray
    periodicity: np.ndarray
    phase: float
    pin: float | None

    @property
    def values(self) -> np.ndarray:
        return self.system.residual(self.x0)

    @property
    def dimension(self) -> int:
        return self.system.n_equations

    @property
    def is_square(self) -> bool:
        return self.system.n_equations == self.system.n_unknowns


def build_residual(orbit: OrbitSolution, constraint) -> BvpResidual:
    """Set up the periodic BVP for ``orbit`` under the given scalar constraint."""
    if isinstance(constraint, FixPeriod):
        pins = (FixPeriod(constraint.value if constraint.value is not None else orbit.period),)
        free_b2 = False
    elif isinstance(constraint, FixEnergy):
        pins = (constraint,)
        free_b2 = False
    elif isinstance(constraint, FixBeta2):
        pins = ()
        free_b2 = False
    elif isinstance(constraint, ArclengthFree):
        pins = (FixEnergy(constraint.h_pin),)
        free_b2 = True
    else:
        raise InconsistentConstraint(f"unknown constraint {constraint!r}")
    system = PeriodicBVP(orbit.mesh, orbit.params, free_beta2=free_b2,
                         phase="integral", reference=orbit, pins=pins)
    x0 = system.from_orbit(orbit)
    res = system.residual(x0)
    n_coll = 4 * orbit.mesh.ntst * orbit.mesh.ncol
    return BvpResidual(system=system, x0=x0,
                       collocation=res[:n_coll],
                       periodicity=res[n_coll:n_coll + 4],
                       phase=float(res[n_coll + 4]),
                       pin=float(res[n_coll + 5]) if len(res) > n_coll + 5 else None)


def newton_raw(system, x0: np.ndarray, tol: float = 1e-10, max_iter: int = 25):
    """Damped Newton on a square system object; returns (x, iterations, norm)."""
    if system.n_equations != system.n_unknowns:
        raise InconsistentConstraint(
            f"system is not square: {system.n_equations} equations, {system.n_unknowns} unknowns")
    x = np.array(x0, dtype=float)
    r = system.residual(x)
    norm = _rms(r)
    for it in range(max_iter):
        if norm <= tol:
            return x, it, norm
        J = system.jacobian(x)
        try:
            lu = splu(J)
        except RuntimeError as e:
            raise SingularJacobian(str(e)) from e
        dx = lu.solve(-r)
        if not np.all(np.isfinite(dx)):
            raise SingularJacobian("non-finite Newton step")
        step = 1.0
        for _ in range(9):
            x_try = x + step * dx
            r_try = system.residual(x_try)
            n_try = _rms(r_try)
            if np.isfinite(n_try) and n_try < norm:
                x, r, norm = x_try, r_try, n_try
                break
            step *= 0.5
        else:
            raise NoConvergence(it + 1, norm, "(line search stalled)")
    if norm <= tol:
        return x, max_iter, norm
    raise NoConvergence(max_iter, norm)


def newton_solve(residual, initial: OrbitSolution | None = None,
                 tol: float = 1e-10, max_iter: int = 25) -> OrbitSolution:
    """Solve the BVP held by ``residual`` (from build_residual) by Newton.

    Returns the converged OrbitSolution with the energy field recomputed.
    Raises NoConvergence / SingularJacobian / InconsistentConstraint.
    """
    if tol < 1e-12:
        raise ValueError("tol must be >= 1e-12")
    system = residual.system if isinstance(residual, BvpResidual) else residual
    if isinstance(residual, BvpResidual) and initial is None:
        x0 = residual.x0
    else:
        x0 = system.from_orbit(initial)
    x, _, _ = newton_raw(system, x0, tol=tol, max_iter=max_iter)
    sym = initial.symmetry if initial is not None else Symmetry.UNCLASSIFIED
    orbit = system.to_orbit(x)
    return orbit.with_symmetry(sym)


def solve_fixed(orbit: OrbitSolution, pins: tuple, *, phase: str = "integral",
                tol: float = 1e-10, max_iter: int = 25) -> OrbitSolution:
    """Convenience: re-solve an orbit under the given pins (square system)."""
    system = PeriodicBVP(orbit.mesh, orbit.params, phase=phase, reference=orbit, pins=pins)
    x, _, _ = newton_raw(system, system.from_orbit(orbit), tol=tol, max_iter=max_iter)
    return system.to_orbit(x).with_symmetry(orbit.symmetry)


# ---------------------------------------------------------------------------
# Mesh adaptation
# ---------------------------------------------------------------------------

def equidistribution_density(mesh: Mesh, coeffs: np.ndarray) -> np.ndarray:
    """Local error density per interval from the (ncol+1)-th derivative
    estimate, in the classic equidistribution norm |u^(m+1)|^(1/(m+1))."""
    m = mesh.ncol
    *_, poly, dpoly = _basis(m)
    blocks = _local_blocks_of(mesh, coeffs)      # (N, m+1, 4)
    # m-th derivative of each local polynomial is constant: m! * leading coeff
    lead = np.einsum("ik,jid->jkd", poly[:, :1], blocks)[:, 0, :]   # (N,4) leading coeffs
    dm = math.factorial(m) * lead / mesh.h[:, None] ** m
    # (m+1)-th derivative estimate at interior breakpoints by differencing
    mid = 0.5 * (mesh.h[:-1] + mesh.h[1:])
    dmp1 = np.abs(np.diff(dm, axis=0)) / mid[:, None]
    dmp1 = np.vstack([dmp1[:1], dmp1, dmp1[-1:]])   # extend to N intervals
    dens_comp = 0.5 * (dmp1[:-1] + dmp1[1:])
    scale = 1.0 + np.max(np.abs(coeffs), axis=0)
    dens = np.max(dens_comp / scale[None, :], axis=1) ** (1.0 / (m + 1))
    return np.maximum(dens, 1e-12 * np.max(dens) if np.max(dens) > 0 else 1.0)


def equidistributed_breakpoints(mesh: Mesh, coeffs: np.ndarray, ntst_new: int | None = None) -> np.ndarray:
    dens = equidistribution_density(mesh, coeffs)
    n = ntst_new if ntst_new is not None else mesh.ntst
    cum = np.concatenate([[0.0], np.cumsum(dens * mesh.h)])
    targets = np.linspace(0.0, cum[-1], n + 1)
    bp = np.interp(targets, cum, mesh.breakpoints)
    bp[0], bp[-1] = 0.0, 1.0
    # guard against collapsed intervals
    min_h = 1e-10
    for i in range(1, n + 1):
        if bp[i] <= bp[i - 1] + min_h:
            bp[i] = bp[i - 1] + min_h
    bp[-1] = 1.0
    return bp


def remesh(orbit: OrbitSolution, ntst_new: int | None = None) -> OrbitSolution:
    """Redistribute breakpoints to equidistribute local error and re-converge.

    On Newton failure the original orbit is returned with a 'remesh-failed'
    flag instead of raising.
    """
    bp = equidistributed_breakpoints(orbit.mesh, orbit.coeffs, ntst_new)
    new_mesh = Mesh(len(bp) - 1, orbit.mesh.ncol, bp)
    new_coeffs = evaluate(orbit, new_mesh.representation_times())
    guess = OrbitSolution(mesh=new_mesh, coeffs=new_coeffs, period=orbit.period,
                          eps=orbit.eps, params=orbit.params, energy=orbit.energy,
                          symmetry=orbit.symmetry)
    try:
        return solve_fixed(guess, (FixPeriod(orbit.period),))
    except (NoConvergence, SingularJacobian):
        return dc_replace(orbit, flags=orbit.flags + ("remesh-failed",))


# ---------------------------------------------------------------------------
# Orbit symmetry classification and images
# ---------------------------------------------------------------------------

def _section_distance(orbit: OrbitSolution, comps: tuple) -> float:
    ts = np.linspace(0.0, 1.0, 8 * orbit.mesh.ntst, endpoint=False)
    U = evaluate(orbit, ts)
    d = U[:, comps[0]] ** 2 + U[:, comps[1]] ** 2
    i = int(np.argmin(d))
    span = 2.0 / len(ts)
    r = minimize_scalar(
        lambda t: float(np.sum(evaluate(orbit, t)[[comps[0], comps[1]]] ** 2)),
        bounds=(ts[i] - span, ts[i] + span), method="bounded", options={"xatol": 1e-15})
    return float(np.sqrt(max(r.fun, 0.0)))


def classify_orbit_symmetry(orbit: OrbitSolution, tol: float = 1e-8) -> Symmetry:
    """Classify by refined closest approach to the reversibility sections."""
    scale = 1.0 + float(np.max(np.abs(orbit.coeffs)))
    on1 = _section_distance(orbit, _SECTION_COMPS["sigma1"]) <= tol * scale
    on2 = _section_distance(orbit, _SECTION_COMPS["sigma2"]) <= tol * scale
    if on1 and on2:
        return Symmetry.RSTAR
    if on1:
        return Symmetry.R1_ONLY
    if on2:
        return Symmetry.R2_ONLY
    return Symmetry.NON_SYMMETRIC


_IMAGE_SYMMETRY = {
    Symmetry.RSTAR: Symmetry.RSTAR,
    Symmetry.R1_ONLY: Symmetry.R1_ONLY,
    Symmetry.R2_ONLY: Symmetry.R2_ONLY,
    Symmetry.NON_SYMMETRIC: Symmetry.NON_SYMMETRIC,
    Symmetry.UNCLASSIFIED: Symmetry.UNCLASSIFIED,
}


def reverse_image(orbit: OrbitSolution, signs: np.ndarray) -> OrbitSolution:
    """The orbit t -> R u(-t) for a reversibility sign pattern R.

    Maps an orbit to its counterpart under the OTHER reversibility (the
    R2-image of an R1-symmetric orbit is produced with signs=R2_SIGNS).
    """
    mesh = orbit.mesh
    q = mesh.breakpoints
    blocks = _local_blocks_of(mesh, orbit.coeffs)
    segs = [[(blocks[k][::-1] * signs) for k in range(mesh.ntst - 1, -1, -1)]]
    bp = 1.0 - q[::-1]
    bp[0], bp[-1] = 0.0, 1.0
    new_mesh = Mesh(mesh.ntst, mesh.ncol, bp)
    cf = _stack_segments(segs)
    return OrbitSolution(mesh=new_mesh, coeffs=cf, period=orbit.period, eps=orbit.eps,
                         params=orbit.params,
                         energy=float(model.hamiltonian(cf[0], orbit.params)),
                         symmetry=_IMAGE_SYMMETRY[orbit.symmetry])


# ---------------------------------------------------------------------------
# Seeding
# ---------------------------------------------------------------------------

def _imaginary_pair(A: np.ndarray, tol: float = 1e-9):
    lam, vec = np.linalg.eig(A)
    cands = [(l, vec[:, i]) for i, l in enumerate(lam)
             if l.imag > tol and abs(l.real) <= tol * (1.0 + abs(l))]
    if len(cands) != 1:
        raise NoImaginaryPair(f"found {len(cands)} candidate imaginary pairs in spectrum {lam}")
    return cands[0]


def seed_lyapunov_orbit(eq: np.ndarray, p: Params, amplitude: float,
                        ntst: int = 60, ncol: int = 4, tol: float = 1e-10) -> OrbitSolution:
    """Small periodic orbit of the centre family around a saddle-centre.

    The harmonic guess eq + amplitude*Re(v e^{2 pi i s}) is corrected with an
    amplitude pin to keep Newton off the equilibrium.
    """
    if amplitude == 0.0:
        raise ValueError("amplitude must be nonzero (equilibrium is not an orbit)")
    eq = np.asarray(eq, float)
    lam, v = _imaginary_pair(model.jacobian(eq, p))
    omega = lam.imag
    # rotate the eigenvector phase so Re v and Im v are orthogonal
    a, b = v.real, v.imag
    phi = 0.5 * math.atan2(2.0 * float(a @ b), float(a @ a - b @ b))
    v = v * np.exp(-1j * phi)
    v = v / np.linalg.norm(v.real)
    mesh = uniform_mesh(ntst, ncol)
    s = mesh.representation_times()
    seed_cf = eq[None, :] + amplitude * (np.cos(2 * np.pi * s)[:, None] * v.real[None, :]
                                         - np.sin(2 * np.pi * s)[:, None] * v.imag[None, :])
    T0 = 2.0 * np.pi / omega
    guess = OrbitSolution(mesh=mesh, coeffs=seed_cf, period=T0, eps=0.0, params=p,
                          energy=float(model.hamiltonian(seed_cf[0], p)))
    w = v.real / np.linalg.norm(v.real)
    pin = _LinearPin(w=w, base=eq, value=float(w @ (seed_cf[0] - eq)))
    orbit = solve_fixed(guess, (pin,), tol=tol)
    return orbit.with_symmetry(classify_orbit_symmetry(orbit))


def _shoot_quarter(p: Params, a: float, c: float, tau: float):
    """Integrate from (a,0,c,0) for time tau; returns endpoint."""
    def rhs(t, u):
        return model.vector_field(u, p)

    def escape(t, u):
        return ESCAPE_BOX - np.max(np.abs(u))
    escape.terminal = True

    sol = solve_ivp(rhs, (0.0, tau), np.array([a, 0.0, c, 0.0]), rtol=1e-11, atol=1e-12,
                    method="DOP853", events=[escape], dense_output=True)
    if sol.t_events[0].size > 0 or not sol.success:
        raise SegmentLeavesBox(f"trajectory from a={a}, c={c} left |u|<= {ESCAPE_BOX}")
    return sol


def _first_sigma2_time(p: Params, a: float, c: float, t_max: float = 40.0):
    """Time of the first u1=0 crossing from (a,0,c,0), or None."""
    def rhs(t, u):
        return model.vector_field(u, p)

    def ev(t, u):
        return u[0]
    ev.terminal = True

    def escape(t, u):
        return ESCAPE_BOX - np.max(np.abs(u))
    escape.terminal = True

    sol = solve_ivp(rhs, (0.0, t_max), np.array([a, 0.0, c, 0.0]), rtol=1e-10, atol=1e-12,
                    method="DOP853", events=[ev, escape])
    if sol.t_events[0].size == 0:
        return None
    return float(sol.t_events[0][0]), sol.y_events[0][0]


def _sigma1_c(p: Params, a: float, h_target: float):
    """|u3| on Sigma1 at given u1=a and energy, or None if not reachable."""
    val = -2.0 * h_target - 2.0 * (-6.0 * p.gamma * a**4 + 12.0 * p.mu * a**2) / p.beta4
    return math.sqrt(val) if val > 0.0 else None


def find_rstar_guess(p: Params, h_target: float = 0.0, loops: int = 1,
                     a_range=(0.02, None), n_scan: int = 160):
    """Scan Sigma1 for quarter-orbit shooting roots and return (u1, u3) of the
    orbit with the requested winding number.

    The energy pin leaves a one-parameter set (a, +-c(a)) of start points on
    Sigma1; roots of u3 at the first Sigma2 crossing mark R*-symmetric orbits.
    """
    a_hi = a_range[1]
    if a_hi is None:
        # largest u1 on Sigma1 with u3=0 at this energy
        a_hi = 0.99 * math.sqrt(2.0 * p.mu / p.gamma) if p.mu > 0 else 2.0
    found = []
    for csign in (-1.0, 1.0):
        prev = None
        for a in np.linspace(a_range[0], a_hi, n_scan):
            c = _sigma1_c(p, a, h_target)
            if c is None:
                prev = None
                continue
            try:
                r = _first_sigma2_time(p, a, csign * c)
            except SegmentLeavesBox:
                prev = None
                continue
            if r is None:
                prev = None
                continue
            g = r[1][2]
            if prev is not None and np.sign(g) != np.sign(prev[0]) and prev[0] != 0.0:
                lo, hi, glo = prev[1], a, prev[0]
                for _ in range(60):
                    mid = 0.5 * (lo + hi)
                    rm = _first_sigma2_time(p, mid, csign * _sigma1_c(p, mid, h_target))
                    if rm is None:
                        break
                    if np.sign(rm[1][2]) == np.sign(glo):
                        lo, glo = mid, rm[1][2]
                    else:
                        hi = mid
                a_root = 0.5 * (lo + hi)
                c_root = csign * _sigma1_c(p, a_root, h_target)
                tau, _ = _first_sigma2_time(p, a_root, c_root)
                # winding of the full orbit in the (u1,u2) projection
                sol = _shoot_quarter(p, a_root, c_root, 4.0 * tau)
                ts = np.linspace(0.0, 4.0 * tau, 2000)
                U = sol.sol(ts).T
                ang = np.unwrap(np.arctan2(U[:, 1], U[:, 0]))
                wind = abs((ang[-1] - ang[0]) / (2.0 * np.pi))
                found.append((a_root, c_root, tau, wind))
            prev = (g, a)
    for a_root, c_root, tau, wind in sorted(found, key=lambda q: q[2]):
        if abs(wind - loops) < 0.2:
            return a_root, c_root, tau
    raise NoConvergence(0, np.inf, f"(no R*-symmetric orbit with {loops} loops found in scan)")


def seed_rstar_orbit(p: Params, guess=None, h_target: float = 0.0,
                     ntst: int = 40, ncol: int = 4, tol: float = 1e-10,
                     loops: int = 1) -> OrbitSolution:
    """R*-symmetric periodic orbit at the given energy via quarter-orbit
    shooting from Sigma1 to Sigma2, polished as a collocation BVP.

    ``guess`` is an optional (u1, u3) start point on Sigma1; scanned
    automatically when omitted.  The returned orbit is the full assembled
    loop, classified Rstar.
    """
    if guess is None:
        a, c, tau = find_rstar_guess(p, h_target, loops=loops)
    else:
        a, c = float(guess[0]), float(guess[1])
        r = _first_sigma2_time(p, a, c)
        if r is None:
            raise NoConvergence(0, np.inf, "(no Sigma2 crossing from supplied guess)")
        tau = r[0]

    # Newton-polish the shooting problem in (a, c, tau)
    def shoot_res(z):
        sol = _shoot_quarter(p, z[0], z[1], z[2])
        end = sol.y[:, -1]
        return np.array([end[0], end[2],
                         float(model.hamiltonian([z[0], 0.0, z[1], 0.0], p)) - h_target])

    z = np.array([a, c, tau])
    for _ in range(30):
        r0 = shoot_res(z)
        if np.max(np.abs(r0)) < 1e-11:
            break
        J = np.empty((3, 3))
        for k in range(3):
            dz = 1e-7 * max(1.0, abs(z[k]))
            zp = z.copy(); zp[k] += dz
            J[:, k] = (shoot_res(zp) - r0) / dz
        z = z - np.linalg.solve(J, r0)
    else:
        raise NoConvergence(30, float(np.max(np.abs(shoot_res(z)))), "(quarter shooting)")

    a, c, tau = z
    sol = _shoot_quarter(p, a, c, tau)
    mesh = uniform_mesh(ntst, ncol)
    w = sol.sol(mesh.representation_times() * tau).T
    sym = SymmetricBVP(mesh, p, "quarter", pins=(FixEnergy(h_target),))
    x0 = sym.pack(w, 4.0 * tau)
    x, _, _ = newton_raw(sym, x0, tol=tol)
    return sym.to_orbit(x)
