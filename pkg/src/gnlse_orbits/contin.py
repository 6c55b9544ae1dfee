"""Pseudo-arclength continuation of periodic-orbit families.

A family is the one-dimensional solution set of an open BVP system (one
fewer equation than unknowns): either an energy family (beta2 fixed, H
varies along the branch) or a beta2 family (H pinned, beta2 free).  The
predictor is the secant through the last two points (tangent on the first
step); the corrector solves the system augmented with the arclength
hyperplane condition.  Orbits are stored at every accepted step together
with a dense monitor log, and sign changes of monitor functions are refined
into events.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import scipy.sparse as sp
from scipy.optimize import brentq
from scipy.sparse.linalg import splu

from . import colloc, model
from .colloc import (
    FixEnergy,
    Mesh,
    NoConvergence,
    OrbitSolution,
    PeriodicBVP,
    SingularJacobian,
    Symmetry,
    SymmetricBVP,
    newton_raw,
    uniform_mesh,
)

__all__ = [
    "FamilyKind",
    "StepControl",
    "Branch",
    "BifurcationPoint",
    "extend_branch",
    "locate_event",
    "fold_points",
    "refine_between",
    "StallAtMinStep",
    "ImmediateFailure",
    "LostBracket",
]


class StallAtMinStep(RuntimeError):
    pass


class ImmediateFailure(RuntimeError):
    pass


class LostBracket(RuntimeError):
    pass


class FamilyKind(Enum):
    ENERGY = "energy"    # beta2 fixed, H varies
    BETA2 = "beta2"      # H pinned, beta2 varies


@dataclass
class StepControl:
    ds_init: float = 0.02
    ds_min: float = 1e-8
    ds_max: float = 0.25
    max_steps: int = 5000
    t_max: float = 200.0
    h_window: tuple | None = None
    beta2_window: tuple | None = None
    u_max: float = 50.0
    newton_tol: float = 1e-10
    newton_max_iter: int = 12
    grow_after: int = 3
    grow_factor: float = 1.3
    record_floquet: bool = True
    record_sigma: bool = False
    detect_events: bool = True
    remesh_interval: int = 0          # 0: only when equidistribution degrades
    density_ratio_max: float = 10.0
    ntst_high: int = 400
    t_escalate: float = 1e30
    extra_monitors: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (self.ds_min <= self.ds_init <= self.ds_max):
            raise ValueError("need ds_min <= ds_init <= ds_max")


@dataclass
class BifurcationPoint:
    kind: str                 # 'fold' | 'zero_energy' | 'sb' | 'pd' | 'resonance' | refined kinds
    beta2: float
    energy: float
    orbit: OrbitSolution
    floquet: object = None    # FloquetData snapshot
    k: int | None = None
    p: int | None = None
    arclength: float = 0.0


# ---------------------------------------------------------------------------
# Family systems
# ---------------------------------------------------------------------------

def _make_system(kind: FamilyKind, flavor: str, mesh: Mesh, params: model.Params,
                 h_pin: float, reference: OrbitSolution | None):
    if flavor == "full":
        if kind is FamilyKind.ENERGY:
            return PeriodicBVP(mesh, params, phase="integral", reference=reference, pins=())
        return PeriodicBVP(mesh, params, free_beta2=True, phase="integral",
                           reference=reference, pins=(FixEnergy(h_pin),))
    if flavor in ("quarter", "half1", "half2"):
        if kind is FamilyKind.ENERGY:
            return SymmetricBVP(mesh, params, flavor, pins=())
        return SymmetricBVP(mesh, params, flavor, free_beta2=True, pins=(FixEnergy(h_pin),))
    raise ValueError(f"unknown solver flavor {flavor!r}")


_FLAVOR_FOR_SYMMETRY = {
    Symmetry.RSTAR: "quarter",
    Symmetry.R1_ONLY: "half1",
    Symmetry.R2_ONLY: "half2",
}


def _weights(system) -> np.ndarray:
    w = np.empty(system.n_unknowns)
    w[: system.n_coeff] = 1.0 / system.n_pts
    w[system.n_coeff:] = 1.0
    w[system._iT] = 1e-4
    return w


class _ArclengthSystem:
    """Base open system plus the hyperplane row <w*(x - x_pred), tang> = ds_zero."""

    def __init__(self, base, tangent: np.ndarray, x_anchor: np.ndarray,
                 weights: np.ndarray, offset: float = 0.0):
        self.base = base
        self.tangent = tangent
        self.x_anchor = x_anchor
        self.weights = weights
        self.offset = offset
        self.n_unknowns = base.n_unknowns
        self.n_equations = base.n_equations + 1

    def residual(self, x):
        r = self.base.residual(x)
        arc = float(np.sum(self.weights * (x - self.x_anchor) * self.tangent)) - self.offset
        return np.append(r, arc)

    def jacobian(self, x):
        J = self.base.jacobian(x)
        row = sp.csr_matrix((self.weights * self.tangent)[None, :])
        return sp.vstack([J, row], format="csc")


def _norm_w(v, w):
    return math.sqrt(float(np.sum(w * v * v)))


def _tangent(system, x, w, seed_rows=None) -> np.ndarray:
    """Unit null vector of the open system's Jacobian at a solution."""
    J = system.jacobian(x)
    n = system.n_unknowns
    candidates = []
    if seed_rows is not None:
        candidates.append(seed_rows)
    for k in (system._iT, n - 1, 0):
        e = np.zeros(n)
        e[k] = 1.0
        candidates.append(e)
    for row in candidates:
        A = sp.vstack([J, sp.csr_matrix(row[None, :])], format="csc")
        try:
            lu = splu(A)
        except RuntimeError:
            continue
        rhs = np.zeros(n)
        rhs[-1] = 1.0
        t = lu.solve(rhs)
        nt = _norm_w(t, w)
        if np.all(np.isfinite(t)) and nt > 1e-12:
            return t / nt
    raise SingularJacobian("could not compute branch tangent")


# ---------------------------------------------------------------------------
# Branch
# ---------------------------------------------------------------------------

@dataclass
class _PointRepr:
    mesh: Mesh
    x: np.ndarray


@dataclass
class Branch:
    family: FamilyKind
    flavor: str
    h_pin: float
    base_params: model.Params
    points: list = field(default_factory=list)          # OrbitSolution per step
    reprs: list = field(default_factory=list)           # _PointRepr per step
    monitors: list = field(default_factory=list)        # dict per step
    events: list = field(default_factory=list)          # BifurcationPoint
    arclengths: list = field(default_factory=list)
    direction: int = 1
    flags: tuple = ()

    @property
    def free_scalar_name(self) -> str:
        return "energy" if self.family is FamilyKind.ENERGY else "beta2"

    def monitor_array(self, name: str) -> np.ndarray:
        return np.array([m.get(name, np.nan) for m in self.monitors], dtype=float)

    def system_at(self, i: int, reference: OrbitSolution | None = None):
        ref = reference if reference is not None else self.points[i]
        return _make_system(self.family, self.flavor, self.reprs[i].mesh,
                            self.base_params, self.h_pin, ref)

    def append(self, orbit: OrbitSolution, repr_: _PointRepr, mon: dict, s: float):
        self.points.append(orbit)
        self.reprs.append(repr_)
        self.monitors.append(mon)
        self.arclengths.append(s)

    def insert(self, i: int, orbit: OrbitSolution, repr_: _PointRepr, mon: dict, s: float):
        self.points.insert(i, orbit)
        self.reprs.insert(i, repr_)
        self.monitors.insert(i, mon)
        self.arclengths.insert(i, s)


def _standard_monitors(orbit: OrbitSolution, ctl: StepControl) -> dict:
    mon = {
        "energy": orbit.energy,
        "period": orbit.period,
        "beta2": orbit.params.beta2,
        "eps": orbit.eps,
        "max_u": float(np.max(np.abs(orbit.coeffs))),
        "max_u1": float(np.max(orbit.coeffs[:, 0])),
    }
    if ctl.record_floquet:
        from . import floquet
        try:
            fd = floquet.floquet_data(orbit)
            mon["floquet_trace"] = fd.trace
            mon["floquet_alpha"] = fd.rotation_number if fd.rotation_number is not None else np.nan
            mon["floquet_class"] = fd.orbit_class.value
            mon["floquet_det"] = fd.block_det
        except Exception:
            mon["floquet_trace"] = np.nan
            mon["floquet_alpha"] = np.nan
            mon["floquet_class"] = "failed"
            mon["floquet_det"] = np.nan
    if ctl.record_sigma:
        from . import sections
        try:
            pts = sections.sigma_intersections(orbit)
            mon["n_sigma"] = float(len(pts))
        except Exception:
            mon["n_sigma"] = np.nan
    for name, fn in ctl.extra_monitors.items():
        try:
            mon[name] = float(fn(orbit))
        except Exception:
            mon[name] = np.nan
    return mon


def _reduced_from_orbit(system, orbit: OrbitSolution) -> np.ndarray:
    if isinstance(system, PeriodicBVP):
        return system.from_orbit(orbit)
    scale = 1.0 + float(np.max(np.abs(orbit.coeffs)))
    a, b = system.bc_start
    if abs(orbit.coeffs[0, a]) <= 1e-9 * scale and abs(orbit.coeffs[0, b]) <= 1e-9 * scale:
        return system.from_orbit(orbit, anchor_t=0.0)
    return system.from_orbit(orbit)


def _resample_x(system_new, system_old, x_old: np.ndarray) -> np.ndarray:
    """Re-express an unknown vector on a new mesh by polynomial sampling."""
    coeffs_old = x_old[: system_old.n_coeff].reshape(system_old.n_pts, 4)
    t_new = system_new.mesh.representation_times()
    cf = colloc.eval_piecewise(system_old.mesh, coeffs_old, t_new)
    tail = x_old[system_old.n_coeff:]
    return np.concatenate([cf.ravel(), tail])


def _window_ok(orbit: OrbitSolution, ctl: StepControl) -> bool:
    if orbit.period > ctl.t_max:
        return False
    if float(np.max(np.abs(orbit.coeffs))) > ctl.u_max:
        return False
    if ctl.h_window is not None and not (ctl.h_window[0] <= orbit.energy <= ctl.h_window[1]):
        return False
    if ctl.beta2_window is not None and not (ctl.beta2_window[0] <= orbit.params.beta2 <= ctl.beta2_window[1]):
        return False
    return True


def extend_branch(start: OrbitSolution, family: FamilyKind | str,
                  ctl: StepControl | None = None, *, direction: int = 1,
                  solver: str = "full", h_pin: float | None = None) -> Branch:
    """Continue the family through ``start`` by pseudo-arclength stepping.

    solver: 'full' for the periodic BVP with unfolding, 'auto' to pick the
    reduced symmetric flavour matching start.symmetry, or an explicit
    flavour name.  For a beta2 family the energy is pinned at ``h_pin``
    (default: the start orbit's energy).
    """
    if isinstance(family, str):
        family = FamilyKind(family)
    ctl = ctl if ctl is not None else StepControl()
    if solver == "auto":
        solver = _FLAVOR_FOR_SYMMETRY.get(start.symmetry, "full")
    if h_pin is None:
        h_pin = start.energy if family is FamilyKind.BETA2 else 0.0

    if solver == "full":
        mesh = start.mesh
    else:
        # reduced mesh covering a quarter/half period (anchor at phase 0)
        frac = SymmetricBVP.FRACTIONS[solver]
        ntst_red = max(10, int(round(start.mesh.ntst * frac)))
        mesh = uniform_mesh(ntst_red, start.mesh.ncol)

    system = _make_system(family, solver, mesh, start.params, h_pin, start)
    x = _reduced_from_orbit(system, start)
    try:
        x, _, _ = newton_raw(
            _PinnedOnce(system, x), x, tol=ctl.newton_tol, max_iter=ctl.newton_max_iter)
    except (NoConvergence, SingularJacobian) as e:
        raise ImmediateFailure(f"start orbit does not satisfy the family system: {e}") from e

    branch = Branch(family=family, flavor=solver, h_pin=h_pin, base_params=start.params,
                    direction=direction)
    w = _weights(system)
    orbit0 = _orbit_of(system, x)
    f0 = model.vector_field(orbit0.u0, orbit0.params)
    if float(np.max(np.abs(f0))) < 1e-8 or float(np.ptp(orbit0.coeffs[:, 0])) < 1e-10:
        raise ImmediateFailure("start solve collapsed onto an equilibrium")
    branch.append(orbit0, _PointRepr(system.mesh, x.copy()), _standard_monitors(orbit0, ctl), 0.0)

    tang = _tangent(system, x, w)
    comp, _ = _free_scalar_rate(family, system, x, tang)
    if comp == 0.0:
        comp = tang[system._iT]
    if comp != 0.0 and np.sign(comp) != np.sign(direction):
        tang = -tang

    ds = ctl.ds_init
    streak = 0
    s_total = 0.0
    for step in range(ctl.max_steps):
        x_pred = x + ds * tang
        arc = _ArclengthSystem(system, tang, x_pred, w)
        try:
            x_new, _, _ = newton_raw(arc, x_pred, tol=ctl.newton_tol,
                                     max_iter=ctl.newton_max_iter)
            ok = True
        except (NoConvergence, SingularJacobian):
            ok = False
        if not ok:
            streak = 0
            ds *= 0.5
            if ds < ctl.ds_min:
                if len(branch.points) == 1:
                    raise ImmediateFailure("first continuation step failed down to ds_min")
                branch.flags += ("stalled",)
                break
            continue

        orbit = _orbit_of(system, x_new)
        step_len = _norm_w(x_new - x, w)
        s_total += step_len
        mon = _standard_monitors(orbit, ctl)
        branch.append(orbit, _PointRepr(system.mesh, x_new.copy()), mon, s_total)
        if ctl.detect_events and len(branch.points) >= 2:
            _detect_events(branch, ctl)
        if not _window_ok(orbit, ctl):
            branch.flags += ("window",)
            break

        new_tang = (x_new - x) / max(step_len, 1e-300)
        x = x_new
        tang = new_tang
        streak += 1
        if streak >= ctl.grow_after:
            ds = min(ds * ctl.grow_factor, ctl.ds_max)
            streak = 0

        # mesh maintenance
        system, x, tang, changed = _maybe_remesh(system, x, tang, orbit, ctl, family, h_pin)
        if changed:
            w = _weights(system)
    return branch


class _PinnedOnce:
    """Square wrapper: open system + frozen arclength-free pin on the start point.

    Used to (re-)converge the start orbit on the family system without moving
    along the branch: adds the row <w*(x - x0), t0> = 0 where t0 is a crude
    scale direction.
    """

    def __init__(self, base, x0):
        self.base = base
        self.x0 = x0.copy()
        self.w = _weights(base)
        t0 = np.zeros_like(x0)
        t0[base._iT] = 1.0
        self.t0 = t0
        self.n_unknowns = base.n_unknowns
        self.n_equations = base.n_equations + 1

    def residual(self, x):
        return np.append(self.base.residual(x),
                         float(np.sum(self.w * (x - self.x0) * self.t0)))

    def jacobian(self, x):
        row = sp.csr_matrix((self.w * self.t0)[None, :])
        return sp.vstack([self.base.jacobian(x), row], format="csc")


def _orbit_of(system, x) -> OrbitSolution:
    return system.to_orbit(x)


def _free_scalar_rate(family: FamilyKind, system, x, tang):
    """Rate of change of the family's free scalar along a tangent vector."""
    if family is FamilyKind.BETA2:
        return float(tang[system._ib2]), tang
    p = system.params_at(x)
    g = model.grad_H(x[:4], p)
    return float(g @ tang[:4]), tang


def _maybe_remesh(system, x, tang, orbit: OrbitSolution, ctl: StepControl,
                  family: FamilyKind, h_pin: float):
    """Equidistribute the working mesh when its density ratio degrades."""
    coeffs = x[: system.n_coeff].reshape(system.n_pts, 4)
    mesh = system.mesh
    dens = colloc.equidistribution_density(mesh, coeffs)
    work = dens * mesh.h
    ratio = float(np.max(work) / max(np.min(work), 1e-300))
    ntst_new = mesh.ntst
    if orbit.period > ctl.t_escalate and mesh.ntst < ctl.ntst_high:
        ntst_new = ctl.ntst_high
    elif ratio <= ctl.density_ratio_max:
        return system, x, tang, False
    bp = colloc.equidistributed_breakpoints(mesh, coeffs, ntst_new)
    new_mesh = Mesh(len(bp) - 1, mesh.ncol, bp)
    new_system = _make_system(family, system_flavor(system), new_mesh,
                              _base_params(system), h_pin, orbit)
    x_new = _resample_x(new_system, system, x)
    try:
        x_new, _, _ = newton_raw(_PinnedOnce(new_system, x_new), x_new,
                                 tol=ctl.newton_tol, max_iter=ctl.newton_max_iter)
    except (NoConvergence, SingularJacobian):
        return system, x, tang, False
    w_new = _weights(new_system)
    # re-express the tangent by resampling its coefficient block
    t_new = _resample_x(new_system, system, tang)
    t_new /= max(_norm_w(t_new, w_new), 1e-300)
    return new_system, x_new, t_new, True


def system_flavor(system) -> str:
    if isinstance(system, PeriodicBVP):
        return "full"
    return system.flavor


def _base_params(system) -> model.Params:
    return system.params


# ---------------------------------------------------------------------------
# Event detection and refinement
# ---------------------------------------------------------------------------

_EVENT_MONITORS = {
    "zero_energy": lambda mon: mon.get("energy", np.nan),
    "sb": lambda mon: (mon.get("floquet_trace", np.nan) - 2.0),
    "pd": lambda mon: (mon.get("floquet_trace", np.nan) + 2.0),
}


def _event_orbit_monitor(kind: str):
    if kind == "zero_energy":
        return lambda orbit: orbit.energy
    if kind == "sb":
        def m(orbit):
            from . import floquet
            return floquet.deflated_trace(orbit) - 2.0
        return m
    if kind == "pd":
        def m(orbit):
            from . import floquet
            return floquet.deflated_trace(orbit) + 2.0
        return m
    raise KeyError(kind)


def _detect_events(branch: Branch, ctl: StepControl):
    i = len(branch.points) - 2
    ma, mb = branch.monitors[i], branch.monitors[i + 1]
    for kind, get in _EVENT_MONITORS.items():
        if kind in ("sb", "pd") and not ctl.record_floquet:
            continue
        fa, fb = get(ma), get(mb)
        if np.isnan(fa) or np.isnan(fb) or fa == 0.0:
            continue
        # pinned or noise-level monitors never define genuine crossings
        if max(abs(fa), abs(fb)) < 1e-8:
            continue
        if fa * fb < 0.0:
            # skip trace crossings through hyperbolic het jumps (|trace| huge)
            if kind in ("sb", "pd") and (abs(fa) > 10.0 or abs(fb) > 10.0):
                continue
            try:
                orbit = refine_between(branch, i, _event_orbit_monitor(kind),
                                       tol=1e-8, insert=False)
            except (LostBracket, NoConvergence, SingularJacobian, ValueError):
                continue
            from . import floquet
            try:
                fd = floquet.floquet_data(orbit)
            except Exception:
                fd = None
            branch.events.append(BifurcationPoint(
                kind=kind, beta2=orbit.params.beta2, energy=orbit.energy,
                orbit=orbit, floquet=fd, arclength=branch.arclengths[i]))
    # folds of the free scalar
    if len(branch.points) >= 3:
        name = branch.free_scalar_name
        v = branch.monitor_array(name)[-3:]
        d1, d2 = v[1] - v[0], v[2] - v[1]
        if d1 * d2 < 0.0 and not any(e.kind == "fold" and abs(e.arclength - branch.arclengths[-2]) < 1e-12
                                     for e in branch.events):
            i0 = len(branch.points) - 3
            try:
                orbit = _refine_fold(branch, i0, insert=False)
            except (LostBracket, NoConvergence, SingularJacobian, ValueError):
                return
            branch.events.append(BifurcationPoint(
                kind="fold", beta2=orbit.params.beta2, energy=orbit.energy,
                orbit=orbit, floquet=None, arclength=branch.arclengths[-2]))


def _corrector_path(branch: Branch, i: int, span: int = 1):
    """Returns (system, x_a, direction, length, weights) for walking from
    point i to point i+span."""
    sys_a = branch.system_at(i)
    x_a = branch.reprs[i].x
    x_b = branch.reprs[i + span].x
    if branch.reprs[i + span].mesh is not branch.reprs[i].mesh:
        sys_b = branch.system_at(i + span)
        x_b = _resample_x(sys_a, sys_b, x_b)
    w = _weights(sys_a)
    d = x_b - x_a
    length = _norm_w(d, w)
    return sys_a, x_a, d / max(length, 1e-300), length, w


def refine_between(branch: Branch, i: int, monitor, tol: float = 1e-8,
                   span: int = 1, max_fail: int = 20, insert: bool = True) -> OrbitSolution:
    """Root of a scalar orbit monitor between branch points i and i+span.

    The corrector re-solves the family system on the hyperplane orthogonal
    to the secant at fractional arclength positions; brentq drives the
    position.  The refined orbit is inserted into the branch.
    """
    system, x_a, dirn, length, w = _corrector_path(branch, i, span)
    cache = {}
    fails = [0]

    def g(theta: float) -> float:
        if theta in cache:
            return cache[theta][0]
        x_pred = x_a + (theta * length) * dirn
        arc = _ArclengthSystem(system, dirn, x_pred, w)
        try:
            x_sol, _, _ = newton_raw(arc, x_pred, tol=1e-10, max_iter=15)
        except (NoConvergence, SingularJacobian) as e:
            fails[0] += 1
            if fails[0] >= max_fail:
                raise LostBracket(f"corrector failed {max_fail} times refining event") from e
            raise
        orbit = _orbit_of(system, x_sol)
        val = float(monitor(orbit))
        cache[theta] = (val, x_sol, orbit)
        return val

    fa, fb = g(0.0), g(1.0)
    if fa == 0.0:
        theta_root = 0.0
    elif fb == 0.0:
        theta_root = 1.0
    elif fa * fb > 0.0:
        raise ValueError(f"monitor does not change sign on bracket ({fa:.3e}, {fb:.3e})")
    else:
        theta_root = brentq(g, 0.0, 1.0, xtol=1e-14, rtol=8.9e-16, maxiter=200)
    theta_best = min(cache, key=lambda th: abs(cache[th][0]))
    val, x_sol, orbit = cache[theta_best]
    if insert and 0.0 < theta_best < 1.0:
        s = branch.arclengths[i] + theta_best * length
        branch.insert(i + 1, orbit, _PointRepr(system.mesh, x_sol.copy()),
                      _standard_monitors(orbit, StepControl()), s)
    return orbit


def refine_extremum(branch: Branch, i: int, monitor, span: int = 1,
                    minimize: bool = True) -> OrbitSolution:
    """Interior extremum of a scalar orbit monitor between points i and i+span."""
    from scipy.optimize import minimize_scalar

    system, x_a, dirn, length, w = _corrector_path(branch, i, span)
    sign = 1.0 if minimize else -1.0
    best = {}

    def g(theta: float) -> float:
        x_pred = x_a + (theta * length) * dirn
        arc = _ArclengthSystem(system, dirn, x_pred, w)
        x_sol, _, _ = newton_raw(arc, x_pred, tol=1e-10, max_iter=15)
        orbit = _orbit_of(system, x_sol)
        val = sign * float(monitor(orbit))
        if not best or val < best["val"]:
            best.update(val=val, orbit=orbit)
        return val

    minimize_scalar(g, bounds=(0.0, 1.0), method="bounded", options={"xatol": 1e-12})
    return best["orbit"]


def locate_event(branch: Branch, test, which: int, tol: float = 1e-8) -> OrbitSolution:
    """Refine the zero of a monitor between branch points which and which+1.

    ``test`` is a callable orbit -> float, or the name of a recorded monitor
    (refined against the live orbit value).
    """
    if isinstance(test, str):
        name = test
        def test_fn(orbit):
            mon = _standard_monitors(orbit, StepControl())
            return mon[name]
    else:
        test_fn = test
    ma = float(test_fn(branch.points[which]))
    mb = float(test_fn(branch.points[which + 1]))
    if ma * mb > 0.0:
        raise ValueError(f"monitor does not change sign between points {which} and {which + 1}")
    return refine_between(branch, which, test_fn, tol=tol)


def _tangent_free_component(branch: Branch, system, x, w):
    tang = _tangent(system, x, w)
    return _free_scalar_rate(branch.family, system, x, tang)


def _refine_fold(branch: Branch, i0: int, insert: bool = False) -> OrbitSolution:
    """Refine an interior extremum of the free scalar over points [i0, i0+2]."""
    system, x_a, dirn, length, w = _corrector_path(branch, i0, span=2)

    def monitor(orbit: OrbitSolution) -> float:
        # derivative of the free scalar along the branch tangent at this orbit
        sys_loc = _make_system(branch.family, branch.flavor, system.mesh,
                               branch.base_params, branch.h_pin, orbit)
        x_loc = _reduced_from_orbit(sys_loc, orbit)
        comp, tang = _tangent_free_component(branch, sys_loc, x_loc, w)
        t_dir = float(np.sum(w * tang * dirn))
        if t_dir != 0.0:
            comp = comp * np.sign(t_dir)
        return comp

    return refine_between(branch, i0, monitor, tol=1e-10, span=2, insert=insert)


def fold_points(branch: Branch) -> list[OrbitSolution]:
    """Interior extrema of the free scalar along the branch, refined."""
    if len(branch.points) < 3:
        return []
    v = branch.monitor_array(branch.free_scalar_name)
    out = []
    for i in range(1, len(v) - 1):
        d1, d2 = v[i] - v[i - 1], v[i + 1] - v[i]
        if d1 * d2 < 0.0:
            try:
                out.append(_refine_fold(branch, i - 1))
            except (LostBracket, NoConvergence, SingularJacobian, ValueError):
                continue
    return out
