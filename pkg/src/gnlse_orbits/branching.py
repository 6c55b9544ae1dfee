"""Branch switching, k-covers, and two-parameter continuation of
bifurcation points of periodic orbits.

Codimension-one points (symmetry breaking, period doubling, period-k
multiplying, saddle-node) are all defined on top of the orbit BVP by the
single scalar condition

    trace(deflated monodromy block) = 2 cos(2 pi p / k),

so their loci in the (beta2, H)-plane are the trace-defect contours.  The
contours are continued two-level: an inner pinned solve of the reduced
symmetric BVP defines the orbit as a smooth function of (beta2, pin), and
an outer pseudo-arclength loop follows the contour, reporting folds in
beta2 (the degenerate points) and crossings of the zero-energy level (the
induced bifurcations).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from . import colloc, contin, floquet, model
from .colloc import (
    FixEnergy,
    FixPeriod,
    Mesh,
    NoConvergence,
    OrbitSolution,
    SingularJacobian,
    Symmetry,
    SymmetricBVP,
    newton_raw,
    uniform_mesh,
)
from .contin import BifurcationPoint, Branch, FamilyKind, StepControl

__all__ = [
    "BifurcationPoint",
    "BifCurve",
    "k_cover",
    "classify_symmetry",
    "switch_branch_sb",
    "switch_branch_periodk",
    "continue_bif_point",
    "NoBifurcatingSolution",
    "SeedNotOnCurve",
    "WrongMultiplicity",
]

PERTURBATION_LADDER = (1e-4, 3e-4, 1e-3, 3e-3, 1e-2)


class NoBifurcatingSolution(RuntimeError):
    pass


class SeedNotOnCurve(RuntimeError):
    pass


class WrongMultiplicity(Warning):
    pass


def classify_symmetry(orbit: OrbitSolution, tol: float = 1e-8) -> Symmetry:
    """Symmetry class from refined closest approaches to Sigma1 and Sigma2."""
    return colloc.classify_orbit_symmetry(orbit, tol=tol)


def k_cover(orbit: OrbitSolution, k: int) -> OrbitSolution:
    """The same closed curve traversed k times, as a period-kT solution."""
    if k < 2:
        raise ValueError("k must be >= 2")
    mesh = orbit.mesh
    bp = np.concatenate([(mesh.breakpoints[:-1] + j) / k for j in range(k)] + [[1.0]])
    m = mesh.ncol
    n_base = mesh.ntst * m
    cf = np.empty((k * n_base + 1, 4))
    for j in range(k):
        cf[j * n_base:(j + 1) * n_base] = orbit.coeffs[:-1]
    cf[-1] = orbit.coeffs[-1]
    cover_mesh = Mesh(k * mesh.ntst, m, bp)
    return OrbitSolution(mesh=cover_mesh, coeffs=cf, period=k * orbit.period,
                         eps=orbit.eps, params=orbit.params, energy=orbit.energy,
                         symmetry=orbit.symmetry)


# ---------------------------------------------------------------------------
# Branch switching through near-kernel directions of reduced systems
# ---------------------------------------------------------------------------

def _near_kernel(system, x: np.ndarray, n_dirs: int = 2, seed: int = 0):
    """Approximate smallest singular directions of a (near-singular) square
    system Jacobian by inverse iteration."""
    J = system.jacobian(x).tocsc()
    try:
        lu = splu(J)
    except RuntimeError:
        # exactly singular: regularise microscopically
        J = (J + 1e-14 * sp.eye(J.shape[0], format="csc")).tocsc()
        lu = splu(J)
    rng = np.random.default_rng(seed)
    dirs = []
    for _ in range(n_dirs):
        z = rng.standard_normal(system.n_unknowns)
        for _ in range(3):
            for q in dirs:
                z -= (q @ z) * q
            z = lu.solve(z)
            n = np.linalg.norm(z)
            if not np.isfinite(n) or n == 0.0:
                z = rng.standard_normal(system.n_unknowns)
                continue
            z /= n
        for q in dirs:
            z -= (q @ z) * q
        n = np.linalg.norm(z)
        if n > 1e-10:
            dirs.append(z / n)
    return dirs


class _SwitchWorkspace:
    """Square pinned reduced system at parameters slightly off the
    bifurcation, holding the re-converged parent (cover) solution."""

    def __init__(self, parent: OrbitSolution, flavor: str, params: model.Params,
                 pin, ntst_red: int):
        self.mesh = uniform_mesh(ntst_red, parent.mesh.ncol)
        self.system = SymmetricBVP(self.mesh, params, flavor, pins=(pin,))
        x0 = self.system.from_orbit(parent, anchor_t=0.0)
        self.x_parent, _, _ = newton_raw(self.system, x0, tol=1e-10, max_iter=25)
        self.parent_orbit = self.system.to_orbit(self.x_parent)
        self.scale = float(np.max(np.abs(parent.coeffs)))

    def kernel_dirs(self, n_dirs: int = 2, seed: int = 0):
        return _near_kernel(self.system, self.x_parent, n_dirs=n_dirs, seed=seed)

    def correct_from(self, z: np.ndarray, delta: float) -> OrbitSolution:
        x, _, _ = newton_raw(self.system, self.x_parent + delta * self.scale * z,
                             tol=1e-10, max_iter=25)
        return self.system.to_orbit(x)


def _orbit_distance(a: OrbitSolution, b: OrbitSolution, n: int = 256) -> float:
    """Hausdorff-type distance between the orbits' point sets in phase space."""
    ta = np.linspace(0.0, 1.0, n, endpoint=False)
    A = colloc.evaluate(a, ta)
    B = colloc.evaluate(b, ta)
    d2 = np.sum((A[:, None, :] - B[None, :, :]) ** 2, axis=2)
    return float(max(np.sqrt(d2.min(axis=1)).max(), np.sqrt(d2.min(axis=0)).max()))


def _extend_stub(orbit: OrbitSolution, family: FamilyKind, h_pin: float,
                 n_steps: int = 6, direction: int = 1, ds: float = 0.01,
                 flavor: str | None = None) -> Branch:
    ctl = StepControl(ds_init=ds, ds_max=4 * ds, max_steps=n_steps,
                      record_floquet=True, detect_events=False)
    solver = flavor if flavor is not None else "auto"
    return contin.extend_branch(orbit, family, ctl, direction=direction, solver=solver,
                                h_pin=h_pin)


def _switch_hits(parent_cover: OrbitSolution, flavor: str, family: FamilyKind,
                 h_pin: float, offsets, ntst_red: int, seed: int,
                 min_dist: float, hits: list):
    """Collect genuinely new solutions of the pinned system at parameters
    slightly off the bifurcation, on both sides and over the perturbation
    ladder."""
    base = parent_cover.params
    scale = 1.0 + float(np.max(np.abs(parent_cover.coeffs)))
    for off in offsets:
        if family is FamilyKind.BETA2:
            params = base.replace(beta2=base.beta2 + off)
            pin = FixEnergy(h_pin)
        else:
            params = base
            pin = FixEnergy(parent_cover.energy + off)
        try:
            ws = _SwitchWorkspace(parent_cover, flavor, params, pin, ntst_red)
        except (NoConvergence, SingularJacobian):
            continue
        dirs = ws.kernel_dirs(n_dirs=1, seed=seed)
        if not dirs:
            continue
        z = dirs[0]
        n_before = len(hits)
        for delta in PERTURBATION_LADDER:
            for sgn in (1.0, -1.0):
                try:
                    orbit = ws.correct_from(z, sgn * delta)
                except (NoConvergence, SingularJacobian):
                    continue
                if _orbit_distance(orbit, ws.parent_orbit) < min_dist * scale:
                    continue
                if not (0.5 < orbit.period / parent_cover.period < 1.5):
                    continue
                if any(_orbit_distance(orbit, o) < 0.25 * min_dist * scale for o, _ in hits):
                    continue
                hits.append((orbit, flavor))
        if len(hits) > n_before:
            break
    return hits


_DEFAULT_OFFSETS = (-2.5e-4, -1e-3, 2.5e-4, 1e-3)


def switch_branch_sb(sb_point: BifurcationPoint, *, family: FamilyKind = FamilyKind.ENERGY,
                     h_pin: float = 0.0, n_steps: int = 6, seed: int = 0,
                     offsets=_DEFAULT_OFFSETS) -> tuple[Branch, Branch]:
    """The pair of R1-symmetric families bifurcating at a symmetry-breaking
    point of an R*-symmetric orbit; the second branch is the R2-image of the
    first.

    The corrector works on the reduced R1-symmetric BVP pinned slightly off
    the bifurcation, where the broken pair exists at a finite distance from
    the symmetric orbit: for an energy family the offset is in H at fixed
    beta2, for a beta2 family in beta2 at pinned H.
    """
    parent = sb_point.orbit
    hits: list = []
    _switch_hits(parent, "half1", family, h_pin, offsets,
                 ntst_red=max(20, parent.mesh.ntst // 2), seed=seed,
                 min_dist=1e-3, hits=hits)
    for orbit, _ in hits:
        sym = classify_symmetry(orbit)
        if sym is Symmetry.RSTAR:
            continue
        orbit = orbit.with_symmetry(Symmetry.R1_ONLY)
        br = _extend_stub(orbit, family, h_pin, n_steps=n_steps, flavor="half1")
        image0 = colloc.reverse_image(orbit, model.R2_SIGNS)
        br_img = _extend_stub(image0, family, h_pin, n_steps=n_steps, flavor="half1")
        return br, br_img
    raise NoBifurcatingSolution("no symmetry-broken solution found off the SB point")


def switch_branch_periodk(res_point: BifurcationPoint, k: int, p: int, *,
                          family: FamilyKind = FamilyKind.BETA2, h_pin: float = 0.0,
                          n_steps: int = 4, seed: int = 0,
                          offsets=_DEFAULT_OFFSETS) -> list[Branch]:
    """Bifurcating k-loop families at a p:k resonance of an R*-symmetric orbit.

    R*-symmetric k-loop families (period-k multiplying, odd k) live in the
    quarter reduction of the k-cover; symmetry-breaking period-k families
    come as an R1-only pair and an R2-only pair from the half reductions.
    Distinct corrected solutions are deduplicated by phase-space distance
    and returned as short branch stubs, symmetry classified.
    """
    parent = res_point.orbit
    cover = k_cover(parent, k)
    found: list[tuple[OrbitSolution, str]] = []
    flavors = ["quarter", "half1", "half2"] if k % 2 == 1 else ["half1", "half2"]
    for flavor in flavors:
        n_red = max(12, (12 if flavor == "quarter" else 20) * k)
        _switch_hits(cover, flavor, family, h_pin, offsets, ntst_red=n_red,
                     seed=seed, min_dist=5e-4, hits=found)

    if not found:
        raise NoBifurcatingSolution(f"no period-{k} solution found at the {p}:{k} resonance")

    branches = []
    for orbit, flavor in found:
        sym = classify_symmetry(orbit)
        orbit = orbit.with_symmetry(sym)
        try:
            br = _extend_stub(orbit, family, h_pin, n_steps=n_steps, flavor=flavor)
        except (contin.ImmediateFailure, NoConvergence, SingularJacobian):
            continue
        br.flags += (f"resonance-{p}:{k}",)
        branches.append(br)
    return branches


# ---------------------------------------------------------------------------
# Two-parameter continuation of codim-1 loci
# ---------------------------------------------------------------------------

@dataclass
class BifCurve:
    kind: str
    k: int
    p: int
    points: list = field(default_factory=list)          # BifurcationPoint per accepted step
    folds: list = field(default_factory=list)           # degenerate points (fold in beta2)
    zero_crossings: list = field(default_factory=list)  # BifurcationPoint at H = 0
    flags: tuple = ()

    def table(self) -> np.ndarray:
        return np.array([[q.beta2, q.energy] for q in self.points])


_DEGENERATE_KIND = {
    "SB": "CSB", "PD": "CPD", "SN": "CSN",
}


def _degenerate_kind(kind: str) -> str:
    if kind in _DEGENERATE_KIND:
        return _DEGENERATE_KIND[kind]
    return "C" + kind


class _InnerSolver:
    """Pinned reduced solve orbit(beta2, q) with warm starts."""

    def __init__(self, seed_orbit: OrbitSolution, flavor: str, pin_kind: str,
                 ntst_red: int | None = None):
        frac = SymmetricBVP.FRACTIONS[flavor]
        if ntst_red is None:
            ntst_red = max(20, int(round(seed_orbit.mesh.ntst * frac)))
        self.mesh = uniform_mesh(ntst_red, seed_orbit.mesh.ncol)
        self.flavor = flavor
        self.pin_kind = pin_kind
        self.base_params = seed_orbit.params
        sys0 = SymmetricBVP(self.mesh, seed_orbit.params, flavor)
        self.x = sys0.from_orbit(seed_orbit, anchor_t=0.0)
        self.n_coeff = sys0.n_coeff

    def pin_value(self, orbit: OrbitSolution) -> float:
        return orbit.period if self.pin_kind == "T" else orbit.energy

    def solve(self, beta2: float, q: float) -> OrbitSolution:
        params = self.base_params.replace(beta2=beta2)
        pin = FixPeriod(q) if self.pin_kind == "T" else FixEnergy(q)
        system = SymmetricBVP(self.mesh, params, self.flavor, pins=(pin,))
        x, _, _ = newton_raw(system, self.x, tol=1e-10, max_iter=20)
        self.x = x
        return system.to_orbit(x)


def continue_bif_point(seed: BifurcationPoint, window: tuple[float, float], *,
                       target_trace: float | None = None, pin_kind: str = "H",
                       ds: float = 0.02, ds_min: float = 1e-6, ds_max: float = 0.1,
                       max_steps: int = 400, h_stop: tuple = (-0.25, 1.5),
                       scale_beta2: float = 200.0, scale_q: float = 5.0,
                       g_tol: float = 1e-8) -> BifCurve:
    """Trace the locus of a codim-1 bifurcation in the (beta2, H)-plane.

    The defining system is the reduced orbit BVP plus the trace condition
    trace = 2 cos(2 pi p/k); the curve is parameterised by pseudo-arclength
    in (beta2, pin) with finite-difference gradients of the trace defect.
    Folds in beta2 are reported as the degenerate points; crossings of
    H = 0 as the induced zero-energy bifurcations.
    """
    if target_trace is None:
        if seed.k is None or seed.p is None:
            raise SeedNotOnCurve("seed carries no resonance data and no target trace")
        target_trace = 2.0 * math.cos(2.0 * math.pi * seed.p / seed.k)
    kind = seed.kind
    k = seed.k if seed.k is not None else 1
    p = seed.p if seed.p is not None else 0

    inner = _InnerSolver(seed.orbit, "quarter", pin_kind)
    q0 = inner.pin_value(seed.orbit)
    b0 = seed.orbit.params.beta2

    wb, wq = scale_beta2, scale_q

    cache: dict[tuple[float, float], tuple[float, OrbitSolution]] = {}

    def G(b2: float, q: float):
        key = (round(b2, 14), round(q, 14))
        if key not in cache:
            orbit = inner.solve(b2, q)
            tr = floquet.deflated_trace(orbit)
            cache[key] = (tr - target_trace, orbit)
            if len(cache) > 40:
                cache.pop(next(iter(cache)))
        return cache[key]

    g0, orb0 = G(b0, q0)
    if abs(g0) > 1e-5:
        raise SeedNotOnCurve(f"trace defect {g0:.3e} at the seed")

    def grad(b2, q, g_here):
        db = 2e-7 * max(1.0, abs(b2))
        dq = 2e-6 * max(1.0, abs(q))
        gb = (G(b2 + db, q)[0] - g_here) / db
        gq = (G(b2, q + dq)[0] - g_here) / dq
        return np.array([gb, gq])

    def correct(z_pred, normal):
        # scalar Newton along the normal direction in scaled coordinates
        t = 0.0
        b2, q = z_pred
        g_here, orbit = G(b2, q)
        for _ in range(12):
            if abs(g_here) <= g_tol:
                return np.array([b2, q]), orbit
            gr = grad(b2, q, g_here)
            slope = gr[0] * normal[0] / wb + gr[1] * normal[1] / wq
            if slope == 0.0:
                break
            dt = -g_here / slope
            t += dt
            b2 = z_pred[0] + t * normal[0] / wb
            q = z_pred[1] + t * normal[1] / wq
            g_here, orbit = G(b2, q)
        raise NoConvergence(12, abs(g_here), "(bif-curve corrector)")

    curve = BifCurve(kind=kind, k=k, p=p)

    def record(orbit, fd=None):
        if fd is None:
            fd = floquet.floquet_data(orbit)
        bp = BifurcationPoint(kind=kind, beta2=orbit.params.beta2, energy=orbit.energy,
                              orbit=orbit, floquet=fd, k=k, p=p)
        curve.points.append(bp)
        return bp

    record(orb0)

    gr0 = grad(b0, q0, g0)
    n0 = np.array([gr0[0] / wb, gr0[1] / wq])
    t0 = np.array([-n0[1], n0[0]])
    t0 /= np.linalg.norm(t0)

    for direction in (1.0, -1.0):
        z = np.array([b0, q0])
        tang = direction * t0
        step = ds
        for _ in range(max_steps):
            z_pred = z + step * np.array([tang[0] / wb, tang[1] / wq])
            normal = np.array([-tang[1], tang[0]])
            try:
                z_new, orbit = correct(z_pred, normal)
            except (NoConvergence, SingularJacobian):
                step *= 0.5
                if step < ds_min:
                    curve.flags += ("stalled",)
                    break
                continue
            record(orbit)
            dz = np.array([(z_new[0] - z[0]) * wb, (z_new[1] - z[1]) * wq])
            nrm = np.linalg.norm(dz)
            if nrm > 0:
                tang = dz / nrm
            z = z_new
            step = min(step * 1.3, ds_max)
            if not (window[0] <= z[0] <= window[1]):
                break
            if not (h_stop[0] <= orbit.energy <= h_stop[1]):
                break
    _postprocess_curve(curve, inner, G)
    return curve


class _PinnedTraceRoot:
    """Solve the trace condition for beta2 at a pinned q, warm-started."""

    def __init__(self, G, curve: BifCurve, pin_kind: str):
        self.G = G
        self.curve = curve
        self.pin_kind = pin_kind

    def _q_of(self, bp: BifurcationPoint) -> float:
        return bp.orbit.period if self.pin_kind == "T" else bp.energy

    def solve(self, q: float) -> OrbitSolution:
        pts = self.curve.points
        b2 = min(pts, key=lambda bp: abs(self._q_of(bp) - q)).beta2
        g, orbit = self.G(b2, q)
        for _ in range(40):
            if abs(g) <= 1e-10:
                return orbit
            db = 2e-7 * max(1.0, abs(b2))
            gp = (self.G(b2 + db, q)[0] - g) / db
            if gp == 0.0:
                break
            step = -g / gp
            b2 = b2 + step
            g, orbit = self.G(b2, q)
        if abs(g) > 1e-8:
            raise NoConvergence(40, abs(g), "(pinned trace root)")
        return orbit


def _postprocess_curve(curve: BifCurve, inner: _InnerSolver, G):
    """Refine folds in beta2 and zero-energy crossings along the curve."""
    from scipy.optimize import brentq, minimize_scalar

    pts = curve.points
    if len(pts) < 3:
        return
    rooter = _PinnedTraceRoot(G, curve, inner.pin_kind)
    qs = np.array([rooter._q_of(bp) for bp in pts])
    order = np.argsort(qs)
    q_sorted = qs[order]
    b2_sorted = np.array([pts[i].beta2 for i in order])
    h_sorted = np.array([pts[i].energy for i in order])

    def point_from(orbit, kind):
        fd = floquet.floquet_data(orbit)
        return BifurcationPoint(kind=kind, beta2=orbit.params.beta2, energy=orbit.energy,
                                orbit=orbit, floquet=fd, k=curve.k, p=curve.p)

    # folds: interior extrema of beta2 as a function of the pin
    for j in range(1, len(order) - 1):
        d1 = b2_sorted[j] - b2_sorted[j - 1]
        d2 = b2_sorted[j + 1] - b2_sorted[j]
        if d1 * d2 < 0.0:
            sign = 1.0 if d1 < 0.0 else -1.0  # minimise or maximise beta2
            try:
                r = minimize_scalar(
                    lambda q: sign * rooter.solve(q).params.beta2,
                    bounds=(q_sorted[j - 1], q_sorted[j + 1]), method="bounded",
                    options={"xatol": 1e-11})
                orbit = rooter.solve(float(r.x))
            except (NoConvergence, SingularJacobian):
                continue
            curve.folds.append(point_from(orbit, _degenerate_kind(curve.kind)))

    # zero-energy crossings
    for j in range(len(order) - 1):
        ha, hb = h_sorted[j], h_sorted[j + 1]
        if ha == 0.0 or ha * hb >= 0.0:
            continue
        try:
            if inner.pin_kind == "H":
                orbit = rooter.solve(0.0)
            else:
                q_root = brentq(lambda q: rooter.solve(q).energy,
                                q_sorted[j], q_sorted[j + 1], xtol=1e-12)
                orbit = rooter.solve(float(q_root))
        except (NoConvergence, SingularJacobian, ValueError):
            continue
        bp = point_from(orbit, curve.kind)
        if not any(abs(bp.beta2 - z.beta2) < 1e-9 for z in curve.zero_crossings):
            curve.zero_crossings.append(bp)
