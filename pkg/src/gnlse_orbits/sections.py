"""Intersection sets of orbits and orbit families with the section u2 = 0.

Crossings are classified through the derivative chain of u2 along the flow:
u2' = u3, u2'' = u4 and u2''' is the cubic component of the vector field.
A quadratic tangency (u2 = u3 = 0, u4 != 0) is generic off the reversibility
section Sigma1; a cubic tangency (u2 = u3 = u4 = 0) forces the contact point
onto Sigma1.  Chains of intersection points are tracked along one-parameter
orbit families and split where tangencies change the crossing count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy.optimize import brentq, minimize_scalar

from . import model
from .colloc import OrbitSolution, evaluate

__all__ = [
    "Contact",
    "SigmaPoint",
    "IntersectionSet",
    "sigma_intersections",
    "count_loops",
    "family_intersection_set",
    "DegenerateProjection",
]


class DegenerateProjection(RuntimeError):
    """The (u1,u2) projection passes through the origin; winding undefined."""


class Contact(Enum):
    TRANSVERSAL = "transversal"
    QUADRATIC_TANGENCY = "quadratic_tangency"
    CUBIC_TANGENCY = "cubic_tangency"


@dataclass(frozen=True)
class SigmaPoint:
    t: float                  # orbit phase in [0,1)
    state: np.ndarray
    contact: Contact
    on_sigma1: bool
    energy: float


TANGENCY_TOL = 1e-6          # |u3| <= tol*(1+|u|) declares tangency candidacy
SIGMA1_TOL = 1e-8


def _u2(orbit: OrbitSolution, t: float) -> float:
    return float(evaluate(orbit, t)[1])


def sigma_intersections(orbit: OrbitSolution, n_scan: int | None = None) -> list[SigmaPoint]:
    """All contact points of the orbit with {u2 = 0} over one period.

    Transversal crossings come from sign changes of u2; tangencies from
    near-zero extrema of u2.  Crossing pairs inside the parabolic window of
    a quadratic tangency are absorbed into the tangency point.
    """
    n = n_scan if n_scan is not None else max(8 * orbit.mesh.ntst, 800)
    ts = np.linspace(0.0, 1.0, n, endpoint=False)
    U = evaluate(orbit, ts)
    scale = 1.0 + float(np.max(np.abs(U)))
    u2 = U[:, 1]
    T = orbit.period
    tiny = 1e-13 * scale

    # sign-change roots of u2 (values below rounding noise count as zeros)
    roots = []
    tt = np.append(ts, 1.0)
    vv = np.append(u2, float(evaluate(orbit, 1.0)[1]))
    zero = np.abs(vv) <= tiny
    for i in range(n):
        if zero[i]:
            if not (i > 0 and zero[i - 1]):
                roots.append(float(tt[i]))
        elif not zero[i + 1] and vv[i] * vv[i + 1] < 0.0:
            roots.append(float(brentq(lambda t: _u2(orbit, t), tt[i], tt[i + 1],
                                      xtol=1e-15, rtol=8.9e-16)))
    # merge exact duplicates across the periodic wrap
    roots = sorted(r % 1.0 for r in roots)
    merged = []
    for r in roots:
        if merged and min(abs(r - merged[-1]), 1.0 - abs(r - merged[-1])) < 1e-9:
            continue
        merged.append(r)
    if len(merged) > 1 and min(abs(merged[0] - merged[-1]),
                               1.0 - abs(merged[0] - merged[-1])) < 1e-9:
        merged.pop()
    roots = merged

    # extrema of u2 (roots of u3) touching the section within tolerance
    u3 = U[:, 2]
    w3 = np.append(u3, float(evaluate(orbit, 1.0)[2]))
    tangencies = []
    for i in range(n):
        if w3[i] * w3[i + 1] < 0.0 or (w3[i] == 0.0 and w3[i + 1] != 0.0):
            t_star = float(brentq(lambda t: float(evaluate(orbit, t)[2]), tt[i], tt[i + 1],
                                  xtol=1e-15, rtol=8.9e-16)) if w3[i] != 0.0 else float(tt[i])
            u_star = evaluate(orbit, t_star)
            if abs(u_star[1]) <= TANGENCY_TOL * scale:
                if not any(min(abs(t_star - t0), 1.0 - abs(t_star - t0)) < 1e-9
                           for t0, _ in tangencies):
                    tangencies.append((t_star, u_star))

    def classify_tangent(u_star):
        third = model.vector_field(u_star, orbit.params)[3]
        if abs(u_star[3]) > TANGENCY_TOL * scale:
            width = 2.0 * math.sqrt(2.0 * TANGENCY_TOL * scale / (T * T * abs(u_star[3])))
            return Contact.QUADRATIC_TANGENCY, width
        if abs(third) > TANGENCY_TOL * scale:
            width = 2.0 * (6.0 * TANGENCY_TOL * scale / (T**3 * abs(third))) ** (1.0 / 3.0)
            return Contact.CUBIC_TANGENCY, width
        return Contact.CUBIC_TANGENCY, 4.0 / n

    def make_point(t_pt, u_pt, contact):
        st = np.array(u_pt, dtype=float)
        st[1] = 0.0
        if contact is not Contact.TRANSVERSAL:
            st[2] = 0.0
        if contact is Contact.CUBIC_TANGENCY:
            st[3] = 0.0
        return SigmaPoint(
            t=t_pt % 1.0, state=st, contact=contact,
            on_sigma1=bool(abs(st[3]) <= SIGMA1_TOL * scale),
            energy=float(model.hamiltonian(st, orbit.params)))

    points: list[SigmaPoint] = []
    absorbed = np.zeros(len(roots), dtype=bool)
    for t_star, u_star in tangencies:
        contact, width = classify_tangent(u_star)
        for k, rt in enumerate(roots):
            if min(abs(rt - t_star), 1.0 - abs(rt - t_star)) <= width:
                absorbed[k] = True
        points.append(make_point(t_star, u_star, contact))

    for k, rt in enumerate(roots):
        if absorbed[k]:
            continue
        st = evaluate(orbit, rt)
        if abs(st[2]) <= TANGENCY_TOL * scale:
            # a crossing with u3 ~ 0: tangency-grade contact hit exactly
            contact, _ = classify_tangent(st)
            points.append(make_point(rt, st, contact))
        else:
            points.append(make_point(rt, st, Contact.TRANSVERSAL))
    points.sort(key=lambda q: q.t)
    return points


def count_loops(orbit: OrbitSolution, n_scan: int | None = None) -> int:
    """Winding number of the (u1, u2) projection around the origin."""
    n = n_scan if n_scan is not None else max(16 * orbit.mesh.ntst, 2000)
    ts = np.linspace(0.0, 1.0, n + 1)
    U = evaluate(orbit, ts)
    r = np.hypot(U[:, 0], U[:, 1])
    scale = 1.0 + float(np.max(np.abs(U)))
    if np.min(r) < 1e-8 * scale:
        raise DegenerateProjection(f"projection passes within {np.min(r):.2e} of the origin")
    ang = np.unwrap(np.arctan2(U[:, 1], U[:, 0]))
    total = (ang[-1] - ang[0]) / (2.0 * np.pi)
    k = int(round(abs(total)))
    if abs(abs(total) - k) > 0.1:
        if n < 64 * orbit.mesh.ntst:
            return count_loops(orbit, n_scan=4 * n)
        raise DegenerateProjection(f"winding {total} too far from an integer")
    return k


# ---------------------------------------------------------------------------
# Family chains
# ---------------------------------------------------------------------------

@dataclass
class IntersectionSet:
    """One continuously tracked chain of section points along a family."""

    label: str
    points: list = field(default_factory=list)         # (u1, u4, H) triples
    member_index: list = field(default_factory=list)   # branch point index per row
    tangency_events: list = field(default_factory=list)  # (arclength, SigmaPoint)
    ambiguous: bool = False

    def as_array(self) -> np.ndarray:
        return np.asarray(self.points, dtype=float)


def _chain_distance(prev, q: SigmaPoint) -> float:
    du1 = prev[0] - q.state[0]
    du4 = prev[1] - q.state[3]
    dt = abs(prev[2] - q.t)
    dt = min(dt, 1.0 - dt)
    return math.hypot(math.hypot(du1, du4), 0.5 * dt)


def family_intersection_set(branch, label: str = "S", max_members: int | None = None,
                            n_scan: int | None = None) -> list[IntersectionSet]:
    """Track the section points of every family member into labelled chains.

    Chains are matched between consecutive members by nearest neighbour in
    (u1, u4, t); new chains open when tangencies change the crossing count.
    Chains born at the same event are enumerated in birth order, ordered by
    u4 at birth.
    """
    chains: list[IntersectionSet] = []
    alive: list[IntersectionSet] = []
    last_pts: dict[int, tuple] = {}
    points_list = branch.points if max_members is None else branch.points[:max_members]
    n_label = 0

    for idx, orbit in enumerate(points_list):
        spts = sigma_intersections(orbit, n_scan=n_scan)
        arclength = branch.arclengths[idx] if idx < len(branch.arclengths) else float(idx)
        tang = [q for q in spts if q.contact is not Contact.TRANSVERSAL]
        if not alive:
            for q in sorted(spts, key=lambda q: (q.state[0], q.state[3])):
                cs = IntersectionSet(label=f"{label}:{n_label}")
                n_label += 1
                cs.points.append((q.state[0], q.state[3], q.energy))
                cs.member_index.append(idx)
                chains.append(cs)
                alive.append(cs)
                last_pts[id(cs)] = (q.state[0], q.state[3], q.t)
            continue
        # greedy nearest-neighbour matching
        unmatched = list(spts)
        assignments = []
        for cs in alive:
            prev = last_pts[id(cs)]
            if not unmatched:
                assignments.append((cs, None, np.inf, np.inf))
                continue
            dists = [_chain_distance(prev, q) for q in unmatched]
            order = np.argsort(dists)
            best = unmatched[order[0]]
            second = dists[order[1]] if len(order) > 1 else np.inf
            assignments.append((cs, best, dists[order[0]], second))
            unmatched.remove(best)
        n_prev = len(alive)
        for cs, q, d, second in assignments:
            if q is None:
                alive = [c for c in alive if c is not cs]
                continue
            if second < 2.0 * d:
                cs.ambiguous = True
            cs.points.append((q.state[0], q.state[3], q.energy))
            cs.member_index.append(idx)
            last_pts[id(cs)] = (q.state[0], q.state[3], q.t)
        if unmatched:
            event_pt = tang[0] if tang else unmatched[0]
            for q in sorted(unmatched, key=lambda q: (q.state[3], q.state[0])):
                cs = IntersectionSet(label=f"{label}:{n_label}")
                n_label += 1
                cs.tangency_events.append((arclength, event_pt))
                cs.points.append((q.state[0], q.state[3], q.energy))
                cs.member_index.append(idx)
                chains.append(cs)
                alive.append(cs)
                last_pts[id(cs)] = (q.state[0], q.state[3], q.t)
        if len(spts) != n_prev and tang:
            for cs in alive:
                if not any(abs(ev[0] - arclength) < 1e-12 for ev in cs.tangency_events):
                    cs.tangency_events.append((arclength, tang[0]))
    return chains
