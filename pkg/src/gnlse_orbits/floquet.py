"""Monodromy matrices, Floquet multipliers and rotation numbers.

The flow is divergence-free, so every periodic orbit carries two trivial
multipliers +1 (flow direction and the energy family) and a nontrivial pair
with product 1.  The nontrivial pair is extracted by projecting the
monodromy onto the orthogonal complement of the flow direction inside the
tangent space of the energy level.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.integrate import solve_ivp

from . import colloc, model
from .colloc import OrbitSolution, _basis

__all__ = [
    "OrbitClass",
    "FloquetData",
    "MonodromyResult",
    "monodromy",
    "interval_transfer_matrices",
    "nontrivial_multipliers",
    "floquet_data",
    "deflated_trace",
    "rotation_number_along",
    "resonance_events",
    "DeflationAmbiguous",
]

ILL_CONDITION_LIMIT = 1e12
PARABOLIC_TOL = 1e-5


class DeflationAmbiguous(RuntimeError):
    """All four multipliers cluster at 1; the nontrivial pair is not separable."""


class OrbitClass(Enum):
    ELLIPTIC = "elliptic"
    HYPERBOLIC_ORIENTABLE = "hyperbolic_orientable"
    HYPERBOLIC_NONORIENTABLE = "hyperbolic_nonorientable"
    PARABOLIC = "parabolic"


@dataclass(frozen=True)
class MonodromyResult:
    matrix: np.ndarray
    method: str
    condition: float
    ill_conditioned: bool


@dataclass(frozen=True)
class FloquetData:
    multipliers: np.ndarray        # all four, from the full 4x4 monodromy
    nontrivial_pair: np.ndarray    # two, from the deflated 2x2 block
    rotation_number: float | None  # alpha in (0, 1/2] when elliptic
    orbit_class: OrbitClass
    trace: float                   # trace of the deflated block
    block_det: float
    ill_conditioned: bool = False


def interval_transfer_matrices(orbit: OrbitSolution) -> np.ndarray:
    """Linearised flow maps across each mesh interval, shape (ntst, 4, 4).

    Derived from the collocation conditions of the converged orbit: the
    interior and right-end values of a linear perturbation are solved in
    terms of the left-end value.
    """
    mesh = orbit.mesh
    m, N = mesh.ncol, mesh.ntst
    _, _, _, L, D, _, _ = _basis(m)
    P = orbit.local_blocks()
    V = np.einsum("il,jid->jld", L, P)
    DF = model.jacobian(V, orbit.params)
    if orbit.eps != 0.0:
        DF = DF + orbit.eps * model.hessian_H(V, orbit.params)
    h = mesh.h
    T = orbit.period
    # K[j, l, i, :, :] = D[i,l] I - h_j T DF_jl L[i,l]
    K = (np.einsum("il,rc->lirc", D, np.eye(4))[None]
         - (h[:, None] * T)[:, :, None, None, None] * np.einsum("il,jlrc->jlirc", L, DF))
    K = K.transpose(0, 1, 3, 2, 4).reshape(N, 4 * m, 4 * (m + 1))
    B = K[:, :, :4]
    S = K[:, :, 4:]
    X = np.linalg.solve(S, -B)          # (N, 4m, 4)
    return X[:, -4:, :]


def monodromy(orbit: OrbitSolution, method: str = "collocation",
              rtol: float = 1e-11, atol: float = 1e-12) -> MonodromyResult:
    """Fundamental solution of the variational equations over one period.

    method='collocation' multiplies the per-interval transfer maps of the
    collocation linearisation; method='variational' integrates the
    variational system with an adaptive high-order scheme sampling the
    orbit interpolant, and serves as the independent oracle.
    """
    if method == "collocation":
        Ms = interval_transfer_matrices(orbit)
        M = np.eye(4)
        for j in range(orbit.mesh.ntst):
            M = Ms[j] @ M
    elif method == "variational":
        p = orbit.params
        T = orbit.period
        eps = orbit.eps

        def rhs(s, v):
            u = colloc.evaluate(orbit, s)
            A = model.jacobian(u, p)
            if eps != 0.0:
                A = A + eps * model.hessian_H(u, p)
            return (T * A @ v.reshape(4, 4)).ravel()

        sol = solve_ivp(rhs, (0.0, 1.0), np.eye(4).ravel(), method="DOP853",
                        rtol=rtol, atol=atol)
        if not sol.success:
            raise RuntimeError(f"variational integration failed: {sol.message}")
        M = sol.y[:, -1].reshape(4, 4)
    else:
        raise ValueError(f"unknown method {method!r}")
    sv = np.linalg.svd(M, compute_uv=False)
    cond = float(sv[0] / sv[-1]) if sv[-1] > 0 else np.inf
    return MonodromyResult(matrix=M, method=method, condition=cond,
                           ill_conditioned=cond > ILL_CONDITION_LIMIT)


def nontrivial_multipliers(M, orbit: OrbitSolution) -> FloquetData:
    """Deflate the trivial unit pair and classify the remaining multipliers.

    The flow direction f(u(0)) and the energy gradient grad H(u(0)) span the
    degenerate eigenspace structure of the trivial pair; the nontrivial
    2x2 block acts on their orthogonal complement within the energy level.
    """
    if isinstance(M, MonodromyResult):
        ill = M.ill_conditioned
        M = M.matrix
    else:
        ill = False
        M = np.asarray(M, float)
    mults = np.linalg.eigvals(M)
    u0 = orbit.u0
    p = orbit.params
    f0 = model.vector_field(u0, p)
    n0 = model.grad_H(u0, p)
    nf, nn = np.linalg.norm(f0), np.linalg.norm(n0)
    scale = 1.0 + float(np.max(np.abs(u0)))
    if nf > 1e-9 * scale and nn > 1e-9 * scale:
        q1 = f0 / nf
        n = n0 / nn
        # orthonormal completion of span{n, q1}
        A = np.column_stack([n, q1])
        _, _, Vt = np.linalg.svd(A.T, full_matrices=True)
        Q = Vt[2:].T                   # 4x2, orthonormal, perp to n and q1
        block = Q.T @ M @ Q
    else:
        # fallback: discard the two eigenvalues closest to 1
        order = np.argsort(np.abs(mults - 1.0))
        pair = mults[order[2:]]
        block = np.array([[np.real(pair[0] + pair[1]), -np.real(pair[0] * pair[1])],
                          [1.0, 0.0]])
    tr = float(np.trace(block))
    det = float(np.linalg.det(block))
    pair = np.linalg.eigvals(block)
    # ambiguous cluster: everything at 1
    if np.all(np.abs(mults - 1.0) < PARABOLIC_TOL):
        return FloquetData(multipliers=mults, nontrivial_pair=pair, rotation_number=None,
                           orbit_class=OrbitClass.PARABOLIC, trace=tr, block_det=det,
                           ill_conditioned=ill)
    xi = pair[np.argmax(pair.imag)]
    if min(abs(xi - 1.0), abs(xi + 1.0)) <= PARABOLIC_TOL:
        cls, alpha = OrbitClass.PARABOLIC, None
    elif abs(pair[0].imag) > 0.0 and abs(tr) < 2.0:
        cls = OrbitClass.ELLIPTIC
        alpha = float(np.angle(xi) / (2.0 * np.pi) % 1.0)
    else:
        real_pair = np.real(pair)
        cls = (OrbitClass.HYPERBOLIC_ORIENTABLE if real_pair[np.argmax(np.abs(real_pair))] > 0
               else OrbitClass.HYPERBOLIC_NONORIENTABLE)
        alpha = None
    return FloquetData(multipliers=mults, nontrivial_pair=pair, rotation_number=alpha,
                       orbit_class=cls, trace=tr, block_det=det, ill_conditioned=ill)


def floquet_data(orbit: OrbitSolution, method: str = "collocation") -> FloquetData:
    return nontrivial_multipliers(monodromy(orbit, method=method), orbit)


def deflated_trace(orbit: OrbitSolution) -> float:
    """Trace of the nontrivial 2x2 block; the resonance test function."""
    return floquet_data(orbit).trace


# ---------------------------------------------------------------------------
# Rotation numbers along branches
# ---------------------------------------------------------------------------

def _unwrap_alpha(alpha_raw: float, prev: float) -> float:
    """Pick the representative of {a, 1-a} closest to the previous value."""
    cands = (alpha_raw, 1.0 - alpha_raw)
    return min(cands, key=lambda a: abs(a - prev))


def _unwrap_sequence(alphas_raw):
    """Momentum-based unwrap of a raw rotation-number sequence.

    The raw value is always folded into (0, 1/2]; the continuous branch is
    recovered by choosing, at each step, the representative of {a, 1-a}
    nearest the linear extrapolation of the two previous values, which
    carries the unwrap monotonically through alpha = 1/2.
    """
    out = []
    for a in alphas_raw:
        if len(out) == 0:
            out.append(a)
        else:
            pred = out[-1] if len(out) == 1 else 2.0 * out[-1] - out[-2]
            out.append(_unwrap_alpha(a, pred))
    return out


def rotation_number_along(branch, max_jump: float = 0.25):
    """Continuously unwrapped rotation numbers along a branch.

    Returns a list of (free_scalar_value, alpha) over the first maximal
    elliptic window; the unwrap carries alpha continuously through 1/2.
    Jumps above ``max_jump`` terminate the window (callers refine with
    resonance_events, which re-solves between bracketing points).
    """
    scalars = branch.monitor_array(branch.free_scalar_name)
    alphas_raw = branch.monitor_array("floquet_alpha")
    idx = [i for i in range(len(alphas_raw)) if not np.isnan(alphas_raw[i])]
    if not idx:
        return []
    unwrapped = _unwrap_sequence([alphas_raw[i] for i in idx])
    out = []
    prev = None
    for i, al in zip(idx, unwrapped):
        if prev is not None and abs(al - prev) > max_jump:
            break
        out.append((float(scalars[i]), float(al)))
        prev = al
    return out


def resonance_events(branch, k_max: int, alpha_tol: float = 1e-8):
    """All crossings alpha = p/k (gcd(p,k)=1, k <= k_max) along a branch.

    Returns a list of (scalar_value, p, k, orbit) refined to alpha_tol in
    the rotation number by re-solving orbits between the bracketing branch
    points.  The 1:2 resonance is a tangential touch of the deflated trace
    at -2 and is located as its interior minimum.
    """
    from math import gcd

    from . import contin

    targets = sorted({(p, k) for k in range(2, k_max + 1) for p in range(1, k) if gcd(p, k) == 1},
                     key=lambda pk: pk[0] / pk[1])
    alphas_raw = branch.monitor_array("floquet_alpha")
    idx_valid = [i for i in range(len(alphas_raw)) if not np.isnan(alphas_raw[i])]
    seq = _unwrap_sequence([alphas_raw[i] for i in idx_valid])
    unwrapped = {}
    prev = None
    for i, al in zip(idx_valid, seq):
        if prev is not None and abs(al - prev) > 0.4:
            break
        unwrapped[i] = al
        prev = al
    events = []
    keys = sorted(unwrapped)
    for p, k in targets:
        tgt = p / k
        for a_i, b_i in zip(keys[:-1], keys[1:]):
            fa, fb = unwrapped[a_i] - tgt, unwrapped[b_i] - tgt
            if fa == 0.0:
                events.append((branch.monitor_array(branch.free_scalar_name)[a_i], p, k,
                               branch.points[a_i]))
            elif fa * fb < 0.0:
                if (p, k) == (1, 2):
                    orbit = contin.refine_extremum(
                        branch, a_i, lambda o: deflated_trace(o), span=b_i - a_i)
                    if abs(deflated_trace(orbit) + 2.0) > 1e-3:
                        continue
                else:
                    near = 0.5 * (unwrapped[a_i] + unwrapped[b_i])

                    def monitor(orbit, near=near, tgt=tgt):
                        fd = floquet_data(orbit)
                        if fd.rotation_number is None:
                            tr = min(max(fd.trace / 2.0, -1.0), 1.0)
                            a_raw = float(np.arccos(tr) / (2.0 * np.pi))
                        else:
                            a_raw = fd.rotation_number
                        return _unwrap_alpha(a_raw, near) - tgt

                    orbit = contin.refine_between(branch, a_i, monitor, tol=alpha_tol,
                                                  span=b_i - a_i, insert=False)
                events.append((_scalar_of(branch, orbit), p, k, orbit))
    events.sort(key=lambda e: e[0])
    return events


def _scalar_of(branch, orbit) -> float:
    if branch.free_scalar_name == "beta2":
        return float(orbit.params.beta2)
    return float(orbit.energy)
