"""Vector field, conserved energy and linear structure of the traveling-wave ODE.

The fourth-order equation for the pulse profile u(t) of the quartic-dispersion
generalised NLS is written as a first-order system for
u = (u1, u2, u3, u4) = (u, u', u'', u'''):

    u1' = u2
    u2' = u3
    u3' = u4
    u4' = (24/beta4) * (beta2/2 * u3 + mu*u1 - gamma*u1**3)

with conserved energy

    H(u) = u2*u4 - u3**2/2 - (6*beta2*u2**2 - 6*gamma*u1**4 + 12*mu*u1**2)/beta4.

All point operations are vectorised over leading axes: states may be passed
as arrays of shape (4,) or (..., 4).
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

__all__ = [
    "Params",
    "SpectrumKind",
    "SpectrumClass",
    "vector_field",
    "hamiltonian",
    "grad_H",
    "jacobian",
    "hessian_H",
    "dfield_dbeta2",
    "dgradH_dbeta2",
    "dH_dbeta2",
    "apply_R1",
    "apply_R2",
    "R1_SIGNS",
    "R2_SIGNS",
    "equilibria",
    "classify_origin",
    "origin_eigenvalues",
]


@dataclass(frozen=True)
class Params:
    """System parameters; beta4, gamma, mu default to the fixed values -1, 1, 1."""

    beta2: float
    beta4: float = -1.0
    gamma: float = 1.0
    mu: float = 1.0

    def __post_init__(self):
        if self.beta4 == 0.0:
            raise ValueError("beta4 must be nonzero")
        if self.gamma <= 0.0:
            raise ValueError("gamma must be positive")

    def replace(self, **kw) -> "Params":
        d = dict(beta2=self.beta2, beta4=self.beta4, gamma=self.gamma, mu=self.mu)
        d.update(kw)
        return Params(**d)


# Sign patterns of the two linear reversibilities.
R1_SIGNS = np.array([1.0, -1.0, 1.0, -1.0])
R2_SIGNS = np.array([-1.0, 1.0, -1.0, 1.0])


def apply_R1(u):
    """Reversibility R1: (u1, u2, u3, u4) -> (u1, -u2, u3, -u4)."""
    return np.asarray(u, dtype=float) * R1_SIGNS


def apply_R2(u):
    """Reversibility R2: (u1, u2, u3, u4) -> (-u1, u2, -u3, u4)."""
    return np.asarray(u, dtype=float) * R2_SIGNS


def vector_field(u, p: Params):
    """Right-hand side f(u); shape-preserving over leading axes."""
    u = np.asarray(u, dtype=float)
    out = np.empty_like(u)
    u1 = u[..., 0]
    out[..., 0] = u[..., 1]
    out[..., 1] = u[..., 2]
    out[..., 2] = u[..., 3]
    out[..., 3] = (24.0 / p.beta4) * (0.5 * p.beta2 * u[..., 2] + p.mu * u1 - p.gamma * u1**3)
    return out


def hamiltonian(u, p: Params):
    """Conserved energy H(u)."""
    u = np.asarray(u, dtype=float)
    u1, u2, u3, u4 = u[..., 0], u[..., 1], u[..., 2], u[..., 3]
    return u2 * u4 - 0.5 * u3**2 - (6.0 * p.beta2 * u2**2 - 6.0 * p.gamma * u1**4 + 12.0 * p.mu * u1**2) / p.beta4


def grad_H(u, p: Params):
    """Analytic gradient of the energy."""
    u = np.asarray(u, dtype=float)
    out = np.empty_like(u)
    u1 = u[..., 0]
    out[..., 0] = (24.0 * p.gamma * u1**3 - 24.0 * p.mu * u1) / p.beta4
    out[..., 1] = u[..., 3] - 12.0 * p.beta2 * u[..., 1] / p.beta4
    out[..., 2] = -u[..., 2]
    out[..., 3] = u[..., 1]
    return out


def jacobian(u, p: Params):
    """Derivative Df(u); returns shape (..., 4, 4)."""
    u = np.asarray(u, dtype=float)
    out = np.zeros(u.shape[:-1] + (4, 4), dtype=float)
    out[..., 0, 1] = 1.0
    out[..., 1, 2] = 1.0
    out[..., 2, 3] = 1.0
    out[..., 3, 0] = (24.0 / p.beta4) * (p.mu - 3.0 * p.gamma * u[..., 0] ** 2)
    out[..., 3, 2] = 12.0 * p.beta2 / p.beta4
    return out


def hessian_H(u, p: Params):
    """Second derivative of H; returns shape (..., 4, 4)."""
    u = np.asarray(u, dtype=float)
    out = np.zeros(u.shape[:-1] + (4, 4), dtype=float)
    out[..., 0, 0] = (72.0 * p.gamma * u[..., 0] ** 2 - 24.0 * p.mu) / p.beta4
    out[..., 1, 1] = -12.0 * p.beta2 / p.beta4
    out[..., 2, 2] = -1.0
    out[..., 1, 3] = 1.0
    out[..., 3, 1] = 1.0
    return out


def dfield_dbeta2(u, p: Params):
    """Partial derivative of f with respect to beta2."""
    u = np.asarray(u, dtype=float)
    out = np.zeros_like(u)
    out[..., 3] = (12.0 / p.beta4) * u[..., 2]
    return out


def dgradH_dbeta2(u, p: Params):
    """Partial derivative of grad H with respect to beta2."""
    u = np.asarray(u, dtype=float)
    out = np.zeros_like(u)
    out[..., 1] = -12.0 * u[..., 1] / p.beta4
    return out


def dH_dbeta2(u, p: Params):
    """Partial derivative of H with respect to beta2."""
    u = np.asarray(u, dtype=float)
    return -6.0 * u[..., 1] ** 2 / p.beta4


def equilibria(p: Params) -> list[np.ndarray]:
    """All equilibria: the origin, plus (+-sqrt(mu/gamma), 0, 0, 0) when mu/gamma > 0."""
    eqs = [np.zeros(4)]
    ratio = p.mu / p.gamma
    if ratio > 0.0:
        r = np.sqrt(ratio)
        eqs.append(np.array([r, 0.0, 0.0, 0.0]))
        eqs.append(np.array([-r, 0.0, 0.0, 0.0]))
    return eqs


class SpectrumKind(Enum):
    REAL_QUADRUPLE = "real_quadruple"          # region I
    COMPLEX_QUADRUPLE = "complex_quadruple"    # region II
    IMAGINARY_QUADRUPLE = "imaginary_quadruple"  # HH boundary / region III
    DOUBLE_REAL_PAIR = "double_real_pair"      # BD boundary


@dataclass(frozen=True)
class SpectrumClass:
    kind: SpectrumKind
    eigenvalues: np.ndarray  # 4 complex values, closed under negation and conjugation


def origin_eigenvalues(p: Params) -> np.ndarray:
    """Eigenvalues at the origin via the quadratic in z = lambda^2.

    The characteristic polynomial is lambda^4 - (12 beta2/beta4) lambda^2
    - 24 mu/beta4 = 0, solved through its z-roots to avoid spurious
    imaginary parts near the spectrum-transition boundaries.
    """
    b = 12.0 * p.beta2 / p.beta4
    c = -24.0 * p.mu / p.beta4
    disc = complex(b * b - 4.0 * c)
    sq = np.sqrt(disc)
    z1 = (b + sq) / 2.0
    z2 = (b - sq) / 2.0
    lams = []
    for z in (z1, z2):
        lam = np.sqrt(complex(z))
        lams.extend([lam, -lam])
    return np.array(lams, dtype=complex)


def _chop(x: complex, scale: float, tol: float = 1e-9) -> complex:
    re = 0.0 if abs(x.real) <= tol * scale else x.real
    im = 0.0 if abs(x.imag) <= tol * scale else x.imag
    return complex(re, im)


def classify_origin(p: Params, tol: float = 1e-9) -> SpectrumClass:
    """Classify the origin's eigenvalue configuration.

    Components of an eigenvalue below tol*(1+|lambda|) are treated as zero,
    which makes the classification exact on the boundary semi-parabolas
    mu = -(3/2) beta2^2 / beta4.
    """
    lams = origin_eigenvalues(p)
    scale = 1.0 + float(np.max(np.abs(lams)))
    chopped = np.array([_chop(l, scale, tol) for l in lams])
    n_real = sum(1 for l in chopped if l.imag == 0.0 and l.real != 0.0)
    n_imag = sum(1 for l in chopped if l.real == 0.0 and l.imag != 0.0)
    if any(l == 0 for l in chopped):
        raise ValueError(f"origin has a zero eigenvalue at {p}; outside the classification taxonomy")
    if n_real == 4:
        uniq = len({round(l.real / (tol * scale)) for l in chopped})
        if uniq <= 2:
            kind = SpectrumKind.DOUBLE_REAL_PAIR
        else:
            kind = SpectrumKind.REAL_QUADRUPLE
    elif n_imag == 4:
        kind = SpectrumKind.IMAGINARY_QUADRUPLE
    elif n_real == 0 and n_imag == 0:
        kind = SpectrumKind.COMPLEX_QUADRUPLE
    else:
        raise ValueError(
            f"origin spectrum at {p} mixes a real and an imaginary pair (saddle-center); "
            "outside the classification taxonomy"
        )
    return SpectrumClass(kind=kind, eigenvalues=lams)
