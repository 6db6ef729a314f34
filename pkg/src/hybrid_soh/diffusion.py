"""Linear subsystems of the reduced-order cell: solid and electrolyte diffusion.

Solid diffusion in a sphere of radius R with outward molar surface flux j:

    C_surf(s) / J(s) = (R / D) * tanh(b) / (tanh(b) - b),   b = R sqrt(s / D)

The pole at s = 0 is the bulk integrator dc_bulk/dt = -3 j / R; what remains is
an analytic function of x = R^2 s / D, approximated here by its [2/3] Pade
approximant.  The approximant has three real negative poles, so the
realization is diagonal (modal) and its zero-order-hold discretization is
closed form.
"""

from __future__ import annotations

from fractions import Fraction

import numpy as np
from scipy.linalg import expm

from .params import FARADAY

BRUGGEMAN = 1.5

# Taylor coefficients of tanh(b)/b in powers of x = b^2.
_TANH_SERIES = (
    Fraction(1), Fraction(-1, 3), Fraction(2, 15), Fraction(-17, 315),
    Fraction(62, 2835), Fraction(-1382, 155925), Fraction(21844, 6081075),
    Fraction(-929569, 638512875),
)


def remainder_series(order: int = 6) -> list[Fraction]:
    """Power series (in x) of tanh(b)/(tanh(b) - b) + 3/x."""
    num = list(_TANH_SERIES)
    den = [_TANH_SERIES[k + 1] for k in range(len(_TANH_SERIES) - 1)]
    top = [num[k] + 3 * den[k] for k in range(len(den))]
    assert top[0] == 0
    top = top[1:]
    q: list[Fraction] = []
    for k in range(min(order, len(top))):
        q.append((top[k] - sum(q[j] * den[k - j] for j in range(k))) / den[0])
    return q


def pade_coefficients() -> tuple[list[Fraction], list[Fraction]]:
    """[2/3] Pade approximant of the remainder: (numerator, denominator), ascending powers."""
    c = remainder_series(6)
    # denominator d1..d3 from sum_j d_j c_{k-j} = 0 for k = 3, 4, 5 (d0 = 1),
    # solved exactly in rationals by Cramer's rule
    m = [[c[k - j] for j in (1, 2, 3)] for k in (3, 4, 5)]
    rhs = [-c[k] for k in (3, 4, 5)]

    def det3(mm):
        return (
            mm[0][0] * (mm[1][1] * mm[2][2] - mm[1][2] * mm[2][1])
            - mm[0][1] * (mm[1][0] * mm[2][2] - mm[1][2] * mm[2][0])
            + mm[0][2] * (mm[1][0] * mm[2][1] - mm[1][1] * mm[2][0])
        )

    dm = det3(m)
    assert dm != 0
    d = [Fraction(1)]
    for col in range(3):
        mc = [row[:] for row in m]
        for r in range(3):
            mc[r][col] = rhs[r]
        d.append(det3(mc) / dm)
    n = [sum(d[j] * c[k - j] for j in range(k + 1)) for k in range(3)]
    return n, d


_PADE_NUM, _PADE_DEN = pade_coefficients()


def pade_modes() -> tuple[np.ndarray, np.ndarray]:
    """Poles p_i and residues r_i with N(x)/D(x) = sum_i r_i / (x - p_i)."""
    num = np.array([float(v) for v in _PADE_NUM])
    den = np.array([float(v) for v in _PADE_DEN])
    poles = np.roots(den[::-1])
    if np.any(np.abs(poles.imag) > 1e-9) or np.any(poles.real >= 0):
        raise RuntimeError("Pade approximant is not a stable real-pole system")
    poles = np.sort(poles.real)[::-1]
    dden = np.polyder(den[::-1])
    residues = np.polyval(num[::-1], poles) / np.polyval(dden, poles)
    return poles, residues


PADE_POLES, PADE_RESIDUES = pade_modes()


def pade_transfer(s, radius: float, diffusivity: float):
    """Surface-minus-bulk transfer function of the Pade model, for checking."""
    x = np.asarray(s) * radius**2 / diffusivity
    num = sum(float(c) * x**k for k, c in enumerate(_PADE_NUM))
    den = sum(float(c) * x**k for k, c in enumerate(_PADE_DEN))
    return radius / diffusivity * num / den


def exact_transfer(s, radius: float, diffusivity: float):
    """Exact surface-minus-bulk transfer function of spherical diffusion."""
    b = radius * np.sqrt(np.asarray(s, dtype=complex) / diffusivity)
    g = np.tanh(b) / (np.tanh(b) - b) + 3.0 / b**2
    return radius / diffusivity * g


def pade_solid_discrete(radius: float, diffusivity: float, gain: float, dt: float):
    """Discrete Pade solid model driven by current.

    State ``[c_bulk, z1, z2, z3]``; ``gain`` converts amps to outward molar flux
    (mol m^-2 s^-1).  Returns ``(Ad, bd, c_surf_row, c_bulk_row)``.
    """
    tau = radius**2 / diffusivity
    lam = PADE_POLES / tau
    ad = np.zeros((4, 4))
    bd = np.zeros(4)
    ad[0, 0] = 1.0
    bd[0] = -3.0 * gain * dt / radius
    e = np.exp(lam * dt)
    ad[1:, 1:] = np.diag(e)
    bd[1:] = (e - 1.0) / lam * gain
    c_surf = np.zeros(4)
    c_surf[0] = 1.0
    c_surf[1:] = radius / diffusivity * PADE_RESIDUES / tau
    c_bulk = np.zeros(4)
    c_bulk[0] = 1.0
    return ad, bd, c_surf, c_bulk


def fdm_solid_continuous(radius: float, diffusivity: float, gain: float, nodes: int = 50):
    """Finite-volume spherical diffusion on ``nodes`` equal-width shells.

    Returns ``(A, b, c_surf_row, d_surf, c_bulk_row)``: surface concentration is
    extrapolated from the outer cell centre with the imposed boundary gradient,
    which gives the direct feedthrough ``d_surf`` (per amp).
    """
    dr = radius / nodes
    faces = np.arange(nodes + 1) * dr
    vol = (faces[1:] ** 3 - faces[:-1] ** 3) / 3.0  # 4*pi omitted throughout
    area = faces**2
    a = np.zeros((nodes, nodes))
    for i in range(nodes - 1):
        g = diffusivity * area[i + 1] / dr
        a[i, i] -= g / vol[i]
        a[i, i + 1] += g / vol[i]
        a[i + 1, i + 1] -= g / vol[i + 1]
        a[i + 1, i] += g / vol[i + 1]
    b = np.zeros(nodes)
    b[-1] = -area[-1] * gain / vol[-1]
    c_surf = np.zeros(nodes)
    c_surf[-1] = 1.0
    d_surf = -gain * 0.5 * dr / diffusivity
    c_bulk = vol / vol.sum()
    return a, b, c_surf, d_surf, c_bulk


def discretize(a: np.ndarray, b: np.ndarray, dt: float) -> tuple[np.ndarray, np.ndarray]:
    """Zero-order-hold discretization via the augmented matrix exponential."""
    n = a.shape[0]
    aug = np.zeros((n + 1, n + 1))
    aug[:n, :n] = a
    aug[:n, n] = b
    e = expm(aug * dt)
    return e[:n, :n], e[:n, n]


def electrolyte_continuous(params) -> tuple[np.ndarray, np.ndarray]:
    """Two-state electrolyte model: deviations of the region-averaged salt
    concentration in the negative and positive electrodes from c_e0.

    Each electrode carries a quadratic profile (uniform reaction source), the
    separator a linear one; the separator average follows from salt
    conservation.
    """
    ln, ls, lp = params.l_n, params.l_sep, params.l_p
    en, es, ep = params.eps_e_n, params.eps_e_sep, params.eps_e_p
    dn, ds, dp = (params.d_e * e**BRUGGEMAN for e in (en, es, ep))
    r_ns = ln / (3 * dn) + ls / (2 * ds)
    r_sp = ls / (2 * ds) + lp / (3 * dp)
    # dc_s = -(en ln dc_n + ep lp dc_p) / (es ls)
    s_n = -en * ln / (es * ls)
    s_p = -ep * lp / (es * ls)
    src = (1 - params.t_plus) / (FARADAY * params.plate_area)
    a = np.zeros((2, 2))
    # en ln dc_n' = -src I - (dc_n - dc_s)/r_ns
    a[0, 0] = -(1 - s_n) / r_ns / (en * ln)
    a[0, 1] = s_p / r_ns / (en * ln)
    # ep lp dc_p' = src I + (dc_s - dc_p)/r_sp
    a[1, 0] = s_n / r_sp / (ep * lp)
    a[1, 1] = (s_p - 1) / r_sp / (ep * lp)
    b = np.array([-src / (en * ln), src / (ep * lp)])
    return a, b


def electrolyte_resistance(params) -> float:
    """Ohmic resistance of the electrolyte path (ohm) with Bruggeman correction."""
    kn, ks, kp = (params.kappa_e * e**BRUGGEMAN for e in (params.eps_e_n, params.eps_e_sep, params.eps_e_p))
    return (params.l_n / (3 * kn) + params.l_sep / ks + params.l_p / (3 * kp)) / params.plate_area
