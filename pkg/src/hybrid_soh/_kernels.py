"""Compiled inner loops shared by the single-step API and whole-protocol runs.

Everything here works on flat arrays so that one implementation serves both
paths.  Scalar cell constants travel in a float64 vector indexed by the
``S_*`` constants below.
"""

import math

import numpy as np
from numba import njit

FARADAY = 96485.33212
GAS_CONSTANT = 8.314462618

# scalar vector layout
S_CMAX_N = 0
S_CMAX_P = 1
S_K_N = 2
S_K_P = 3
S_AREA_N = 4  # total interfacial area a*A*L of the electrode, m^2
S_AREA_P = 5
S_R0 = 6
S_RE = 7
S_TPLUS = 8
S_TEMP = 9
S_THETA_N0 = 10
S_THETA_N100 = 11
S_IGUARD = 12
N_SCALARS = 13

# output rows of the linear part
Y_CSURF_N = 0
Y_CSURF_P = 1
Y_CE_N = 2
Y_CE_P = 3
Y_CBULK_N = 4
Y_CBULK_P = 5
N_OUT = 6

# control modes (REST labels zero-current samples only)
MODE_CC = 0
MODE_CV = 1
MODE_DONE = 2
MODE_REST = 3

# stage end conditions
END_SOC = 0
END_VOLTAGE = 1
END_TIME = 2

# run status
ST_OK = 0
ST_SATURATION = 1
ST_NONFINITE = 2
ST_NOROOT = 3
ST_TIME_LIMIT = 4
ST_MAX_STEPS = 5


@njit(cache=True)
def interp_clamped(x, xs, ys):
    n = xs.size
    if x <= xs[0]:
        return ys[0]
    if x >= xs[n - 1]:
        return ys[n - 1]
    lo = 0
    hi = n - 1
    while hi - lo > 1:
        mid = (lo + hi) >> 1
        if xs[mid] <= x:
            lo = mid
        else:
            hi = mid
    w = (x - xs[lo]) / (xs[hi] - xs[lo])
    return ys[lo] + w * (ys[hi] - ys[lo])


@njit(cache=True)
def outputs(x, cout, dout, yoff, current, y):
    n_out, n = cout.shape
    for r in range(n_out):
        acc = yoff[r] + dout[r] * current
        for c in range(n):
            acc += cout[r, c] * x[c]
        y[r] = acc


@njit(cache=True)
def advance(x, ad, bd, current, out):
    n = x.size
    for r in range(n):
        acc = bd[r] * current
        for c in range(n):
            acc += ad[r, c] * x[c]
        out[r] = acc


@njit(cache=True)
def voltage_from_outputs(y, current, sc, otn, oun, otp, oup):
    """Terminal voltage; NaN when a surface stoichiometry leaves (0, 1)."""
    cmax_n = sc[S_CMAX_N]
    cmax_p = sc[S_CMAX_P]
    cs_n = y[Y_CSURF_N]
    cs_p = y[Y_CSURF_P]
    th_n = cs_n / cmax_n
    th_p = cs_p / cmax_p
    if not (th_n > 0.0 and th_n < 1.0 and th_p > 0.0 and th_p < 1.0):
        return np.nan
    ce_n = y[Y_CE_N]
    ce_p = y[Y_CE_P]
    if not (ce_n > 0.0 and ce_p > 0.0):
        return np.nan
    rt_f = GAS_CONSTANT * sc[S_TEMP] / FARADAY
    u_n = interp_clamped(th_n, otn, oun)
    u_p = interp_clamped(th_p, otp, oup)
    j_n = -current / sc[S_AREA_N]
    j_p = current / sc[S_AREA_P]
    j0_n = FARADAY * sc[S_K_N] * math.sqrt(ce_n * cs_n * (cmax_n - cs_n))
    j0_p = FARADAY * sc[S_K_P] * math.sqrt(ce_p * cs_p * (cmax_p - cs_p))
    eta_n = 2.0 * rt_f * math.asinh(j_n / (2.0 * j0_n))
    eta_p = 2.0 * rt_f * math.asinh(j_p / (2.0 * j0_p))
    dphi_e = 2.0 * rt_f * (1.0 - sc[S_TPLUS]) * math.log(ce_p / ce_n) + current * sc[S_RE]
    return u_p - u_n + eta_p - eta_n + dphi_e + current * sc[S_R0]


@njit(cache=True)
def soc_from_outputs(y, sc):
    th = y[Y_CBULK_N] / sc[S_CMAX_N]
    return (th - sc[S_THETA_N0]) / (sc[S_THETA_N100] - sc[S_THETA_N0])


@njit(cache=True)
def _signed_residual(y0, y1, current, v_target, sc, otn, oun, otp, oup, y):
    for r in range(y0.size):
        y[r] = y0[r] + y1[r] * current
    v = voltage_from_outputs(y, current, sc, otn, oun, otp, oup)
    if np.isnan(v):
        # saturation at high charge current reads as "too high", and vice versa
        return 1.0 if current > 0.0 else -1.0
    return v - v_target


@njit(cache=True)
def solve_affine_current(y0, y1, v_target, guess, sc, otn, oun, otp, oup, tol):
    """Root of V(y0 + y1*I, I) = v_target on [-guard, guard]; NaN if none.

    V is increasing in I, so a bisection bracket is kept around safeguarded
    Newton steps.
    """
    y = np.empty(y0.size)
    guard = sc[S_IGUARD]
    lo = -guard
    hi = guard
    f_lo = _signed_residual(y0, y1, lo, v_target, sc, otn, oun, otp, oup, y)
    f_hi = _signed_residual(y0, y1, hi, v_target, sc, otn, oun, otp, oup, y)
    if f_lo > 0.0 or f_hi < 0.0:
        return np.nan
    i = min(max(guess, lo), hi)
    h = 1e-4
    for _ in range(200):
        f = _signed_residual(y0, y1, i, v_target, sc, otn, oun, otp, oup, y)
        if abs(f) < tol:
            return i
        if f > 0.0:
            hi = i
        else:
            lo = i
        if hi - lo < 1e-13:
            return 0.5 * (lo + hi)
        step_h = h if i + h < hi else -h
        f2 = _signed_residual(y0, y1, i + step_h, v_target, sc, otn, oun, otp, oup, y)
        d = (f2 - f) / step_h
        nxt = i - f / d if d > 0.0 else 0.5 * (lo + hi)
        if not (nxt > lo and nxt < hi):
            nxt = 0.5 * (lo + hi)
        i = nxt
    return np.nan


@njit(cache=True)
def implicit_cv_current(x, ad, bd, cout, dout, yoff, v_target, guess, sc, otn, oun, otp, oup, tol):
    """Current that puts the voltage *after* one step exactly at v_target."""
    n_out, n = cout.shape
    xa = np.empty(n)
    advance(x, ad, bd, 0.0, xa)
    y0 = np.empty(n_out)
    y1 = np.empty(n_out)
    for r in range(n_out):
        a0 = yoff[r]
        a1 = dout[r]
        for c in range(n):
            a0 += cout[r, c] * xa[c]
            a1 += cout[r, c] * bd[c]
        y0[r] = a0
        y1[r] = a1
    return solve_affine_current(y0, y1, v_target, guess, sc, otn, oun, otp, oup, tol)


@njit(cache=True)
def controller_step(rates, kinds, values, v_max, i_cutoff, i_nominal, max_time,
                    soc, voltage, current, mode, stage, stage_time, t):
    """One decision of the protocol state machine.

    Returns ``(mode, stage, stage_time)``; stage_time resets on stage change.
    """
    if mode == MODE_DONE:
        return MODE_DONE, stage, stage_time
    if t >= max_time:
        return MODE_DONE, stage, stage_time
    n_stages = rates.size
    rate = rates[stage]
    kind = kinds[stage]
    value = values[stage]
    final = stage == n_stages - 1
    if mode == MODE_CV:
        if current <= i_cutoff:
            return MODE_DONE, stage, stage_time
        advance_stage = (kind == END_SOC and soc >= value) or (kind == END_TIME and stage_time >= value)
        if advance_stage:
            if final:
                return MODE_DONE, stage, stage_time
            nxt = stage + 1
            # a CC setpoint above the present CV current would overshoot v_max at once
            if rates[nxt] * i_nominal > current:
                return MODE_CV, nxt, 0.0
            return MODE_CC, nxt, 0.0
        return MODE_CV, stage, stage_time
    # constant-current stage
    done_here = False
    if kind == END_SOC:
        done_here = soc >= value if rate >= 0.0 else soc <= value
    elif kind == END_TIME:
        done_here = stage_time >= value
    elif kind == END_VOLTAGE:
        if rate > 0.0:
            done_here = voltage >= value and value < v_max
        elif rate < 0.0:
            done_here = voltage <= value
    if done_here:
        if final:
            return MODE_DONE, stage, stage_time
        return MODE_CC, stage + 1, 0.0
    if rate > 0.0 and voltage >= v_max:
        if kind == END_VOLTAGE and not final:
            return MODE_CC, stage + 1, 0.0
        return MODE_CV, stage, stage_time
    return MODE_CC, stage, stage_time


@njit(cache=True)
def run_protocol(x0, ad, bd, cout, dout, yoff, sc, otn, oun, otp, oup,
                 rates, kinds, values, v_max, i_cutoff, i_nominal, max_time,
                 nominal_soc_basis, dt, max_steps, cv_tol):
    """Simulate a protocol from state x0.

    Returns ``(t, I, V, Q, soc, mode, n_samples, x_final, status)``.  Sample 0
    is the rested initial state; every later sample records the current held
    over the preceding interval and the voltage at its end.
    """
    n_out = cout.shape[0]
    n = x0.size
    t_a = np.empty(max_steps + 1)
    i_a = np.empty(max_steps + 1)
    v_a = np.empty(max_steps + 1)
    q_a = np.empty(max_steps + 1)
    s_a = np.empty(max_steps + 1)
    m_a = np.empty(max_steps + 1, dtype=np.int8)
    x = x0.copy()
    xn = np.empty(n)
    y = np.empty(n_out)
    outputs(x, cout, dout, yoff, 0.0, y)
    v = voltage_from_outputs(y, 0.0, sc, otn, oun, otp, oup)
    soc = soc_from_outputs(y, sc)
    soc0 = soc
    t_a[0] = 0.0
    i_a[0] = 0.0
    v_a[0] = v
    q_a[0] = 0.0
    s_a[0] = soc
    m_a[0] = MODE_REST
    if np.isnan(v):
        return t_a[:1], i_a[:1], v_a[:1], q_a[:1], s_a[:1], m_a[:1], 1, x, ST_SATURATION
    mode = MODE_CC
    stage = 0
    stage_time = 0.0
    current = 0.0
    t = 0.0
    q = 0.0
    net = 0.0
    k = 0
    status = ST_OK
    while True:
        soc_ctl = soc0 + net / (i_nominal * 3600.0) if nominal_soc_basis else soc
        mode, stage, stage_time = controller_step(
            rates, kinds, values, v_max, i_cutoff, i_nominal, max_time,
            soc_ctl, v, current, mode, stage, stage_time, t)
        if mode == MODE_DONE:
            if t >= max_time:
                status = ST_TIME_LIMIT
            break
        if k >= max_steps:
            status = ST_MAX_STEPS
            break
        if mode == MODE_CC:
            current = rates[stage] * i_nominal
        else:
            current = implicit_cv_current(x, ad, bd, cout, dout, yoff, v_max, current,
                                          sc, otn, oun, otp, oup, cv_tol)
            if np.isnan(current):
                status = ST_NOROOT
                break
        advance(x, ad, bd, current, xn)
        for r in range(n):
            x[r] = xn[r]
            if not np.isfinite(xn[r]):
                status = ST_NONFINITE
        if status != ST_OK:
            break
        outputs(x, cout, dout, yoff, current, y)
        v = voltage_from_outputs(y, current, sc, otn, oun, otp, oup)
        t += dt
        stage_time += dt
        if current > 0.0:
            q += current * dt / 3600.0
        net += current * dt
        soc = soc_from_outputs(y, sc)
        k += 1
        t_a[k] = t
        i_a[k] = current
        v_a[k] = v
        q_a[k] = q
        s_a[k] = soc
        m_a[k] = MODE_REST if current == 0.0 else mode
        if np.isnan(v):
            status = ST_SATURATION
            break
    return t_a[:k + 1], i_a[:k + 1], v_a[:k + 1], q_a[:k + 1], s_a[:k + 1], m_a[:k + 1], k + 1, x, status


@njit(cache=True)
def run_replay(x0, ad, bd, cout, dout, yoff, sc, otn, oun, otp, oup,
               currents, is_cv, v_target, cv_tol):
    """Replay a measured program: CC samples impose the recorded current, CV
    samples regulate to v_target.  Returns ``(V, I, n_done, status)``; entry k
    corresponds to measured sample k (sample 0 is the rested start).
    """
    n_out = cout.shape[0]
    n = x0.size
    m = currents.size
    v_a = np.full(m, np.nan)
    i_a = np.zeros(m)
    x = x0.copy()
    xn = np.empty(n)
    y = np.empty(n_out)
    outputs(x, cout, dout, yoff, 0.0, y)
    v_a[0] = voltage_from_outputs(y, 0.0, sc, otn, oun, otp, oup)
    if np.isnan(v_a[0]):
        return v_a, i_a, 0, ST_SATURATION
    current = 0.0
    for k in range(1, m):
        if is_cv[k]:
            guess = current if current != 0.0 else currents[k]
            current = implicit_cv_current(x, ad, bd, cout, dout, yoff, v_target, guess,
                                          sc, otn, oun, otp, oup, cv_tol)
            if np.isnan(current):
                return v_a, i_a, k, ST_NOROOT
        else:
            current = currents[k]
        advance(x, ad, bd, current, xn)
        for r in range(n):
            x[r] = xn[r]
        outputs(x, cout, dout, yoff, current, y)
        v = voltage_from_outputs(y, current, sc, otn, oun, otp, oup)
        i_a[k] = current
        v_a[k] = v
        if np.isnan(v):
            return v_a, i_a, k, ST_SATURATION
    return v_a, i_a, m, ST_OK
