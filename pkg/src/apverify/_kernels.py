"""Numba path kernels for the jump-intensity market and the lognormal control.

Each kernel simulates a contiguous block [i0, i1) of path indices and writes
per-path results into caller-allocated arrays indexed by the absolute path
id, so any partition of the index space over worker threads produces
identical output. All randomness comes from the counter-based streams in
``_rng``; a path's draws depend only on (key, path index).

Jump-market stepping scheme, per grid step of length h:
  * exact Gaussian increment for the log price x (drift -h/2),
  * level crossing detected either by the endpoint reaching the log level or
    by a Brownian-bridge draw with crossing probability
    exp(-2 (m-x_k)(m-x_{k+1}) / h); crossings are placed at the step
    midpoint with the price snapped to the level,
  * compensator accumulated by the trapezoid rule (left rectangle on the
    partial step into a crossing), jump time recovered by inverting the
    compensator against a unit-exponential alarm, linearly within the step,
  * steps shrink to land exactly on deterministic stopping times and the
    horizon cap, and shrink by ``refine_factor`` above the refinement
    threshold where the intensity steepens.

After the level has been hit the intensity is the constant floor, so the
remaining jump time is sampled exactly (no grid).
"""

import math

import numpy as np
from numba import njit

from ._rng import (
    DOMAIN_NORMAL,
    DOMAIN_UNIFORM,
    U64,
    draw_normal,
    draw_uniform,
    stream_counter,
)

# Terminal event codes.
WHICH_HIT = 0
WHICH_JUMP = 1
WHICH_CENSORED = 2

# Stopping-rule kinds.
RULE_DET = 0
RULE_LEVEL_UP = 1
RULE_LEVEL_DOWN = 2
RULE_COMP = 3

_TIME_EPS = 1e-12
# exp(-41) ~ 1.6e-18: below this the bridge crossing draw is skipped.
_BRIDGE_EXPONENT_CAP = 41.0


@njit(cache=True, nogil=True)
def run_jump_market_block(
    i0, i1, key,
    t0, s0, post_hit0,
    delta, gamma, log_level,
    dt, t_max, refine_threshold, refine_factor, antithetic,
    rule_kind, rule_param, det_order,
    out_t1, out_t2, out_tfin, out_sfin, out_lamfin, out_which,
    rule_tau, rule_s, rule_resolved,
):
    n_rules = rule_kind.size
    n_det = det_order.size
    level = math.exp(log_level)
    log_refine = math.log(refine_threshold)
    dt_fine = dt / refine_factor
    x0 = math.log(s0)

    # Log levels for level rules, raw thresholds otherwise.
    rule_level_log = np.empty(n_rules, dtype=np.float64)
    for j in range(n_rules):
        if rule_kind[j] == RULE_LEVEL_UP or rule_kind[j] == RULE_LEVEL_DOWN:
            rule_level_log[j] = math.log(rule_param[j])
        else:
            rule_level_log[j] = rule_param[j]
    live = np.empty(n_rules, dtype=np.uint8)

    for i in range(i0, i1):
        idx = U64(i)
        if antithetic:
            norm_idx = U64(i - (i & 1))
            sign = -1.0 if (i & 1) == 1 else 1.0
        else:
            norm_idx = idx
            sign = 1.0
        c1n = stream_counter(DOMAIN_NORMAL, norm_idx)
        c1u = stream_counter(DOMAIN_UNIFORM, idx)
        npos = U64(0)
        ncache = 0.0
        nhave = False
        upos = U64(0)
        ucache = 0.0
        uhave = False

        for j in range(n_rules):
            rule_tau[i, j] = np.nan
            rule_s[i, j] = np.nan
            rule_resolved[i, j] = 0
            live[j] = 1 if rule_kind[j] != RULE_DET else 0

        u, upos, ucache, uhave = draw_uniform(key, c1u, upos, ucache, uhave)
        alarm = -math.log(u)

        if post_hit0:
            # Constant intensity: remaining jump time is exact.
            dur = alarm / gamma
            if t0 + dur > t_max:
                out_t1[i] = np.nan
                out_t2[i] = np.nan
                out_tfin[i] = np.nan
                out_sfin[i] = np.nan
                out_lamfin[i] = gamma * (t_max - t0)
                out_which[i] = WHICH_CENSORED
            else:
                z, npos, ncache, nhave = draw_normal(key, c1n, npos, ncache, nhave)
                z *= sign
                out_t1[i] = np.nan
                out_t2[i] = t0 + dur
                out_tfin[i] = t0 + dur
                out_sfin[i] = s0 * math.exp(math.sqrt(dur) * z - 0.5 * dur)
                out_lamfin[i] = alarm
                out_which[i] = WHICH_JUMP
            continue

        t = t0
        x = x0
        lam_acc = 0.0
        det_ptr = 0
        # Skip deterministic times strictly before the start state.
        while det_ptr < n_det and rule_param[det_order[det_ptr]] < t0 - _TIME_EPS:
            det_ptr += 1

        # Node check at the start state.
        while det_ptr < n_det and t >= rule_param[det_order[det_ptr]] - _TIME_EPS:
            j = det_order[det_ptr]
            rule_tau[i, j] = rule_param[j]
            rule_s[i, j] = math.exp(x)
            rule_resolved[i, j] = 1
            det_ptr += 1
        for j in range(n_rules):
            if live[j] == 0:
                continue
            k = rule_kind[j]
            hit = False
            if k == RULE_LEVEL_UP:
                hit = x >= rule_level_log[j]
            elif k == RULE_LEVEL_DOWN:
                hit = x <= rule_level_log[j]
            elif k == RULE_COMP:
                hit = lam_acc >= rule_param[j]
            if hit:
                rule_tau[i, j] = t
                rule_s[i, j] = math.exp(x)
                rule_resolved[i, j] = 1
                live[j] = 0

        lam_node = gamma / (-math.expm1(delta * (x - log_level)))

        while True:
            if t >= t_max - _TIME_EPS:
                out_t1[i] = np.nan
                out_t2[i] = np.nan
                out_tfin[i] = np.nan
                out_sfin[i] = math.exp(x)
                out_lamfin[i] = lam_acc
                out_which[i] = WHICH_CENSORED
                break

            h = dt_fine if x > log_refine else dt
            snap_to = -1.0
            if t + h >= t_max:
                h = t_max - t
                snap_to = t_max
            if det_ptr < n_det:
                t_det = rule_param[det_order[det_ptr]]
                if t + h >= t_det - _TIME_EPS:
                    h = t_det - t
                    snap_to = t_det

            z, npos, ncache, nhave = draw_normal(key, c1n, npos, ncache, nhave)
            z *= sign
            x_new = x + math.sqrt(h) * z - 0.5 * h

            crossed = x_new >= log_level
            if not crossed:
                ee = 2.0 * (log_level - x) * (log_level - x_new) / h
                if ee < _BRIDGE_EXPONENT_CAP:
                    u, upos, ucache, uhave = draw_uniform(
                        key, c1u, upos, ucache, uhave)
                    crossed = u < math.exp(-ee)

            if crossed:
                t_hit = t + 0.5 * h
                d_lam = lam_node * 0.5 * h
                if lam_acc + d_lam >= alarm:
                    # The alarm fires on the way to the level.
                    u_t = (alarm - lam_acc) / lam_node
                    x_j = x + (log_level - x) * (u_t / (0.5 * h))
                    out_t1[i] = np.nan
                    out_t2[i] = t + u_t
                    out_tfin[i] = t + u_t
                    out_sfin[i] = math.exp(x_j)
                    out_lamfin[i] = alarm
                    out_which[i] = WHICH_JUMP
                else:
                    out_t1[i] = t_hit
                    # Post-hit intensity is the constant floor, so the jump
                    # time is exactly resolvable past the hit.
                    out_t2[i] = t_hit + (alarm - lam_acc - d_lam) / gamma
                    out_tfin[i] = t_hit
                    out_sfin[i] = level
                    out_lamfin[i] = lam_acc + d_lam
                    out_which[i] = WHICH_HIT
                break

            lam_new = gamma / (-math.expm1(delta * (x_new - log_level)))
            d_lam = 0.5 * (lam_node + lam_new) * h
            if lam_acc + d_lam >= alarm:
                u_t = h * (alarm - lam_acc) / d_lam
                x_j = x + (x_new - x) * (u_t / h)
                out_t1[i] = np.nan
                out_t2[i] = t + u_t
                out_tfin[i] = t + u_t
                out_sfin[i] = math.exp(x_j)
                out_lamfin[i] = alarm
                out_which[i] = WHICH_JUMP
                break

            lam_acc += d_lam
            x = x_new
            lam_node = lam_new
            t = snap_to if snap_to > 0.0 else t + h

            # Node checks after the completed step.
            while det_ptr < n_det and t >= rule_param[det_order[det_ptr]] - _TIME_EPS:
                j = det_order[det_ptr]
                rule_tau[i, j] = rule_param[j]
                rule_s[i, j] = math.exp(x)
                rule_resolved[i, j] = 1
                det_ptr += 1
            for j in range(n_rules):
                if live[j] == 0:
                    continue
                k = rule_kind[j]
                hit = False
                if k == RULE_LEVEL_UP:
                    hit = x >= rule_level_log[j]
                elif k == RULE_LEVEL_DOWN:
                    hit = x <= rule_level_log[j]
                elif k == RULE_COMP:
                    hit = lam_acc >= rule_param[j]
                if hit:
                    rule_tau[i, j] = t
                    rule_s[i, j] = math.exp(x)
                    rule_resolved[i, j] = 1
                    live[j] = 0


@njit(cache=True, nogil=True)
def run_control_block(
    i0, i1, key,
    t0, w_start, mpr, maturity, dt, antithetic,
    det_times,
    out_w, out_qv, det_w, det_qv,
):
    """Brownian block for the control market.

    Records the terminal Brownian value, the realized quadratic variation of
    the deflator driver M = -mpr * W (sum of squared increments), and both at
    each deterministic stopping time.
    """
    n_det = det_times.size
    lam2 = mpr * mpr

    for i in range(i0, i1):
        idx = U64(i)
        if antithetic:
            norm_idx = U64(i - (i & 1))
            sign = -1.0 if (i & 1) == 1 else 1.0
        else:
            norm_idx = idx
            sign = 1.0
        c1n = stream_counter(DOMAIN_NORMAL, norm_idx)
        npos = U64(0)
        ncache = 0.0
        nhave = False

        t = t0
        w = w_start
        qv = 0.0
        ptr = 0
        while ptr < n_det and det_times[ptr] < t0 - _TIME_EPS:
            ptr += 1
        while ptr < n_det and t >= det_times[ptr] - _TIME_EPS:
            det_w[i, ptr] = w
            det_qv[i, ptr] = qv
            ptr += 1

        while t < maturity - _TIME_EPS:
            h = dt
            snap_to = -1.0
            if t + h >= maturity:
                h = maturity - t
                snap_to = maturity
            if ptr < n_det and t + h >= det_times[ptr] - _TIME_EPS:
                h = det_times[ptr] - t
                snap_to = det_times[ptr]
            z, npos, ncache, nhave = draw_normal(key, c1n, npos, ncache, nhave)
            dw = math.sqrt(h) * z * sign
            w += dw
            qv += lam2 * dw * dw
            t = snap_to if snap_to > 0.0 else t + h
            while ptr < n_det and t >= det_times[ptr] - _TIME_EPS:
                det_w[i, ptr] = w
                det_qv[i, ptr] = qv
                ptr += 1

        out_w[i] = w
        out_qv[i] = qv
