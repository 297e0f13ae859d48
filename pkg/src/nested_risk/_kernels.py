"""Compiled inner-sampling kernels.

The portfolio is flattened into a float table, one row per option, with the
column layout below. Everything that touches individual inner samples lives
here so the Python layer only handles scenarios, seeding and statistics.
"""

import math

import numpy as np
from numba import njit

# option table columns
SIGN, STRIKE, MATURITY, ASSET, WEIGHT, MODEL, V0, DELTA0, ED0H, WORK, PROB = range(11)
# per-option constants of the exact-sim path: discount factor, risk-neutral
# growth over [0, tau], log-tail mean and sd over [tau, T], head sd
DISC, HEAD_GROWTH, TAIL_MEAN, TAIL_SD, HEAD_SD = range(11, 16)
N_COLS = 16

EXACT_EVAL, EXACT_SIM, APPROX_SIM = 0, 1, 2
CV_OFF, CV_LEVEL0, CV_ALL = 0, 1, 2

# flag vector layout
F_ANTITHETIC, F_DELTA, F_SHARED_TAIL, F_APPROX_MODE, F_SUBSAMPLE = range(5)
# parameter vector layout
P_RATE, P_TAU, P_ZETA, P_CZETA = range(4)

MAX_RANDOM_LEVEL = 20
_INV_SQRT2 = 1.0 / math.sqrt(2.0)
SCRATCH = 3 * 4**6 + 2


@njit(cache=True)
def ncdf(x):
    return 0.5 * math.erfc(-x * _INV_SQRT2)


@njit(cache=True)
def bs_value(sign, spot, strike, maturity, t, vol, rate):
    """Black-Scholes value discounted to time 0."""
    rem = maturity - t
    sd = vol * math.sqrt(rem)
    df = math.exp(-rate * rem)
    if sd == 0.0:
        v = sign * (spot - strike * df)
        v = v if v > 0.0 else 0.0
    else:
        d1 = (math.log(spot / strike) + (rate + 0.5 * vol * vol) * rem) / sd
        d2 = d1 - sd
        v = sign * (spot * ncdf(sign * d1) - strike * df * ncdf(sign * d2))
    return math.exp(-rate * t) * v


@njit(cache=True, inline="always")
def _payoff(sign, strike, disc, s):
    v = sign * (s - strike)
    return disc * v if v > 0.0 else 0.0


@njit(cache=True, inline="always")
def _payoff_sens(sign, strike, disc, s, s0):
    # h'(S(T)) * S(T) / S(0); ties count as out of the money
    return disc * sign * s / s0 if sign * (s - strike) > 0.0 else 0.0


@njit(cache=True)
def fill_normals(out, count, rng):
    for k in range(count):
        out[k] = rng.standard_normal()


@njit(cache=True)
def sample_random_level(zeta, rng):
    u = 1.0 - rng.random()
    lvl = int(-math.log(u) / (zeta * math.log(4.0)))
    return lvl if lvl < MAX_RANDOM_LEVEL else MAX_RANDOM_LEVEL


@njit(cache=True, inline="always")
def exact_eval_value(row, r_k, s0_k, vol, rate, tau, use_delta):
    v_tau = bs_value(row[SIGN], r_k, row[STRIKE], row[MATURITY], tau, vol, rate)
    f = row[V0] - v_tau
    if use_delta:
        f -= (s0_k - r_k) * row[DELTA0]
    return row[WEIGHT] * f


@njit(cache=True, inline="always")
def exact_sim_value(row, r_k, s0_k, vol, rate, tau, antithetic, use_delta, shared_tail, rng):
    sign = row[SIGN]
    strike = row[STRIKE]
    disc = row[DISC]
    eh = math.exp(row[HEAD_SD] * rng.standard_normal())
    et = math.exp(row[TAIL_MEAN] + row[TAIL_SD] * rng.standard_normal())
    if shared_tail:
        s_c = r_k * et
    else:
        s_c = r_k * math.exp(row[TAIL_MEAN] + row[TAIL_SD] * rng.standard_normal())
    base = s0_k * row[HEAD_GROWTH] * et
    s_p = base * eh
    if antithetic:
        s_m = base / eh
        f = 0.5 * (_payoff(sign, strike, disc, s_p) + _payoff(sign, strike, disc, s_m))
        sens = 0.5 * (_payoff_sens(sign, strike, disc, s_p, s0_k) + _payoff_sens(sign, strike, disc, s_m, s0_k))
        work = 3.0
    else:
        f = _payoff(sign, strike, disc, s_p)
        sens = _payoff_sens(sign, strike, disc, s_p, s0_k)
        work = 2.0
    f -= _payoff(sign, strike, disc, s_c)
    if use_delta:
        f -= (s0_k - r_k) * sens
    return row[WEIGHT] * f, work


@njit(cache=True)
def _milstein_segment(vol, dt, z, out):
    """Products of Milstein factors over len(z) fine steps and len(z)/4 coarse steps.

    out = [fine(+), fine(-), coarse(+), coarse(-)]; the minus entries use
    the negated increments.
    """
    sq = math.sqrt(dt)
    h = 0.5 * vol * vol
    fp = 1.0
    fm = 1.0
    cp = 1.0
    cm = 1.0
    acc = 0.0
    for k in range(z.shape[0]):
        d = sq * z[k]
        a = vol * d
        b = h * (d * d - dt)
        fp *= 1.0 + a + b
        fm *= 1.0 - a + b
        acc += d
        if k % 4 == 3:
            a = vol * acc
            b = h * (acc * acc - 4.0 * dt)
            cp *= 1.0 + a + b
            cm *= 1.0 - a + b
            acc = 0.0
    out[0] = fp
    out[1] = fm
    out[2] = cp
    out[3] = cm


@njit(cache=True)
def milstein_loss(row, r_k, s0_k, vol, rate, tau, level, antithetic, delta_mode, shared_tail, buf, scratch, rng):
    """Level-l correction of the (antithetic, delta-corrected) loss and its work."""
    sign = row[SIGN]
    strike = row[STRIKE]
    mat = row[MATURITY]
    disc = math.exp(-rate * mat)
    n = 4**level
    n_seg = 2 if shared_tail else 3
    z = scratch if n_seg * n <= scratch.shape[0] else np.empty(n_seg * n)
    fill_normals(z, n_seg * n, rng)
    _milstein_segment(vol, tau / n, z[:n], buf[0])
    _milstein_segment(vol, (mat - tau) / n, z[n : 2 * n], buf[1])
    if shared_tail:
        tail_c_f = buf[1, 0]
        tail_c_c = buf[1, 2]
    else:
        _milstein_segment(vol, (mat - tau) / n, z[2 * n : 3 * n], buf[2])
        tail_c_f = buf[2, 0]
        tail_c_c = buf[2, 2]
    grow = math.exp(rate * mat)
    grow_c = math.exp(rate * (mat - tau))
    use_delta = delta_mode == CV_ALL or (delta_mode == CV_LEVEL0 and level == 0)
    out = 0.0
    # j = 0 fine, j = 1 coarse
    for j in range(2 if level > 0 else 1):
        col = 2 * j
        s_p = s0_k * buf[0, col] * buf[1, col] * grow
        s_c = r_k * (tail_c_f if j == 0 else tail_c_c) * grow_c
        if antithetic:
            s_m = s0_k * buf[0, col + 1] * buf[1, col] * grow
            lam = 0.5 * (_payoff(sign, strike, disc, s_p) + _payoff(sign, strike, disc, s_m))
            sens = 0.5 * (_payoff_sens(sign, strike, disc, s_p, s0_k) + _payoff_sens(sign, strike, disc, s_m, s0_k))
        else:
            lam = _payoff(sign, strike, disc, s_p)
            sens = _payoff_sens(sign, strike, disc, s_p, s0_k)
        lam -= _payoff(sign, strike, disc, s_c)
        if use_delta:
            lam -= (s0_k - r_k) * sens
        out += lam if j == 0 else -lam
    legs = 3.0 if antithetic else 2.0
    work = legs * n
    if level > 0:
        work += legs * n // 4
    return row[WEIGHT] * out, work


@njit(cache=True)
def approx_sim_value(row, r_k, s0_k, vol, rate, tau, zeta, czeta, antithetic, delta_mode, shared_tail, buf, scratch, rng):
    level = sample_random_level(zeta, rng)
    d, work = milstein_loss(row, r_k, s0_k, vol, rate, tau, level, antithetic, delta_mode, shared_tail, buf, scratch, rng)
    return czeta * 4.0 ** (zeta * level) * d, work


@njit(cache=True, inline="always")
def term_value(i, rtau, opts, s0, sig, params, flags, buf, scratch, rng):
    row = opts[i]
    k = int(row[ASSET])
    model = int(row[MODEL])
    if model == EXACT_EVAL:
        f = exact_eval_value(row, rtau[k], s0[k], sig[k], params[P_RATE], params[P_TAU], flags[F_DELTA] != 0)
        w = 1.0
    elif model == EXACT_SIM:
        f, w = exact_sim_value(
            row, rtau[k], s0[k], sig[k], params[P_RATE], params[P_TAU],
            flags[F_ANTITHETIC] != 0, flags[F_DELTA] != 0, flags[F_SHARED_TAIL] != 0, rng,
        )
    else:
        f, w = approx_sim_value(
            row, rtau[k], s0[k], sig[k], params[P_RATE], params[P_TAU], params[P_ZETA], params[P_CZETA],
            flags[F_ANTITHETIC] != 0, flags[F_APPROX_MODE], flags[F_SHARED_TAIL] != 0, buf, scratch, rng,
        )
    return f, w


@njit(cache=True)
def _exact_eval_total(rtau, opts, s0, sig, params, flags):
    """Sum of all exact-eval terms for one scenario and their count."""
    total = 0.0
    count = 0
    for i in range(opts.shape[0]):
        if int(opts[i, MODEL]) == EXACT_EVAL:
            k = int(opts[i, ASSET])
            total += exact_eval_value(opts[i], rtau[k], s0[k], sig[k], params[P_RATE], params[P_TAU], flags[F_DELTA] != 0)
            count += 1
    return total, count


@njit(cache=True, inline="always")
def draw_x(rtau, thr, opts, cdf, s0, sig, params, flags, ee_total, cache, buf, scratch, rng):
    """One inner sample X and its work.

    With sub-sampling, X = f_j / (P p_j) - threshold. Without it, X is the
    full portfolio average, where exact-eval terms enter through the
    precomputed ``ee_total`` and are not charged again. ``cache`` holds
    exact-eval values already computed for this scenario (NaN = not yet).
    """
    p = opts.shape[0]
    if flags[F_SUBSAMPLE]:
        j = np.searchsorted(cdf, rng.random(), side="right")
        if j >= p:
            j = p - 1
        if int(opts[j, MODEL]) == EXACT_EVAL:
            if math.isnan(cache[j]):
                f, w = term_value(j, rtau, opts, s0, sig, params, flags, buf, scratch, rng)
                cache[j] = f
            f = cache[j]
            w = 1.0
        else:
            f, w = term_value(j, rtau, opts, s0, sig, params, flags, buf, scratch, rng)
        return f / (p * opts[j, PROB]) - thr, w
    total = ee_total
    work = 0.0
    for i in range(p):
        if int(opts[i, MODEL]) != EXACT_EVAL:
            f, w = term_value(i, rtau, opts, s0, sig, params, flags, buf, scratch, rng)
            total += f
            work += w
    return total / p - thr, work


@njit(cache=True)
def _scenario_setup(rtau, opts, s0, sig, params, flags, cache):
    cache[:] = np.nan
    if flags[F_SUBSAMPLE]:
        return 0.0, 0.0
    total, count = _exact_eval_total(rtau, opts, s0, sig, params, flags)
    return total, float(count)


@njit(cache=True)
def _delta_hat(n, rtau, thr, opts, cdf, s0, sig, params, flags, ee_total, cache, buf, scratch, rng):
    s1 = 0.0
    s2 = 0.0
    work = 0.0
    for _ in range(n):
        x, w = draw_x(rtau, thr, opts, cdf, s0, sig, params, flags, ee_total, cache, buf, scratch, rng)
        s1 += x
        s2 += x * x
        work += w
    mean = s1 / n
    var = s2 / n - mean * mean
    if var <= 0.0:
        return np.inf, work
    return abs(mean) / math.sqrt(var), work


@njit(cache=True)
def adaptive_count(level, n0, c, r, rtau, thr, opts, cdf, s0, sig, params, flags, ee_total, cache, buf, scratch, rng):
    """Doubling rule for the inner sample count; returns (N, work spent on pilots)."""
    n_max = n0 * 4**level
    n = n0 * 2**level
    work = 0.0
    while True:
        if 2 * n >= n_max:
            return n_max, work
        dh, w = _delta_hat(n, rtau, thr, opts, cdf, s0, sig, params, flags, ee_total, cache, buf, scratch, rng)
        work += w
        if dh == np.inf:
            return n, work
        bound = n_max * (math.sqrt(n0) * 2.0**level * dh / c) ** (-r)
        if n >= bound:
            return n, work
        n *= 2


@njit(cache=True)
def inner_sums(n, group, rtau, thr, opts, cdf, s0, sig, params, flags, ee_total, cache, buf, scratch, rng, group_sums):
    """Draw n samples; fill group_sums[:n // group]; return (sum, sumsq, work)."""
    s1 = 0.0
    s2 = 0.0
    work = 0.0
    g = -1
    for m in range(n):
        if m % group == 0:
            g += 1
            group_sums[g] = 0.0
        x, w = draw_x(rtau, thr, opts, cdf, s0, sig, params, flags, ee_total, cache, buf, scratch, rng)
        group_sums[g] += x
        s1 += x
        s2 += x * x
        work += w
    return s1, s2, work


@njit(cache=True)
def level_block(
    scen, thr, level, base, adaptive, n0, c, r, opts, cdf, s0, sig, params, flags, rng,
    d_out, f_out, n_out, work_out, work_fine_out,
):
    """Level-l samples of the antithetic indicator difference for a block of scenarios.

    For every scenario: N_l and N_{l-1} are chosen independently (adaptive
    rule or fixed N0 4^l), then max(N_l, N_{l-1}) fresh samples are split
    into groups of min(N_l, N_{l-1}) to build the fine estimator and its
    antithetic partners. ``base`` skips the coarse side entirely.
    Outputs: indicator difference, fine indicator, N_l, total work, and
    the work a fine-only evaluation would have cost.
    """
    p = opts.shape[0]
    cache = np.empty(p)
    buf = np.empty((3, 4))
    scratch = np.empty(SCRATCH)
    max_groups = 4 * 2 ** (level + 1) + 2
    groups = np.empty(max_groups)
    for s in range(scen.shape[0]):
        rtau = scen[s]
        ee_total, ee_work = _scenario_setup(rtau, opts, s0, sig, params, flags, cache)
        work_f = ee_work
        work_c = 0.0
        if adaptive:
            n_f, w = adaptive_count(level, n0, c, r, rtau, thr[s], opts, cdf, s0, sig, params, flags, ee_total, cache, buf, scratch, rng)
            work_f += w
        else:
            n_f = n0 * 4**level
        if base or level == 0:
            s1, s2, w = inner_sums(n_f, n_f, rtau, thr[s], opts, cdf, s0, sig, params, flags, ee_total, cache, buf, scratch, rng, groups)
            h = 1.0 if s1 > 0.0 else 0.0
            d_out[s] = h
            f_out[s] = h
            n_out[s] = n_f
            work_out[s] = work_f + w
            work_fine_out[s] = work_f + w
            continue
        if adaptive:
            n_c, w = adaptive_count(level - 1, n0, c, r, rtau, thr[s], opts, cdf, s0, sig, params, flags, ee_total, cache, buf, scratch, rng)
            work_c += w
        else:
            n_c = n0 * 4 ** (level - 1)
        n_big = max(n_f, n_c)
        g = min(n_f, n_c)
        s1, s2, w = inner_sums(n_big, g, rtau, thr[s], opts, cdf, s0, sig, params, flags, ee_total, cache, buf, scratch, rng, groups)
        n_groups = n_big // g
        h_big = 1.0 if s1 > 0.0 else 0.0
        h_groups = 0.0
        for k in range(n_groups):
            if groups[k] > 0.0:
                h_groups += 1.0
        h_groups /= n_groups
        if n_f >= n_c:
            d_out[s] = h_big - h_groups
            f_out[s] = h_big
            work_fine_out[s] = work_f + w
        else:
            d_out[s] = h_groups - h_big
            f_out[s] = 1.0 if groups[0] > 0.0 else 0.0
            work_fine_out[s] = work_f + w * n_f / n_big
        n_out[s] = n_f
        work_out[s] = work_f + work_c + w


@njit(cache=True)
def inner_mean_block(scen, thr, n, opts, cdf, s0, sig, params, flags, rng, mean_out, var_out, work_out):
    """Plain inner means with n samples per scenario (brute-force and diagnostics)."""
    p = opts.shape[0]
    cache = np.empty(p)
    buf = np.empty((3, 4))
    scratch = np.empty(SCRATCH)
    groups = np.empty(1)
    for s in range(scen.shape[0]):
        rtau = scen[s]
        ee_total, ee_work = _scenario_setup(rtau, opts, s0, sig, params, flags, cache)
        s1, s2, w = inner_sums(n, n, rtau, thr[s], opts, cdf, s0, sig, params, flags, ee_total, cache, buf, scratch, rng, groups)
        mean = s1 / n
        mean_out[s] = mean
        var_out[s] = max(s2 / n - mean * mean, 0.0)
        work_out[s] = w + ee_work


@njit(cache=True)
def term_samples(i, rtau, n, opts, s0, sig, params, flags, rng, values, works):
    """n independent samples of term i at scenario rtau."""
    buf = np.empty((3, 4))
    scratch = np.empty(SCRATCH)
    for m in range(n):
        values[m], works[m] = term_value(i, rtau, opts, s0, sig, params, flags, buf, scratch, rng)


@njit(cache=True)
def level_difference_samples(i, rtau, level, n, opts, s0, sig, params, flags, rng, values, works):
    """n samples of the unweighted-by-level Milstein correction for approx-sim term i."""
    buf = np.empty((3, 4))
    scratch = np.empty(SCRATCH)
    row = opts[i]
    k = int(row[ASSET])
    for m in range(n):
        values[m], works[m] = milstein_loss(
            row, rtau[k], s0[k], sig[k], params[P_RATE], params[P_TAU], level,
            flags[F_ANTITHETIC] != 0, flags[F_APPROX_MODE], flags[F_SHARED_TAIL] != 0, buf, scratch, rng,
        )


@njit(cache=True)
def x_samples(rtau, thr, n, opts, cdf, s0, sig, params, flags, rng, values, works):
    """n inner samples of X at one scenario; exact-eval setup cost is charged to the first."""
    cache = np.empty(opts.shape[0])
    buf = np.empty((3, 4))
    scratch = np.empty(SCRATCH)
    ee_total, ee_work = _scenario_setup(rtau, opts, s0, sig, params, flags, cache)
    for m in range(n):
        values[m], works[m] = draw_x(rtau, thr, opts, cdf, s0, sig, params, flags, ee_total, cache, buf, scratch, rng)
    if n > 0:
        works[0] += ee_work
