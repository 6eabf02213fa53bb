"""Compiled inner loops for the round dynamics.

Everything here works on plain arrays so that numba can compile it.  Sums
always run in ascending index order (rows for activities, column-compressed
rows for dual sums), which makes every quantity bit-reproducible.

The main entry point is :func:`run_block`, which advances the dynamics from
round ``t`` until a round limit, a certified stop, a quiescent point, or a
full trace buffer, checking the per-round invariants along the way.  Run
state is passed in small integer/float vectors so the Python driver can
resume a run, swap parameters between blocks, or apply perturbations.
"""

import math

import numpy as np
from numba import njit

# Return codes of run_block.
ST_LIMIT = 0
ST_CONVERGED = 1
ST_QUIESCENT = 2
ST_FULL = 3

# Float parameter slots.
F_ALPHA = 0
F_LOGC = 1
F_KAPPA = 2
F_GAMMA = 3
F_BETA1 = 4
F_BETA2 = 5
F_EPS_ALG = 6
F_EPS_STOP = 7
F_W = 8
F_TAU0 = 9
F_TAU1 = 10
N_FPAR = 11

# Integer parameter slots.
I_IS_LOG = 0
I_FAST_FORWARD = 1
I_STOP_ON_GAP = 2
I_T_END = 3
I_TRACE_EVERY = 4
I_CHECK_ACS = 5
I_MASK_BASE = 6
I_HAS_MASK = 7
N_IPAR = 8

# Integer state slots.
S_T = 0
S_STAGE_START = 1
S_WARMUP = 2
S_ABSORBED = 3
S_PREV_VALID = 4
S_PREV_T = 5
S_BEST_T = 6
S_NROWS = 7
S_NEXT_REC = 8
S_FIRST_FEASIBLE = 9
S_EVALS = 10
S_JUMPS = 11
S_DEC_SAME = 12
N_SI = 13

# Float state slots.
SF_PREV_PHI = 0
SF_BEST_RATIO = 1
SF_LAST_GAP = 2
SF_LAST_OBJ = 3
N_SF = 4

# Invariant counters.
INV_CLAMP = 0
INV_FEASIBILITY = 1
INV_POTENTIAL = 2
INV_DRIFT = 3
INV_DUALITY = 4
INV_ACS1 = 5
INV_ACS2 = 6
INV_ACS3 = 7
INV_XI_FLOOR = 8
N_INV = 9

# Trace row layout.
RF_OBJ = 0
RF_POT = 1
RF_GAP = 2
RF_VIOL = 3
N_RF = 4
RI_ROUND = 0
RI_INC = 1
RI_DEC = 2
RI_CLAMPED = 3
RI_STAT = 4
RI_ACS1 = 5
RI_ACS2 = 6
RI_ACS3 = 7
N_RI = 8

# Stationary labels.
NONSTATIONARY = 0
STATIONARY = 1
PRE_TAU = 2

FEAS_TOL = 1e-12
GAP_FEAS_TOL = 1e-9
DRIFT_TOL = 1e-9
POT_TOL = 1e-12
DUALITY_TOL = 1e-9
FLOOR_TOL = 1e-9
ACS_REL_TOL = 1e-12


@njit(cache=True)
def seq_sum(v):
    acc = 0.0
    for k in range(v.size):
        acc += v[k]
    return acc


@njit(cache=True)
def row_activity(indptr, indices, data, x, out):
    m = indptr.size - 1
    for i in range(m):
        acc = 0.0
        for k in range(indptr[i], indptr[i + 1]):
            acc += data[k] * x[indices[k]]
        out[i] = acc


@njit(cache=True)
def column_dual_sums(col_ptr, col_idx, col_data, y, out):
    n = col_ptr.size - 1
    for j in range(n):
        acc = 0.0
        for k in range(col_ptr[j], col_ptr[j + 1]):
            acc += y[col_idx[k]] * col_data[k]
        out[j] = acc


@njit(cache=True)
def objective(w, x, alpha, is_log):
    acc = 0.0
    if is_log:
        for j in range(x.size):
            if x[j] <= 0.0:
                return -np.inf
            acc += w[j] * math.log(x[j])
    else:
        e = 1.0 - alpha
        for j in range(x.size):
            if x[j] == 0.0:
                if alpha > 1.0:
                    return -np.inf
                continue
            acc += w[j] * x[j] ** e / e
    return acc


@njit(cache=True)
def duals(act, log_c, kappa, y):
    """Fills ``y_i = exp(ln C + kappa (act_i - 1))``; returns the largest exponent."""
    zmax = -np.inf
    for i in range(act.size):
        z = log_c + kappa * (act[i] - 1.0)
        if z > zmax:
            zmax = z
        y[i] = math.exp(z)
    return zmax


@njit(cache=True)
def kkt_ratios(x, s, w, alpha, xi):
    for j in range(x.size):
        xi[j] = x[j] ** alpha * s[j] / w[j]


@njit(cache=True)
def gap_terms(w, x, xi, sum_y, alpha, is_log, W):
    """Duality gap from the per-agent ratios (see solver.duality_gap)."""
    if is_log:
        acc = 0.0
        for j in range(x.size):
            acc -= w[j] * math.log(xi[j])
        return acc + sum_y - W
    e = (alpha - 1.0) / alpha
    t1 = 0.0
    t3 = 0.0
    for j in range(x.size):
        wx = w[j] * x[j] ** (1.0 - alpha)
        r = math.exp(e * math.log(xi[j]))
        t1 += wx / (1.0 - alpha) * (r - 1.0)
        t3 += wx * r
    return t1 + sum_y - t3


@njit(cache=True)
def _evaluate(indptr, indices, data, col_ptr, col_idx, col_data, w, x, alpha,
              log_c, kappa, act, y, s, xi):
    row_activity(indptr, indices, data, x, act)
    duals(act, log_c, kappa, y)
    column_dual_sums(col_ptr, col_idx, col_data, y, s)
    kkt_ratios(x, s, w, alpha, xi)
    amax = -np.inf
    for i in range(act.size):
        if act[i] > amax:
            amax = act[i]
    return amax


@njit(cache=True)
def _decide(xi, gamma, dec):
    lo = 1.0 - gamma
    hi = 1.0 + gamma
    n_up = 0
    n_down = 0
    for j in range(xi.size):
        if xi[j] <= lo:
            dec[j] = 1
            n_up += 1
        elif xi[j] >= hi:
            dec[j] = -1
            n_down += 1
        else:
            dec[j] = 0
    return n_up, n_down


@njit(cache=True)
def _advance(x, dec, k, delta, beta1, beta2, z):
    """Applies ``k`` rounds of a fixed decision vector to ``x``."""
    if k == 1:
        up = 1.0 + beta1
        down = 1.0 - beta2
    else:
        up = math.exp(k * math.log1p(beta1))
        down = math.exp(k * math.log1p(-beta2))
    for j in range(x.size):
        if dec[j] > 0:
            z[j] = x[j] * up
        elif dec[j] < 0:
            v = x[j] * down
            z[j] = v if v > delta[j] else delta[j]
        else:
            z[j] = x[j]


@njit(cache=True)
def _same_after(k, x, dec, delta, beta1, beta2, gamma, indptr, indices, data,
                col_ptr, col_idx, col_data, w, alpha, log_c, kappa,
                z, act, y, s, xi, dec2, feasible):
    """True when ``k`` frozen rounds keep both the decisions and the
    feasibility status unchanged."""
    _advance(x, dec, k, delta, beta1, beta2, z)
    for j in range(z.size):
        if z[j] > 1.0:
            return False
    amax = _evaluate(indptr, indices, data, col_ptr, col_idx, col_data, w, z, alpha,
                     log_c, kappa, act, y, s, xi)
    if (amax <= 1.0) != feasible:
        return False
    _decide(xi, gamma, dec2)
    for j in range(z.size):
        if dec2[j] != dec[j]:
            return False
    return True


@njit(cache=True)
def run_block(indptr, indices, data, col_ptr, col_idx, col_data, w, delta,
              fpar, ipar, x, xi_prev, dec_prev, best_x, si, sf, masks,
              rows_f, rows_i, inv_count, inv_first):
    n = x.size
    m = indptr.size - 1
    alpha = fpar[F_ALPHA]
    log_c = fpar[F_LOGC]
    kappa = fpar[F_KAPPA]
    gamma = fpar[F_GAMMA]
    beta1 = fpar[F_BETA1]
    beta2 = fpar[F_BETA2]
    eps_alg = fpar[F_EPS_ALG]
    eps_stop = fpar[F_EPS_STOP]
    W = fpar[F_W]
    tau0 = fpar[F_TAU0]
    tau1 = fpar[F_TAU1]
    is_log = ipar[I_IS_LOG] != 0
    fast_forward = ipar[I_FAST_FORWARD] != 0
    stop_on_gap = ipar[I_STOP_ON_GAP] != 0
    t_end = ipar[I_T_END]
    every = ipar[I_TRACE_EVERY]
    check_acs = ipar[I_CHECK_ACS] != 0
    mask_base = ipar[I_MASK_BASE]
    has_mask = ipar[I_HAS_MASK] != 0
    cap = rows_f.shape[0]
    warm_len = math.ceil(tau0)

    act = np.empty(m)
    y = np.empty(m)
    s = np.empty(n)
    xi = np.empty(n)
    dec = np.empty(n, dtype=np.int8)
    z = np.empty(n)
    act2 = np.empty(m)
    y2 = np.empty(m)
    s2 = np.empty(n)
    xi2 = np.empty(n)
    dec2 = np.empty(n, dtype=np.int8)

    while True:
        t = si[S_T]
        if t >= t_end:
            return ST_LIMIT
        if si[S_NROWS] >= cap:
            return ST_FULL

        # (1) clamp into the box [delta_j, 1]
        for j in range(n):
            if x[j] < delta[j]:
                x[j] = delta[j]
            elif x[j] > 1.0:
                x[j] = 1.0

        # (2) duals and ratios from the clamped point
        amax = _evaluate(indptr, indices, data, col_ptr, col_idx, col_data, w, x, alpha,
                         log_c, kappa, act, y, s, xi)
        viol = amax - 1.0
        feasible = viol <= 0.0
        si[S_EVALS] += 1

        if si[S_ABSORBED] != 0 and viol > FEAS_TOL:
            inv_count[INV_FEASIBILITY] += 1
            if inv_first[INV_FEASIBILITY] < 0:
                inv_first[INV_FEASIBILITY] = t
        if feasible and si[S_ABSORBED] == 0:
            si[S_ABSORBED] = 1
            if si[S_FIRST_FEASIBLE] < 0:
                si[S_FIRST_FEASIBLE] = t
            if check_acs and si[S_WARMUP] < 0:
                si[S_WARMUP] = t + warm_len

        # diagnostics
        obj = objective(w, x, alpha, is_log)
        sum_y = seq_sum(y)
        phi = obj - sum_y / kappa
        xs_sum = 0.0
        wx_sum = 0.0
        xi_min = np.inf
        for j in range(n):
            xs_sum += x[j] * s[j]
            if is_log:
                wx_sum += w[j]
            else:
                wx_sum += w[j] * x[j] ** (1.0 - alpha)
            if xi[j] < xi_min:
                xi_min = xi[j]
        gap = np.nan
        if viol <= GAP_FEAS_TOL:
            gap = gap_terms(w, x, xi, sum_y, alpha, is_log, W)
            if math.isnan(gap):
                gap = np.inf  # duals underflowed; the certificate is vacuous
            scale = max(1.0, abs(obj), sum_y)
            if gap < -DUALITY_TOL * scale:
                inv_count[INV_DUALITY] += 1
                if inv_first[INV_DUALITY] < 0:
                    inv_first[INV_DUALITY] = t

        # potential monotonicity and ratio drift against the previous evaluation
        if si[S_PREV_VALID] != 0:
            prev_phi = sf[SF_PREV_PHI]
            if phi < prev_phi - POT_TOL * abs(prev_phi):
                inv_count[INV_POTENTIAL] += 1
                if inv_first[INV_POTENTIAL] < 0:
                    inv_first[INV_POTENTIAL] = t
            if feasible:
                k = t - si[S_PREV_T]
                lo = (1.0 - gamma / 4.0) ** k - DRIFT_TOL
                hi = (1.0 + gamma / 4.0) ** k + DRIFT_TOL
                bad = False
                for j in range(n):
                    if xi_prev[j] > 0.0 and xi[j] > 0.0:
                        r = xi[j] / xi_prev[j]
                        if r < lo or r > hi:
                            bad = True
                if bad:
                    inv_count[INV_DRIFT] += 1
                    if inv_first[INV_DRIFT] < 0:
                        inv_first[INV_DRIFT] = t

        # approximate complementary slackness
        acs1 = amax >= 1.0 - (1.0 + 1.0 / kappa) * eps_alg
        acs2 = sum_y <= (1.0 + 3.0 * eps_alg) * xs_sum
        acs3 = (1.0 - 3.0 * eps_alg) * sum_y <= xs_sum and xs_sum <= sum_y * (1.0 + ACS_REL_TOL)
        if si[S_WARMUP] >= 0 and t >= si[S_WARMUP]:
            if not acs1:
                inv_count[INV_ACS1] += 1
                if inv_first[INV_ACS1] < 0:
                    inv_first[INV_ACS1] = t
            if not acs2:
                inv_count[INV_ACS2] += 1
                if inv_first[INV_ACS2] < 0:
                    inv_first[INV_ACS2] = t
            if not acs3:
                inv_count[INV_ACS3] += 1
                if inv_first[INV_ACS3] < 0:
                    inv_first[INV_ACS3] = t
            if (not is_log) and alpha < 1.0 and not (xi_min > 1.0 - 1.25 * gamma - FLOOR_TOL):
                inv_count[INV_XI_FLOOR] += 1
                if inv_first[INV_XI_FLOOR] < 0:
                    inv_first[INV_XI_FLOOR] = t

        # stopping test and best-so-far tracking
        certified = False
        sf[SF_LAST_GAP] = gap
        sf[SF_LAST_OBJ] = obj
        if feasible and not math.isnan(gap):
            thr = eps_stop * (W if is_log else abs(obj))
            ratio = gap / thr
            if ratio < sf[SF_BEST_RATIO]:
                sf[SF_BEST_RATIO] = ratio
                si[S_BEST_T] = t
                for j in range(n):
                    best_x[j] = x[j]
            certified = ratio <= 1.0

        # (3) decisions against the common snapshot
        n_up, n_down = _decide(xi, gamma, dec)
        same = si[S_PREV_T] >= 0 and si[S_DEC_SAME] >= 0
        if same:
            for j in range(n):
                if dec[j] != dec_prev[j]:
                    same = False
                    break

        # (4) multiplicative update
        n_inc = 0
        n_dec = 0
        n_clamped = 0
        sp_w = 0.0
        sm_wx = 0.0
        spm_xs = 0.0
        movable = False
        row = t - mask_base
        for j in range(n):
            d = dec[j]
            if d > 0:
                movable = True
            elif d < 0 and x[j] > delta[j]:
                movable = True
            active = True
            if has_mask:
                active = masks[row, j] != 0
            if d == 0 or not active:
                z[j] = x[j]
                continue
            if d > 0:
                z[j] = x[j] * (1.0 + beta1)
                n_inc += 1
                sp_w += w[j]
                spm_xs += x[j] * s[j]
            else:
                v = x[j] * (1.0 - beta2)
                if v <= delta[j]:
                    n_clamped += 1
                    v = delta[j]
                z[j] = v
                if v < x[j]:
                    n_dec += 1
                    if is_log:
                        sm_wx += w[j]
                    else:
                        sm_wx += w[j] * x[j] ** (1.0 - alpha)
                    spm_xs += x[j] * s[j]

        # stationary classification of this round
        if t < si[S_STAGE_START] + tau0 + tau1:
            stat = PRE_TAU
        elif is_log:
            c1 = sp_w <= W / tau0
            c2 = (1.0 - 2.0 * gamma) * W <= xs_sum and xs_sum <= (1.0 + 2.0 * gamma) * W
            stat = STATIONARY if (c1 and c2) else NONSTATIONARY
        elif alpha < 1.0:
            c1 = sm_wx <= gamma * wx_sum
            c2 = xs_sum <= (1.0 + 1.25 * gamma) * wx_sum
            stat = STATIONARY if (c1 and c2) else NONSTATIONARY
        else:
            c1 = spm_xs <= gamma * wx_sum
            c2 = (1.0 - 2.0 * gamma) * wx_sum <= xs_sum
            stat = STATIONARY if (c1 and c2) else NONSTATIONARY

        quiescent = feasible and not movable
        stopping = (certified and stop_on_gap) or quiescent

        if t >= si[S_NEXT_REC] or stopping or t + 1 >= t_end:
            r = si[S_NROWS]
            rows_f[r, RF_OBJ] = obj
            rows_f[r, RF_POT] = phi
            rows_f[r, RF_GAP] = gap
            rows_f[r, RF_VIOL] = viol
            rows_i[r, RI_ROUND] = t
            rows_i[r, RI_INC] = n_inc
            rows_i[r, RI_DEC] = n_dec
            rows_i[r, RI_CLAMPED] = n_clamped
            rows_i[r, RI_STAT] = stat
            rows_i[r, RI_ACS1] = 1 if acs1 else 0
            rows_i[r, RI_ACS2] = 1 if acs2 else 0
            rows_i[r, RI_ACS3] = 1 if acs3 else 0
            si[S_NROWS] = r + 1
            si[S_NEXT_REC] = (t // every + 1) * every

        if certified and stop_on_gap:
            return ST_CONVERGED

        # bookkeeping for the next comparison
        sf[SF_PREV_PHI] = phi
        si[S_PREV_VALID] = 1 if feasible else 0
        si[S_PREV_T] = t
        si[S_DEC_SAME] = 1 if same else 0
        for j in range(n):
            xi_prev[j] = xi[j]
            dec_prev[j] = dec[j]

        # Exact fast-forward: in a single-direction phase whose decisions
        # persist, activities and ratios move monotonically, so the number of
        # further rounds with identical decisions (and feasibility status) can
        # be found by doubling and bisection; those rounds are then applied in
        # closed form.
        steps = 1
        if (fast_forward and not has_mask and same and movable
                and (n_up == 0 or n_down == 0) and t + 2 < t_end):
            limit = t_end - t - 1
            if _same_after(1, x, dec, delta, beta1, beta2, gamma, indptr, indices, data,
                           col_ptr, col_idx, col_data, w, alpha, log_c, kappa,
                           z, act2, y2, s2, xi2, dec2, feasible):
                lo_k = 1
                hi_k = 2
                while hi_k <= limit and _same_after(
                        hi_k, x, dec, delta, beta1, beta2, gamma, indptr, indices, data,
                        col_ptr, col_idx, col_data, w, alpha, log_c, kappa,
                        z, act2, y2, s2, xi2, dec2, feasible):
                    lo_k = hi_k
                    hi_k *= 2
                if hi_k > limit + 1:
                    hi_k = limit + 1
                while hi_k - lo_k > 1:
                    mid = (lo_k + hi_k) // 2
                    if _same_after(mid, x, dec, delta, beta1, beta2, gamma, indptr, indices,
                                   data, col_ptr, col_idx, col_data, w, alpha, log_c,
                                   kappa, z, act2, y2, s2, xi2, dec2, feasible):
                        lo_k = mid
                    else:
                        hi_k = mid
                steps = lo_k + 1
                si[S_JUMPS] += 1
            if steps > 1:
                _advance(x, dec, steps, delta, beta1, beta2, z)
            else:
                _advance(x, dec, 1, delta, beta1, beta2, z)

        # commit and check the box invariant on the new point
        for j in range(n):
            x[j] = z[j]
        bad_box = False
        for j in range(n):
            if x[j] < delta[j] or (feasible and x[j] > 1.0):
                bad_box = True
        if bad_box:
            inv_count[INV_CLAMP] += 1
            if inv_first[INV_CLAMP] < 0:
                inv_first[INV_CLAMP] = t
        si[S_T] = t + steps

        if quiescent:
            return ST_QUIESCENT
