"""Compiled inner loops: reflected Euler-Maruyama stepping and birth-death-translate MCMC.

All randomness arrives as pre-drawn arrays so results depend only on the
caller's numpy Generator.  ``box`` arrays hold periodic side lengths; an
all-zero array means free space.
"""

import math

import numpy as np
from numba import njit


@njit(cache=True)
def _delta(a, b, box, out):
    d = a.shape[0]
    r2 = 0.0
    for c in range(d):
        v = a[c] - b[c]
        L = box[c]
        if L > 0.0:
            v -= L * np.round(v / L)
        out[c] = v
        r2 += v * v
    return r2


@njit(cache=True)
def _dist2(a, b, box):
    r2 = 0.0
    for c in range(a.shape[0]):
        v = a[c] - b[c]
        L = box[c]
        if L > 0.0:
            v -= L * np.round(v / L)
        r2 += v * v
    return r2


@njit(cache=True)
def _wrap_point(x, box):
    for c in range(x.shape[0]):
        L = box[c]
        if L > 0.0:
            v = x[c] - L * math.floor(x[c] / L)
            if v >= L:
                v -= L
            x[c] = v


# ---------------------------------------------------------------------------
# profiles and fields

@njit(cache=True)
def _smooth(t):
    if t <= 0.0:
        return 0.0
    if t >= 1.0:
        return 1.0
    return t * t * t * (10.0 + t * (-15.0 + 6.0 * t))


@njit(cache=True)
def _smooth_prime(t):
    if t <= 0.0 or t >= 1.0:
        return 0.0
    return 30.0 * t * t * (t - 1.0) * (t - 1.0)


@njit(cache=True)
def _ramp(t):
    if t <= 0.0:
        return 0.0
    if t >= 1.0:
        return t - 0.5
    return t ** 4 * (2.5 + t * (-3.0 + t))


@njit(cache=True)
def field_value(x, R, centres, c2, const):
    d = x.shape[0]
    nrm = 0.0
    for c in range(d):
        nrm += x[c] * x[c]
    nrm = math.sqrt(nrm)
    v = const + _ramp(R ** (d + 1) * (nrm - R))
    for g in range(centres.shape[0]):
        r2 = 0.0
        for c in range(d):
            t = x[c] - centres[g, c]
            r2 += t * t
        tt = r2 / c2[g]
        if tt < 1.0:
            v += 1.0 - _smooth(tt)
    return v


@njit(cache=True)
def field_grad(x, R, centres, c2, grad):
    """Write the field gradient at x into ``grad``."""
    d = x.shape[0]
    for c in range(d):
        grad[c] = 0.0
    nrm = 0.0
    for c in range(d):
        nrm += x[c] * x[c]
    nrm = math.sqrt(nrm)
    scale = R ** (d + 1)
    t = scale * (nrm - R)
    if t > 0.0:
        f = scale * _smooth(t) / nrm
        for c in range(d):
            grad[c] += f * x[c]
    for g in range(centres.shape[0]):
        r2 = 0.0
        for c in range(d):
            u = x[c] - centres[g, c]
            r2 += u * u
        tt = r2 / c2[g]
        if tt < 1.0:
            f = 2.0 * _smooth_prime(tt) / c2[g]
            for c in range(d):
                grad[c] -= f * (x[c] - centres[g, c])


# ---------------------------------------------------------------------------
# overlap potential

@njit(cache=True)
def _sin_power_integral(theta, d):
    c = math.cos(theta)
    s = math.sin(theta)
    if d % 2 == 0:
        acc = theta
        k = 0
    else:
        acc = 1.0 - c
        k = 1
    while k < d:
        k += 2
        acc = (-c * s ** (k - 1) + (k - 1) * acc) / k
    return acc


@njit(cache=True)
def v_ovlap_scalar(u, d, r_dep, vol_lower):
    if u >= 1.0:
        return 0.0
    if d == 3:
        return 2.0 * math.pi * r_dep ** 3 * (2.0 / 3.0 - u + u ** 3 / 3.0)
    return 2.0 * vol_lower * r_dep ** d * _sin_power_integral(math.acos(u), d)


# ---------------------------------------------------------------------------
# reflected Euler-Maruyama

@njit(cache=True)
def build_pairs(S, P, box, cut_ss, cut_sp):
    n = S.shape[0]
    m = P.shape[0]
    c_ss = cut_ss * cut_ss
    c_sp = cut_sp * cut_sp
    k1 = 0
    for i in range(n):
        for j in range(i + 1, n):
            if _dist2(S[i], S[j], box) < c_ss:
                k1 += 1
    k2 = 0
    for i in range(n):
        for k in range(m):
            if _dist2(S[i], P[k], box) < c_sp:
                k2 += 1
    ss = np.empty((k1, 2), np.int64)
    sp = np.empty((k2, 2), np.int64)
    k1 = 0
    for i in range(n):
        for j in range(i + 1, n):
            if _dist2(S[i], S[j], box) < c_ss:
                ss[k1, 0] = i
                ss[k1, 1] = j
                k1 += 1
    k2 = 0
    for i in range(n):
        for k in range(m):
            if _dist2(S[i], P[k], box) < c_sp:
                sp[k2, 0] = i
                sp[k2, 1] = k
                k2 += 1
    return ss, sp


@njit(cache=True)
def project(S, P, box, ss, sp, lam_ss, lam_sp, two_r, r_dep, sig2, tol, max_sweeps):
    """Projected Gauss-Seidel on the candidate pairs.

    ``lam_*`` accumulate the non-negative multipliers of this step; a
    multiplier is the push divided by the current centre separation.
    Returns the number of sweeps used, or -1 without convergence.
    """
    d = S.shape[1]
    delta = np.empty(d)
    share = 1.0 / (1.0 + sig2)
    for sweep in range(max_sweeps):
        for q in range(ss.shape[0]):
            i = ss[q, 0]
            j = ss[q, 1]
            r2 = _delta(S[i], S[j], box, delta)
            lam = lam_ss[q]
            if r2 >= two_r * two_r and lam == 0.0:
                continue
            r = math.sqrt(r2)
            if r == 0.0:
                return -1
            dl = (two_r - r) / (2.0 * r)
            if lam + dl < 0.0:
                dl = -lam
            lam_ss[q] = lam + dl
            for c in range(d):
                S[i, c] += dl * delta[c]
                S[j, c] -= dl * delta[c]
        for q in range(sp.shape[0]):
            i = sp[q, 0]
            k = sp[q, 1]
            r2 = _delta(S[i], P[k], box, delta)
            lam = lam_sp[q]
            if r2 >= r_dep * r_dep and lam == 0.0:
                continue
            r = math.sqrt(r2)
            if r == 0.0:
                return -1
            dl = (r_dep - r) * share / r
            if lam + dl < 0.0:
                dl = -lam
            lam_sp[q] = lam + dl
            for c in range(d):
                S[i, c] += dl * delta[c]
                P[k, c] -= sig2 * dl * delta[c]
        # convergence check
        ok = True
        for q in range(ss.shape[0]):
            r = math.sqrt(_dist2(S[ss[q, 0]], S[ss[q, 1]], box))
            if two_r - r > tol or (lam_ss[q] > 0.0 and r - two_r > tol):
                ok = False
                break
        if ok:
            for q in range(sp.shape[0]):
                r = math.sqrt(_dist2(S[sp[q, 0]], P[sp[q, 1]], box))
                if r_dep - r > tol or (lam_sp[q] > 0.0 and r - r_dep > tol):
                    ok = False
                    break
        if ok:
            return sweep + 1
    return -1


@njit(cache=True)
def _max_disp2(X, ref, box):
    best = 0.0
    for i in range(X.shape[0]):
        r2 = _dist2(X[i], ref[i], box)
        if r2 > best:
            best = r2
    return best


@njit(cache=True)
def integrate(S, P, box, inc_S, inc_P, scale_S, scale_P, nsteps,
              mode, h, sig2, z_particle, d_vol_lower, r_dep, two_r,
              R, cen_s, c2_s, cen_p, c2_p,
              tol, max_sweeps, skin, L_ss, L_sp, wrap):
    """Advance ``nsteps`` steps in place.

    mode 0: no drift; 1: penalisation drift; 2: depletion drift.
    Returns (status, sweeps_max): status = nsteps on success, else the index
    of the failing step.
    """
    n = S.shape[0]
    m = P.shape[0]
    d = S.shape[1]
    cut_ss = max(two_r, 2.0 * r_dep if mode == 2 else two_r) + skin
    cut_sp = r_dep + skin
    ss, sp = build_pairs(S, P, box, cut_ss, cut_sp)
    ref_S = S.copy()
    ref_P = P.copy()
    drift_S = np.zeros((n, d))
    drift_P = np.zeros((m, d))
    grad = np.zeros(d)
    delta = np.empty(d)
    half_skin2 = (0.5 * skin) ** 2
    sweeps_max = 0
    for step in range(nsteps):
        # drift from the pre-step state
        if mode == 1:
            for i in range(n):
                field_grad(S[i], R, cen_s, c2_s, grad)
                for c in range(d):
                    drift_S[i, c] = -0.5 * h * grad[c]
            for k in range(m):
                field_grad(P[k], R, cen_p, c2_p, grad)
                for c in range(d):
                    drift_P[k, c] = -0.5 * h * sig2 * grad[c]
        elif mode == 2:
            for i in range(n):
                for c in range(d):
                    drift_S[i, c] = 0.0
            lim = 4.0 * r_dep * r_dep
            pref = d_vol_lower * r_dep ** (d - 1)
            for q in range(ss.shape[0]):
                i = ss[q, 0]
                j = ss[q, 1]
                r2 = _delta(S[i], S[j], box, delta)
                if r2 >= lim:
                    continue
                r = math.sqrt(r2)
                w = 1.0 - r2 / lim
                mag = pref * w ** ((d - 1) / 2.0) / r
                for c in range(d):
                    f = -0.5 * h * z_particle * mag * delta[c]
                    drift_S[i, c] += f
                    drift_S[j, c] -= f
        for i in range(n):
            for c in range(d):
                S[i, c] += scale_S * inc_S[step, i, c] + drift_S[i, c]
        for k in range(m):
            for c in range(d):
                P[k, c] += scale_P * inc_P[step, k, c] + drift_P[k, c]
        lam_ss = np.zeros(ss.shape[0])
        lam_sp = np.zeros(sp.shape[0])
        while True:
            if _max_disp2(S, ref_S, box) > half_skin2 or _max_disp2(P, ref_P, box) > half_skin2:
                # rebuild, carrying the multipliers of surviving pairs
                ss2, sp2 = build_pairs(S, P, box, cut_ss, cut_sp)
                l2 = np.zeros(ss2.shape[0])
                for q in range(ss.shape[0]):
                    if lam_ss[q] != 0.0:
                        for q2 in range(ss2.shape[0]):
                            if ss2[q2, 0] == ss[q, 0] and ss2[q2, 1] == ss[q, 1]:
                                l2[q2] = lam_ss[q]
                m2 = np.zeros(sp2.shape[0])
                for q in range(sp.shape[0]):
                    if lam_sp[q] != 0.0:
                        for q2 in range(sp2.shape[0]):
                            if sp2[q2, 0] == sp[q, 0] and sp2[q2, 1] == sp[q, 1]:
                                m2[q2] = lam_sp[q]
                ss, sp, lam_ss, lam_sp = ss2, sp2, l2, m2
                ref_S[:] = S
                ref_P[:] = P
            sw = project(S, P, box, ss, sp, lam_ss, lam_sp, two_r, r_dep, sig2, tol, max_sweeps)
            if sw < 0:
                return step, sweeps_max
            if sw > sweeps_max:
                sweeps_max = sw
            if _max_disp2(S, ref_S, box) <= half_skin2 and _max_disp2(P, ref_P, box) <= half_skin2:
                break
        for q in range(ss.shape[0]):
            v = lam_ss[q]
            if v != 0.0:
                L_ss[ss[q, 0], ss[q, 1]] += v
                L_ss[ss[q, 1], ss[q, 0]] += v
        for q in range(sp.shape[0]):
            v = lam_sp[q]
            if v != 0.0:
                L_sp[sp[q, 0], sp[q, 1]] += v
        if wrap:
            for i in range(n):
                _wrap_point(S[i], box)
            for k in range(m):
                _wrap_point(P[k], box)
    return nsteps, sweeps_max


# ---------------------------------------------------------------------------
# birth-death-translate Metropolis-Hastings

@njit(cache=True)
def _sphere_ok(x, skip, S, ns, P, mp, BS, BP, box, two_r2, r_dep2):
    for j in range(ns):
        if j != skip and _dist2(x, S[j], box) < two_r2:
            return False
    for k in range(mp):
        if _dist2(x, P[k], box) < r_dep2:
            return False
    for j in range(BS.shape[0]):
        if _dist2(x, BS[j], box) < two_r2:
            return False
    for k in range(BP.shape[0]):
        if _dist2(x, BP[k], box) < r_dep2:
            return False
    return True


@njit(cache=True)
def _particle_ok(x, S, ns, BS, box, r_dep2):
    for j in range(ns):
        if _dist2(x, S[j], box) < r_dep2:
            return False
    for j in range(BS.shape[0]):
        if _dist2(x, BS[j], box) < r_dep2:
            return False
    return True


@njit(cache=True)
def _local_energy(x, skip, S, ns, BS, box, d, r_dep, vol_lower, ball_vol):
    """Volume of B(x, r_dep) not shared with other depletion balls (pairwise)."""
    e = ball_vol
    lim = 4.0 * r_dep * r_dep
    for j in range(ns):
        if j == skip:
            continue
        r2 = _dist2(x, S[j], box)
        if r2 < lim:
            e -= v_ovlap_scalar(math.sqrt(r2) / (2.0 * r_dep), d, r_dep, vol_lower)
    for j in range(BS.shape[0]):
        r2 = _dist2(x, BS[j], box)
        if r2 < lim:
            e -= v_ovlap_scalar(math.sqrt(r2) / (2.0 * r_dep), d, r_dep, vol_lower)
    return e


@njit(cache=True)
def _mc_uncovered(x, pts, cell_start, cell_order, cover, ncell, width, box, r_dep2, delta_sign):
    """Count sample points within r_dep of x whose coverage is 0 (birth) or 1 (death);
    with ``delta_sign`` != 0 the coverage array is updated in place."""
    d = x.shape[0]
    base = np.empty(d, np.int64)
    for c in range(d):
        base[c] = int(math.floor(x[c] / width[c]))
    count = 0
    nb = 3 ** d
    for code in range(nb):
        flat = 0
        rem = code
        for c in range(d):
            off = rem % 3 - 1
            rem //= 3
            cc = (base[c] + off) % ncell[c]
            flat = flat * ncell[c] + cc
        for q in range(cell_start[flat], cell_start[flat + 1]):
            p = cell_order[q]
            if _dist2(x, pts[p], box) < r_dep2:
                if delta_sign == 0:
                    if cover[p] == 0:
                        count += 1
                elif delta_sign > 0:
                    cover[p] += 1
                else:
                    cover[p] -= 1
    return count


@njit(cache=True)
def _mc_unique(x, pts, cell_start, cell_order, cover, ncell, width, box, r_dep2):
    d = x.shape[0]
    base = np.empty(d, np.int64)
    for c in range(d):
        base[c] = int(math.floor(x[c] / width[c]))
    count = 0
    for code in range(3 ** d):
        flat = 0
        rem = code
        for c in range(d):
            off = rem % 3 - 1
            rem //= 3
            cc = (base[c] + off) % ncell[c]
            flat = flat * ncell[c] + cc
        for q in range(cell_start[flat], cell_start[flat + 1]):
            p = cell_order[q]
            if cover[p] == 1 and _dist2(x, pts[p], box) < r_dep2:
                count += 1
    return count


@njit(cache=True)
def mcmc_run(S, ns_arr, P, mp_arr, sid, pid, next_id, U, G, nsteps,
             model, z_s, z_p, wkind, wside, wrad, wvol, box, BS, BP,
             two_r, r_dep, d, vol_lower, ball_vol,
             p_birth, p_death, kick, cap_s, cap_p,
             R, cen_s, c2_s, const_s, cen_p, c2_p, const_p,
             emode, mc_pts, mc_start, mc_order, mc_cover, mc_ncell, mc_width, mc_cell_vol,
             counters, energy, trace_n, trace_m, do_trace):
    """Run up to ``nsteps`` moves.  model 0: two-type hard core; 1: two-type
    penalised; 2: one-type depletion.  wkind 0: box [0, wside); 1: ball B(0, wrad).
    Returns the number of moves completed (fewer when the arrays are full)."""
    ns = ns_arr[0]
    mp = mp_arr[0]
    two_r2 = two_r * two_r
    r_dep2 = r_dep * r_dep
    x = np.empty(d)
    for step in range(nsteps):
        u = U[step]
        g = G[step]
        sphere = model == 2 or u[1] < 0.5
        if u[0] < p_birth:
            mv = 0
        elif u[0] < p_birth + p_death:
            mv = 1
        else:
            mv = 2
        if mv == 0:
            # arrays full: hand back before counting so the caller can grow and retry
            if sphere and ns < cap_s and ns == S.shape[0]:
                return step
            if (not sphere) and mp < cap_p and mp == P.shape[0]:
                return step
        counters[2 * mv] += 1
        if mv == 0:
            if sphere and ns == cap_s:
                pass
            elif (not sphere) and mp == cap_p:
                pass
            else:
                if wkind == 0:
                    for c in range(d):
                        x[c] = u[5 + c] * wside[c]
                else:
                    nrm = 0.0
                    for c in range(d):
                        nrm += g[c] * g[c]
                    nrm = math.sqrt(nrm)
                    rad = wrad * u[4] ** (1.0 / d)
                    for c in range(d):
                        x[c] = rad * g[c] / nrm
                cnt = ns if sphere else mp
                z = z_s if sphere else z_p
                ratio = z * wvol / (cnt + 1) * p_death / p_birth
                if sphere:
                    ok = _sphere_ok(x, -1, S, ns, P, mp, BS, BP, box, two_r2, r_dep2)
                else:
                    ok = _particle_ok(x, S, ns, BS, box, r_dep2)
                de = 0.0
                if ok and model == 1:
                    if sphere:
                        ratio *= math.exp(-field_value(x, R, cen_s, c2_s, const_s))
                    else:
                        ratio *= math.exp(-field_value(x, R, cen_p, c2_p, const_p))
                if ok and model == 2 and z_p > 0.0:
                    if emode == 0:
                        de = _local_energy(x, -1, S, ns, BS, box, d, r_dep, vol_lower, ball_vol)
                    else:
                        de = mc_cell_vol * _mc_uncovered(x, mc_pts, mc_start, mc_order, mc_cover,
                                                         mc_ncell, mc_width, box, r_dep2, 0)
                    ratio *= math.exp(-z_p * de)
                if ok and u[3] < ratio:
                    if sphere:
                        for c in range(d):
                            S[ns, c] = x[c]
                        sid[ns] = next_id[0]
                        next_id[0] += 1
                        ns += 1
                        if model == 2 and emode == 1:
                            _mc_uncovered(x, mc_pts, mc_start, mc_order, mc_cover,
                                          mc_ncell, mc_width, box, r_dep2, 1)
                        energy[0] += de
                    else:
                        for c in range(d):
                            P[mp, c] = x[c]
                        pid[mp] = next_id[1]
                        next_id[1] += 1
                        mp += 1
                    counters[1] += 1
        elif mv == 1:
            cnt = ns if sphere else mp
            if cnt > 0:
                idx = int(u[2] * cnt)
                if idx >= cnt:
                    idx = cnt - 1
                z = z_s if sphere else z_p
                ratio = cnt / (z * wvol) * p_birth / p_death
                de = 0.0
                if model == 1:
                    if sphere:
                        ratio *= math.exp(field_value(S[idx], R, cen_s, c2_s, const_s))
                    else:
                        ratio *= math.exp(field_value(P[idx], R, cen_p, c2_p, const_p))
                if model == 2 and z_p > 0.0:
                    if emode == 0:
                        de = -_local_energy(S[idx], idx, S, ns, BS, box, d, r_dep, vol_lower, ball_vol)
                    else:
                        de = -mc_cell_vol * _mc_unique(S[idx], mc_pts, mc_start, mc_order, mc_cover,
                                                       mc_ncell, mc_width, box, r_dep2)
                    ratio *= math.exp(-z_p * de)
                if u[3] < ratio:
                    if sphere:
                        if model == 2 and emode == 1:
                            _mc_uncovered(S[idx], mc_pts, mc_start, mc_order, mc_cover,
                                          mc_ncell, mc_width, box, r_dep2, -1)
                        ns -= 1
                        for c in range(d):
                            S[idx, c] = S[ns, c]
                        sid[idx] = sid[ns]
                        energy[0] += de
                    else:
                        mp -= 1
                        for c in range(d):
                            P[idx, c] = P[mp, c]
                        pid[idx] = pid[mp]
                    counters[3] += 1
        else:
            cnt = ns if sphere else mp
            if cnt > 0:
                idx = int(u[2] * cnt)
                if idx >= cnt:
                    idx = cnt - 1
                inside = True
                for c in range(d):
                    x[c] = (S[idx, c] if sphere else P[idx, c]) + kick * g[d + c]
                if wkind == 0:
                    for c in range(d):
                        if box[c] > 0.0:
                            x[c] -= box[c] * math.floor(x[c] / box[c])
                            if x[c] >= box[c]:
                                x[c] -= box[c]
                        elif x[c] < 0.0 or x[c] >= wside[c]:
                            inside = False
                else:
                    nrm = 0.0
                    for c in range(d):
                        nrm += x[c] * x[c]
                    if nrm >= wrad * wrad:
                        inside = False
                if inside:
                    if sphere:
                        ok = _sphere_ok(x, idx, S, ns, P, mp, BS, BP, box, two_r2, r_dep2)
                    else:
                        ok = _particle_ok(x, S, ns, BS, box, r_dep2)
                    if ok:
                        ratio = 1.0
                        de = 0.0
                        if model == 1:
                            if sphere:
                                ratio = math.exp(field_value(S[idx], R, cen_s, c2_s, const_s)
                                                 - field_value(x, R, cen_s, c2_s, const_s))
                            else:
                                ratio = math.exp(field_value(P[idx], R, cen_p, c2_p, const_p)
                                                 - field_value(x, R, cen_p, c2_p, const_p))
                        if model == 2 and z_p > 0.0:
                            if emode == 0:
                                de = (_local_energy(x, idx, S, ns, BS, box, d, r_dep, vol_lower, ball_vol)
                                      - _local_energy(S[idx], idx, S, ns, BS, box, d, r_dep,
                                                      vol_lower, ball_vol))
                            else:
                                # remove, then re-add at x
                                lost = _mc_unique(S[idx], mc_pts, mc_start, mc_order, mc_cover,
                                                  mc_ncell, mc_width, box, r_dep2)
                                _mc_uncovered(S[idx], mc_pts, mc_start, mc_order, mc_cover,
                                              mc_ncell, mc_width, box, r_dep2, -1)
                                gained = _mc_uncovered(x, mc_pts, mc_start, mc_order, mc_cover,
                                                       mc_ncell, mc_width, box, r_dep2, 0)
                                _mc_uncovered(S[idx], mc_pts, mc_start, mc_order, mc_cover,
                                              mc_ncell, mc_width, box, r_dep2, 1)
                                de = mc_cell_vol * (gained - lost)
                            ratio = math.exp(-z_p * de)
                        if u[3] < ratio:
                            if sphere:
                                if model == 2 and emode == 1:
                                    _mc_uncovered(S[idx], mc_pts, mc_start, mc_order, mc_cover,
                                                  mc_ncell, mc_width, box, r_dep2, -1)
                                    _mc_uncovered(x, mc_pts, mc_start, mc_order, mc_cover,
                                                  mc_ncell, mc_width, box, r_dep2, 1)
                                for c in range(d):
                                    S[idx, c] = x[c]
                                energy[0] += de
                            else:
                                for c in range(d):
                                    P[idx, c] = x[c]
                            counters[5] += 1
        if do_trace:
            trace_n[step] = ns
            trace_m[step] = mp
        ns_arr[0] = ns
        mp_arr[0] = mp
    return nsteps
