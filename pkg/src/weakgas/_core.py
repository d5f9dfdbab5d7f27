"""Compiled primitives shared by the continuum and lattice code paths.

Everything here works on plain arrays so that numba can compile it.  Model
objects are lowered to tuples by ``Kernel.packed()`` / ``EnergyDensity.packed()``
and ``QuadratureGrid.packed()``:

    kern = (code, params, range, taper)
    dens = (code, params, scale, lin)      # v_eff(phi) = scale * v(phi) + lin * phi
    grid = (origin, spacing, shape, weights)

``weights`` are ``g(x_k) * h**d`` at the midpoint nodes.
"""

import math

import numpy as np
from numba import njit

GAUSSIAN = 0
TENT = 1
BALL = 2

ZERO = 0
LINEAR = 1
LOGCOSH = 2
SQRT_SAT = 3
TABULATED = 4

LN2 = math.log(2.0)


# -- kernels ---------------------------------------------------------------


@njit(cache=True)
def kernel_profile(code, p, rmax, taper, d, r):
    if r > rmax:
        return 0.0
    if code == GAUSSIAN:
        s = p[0]
        val = (2.0 * math.pi * s * s) ** (-0.5 * d) * math.exp(-0.5 * r * r / (s * s))
    elif code == TENT:
        if r >= p[1]:
            return 0.0
        val = p[0] * (1.0 - r / p[1])
    else:
        height, a, w = p[0], p[1], p[2]
        if r >= a:
            return 0.0
        if r <= a - w:
            val = height
        else:
            val = height * 0.5 * (1.0 + math.cos(math.pi * (r - (a - w)) / w))
    if taper > 0.0:
        r0 = rmax * (1.0 - taper)
        if r > r0:
            val *= (rmax - r) / (rmax - r0)
    return val


@njit(cache=True)
def kernel_at(kern, dx):
    r2 = 0.0
    for i in range(dx.shape[0]):
        r2 += dx[i] * dx[i]
    return kernel_profile(kern[0], kern[1], kern[2], kern[3], dx.shape[0], math.sqrt(r2))


@njit(cache=True)
def kernel_profile_many(code, p, rmax, taper, d, r):
    out = np.empty(r.shape[0])
    for i in range(r.shape[0]):
        out[i] = kernel_profile(code, p, rmax, taper, d, r[i])
    return out


# -- energy densities ------------------------------------------------------


@njit(cache=True)
def _spline(p, phi, order):
    n = int(p[0])
    x = p[1:1 + n]
    c = p[1 + n:1 + n + 4 * (n - 1)].reshape((4, n - 1))
    if phi < x[0]:
        # natural end conditions: the linear extension is C^2
        c2, c3 = c[2, 0], c[3, 0]
        if order == 0:
            return c3 + c2 * (phi - x[0])
        if order == 1:
            return c2
        return 0.0
    if phi > x[n - 1]:
        i = n - 2
        t = x[n - 1] - x[i]
        s0 = ((c[0, i] * t + c[1, i]) * t + c[2, i]) * t + c[3, i]
        s1 = (3.0 * c[0, i] * t + 2.0 * c[1, i]) * t + c[2, i]
        if order == 0:
            return s0 + s1 * (phi - x[n - 1])
        if order == 1:
            return s1
        return 0.0
    lo = 0
    hi = n - 1
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if x[mid] <= phi:
            lo = mid
        else:
            hi = mid
    t = phi - x[lo]
    if order == 0:
        return ((c[0, lo] * t + c[1, lo]) * t + c[2, lo]) * t + c[3, lo]
    if order == 1:
        return (3.0 * c[0, lo] * t + 2.0 * c[1, lo]) * t + c[2, lo]
    return 6.0 * c[0, lo] * t + 2.0 * c[1, lo]


@njit(cache=True)
def density_value(code, p, phi):
    if code == ZERO:
        return 0.0
    if code == LINEAR:
        return p[0] * phi
    if code == LOGCOSH:
        a = abs(phi)
        return -(a + math.log1p(math.exp(-2.0 * a)) - LN2) - phi
    if code == SQRT_SAT:
        return -phi * phi / (1.0 + math.sqrt(1.0 + phi * phi)) - phi
    return _spline(p, phi, 0) - p[p.shape[0] - 1]


@njit(cache=True)
def density_d1(code, p, phi):
    if code == ZERO:
        return 0.0
    if code == LINEAR:
        return p[0]
    if code == LOGCOSH:
        return -math.tanh(phi) - 1.0
    if code == SQRT_SAT:
        return -phi / math.sqrt(1.0 + phi * phi) - 1.0
    return _spline(p, phi, 1)


@njit(cache=True)
def density_d2(code, p, phi):
    if code == ZERO or code == LINEAR:
        return 0.0
    if code == LOGCOSH:
        e = math.exp(-2.0 * abs(phi))
        return -4.0 * e / ((1.0 + e) * (1.0 + e))
    if code == SQRT_SAT:
        q = 1.0 + phi * phi
        return -1.0 / (q * math.sqrt(q))
    return _spline(p, phi, 2)


@njit(cache=True)
def v_eff(dens, phi):
    return dens[2] * density_value(dens[0], dens[1], phi) + dens[3] * phi


@njit(cache=True)
def v_eff_d2(dens, phi):
    return dens[2] * density_d2(dens[0], dens[1], phi)


@njit(cache=True)
def density_many(code, p, phi, order):
    out = np.empty(phi.shape[0])
    for i in range(phi.shape[0]):
        if order == 0:
            out[i] = density_value(code, p, phi[i])
        elif order == 1:
            out[i] = density_d1(code, p, phi[i])
        else:
            out[i] = density_d2(code, p, phi[i])
    return out


# -- grid loops ------------------------------------------------------------


@njit(cache=True)
def _index_range(y, R, origin, h, n):
    lo = int(math.floor((y - R - origin) / h - 0.5)) - 1
    hi = int(math.floor((y + R - origin) / h - 0.5)) + 1
    if lo < 0:
        lo = 0
    if hi > n - 1:
        hi = n - 1
    return lo, hi


@njit(cache=True)
def _box_range(grid, kern, y1, y2, k):
    origin, h, shape = grid[0], grid[1], grid[2]
    R = kern[2]
    a0, a1 = _index_range(y1[k], R, origin[k], h, shape[k])
    b0, b1 = _index_range(y2[k], R, origin[k], h, shape[k])
    return min(a0, b0), max(a1, b1)


@njit(cache=True)
def pair_delta(phi, grid, kern, dens, y1, s1, y2, s2, apply):
    """Energy change for phi += s1 G(. - y1) + s2 G(. - y2), optionally applied."""
    origin, h, shape, gw = grid[0], grid[1], grid[2], grid[3]
    d = y1.shape[0]
    dx1 = np.empty(d)
    dx2 = np.empty(d)
    total = 0.0
    i0, i1 = _box_range(grid, kern, y1, y2, 0)
    if d == 1:
        for i in range(i0, i1 + 1):
            x = origin[0] + (i + 0.5) * h
            dx1[0] = x - y1[0]
            dx2[0] = x - y2[0]
            dp = 0.0
            if s1 != 0.0:
                dp += s1 * kernel_at(kern, dx1)
            if s2 != 0.0:
                dp += s2 * kernel_at(kern, dx2)
            if dp != 0.0:
                if gw[i] != 0.0:
                    total += gw[i] * (v_eff(dens, phi[i] + dp) - v_eff(dens, phi[i]))
                if apply:
                    phi[i] += dp
    else:
        j0, j1 = _box_range(grid, kern, y1, y2, 1)
        n1 = shape[1]
        for i in range(i0, i1 + 1):
            xa = origin[0] + (i + 0.5) * h
            dx1[0] = xa - y1[0]
            dx2[0] = xa - y2[0]
            for j in range(j0, j1 + 1):
                xb = origin[1] + (j + 0.5) * h
                dx1[1] = xb - y1[1]
                dx2[1] = xb - y2[1]
                dp = 0.0
                if s1 != 0.0:
                    dp += s1 * kernel_at(kern, dx1)
                if s2 != 0.0:
                    dp += s2 * kernel_at(kern, dx2)
                if dp != 0.0:
                    k = i * n1 + j
                    if gw[k] != 0.0:
                        total += gw[k] * (v_eff(dens, phi[k] + dp) - v_eff(dens, phi[k]))
                    if apply:
                        phi[k] += dp
    return total


@njit(cache=True)
def smear(grid, kern, y):
    """Quadrature value of (G * g)(y) on the grid: sum_k w_k G(x_k - y)."""
    origin, h, shape, gw = grid[0], grid[1], grid[2], grid[3]
    d = y.shape[0]
    dx = np.empty(d)
    total = 0.0
    i0, i1 = _index_range(y[0], kern[2], origin[0], h, shape[0])
    if d == 1:
        for i in range(i0, i1 + 1):
            if gw[i] != 0.0:
                dx[0] = origin[0] + (i + 0.5) * h - y[0]
                total += gw[i] * kernel_at(kern, dx)
    else:
        j0, j1 = _index_range(y[1], kern[2], origin[1], h, shape[1])
        n1 = shape[1]
        for i in range(i0, i1 + 1):
            dx[0] = origin[0] + (i + 0.5) * h - y[0]
            for j in range(j0, j1 + 1):
                k = i * n1 + j
                if gw[k] != 0.0:
                    dx[1] = origin[1] + (j + 0.5) * h - y[1]
                    total += gw[k] * kernel_at(kern, dx)
    return total


@njit(cache=True)
def smear_many(grid, kern, ys):
    out = np.empty(ys.shape[0])
    for i in range(ys.shape[0]):
        out[i] = smear(grid, kern, ys[i])
    return out


@njit(cache=True)
def scatter_field(grid, kern, pos, chg, n):
    """Field at every grid node, particles added in index order."""
    N = grid[3].shape[0]
    phi = np.zeros(N)
    for j in range(n):
        if chg[j] != 0.0:
            _scatter_one(phi, grid, kern, pos[j], chg[j])
    return phi


@njit(cache=True)
def _scatter_one(phi, grid, kern, y, s):
    origin, h, shape = grid[0], grid[1], grid[2]
    d = y.shape[0]
    dx = np.empty(d)
    i0, i1 = _index_range(y[0], kern[2], origin[0], h, shape[0])
    if d == 1:
        for i in range(i0, i1 + 1):
            dx[0] = origin[0] + (i + 0.5) * h - y[0]
            phi[i] += s * kernel_at(kern, dx)
    else:
        j0, j1 = _index_range(y[1], kern[2], origin[1], h, shape[1])
        n1 = shape[1]
        for i in range(i0, i1 + 1):
            dx[0] = origin[0] + (i + 0.5) * h - y[0]
            for j in range(j0, j1 + 1):
                dx[1] = origin[1] + (j + 0.5) * h - y[1]
                phi[i * n1 + j] += s * kernel_at(kern, dx)


@njit(cache=True)
def field_energy(phi, gw, dens):
    total = 0.0
    for k in range(phi.shape[0]):
        if gw[k] != 0.0:
            total += gw[k] * v_eff(dens, phi[k])
    return total


@njit(cache=True)
def field_at_points(kern, pos, chg, cell_start, cell_items, cell_lo, cell_size, cell_shape, xs):
    """Field sum_j s_j G(x - y_j) at arbitrary points using a cell list."""
    d = pos.shape[1]
    out = np.zeros(xs.shape[0])
    dx = np.empty(d)
    idx = np.empty(d, np.int64)
    for q in range(xs.shape[0]):
        for k in range(d):
            idx[k] = int(math.floor((xs[q, k] - cell_lo[k]) / cell_size))
        total = 0.0
        if d == 1:
            for c0 in range(idx[0] - 1, idx[0] + 2):
                if c0 < 0 or c0 >= cell_shape[0]:
                    continue
                for t in range(cell_start[c0], cell_start[c0 + 1]):
                    j = cell_items[t]
                    dx[0] = xs[q, 0] - pos[j, 0]
                    total += chg[j] * kernel_at(kern, dx)
        else:
            for c0 in range(idx[0] - 1, idx[0] + 2):
                if c0 < 0 or c0 >= cell_shape[0]:
                    continue
                for c1 in range(idx[1] - 1, idx[1] + 2):
                    if c1 < 0 or c1 >= cell_shape[1]:
                        continue
                    c = c0 * cell_shape[1] + c1
                    for t in range(cell_start[c], cell_start[c + 1]):
                        j = cell_items[t]
                        dx[0] = xs[q, 0] - pos[j, 0]
                        dx[1] = xs[q, 1] - pos[j, 1]
                        total += chg[j] * kernel_at(kern, dx)
        out[q] = total
    return out


# -- test functions --------------------------------------------------------

GAUSS_BUMP = 0
PLATEAU_RAMP = 1
SMOOTH_BUMP = 2


@njit(cache=True)
def tf_value(code, p, y):
    """Test function at y; p = [amplitude, a1, a2, center...]."""
    d = y.shape[0]
    amp = p[0]
    if code == PLATEAU_RAMP:
        t = 0.0
        for k in range(d):
            a = abs(y[k] - p[3 + k])
            if a > t:
                t = a
        R, w = p[1], p[2]
        if w == 0.0:
            return amp if t <= R else 0.0
        u = (R + w - t) / w
        if u <= 0.0:
            return 0.0
        if u >= 1.0:
            return amp
        return amp * u
    r2 = 0.0
    for k in range(d):
        q = y[k] - p[3 + k]
        r2 += q * q
    if code == GAUSS_BUMP:
        return amp * math.exp(-0.5 * r2 / (p[1] * p[1]))
    r2 /= p[1] * p[1]
    if r2 >= 1.0:
        return 0.0
    return amp * math.exp(1.0 - 1.0 / (1.0 - r2))


@njit(cache=True)
def tf_many(code, p, ys):
    out = np.empty(ys.shape[0])
    for i in range(ys.shape[0]):
        out[i] = tf_value(code, p, ys[i])
    return out


@njit(cache=True)
def tf_table(codes, pars, ys):
    """Values of every test function (columns) at every point (rows)."""
    out = np.empty((ys.shape[0], codes.shape[0]))
    for i in range(ys.shape[0]):
        for t in range(codes.shape[0]):
            out[i, t] = tf_value(codes[t], pars[t], ys[i])
    return out


@njit(cache=True)
def _tf_update(P, A, codes, pars, y, ds, dabs):
    for t in range(codes.shape[0]):
        val = tf_value(codes[t], pars[t], y)
        P[t] += ds * val
        A[t] += dabs * val


# -- continuum Metropolis-Hastings ----------------------------------------

BIRTH = 0
DEATH = 1
MOVE = 2
RECHARGE = 3


@njit(cache=True)
def _pick(cum, u):
    for i in range(cum.shape[0]):
        if u < cum[i]:
            return i
    return cum.shape[0] - 1


@njit(cache=True)
def _reflect(x, lo, hi):
    L = hi - lo
    t = (x - lo) % (2.0 * L)
    if t > L:
        t = 2.0 * L - t
    return lo + t


@njit(cache=True)
def mh_run(pos, chg, cval, phi, P, A, sf, si, stats,
           grid, kern, dens, b_eff, atom_s, atom_cum, z, wlo, whi,
           move_scale, mix_cum, tf_codes, tf_pars, U, normals, start,
           burn, every, rec_P, rec_A, rec_n, rec_E, check_stab, tol):
    """Run the steps U[start:] of the chain.

    sf = [energy, bound, max_stability_excess]; si = [n, rec_count, global_step].
    stats[0:4] proposals by type, stats[4:8] acceptances, stats[8] stability
    violations.  Returns -1 when done, or the step index at which the particle
    buffer ran out of room (nothing of that step has been applied).
    """
    d = pos.shape[1]
    vol = 1.0
    for k in range(d):
        vol *= whi[k] - wlo[k]
    zW = z * vol
    y = np.empty(d)
    for k in range(start, U.shape[0]):
        n = si[0]
        kind = _pick(mix_cum, U[k, 0])
        stats[kind] += 1
        logu = math.log(U[k, 2]) if U[k, 2] > 0.0 else -np.inf
        if kind == BIRTH:
            if n == pos.shape[0]:
                stats[kind] -= 1
                return k
            for q in range(d):
                y[q] = wlo[q] + U[k, 4 + q] * (whi[q] - wlo[q])
            s = atom_s[_pick(atom_cum, U[k, 3])]
            dU = pair_delta(phi, grid, kern, dens, y, s, y, 0.0, False)
            if logu < math.log(zW / (n + 1)) - dU:
                pair_delta(phi, grid, kern, dens, y, s, y, 0.0, True)
                pos[n] = y
                chg[n] = s
                cval[n] = smear(grid, kern, y)
                sf[0] += dU
                sf[1] += b_eff * abs(s) * cval[n]
                _tf_update(P, A, tf_codes, tf_pars, y, s, abs(s))
                si[0] = n + 1
                stats[4 + kind] += 1
        elif n > 0:
            j = min(int(U[k, 1] * n), n - 1)
            s = chg[j]
            if kind == DEATH:
                dU = pair_delta(phi, grid, kern, dens, pos[j], -s, pos[j], 0.0, False)
                if logu < math.log(n / zW) - dU:
                    pair_delta(phi, grid, kern, dens, pos[j], -s, pos[j], 0.0, True)
                    _tf_update(P, A, tf_codes, tf_pars, pos[j], -s, -abs(s))
                    sf[0] += dU
                    sf[1] -= b_eff * abs(s) * cval[j]
                    pos[j] = pos[n - 1]
                    chg[j] = chg[n - 1]
                    cval[j] = cval[n - 1]
                    si[0] = n - 1
                    stats[4 + kind] += 1
            elif kind == MOVE:
                for q in range(d):
                    y[q] = _reflect(pos[j, q] + move_scale * normals[k, q], wlo[q], whi[q])
                dU = pair_delta(phi, grid, kern, dens, y, s, pos[j], -s, False)
                if logu < -dU:
                    pair_delta(phi, grid, kern, dens, y, s, pos[j], -s, True)
                    _tf_update(P, A, tf_codes, tf_pars, pos[j], -s, -abs(s))
                    _tf_update(P, A, tf_codes, tf_pars, y, s, abs(s))
                    c_new = smear(grid, kern, y)
                    sf[0] += dU
                    sf[1] += b_eff * abs(s) * (c_new - cval[j])
                    pos[j] = y
                    cval[j] = c_new
                    stats[4 + kind] += 1
            else:
                s_new = atom_s[_pick(atom_cum, U[k, 3])]
                ds = s_new - s
                if ds != 0.0:
                    dU = pair_delta(phi, grid, kern, dens, pos[j], ds, pos[j], 0.0, False)
                else:
                    dU = 0.0
                if logu < -dU:
                    if ds != 0.0:
                        pair_delta(phi, grid, kern, dens, pos[j], ds, pos[j], 0.0, True)
                        _tf_update(P, A, tf_codes, tf_pars, pos[j], ds, abs(s_new) - abs(s))
                    sf[0] += dU
                    sf[1] += b_eff * (abs(s_new) - abs(s)) * cval[j]
                    chg[j] = s_new
                    stats[4 + kind] += 1
        if check_stab:
            excess = abs(sf[0]) - sf[1]
            if excess > sf[2]:
                sf[2] = excess
            if excess > tol:
                stats[8] += 1
        g = si[2]
        if g >= burn and (g - burn + 1) % every == 0:
            r = si[1]
            rec_P[r] = P
            rec_A[r] = A
            rec_n[r] = si[0]
            rec_E[r] = sf[0]
            si[1] = r + 1
        si[2] = g + 1
    return -1


# -- lattice single-site chain ---------------------------------------------


@njit(cache=True)
def lattice_delta(phi, arow, gw, dens, s):
    total = 0.0
    for k in range(phi.shape[0]):
        a = arow[k]
        if a != 0.0 and gw[k] != 0.0:
            total += gw[k] * (v_eff(dens, phi[k] + s * a) - v_eff(dens, phi[k]))
    return total


@njit(cache=True)
def lattice_run(counts, values, phi, P, sf, si, stats, Amat, gw, dens,
                atom_s, atom_p, atom_cum, mu, nmax, Pmat, U, burn, every,
                rec_P, rec_vals, rec_E, record_values):
    """Single-site add/remove chain on per-site atom counts.

    sf = [energy]; si = [rec_count, global_step]; stats = [proposals, accepts].
    """
    m = counts.shape[0]
    T = Pmat.shape[1]
    for k in range(U.shape[0]):
        j = min(int(U[k, 0] * m), m - 1)
        i = _pick(atom_cum, U[k, 2])
        s = atom_s[i]
        logu = math.log(U[k, 3]) if U[k, 3] > 0.0 else -np.inf
        stats[0] += 1
        tot = 0
        for q in range(counts.shape[1]):
            tot += counts[j, q]
        if U[k, 1] < 0.5:
            if tot < nmax:
                dU = lattice_delta(phi, Amat[j], gw, dens, s)
                if logu < math.log(mu * atom_p[i] / (counts[j, i] + 1)) - dU:
                    counts[j, i] += 1
                    values[j] += s
                    for q in range(phi.shape[0]):
                        phi[q] += s * Amat[j, q]
                    for t in range(T):
                        P[t] += s * Pmat[j, t]
                    sf[0] += dU
                    stats[1] += 1
        else:
            c = counts[j, i]
            if c > 0:
                dU = lattice_delta(phi, Amat[j], gw, dens, -s)
                if logu < math.log(c / (mu * atom_p[i])) - dU:
                    counts[j, i] -= 1
                    values[j] -= s
                    for q in range(phi.shape[0]):
                        phi[q] -= s * Amat[j, q]
                    for t in range(T):
                        P[t] -= s * Pmat[j, t]
                    sf[0] += dU
                    stats[1] += 1
        g = si[1]
        if g >= burn and (g - burn + 1) % every == 0:
            r = si[0]
            rec_P[r] = P
            rec_E[r] = sf[0]
            if record_values:
                rec_vals[r] = values
            si[0] = r + 1
        si[1] = g + 1
