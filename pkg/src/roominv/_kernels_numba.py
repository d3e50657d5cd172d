"""Numba-compiled twins of the kernels in ``_kernels_numpy``.

Parallelism is over independent outputs only (channels, grid points, spikes),
so results are bit-reproducible regardless of the thread count.
"""

import numpy as np
from numba import njit, prange

_SINC_EPS = 1e-8
_OPTS = dict(cache=True, fastmath=True)


@njit(inline="always", cache=True)
def _sinc_s(u):
    if abs(u) < _SINC_EPS:
        return 1.0 - u * u / 6.0
    return np.sin(u) / u


@njit(inline="always", cache=True)
def _sinc_der_s(u):
    if abs(u) < _SINC_EPS:
        return -u / 3.0
    return (u * np.cos(u) - np.sin(u)) / (u * u)


@njit(inline="always", cache=True)
def _sinc_pair(u):
    """(sinc, d sinc / du) sharing one sin/cos evaluation."""
    if abs(u) < _SINC_EPS:
        return 1.0 - u * u / 6.0, -u / 3.0
    s = np.sin(u)
    c = np.cos(u)
    return s / u, (u * c - s) / (u * u)


@njit(inline="always", cache=True)
def _phase_split(delay_samples):
    """Split fs*tau into (nearest integer, pi*frac, sin, cos of pi*frac).

    At sample n the sinc argument is pi*(n - fs*tau) = pi*j - phi with
    j = n - k0 integer, so sin/cos at every sample follow from one evaluation:
    sin = -(-1)^j sin(phi), cos = (-1)^j cos(phi).
    """
    k0 = int(np.rint(delay_samples))
    phi = np.pi * (delay_samples - k0)
    return k0, phi, np.sin(phi), np.cos(phi)


_SERIES_EPS = 1e-4  # |pi * frac| below which the j = 0 sample uses the series


@njit(inline="always", cache=True)
def _add_sincs(row, scale, k0, phi, s_phi, sign0, n_samples):
    """row[n] += scale * sinc(pi (n - k0) - phi) for all n, branch-free in
    the common case (the only near-zero argument is at n = k0)."""
    theta0 = np.pi * k0 + phi
    if abs(phi) >= _SERIES_EPS or k0 < 0 or k0 >= n_samples:
        c_even = -scale * s_phi * sign0
        for n in range(0, n_samples, 2):
            row[n] += c_even / (np.pi * n - theta0)
        for n in range(1, n_samples, 2):
            row[n] -= c_even / (np.pi * n - theta0)
    else:
        sign = sign0
        for n in range(n_samples):
            if n == k0:
                row[n] += scale * (1.0 - phi * phi / 6.0)
            else:
                row[n] += scale * (-sign * s_phi) / (np.pi * n - theta0)
            sign = -sign


@njit(parallel=True, **_OPTS)
def synth_rir(positions, amplitudes, mics, fs, c, n_samples):
    m_count = mics.shape[0]
    k_count = positions.shape[0]
    out = np.zeros((m_count, n_samples))
    for m in prange(m_count):
        for k in range(k_count):
            dx = positions[k, 0] - mics[m, 0]
            dy = positions[k, 1] - mics[m, 1]
            dz = positions[k, 2] - mics[m, 2]
            dist = np.sqrt(dx * dx + dy * dy + dz * dz)
            scale = amplitudes[k] / (4.0 * np.pi * dist)
            k0, phi, s_phi, _ = _phase_split(dist / c * fs)
            sign0 = 1.0 if (k0 % 2) == 0 else -1.0  # (-1)^j at n = 0
            _add_sincs(out[m], scale, k0, phi, s_phi, sign0, n_samples)
    return out


@njit(parallel=True, **_OPTS)
def slide_obj_grad(amplitudes, positions, mics, y, fs, c, lam):
    """Objective 0.5||model - y||^2 + lam sum|a| and its gradient.

    Inner sums are reduced to S1 = sum r~/u and S2 = sum r~/u^2 over samples,
    with r~ the sign-alternated residual, so the hot loop is one division and
    two fused multiply-adds per sample.
    """
    m_count, n_samples = y.shape
    k_count = amplitudes.shape[0]
    w = np.pi * fs

    resid = np.empty((m_count, n_samples))
    for m in prange(m_count):
        for n in range(n_samples):
            resid[m, n] = -y[m, n]
        for k in range(k_count):
            dx = positions[k, 0] - mics[m, 0]
            dy = positions[k, 1] - mics[m, 1]
            dz = positions[k, 2] - mics[m, 2]
            dist = np.sqrt(dx * dx + dy * dy + dz * dz)
            scale = amplitudes[k] / (4.0 * np.pi * dist)
            k0, phi, s_phi, _ = _phase_split(dist / c * fs)
            sign0 = 1.0 if (k0 % 2) == 0 else -1.0
            _add_sincs(resid[m], scale, k0, phi, s_phi, sign0, n_samples)

    value = 0.0
    for m in range(m_count):
        for n in range(n_samples):
            value += resid[m, n] * resid[m, n]
    value *= 0.5
    for k in range(k_count):
        value += lam * abs(amplitudes[k])

    resid_alt = np.empty((m_count, n_samples))
    for m in prange(m_count):
        for n in range(0, n_samples, 2):
            resid_alt[m, n] = resid[m, n]
        for n in range(1, n_samples, 2):
            resid_alt[m, n] = -resid[m, n]

    grad = np.zeros(4 * k_count)
    for k in prange(k_count):
        ga = 0.0
        gx = 0.0
        gy = 0.0
        gz = 0.0
        for m in range(m_count):
            dx = positions[k, 0] - mics[m, 0]
            dy = positions[k, 1] - mics[m, 1]
            dz = positions[k, 2] - mics[m, 2]
            dist = np.sqrt(dx * dx + dy * dy + dz * dz)
            inv4pid = 1.0 / (4.0 * np.pi * dist)
            k0, phi, s_phi, c_phi = _phase_split(dist / c * fs)
            sign0 = 1.0 if (k0 % 2) == 0 else -1.0
            theta0 = np.pi * k0 + phi
            special = abs(phi) < _SERIES_EPS and 0 <= k0 < n_samples
            s1 = 0.0
            s2 = 0.0
            if special:
                for n in range(k0):
                    t1 = 1.0 / (np.pi * n - theta0)
                    rn = resid_alt[m, n]
                    s1 += rn * t1
                    s2 += rn * t1 * t1
                for n in range(k0 + 1, n_samples):
                    t1 = 1.0 / (np.pi * n - theta0)
                    rn = resid_alt[m, n]
                    s1 += rn * t1
                    s2 += rn * t1 * t1
            else:
                for n in range(n_samples):
                    t1 = 1.0 / (np.pi * n - theta0)
                    rn = resid_alt[m, n]
                    s1 += rn * t1
                    s2 += rn * t1 * t1
            # sum_n resid * sinc and sum_n resid * sinc' reconstructed from
            # S1, S2 (sinc = -sign s_phi / u; sinc' = sign (c_phi/u + s_phi/u^2))
            acc_g = -s_phi * sign0 * s1
            acc_ds = sign0 * (c_phi * s1 + s_phi * s2)
            if special:
                # the j = 0 sample has sign +1: series for sinc and sinc'
                r0 = resid[m, k0]
                acc_g += r0 * (1.0 - phi * phi / 6.0)
                acc_ds += r0 * (phi / 3.0 - phi ** 3 / 30.0)
            acc_d = -((w / c) * inv4pid * acc_ds + (inv4pid / dist) * acc_g)
            ga += acc_g * inv4pid
            scale = amplitudes[k] * acc_d / dist
            gx += scale * dx
            gy += scale * dy
            gz += scale * dz
        grad[k] = ga + lam * np.sign(amplitudes[k])
        grad[k_count + 3 * k] = gx
        grad[k_count + 3 * k + 1] = gy
        grad[k_count + 3 * k + 2] = gz
    return value, grad


@njit(**_OPTS)
def cert_num(point, mics, resid, fs, c):
    m_count, n_samples = resid.shape
    total = 0.0
    for m in range(m_count):
        dx = point[0] - mics[m, 0]
        dy = point[1] - mics[m, 1]
        dz = point[2] - mics[m, 2]
        dist = np.sqrt(dx * dx + dy * dy + dz * dz)
        inv4pid = 1.0 / (4.0 * np.pi * dist)
        k0, phi, s_phi, _ = _phase_split(dist / c * fs)
        sign = 1.0 if (k0 % 2) == 0 else -1.0
        acc = 0.0
        for n in range(n_samples):
            u = np.pi * (n - k0) - phi
            if abs(u) < _SINC_EPS:
                acc += resid[m, n] * (1.0 - u * u / 6.0)
            else:
                acc += resid[m, n] * (-sign * s_phi) / u
            sign = -sign
        total += acc * inv4pid
    return total


@njit(**_OPTS)
def cert_num_grad(point, mics, resid, fs, c):
    m_count, n_samples = resid.shape
    w = np.pi * fs
    value = 0.0
    grad = np.zeros(3)
    for m in range(m_count):
        dx = point[0] - mics[m, 0]
        dy = point[1] - mics[m, 1]
        dz = point[2] - mics[m, 2]
        dist = np.sqrt(dx * dx + dy * dy + dz * dz)
        inv4pid = 1.0 / (4.0 * np.pi * dist)
        k0, phi, s_phi, c_phi = _phase_split(dist / c * fs)
        sign = 1.0 if (k0 % 2) == 0 else -1.0
        acc_g = 0.0
        acc_d = 0.0
        for n in range(n_samples):
            u = np.pi * (n - k0) - phi
            if abs(u) < 1e-4:
                s = 1.0 - u * u / 6.0
                ds = -u / 3.0 + u ** 3 / 30.0
            else:
                inv_u = 1.0 / u
                s = (-sign * s_phi) * inv_u
                ds = (u * (sign * c_phi) + sign * s_phi) * inv_u * inv_u
            g = s * inv4pid
            dgd = -(ds * (w / c) * inv4pid + g / dist)
            acc_g += resid[m, n] * g
            acc_d += resid[m, n] * dgd
            sign = -sign
        value += acc_g
        scale = acc_d / dist
        grad[0] += scale * dx
        grad[1] += scale * dy
        grad[2] += scale * dz
    return value, grad


@njit(parallel=True, **_OPTS)
def scan_points(resid_up, mics, points, fs, oversample, c):
    """Normalized (matched-filter) certificate approximation at many points:
    <resid, atom> / ||atom||, with the residual read off its oversampled
    interpolation.  Normalizing removes the 1/distance amplification so the
    ranking follows coherent residual energy."""
    p_count = points.shape[0]
    m_count = mics.shape[0]
    n_up = resid_up.shape[1]
    out = np.empty(p_count)
    rate = fs * oversample / c
    for p in prange(p_count):
        acc = 0.0
        norm2 = 0.0
        for m in range(m_count):
            dx = points[p, 0] - mics[m, 0]
            dy = points[p, 1] - mics[m, 1]
            dz = points[p, 2] - mics[m, 2]
            dist = np.sqrt(dx * dx + dy * dy + dz * dz)
            pos = dist * rate
            if pos < 0.0 or pos > n_up - 1:
                continue
            idx = int(pos)
            frac = pos - idx
            hi = idx + 1
            if hi > n_up - 1:
                hi = n_up - 1
            val = resid_up[m, idx] * (1.0 - frac) + resid_up[m, hi] * frac
            inv4pid = 1.0 / (4.0 * np.pi * dist)
            acc += val * inv4pid
            norm2 += inv4pid * inv4pid
        out[p] = acc / np.sqrt(norm2) if norm2 > 0.0 else 0.0
    return out


@njit(**_OPTS)
def cert_norm_grad(point, mics, resid, fs, c):
    """Exact numerator <resid, atom>, atom squared norm, and both gradients
    with respect to the 3D point.  Shares one pass over the samples."""
    m_count, n_samples = resid.shape
    w = np.pi * fs
    num = 0.0
    norm2 = 0.0
    gnum = np.zeros(3)
    gnorm2 = np.zeros(3)
    for m in range(m_count):
        dx = point[0] - mics[m, 0]
        dy = point[1] - mics[m, 1]
        dz = point[2] - mics[m, 2]
        dist = np.sqrt(dx * dx + dy * dy + dz * dz)
        inv4pid = 1.0 / (4.0 * np.pi * dist)
        k0, phi, s_phi, c_phi = _phase_split(dist / c * fs)
        sign = 1.0 if (k0 % 2) == 0 else -1.0
        acc_g = 0.0
        acc_d = 0.0
        acc_n = 0.0
        acc_nd = 0.0
        for n in range(n_samples):
            u = np.pi * (n - k0) - phi
            if abs(u) < 1e-4:
                s = 1.0 - u * u / 6.0
                ds = -u / 3.0 + u ** 3 / 30.0
            else:
                inv_u = 1.0 / u
                s = (-sign * s_phi) * inv_u
                ds = (u * (sign * c_phi) + sign * s_phi) * inv_u * inv_u
            g = s * inv4pid
            dgd = -(ds * (w / c) * inv4pid + g / dist)
            acc_g += resid[m, n] * g
            acc_d += resid[m, n] * dgd
            acc_n += g * g
            acc_nd += 2.0 * g * dgd
            sign = -sign
        num += acc_g
        norm2 += acc_n
        scale = acc_d / dist
        nscale = acc_nd / dist
        gnum[0] += scale * dx
        gnum[1] += scale * dy
        gnum[2] += scale * dz
        gnorm2[0] += nscale * dx
        gnorm2[1] += nscale * dy
        gnorm2[2] += nscale * dz
    return num, gnum, norm2, gnorm2


@njit(parallel=True, **_OPTS)
def j3_many(directions, pair_dirs, sigma):
    p_count = directions.shape[0]
    q_count = pair_dirs.shape[0]
    inv2s2 = 1.0 / (2.0 * sigma * sigma)
    out = np.empty(p_count)
    for p in prange(p_count):
        ux, uy, uz = directions[p, 0], directions[p, 1], directions[p, 2]
        acc = 0.0
        for q in range(q_count):
            g = ux * pair_dirs[q, 0] + uy * pair_dirs[q, 1] + uz * pair_dirs[q, 2]
            acc += np.exp(-g * g * inv2s2)
        out[p] = acc
    return out


@njit(**_OPTS)
def j3_grad_sph(theta, phi, pair_dirs, sigma):
    st, ct = np.sin(theta), np.cos(theta)
    sp, cp = np.sin(phi), np.cos(phi)
    ux, uy, uz = ct * sp, st * sp, cp
    tx, ty = -st * sp, ct * sp
    px, py, pz = ct * cp, st * cp, -sp
    inv_s2 = 1.0 / (sigma * sigma)
    value = 0.0
    d_theta = 0.0
    d_phi = 0.0
    for q in range(pair_dirs.shape[0]):
        dx, dy, dz = pair_dirs[q, 0], pair_dirs[q, 1], pair_dirs[q, 2]
        g = ux * dx + uy * dy + uz * dz
        e = np.exp(-0.5 * g * g * inv_s2)
        w = -g * inv_s2 * e
        value += e
        d_theta += w * (tx * dx + ty * dy)
        d_phi += w * (px * dx + py * dy + pz * dz)
    return value, d_theta, d_phi


@njit(parallel=True, **_OPTS)
def j2_many(thetas, pair_xy, sigma):
    p_count = thetas.shape[0]
    q_count = pair_xy.shape[0]
    inv2s2 = 1.0 / (2.0 * sigma * sigma)
    out = np.empty(p_count)
    for p in prange(p_count):
        ct, st = np.cos(thetas[p]), np.sin(thetas[p])
        acc = 0.0
        for q in range(q_count):
            g = ct * pair_xy[q, 0] + st * pair_xy[q, 1]
            acc += np.exp(-g * g * inv2s2)
        out[p] = acc
    return out


@njit(**_OPTS)
def j2_grad(theta, pair_xy, sigma):
    ct, st = np.cos(theta), np.sin(theta)
    inv_s2 = 1.0 / (sigma * sigma)
    value = 0.0
    deriv = 0.0
    for q in range(pair_xy.shape[0]):
        g = ct * pair_xy[q, 0] + st * pair_xy[q, 1]
        dg = -st * pair_xy[q, 0] + ct * pair_xy[q, 1]
        e = np.exp(-0.5 * g * g * inv_s2)
        value += e
        deriv -= g * inv_s2 * e * dg
    return value, deriv


@njit(parallel=True, **_OPTS)
def count_orth(directions, pair_dirs, tol):
    p_count = directions.shape[0]
    q_count = pair_dirs.shape[0]
    out = np.empty(p_count, dtype=np.int64)
    for p in prange(p_count):
        ux, uy, uz = directions[p, 0], directions[p, 1], directions[p, 2]
        acc = 0
        for q in range(q_count):
            g = ux * pair_dirs[q, 0] + uy * pair_dirs[q, 1] + uz * pair_dirs[q, 2]
            if abs(g) <= tol:
                acc += 1
        out[p] = acc
    return out
