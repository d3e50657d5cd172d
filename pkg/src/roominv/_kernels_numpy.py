"""Pure-numpy reference implementations of the hot kernels.

Every function here has a numba twin in ``_kernels_numba``; the active set is
picked in ``_accel`` (env var ``ROOMINV_DISABLE_NUMBA=1`` forces this module).
Shapes follow one convention throughout: microphone positions ``mics`` are
(M, 3), multichannel signals are (M, N) with channel-major flattening, spike
positions are (K, 3).
"""

import numpy as np

_SINC_EPS = 1e-8


def _sinc(u):
    """sin(u)/u with the removable singularity filled in (u in radians)."""
    u = np.asarray(u, dtype=np.float64)
    small = np.abs(u) < _SINC_EPS
    safe = np.where(small, 1.0, u)
    out = np.sin(safe) / safe
    return np.where(small, 1.0 - u * u / 6.0, out)


def _sinc_der(u):
    """d/du of sin(u)/u; series below 1e-4 where the direct formula cancels."""
    u = np.asarray(u, dtype=np.float64)
    small = np.abs(u) < 1e-4
    safe = np.where(small, 1.0, u)
    out = (safe * np.cos(safe) - np.sin(safe)) / (safe * safe)
    return np.where(small, -u / 3.0 + u ** 3 / 30.0, out)


def synth_rir(positions, amplitudes, mics, fs, c, n_samples):
    """Ideal low-passed point-source sum: (M, N) signal.

    x[m, n] = sum_k a_k * sinc(pi fs (n/fs - d_mk/c)) / (4 pi d_mk)
    """
    pos = np.asarray(positions, dtype=np.float64)
    amp = np.asarray(amplitudes, dtype=np.float64)
    mics = np.asarray(mics, dtype=np.float64)
    t = np.arange(n_samples, dtype=np.float64) / fs
    dist = np.linalg.norm(pos[np.newaxis, :, :] - mics[:, np.newaxis, :], axis=2)  # (M, K)
    u = np.pi * fs * (t[np.newaxis, np.newaxis, :] - dist[:, :, np.newaxis] / c)  # (M, K, N)
    contrib = _sinc(u) * (amp[np.newaxis, :, np.newaxis] / (4.0 * np.pi * dist[:, :, np.newaxis]))
    return contrib.sum(axis=1)


def slide_obj_grad(amplitudes, positions, mics, y, fs, c, lam):
    """Value and gradient of 0.5*||model - y||^2 + lam*sum(|a|).

    Gradient layout: [d/da (K,), d/dx flattened (3K,)].
    """
    a = np.asarray(amplitudes, dtype=np.float64)
    x = np.asarray(positions, dtype=np.float64)
    mics = np.asarray(mics, dtype=np.float64)
    m_count, n_samples = y.shape
    k_count = a.shape[0]
    t = np.arange(n_samples, dtype=np.float64) / fs

    diff = x[np.newaxis, :, :] - mics[:, np.newaxis, :]          # (M, K, 3)
    dist = np.sqrt(np.sum(diff * diff, axis=2))                  # (M, K)
    u = np.pi * fs * (t[np.newaxis, np.newaxis, :] - dist[:, :, np.newaxis] / c)
    gamma = _sinc(u) / (4.0 * np.pi * dist[:, :, np.newaxis])    # (M, K, N)
    resid = np.einsum("k,mkn->mn", a, gamma) - y                 # (M, N)
    value = 0.5 * np.sum(resid * resid) + lam * np.sum(np.abs(a))

    grad_a = np.einsum("mn,mkn->k", resid, gamma) + lam * np.sign(a)
    # d gamma / d dist = -(sinc'(u) * pi fs / c + gamma / dist)
    dg_ddist = -(_sinc_der(u) * (np.pi * fs / c) / (4.0 * np.pi * dist[:, :, np.newaxis])
                 + gamma / dist[:, :, np.newaxis])
    w = np.einsum("mn,mkn->mk", resid, dg_ddist) * a[np.newaxis, :]   # (M, K)
    grad_x = np.einsum("mk,mki->ki", w / dist, diff)                  # (K, 3)
    return value, np.concatenate([grad_a, grad_x.reshape(3 * k_count)])


def cert_num(point, mics, resid, fs, c):
    """<resid, gamma(point)> with gamma the unit-amplitude signature."""
    point = np.asarray(point, dtype=np.float64)
    mics = np.asarray(mics, dtype=np.float64)
    n_samples = resid.shape[1]
    t = np.arange(n_samples, dtype=np.float64) / fs
    dist = np.linalg.norm(point[np.newaxis, :] - mics, axis=1)   # (M,)
    u = np.pi * fs * (t[np.newaxis, :] - dist[:, np.newaxis] / c)
    gamma = _sinc(u) / (4.0 * np.pi * dist[:, np.newaxis])
    return float(np.sum(resid * gamma))


def cert_num_grad(point, mics, resid, fs, c):
    """(value, gradient) of cert_num with respect to the 3D point."""
    point = np.asarray(point, dtype=np.float64)
    mics = np.asarray(mics, dtype=np.float64)
    n_samples = resid.shape[1]
    t = np.arange(n_samples, dtype=np.float64) / fs
    diff = point[np.newaxis, :] - mics                           # (M, 3)
    dist = np.sqrt(np.sum(diff * diff, axis=1))                  # (M,)
    u = np.pi * fs * (t[np.newaxis, :] - dist[:, np.newaxis] / c)
    gamma = _sinc(u) / (4.0 * np.pi * dist[:, np.newaxis])
    value = float(np.sum(resid * gamma))
    dg_ddist = -(_sinc_der(u) * (np.pi * fs / c) / (4.0 * np.pi * dist[:, np.newaxis])
                 + gamma / dist[:, np.newaxis])
    w = np.sum(resid * dg_ddist, axis=1) / dist                  # (M,)
    grad = np.sum(w[:, np.newaxis] * diff, axis=0)
    return value, grad


def scan_points(resid_up, mics, points, fs, oversample, c):
    """Normalized (matched-filter) certificate approximation at many points:
    <resid, atom> / ||atom||, with the residual read off its oversampled
    (FFT zero-padded) interpolation, linearly between fine samples.
    Normalizing removes the 1/distance amplification so the ranking follows
    coherent residual energy."""
    points = np.asarray(points, dtype=np.float64)
    mics = np.asarray(mics, dtype=np.float64)
    n_up = resid_up.shape[1]
    dist = np.linalg.norm(points[:, np.newaxis, :] - mics[np.newaxis, :, :], axis=2)  # (P, M)
    pos = dist / c * fs * oversample
    idx = np.floor(pos).astype(np.int64)
    frac = pos - idx
    idx0 = np.clip(idx, 0, n_up - 1)
    idx1 = np.clip(idx + 1, 0, n_up - 1)
    rows = np.arange(mics.shape[0])[np.newaxis, :]
    vals = resid_up[rows, idx0] * (1.0 - frac) + resid_up[rows, idx1] * frac
    in_range = (pos >= 0.0) & (pos <= n_up - 1)
    vals = np.where(in_range, vals, 0.0)
    inv4pid = np.where(in_range, 1.0 / (4.0 * np.pi * dist), 0.0)
    num = np.sum(vals * inv4pid, axis=1)
    norm2 = np.sum(inv4pid * inv4pid, axis=1)
    return np.where(norm2 > 0.0, num / np.sqrt(np.where(norm2 > 0, norm2, 1.0)), 0.0)


def cert_norm_grad(point, mics, resid, fs, c):
    """Exact numerator <resid, atom>, atom squared norm, and both gradients
    with respect to the 3D point."""
    point = np.asarray(point, dtype=np.float64)
    mics = np.asarray(mics, dtype=np.float64)
    n_samples = resid.shape[1]
    t = np.arange(n_samples, dtype=np.float64) / fs
    diff = point[np.newaxis, :] - mics                           # (M, 3)
    dist = np.sqrt(np.sum(diff * diff, axis=1))                  # (M,)
    u = np.pi * fs * (t[np.newaxis, :] - dist[:, np.newaxis] / c)
    gamma = _sinc(u) / (4.0 * np.pi * dist[:, np.newaxis])
    dg_ddist = -(_sinc_der(u) * (np.pi * fs / c) / (4.0 * np.pi * dist[:, np.newaxis])
                 + gamma / dist[:, np.newaxis])
    num = float(np.sum(resid * gamma))
    norm2 = float(np.sum(gamma * gamma))
    w_num = np.sum(resid * dg_ddist, axis=1) / dist
    w_norm = np.sum(2.0 * gamma * dg_ddist, axis=1) / dist
    return num, np.sum(w_num[:, np.newaxis] * diff, axis=0), \
        norm2, np.sum(w_norm[:, np.newaxis] * diff, axis=0)


def j3_many(directions, pair_dirs, sigma):
    """Gaussian orthogonality score at many unit directions.

    Sum over pair directions of exp(-(u . d)^2 / (2 sigma^2)); the caller adds
    the diagonal-pair constant.
    """
    dots = np.asarray(directions, dtype=np.float64) @ np.asarray(pair_dirs, dtype=np.float64).T
    return np.sum(np.exp(-(dots * dots) / (2.0 * sigma * sigma)), axis=1)


def j3_grad_sph(theta, phi, pair_dirs, sigma):
    """(value, d/dtheta, d/dphi) of the Gaussian score at spherical angles.

    u = (cos(theta) sin(phi), sin(theta) sin(phi), cos(phi)).
    """
    pd = np.asarray(pair_dirs, dtype=np.float64)
    st, ct = np.sin(theta), np.cos(theta)
    sp, cp = np.sin(phi), np.cos(phi)
    u = np.array([ct * sp, st * sp, cp])
    du_dtheta = np.array([-st * sp, ct * sp, 0.0])
    du_dphi = np.array([ct * cp, st * cp, -sp])
    g = pd @ u
    e = np.exp(-(g * g) / (2.0 * sigma * sigma))
    w = -(g / (sigma * sigma)) * e
    return float(np.sum(e)), float(w @ (pd @ du_dtheta)), float(w @ (pd @ du_dphi))


def j2_many(thetas, pair_xy, sigma):
    """Gaussian orthogonality score on the circle.

    ``pair_xy`` holds the normalized in-plane pair directions as (Q, 2);
    v(theta) = (cos theta, sin theta) in the same in-plane basis.
    """
    thetas = np.asarray(thetas, dtype=np.float64)
    pair_xy = np.asarray(pair_xy, dtype=np.float64)
    g = np.cos(thetas)[:, np.newaxis] * pair_xy[np.newaxis, :, 0] \
        + np.sin(thetas)[:, np.newaxis] * pair_xy[np.newaxis, :, 1]
    return np.sum(np.exp(-(g * g) / (2.0 * sigma * sigma)), axis=1)


def j2_grad(theta, pair_xy, sigma):
    """(value, d/dtheta) of the circle score."""
    pair_xy = np.asarray(pair_xy, dtype=np.float64)
    ct, st = np.cos(theta), np.sin(theta)
    g = ct * pair_xy[:, 0] + st * pair_xy[:, 1]
    dg = -st * pair_xy[:, 0] + ct * pair_xy[:, 1]
    e = np.exp(-(g * g) / (2.0 * sigma * sigma))
    return float(np.sum(e)), float(np.sum(-(g / (sigma * sigma)) * e * dg))


def count_orth(directions, pair_dirs, tol):
    """Exact orthogonality count: pairs with |u . d| <= tol per direction."""
    dots = np.abs(np.asarray(directions, dtype=np.float64)
                  @ np.asarray(pair_dirs, dtype=np.float64).T)
    return np.sum(dots <= tol, axis=1).astype(np.int64)
