"""Noise model of magnitude MRI and the variance-stabilizing transform.

Multi-coil magnitude images follow a noncentral chi distribution: the
root-sum-of-squares of ``n_coils`` complex Gaussian channels with common
standard deviation ``sigma`` and total signal amplitude ``signal``.
This module provides the exact density / distribution functions, the
moment factors used elsewhere for noise estimation, and the per-voxel
mapping of magnitude values to Gaussian-distributed values with the
noise bias removed.

Everything accepts scalars; the array entry points used by
``stabilize_volume`` are vectorized over voxels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import integrate, special

__all__ = [
    "NcChiParams",
    "StabilizationResult",
    "ncchi_pdf",
    "ncchi_cdf",
    "gaussian_icdf",
    "magnitude_mean_factor",
    "variance_factor",
    "estimate_signal",
    "stabilize",
    "stabilize_volume",
]

# signal amplitudes below 1e-12 * sigma use the central-chi limit
_CENTRAL_EPS = 1e-12
# Bessel series is abandoned for pdf-quadrature above this argument
_SERIES_ARG_MAX = 1e4
# relative term size at which the Bessel series is cut off
_SERIES_TOL = 1e-14
# direct power series for 1F1(-1/2; n; z) is used for |z| <= 30
_KUMMER_SWITCH = 30.0


@dataclass(frozen=True)
class NcChiParams:
    """Parameters of a noncentral chi magnitude distribution.

    signal : underlying noise-free amplitude, >= 0
    sigma : Gaussian noise standard deviation per channel, > 0
    n_coils : number of complex channels summed, >= 1
    """

    signal: float
    sigma: float
    n_coils: int

    def __post_init__(self):
        if not (self.signal >= 0 and math.isfinite(self.signal)):
            raise ValueError(f"signal must be finite and >= 0, got {self.signal}")
        if not (self.sigma > 0 and math.isfinite(self.sigma)):
            raise ValueError(f"sigma must be finite and > 0, got {self.sigma}")
        if not (int(self.n_coils) == self.n_coils and self.n_coils >= 1):
            raise ValueError(f"n_coils must be an integer >= 1, got {self.n_coils}")


@dataclass(frozen=True)
class StabilizationResult:
    """Outcome of stabilizing one magnitude value.

    signal_estimate : amplitude recovered from the first-moment equation
    cdf_level : percentile of the value under the fitted distribution
    stabilized_value : Gaussian-equivalent value at the same percentile
    """

    signal_estimate: float
    cdf_level: float
    stabilized_value: float


def _log_bessel_i(order: float, x: np.ndarray) -> np.ndarray:
    """log I_order(x) for x >= 0, stable for both tiny and huge x."""
    x = np.asarray(x, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        ive = special.ive(order, x)
        out = np.where(ive > 0, np.log(np.where(ive > 0, ive, 1.0)) + x, -np.inf)
    # leading-order expansion where ive underflowed or x is tiny
    small = (x < 1e-6) | (ive <= 0)
    if np.any(small):
        xs = np.where(small, x, 1.0)
        with np.errstate(divide="ignore"):
            lead = order * np.log(xs / 2.0) - special.gammaln(order + 1.0)
        out = np.where(small, lead + np.log1p(xs * xs / (4.0 * (order + 1.0))), out)
    return out


def _log_bessel_i_int(k: int, x: np.ndarray) -> np.ndarray:
    """log I_k(x) for integer order k >= 0 and x > 0, underflow-proof.

    Uses the scaled Bessel function where it is representable and the
    exact ascending series (all-positive, fast for k > x) where the
    scaled value underflows.
    """
    x = np.asarray(x, dtype=np.float64)
    ive = special.ive(k, x)
    out = np.where(ive > 0, np.log(np.where(ive > 0, ive, 1.0)) + x, -np.inf)
    fb = ive <= 0
    if np.any(fb):
        xf = x[fb]
        q = 0.25 * xf * xf
        term = np.ones_like(xf)
        s = np.ones_like(xf)
        for j in range(10000):
            term = term * q / ((j + 1.0) * (k + 1.0 + j))
            s += term
            if np.all(term <= 1e-17 * s):
                break
        out[fb] = k * np.log(0.5 * xf) - special.gammaln(k + 1.0) + np.log(s)
    return out


def _hyp1f1_mhalf(z: np.ndarray, n: int) -> np.ndarray:
    """Confluent hypergeometric 1F1(-1/2; n; z) for z <= 0.

    Direct power series up to |z| = 30; beyond that the series suffers
    cancellation, so the transformed all-positive series
    exp(z) * 1F1(n + 1/2; n; -z) is summed in log scale instead.
    """
    z = np.atleast_1d(np.asarray(z, dtype=np.float64))
    if np.any(z > 0):
        raise ValueError("argument must be <= 0")
    out = np.empty_like(z)

    direct = np.abs(z) <= _KUMMER_SWITCH
    if np.any(direct):
        zd = z[direct]
        term = np.ones_like(zd)
        acc = np.ones_like(zd)
        a, b = -0.5, float(n)
        for k in range(500):
            term = term * zd * (a + k) / ((b + k) * (k + 1.0))
            acc += term
            if np.all(np.abs(term) <= 1e-17 * np.abs(acc)):
                break
        out[direct] = acc

    if np.any(~direct):
        x = -z[~direct]  # > 30
        c, b = n + 0.5, float(n)
        term = np.ones_like(x)
        acc = np.ones_like(x)
        scale = np.zeros_like(x)  # accumulated log rescaling
        kmax = int(np.max(x) + 12.0 * math.sqrt(np.max(x)) + 60)
        for k in range(kmax):
            term = term * x * (c + k) / ((b + k) * (k + 1.0))
            acc += term
            big = acc > 1e250
            if np.any(big):
                acc = np.where(big, acc * 1e-250, acc)
                term = np.where(big, term * 1e-250, term)
                scale = np.where(big, scale + 250.0 * math.log(10.0), scale)
            if np.all(term <= 1e-17 * acc):
                break
        out[~direct] = np.exp(-x + scale + np.log(acc))
    return out


def magnitude_mean_factor(n_coils: int) -> float:
    """Mean of a pure-noise magnitude in units of sigma.

    Equals sqrt(2) * Gamma(n + 1/2) / Gamma(n); 1.2533... for one coil.
    """
    if n_coils < 1 or int(n_coils) != n_coils:
        raise ValueError(f"n_coils must be an integer >= 1, got {n_coils}")
    n = float(n_coils)
    return math.sqrt(2.0) * math.exp(special.gammaln(n + 0.5) - special.gammaln(n))


def variance_factor(snr, n_coils: int):
    """Variance of the magnitude in units of sigma^2 at a given SNR.

    ``snr`` is signal / sigma.  The factor decreases from 2n - beta_n^2
    at snr = 0 towards 1 as snr grows (magnitude noise becomes Gaussian).
    Accepts scalars or arrays.
    """
    theta = np.asarray(snr, dtype=np.float64)
    if np.any(theta < 0):
        raise ValueError("snr must be >= 0")
    beta = magnitude_mean_factor(n_coils)
    f = _hyp1f1_mhalf(-0.5 * theta**2, n_coils).reshape(theta.shape)
    xi = 2.0 * n_coils + theta**2 - (beta * f) ** 2
    xi = np.maximum(xi, 0.0)
    return float(xi) if np.isscalar(snr) else xi


def ncchi_pdf(value, params: NcChiParams):
    """Probability density of the magnitude at ``value``.

    Uses the exact closed form with the modified Bessel function, and
    the central-chi limit when ``signal`` is numerically zero.
    """
    m = np.asarray(value, dtype=np.float64)
    if np.any(m < 0):
        raise ValueError("magnitude values must be >= 0")
    eta, sig, n = params.signal, params.sigma, float(params.n_coils)
    shape = m.shape
    m = np.atleast_1d(m)
    out = np.zeros_like(m)
    pos = m > 0
    mp = m[pos]
    with np.errstate(divide="ignore"):
        if eta < _CENTRAL_EPS * sig:
            logpdf = (
                (1.0 - n) * math.log(2.0)
                + (2.0 * n - 1.0) * np.log(mp)
                - 2.0 * n * math.log(sig)
                - mp * mp / (2.0 * sig * sig)
                - special.gammaln(n)
            )
        else:
            t = mp * eta / (sig * sig)
            logpdf = (
                n * np.log(mp)
                - 2.0 * math.log(sig)
                - (n - 1.0) * math.log(eta)
                - (mp * mp + eta * eta) / (2.0 * sig * sig)
                + _log_bessel_i(n - 1.0, t)
            )
    out[pos] = np.exp(logpdf)
    out = out.reshape(shape)
    return float(out) if np.isscalar(value) else out


def _ncchi_cdf_arr(m: np.ndarray, eta: np.ndarray, sigma: np.ndarray, n: int) -> np.ndarray:
    """Vectorized magnitude cdf; inputs broadcast to a common 1D shape."""
    m, eta, sigma = np.broadcast_arrays(m, eta, sigma)
    m = np.asarray(m, dtype=np.float64).ravel()
    eta = np.asarray(eta, dtype=np.float64).ravel()
    sigma = np.asarray(sigma, dtype=np.float64).ravel()
    out = np.zeros_like(m)

    a = eta / sigma
    b = m / sigma
    pos = b > 0

    central = pos & (a < 1.5e-8)
    if np.any(central):
        out[central] = special.gammainc(n, 0.5 * b[central] ** 2)

    series = pos & ~central & (a * b <= _SERIES_ARG_MAX)
    if np.any(series):
        out[series] = _cdf_bessel_series(a[series], b[series], n)

    heavy = pos & ~central & (a * b > _SERIES_ARG_MAX)
    for i in np.flatnonzero(heavy):
        out[i] = _cdf_quadrature(m[i], eta[i], sigma[i], n)
    return out


def _cdf_bessel_series(a: np.ndarray, b: np.ndarray, n: int) -> np.ndarray:
    """1 - Q_n(a, b) via the Bessel series of the Marcum Q function.

    Q_n(a,b) = exp(-(a-b)^2/2) * sum_{k=1-n}^inf (a/b)^k ive(k, a*b).
    Terms are formed in log scale so neither factor can overflow.  The
    term sequence is unimodal in k, so the cut happens only once terms
    are both decreasing and below the relative tolerance.  The term
    peak sits near max(a*b, a^2/2), which bounds the iteration count.
    When (a-b)^2/2 exceeds 700 every term underflows; there the cdf is
    0 or 1 to far better than double precision and is returned directly.
    """
    out = np.empty_like(a)
    under = 0.5 * (a - b) ** 2 > 700.0
    if np.any(under):
        out[under] = np.where(b[under] > a[under], 1.0, 0.0)
    todo = ~under
    if not np.any(todo):
        return out
    a = a[todo]
    b = b[todo]

    ab = a * b
    log_ratio = np.log(a) - np.log(b)
    base = -0.5 * (a * a + b * b)
    q = np.zeros_like(ab)
    active = np.ones_like(ab, dtype=bool)
    prev = np.full_like(ab, np.inf)
    peak = max(float(np.max(ab)), 0.5 * float(np.max(a)) ** 2)
    kmax = int(peak + 12.0 * math.sqrt(peak) + n + 80)
    for k in range(1 - n, kmax):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        term = np.exp(base[idx] + k * log_ratio[idx] + _log_bessel_i_int(abs(k), ab[idx]))
        q[idx] += term
        if k >= 1:
            # the term sequence rises to a single peak then falls; only a
            # falling, relatively tiny term on a started sum may stop it
            done = (q[idx] > 1e-290) & (term <= _SERIES_TOL * q[idx]) & (term <= prev[idx])
            active[idx[done]] = False
        prev[idx] = term
    out[todo] = np.clip(1.0 - q, 0.0, 1.0)
    return out


def _cdf_quadrature(m: float, eta: float, sigma: float, n: int) -> float:
    """Direct integration of the density; fallback for huge arguments."""
    params = NcChiParams(float(eta), float(sigma), n)
    center = math.sqrt(eta * eta + 2.0 * n * sigma * sigma)
    if m <= center - 12.0 * sigma:
        lo = 0.0
    else:
        lo = max(0.0, center - 12.0 * sigma)
    val, _ = integrate.quad(
        lambda t: ncchi_pdf(t, params), lo, m, limit=200, epsabs=1e-13, epsrel=1e-11
    )
    if lo > 0.0:
        tail, _ = integrate.quad(
            lambda t: ncchi_pdf(t, params), 0.0, lo, limit=200, epsabs=1e-13, epsrel=1e-11
        )
        val += tail
    return min(max(val, 0.0), 1.0)


def ncchi_cdf(value, params: NcChiParams):
    """Cumulative distribution of the magnitude at ``value``."""
    m = np.asarray(value, dtype=np.float64)
    if np.any(m < 0):
        raise ValueError("magnitude values must be >= 0")
    out = _ncchi_cdf_arr(
        np.atleast_1d(m),
        np.full(1 if m.ndim == 0 else m.shape, params.signal),
        np.full(1 if m.ndim == 0 else m.shape, params.sigma),
        params.n_coils,
    ).reshape(m.shape)
    return float(out) if np.isscalar(value) else out


def gaussian_icdf(level, mean=0.0, sigma=1.0):
    """Quantile function of N(mean, sigma^2).

    ``level`` must lie strictly inside (0, 1); the endpoints map to
    infinities and are rejected.
    """
    lv = np.asarray(level, dtype=np.float64)
    if np.any(lv <= 0.0) or np.any(lv >= 1.0):
        raise ValueError("level must lie strictly between 0 and 1")
    if np.any(np.asarray(sigma) <= 0):
        raise ValueError("sigma must be > 0")
    out = np.asarray(mean) + np.asarray(sigma) * special.ndtri(lv)
    return float(out) if np.isscalar(level) else out


def _invert_ratio_bisect(r: np.ndarray, n: int) -> np.ndarray:
    """Solve beta_n * 1F1(-1/2; n; -theta^2/2) = r for theta.

    Bisection on [0, r + 10] down to a residual of 1e-8 in ratio units.
    """
    beta = magnitude_mean_factor(n)
    lo = np.zeros_like(r)
    hi = r + 10.0
    mid = 0.5 * (lo + hi)
    active = np.ones_like(r, dtype=bool)
    for _ in range(200):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        f = beta * _hyp1f1_mhalf(-0.5 * mid[idx] ** 2, n) - r[idx]
        lower = f < 0
        lo[idx[lower]] = mid[idx[lower]]
        hi[idx[~lower]] = mid[idx[~lower]]
        active[idx[np.abs(f) < 1e-8]] = False
        mid = np.where(active, 0.5 * (lo + hi), mid)
    return mid


_RATIO_TABLE_CACHE: dict = {}
_TABLE_MIN_SIZE = 4096  # below this, plain bisection is cheaper


def _ratio_table(n: int, theta_need: float):
    """Cached (theta grid, mean/sigma ratio) pairs for inversion.

    The grid is dense where the ratio curve bends (small theta) and
    coarser on its asymptotically linear tail; interpolation error is
    well under the 1e-8 solver tolerance, and the caller re-verifies.
    """
    theta_max = max(8.0, math.ceil(theta_need / 8.0) * 8.0)
    key = (int(n), float(theta_max))
    hit = _RATIO_TABLE_CACHE.get(key)
    if hit is not None:
        return hit
    bend = min(8.0, theta_max)
    grid = np.concatenate(
        [
            np.linspace(0.0, bend, int(bend / 2e-4) + 1),
            np.linspace(bend, theta_max, int((theta_max - bend) / 2e-3) + 2)[1:],
        ]
    )
    vals = magnitude_mean_factor(n) * _hyp1f1_mhalf(-0.5 * grid * grid, n)
    vals = np.maximum.accumulate(vals)  # guard tiny numeric flats
    if len(_RATIO_TABLE_CACHE) >= 8:
        _RATIO_TABLE_CACHE.clear()
    _RATIO_TABLE_CACHE[key] = (grid, vals)
    return grid, vals


def _invert_ratio_table(r: np.ndarray, n: int) -> np.ndarray:
    """Table-interpolated inversion certified to the bisection tolerance.

    Every output is checked against the moment equation; the rare
    element beyond 1e-8 is re-solved by bisection, so this path meets
    the same contract as :func:`_invert_ratio_bisect` at a fraction of
    the cost on large inputs.
    """
    grid, vals = _ratio_table(n, float(r.max()) + 2.0)
    theta = np.interp(r, vals, grid)
    beta = magnitude_mean_factor(n)
    err = np.abs(beta * _hyp1f1_mhalf(-0.5 * theta * theta, n) - r)
    bad = err >= 1e-8
    if np.any(bad):
        theta[bad] = _invert_ratio_bisect(r[bad], n)
    return theta


def _estimate_signal_arr(
    m: np.ndarray, sigma: np.ndarray, n: int, beta_floor: bool
) -> np.ndarray:
    """Vectorized inversion of the first-moment equation.

    Solves beta_n * 1F1(-1/2; n; -theta^2/2) = m / sigma for theta to a
    residual below 1e-8 (bisection on [0, m/sigma + 10]; large batches
    go through the certified table inversion), then applies the noise
    floor: the result is zero when m/sigma does not exceed the
    pure-noise mean or when the solved amplitude falls below the floor
    threshold.
    """
    m, sigma = np.broadcast_arrays(m, sigma)
    m = np.asarray(m, dtype=np.float64).ravel()
    sigma = np.asarray(sigma, dtype=np.float64).ravel()
    beta = magnitude_mean_factor(n)
    ratio = m / sigma
    eta = np.zeros_like(m)

    solve = ratio > beta
    if np.any(solve):
        r = ratio[solve]
        if r.size >= _TABLE_MIN_SIZE:
            theta = _invert_ratio_table(r, n)
        else:
            theta = _invert_ratio_bisect(r, n)
        eta[solve] = theta * sigma[solve]

    floor = (beta if beta_floor else math.sqrt(math.pi / 2.0)) * sigma
    eta[eta < floor] = 0.0
    return eta


def estimate_signal(value, sigma, n_coils: int, beta_floor: bool = False):
    """Recover the noise-free amplitude underlying one magnitude value.

    Inverts the first moment of the magnitude distribution.  Values at
    or below the pure-noise mean, and solutions below the noise floor
    sigma * sqrt(pi/2), give zero.  Setting ``beta_floor`` raises the
    floor to the pure-noise mean itself.
    """
    m = np.asarray(value, dtype=np.float64)
    s = np.asarray(sigma, dtype=np.float64)
    if np.any(m < 0):
        raise ValueError("magnitude values must be >= 0")
    if np.any(s <= 0):
        raise ValueError("sigma must be > 0")
    out = _estimate_signal_arr(np.atleast_1d(m), np.atleast_1d(s), n_coils, beta_floor)
    out = out.reshape(np.broadcast_shapes(m.shape, s.shape))
    return float(out) if np.isscalar(value) and np.isscalar(sigma) else out


def _stabilize_arr(m, sigma, n: int, beta_floor: bool = False):
    m = np.asarray(m, dtype=np.float64).ravel()
    sigma = np.asarray(sigma, dtype=np.float64).ravel()
    eta = _estimate_signal_arr(m, sigma, n, beta_floor)
    alpha = _ncchi_cdf_arr(m, eta, sigma, n)
    alpha = np.clip(alpha, 1e-15, 1.0 - 1e-15)
    mhat = eta + sigma * special.ndtri(alpha)
    return eta, alpha, mhat


def stabilize(value: float, sigma: float, n_coils: int) -> StabilizationResult:
    """Map one magnitude value to its Gaussian-equivalent value.

    The amplitude is estimated from the first-moment equation, the
    percentile of ``value`` under the fitted magnitude distribution is
    computed (clamped to [1e-15, 1 - 1e-15]), and the Gaussian quantile
    at that percentile with the same amplitude and sigma is returned.
    The result may be negative for values deep in the noise.
    """
    if not np.isscalar(value) and np.asarray(value).ndim > 0:
        raise ValueError("stabilize takes a single value; use stabilize_volume for arrays")
    if value < 0:
        raise ValueError("magnitude values must be >= 0")
    if sigma <= 0:
        raise ValueError("sigma must be > 0")
    eta, alpha, mhat = _stabilize_arr([value], [sigma], n_coils)
    return StabilizationResult(float(eta[0]), float(alpha[0]), float(mhat[0]))


def stabilize_volume(vol, field, chunk: int = 1 << 21):
    """Stabilize every voxel of a 4D volume with a spatial noise field.

    ``field`` provides per-voxel ``sigma`` (3D) and ``n_coils``.  Voxels
    with sigma = 0 pass through unchanged.  Work is chunked to bound
    temporary memory; results do not depend on the chunking.
    """
    from .io import Volume4D

    data = vol.data
    sigma = np.broadcast_to(
        np.asarray(field.sigma, dtype=np.float64)[..., np.newaxis], data.shape
    )
    if sigma.shape[:3] != data.shape[:3]:
        raise ValueError("noise field shape does not match the volume")
    if np.any(np.asarray(field.sigma) < 0):
        raise ValueError("noise field contains negative sigma")
    out = data.astype(np.float64).copy()
    flat_m = data.reshape(-1)
    flat_s = sigma.reshape(-1)
    flat_o = out.reshape(-1)
    todo = np.flatnonzero(flat_s > 0)
    for start in range(0, todo.size, chunk):
        idx = todo[start : start + chunk]
        _, _, mhat = _stabilize_arr(flat_m[idx], flat_s[idx], field.n_coils)
        flat_o[idx] = mhat
    return Volume4D(out, vol.spacing, None if vol.header is None else vol.header.copy())
