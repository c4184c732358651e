"""Exact conditional laws of the two-stage procedure given the covariates.

Conditional on x, the standardized GLS pivot g_I, the standardized
fixed-effects pivot g_J and the standardized Hausman contrast h are jointly
bivariate normal in the pairs (g_I, h) and (g_J, h), with moments that
depend on x only through r = SSB/SSW and p = sqrt(SSB / Var(xbar_i)).
Evaluating the two rectangle probabilities in the total-probability
decomposition of the conditional coverage then needs nothing beyond a
bivariate normal CDF, implemented here from scratch.

All public functions broadcast elementwise over array inputs.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass

import numpy as np
from scipy.special import erfc, ndtri

from .exceptions import NumericalError, ParameterError

_SQRT2 = np.sqrt(2.0)
_TWOPI = 2.0 * np.pi


def norm_cdf(x):
    """Standard normal CDF through the complementary error function."""
    return 0.5 * erfc(-np.asarray(x, dtype=float) / _SQRT2)


# ---------------------------------------------------------------------------
# Bivariate normal rectangle probabilities
# ---------------------------------------------------------------------------

_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(20)
# map the symmetric rule onto [0, 1]
_GL_T = 0.5 * (1.0 + _GL_NODES)
_GL_W = 0.5 * _GL_WEIGHTS

_clamp_lock = threading.Lock()
_clamp_count = 0


def clamp_warning_count():
    """How many times a slightly out-of-range correlation was clamped."""
    return _clamp_count


def reset_clamp_warnings():
    global _clamp_count
    with _clamp_lock:
        _clamp_count = 0


def _bvnu_medium(h, k, r):
    """P(Z1 > h, Z2 > k) for |r| < 0.925 via tanh-free angular quadrature.

    Gauss-Legendre integration of the single-integral representation
    of the bivariate normal over the correlation angle.
    """
    hk = h * k
    hs = 0.5 * (h * h + k * k)
    asr = np.arcsin(r)
    sn = np.sin(asr[:, None] * _GL_T)  # (n, 20)
    num = sn * hk[:, None] - hs[:, None]
    integrand = np.exp(num / (1.0 - sn * sn))
    bvn = (integrand @ _GL_W) * asr / _TWOPI
    return bvn + norm_cdf(-h) * norm_cdf(-k)


def _bvnu_high(h, k, r):
    """P(Z1 > h, Z2 > k) for 0.925 <= |r| <= 1.

    Reformulation around the perfectly correlated limit with an asymptotic
    expansion plus Gauss-Legendre correction; follows the classic
    Drezner-Wesolowsky / Genz treatment of the high-correlation regime.
    """
    neg = r < 0.0
    k = np.where(neg, -k, k)
    hk = h * k
    bvn = np.zeros_like(h)

    interior = np.abs(r) < 1.0
    if np.any(interior):
        hi, ki, hki = h[interior], k[interior], hk[interior]
        ri = r[interior]
        tas = (1.0 - ri) * (1.0 + ri)
        a = np.sqrt(tas)
        bs = (hi - ki) ** 2
        c = (4.0 - hki) / 8.0
        d = (12.0 - hki) / 16.0
        asr0 = -0.5 * (bs / tas + hki)
        acc = np.where(
            asr0 > -100.0,
            a * np.exp(asr0)
            * (1.0 - c * (bs - tas) * (1.0 - 0.2 * d * bs) / 3.0 + 0.2 * c * d * tas * tas),
            0.0,
        )
        small_hk = -hki < 100.0
        b = np.sqrt(bs)
        sp = np.sqrt(_TWOPI) * norm_cdf(-b / a)
        acc = acc - np.where(
            small_hk,
            np.exp(-0.5 * hki) * sp * b * (1.0 - c * bs * (1.0 - 0.2 * d * bs) / 3.0),
            0.0,
        )
        a2 = 0.5 * a
        xs = (a2[:, None] * (2.0 * _GL_T[None, :])) ** 2  # (n, 20)
        rs = np.sqrt(1.0 - xs)
        asr1 = -0.5 * (bs[:, None] / xs + hki[:, None])
        sp1 = 1.0 + c[:, None] * xs * (1.0 + d[:, None] * xs)
        ep = np.exp(-hki[:, None] * (1.0 - rs) / (2.0 * (1.0 + rs))) / rs
        term = np.where(asr1 > -100.0, np.exp(asr1) * (ep - sp1), 0.0)
        acc = acc + a2 * (term @ _GL_WEIGHTS)
        bvn[interior] = -acc / _TWOPI

    pos = ~neg
    bvn = np.where(pos, bvn + norm_cdf(-np.maximum(h, k)),
                   -bvn + np.maximum(0.0, norm_cdf(-h) - norm_cdf(-k)))
    return bvn


def _bvnu(h, k, r):
    """Upper-orthant probability P(Z1 > h, Z2 > k), vectorized 1-D inputs."""
    out = np.empty_like(h)
    inf_either = np.isposinf(h) | np.isposinf(k)
    h_ninf = np.isneginf(h) & ~inf_either
    k_ninf = np.isneginf(k) & ~inf_either & ~h_ninf
    out[inf_either] = 0.0
    out[h_ninf] = norm_cdf(-k[h_ninf])
    out[k_ninf] = norm_cdf(-h[k_ninf])
    rest = ~(inf_either | h_ninf | k_ninf)
    if np.any(rest):
        hr, kr, rr = h[rest], k[rest], r[rest]
        val = np.empty_like(hr)
        med = np.abs(rr) < 0.925
        if np.any(med):
            val[med] = _bvnu_medium(hr[med], kr[med], rr[med])
        if np.any(~med):
            val[~med] = _bvnu_high(hr[~med], kr[~med], rr[~med])
        out[rest] = val
    return np.clip(out, 0.0, 1.0)


def std_bvn_cdf(x, y, corr):
    """P(Z1 <= x, Z2 <= y) for standard bivariate normal with correlation corr."""
    x, y, corr = np.broadcast_arrays(
        np.asarray(x, dtype=float), np.asarray(y, dtype=float),
        np.asarray(corr, dtype=float),
    )
    shape = x.shape
    res = _bvnu(-x.ravel(), -y.ravel(), corr.ravel()).reshape(shape)
    return res if shape else float(res)


def bvn_rect(lower1, upper1, lower2, upper2, mean1, mean2, var1, var2, cov):
    """P(lower1 <= Z1 <= upper1, lower2 <= Z2 <= upper2) for a bivariate normal.

    Bounds may be -inf/+inf.  A standardized correlation marginally outside
    [-1, 1] (rounding in var/cov inputs) is clamped and counted; see
    :func:`clamp_warning_count`.
    """
    global _clamp_count
    (lower1, upper1, lower2, upper2, mean1, mean2, var1, var2, cov) = [
        np.asarray(a, dtype=float)
        for a in (lower1, upper1, lower2, upper2, mean1, mean2, var1, var2, cov)
    ]
    if np.any(var1 <= 0.0) or np.any(var2 <= 0.0):
        raise ParameterError("bvn_rect needs strictly positive variances")
    if np.any(lower1 > upper1) or np.any(lower2 > upper2):
        raise ParameterError("bvn_rect bounds must satisfy lower <= upper")
    sd1 = np.sqrt(var1)
    sd2 = np.sqrt(var2)
    corr = cov / (sd1 * sd2)
    bad = np.abs(corr) > 1.0
    if np.any(bad):
        with _clamp_lock:
            _clamp_count += int(np.sum(bad))
        corr = np.clip(corr, -1.0, 1.0)
    a1 = (lower1 - mean1) / sd1
    b1 = (upper1 - mean1) / sd1
    a2 = (lower2 - mean2) / sd2
    b2 = (upper2 - mean2) / sd2
    p = (std_bvn_cdf(b1, b2, corr) - std_bvn_cdf(a1, b2, corr)
         - std_bvn_cdf(b1, a2, corr) + std_bvn_cdf(a1, a2, corr))
    return np.clip(p, 0.0, 1.0)


# ---------------------------------------------------------------------------
# Conditional moments and coverage
# ---------------------------------------------------------------------------

@dataclass
class ConditionalLaw:
    """Moments of (g_I, h) and (g_J, h) given x; g_J is standard normal."""

    mean_gI: np.ndarray
    var_gI: np.ndarray
    mean_h: np.ndarray
    var_h: np.ndarray
    cov_gI_h: np.ndarray
    cov_gJ_h: np.ndarray


def var_xbar(sigma_x, rho, T):
    """Population variance of an individual's covariate mean."""
    return sigma_x ** 2 * (1.0 + (T - 1) * rho) / T


def p_factor(SSB, sigma_x, rho, T):
    """p(x) = + sqrt(SSB / Var(xbar_i)), the scaled between dispersion."""
    return np.sqrt(np.asarray(SSB) / var_xbar(sigma_x, rho, T))


def conditional_moments(tau, psi, T, r, p):
    """Conditional bivariate-normal moments of (g_I, h) and (g_J, h) given x."""
    tau = np.asarray(tau, dtype=float)
    psi = np.asarray(psi, dtype=float)
    r = np.asarray(r, dtype=float)
    p = np.asarray(p, dtype=float)
    if np.any(r <= 0.0):
        raise ParameterError("r = SSB/SSW must be positive")
    if np.any(p < 0.0):
        raise ParameterError("p must be nonnegative")
    if np.any(np.abs(tau) >= 1.0) or np.any(psi <= 0.0):
        raise ParameterError("need |tau| < 1 and psi > 0")
    q = psi ** 2 + 1.0 / T
    tp2 = (tau * psi) ** 2
    denom_I = q + q * q / r
    denom_h = r + q
    law = ConditionalLaw(
        mean_gI=tau * psi * p / np.sqrt(denom_I),
        var_gI=1.0 - tp2 / denom_I,
        mean_h=-tau * psi * p / np.sqrt(denom_h),
        var_h=1.0 - tp2 / denom_h,
        cov_gI_h=tp2 / (np.sqrt(q * r + q * q) * np.sqrt(1.0 + q / r)),
        cov_gJ_h=1.0 / np.sqrt(1.0 + q / r),
    )
    if np.any(law.var_gI <= 0.0) or np.any(law.var_h <= 0.0):
        raise NumericalError(
            "conditional variance came out nonpositive for in-domain "
            "parameters; moment formulas are inconsistent"
        )
    return law


def _canonical_means(m1, m2):
    """Flip the signs of both means so the computation is sign-canonical.

    The coverage rectangles are symmetric, so jointly negating the two means
    leaves the probability unchanged; doing it explicitly makes evenness in
    the non-exogeneity parameter hold bit-exactly.
    """
    m1 = np.asarray(m1, dtype=float)
    m2 = np.asarray(m2, dtype=float)
    flip = (m1 < 0.0) | ((m1 == 0.0) & (m2 < 0.0))
    sign = np.where(flip, -1.0, 1.0)
    return sign * m1, sign * m2


def conditional_coverage_known(law, alpha, alpha_tilde):
    """Exact conditional coverage of the known-variance two-stage interval.

    (1 - alpha) + P(|g_I| <= z, |h| <= z_tilde | x)
                - P(|g_J| <= z, |h| <= z_tilde | x).
    """
    z = ndtri(1.0 - alpha / 2.0)
    zt = ndtri(1.0 - alpha_tilde / 2.0)
    mI, mh_I = _canonical_means(law.mean_gI, law.mean_h)
    p_I = bvn_rect(-z, z, -zt, zt, mI, mh_I, law.var_gI, law.var_h, law.cov_gI_h)
    mh_J = np.abs(np.asarray(law.mean_h, dtype=float))
    p_J = bvn_rect(-z, z, -zt, zt, 0.0, mh_J, 1.0, law.var_h, law.cov_gJ_h)
    return np.clip((1.0 - alpha) + p_I - p_J, 0.0, 1.0)


def accept_prob_given_x(law, alpha_tilde):
    """Conditional probability that the pretest accepts, P(|h| <= z_tilde | x)."""
    zt = ndtri(1.0 - alpha_tilde / 2.0)
    sd = np.sqrt(np.asarray(law.var_h, dtype=float))
    m = np.abs(np.asarray(law.mean_h, dtype=float))
    return norm_cdf((zt - m) / sd) - norm_cdf((-zt - m) / sd)
