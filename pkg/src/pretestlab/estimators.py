"""Slope estimators, sufficient statistics and variance-estimator pairs.

All functions broadcast over leading axes: a panel argument of shape
(..., N, T) yields statistics of shape (...).  This lets the Monte Carlo
engine evaluate whole batches of replicates in one call while single-panel
use keeps its natural scalar form.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import optimize

from .exceptions import DegenerateSampleError, NumericalError, ParameterError
from .config import EstimatorPair


@dataclass
class PanelStats:
    """Per-replicate sufficient statistics of the within/between regressions."""

    beta_W: np.ndarray
    beta_B: np.ndarray
    SSW: np.ndarray
    SSB: np.ndarray
    within_residuals: np.ndarray    # (..., N, T)
    between_residuals: np.ndarray   # (..., N)

    @property
    def r(self):
        """Ratio of between to within sums of squares, SSB / SSW."""
        return self.SSB / self.SSW


@dataclass
class VarianceEstimates:
    sigma_eps_hat2: np.ndarray
    sigma_mu_hat2: np.ndarray
    sigma_mu_tilde2: np.ndarray     # before clamping at zero

    @property
    def psi_hat(self):
        return np.sqrt(self.sigma_mu_hat2 / self.sigma_eps_hat2)


@dataclass
class WeightQuantities:
    """q = psi^2 + 1/T and the precision weights w, w_hat of the GLS slope."""

    q: np.ndarray
    w: np.ndarray
    w_hat: np.ndarray


def q_of(psi, T):
    """q(psi, T) = psi^2 + 1/T."""
    return np.asarray(psi) ** 2 + 1.0 / T


def weight_quantities(psi, psi_hat, T, r):
    q = q_of(psi, T)
    q_hat = q_of(psi_hat, T)
    return WeightQuantities(q=q, w=q / (q + r), w_hat=q_hat / (q_hat + r))


def _check_positive(value, what):
    if np.any(np.asarray(value) <= 0.0):
        raise DegenerateSampleError(f"{what} must be positive; got a degenerate sample")


def within_ols(x, y):
    """Fixed-effects (within) regression of demeaned y on demeaned x, no intercept.

    Returns (beta_W, SSW, residuals) with residuals of shape (..., N, T).
    """
    xd = x - x.mean(axis=-1, keepdims=True)
    yd = y - y.mean(axis=-1, keepdims=True)
    SSW = np.sum(xd * xd, axis=(-2, -1))
    _check_positive(SSW, "within sum of squares SSW")
    beta_W = np.sum(xd * yd, axis=(-2, -1)) / SSW
    residuals = yd - beta_W[..., None, None] * xd
    return beta_W, SSW, residuals


def between_ols(x, y):
    """Between regression of individual means ybar_i on xbar_i with intercept.

    Returns (beta_B, SSB, residuals) with residuals of shape (..., N).
    Needs N >= 3 so the residuals carry at least one degree of freedom.
    """
    if x.shape[-2] < 3:
        raise ParameterError(
            "between regression needs N >= 3 (intercept, slope and at least "
            "one residual degree of freedom)"
        )
    xbar_i = x.mean(axis=-1)
    ybar_i = y.mean(axis=-1)
    dx = xbar_i - xbar_i.mean(axis=-1, keepdims=True)
    dy = ybar_i - ybar_i.mean(axis=-1, keepdims=True)
    SSB = np.sum(dx * dx, axis=-1)
    _check_positive(SSB, "between sum of squares SSB")
    beta_B = np.sum(dx * dy, axis=-1) / SSB
    residuals = dy - beta_B[..., None] * dx
    return beta_B, SSB, residuals


def panel_stats(panel):
    """Within and between regressions of a PanelSample in one call."""
    beta_W, SSW, rw = within_ols(panel.x, panel.y)
    beta_B, SSB, rb = between_ols(panel.x, panel.y)
    return PanelStats(beta_W=beta_W, beta_B=beta_B, SSW=SSW, SSB=SSB,
                      within_residuals=rw, between_residuals=rb)


def gls_slope(beta_W, beta_B, SSW, SSB, psi, T):
    """Precision-weighted combination of the within and between slopes.

    beta_hat = (SSW beta_W + (SSB/q) beta_B) / (SSW + SSB/q), which realizes
    the feasible GLS slope of the random-intercept model at variance ratio
    psi and satisfies Var0(beta_hat | x) = sigma_eps^2 * w / SSW.
    """
    q = q_of(psi, T)
    wB = SSB / q
    return (SSW * beta_W + wB * beta_B) / (SSW + wB)


def conditional_variances(SSW, SSB, psi, T, sigma_eps):
    """Conditional variances (given x, exogenous case) of the three slopes.

    Returns (varW, var0B, var0GLS):
      Var(beta_W | x)       = sigma_eps^2 / SSW
      Var0(beta_B | x)      = sigma_eps^2 * q / SSB
      Var0(beta_hat | x)    = sigma_eps^2 * w / SSW,  w = q / (q + SSB/SSW)
    """
    _check_positive(SSW, "SSW")
    _check_positive(SSB, "SSB")
    q = q_of(psi, T)
    s2 = np.asarray(sigma_eps) ** 2
    varW = s2 / SSW
    var0B = s2 * q / SSB
    r = SSB / SSW
    var0GLS = s2 * (q / (q + r)) / SSW
    return varW, var0B, var0GLS


def variances_unbiased_from_sums(ss_within, ss_between, N, T, strict=True):
    """Unbiased variance pair from precomputed residual sums of squares."""
    if N * (T - 1) - 1 <= 0 or N - 2 <= 0:
        raise ParameterError(f"unbiased pair needs N(T-1) > 1 and N > 2; got N={N}, T={T}")
    if strict:
        _check_positive(ss_within, "within residual sum of squares")
    s_eps2 = ss_within / (N * (T - 1) - 1)
    s_mu2_tilde = ss_between / (N - 2) - ss_within / (N * T * (T - 1) - T)
    return VarianceEstimates(
        sigma_eps_hat2=s_eps2,
        sigma_mu_hat2=np.maximum(0.0, s_mu2_tilde),
        sigma_mu_tilde2=s_mu2_tilde,
    )


def variances_unbiased(within_residuals, between_residuals, N, T):
    """The usual unbiased estimators of the error and random-effect variances.

    sigma_eps_hat2 = sum r_it^2 / (N(T-1) - 1)
    sigma_mu_tilde2 = sum rbar_i^2 / (N-2) - sum r_it^2 / (NT(T-1) - T)
    sigma_mu_hat2 = max(0, sigma_mu_tilde2)
    """
    ss_within = np.sum(within_residuals ** 2, axis=(-2, -1))
    ss_between = np.sum(between_residuals ** 2, axis=-1)
    return variances_unbiased_from_sums(ss_within, ss_between, N, T)


def pooled_ols_residuals(x, y):
    """Residuals of the pooled OLS of y on (1, x), ignoring clustering."""
    xg = x.mean(axis=(-2, -1), keepdims=True)
    yg = y.mean(axis=(-2, -1), keepdims=True)
    dx = x - xg
    dy = y - yg
    ssx = np.sum(dx * dx, axis=(-2, -1))
    _check_positive(ssx, "pooled covariate sum of squares")
    b = np.sum(dx * dy, axis=(-2, -1)) / ssx
    return dy - b[..., None, None] * dx


_WOOLDRIDGE_CLAMP = 1e-6


def variances_wooldridge(pooled_residuals, N, T, K, strict=True):
    """Wooldridge's estimators from pooled OLS residuals, K in {0, 2}.

    sigma_mu_tilde2  = sum_{i, t<s} r_it r_is / (NT(T-1)/2 - K)
    sigma_eps_tilde2 = sum r_it^2 / (NT - K) - sigma_mu_tilde2
    with sigma_eps_hat2 = max(-1e-6 * tilde, tilde) and the usual zero clamp
    on the random-effect part.
    """
    if K not in (0, 2):
        raise ParameterError(f"Wooldridge correction K must be 0 or 2, got {K}")
    if N * T - K <= 0 or N * T * (T - 1) / 2 - K <= 0:
        raise ParameterError(f"too few observations for K={K}: N={N}, T={T}")
    r = pooled_residuals
    row_sums = r.sum(axis=-1)
    # sum over t<s of r_it r_is, via (sum_t r_it)^2 = sum r^2 + 2 sum_{t<s} ...
    cross = 0.5 * np.sum(row_sums ** 2 - np.sum(r * r, axis=-1), axis=-1)
    ss = np.sum(r * r, axis=(-2, -1))
    s_mu2_tilde = cross / (N * T * (T - 1) / 2.0 - K)
    s_eps2_tilde = ss / (N * T - K) - s_mu2_tilde
    s_eps2 = np.maximum(-_WOOLDRIDGE_CLAMP * s_eps2_tilde, s_eps2_tilde)
    if strict:
        _check_positive(s_eps2, "Wooldridge error-variance estimate")
    return VarianceEstimates(
        sigma_eps_hat2=s_eps2,
        sigma_mu_hat2=np.maximum(0.0, s_mu2_tilde),
        sigma_mu_tilde2=s_mu2_tilde,
    )


def _ml_suffstats(x, y):
    xd = x - x.mean(axis=-1, keepdims=True)
    yd = y - y.mean(axis=-1, keepdims=True)
    xbar_i = x.mean(axis=-1)
    ybar_i = y.mean(axis=-1)
    dxb = xbar_i - xbar_i.mean(axis=-1, keepdims=True)
    dyb = ybar_i - ybar_i.mean(axis=-1, keepdims=True)
    return {
        "SWxx": float(np.sum(xd * xd)), "SWxy": float(np.sum(xd * yd)),
        "SWyy": float(np.sum(yd * yd)), "SBxx": float(np.sum(dxb * dxb)),
        "SBxy": float(np.sum(dxb * dyb)), "SByy": float(np.sum(dyb * dyb)),
    }


def _ml_neg2_profile(theta, s, N, T):
    """-2 x profile log-likelihood (up to a constant) at variance ratio theta."""
    k = T / (1.0 + theta * T)
    num = s["SWxy"] + k * s["SBxy"]
    den = s["SWxx"] + k * s["SBxx"]
    Q = (s["SWyy"] + k * s["SByy"]) - num * num / den
    if Q <= 0.0:
        return np.inf
    return N * T * np.log(Q) + N * np.log(1.0 + theta * T)


def variances_hsiao_ml(panel):
    """Gaussian ML of (sigma_eps^2, sigma_mu^2) for the random-intercept model.

    The intercept and slope are profiled out by GLS at each variance ratio
    theta = sigma_mu^2 / sigma_eps^2, leaving a one-dimensional profile
    likelihood that is maximized over theta >= 0 by bracketing on a log
    scale; the boundary theta = 0 is checked explicitly.
    """
    x, y = panel.x, panel.y
    if x.ndim != 2:
        raise ParameterError("variances_hsiao_ml works on a single panel")
    N, T = x.shape
    s = _ml_suffstats(x, y)
    if s["SWxx"] <= 0 or s["SBxx"] <= 0:
        raise DegenerateSampleError("degenerate covariate panel in ML estimation")

    log_grid = np.linspace(np.log(1e-8), np.log(1e5), 80)
    values = [_ml_neg2_profile(np.exp(g), s, N, T) for g in log_grid]
    i = int(np.argmin(values))
    f0 = _ml_neg2_profile(0.0, s, N, T)

    theta_best, f_best = 0.0, f0
    if values[i] < f0:
        lo = log_grid[max(i - 1, 0)]
        hi = log_grid[min(i + 1, len(log_grid) - 1)]
        res = optimize.minimize_scalar(
            lambda g: _ml_neg2_profile(np.exp(g), s, N, T),
            bounds=(lo, hi), method="bounded",
            options={"xatol": 1e-12, "maxfun": 500},
        )
        if not res.success or not np.isfinite(res.fun):
            raise NumericalError(
                f"ML profile optimization failed after {res.nfev} evaluations: "
                f"{res.message}"
            )
        theta_best, f_best = float(np.exp(res.x)), float(res.fun)
        if values[i] < f_best:
            theta_best, f_best = float(np.exp(log_grid[i])), float(values[i])
    if f0 <= f_best:
        theta_best = 0.0

    k = T / (1.0 + theta_best * T)
    num = s["SWxy"] + k * s["SBxy"]
    den = s["SWxx"] + k * s["SBxx"]
    Q = (s["SWyy"] + k * s["SByy"]) - num * num / den
    s_eps2 = Q / (N * T)
    if s_eps2 <= 0.0:
        raise DegenerateSampleError("ML error-variance estimate is zero")
    s_mu2 = theta_best * s_eps2
    return VarianceEstimates(
        sigma_eps_hat2=np.asarray(s_eps2),
        sigma_mu_hat2=np.asarray(s_mu2),
        sigma_mu_tilde2=np.asarray(s_mu2),
    )


def ml_profile_value(panel, sigma_eps2, sigma_mu2):
    """-2 log-likelihood (up to the same constant as the ML path) at a point.

    Used to verify optimality of the ML estimates against other candidates.
    """
    x, y = panel.x, panel.y
    N, T = x.shape
    s = _ml_suffstats(x, y)
    if sigma_eps2 <= 0:
        return np.inf
    theta = sigma_mu2 / sigma_eps2
    k = T / (1.0 + theta * T)
    num = s["SWxy"] + k * s["SBxy"]
    den = s["SWxx"] + k * s["SBxx"]
    Q = (s["SWyy"] + k * s["SByy"]) - num * num / den
    return N * T * np.log(sigma_eps2) + N * np.log(1.0 + theta * T) + Q / sigma_eps2


def estimate_variances(panel, stats, pair):
    """Dispatch to the selected estimator pair."""
    N, T = panel.x.shape[-2], panel.x.shape[-1]
    if pair is EstimatorPair.UNBIASED:
        return variances_unbiased(stats.within_residuals, stats.between_residuals, N, T)
    if pair is EstimatorPair.HSIAO_ML:
        return variances_hsiao_ml(panel)
    return variances_wooldridge(
        pooled_ols_residuals(panel.x, panel.y), N, T, pair.wooldridge_K
    )
