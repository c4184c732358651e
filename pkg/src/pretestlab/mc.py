"""Monte Carlo engine: coverage probability and scaled expected length.

Coverage and length of the two-stage interval are invariant to the intercept,
the slope and the three scale parameters (sigma_eps, sigma_mu, sigma_x) once
(N, T, alpha, alpha_tilde, psi, rho, tau) are fixed, so the engine simulates
the standardized model (a = 0, beta = 0, sigma_eps = sigma_x = 1,
sigma_mu = psi) and the configured scales never enter the replicate loop.

Replicates are evaluated in fixed-size batches.  Batch b always covers the
same replicate indices and every reduction runs in batch order, so results
are bit-identical for any thread count, and identical streams are reused
across grid points (common random numbers).  Within a batch the covariate
and error noise statistics are computed once and shared by all grid points,
which the intercept structure makes exact: with beta = 0 the within
transform eliminates mu_i, so every within-regression quantity depends only
on (u, v, eps, rho) and not on (tau, psi).

Degenerate replicates (zero sums of squares, zero variance estimates) are
rejected and counted rather than clamped; a run refuses to report if more
than 0.1% of its replicates were rejected.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln, ndtri

from . import estimators as est
from . import exact_law as xl
from .config import EstimatorPair
from .exceptions import DegenerateSampleError, NumericalError, ParameterError
from .intervals import decide, hausman_statistic, interval_I, interval_Jc
from .rng import batch_streams

BATCH_SIZE = 4096
MAX_REJECT_FRACTION = 1e-3


@dataclass
class McEstimate:
    """A Monte Carlo point estimate with its standard error."""

    value: float
    std_error: float
    M: int
    wall_time_seconds: float = 0.0


@dataclass
class CoverageResult:
    cp_hat: McEstimate
    cpk_hat: McEstimate
    cpk_tilde: McEstimate
    cp_tilde: McEstimate
    rejected: int = 0


@dataclass
class SelComponents:
    lk_hat: McEstimate
    lk_tilde: McEstimate
    lj_hat: McEstimate
    lj_tilde: McEstimate
    sel: float
    c_star: float
    rejected: int = 0


@dataclass(frozen=True)
class Scenario:
    tau: float
    psi: float
    rho: float
    alpha_tilde: float

    @classmethod
    def from_config(cls, cfg):
        return cls(tau=cfg.tau, psi=cfg.psi, rho=cfg.rho,
                   alpha_tilde=cfg.alpha_tilde)


def ljk_expectation(N, T):
    """Closed form E[(sum (u_it - ubar_i)^2)^(-1/2)] for i.i.d. N(0,1) noise.

    The within sum of squares of the raw noise is chi-square with N(T-1)
    degrees of freedom, giving 2^(-1/2) Gamma((N(T-1)-1)/2) / Gamma(N(T-1)/2).
    """
    nu = N * (T - 1)
    return float(np.exp(-0.5 * np.log(2.0) + gammaln((nu - 1) / 2.0) - gammaln(nu / 2.0)))


def efficiency(var_hat, var_tilde, t_hat, t_tilde):
    """Relative efficiency (t_hat/t_tilde) * (var_hat/var_tilde)."""
    if min(var_hat, var_tilde, t_hat, t_tilde) <= 0:
        raise ParameterError("efficiency inputs must all be positive")
    return (t_hat / t_tilde) * (var_hat / var_tilde)


# ---------------------------------------------------------------------------
# Batch workspaces
# ---------------------------------------------------------------------------

class _XStats:
    """Per-batch statistics independent of (tau, psi).

    The within/between formulas are inlined (rather than calling the strict
    estimator functions) so that a degenerate replicate is flagged in
    ``valid0`` instead of aborting the whole batch; the flagged entries get
    harmless placeholder denominators and are dropped from every estimate.
    The arithmetic is checked against the per-panel functions in the tests.
    """

    __slots__ = ("valid0", "xbar_i", "dxb", "SSW", "SSB", "r", "p", "SSW_u",
                 "betaW_dev", "ss_within", "ebar_i", "x", "eps")

    def __init__(self, streams, rho, T):
        u, v, eps = streams["u"], streams["v"], streams["eps"]
        x = np.sqrt(1.0 - rho) * u + np.sqrt(rho) * v[..., None]
        xd = x - x.mean(axis=-1, keepdims=True)
        epsd = eps - eps.mean(axis=-1, keepdims=True)
        SSW = np.sum(xd * xd, axis=(-2, -1))
        xbar_i = x.mean(axis=-1)
        dxb = xbar_i - xbar_i.mean(axis=-1, keepdims=True)
        SSB = np.sum(dxb * dxb, axis=-1)
        ud = u - u.mean(axis=-1, keepdims=True)
        SSW_u = np.sum(ud * ud, axis=(-2, -1))
        self.valid0 = (SSW > 0) & (SSB > 0) & (SSW_u > 0)
        self.SSW = np.where(self.valid0, SSW, 1.0)
        self.SSB = np.where(self.valid0, SSB, 1.0)
        self.SSW_u = np.where(self.valid0, SSW_u, 1.0)
        self.x = x
        self.eps = eps
        self.xbar_i = xbar_i
        self.dxb = dxb
        self.r = self.SSB / self.SSW
        self.p = xl.p_factor(self.SSB, 1.0, rho, T)
        self.betaW_dev = np.sum(xd * epsd, axis=(-2, -1)) / self.SSW
        rw = epsd - self.betaW_dev[..., None, None] * xd
        self.ss_within = np.sum(rw * rw, axis=(-2, -1))
        self.ebar_i = eps.mean(axis=-1)


def _estimate_pair(stats, mu, ss_between, cfg):
    """Variance-pair estimates for a batch under the standardized model."""
    N, T = cfg.N, cfg.T
    pair = cfg.estimator_pair
    if pair is EstimatorPair.UNBIASED:
        return est.variances_unbiased_from_sums(
            stats.ss_within, ss_between, N, T, strict=False)
    if pair is EstimatorPair.HSIAO_ML:
        return _ml_batch(stats, mu, N, T)
    y = mu[..., None] + stats.eps
    return est.variances_wooldridge(
        est.pooled_ols_residuals(stats.x, y), N, T, pair.wooldridge_K, strict=False)


def _ml_batch(stats, mu, N, T):
    from .dgp import PanelSample

    B = mu.shape[0]
    s_eps2 = np.empty(B)
    s_mu2 = np.empty(B)
    for b in range(B):
        y = mu[b][:, None] + stats.eps[b]
        try:
            ve = est.variances_hsiao_ml(PanelSample(x=stats.x[b], mu=mu[b],
                                                    eps=stats.eps[b], y=y))
            s_eps2[b] = ve.sigma_eps_hat2
            s_mu2[b] = ve.sigma_mu_hat2
        except (DegenerateSampleError, NumericalError):
            s_eps2[b] = np.nan   # flagged invalid downstream
            s_mu2[b] = np.nan
    return est.VarianceEstimates(sigma_eps_hat2=s_eps2, sigma_mu_hat2=s_mu2,
                                 sigma_mu_tilde2=s_mu2)


def _point_eval(stats, streams, sc, cfg, mode, *, want_sel, brute_only):
    """Evaluate one (tau, psi, alpha_tilde) scenario on one batch.

    Returns (valid_count, reject_count, cov_sums, sel_sums); the sum arrays
    interleave (sum, sum of squares) of the per-replicate contributions.
    """
    N, T = cfg.N, cfg.T
    alpha = cfg.alpha
    tau, psi, at = sc.tau, sc.psi, sc.alpha_tilde

    c_rho = np.sqrt(T / (1.0 + (T - 1) * sc.rho))
    mu = psi * tau * c_rho * stats.xbar_i + psi * np.sqrt(1.0 - tau * tau) * streams["w_mu"]
    ybar_i = mu + stats.ebar_i
    dyb = ybar_i - ybar_i.mean(axis=-1, keepdims=True)
    betaB_dev = np.sum(stats.dxb * dyb, axis=-1) / stats.SSB
    rb = dyb - betaB_dev[..., None] * stats.dxb
    ss_between = np.sum(rb * rb, axis=-1)

    SSW, SSB = stats.SSW, stats.SSB
    valid = stats.valid0 & np.isfinite(betaB_dev)

    if mode == "estimated":
        estim = _estimate_pair(stats, mu, ss_between, cfg)
        raw_eps2 = estim.sigma_eps_hat2
        valid &= np.isfinite(raw_eps2) & (raw_eps2 > 0)
        s_eps2 = np.where(valid, raw_eps2, 1.0)
        s_mu2 = np.where(valid, estim.sigma_mu_hat2, 0.0)
        s_eps = np.sqrt(s_eps2)
        psi_hat = np.sqrt(s_mu2 / s_eps2)
        varW_h, var0B_h, var0G_h = est.conditional_variances(SSW, SSB, psi_hat, T, s_eps)
        _, H_hat = hausman_statistic(stats.betaW_dev, betaB_dev, varW_h, var0B_h)
        accept_hat = decide(H_hat, at)
        betaG_hat = est.gls_slope(stats.betaW_dev, betaB_dev, SSW, SSB, psi_hat, T)
        cover_hat = np.where(
            accept_hat,
            interval_I(betaG_hat, var0G_h, alpha).contains(0.0),
            interval_Jc(stats.betaW_dev, SSW, s_eps, 1.0 - alpha).contains(0.0),
        )
        q_hat = est.q_of(psi_hat, T)
        w_hat = q_hat / (q_hat + stats.r)

    n_valid = int(np.count_nonzero(valid))
    n_reject = valid.size - n_valid

    def _sums(*arrays):
        out = np.empty(2 * len(arrays))
        for i, a in enumerate(arrays):
            av = np.where(valid, a, 0.0)
            out[2 * i] = av.sum()
            out[2 * i + 1] = (av * av).sum()
        return out

    if brute_only:
        # time only what the plain estimators need: no exact-law work
        sel = None
        if want_sel:
            inv_root = 1.0 / np.sqrt(stats.SSW_u)
            lk = s_eps * np.where(accept_hat, np.sqrt(w_hat), 1.0) * inv_root
            lj = s_eps * inv_root
            sel = _sums(lk, lj)
        return n_valid, n_reject, _sums(cover_hat.astype(float)), sel

    # known-variance two-stage interval and its exact conditional coverage
    varW, var0B, var0G = est.conditional_variances(SSW, SSB, psi, T, 1.0)
    _, H = hausman_statistic(stats.betaW_dev, betaB_dev, varW, var0B)
    accept = decide(H, at)
    betaG = est.gls_slope(stats.betaW_dev, betaB_dev, SSW, SSB, psi, T)
    cover_known = np.where(
        accept,
        interval_I(betaG, var0G, alpha).contains(0.0),
        interval_Jc(stats.betaW_dev, SSW, 1.0, 1.0 - alpha).contains(0.0),
    )
    law = xl.conditional_moments(tau, psi, T, stats.r, stats.p)
    pcond = xl.conditional_coverage_known(law, alpha, at)

    if mode == "known":
        cover_hat = cover_known

    chat = cover_hat.astype(float)
    cknown = cover_known.astype(float)
    ctilde = chat - cknown + pcond
    cov = _sums(chat, cknown, pcond, ctilde)

    sel = None
    if want_sel:
        q = est.q_of(psi, T)
        w = q / (q + stats.r)
        inv_root = 1.0 / np.sqrt(stats.SSW_u)
        lk = s_eps * np.where(accept_hat, np.sqrt(w_hat), 1.0) * inv_root
        lkk = np.where(accept, np.sqrt(w), 1.0) * inv_root
        p_c = xl.accept_prob_given_x(law, at)
        elkk = (np.sqrt(w) * p_c + (1.0 - p_c)) * inv_root
        lj = s_eps * inv_root
        e_ljk = ljk_expectation(N, T)
        sel = _sums(lk, lk - (lkk - elkk), lj, lj - (inv_root - e_ljk))
    return n_valid, n_reject, cov, sel


# ---------------------------------------------------------------------------
# Sweep driver
# ---------------------------------------------------------------------------

@dataclass
class _PointAccum:
    n_valid: int = 0
    n_reject: int = 0
    cov: np.ndarray | None = None
    sel: np.ndarray | None = None
    seconds: float = 0.0

    def add(self, n_valid, n_reject, cov, sel, seconds):
        self.n_valid += n_valid
        self.n_reject += n_reject
        if cov is not None:
            self.cov = cov if self.cov is None else self.cov + cov
        if sel is not None:
            self.sel = sel if self.sel is None else self.sel + sel
        self.seconds += seconds


def _derived_seed(seed, index):
    return (seed + 1000003 * (index + 1)) % (2 ** 64)


def _sweep(cfg, scenarios, *, mode="estimated", want_sel=False, threads=1,
           independent_seeds=False, brute_only=False):
    """Evaluate all scenarios over cfg.M replicates with shared streams.

    Returns one _PointAccum per scenario, reduced in batch order so the
    result is independent of the thread count.
    """
    if mode not in ("estimated", "known"):
        raise ParameterError(f"unknown mode {mode!r}")
    if (want_sel or brute_only) and mode != "estimated":
        raise ParameterError("SEL and brute-only runs are defined for estimated mode")
    M = cfg.M
    bounds = [(s, min(s + BATCH_SIZE, M)) for s in range(0, M, BATCH_SIZE)]
    seeds = [cfg.seed if not independent_seeds else _derived_seed(cfg.seed, i)
             for i in range(len(scenarios))]

    def work(batch_index):
        start, stop = bounds[batch_index]
        streams_cache, xstats_cache = {}, {}
        parts = []
        for sc, seed in zip(scenarios, seeds):
            setup = 0.0
            if seed not in streams_cache:
                t0 = time.perf_counter()
                streams_cache[seed] = batch_streams(seed, start, stop, cfg.N, cfg.T)
                setup += time.perf_counter() - t0
            if (seed, sc.rho) not in xstats_cache:
                t0 = time.perf_counter()
                xstats_cache[(seed, sc.rho)] = _XStats(streams_cache[seed], sc.rho, cfg.T)
                setup += time.perf_counter() - t0
            t0 = time.perf_counter()
            out = _point_eval(xstats_cache[(seed, sc.rho)], streams_cache[seed],
                              sc, cfg, mode, want_sel=want_sel, brute_only=brute_only)
            parts.append(out + (setup + time.perf_counter() - t0,))
        return parts

    if threads > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            batch_results = list(pool.map(work, range(len(bounds))))
    else:
        batch_results = [work(i) for i in range(len(bounds))]

    accums = [_PointAccum() for _ in scenarios]
    for parts in batch_results:       # fixed batch order: deterministic
        for acc, (n_valid, n_reject, cov, sel, secs) in zip(accums, parts):
            acc.add(n_valid, n_reject, cov, sel, secs)

    for acc in accums:
        if acc.n_reject > MAX_REJECT_FRACTION * M:
            raise NumericalError(
                f"{acc.n_reject} of {M} replicates were degenerate "
                f"(more than {MAX_REJECT_FRACTION:.1%}); refusing to report"
            )
    return accums


def _mc_estimate(total, total_sq, n, seconds):
    mean = total / n
    var = max(total_sq - total * total / n, 0.0) / (n - 1) if n > 1 else 0.0
    return McEstimate(value=float(mean), std_error=float(np.sqrt(var / n)), M=n,
                      wall_time_seconds=seconds)


def coverage_from_accum(acc):
    n = acc.n_valid
    s = acc.cov
    if s.size == 2:   # brute-only run
        cp = _mc_estimate(s[0], s[1], n, acc.seconds)
        return CoverageResult(cp_hat=cp, cpk_hat=cp, cpk_tilde=cp, cp_tilde=cp,
                              rejected=acc.n_reject)
    ests = [_mc_estimate(s[2 * i], s[2 * i + 1], n, acc.seconds) for i in range(4)]
    return CoverageResult(cp_hat=ests[0], cpk_hat=ests[1], cpk_tilde=ests[2],
                          cp_tilde=ests[3], rejected=acc.n_reject)


def sel_from_accum(acc, alpha, c_star):
    n = acc.n_valid
    s = acc.sel
    if s.size == 4:    # brute-only run: (lk, lj) pairs
        lk_hat = _mc_estimate(s[0], s[1], n, acc.seconds)
        lj_hat = _mc_estimate(s[2], s[3], n, acc.seconds)
        lk_tilde, lj_tilde = lk_hat, lj_hat
    else:
        ests = [_mc_estimate(s[2 * i], s[2 * i + 1], n, acc.seconds) for i in range(4)]
        lk_hat, lk_tilde, lj_hat, lj_tilde = ests
    z = ndtri(1.0 - alpha / 2.0)
    zc = ndtri((c_star + 1.0) / 2.0)
    sel = float((z / zc) * lk_tilde.value / lj_tilde.value)
    return SelComponents(lk_hat=lk_hat, lk_tilde=lk_tilde, lj_hat=lj_hat,
                         lj_tilde=lj_tilde, sel=sel, c_star=c_star,
                         rejected=acc.n_reject)


def run_coverage(cfg, mode="estimated", *, threads=1, brute_only=False):
    """Coverage of the two-stage interval for one scenario.

    Returns a CoverageResult holding the brute-force estimator (cp_hat), the
    two estimators of the known-variance coverage (cpk_hat, cpk_tilde) and
    the control-variate estimator (cp_tilde).  With mode="known" the
    estimated-parameter interval coincides with the known-variance one, so
    cp_hat == cpk_hat and cp_tilde == cpk_tilde.  brute_only=True evaluates
    and times only the brute-force estimator (for efficiency comparisons).
    """
    if brute_only and mode != "estimated":
        raise ParameterError("brute_only timing runs require estimated mode")
    sc = Scenario.from_config(cfg)
    acc = _sweep(cfg, [sc], mode=mode, threads=threads, brute_only=brute_only)[0]
    return coverage_from_accum(acc)


def run_sel(cfg, c_star, *, threads=1, brute_only=False):
    """Scaled expected length of the two-stage interval (estimated pair only).

    c_star is the confidence level at which the fixed-effects interval with
    estimated error SD attains the minimum coverage of the two-stage
    interval; see the calibration module.  brute_only=True evaluates and
    times only the plain length estimators (no control variates).
    """
    if not 0.0 < c_star < 1.0:
        raise ParameterError(f"c_star must lie in (0, 1), got {c_star}")
    sc = Scenario.from_config(cfg)
    acc = _sweep(cfg, [sc], mode="estimated", want_sel=True, threads=threads,
                 brute_only=brute_only)[0]
    return sel_from_accum(acc, cfg.alpha, c_star)


@dataclass
class GridRow:
    parameter: str
    value: float
    coverage: CoverageResult


def grid_sweep(cfg, parameter, grid, *, mode="estimated", threads=1,
               independent_seeds=False):
    """Coverage along a one-dimensional grid with common random numbers.

    parameter is one of "lambda" (root-N scaled tau), "rho" or "psi"; every
    grid point reuses the identical (seed, replicate) streams unless
    independent_seeds is set.
    """
    grid = list(grid)
    if not grid:
        raise ParameterError("empty grid")
    scenarios = []
    for g in grid:
        if parameter == "lambda":
            tau = g / np.sqrt(cfg.N)
            if not abs(tau) < 1.0:
                raise ParameterError(f"lambda={g} implies |tau|={abs(tau):.3f} >= 1")
            scenarios.append(Scenario(tau=tau, psi=cfg.psi, rho=cfg.rho,
                                      alpha_tilde=cfg.alpha_tilde))
        elif parameter == "rho":
            if not 0.0 <= g < 1.0:
                raise ParameterError(f"rho={g} outside [0, 1)")
            scenarios.append(Scenario(tau=cfg.tau, psi=cfg.psi, rho=float(g),
                                      alpha_tilde=cfg.alpha_tilde))
        elif parameter == "psi":
            if not g > 0.0:
                raise ParameterError(f"psi={g} must be positive")
            scenarios.append(Scenario(tau=cfg.tau, psi=float(g), rho=cfg.rho,
                                      alpha_tilde=cfg.alpha_tilde))
        else:
            raise ParameterError(f"unknown sweep parameter {parameter!r}")
    accums = _sweep(cfg, scenarios, mode=mode, threads=threads,
                    independent_seeds=independent_seeds)
    return [GridRow(parameter=parameter, value=float(g), coverage=coverage_from_accum(a))
            for g, a in zip(grid, accums)]


def sweep_scenarios(cfg, scenarios, *, mode="estimated", want_sel=False, threads=1):
    """Sweep over explicit Scenario objects with shared streams.

    Returns raw accumulators; convert with coverage_from_accum or
    sel_from_accum.  Used by the calibration layer.
    """
    return _sweep(cfg, scenarios, mode=mode, want_sel=want_sel, threads=threads)


def fixed_effects_pivots(cfg, *, threads=1):
    """Per-replicate pivots |Z|/S of the fixed-effects interval.

    Z is the within-slope error standardized by its true conditional SD and
    S the estimated error SD (true SD is 1 in the standardized model); the
    interval at level c covers iff the pivot is at most ndtri((c+1)/2).
    Used to calibrate the adjusted fixed-effects interval for estimator
    pairs without a closed-form coverage.
    """
    M = cfg.M
    bounds = [(s, min(s + BATCH_SIZE, M)) for s in range(0, M, BATCH_SIZE)]

    def work(batch_index):
        start, stop = bounds[batch_index]
        streams = batch_streams(cfg.seed, start, stop, cfg.N, cfg.T)
        stats = _XStats(streams, cfg.rho, cfg.T)
        c_rho = np.sqrt(cfg.T / (1.0 + (cfg.T - 1) * cfg.rho))
        mu = (cfg.psi * cfg.tau * c_rho * stats.xbar_i
              + cfg.psi * np.sqrt(1.0 - cfg.tau ** 2) * streams["w_mu"])
        ybar_i = mu + stats.ebar_i
        dyb = ybar_i - ybar_i.mean(axis=-1, keepdims=True)
        betaB_dev = np.sum(stats.dxb * dyb, axis=-1) / stats.SSB
        rb = dyb - betaB_dev[..., None] * stats.dxb
        ss_between = np.sum(rb * rb, axis=-1)
        estim = _estimate_pair(stats, mu, ss_between, cfg)
        s_eps2 = estim.sigma_eps_hat2
        valid = stats.valid0 & np.isfinite(s_eps2) & (s_eps2 > 0)
        z = np.abs(stats.betaW_dev) * np.sqrt(stats.SSW)
        return z[valid] / np.sqrt(s_eps2[valid]), int(np.sum(~valid))

    if threads > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(work, range(len(bounds))))
    else:
        parts = [work(i) for i in range(len(bounds))]
    rejected = sum(p[1] for p in parts)
    if rejected > MAX_REJECT_FRACTION * M:
        raise NumericalError(
            f"{rejected} of {M} replicates were degenerate in the pivot run")
    return np.concatenate([p[0] for p in parts])
