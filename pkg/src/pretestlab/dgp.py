"""Panel data generation for the random-intercept model.

The response is y_it = a + beta * x_it + mu_i + eps_it.  Covariates are
equicorrelated within an individual, x_it = sigma_x * (sqrt(1-rho) u_it +
sqrt(rho) v_i), and the random intercepts are drawn conditionally on the
covariates so that corr(mu_i, xbar_i) equals the non-exogeneity parameter
tau.  All randomness enters through :class:`~pretestlab.rng.NoiseStreams`,
so a (seed, replicate) pair pins the sample bit-exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import ParameterError
from .rng import NoiseStreams


@dataclass
class PanelSample:
    """One realized panel: covariates, intercepts, errors and responses."""

    x: np.ndarray       # (N, T)
    mu: np.ndarray      # (N,)
    eps: np.ndarray     # (N, T)
    y: np.ndarray       # (N, T)

    @property
    def xbar_i(self):
        return self.x.mean(axis=-1)

    @property
    def xbar(self):
        return self.x.mean(axis=(-2, -1))


def build_covariate_panel(streams, rho, sigma_x):
    """Covariate panel x_it = sigma_x * (sqrt(1-rho) u_it + sqrt(rho) v_i).

    The construction needs rho in [0, 1); negative equicorrelation, although
    meaningful for the abstract model, has no representation in this
    two-component form and is rejected.
    """
    if not 0.0 <= rho < 1.0:
        raise ParameterError(
            f"rho={rho} outside [0, 1): the shared-component construction "
            "sqrt(1-rho)*u + sqrt(rho)*v requires a nonnegative equicorrelation"
        )
    if not sigma_x > 0.0:
        raise ParameterError(f"sigma_x must be positive, got {sigma_x}")
    u, v = streams.u, streams.v
    return sigma_x * (np.sqrt(1.0 - rho) * u + np.sqrt(rho) * v[..., None])


def sample_random_intercepts(streams, xbar_i, cfg):
    """Random intercepts with corr(mu_i, xbar_i) = tau.

    mu_i = sigma_mu * tau * sqrt(T / (1+(T-1)rho)) * xbar_i / sigma_x
         + sigma_mu * sqrt(1-tau^2) * w_i
    which reproduces the conditional law of mu_i given (x_i1..x_iT).
    """
    if not abs(cfg.tau) < 1.0:
        raise ParameterError(
            f"tau={cfg.tau} outside (-1, 1): conditional intercept variance "
            "would be nonpositive"
        )
    c = np.sqrt(cfg.T / (1.0 + (cfg.T - 1) * cfg.rho))
    slope = cfg.sigma_mu * cfg.tau * c / cfg.sigma_x
    return slope * xbar_i + cfg.sigma_mu * np.sqrt(1.0 - cfg.tau ** 2) * streams.w_mu


def assemble_responses(x, mu, streams, cfg):
    """Scale the error stream and assemble y_it = a + beta x_it + mu_i + eps_it."""
    if x.shape != streams.eps.shape:
        raise ParameterError(
            f"covariate shape {x.shape} inconsistent with error stream "
            f"shape {streams.eps.shape}"
        )
    eps = cfg.sigma_eps * streams.eps
    y = cfg.a + cfg.beta * x + mu[..., None] + eps
    return PanelSample(x=x, mu=mu, eps=eps, y=y)


def build_panel(cfg, replicate=0, streams=None):
    """Full pipeline for one replicate: streams -> x -> mu -> PanelSample."""
    if streams is None:
        streams = NoiseStreams.generate(cfg.seed, replicate, cfg.N, cfg.T)
    x = build_covariate_panel(streams, cfg.rho, cfg.sigma_x)
    mu = sample_random_intercepts(streams, x.mean(axis=-1), cfg)
    return assemble_responses(x, mu, streams, cfg)
