"""Experiment configuration: the known quantities and model parameters."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace

from .exceptions import ParameterError


class EstimatorPair(enum.Enum):
    """Which pair of (error SD, random-effect SD) estimators a run uses."""

    UNBIASED = "unbiased"
    HSIAO_ML = "ml"
    WOOLDRIDGE_K0 = "wooldridge0"
    WOOLDRIDGE_K2 = "wooldridge2"

    @property
    def wooldridge_K(self):
        if self is EstimatorPair.WOOLDRIDGE_K0:
            return 0
        if self is EstimatorPair.WOOLDRIDGE_K2:
            return 2
        raise AttributeError(f"{self} has no degrees-of-freedom correction K")

    @classmethod
    def parse(cls, text):
        try:
            return cls(str(text).strip().lower())
        except ValueError:
            choices = ", ".join(p.value for p in cls)
            raise ParameterError(
                f"unknown estimator pair {text!r} (choices: {choices})"
            ) from None


@dataclass(frozen=True)
class ExperimentConfig:
    """All known quantities and model parameters defining one scenario.

    ``psi`` must equal ``sigma_mu / sigma_eps``; leave it at None to have it
    derived.  ``lam`` (the root-N scaled non-exogeneity) is read-only.
    """

    N: int = 100
    T: int = 3
    alpha: float = 0.05
    alpha_tilde: float = 0.05
    rho: float = 0.0
    tau: float = 0.0
    sigma_eps: float = 1.0
    sigma_mu: float = 1.0 / 3.0
    sigma_x: float = 1.0
    a: float = 0.0
    beta: float = 0.0
    psi: float | None = None
    estimator_pair: EstimatorPair = EstimatorPair.UNBIASED
    M: int = 20000
    seed: int = 20230817

    def __post_init__(self):
        if self.N < 2 or self.T < 2:
            raise ParameterError(f"need N >= 2 and T >= 2, got N={self.N}, T={self.T}")
        if self.estimator_pair is EstimatorPair.UNBIASED and self.N < 3:
            raise ParameterError("the unbiased variance pair requires N >= 3")
        if not 0.0 < self.alpha < 1.0:
            raise ParameterError(f"alpha must lie in (0, 1), got {self.alpha}")
        if not 0.0 < self.alpha_tilde < 1.0:
            raise ParameterError(f"alpha_tilde must lie in (0, 1), got {self.alpha_tilde}")
        if not abs(self.rho) < 1.0:
            raise ParameterError(f"rho must lie in (-1, 1), got {self.rho}")
        if not abs(self.tau) < 1.0:
            raise ParameterError(f"tau must lie in (-1, 1), got {self.tau}")
        if not self.sigma_eps > 0.0:
            raise ParameterError(f"sigma_eps must be positive, got {self.sigma_eps}")
        if self.sigma_mu < 0.0:
            raise ParameterError(f"sigma_mu must be nonnegative, got {self.sigma_mu}")
        if not self.sigma_x > 0.0:
            raise ParameterError(f"sigma_x must be positive, got {self.sigma_x}")
        if self.M < 1:
            raise ParameterError(f"replicate count M must be >= 1, got {self.M}")
        if not 0 <= self.seed < 2 ** 64:
            raise ParameterError("seed must fit in an unsigned 64-bit integer")
        derived = self.sigma_mu / self.sigma_eps
        if self.psi is None:
            object.__setattr__(self, "psi", derived)
        elif not math.isclose(self.psi, derived, rel_tol=1e-12, abs_tol=1e-15):
            raise ParameterError(
                f"psi={self.psi} inconsistent with sigma_mu/sigma_eps={derived}"
            )
        if not self.psi > 0.0:
            raise ParameterError(f"psi must be positive, got {self.psi}")

    @property
    def lam(self):
        """Root-N scaled non-exogeneity, N**0.5 * tau."""
        return math.sqrt(self.N) * self.tau

    def with_scenario(self, tau=None, psi=None, rho=None, alpha_tilde=None):
        """A copy with some of (tau, psi, rho, alpha_tilde) replaced.

        A new psi is materialized through sigma_mu = psi * sigma_eps.
        """
        kw = {}
        if tau is not None:
            kw["tau"] = float(tau)
        if rho is not None:
            kw["rho"] = float(rho)
        if alpha_tilde is not None:
            kw["alpha_tilde"] = float(alpha_tilde)
        if psi is not None:
            kw["sigma_mu"] = float(psi) * self.sigma_eps
            kw["psi"] = None
        return replace(self, **kw)

    def asdict(self):
        d = {
            "N": self.N, "T": self.T, "alpha": self.alpha,
            "alpha_tilde": self.alpha_tilde, "rho": self.rho, "tau": self.tau,
            "sigma_eps": self.sigma_eps, "sigma_mu": self.sigma_mu,
            "sigma_x": self.sigma_x, "a": self.a, "beta": self.beta,
            "psi": self.psi, "estimator_pair": self.estimator_pair.value,
            "M": self.M, "seed": self.seed,
        }
        return d
