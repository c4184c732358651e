"""The Hausman pretest and the two-stage confidence interval.

With known variances the procedure compares H = h^2 against the chi-square
threshold z_{1-alpha_tilde/2}^2 and reports the random-intercept interval I
on acceptance, the fixed-effects interval J on rejection.  The practical
variant plugs an estimated (sigma_eps, sigma_mu) pair into both the
statistic and the intervals.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri

from .exceptions import DegenerateSampleError


class Branch(enum.Enum):
    RANDOM_INTERCEPT = "random_intercept"
    FIXED_EFFECTS = "fixed_effects"


@dataclass
class Interval:
    lower: float
    upper: float
    branch: Branch
    nominal_level: float

    def contains(self, value):
        return (self.lower <= value) & (value <= self.upper)

    @property
    def length(self):
        return self.upper - self.lower


@dataclass
class PretestOutcome:
    h: float
    H: float
    accept: bool


def hausman_statistic(beta_W, beta_B, varW, var0B):
    """Signed standardized contrast h and the pretest statistic H = h^2."""
    den = varW + var0B
    if np.any(np.asarray(den) <= 0.0):
        raise DegenerateSampleError("zero variance in the Hausman statistic")
    h = (beta_W - beta_B) / np.sqrt(den)
    return h, h * h


def decide(H, alpha_tilde):
    """Accept the exogeneity hypothesis iff H <= z_{1-alpha_tilde/2}^2."""
    z = ndtri(1.0 - alpha_tilde / 2.0)
    return H <= z * z


def pretest(beta_W, beta_B, varW, var0B, alpha_tilde):
    h, H = hausman_statistic(beta_W, beta_B, varW, var0B)
    return PretestOutcome(h=h, H=H, accept=decide(H, alpha_tilde))


def interval_I(beta_gls, var0GLS, alpha):
    """Random-intercept interval centered on the GLS slope."""
    half = ndtri(1.0 - alpha / 2.0) * np.sqrt(var0GLS)
    return Interval(lower=beta_gls - half, upper=beta_gls + half,
                    branch=Branch.RANDOM_INTERCEPT, nominal_level=1.0 - alpha)


def interval_Jc(beta_W, SSW, sigma_eps_plug, c):
    """Fixed-effects interval at confidence level c.

    Half-length is ndtri((c+1)/2) * sigma_eps_plug / sqrt(SSW); the standard
    fixed-effects interval is the special case c = 1 - alpha.
    """
    half = ndtri((c + 1.0) / 2.0) * sigma_eps_plug / np.sqrt(SSW)
    return Interval(lower=beta_W - half, upper=beta_W + half,
                    branch=Branch.FIXED_EFFECTS, nominal_level=c)


def two_stage(outcome, I, J):
    """The interval the two-stage procedure reports: I on accept, else J."""
    return I if outcome.accept else J
