"""Risk measures over sampled objective values, with smooth CVaR machinery."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class RiskMeasure:
    """One of: mean, cvar(beta, eps), entropic(beta).

    A cvar measure may leave eps unset (None); the optimizer resolves it
    from the sample spread at the initial design.
    """

    kind: str
    beta: float = 0.0
    eps: float | None = None

    def __post_init__(self):
        if self.kind not in ("mean", "cvar", "entropic"):
            raise ValueError(f"unknown risk measure {self.kind!r}")
        if self.kind == "cvar" and not (0.0 < self.beta < 1.0):
            raise ValueError("cvar quantile must lie in (0, 1)")
        if self.kind == "cvar" and self.eps is not None and self.eps <= 0:
            raise ValueError("cvar smoothing must be positive")
        if self.kind == "entropic" and self.beta <= 0:
            raise ValueError("entropic aversion must be positive")

    @property
    def needs_t(self) -> bool:
        return self.kind == "cvar"


def mean_risk() -> RiskMeasure:
    return RiskMeasure("mean")


def cvar_risk(beta: float, eps: float | None = 1e-4) -> RiskMeasure:
    return RiskMeasure("cvar", beta=beta, eps=eps)


def entropic_risk(beta: float) -> RiskMeasure:
    return RiskMeasure("entropic", beta=beta)


def smoothed_plus(x, eps: float):
    """C^1 smoothing of max(x, 0): cubic-quartic blend on [0, eps].

    Returns (value, derivative); the uniform gap to the exact positive part
    is eps/2, attained at x = eps.
    """
    if eps <= 0:
        raise ValueError("smoothing width must be positive")
    x = np.asarray(x, dtype=float)
    mid = (x >= 0) & (x <= eps)
    hi = x > eps
    value = np.where(mid, x**3 / eps**2 - x**4 / (2 * eps**3), 0.0)
    value = np.where(hi, x - eps / 2.0, value)
    deriv = np.where(mid, 3 * x**2 / eps**2 - 2 * x**3 / eps**3, 0.0)
    deriv = np.where(hi, 1.0, deriv)
    if value.ndim == 0:
        return float(value), float(deriv)
    return value, deriv


def risk_saa(samples: np.ndarray, risk: RiskMeasure, t: float | None = None):
    """Sample-average risk with derivatives.

    Returns (value, d/d(sample_i) array, d/dt or None).  The entropic value
    uses a max-shifted log-sum-exp, so overflow cannot occur.
    """
    q = np.asarray(samples, dtype=float)
    if q.size == 0:
        raise ValueError("empty sample set")
    n = q.size
    if risk.kind == "mean":
        return float(q.mean()), np.full(n, 1.0 / n), None
    if risk.kind == "entropic":
        b = risk.beta
        shift = np.max(b * q)
        w = np.exp(b * q - shift)
        value = (shift + np.log(w.mean())) / b
        return float(value), w / w.sum(), None
    # cvar
    if t is None:
        raise ValueError("cvar risk requires the auxiliary level t")
    if risk.eps is None:
        raise ValueError("cvar smoothing width is unresolved")
    sp, dsp = smoothed_plus(q - t, risk.eps)
    scale = 1.0 / (n * (1.0 - risk.beta))
    value = t + scale * np.sum(sp)
    dq = scale * dsp
    dt = 1.0 - scale * np.sum(dsp)
    return float(value), dq, float(dt)


def empirical_cvar(samples: np.ndarray, beta: float) -> float:
    """Plug-in CVaR estimate at the empirical beta-quantile."""
    q = np.asarray(samples, dtype=float)
    t = np.quantile(q, beta)
    return float(t + np.mean(np.maximum(q - t, 0.0)) / (1.0 - beta))


def cvar_smoothing_width(samples: np.ndarray, rel: float = 1e-4, floor: float = 1e-8) -> float:
    """Default smoothing width: a fraction of the sample interquartile range."""
    q = np.asarray(samples, dtype=float)
    iqr = float(np.quantile(q, 0.75) - np.quantile(q, 0.25))
    return max(rel * iqr, floor)


@dataclass(frozen=True)
class Penalty:
    """Quadratic coefficient penalty alpha * area * ||z||^2."""

    alpha: float
    area: float

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("penalty weight must be nonnegative")


def penalty_eval(z: np.ndarray, alpha: float, area: float):
    """Value and gradient of the quadratic penalty."""
    if alpha < 0:
        raise ValueError("penalty weight must be nonnegative")
    z = np.asarray(z, dtype=float)
    return float(alpha * area * (z @ z)), 2.0 * alpha * area * z
