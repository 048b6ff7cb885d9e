"""Monte Carlo estimate containers and error-propagation helpers.

Everything here is measure-agnostic plumbing: plain means, self-normalized
importance-weighted means with delta-method standard errors, a generic
delta-method for smooth functions of several sample means, Bonferroni
adjustment for families of comparisons, and a Hill tail-index probe.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from statistics import NormalDist
from typing import Callable, Sequence

import numpy as np

from .errors import DegenerateWeight

DEFAULT_CONFIDENCE = 0.997

_NORMAL = NormalDist()


def z_for_confidence(confidence: float) -> float:
    """Two-sided normal quantile for a CI at the given coverage."""
    if not 0.0 < confidence < 1.0:
        raise ValueError(f"confidence must be in (0,1): {confidence}")
    return _NORMAL.inv_cdf(0.5 * (1.0 + confidence))


def bonferroni_z(n_comparisons: int, base_z: float = 3.0) -> float:
    """One-sided z threshold so a family of n comparisons keeps the
    family-wise error of a single base_z comparison."""
    if n_comparisons < 1:
        raise ValueError("n_comparisons must be >= 1")
    alpha = 1.0 - _NORMAL.cdf(base_z)
    return _NORMAL.inv_cdf(1.0 - alpha / n_comparisons)


@dataclass(frozen=True)
class McEstimate:
    """A Monte Carlo estimate with its sampling uncertainty."""

    value: float
    std_error: float
    n: int
    ci_low: float
    ci_high: float
    confidence: float = DEFAULT_CONFIDENCE

    def __post_init__(self) -> None:
        if self.std_error < 0.0:
            raise ValueError(f"std_error must be >= 0: {self.std_error}")
        if self.value == self.value and not (
                self.ci_low <= self.value <= self.ci_high):
            raise ValueError(
                f"CI does not bracket the value: "
                f"[{self.ci_low}, {self.ci_high}] vs {self.value}"
            )

    @classmethod
    def exact(cls, value: float, n: int = 0,
              confidence: float = DEFAULT_CONFIDENCE) -> "McEstimate":
        return cls(value, 0.0, n, value, value, confidence)

    @classmethod
    def from_value_se(cls, value: float, se: float, n: int,
                      confidence: float = DEFAULT_CONFIDENCE) -> "McEstimate":
        z = z_for_confidence(confidence)
        return cls(value, se, n, value - z * se, value + z * se, confidence)

    @classmethod
    def from_samples(cls, x: np.ndarray,
                     confidence: float = DEFAULT_CONFIDENCE) -> "McEstimate":
        x = np.asarray(x, dtype=np.float64)
        n = x.size
        if n == 0:
            raise ValueError("no samples")
        m = float(np.mean(x))
        se = float(np.std(x, ddof=1) / math.sqrt(n)) if n > 1 else 0.0
        return cls.from_value_se(m, se, n, confidence)

    @classmethod
    def from_weighted(cls, x: np.ndarray, w: np.ndarray,
                      confidence: float = DEFAULT_CONFIDENCE) -> "McEstimate":
        """Self-normalized weighted mean sum(w x)/sum(w), delta-method SE."""
        value, se, n = _ratio_of_means(np.asarray(x, float) * np.asarray(w, float),
                                       np.asarray(w, float))
        return cls.from_value_se(value, se, n, confidence)

    def scaled(self, c: float) -> "McEstimate":
        lo, hi = sorted((c * self.ci_low, c * self.ci_high))
        return McEstimate(c * self.value, abs(c) * self.std_error, self.n,
                          lo, hi, self.confidence)

    def shifted(self, d: float) -> "McEstimate":
        return McEstimate(self.value + d, self.std_error, self.n,
                          self.ci_low + d, self.ci_high + d, self.confidence)

    def to_dict(self) -> dict:
        return {
            "value": self.value,
            "std_error": self.std_error,
            "n": self.n,
            "ci_low": self.ci_low,
            "ci_high": self.ci_high,
            "confidence": self.confidence,
        }


def _ratio_of_means(num: np.ndarray, den: np.ndarray) -> tuple[float, float, int]:
    """mean(num)/mean(den) with the usual linearized standard error."""
    if num.shape != den.shape:
        raise ValueError("numerator/denominator sample shapes differ")
    n = num.size
    if n == 0:
        raise ValueError("no samples")
    m_den = float(np.mean(den))
    if m_den == 0.0:
        raise ZeroDivisionError("denominator mean is zero")
    ratio = float(np.mean(num)) / m_den
    if n == 1:
        return ratio, 0.0, n
    resid = num - ratio * den
    se = float(np.std(resid, ddof=1) / (abs(m_den) * math.sqrt(n)))
    return ratio, se, n


def weighted_mean_estimate(x: np.ndarray, w: np.ndarray,
                           confidence: float = DEFAULT_CONFIDENCE,
                           min_weight_z: float = 3.0) -> McEstimate:
    """Self-normalized importance-weighted mean of x.

    Raises DegenerateWeight when the weight mean is indistinguishable from
    zero at ``min_weight_z`` standard errors.
    """
    w = np.asarray(w, dtype=np.float64)
    mw = float(np.mean(w))
    se_w = float(np.std(w, ddof=1) / math.sqrt(w.size)) if w.size > 1 else 0.0
    if mw <= min_weight_z * se_w:
        raise DegenerateWeight(
            f"weight mean {mw:.6g} within {min_weight_z} SE ({se_w:.6g}) of zero"
        )
    return McEstimate.from_weighted(x, w, confidence)


def delta_method(f: Callable[[np.ndarray], float], cols: np.ndarray,
                 confidence: float = DEFAULT_CONFIDENCE,
                 rel_step: float = 1e-6) -> McEstimate:
    """Estimate f(means of the columns) with a delta-method SE.

    Parameters
    ----------
    f : smooth scalar function of the k column means
    cols : (n, k) per-sample matrix
    """
    cols = np.asarray(cols, dtype=np.float64)
    if cols.ndim == 1:
        cols = cols[:, None]
    n, k = cols.shape
    means = cols.mean(axis=0)
    value = float(f(means))
    if n < 2:
        return McEstimate.from_value_se(value, 0.0, n, confidence)
    cov = np.cov(cols, rowvar=False, ddof=1).reshape(k, k) / n
    grad = np.empty(k)
    for j in range(k):
        # Step relative to the mean itself so perturbations cannot flip the
        # sign of small positive means under fractional powers.
        h = rel_step * (abs(means[j]) if means[j] != 0.0 else 1.0)
        up = means.copy()
        dn = means.copy()
        up[j] += h
        dn[j] -= h
        grad[j] = (f(up) - f(dn)) / (2.0 * h)
    var = float(grad @ cov @ grad)
    se = math.sqrt(max(var, 0.0))
    return McEstimate.from_value_se(value, se, n, confidence)


def _gradient_se(cols: np.ndarray, grad: np.ndarray) -> float:
    n, k = cols.shape
    if n < 2:
        return 0.0
    cov = np.cov(cols, rowvar=False, ddof=1).reshape(k, k) / n
    return math.sqrt(max(float(grad @ cov @ grad), 0.0))


def power_ratio_estimate(num: np.ndarray, den: np.ndarray, q: float,
                         scale: float = 1.0,
                         confidence: float = DEFAULT_CONFIDENCE) -> McEstimate:
    """scale * mean(num) / mean(den)**q with an exact-gradient delta SE."""
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    mn = float(np.mean(num))
    md = float(np.mean(den))
    value = scale * mn / md ** q
    grad = np.array([scale / md ** q,
                     -q * scale * mn / md ** (q + 1.0)])
    se = _gradient_se(np.column_stack([num, den]), grad)
    return McEstimate.from_value_se(value, se, num.size, confidence)


def power_ratio_diff_estimate(num_a: np.ndarray, num_b: np.ndarray,
                              den: np.ndarray, q: float, scale_a: float = 1.0,
                              confidence: float = DEFAULT_CONFIDENCE
                              ) -> McEstimate:
    """(scale_a * mean(num_a) - mean(num_b)) / mean(den)**q, exact-gradient SE.

    Shares the denominator samples, so the covariance between the two
    numerators is honored.
    """
    num_a = np.asarray(num_a, dtype=np.float64)
    num_b = np.asarray(num_b, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    ma = float(np.mean(num_a))
    mb = float(np.mean(num_b))
    md = float(np.mean(den))
    value = (scale_a * ma - mb) / md ** q
    grad = np.array([
        scale_a / md ** q,
        -1.0 / md ** q,
        -q * (scale_a * ma - mb) / md ** (q + 1.0),
    ])
    se = _gradient_se(np.column_stack([num_a, num_b, den]), grad)
    return McEstimate.from_value_se(value, se, num_a.size, confidence)


def censoring_bracket(value: float, sum_w_obs: float, n_censored: int,
                      w_max: float, x_low: float, x_high: float) -> tuple[float, float]:
    """Worst-case bracket for a self-normalized P-mean under censoring.

    Each censored path carries an unknown weight in [0, w_max] and an
    integrand value in [x_low, x_high]; the extremes of

        (value * sum_w_obs + sum_c w_c x_c) / (sum_w_obs + sum_c w_c)

    over those ranges are attained with all censored weights at 0 or w_max.
    """
    if n_censored == 0:
        return value, value
    mass = n_censored * w_max
    lo = min(value, (value * sum_w_obs + mass * x_low) / (sum_w_obs + mass))
    hi = max(value, (value * sum_w_obs + mass * x_high) / (sum_w_obs + mass))
    return lo, hi


def hill_tail_index(x: np.ndarray, top_frac: float = 0.01) -> float:
    """Hill estimator of the tail index over the largest ``top_frac`` samples.

    Returns the reciprocal Hill exponent xi (xi >= 1 signals an infinite-mean
    scale at that tail depth); NaN when there are too few positive samples.
    """
    x = np.asarray(x, dtype=np.float64)
    x = x[np.isfinite(x) & (x > 0.0)]
    if x.size < 10:
        return float("nan")
    k = max(2, int(math.ceil(top_frac * x.size)))
    top = np.sort(x)[-k - 1:]
    threshold = top[0]
    return float(np.mean(np.log(top[1:] / threshold)))


def joint_se(estimates: Sequence[McEstimate]) -> float:
    """SE of a sum of independent estimates."""
    return math.sqrt(sum(e.std_error ** 2 for e in estimates))
