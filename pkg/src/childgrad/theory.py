"""Numerical checks for the masked-update statistics and flatness bounds.

Covers the closed-form mean/covariance of a Bernoulli-masked SGD update,
Monte Carlo validation of it, a from-scratch chi-square quantile, the
escape/sharpness bound it feeds, a PAC-Bayes style generalization bound,
and a power-iteration sharpness estimator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .datasets import TAG_SHARPNESS, seeded_rng
from .errors import ConfigError, NumericError, ShapeError
from .models import ModelSpec
from .params import ParamVector
from .tensor_core import forward_backward


@dataclass(frozen=True)
class NoiseModel:
    """Inputs to the masked-update statistics.

    grad_mean is the full-data gradient; per-example gradients are modeled
    as Gaussian around it with isotropic standard deviation sigma_g.
    """

    grad_mean: np.ndarray
    sigma_g: float
    batch_size: int
    p: float
    eta: float

    def __post_init__(self):
        g = np.asarray(self.grad_mean, dtype=np.float64).reshape(-1)
        object.__setattr__(self, "grad_mean", g)
        if g.size < 1:
            raise ConfigError("grad_mean must have at least one coordinate")
        if not self.sigma_g > 0:
            raise ConfigError("sigma_g must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")
        if not 0.0 < self.p <= 1.0:
            raise ConfigError("p must lie in (0, 1]")
        if not self.eta > 0:
            raise ConfigError("eta must be positive")

    @property
    def dim(self) -> int:
        return self.grad_mean.size


def masked_update_moments(noise: NoiseModel):
    """Closed-form mean and covariance diagonal of the masked update.

    mean = -eta * grad_mean
    var  = eta^2 sigma_g^2 / (p |B|)  +  (1 - p)/p * eta^2 * grad_mean^2
    """
    g = noise.grad_mean
    mean = -noise.eta * g
    iso = noise.eta ** 2 * noise.sigma_g ** 2 / (noise.p * noise.batch_size)
    aniso = (1.0 - noise.p) / noise.p * noise.eta ** 2 * g * g
    return mean, iso + aniso




def simulate_update_covariance(noise: NoiseModel, trials: int,
                               rng: np.random.Generator, chunk: int = 20000):
    """Monte Carlo estimate of the masked update's mean and variance.

    Per trial: draw |B| per-example gradients, average, apply a fresh
    Bernoulli(p) mask rescaled by 1/p, multiply by -eta. Returns the
    sample mean and per-coordinate sample variance (ddof=1).
    """
    if trials < 1:
        raise ConfigError("trials must be at least 1")
    k = noise.dim
    deltas = np.empty((trials, k))
    done = 0
    while done < trials:
        m = min(chunk, trials - done)
        per_example = noise.grad_mean + noise.sigma_g * rng.standard_normal(
            (m, noise.batch_size, k))
        batch_grad = per_example.mean(axis=1)
        keep = rng.random((m, k)) < noise.p
        deltas[done:done + m] = -noise.eta * (batch_grad / noise.p) * keep
        done += m
    mean = deltas.mean(axis=0)
    var = deltas.var(axis=0, ddof=1) if trials > 1 else np.zeros(k)
    return mean, var


def _regularized_lower_gamma(a: float, x: float) -> float:
    """P(a, x), the regularized lower incomplete gamma function.

    Power series for x < a + 1, Lentz continued fraction for the upper
    tail otherwise; the standard split keeps both expansions stable.
    """
    if x < 0 or a <= 0:
        raise ConfigError("gamma arguments out of domain")
    if x == 0.0:
        return 0.0
    log_prefix = a * math.log(x) - x - math.lgamma(a)
    if x < a + 1.0:
        term = 1.0 / a
        total = term
        denom = a
        for _ in range(10000):
            denom += 1.0
            term *= x / denom
            total += term
            if abs(term) < abs(total) * 1e-17:
                break
        return min(1.0, math.exp(log_prefix) * total)
    # continued fraction for Q(a, x) via modified Lentz
    tiny = 1e-300
    b = x + 1.0 - a
    c = 1.0 / tiny
    d = 1.0 / b if b != 0 else 1.0 / tiny
    h = d
    for i in range(1, 10000):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < tiny:
            d = tiny
        c = b + an / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-16:
            break
    q = math.exp(log_prefix) * h
    return max(0.0, 1.0 - q)


def chi2_cdf(x: float, k: int) -> float:
    """CDF of the chi-square distribution with k degrees of freedom."""
    if k < 1:
        raise ConfigError("degrees of freedom must be at least 1")
    if x <= 0:
        return 0.0
    return _regularized_lower_gamma(k / 2.0, x / 2.0)


def chi2_quantile(k: int, q: float) -> float:
    """Inverse chi-square CDF by bisection, absolute tolerance 1e-10."""
    if k < 1:
        raise ConfigError("degrees of freedom must be at least 1")
    if not 0.0 < q < 1.0:
        raise ConfigError(f"quantile level must lie in (0, 1), got {q}")
    lo = 0.0
    hi = k + 40.0 * math.sqrt(k) + 40.0
    if chi2_cdf(hi, k) < q:
        raise NumericError(f"quantile bracket too small for q={q}")
    while hi - lo > 1e-10:
        mid = 0.5 * (lo + hi)
        if chi2_cdf(mid, k) < q:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


@dataclass(frozen=True)
class BoundInputs:
    """Inputs to the escape and generalization bounds.

    sigma_sq is the per-coordinate variance of the update noise at
    convergence; sigma0_sq the prior variance centered at the reference
    weights w0; sample_count the training-set size.
    """

    epsilon: float
    delta: float
    k: int
    sigma_sq: float
    sigma0_sq: float
    w: np.ndarray
    w0: np.ndarray
    sample_count: int

    def __post_init__(self):
        object.__setattr__(self, "w", np.asarray(self.w, dtype=np.float64).reshape(-1))
        object.__setattr__(self, "w0", np.asarray(self.w0, dtype=np.float64).reshape(-1))
        if not self.epsilon > 0:
            raise ConfigError("epsilon must be positive")
        if not 0.0 < self.delta < 1.0:
            raise ConfigError("delta must lie in (0, 1)")
        if self.k < 1:
            raise ConfigError("k must be at least 1")
        if not (self.sigma_sq > 0 and self.sigma0_sq > 0):
            raise ConfigError("variances must be positive")
        if self.w.shape != self.w0.shape:
            raise ShapeError("w and w0 must be aligned")
        if self.sample_count < 2:
            raise ConfigError("sample_count must be at least 2")

    @property
    def dist_sq(self) -> float:
        diff = self.w - self.w0
        return float(diff @ diff)


def escape_rho_bound(inputs: BoundInputs) -> float:
    """Largest sharpness the update noise tolerates without escaping.

    rho_max = 2 epsilon / (chi2_quantile(k, 1 - delta) * sigma_sq)
    """
    quantile = chi2_quantile(inputs.k, 1.0 - inputs.delta)
    return 2.0 * inputs.epsilon / (quantile * inputs.sigma_sq)


def generalization_bound(inputs: BoundInputs) -> float:
    """Flatness-controlled generalization error bound plus remainder.

    Requires k * sigma0_sq > ||w - w0||^2 so the prior radius stays
    positive.
    """
    k = inputs.k
    dist_sq = inputs.dist_sq
    slack = k * inputs.sigma0_sq - dist_sq
    if slack <= 0:
        raise ConfigError("need k * sigma0_sq > ||w - w0||^2")
    quantile = chi2_quantile(k, 1.0 - inputs.delta)
    lead = slack * inputs.epsilon / (k * quantile * inputs.sigma_sq)
    s = inputs.sample_count
    inflation = (1.0 + math.sqrt(math.log(s) / k)) ** 2
    log_term = k * math.log1p(k * dist_sq / slack * inflation)
    remainder = math.sqrt((log_term + 4.0 * math.log(s / inputs.delta))
                          / (2.0 * (s - 1.0)))
    return lead + remainder


def simulate_escape_frequency(hessian_diag, sigma_sq: float, epsilon: float,
                              trials: int, rng: np.random.Generator,
                              chunk: int = 20000) -> float:
    """Empirical P(0.5 * dw^T H dw >= eps) for dw ~ N(0, sigma^2 I)."""
    h = np.asarray(hessian_diag, dtype=np.float64).reshape(-1)
    hits = 0
    done = 0
    sigma = math.sqrt(sigma_sq)
    while done < trials:
        m = min(chunk, trials - done)
        dw = sigma * rng.standard_normal((m, h.size))
        quad = 0.5 * np.sum(h * dw * dw, axis=1)
        hits += int(np.count_nonzero(quad >= epsilon))
        done += m
    return hits / trials


def hessian_eigen_power(grad_fn, dim: int, iters: int,
                        rng: np.random.Generator, h: float = 1e-4) -> float:
    """Dominant Hessian eigenvalue of a scalar field via power iteration.

    Hessian-vector products come from central differences of `grad_fn`,
    evaluated at displacement h along the current unit direction. Returns
    the Rayleigh quotient after `iters` iterations; exactly zero fields
    short-circuit to 0.
    """
    if iters < 1:
        raise ConfigError("iters must be at least 1")
    v = rng.standard_normal(dim)
    norm = np.linalg.norm(v)
    while norm == 0.0:
        v = rng.standard_normal(dim)
        norm = np.linalg.norm(v)
    v /= norm
    rayleigh = 0.0
    for _ in range(iters):
        hv = (grad_fn(h * v) - grad_fn(-h * v)) / (2.0 * h)
        rayleigh = float(v @ hv)
        hv_norm = np.linalg.norm(hv)
        if hv_norm < 1e-12:
            return rayleigh
        v = hv / hv_norm
    return rayleigh


def sharpness_power_iteration(spec: ModelSpec, params: ParamVector, dataset,
                              iters: int, rng: np.random.Generator | None = None,
                              seed: int | None = None) -> float:
    """Largest loss-Hessian eigenvalue at `params` over `dataset`."""
    if rng is None:
        rng = seeded_rng(0 if seed is None else seed, TAG_SHARPNESS)
    graph = spec.loss_graph()
    base = params.data

    def grad_at(offset):
        _, g = forward_backward(graph, params.with_data(base + offset), dataset)
        return g

    return hessian_eigen_power(grad_at, base.size, iters, rng)
