"""Optimizer steps: masked Adam, masked SGD, schedule, clipping, decay."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, NumericError, ShapeError
from .masking import GradMask
from .params import ParamVector


@dataclass(frozen=True)
class AdamState:
    """First/second moment vectors and the step counter."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0

    def __post_init__(self):
        m = np.asarray(self.m, dtype=np.float64)
        v = np.asarray(self.v, dtype=np.float64)
        if m.shape != v.shape or m.ndim != 1:
            raise ShapeError("moment vectors must be flat and aligned")
        if np.any(v < 0):
            raise NumericError("second moment must be nonnegative")
        if self.t < 0:
            raise ConfigError("step counter must be nonnegative")
        object.__setattr__(self, "m", m)
        object.__setattr__(self, "v", v)

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)


@dataclass(frozen=True)
class OptimConfig:
    """Step hyperparameters; defaults follow common fine-tuning practice.

    `algo` picks the update rule: "adam" for the masked Adam variant,
    "sgd" for plain masked gradient descent (the setting the update-noise
    analysis assumes).
    """

    eta: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-6
    weight_decay: float = 0.0
    warmup_steps: int = 0
    total_steps: int | None = None
    clip_max_norm: float | None = 1.0
    algo: str = "adam"

    def validate(self) -> "OptimConfig":
        if self.algo not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer algo {self.algo!r}")
        if not self.eta > 0:
            raise ConfigError("eta must be positive")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError("betas must lie in [0, 1)")
        if not self.eps > 0:
            raise ConfigError("eps must be positive")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be nonnegative")
        if self.warmup_steps < 0:
            raise ConfigError("warmup_steps must be nonnegative")
        if self.total_steps is None or self.total_steps <= 0:
            raise ConfigError("total_steps must be positive")
        if self.warmup_steps > self.total_steps:
            raise ConfigError("warmup_steps cannot exceed total_steps")
        if self.clip_max_norm is not None and not self.clip_max_norm > 0:
            raise ConfigError("clip_max_norm must be positive or None")
        return self

    def resolved(self, total_steps: int) -> "OptimConfig":
        cfg = self if self.total_steps else replace(self, total_steps=int(total_steps))
        return cfg.validate()

    def to_dict(self) -> dict:
        return {
            "eta": self.eta, "beta1": self.beta1, "beta2": self.beta2,
            "eps": self.eps, "weight_decay": self.weight_decay,
            "warmup_steps": self.warmup_steps, "total_steps": self.total_steps,
            "clip_max_norm": self.clip_max_norm, "algo": self.algo,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "OptimConfig":
        known = {f: d[f] for f in (
            "eta", "beta1", "beta2", "eps", "weight_decay",
            "warmup_steps", "total_steps", "clip_max_norm", "algo") if f in d}
        return cls(**known)


def child_tuning_adam_step(params: ParamVector, grads: np.ndarray,
                           mask: GradMask | None, state: AdamState,
                           config: OptimConfig, lr_t: float):
    """One masked Adam step.

    The mask multiplies the raw gradient before the moment updates, so a
    frozen coordinate accumulates no momentum and never moves. Decoupled
    weight decay shrinks only coordinates the mask leaves trainable.
    Returns (params', state').
    """
    g = np.asarray(grads, dtype=np.float64)
    if g.shape != params.data.shape or state.m.shape != params.data.shape:
        raise ShapeError("params, grads, and state must be aligned")
    if lr_t < 0:
        raise ConfigError("lr_t must be nonnegative")
    if not np.all(np.isfinite(g)):
        raise NumericError("non-finite gradient passed to optimizer")
    if mask is not None:
        if len(mask) != g.size:
            raise ShapeError("mask misaligned with gradients")
        g = g * mask.scales

    t = state.t + 1
    m = config.beta1 * state.m + (1.0 - config.beta1) * g
    v = config.beta2 * state.v + (1.0 - config.beta2) * g * g
    m_hat = m / (1.0 - config.beta1 ** t)
    v_hat = v / (1.0 - config.beta2 ** t)
    w = params.data - lr_t * m_hat / (np.sqrt(v_hat) + config.eps)
    if config.weight_decay > 0.0:
        decay = lr_t * config.weight_decay * w
        if mask is not None:
            decay = np.where(mask.scales > 0, decay, 0.0)
        w = w - decay
    return params.with_data(w), AdamState(m, v, t)


def sgd_masked_step(params: ParamVector, grads: np.ndarray,
                    mask: GradMask | None, eta: float) -> ParamVector:
    """Plain gradient descent on the masked gradient."""
    g = np.asarray(grads, dtype=np.float64)
    if g.shape != params.data.shape:
        raise ShapeError("params and grads must be aligned")
    if mask is not None:
        if len(mask) != g.size:
            raise ShapeError("mask misaligned with gradients")
        g = g * mask.scales
    return params.with_data(params.data - eta * g)


def lr_schedule(step: int, config: OptimConfig) -> float:
    """Linear warmup to eta, then linear decay to 0 at total_steps."""
    config.validate()
    total, warmup = config.total_steps, config.warmup_steps
    if not 0 <= step <= total:
        raise ConfigError(f"step {step} outside 0..{total}")
    if step < warmup:
        return config.eta * step / warmup
    if total == warmup:
        return config.eta
    return config.eta * (total - step) / (total - warmup)


def clip_global_norm(grads: np.ndarray, max_norm: float) -> np.ndarray:
    """Rescale so the global L2 norm never exceeds max_norm."""
    if not max_norm > 0:
        raise ConfigError("max_norm must be positive")
    g = np.asarray(grads, dtype=np.float64)
    norm = float(np.linalg.norm(g))
    if norm <= max_norm:
        return g
    return g * (max_norm / norm)


def weight_decay_to_pretrained_loss(params: ParamVector, w0: ParamVector,
                                    lam: float):
    """Squared-distance penalty lam * ||w - w0||^2 and its gradient."""
    if lam < 0:
        raise ConfigError("lam must be nonnegative")
    if len(params) != len(w0):
        raise ShapeError("params and w0 must be aligned")
    diff = params.data - w0.data
    penalty = lam * float(diff @ diff)
    return penalty, 2.0 * lam * diff
