"""Quantization functions for bounded phase weights.

Hard (uniform) quantization, the progressive sigmoid quantizer (PSQ), the
tanh-based DSQ baseline, the straight-through estimator and Gumbel-Softmax
relaxation over the level set. Every function is elementwise and accepts
scalars or numpy arrays.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, softmax


@dataclass(frozen=True)
class QuantizerSpec:
    """Uniform level set ``{lower + i*step : 0 <= i < levels}``."""

    lower: float
    upper: float
    levels: int

    def __post_init__(self):
        if not self.lower < self.upper:
            raise ValueError(f"lower ({self.lower}) must be < upper ({self.upper})")
        if int(self.levels) != self.levels or self.levels < 2:
            raise ValueError(f"levels must be an integer >= 2, got {self.levels}")

    @property
    def step(self) -> float:
        return (self.upper - self.lower) / (self.levels - 1)

    def level_set(self) -> np.ndarray:
        values = self.lower + np.arange(self.levels) * self.step
        values[-1] = self.upper
        return values

    def midpoints(self) -> np.ndarray:
        """Transition points ``beta_i = lower + (i + 1/2) * step`` for i < levels-1."""
        return self.lower + (np.arange(self.levels - 1) + 0.5) * self.step


@dataclass(frozen=True)
class TemperatureParam:
    k: float
    gamma: float = 0.05

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")


class QuantizerMode(enum.Enum):
    FULL_PRECISION = 0
    HARD = 1
    PSQ = 2
    DSQ = 3
    STE = 4
    GUMBEL_SOFTMAX = 5

    @property
    def has_temperature(self) -> bool:
        return self in (QuantizerMode.PSQ, QuantizerMode.DSQ)


def _round_half_away(x):
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def hard_quantize(x, spec: QuantizerSpec):
    """Round to the nearest level, clamping outside ``[lower, upper)``.

    Exact midpoints round away from zero (upwards, since ``x - lower >= 0``).
    """
    x = np.asarray(x, dtype=float)
    idx = _round_half_away((x - spec.lower) / spec.step)
    idx = np.clip(idx, 0, spec.levels - 1)
    out = spec.level_set()[idx.astype(np.int64)]
    out = np.where(x < spec.lower, spec.lower, out)
    out = np.where(x >= spec.upper, spec.upper, out)
    return out[()] if out.ndim == 0 else out


def sigmoid(x):
    return expit(x)


def sigmoid_derivative(x):
    # s(x) * s(-x) keeps full precision in both tails, unlike s * (1 - s)
    return expit(x) * expit(-np.asarray(x, dtype=float))


def _psq_args(x, tau, spec):
    x = np.asarray(x, dtype=float)
    diff = x[..., None] - spec.midpoints()
    return diff, tau * diff


def psq_eval(x, tau: float, spec: QuantizerSpec):
    """Progressive sigmoid quantizer: a sum of ``levels - 1`` shifted sigmoids.

    No clamping is applied, so weights outside the range still see a gradient.
    """
    if not tau > 0:
        raise ValueError(f"tau must be positive, got {tau}")
    _, t = _psq_args(x, tau, spec)
    return spec.lower + spec.step * expit(t).sum(axis=-1)


def psq_grad_input(x, tau: float, spec: QuantizerSpec):
    _, t = _psq_args(x, tau, spec)
    return spec.step * tau * sigmoid_derivative(t).sum(axis=-1)


def psq_grad_temperature(x, tau: float, spec: QuantizerSpec):
    diff, t = _psq_args(x, tau, spec)
    return spec.step * (diff * sigmoid_derivative(t)).sum(axis=-1)


def temperature_from_k(p: TemperatureParam) -> float:
    return 1.0 / (abs(p.k) + p.gamma)


def temperature_grad_k(p: TemperatureParam) -> float:
    # sign(0) = 0 gives the zero subgradient at the kink
    return -float(np.sign(p.k)) / (abs(p.k) + p.gamma) ** 2


def ste_forward(x, spec: QuantizerSpec):
    return hard_quantize(x, spec)


def ste_backward(upstream):
    """Identity: the hard quantizer's derivative is replaced by 1 everywhere."""
    return upstream


def _dsq_cell(x, tau, spec):
    xc = np.clip(np.asarray(x, dtype=float), spec.lower, spec.upper)
    cell = np.clip(np.floor((xc - spec.lower) / spec.step), 0, spec.levels - 2)
    base = spec.lower + cell * spec.step
    return xc, base, xc - (base + 0.5 * spec.step)


def dsq_eval(x, tau: float, spec: QuantizerSpec):
    """Differentiable soft quantization (tanh cells between adjacent levels).

    Inputs are clamped to ``[lower, upper]``; inside cell i the output is
    ``level_i + step/2 * (1 + tanh(tau*(x - beta_i)) / tanh(tau*step/2))``,
    so cell edges map exactly onto levels.
    """
    if not tau > 0:
        raise ValueError(f"tau must be positive, got {tau}")
    _, base, d = _dsq_cell(x, tau, spec)
    half = 0.5 * spec.step
    out = base + half * (1.0 + np.tanh(tau * d) / math.tanh(tau * half))
    # the tanh ratio can overshoot a cell edge by an ulp
    out = np.clip(out, spec.lower, spec.upper)
    return out[()] if np.ndim(out) == 0 else out


def dsq_grad_input(x, tau: float, spec: QuantizerSpec):
    x = np.asarray(x, dtype=float)
    _, _, d = _dsq_cell(x, tau, spec)
    half = 0.5 * spec.step
    th = np.tanh(tau * d)
    g = half * tau * (1.0 - th * th) / math.tanh(tau * half)
    inside = (x >= spec.lower) & (x <= spec.upper)
    out = np.where(inside, g, 0.0)
    return out[()] if out.ndim == 0 else out


def dsq_grad_temperature(x, tau: float, spec: QuantizerSpec):
    _, _, d = _dsq_cell(x, tau, spec)
    half = 0.5 * spec.step
    th = np.tanh(tau * d)
    tn = math.tanh(tau * half)
    sech2_n = 1.0 - tn * tn
    out = half * (d * (1.0 - th * th) * tn - th * half * sech2_n) / (tn * tn)
    return out[()] if np.ndim(out) == 0 else out


def init_gs_logits(phi, levels, scale: float):
    """Per-weight logits ``-scale * (phi - level_i)**2`` (level axis last)."""
    if not scale > 0:
        raise ValueError(f"scale must be positive, got {scale}")
    phi = np.asarray(phi, dtype=float)
    return -scale * (phi[..., None] - np.asarray(levels, dtype=float)) ** 2


def gs_default_scale(spec: QuantizerSpec) -> float:
    return 8.0 / spec.step**2


def gs_probabilities(logits, temp: float, rng: np.random.Generator | None):
    """Relaxed one-hot weights over the level axis; ``rng=None`` skips the noise."""
    if not temp > 0:
        raise ValueError(f"Gumbel-Softmax temperature must be positive, got {temp}")
    logits = np.asarray(logits, dtype=float)
    if rng is not None:
        logits = logits + rng.gumbel(size=logits.shape)
    return softmax(logits / temp, axis=-1)


def gs_forward(logits, levels, temp: float, rng: np.random.Generator | None = None,
               train_mode: bool = True):
    """Gumbel-Softmax quantizer.

    In training, returns the convex combination of levels under the relaxed
    sample. In evaluation, returns the level at ``argmax(logits)``; ties go to
    the lowest index and the random source is ignored.
    """
    if not temp > 0:
        raise ValueError(f"Gumbel-Softmax temperature must be positive, got {temp}")
    levels = np.asarray(levels, dtype=float)
    logits = np.asarray(logits, dtype=float)
    if logits.shape[-1] != levels.size:
        raise ValueError(f"logits have {logits.shape[-1]} entries, expected {levels.size}")
    if not train_mode:
        out = levels[np.argmax(logits, axis=-1)]
        return out[()] if out.ndim == 0 else out
    probs = gs_probabilities(logits, temp, rng)
    out = probs @ levels
    return out[()] if np.ndim(out) == 0 else out


def gs_grad_logits(probs, levels, temp: float):
    """Jacobian-vector form ``d out / d logit_j = p_j (level_j - out) / temp``."""
    levels = np.asarray(levels, dtype=float)
    out = probs @ levels
    return probs * (levels - out[..., None]) / temp
