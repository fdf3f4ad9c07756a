"""Finite-difference checks of the analytic gradients.

Each preset builds a small seeded network, scores the detector intensity with
a fixed random weighting and compares backward() against central differences.
Relative error per entry is ``|a - f| / max(|a|, |f|)`` (zero when both are
zero).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import quantizers as q
from .network import D2NNModel, PhaseLayer, backward, detector_intensity, encode_phase_input, forward
from .optics import GeometrySpec
from .quantizers import QuantizerMode, QuantizerSpec, TemperatureParam

PRESETS = ("default", "ste", "hard")
NETWORK_TOL = 1e-4
QUANTIZER_TOL = 1e-5


@dataclass
class CheckResult:
    name: str
    max_rel: float
    worst: str
    tolerance: float
    enforced: bool = True

    @property
    def passed(self) -> bool:
        return not self.enforced or self.max_rel <= self.tolerance


def rel_error(a, f):
    a, f = np.asarray(a, float), np.asarray(f, float)
    den = np.maximum(np.abs(a), np.abs(f))
    return np.where(den > 0, np.abs(a - f) / np.where(den > 0, den, 1.0), 0.0)


def _worst(name, analytic, numeric, labels, tol, enforced=True):
    err = rel_error(analytic, numeric)
    i = int(np.argmax(err))
    return CheckResult(name, float(err[i]), labels[i], tol, enforced)


def build_network(mode=QuantizerMode.PSQ, size=8, layers=2, tau=4.0, levels=4, seed=0):
    rng = np.random.default_rng(seed)
    geometry = GeometrySpec(layers, (size, size), (size, size), (size, size))
    spec = QuantizerSpec(0.0, 1.99 * np.pi, levels)
    gamma = 0.05
    stack = [PhaseLayer(rng.uniform(0, 2 * np.pi, (size, size)), mode, spec,
                        TemperatureParam(1.0 / tau - gamma, gamma)) for _ in range(layers)]
    model = D2NNModel(stack, geometry)
    image = rng.uniform(0, 1, (size, size))
    weights = rng.uniform(0, 1, (size, size))
    return model, encode_phase_input(image, geometry.pitch, geometry.wavelength), weights


def _loss(model, inp, weights):
    out, tape = forward(model, inp, train_mode=True)
    return float((detector_intensity(out) * weights).sum()), tape


def network_check(model, inp, weights, h=1e-4):
    """Analytic vs central-difference gradients for every phase and every ``k``."""
    _, tape = _loss(model, inp, weights)
    grads = backward(model, tape, weights)
    an_phi, fd_phi, where_phi = [], [], []
    an_k, fd_k, where_k = [], [], []
    for n, layer in enumerate(model.layers):
        for idx in np.ndindex(layer.phi.shape):
            p = layer.phi[idx]
            layer.phi[idx] = p + h
            up = _loss(model, inp, weights)[0]
            layer.phi[idx] = p - h
            down = _loss(model, inp, weights)[0]
            layer.phi[idx] = p
            an_phi.append(grads.phi[n][idx])
            fd_phi.append((up - down) / (2 * h))
            where_phi.append(f"phi[layer {n}, {idx[0]}, {idx[1]}]")
        if layer.learnable_tau:
            k, gamma = layer.temp.k, layer.temp.gamma
            layer.temp = TemperatureParam(k + h, gamma)
            up = _loss(model, inp, weights)[0]
            layer.temp = TemperatureParam(k - h, gamma)
            down = _loss(model, inp, weights)[0]
            layer.temp = TemperatureParam(k, gamma)
            an_k.append(grads.k[n])
            fd_k.append((up - down) / (2 * h))
            where_k.append(f"k[layer {n}]")
    model.touch()
    return (np.array(an_phi), np.array(fd_phi), where_phi), (np.array(an_k), np.array(fd_k), where_k)


def quantizer_checks(spec: QuantizerSpec, tau: float = 4.0, gamma: float = 0.05, h=1e-6,
                     seed: int = 0) -> list[CheckResult]:
    """Element-wise derivative checks for PSQ, DSQ, the temperature map and GS."""
    rng = np.random.default_rng(seed)
    x = rng.uniform(spec.lower + 0.05, spec.upper - 0.05, 64)
    labels = [f"x={v:.6g}" for v in x]
    out = []

    fd = (q.psq_eval(x + h, tau, spec) - q.psq_eval(x - h, tau, spec)) / (2 * h)
    out.append(_worst("psq d/dx", q.psq_grad_input(x, tau, spec), fd, labels, QUANTIZER_TOL))
    fd = (q.psq_eval(x, tau + h, spec) - q.psq_eval(x, tau - h, spec)) / (2 * h)
    out.append(_worst("psq d/dtau", q.psq_grad_temperature(x, tau, spec), fd, labels,
                      QUANTIZER_TOL))
    fd = (q.dsq_eval(x + h, tau, spec) - q.dsq_eval(x - h, tau, spec)) / (2 * h)
    out.append(_worst("dsq d/dx", q.dsq_grad_input(x, tau, spec), fd, labels, QUANTIZER_TOL))
    fd = (q.dsq_eval(x, tau + h, spec) - q.dsq_eval(x, tau - h, spec)) / (2 * h)
    out.append(_worst("dsq d/dtau", q.dsq_grad_temperature(x, tau, spec), fd, labels,
                      QUANTIZER_TOL))

    ks = np.concatenate([rng.uniform(0.01, 2, 8), -rng.uniform(0.01, 2, 8)])
    fd = [(q.temperature_from_k(TemperatureParam(k + h, gamma))
           - q.temperature_from_k(TemperatureParam(k - h, gamma))) / (2 * h) for k in ks]
    an = [q.temperature_grad_k(TemperatureParam(k, gamma)) for k in ks]
    out.append(_worst("tau d/dk", an, fd, [f"k={k:.6g}" for k in ks], QUANTIZER_TOL))

    logits = rng.normal(size=(4, 4, spec.levels))
    temp = 1.5
    levels = spec.level_set()
    probs = q.gs_probabilities(logits, temp, None)
    upstream = rng.normal(size=(4, 4))
    an = (q.gs_grad_logits(probs, levels, temp) * upstream[..., None]).ravel()
    fd, names = [], []
    for idx in np.ndindex(logits.shape):
        lp, lm = logits.copy(), logits.copy()
        lp[idx] += h
        lm[idx] -= h
        f = ((q.gs_forward(lp, levels, temp) - q.gs_forward(lm, levels, temp)) * upstream).sum()
        fd.append(f / (2 * h))
        names.append(f"logit{idx}")
    out.append(_worst("gs d/dlogit", an, fd, names, QUANTIZER_TOL))
    return out


def run(preset: str = "default") -> list[CheckResult]:
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}; choose from {PRESETS}")
    if preset == "default":
        model, inp, weights = build_network(QuantizerMode.PSQ)
        (ap, fp, wp), (ak, fk, wk) = network_check(model, inp, weights)
        results = [_worst("network d/dphi", ap, fp, wp, NETWORK_TOL),
                   _worst("network d/dk", ak, fk, wk, NETWORK_TOL)]
        return results + quantizer_checks(model.layers[0].spec)
    if preset == "ste":
        # the identity backward is not the derivative of rounding, so this is informational
        model, inp, weights = build_network(QuantizerMode.STE)
        (ap, fp, wp), _ = network_check(model, inp, weights)
        return [_worst("ste vs finite difference", ap, fp, wp, NETWORK_TOL, enforced=False)]
    model, inp, weights = build_network(QuantizerMode.HARD)
    _, tape = _loss(model, inp, weights)
    grads = backward(model, tape, weights)
    peak = max(float(np.abs(g).max()) for g in grads.phi)
    peak = max(peak, max(abs(k) for k in grads.k))
    return [CheckResult("hard gradient magnitude", peak, "all entries", 0.0)]
