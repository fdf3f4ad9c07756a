"""Phase-only diffractive network: forward pass with a cached tape and the
hand-written adjoint backward pass.

Complex gradients are carried as ``dL/dRe(E) + j dL/dIm(E)``. Real parameter
gradients come out of the contraction ``Re[conj(g) * dE]``.
"""
from __future__ import annotations

import itertools
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import quantizers as q
from .optics import (
    ComplexField,
    GeometrySpec,
    PropagationPlan,
    embed_fov,
    extract_detector,
)
from .quantizers import QuantizerMode, QuantizerSpec, TemperatureParam


@dataclass
class PhaseLayer:
    phi: np.ndarray
    mode: QuantizerMode = QuantizerMode.FULL_PRECISION
    spec: QuantizerSpec | None = None
    temp: TemperatureParam = field(default_factory=lambda: TemperatureParam(0.95, 0.05))
    # Set by FT/LI schedules; None means tau is derived from the trainable k.
    fixed_tau: float | None = None
    gs_logits: np.ndarray | None = None
    gs_temp: float = 50.0

    def __post_init__(self):
        self.phi = np.asarray(self.phi, dtype=float)
        if self.mode is not QuantizerMode.FULL_PRECISION and self.spec is None:
            raise ValueError(f"{self.mode.name} layers need a QuantizerSpec")
        if self.mode is QuantizerMode.GUMBEL_SOFTMAX:
            if self.gs_logits is None:
                self.gs_logits = q.init_gs_logits(
                    self.phi, self.spec.level_set(), q.gs_default_scale(self.spec))
            if self.gs_logits.shape != self.phi.shape + (self.spec.levels,):
                raise ValueError(f"GS logits shape {self.gs_logits.shape} does not match "
                                 f"{self.phi.shape} x {self.spec.levels} levels")

    @property
    def tau(self) -> float:
        if self.fixed_tau is not None:
            return self.fixed_tau
        return q.temperature_from_k(self.temp)

    @property
    def learnable_tau(self) -> bool:
        return self.mode.has_temperature and self.fixed_tau is None

    def hard_phase(self) -> np.ndarray:
        """Phase used at evaluation time."""
        if self.mode is QuantizerMode.FULL_PRECISION:
            return self.phi
        if self.mode is QuantizerMode.GUMBEL_SOFTMAX:
            return q.gs_forward(self.gs_logits, self.spec.level_set(), self.gs_temp,
                                train_mode=False)
        return q.hard_quantize(self.phi, self.spec)

    def train_phase(self, rng: np.random.Generator | None):
        """Phase used in training, plus whatever backward needs (GS probabilities)."""
        m = self.mode
        if m is QuantizerMode.FULL_PRECISION:
            return self.phi, None
        if m in (QuantizerMode.HARD, QuantizerMode.STE):
            return q.hard_quantize(self.phi, self.spec), None
        if m is QuantizerMode.PSQ:
            return q.psq_eval(self.phi, self.tau, self.spec), None
        if m is QuantizerMode.DSQ:
            return q.dsq_eval(self.phi, self.tau, self.spec), None
        probs = q.gs_probabilities(self.gs_logits, self.gs_temp, rng)
        return probs @ self.spec.level_set(), probs

    def copy(self) -> "PhaseLayer":
        return PhaseLayer(
            phi=self.phi.copy(), mode=self.mode, spec=self.spec,
            temp=TemperatureParam(self.temp.k, self.temp.gamma), fixed_tau=self.fixed_tau,
            gs_logits=None if self.gs_logits is None else self.gs_logits.copy(),
            gs_temp=self.gs_temp)


_model_ids = itertools.count()


class D2NNModel:
    """Ordered phase layers plus the propagation geometry between them."""

    def __init__(self, layers: list[PhaseLayer], geometry: GeometrySpec):
        if len(layers) != geometry.num_layers:
            raise ValueError(f"geometry declares {geometry.num_layers} layers, got {len(layers)}")
        for n, layer in enumerate(layers):
            if layer.phi.shape != geometry.layer_shape:
                raise ValueError(f"layer {n} has shape {layer.phi.shape}, "
                                 f"expected {geometry.layer_shape}")
        self.layers = layers
        self.geometry = geometry
        self.plan_in, self.plan_mid, self.plan_out = geometry.plans()
        self._id = next(_model_ids)
        self.version = 0

    @classmethod
    def initialize(cls, geometry: GeometrySpec, rng: np.random.Generator | None = None,
                   init: str = "uniform") -> "D2NNModel":
        shape = geometry.layer_shape
        layers = []
        for _ in range(geometry.num_layers):
            if init == "uniform":
                phi = rng.uniform(0.0, 2 * np.pi, size=shape)
            elif init == "zeros":
                phi = np.zeros(shape)
            else:
                raise ValueError(f"unknown init {init!r}")
            layers.append(PhaseLayer(phi))
        return cls(layers, geometry)

    def touch(self) -> None:
        """Mark parameters as changed so outstanding tapes become stale."""
        self.version += 1

    def copy(self) -> "D2NNModel":
        return D2NNModel([layer.copy() for layer in self.layers], self.geometry)

    @property
    def k_vector(self) -> np.ndarray:
        return np.array([layer.temp.k for layer in self.layers])

    @property
    def taus(self) -> list[float]:
        return [layer.tau for layer in self.layers]


@dataclass
class ForwardTape:
    inputs: list[np.ndarray]  # E^n_in, before modulation
    phases: list[np.ndarray]  # quantized phase actually applied
    gs_probs: list[np.ndarray | None]
    last_field: np.ndarray  # full-plane field reaching the detector
    train_mode: bool
    model_token: tuple[int, int]

    def __len__(self):
        return len(self.inputs)


@dataclass
class Gradients:
    phi: list[np.ndarray]
    k: list[float]
    gs_logits: list[np.ndarray | None]


def encode_phase_input(image, pitch: float, wavelength: float) -> ComplexField:
    """Unit-amplitude field whose phase is ``pi * image`` (image values in [0, 1])."""
    image = np.asarray(image, dtype=float)
    if image.size and (image.min() < 0 or image.max() > 1 or not np.isfinite(image).all()):
        raise ValueError("phase image values must lie in [0, 1]")
    return ComplexField(np.exp(1j * np.pi * image), pitch, wavelength)


def modulate(f: ComplexField, layer: PhaseLayer, train_mode: bool = True,
             rng: np.random.Generator | None = None) -> ComplexField:
    if f.shape != layer.phi.shape:
        raise ValueError(f"field shape {f.shape} does not match layer {layer.phi.shape}")
    phase = layer.train_phase(rng)[0] if train_mode else layer.hard_phase()
    return f.with_values(f.values * np.exp(1j * phase))


def detector_intensity(f: ComplexField | np.ndarray) -> np.ndarray:
    values = f.values if isinstance(f, ComplexField) else np.asarray(f)
    return values.real**2 + values.imag**2


def forward(model: D2NNModel, inp: ComplexField, train_mode: bool = False,
            rng: np.random.Generator | None = None) -> tuple[ComplexField, ForwardTape]:
    """Run the full stack on a (possibly batched) FoV field.

    Returns the field on the detector window and the tape for :func:`backward`.
    Evaluation mode applies each layer's hard (deployable) phase.
    """
    g = model.geometry
    if inp.shape != g.fov_shape:
        raise ValueError(f"input shape {inp.shape} does not match FoV {g.fov_shape}")
    if not (np.isclose(inp.pitch, g.pitch) and np.isclose(inp.wavelength, g.wavelength)):
        raise ValueError("input pitch/wavelength do not match the model geometry")
    cur = model.plan_in.forward(embed_fov(inp, g.layer_shape))
    inputs, phases, probs = [], [], []
    for n, layer in enumerate(model.layers):
        if train_mode:
            phase, p = layer.train_phase(rng)
        else:
            phase, p = layer.hard_phase(), None
        inputs.append(cur.values)
        phases.append(phase)
        probs.append(p)
        cur = cur.with_values(cur.values * np.exp(1j * phase))
        plan = model.plan_mid if n < len(model.layers) - 1 else model.plan_out
        cur = plan.forward(cur)
    tape = ForwardTape(inputs, phases, probs, cur.values, train_mode,
                       (model._id, model.version))
    return extract_detector(cur, g.detector_shape), tape


def backward(model: D2NNModel, tape: ForwardTape, grad_output_intensity) -> Gradients:
    """Gradients of a real loss given ``dL/dI`` on the detector.

    Contributions are summed over any batch axes. Only adjoint propagations
    are performed; the forward fields come from the tape.
    """
    g = model.geometry
    if not tape.train_mode:
        raise ValueError("backward needs a tape recorded in train mode")
    if tape.model_token != (model._id, model.version) or len(tape) != len(model.layers):
        raise ValueError("tape is stale or belongs to a different model")
    grad_i = np.asarray(grad_output_intensity, dtype=float)
    out_det = extract_detector(
        ComplexField(tape.last_field, g.pitch, g.wavelength), g.detector_shape)
    if grad_i.shape != out_det.values.shape:
        raise ValueError(f"intensity gradient shape {grad_i.shape} does not match "
                         f"detector output {out_det.values.shape}")
    # I = |E|^2  =>  dL/dRe + j dL/dIm = 2 (dL/dI) E
    adj = embed_fov(out_det.with_values(2.0 * grad_i * out_det.values), g.layer_shape)
    adj = model.plan_out.adjoint(adj)

    n_layers = len(model.layers)
    grad_phi: list = [None] * n_layers
    grad_k: list = [0.0] * n_layers
    grad_logits: list = [None] * n_layers
    batch_axes = tuple(range(adj.values.ndim - 2))
    for n in reversed(range(n_layers)):
        layer = model.layers[n]
        rot = np.exp(1j * tape.phases[n])
        e_out = tape.inputs[n] * rot
        # dL/dQ pixelwise; summed over the batch since weights are shared
        dq = np.real(np.conj(adj.values) * 1j * e_out)
        if batch_axes:
            dq = dq.sum(axis=batch_axes)
        grad_phi[n], grad_k[n], grad_logits[n] = _layer_grads(layer, dq, tape.gs_probs[n])
        if n > 0:
            adj = model.plan_mid.adjoint(adj.with_values(adj.values * np.conj(rot)))
    return Gradients(grad_phi, grad_k, grad_logits)


def _layer_grads(layer: PhaseLayer, dq: np.ndarray, probs):
    m = layer.mode
    zero = np.zeros_like(layer.phi)
    if m in (QuantizerMode.FULL_PRECISION, QuantizerMode.STE):
        return dq, 0.0, None
    if m is QuantizerMode.HARD:
        return zero, 0.0, None
    if m is QuantizerMode.GUMBEL_SOFTMAX:
        jac = q.gs_grad_logits(probs, layer.spec.level_set(), layer.gs_temp)
        return zero, 0.0, dq[..., None] * jac
    tau = layer.tau
    if m is QuantizerMode.PSQ:
        gphi = dq * q.psq_grad_input(layer.phi, tau, layer.spec)
        dtau = lambda: q.psq_grad_temperature(layer.phi, tau, layer.spec)  # noqa: E731
    else:
        gphi = dq * q.dsq_grad_input(layer.phi, tau, layer.spec)
        dtau = lambda: q.dsq_grad_temperature(layer.phi, tau, layer.spec)  # noqa: E731
    gk = 0.0
    if layer.learnable_tau:
        gk = float((dq * dtau()).sum()) * q.temperature_grad_k(layer.temp)
    return gphi, gk, None


# Checkpoint layout (little-endian):
#   "D2NN", u32 version
#   geometry: u32 num_layers, 3 x (u32 rows, u32 cols) for layer/fov/detector,
#             f64 wavelength, f64 neuron_size, f64 z_in, f64 z, f64 z_out,
#             u8 distances_in_wavelengths, u32 pad
#   per layer: u8 mode tag, f64 lower, f64 upper, f64 step, u32 levels,
#             f64 k, f64 gamma, f64 fixed_tau (NaN if learnable), f64 gs_temp,
#             phi (rows*cols f64), then GS logits (rows*cols*levels f64) for GS layers
# A layer without a QuantizerSpec stores lower=upper=step=0 and levels=0.
_CKPT_MAGIC = b"D2NN"
_CKPT_VERSION = 1
_GEOM = struct.Struct("<I6IdddddBI")
_LAYER = struct.Struct("<BdddIdddd")


def save_checkpoint(model: D2NNModel, path, metadata: dict | None = None) -> None:
    g = model.geometry
    parts = [_CKPT_MAGIC, struct.pack("<I", _CKPT_VERSION),
             _GEOM.pack(g.num_layers, *g.layer_shape, *g.fov_shape, *g.detector_shape,
                        g.wavelength, g.neuron_size, g.z_in, g.z, g.z_out,
                        int(g.distances_in_wavelengths), g.pad)]
    for layer in model.layers:
        s = layer.spec
        spec_fields = (s.lower, s.upper, s.step, s.levels) if s else (0.0, 0.0, 0.0, 0)
        fixed = np.nan if layer.fixed_tau is None else layer.fixed_tau
        parts.append(_LAYER.pack(layer.mode.value, *spec_fields, layer.temp.k,
                                 layer.temp.gamma, fixed, layer.gs_temp))
        parts.append(np.ascontiguousarray(layer.phi, dtype="<f8").tobytes())
        if layer.mode is QuantizerMode.GUMBEL_SOFTMAX:
            parts.append(np.ascontiguousarray(layer.gs_logits, dtype="<f8").tobytes())
    path = Path(path)
    path.write_bytes(b"".join(parts))
    if metadata is not None:
        sidecar_path(path).write_text(json.dumps(metadata, indent=2, sort_keys=True) + "\n")


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def load_checkpoint(path) -> D2NNModel:
    data = Path(path).read_bytes()
    if data[:4] != _CKPT_MAGIC:
        raise ValueError(f"{path}: not a D2NN checkpoint")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != _CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 8
    try:
        vals = _GEOM.unpack_from(data, off)
        off += _GEOM.size
        geometry = GeometrySpec(
            num_layers=vals[0], layer_shape=vals[1:3], fov_shape=vals[3:5],
            detector_shape=vals[5:7], wavelength=vals[7], neuron_size=vals[8],
            z_in=vals[9], z=vals[10], z_out=vals[11],
            distances_in_wavelengths=bool(vals[12]), pad=vals[13])
        rows, cols = geometry.layer_shape
        layers = []
        for _ in range(geometry.num_layers):
            tag, lower, upper, _step, levels, k, gamma, fixed, gs_temp = _LAYER.unpack_from(data, off)
            off += _LAYER.size
            mode = QuantizerMode(tag)
            spec = QuantizerSpec(lower, upper, levels) if levels else None
            phi = np.frombuffer(data, "<f8", rows * cols, off).reshape(rows, cols).copy()
            off += rows * cols * 8
            logits = None
            if mode is QuantizerMode.GUMBEL_SOFTMAX:
                n = rows * cols * levels
                logits = np.frombuffer(data, "<f8", n, off).reshape(rows, cols, levels).copy()
                off += n * 8
            layers.append(PhaseLayer(
                phi=phi, mode=mode, spec=spec, temp=TemperatureParam(k, gamma),
                fixed_tau=None if np.isnan(fixed) else fixed, gs_logits=logits,
                gs_temp=gs_temp))
    except (struct.error, ValueError) as exc:
        raise ValueError(f"{path}: corrupt checkpoint ({exc})") from exc
    if off != len(data):
        raise ValueError(f"{path}: {len(data) - off} trailing bytes in checkpoint")
    return D2NNModel(layers, geometry)
