"""Optimizer, temperature schedules and the two-stage training protocol.

A model is first trained with full-precision phases, then its wrapped phases
seed quantization-aware training (QAT) with one of the quantizers. Validation
and test metrics always use the deployable (hard-quantized) phases.
"""
from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import objectives as obj
from . import quantizers as q
from .data import PhaseSample, batches, stack
from .network import (
    D2NNModel,
    PhaseLayer,
    backward,
    detector_intensity,
    encode_phase_input,
    forward,
)
from .optics import GeometrySpec
from .quantizers import QuantizerMode, QuantizerSpec, TemperatureParam

log = logging.getLogger(__name__)

TASKS = ("classification", "qpi")
QUANTIZERS = ("fp", "hard", "ste", "gs", "dsq", "psq-ft", "psq-li", "psq-lt")
_MODE_FOR = {
    "fp": QuantizerMode.FULL_PRECISION,
    "hard": QuantizerMode.HARD,
    "ste": QuantizerMode.STE,
    "gs": QuantizerMode.GUMBEL_SOFTMAX,
    "dsq": QuantizerMode.DSQ,
    "psq-ft": QuantizerMode.PSQ,
    "psq-li": QuantizerMode.PSQ,
    "psq-lt": QuantizerMode.PSQ,
}


class ConfigError(ValueError):
    pass


@dataclass
class ScheduleConfig:
    mode: str = "LT"
    tau0: float = 1.0
    delta_tau: float = 0.2
    delta_t: int = 1
    gamma: float = 0.05
    lambda1: float = 1e-4
    lambda2: float = 0.05
    beta: int = 5
    literal: bool = False

    def __post_init__(self):
        if self.mode not in ("FT", "LI", "LT"):
            raise ConfigError(f"schedule mode must be FT, LI or LT, got {self.mode!r}")
        if not self.tau0 > 0 or not self.gamma > 0:
            raise ConfigError("tau0 and gamma must be positive")
        if self.mode == "LI" and self.delta_t < 1:
            raise ConfigError("LI schedule needs delta_t >= 1")
        if self.mode == "LT" and (self.beta < 1 or self.lambda1 < 0):
            raise ConfigError("LT schedule needs beta >= 1 and lambda1 >= 0")


@dataclass
class TrainConfig:
    task: str = "classification"
    quantizer: str = "psq-lt"
    levels: int = 4
    epochs_fp: int = 20
    epochs_qat: int = 20
    batch_size: int = 32
    lr: float = 1e-3
    lr_qat: float | None = None
    seed: int = 0
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    num_layers: int = 7
    layer_size: int = 64
    fov_size: int = 64
    detector_size: int = 64
    wavelength: float = 632.8e-9
    neuron_size: float = 0.5
    z_in: float = 5.3
    z: float = 5.3
    z_out: float = 9.3
    pad: int = 1
    init: str = "uniform"
    c_frac: float = 0.2
    gs_temp0: float = 50.0
    gs_temp_decay: float = 0.5
    gs_temp_min: float = 0.5
    eval_batch_size: int = 100

    def __post_init__(self):
        if isinstance(self.schedule, dict):
            self.schedule = ScheduleConfig(**self.schedule)
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.quantizer not in QUANTIZERS:
            raise ConfigError(f"quantizer must be one of {QUANTIZERS}, got {self.quantizer!r}")
        if self.epochs_fp < 0 or self.epochs_qat < 0:
            raise ConfigError("epoch counts must be non-negative")
        if self.levels < 2:
            raise ConfigError("levels must be >= 2")
        if self.batch_size < 1 or not self.lr > 0:
            raise ConfigError("batch_size must be >= 1 and lr positive")
        if self.lr_qat is not None and not self.lr_qat > 0:
            raise ConfigError("lr_qat must be positive when set")
        if self.task == "qpi" and self.detector_size != self.fov_size:
            raise ConfigError("qpi needs detector_size == fov_size")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        for key in d:
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
        d = dict(d)
        if isinstance(d.get("schedule"), dict):
            sched_known = {f.name for f in dataclasses.fields(ScheduleConfig)}
            for key in d["schedule"]:
                if key not in sched_known:
                    raise ConfigError(f"unknown config key 'schedule.{key}'")
            d["schedule"] = ScheduleConfig(**d["schedule"])
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def geometry(self) -> GeometrySpec:
        return GeometrySpec(
            num_layers=self.num_layers,
            layer_shape=(self.layer_size, self.layer_size),
            fov_shape=(self.fov_size, self.fov_size),
            detector_shape=(self.detector_size, self.detector_size),
            wavelength=self.wavelength, neuron_size=self.neuron_size,
            z_in=self.z_in, z=self.z, z_out=self.z_out, pad=self.pad)

    @property
    def schedule_mode(self) -> str | None:
        """Temperature schedule actually in force for the QAT quantizer."""
        if self.quantizer.startswith("psq-"):
            return self.quantizer[4:].upper()
        return None


class AdamState:
    """Adam moments for a dict of named parameter arrays."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def to_arrays(self) -> dict[str, np.ndarray]:
        out = {"__step": np.array(self.step),
               "__hyper": np.array([self.lr, self.beta1, self.beta2, self.eps])}
        for name in self.m:
            out[f"m:{name}"] = self.m[name]
            out[f"v:{name}"] = self.v[name]
        return out

    @classmethod
    def from_arrays(cls, arrays) -> "AdamState":
        lr, b1, b2, eps = (float(x) for x in arrays["__hyper"])
        state = cls(lr, b1, b2, eps)
        state.step = int(arrays["__step"])
        for key in arrays:
            if key.startswith("m:"):
                state.m[key[2:]] = np.array(arrays[key])
                state.v[key[2:]] = np.array(arrays["v:" + key[2:]])
        return state


def adam_step(state: AdamState, params: dict, grads: dict) -> dict:
    """Bias-corrected Adam update; returns new parameter arrays."""
    state.step += 1
    t = state.step
    out = {}
    for name, p in params.items():
        p = np.asarray(p, dtype=float)
        g = np.asarray(grads[name], dtype=float)
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, expected {p.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m = state.m[name] = state.beta1 * state.m[name] + (1 - state.beta1) * g
        v = state.v[name] = state.beta2 * state.v[name] + (1 - state.beta2) * g * g
        m_hat = m / (1 - state.beta1**t)
        v_hat = v / (1 - state.beta2**t)
        out[name] = p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return out


def linear_temperature(t: int, cfg: ScheduleConfig) -> float:
    """Staircase rising by ``delta_tau`` every ``delta_t`` epochs.

    With ``cfg.literal`` the formula ``tau0 + floor(delta_tau / delta_t) * t``
    is used instead.
    """
    if cfg.literal:
        return cfg.tau0 + math.floor(cfg.delta_tau / cfg.delta_t) * t
    return cfg.tau0 + cfg.delta_tau * (t // cfg.delta_t)


def gs_temperature(t: int, cfg: TrainConfig) -> float:
    return max(cfg.gs_temp0 - cfg.gs_temp_decay * t, cfg.gs_temp_min)


def wrap_phase(phi):
    out = np.mod(phi, 2 * np.pi)
    # mod can round up to exactly 2*pi for tiny negative inputs
    return np.where(out >= 2 * np.pi, 0.0, out)


def make_quant_spec(levels: int, task: str) -> QuantizerSpec:
    if task == "classification" and levels == 2:
        return QuantizerSpec(0.0, np.pi, 2)
    return QuantizerSpec(0.0, 1.99 * np.pi, levels)


@dataclass
class EpochRecord:
    stage: str
    epoch: int
    train_loss: float
    task_loss: float
    regularizer: float
    val: dict
    taus: list[float]
    s_t: int | None = None
    gs_temp: float | None = None

    @property
    def val_metric(self) -> float:
        return self.val["accuracy"] if "accuracy" in self.val else self.val["ssim"]


@dataclass
class TrainReport:
    task: str
    stage: str
    records: list[EpochRecord] = field(default_factory=list)
    checkpoints: list[D2NNModel] = field(default_factory=list)
    config: dict = field(default_factory=dict)


def _inputs(model: D2NNModel, images: np.ndarray):
    g = model.geometry
    return encode_phase_input(images, g.pitch, g.wavelength)


def predict_intensity(model: D2NNModel, samples: list[PhaseSample], batch_size: int = 100,
                      train_mode: bool = False) -> np.ndarray:
    chunks = []
    for start in range(0, len(samples), batch_size):
        images, _ = stack(samples[start:start + batch_size])
        out, _ = forward(model, _inputs(model, images), train_mode=train_mode)
        chunks.append(detector_intensity(out))
    return np.concatenate(chunks) if chunks else np.zeros((0,) + model.geometry.detector_shape)


def evaluate_hard(model: D2NNModel, samples: list[PhaseSample], task: str,
                  batch_size: int = 100, return_outputs: bool = False) -> dict:
    """Metrics of the deployable model (hard-quantized phases).

    Classification reports ``accuracy``; QPI reports mean ``ssim`` and ``l1``.
    Per-sample values are combined with an exactly rounded sum so results do
    not depend on batch size or sample order.
    """
    if not samples:
        raise ValueError("cannot evaluate on an empty dataset")
    intensity = predict_intensity(model, samples, batch_size)
    if task == "classification":
        layout = obj.patch_layout(model.geometry.detector_shape)
        pred = obj.classify(intensity, layout)
        labels = np.array([s.label for s in samples])
        out = {"accuracy": float(np.count_nonzero(pred == labels)) / len(samples)}
        if return_outputs:
            out["predictions"] = pred
            out["labels"] = labels
    elif task == "qpi":
        targets = np.stack([s.image for s in samples])
        ssims = [obj.ssim(i, t, 1.0) for i, t in zip(intensity, targets)]
        l1s = [float(np.abs(i - t).mean()) for i, t in zip(intensity, targets)]
        out = {"ssim": math.fsum(ssims) / len(ssims), "l1": math.fsum(l1s) / len(l1s)}
        if return_outputs:
            out["intensity"] = intensity
    else:
        raise ValueError(f"unknown task {task!r}")
    return out


def _task_loss(task: str, intensity, images, labels, masks, c_frac: float):
    if task == "classification":
        return obj.classification_loss(masks[labels], intensity)
    return obj.reverse_huber(intensity, obj.qpi_target(np.pi * images), c_frac)


def _check_dataset(model: D2NNModel, cfg: TrainConfig, samples: list[PhaseSample]):
    fov = model.geometry.fov_shape
    for s in samples:
        if s.image.shape != fov:
            raise ValueError(f"sample {s.id} has shape {s.image.shape}, model FoV is {fov}")
        if cfg.task == "classification" and s.label is None:
            raise ValueError(f"sample {s.id} has no label for classification")


def _collect_params(model: D2NNModel) -> dict:
    params = {}
    for n, layer in enumerate(model.layers):
        if layer.mode is QuantizerMode.GUMBEL_SOFTMAX:
            params[f"logits{n}"] = layer.gs_logits
        elif layer.mode is not QuantizerMode.HARD:
            params[f"phi{n}"] = layer.phi
        if layer.learnable_tau:
            params[f"k{n}"] = np.array(layer.temp.k)
    return params


def _apply_params(model: D2NNModel, params: dict) -> None:
    for n, layer in enumerate(model.layers):
        if f"logits{n}" in params:
            layer.gs_logits = params[f"logits{n}"]
        if f"phi{n}" in params:
            layer.phi = params[f"phi{n}"]
        if f"k{n}" in params:
            layer.temp = TemperatureParam(float(params[f"k{n}"]), layer.temp.gamma)
    model.touch()


def _apply_schedule(model: D2NNModel, cfg: TrainConfig, epoch: int):
    mode = cfg.schedule_mode
    s_t = None
    for layer in model.layers:
        if mode == "FT":
            layer.fixed_tau = cfg.schedule.tau0
        elif mode == "LI":
            layer.fixed_tau = linear_temperature(epoch, cfg.schedule)
        if layer.mode is QuantizerMode.GUMBEL_SOFTMAX:
            layer.gs_temp = gs_temperature(epoch, cfg)
    if mode == "LT":
        s_t = obj.regularizer_scale(epoch, cfg.schedule.beta)
    model.touch()
    return s_t


def _run_epochs(model: D2NNModel, cfg: TrainConfig, train: list[PhaseSample],
                val: list[PhaseSample], epochs: int, stage: str, report: TrainReport,
                adam: AdamState | None = None, start_epoch: int = 0, on_epoch=None):
    _check_dataset(model, cfg, train)
    if val:
        _check_dataset(model, cfg, val)
    # QAT reuses the FP step size unless lr_qat is set
    lr = cfg.lr_qat if stage == "qat" and cfg.lr_qat is not None else cfg.lr
    adam = adam or AdamState(lr=lr)
    g = model.geometry
    masks = None
    if cfg.task == "classification":
        layout = obj.patch_layout(g.detector_shape)
        masks = np.stack([layout.mask(c) for c in range(obj.NUM_CLASSES)])
    use_reg = stage == "qat" and cfg.schedule_mode == "LT"
    stage_id = 0 if stage == "fp" else 1
    for epoch in range(start_epoch, epochs):
        s_t = _apply_schedule(model, cfg, epoch) if stage == "qat" else None
        noise = np.random.default_rng([cfg.seed, stage_id, epoch, 1])
        losses, task_losses, regs = [], [], []
        for batch in batches(train, cfg.batch_size, cfg.seed + 7919 * stage_id, epoch):
            images, labels = stack(batch)
            out, tape = forward(model, _inputs(model, images), train_mode=True, rng=noise)
            intensity = detector_intensity(out)
            task_loss, grad_i = _task_loss(cfg.task, intensity, images, labels, masks,
                                           cfg.c_frac)
            grads = backward(model, tape, grad_i)
            reg = 0.0
            grad_map = {}
            for n, layer in enumerate(model.layers):
                grad_map[f"phi{n}"] = grads.phi[n]
                grad_map[f"logits{n}"] = grads.gs_logits[n]
                grad_map[f"k{n}"] = np.array(grads.k[n])
            if use_reg:
                sc = cfg.schedule
                reg, reg_grad = obj.lt_regularizer(model.k_vector, epoch, sc.beta,
                                                   sc.lambda1, sc.lambda2)
                for n in range(len(model.layers)):
                    grad_map[f"k{n}"] = grad_map[f"k{n}"] + reg_grad[n]
            params = _collect_params(model)
            _apply_params(model, adam_step(adam, params, {k: grad_map[k] for k in params}))
            losses.append(task_loss + reg)
            task_losses.append(task_loss)
            regs.append(reg)
        val_metrics = evaluate_hard(model, val, cfg.task, cfg.eval_batch_size) if val else {}
        rec = EpochRecord(
            stage=stage, epoch=epoch + 1, train_loss=float(np.mean(losses)),
            task_loss=float(np.mean(task_losses)), regularizer=float(np.mean(regs)),
            val=val_metrics, taus=model.taus, s_t=s_t,
            gs_temp=model.layers[0].gs_temp
            if model.layers[0].mode is QuantizerMode.GUMBEL_SOFTMAX else None)
        report.records.append(rec)
        report.checkpoints.append(model.copy())
        log.info("%s epoch %d loss %.6g val %s taus %s", stage, epoch + 1, rec.train_loss,
                 val_metrics, [round(t, 4) for t in rec.taus])
        if on_epoch is not None:
            on_epoch(rec, model, adam)
    return model


def _record_initial(model, cfg, val, stage, report):
    val_metrics = evaluate_hard(model, val, cfg.task, cfg.eval_batch_size) if val else {}
    report.records.append(EpochRecord(stage, 0, math.nan, math.nan, 0.0, val_metrics,
                                      model.taus))
    report.checkpoints.append(model.copy())


def initial_model(cfg: TrainConfig) -> D2NNModel:
    rng = np.random.default_rng([cfg.seed, 0])
    return D2NNModel.initialize(cfg.geometry(), rng, cfg.init)


def train_full_precision(cfg: TrainConfig, train: list[PhaseSample],
                         val: list[PhaseSample], model: D2NNModel | None = None,
                         **resume) -> tuple[D2NNModel, TrainReport]:
    """Stage one: train raw phases with no quantizer.

    With zero epochs the initial model is returned as the only checkpoint.
    """
    model = model if model is not None else initial_model(cfg)
    if model.geometry != cfg.geometry():
        raise ValueError("model geometry does not match the configuration")
    for layer in model.layers:
        layer.mode = QuantizerMode.FULL_PRECISION
    report = TrainReport(cfg.task, "fp", config=cfg.to_dict())
    if cfg.epochs_fp == 0:
        _record_initial(model, cfg, val, "fp", report)
        return model, report
    _run_epochs(model, cfg, train, val, cfg.epochs_fp, "fp", report, **resume)
    return model, report


def prepare_qat_model(cfg: TrainConfig, fp_model: D2NNModel,
                      spec: QuantizerSpec | None = None) -> D2NNModel:
    """Copy of the FP model with wrapped phases and the configured quantizer."""
    if fp_model.geometry != cfg.geometry():
        raise ValueError("FP checkpoint geometry does not match the configuration")
    if any(layer.mode is not QuantizerMode.FULL_PRECISION for layer in fp_model.layers):
        raise ValueError("QAT must start from a full-precision checkpoint")
    spec = spec or make_quant_spec(cfg.levels, cfg.task)
    mode = _MODE_FOR[cfg.quantizer]
    sc = cfg.schedule
    layers = []
    for layer in fp_model.layers:
        phi = wrap_phase(layer.phi)
        if mode is QuantizerMode.FULL_PRECISION:
            layers.append(PhaseLayer(phi))
            continue
        temp = TemperatureParam(max(1.0 / sc.tau0 - sc.gamma, 0.0), sc.gamma)
        layers.append(PhaseLayer(phi, mode, spec, temp, gs_temp=cfg.gs_temp0))
    model = D2NNModel(layers, fp_model.geometry)
    _apply_schedule(model, cfg, 0)
    return model


def train_qat(cfg: TrainConfig, fp_model: D2NNModel, train: list[PhaseSample],
              val: list[PhaseSample], model: D2NNModel | None = None,
              **resume) -> tuple[D2NNModel, TrainReport]:
    """Stage two: quantization-aware training starting from wrapped FP phases."""
    model = model if model is not None else prepare_qat_model(cfg, fp_model)
    report = TrainReport(cfg.task, "qat", config=cfg.to_dict())
    if cfg.epochs_qat == 0:
        _record_initial(model, cfg, val, "qat", report)
        return model, report
    _run_epochs(model, cfg, train, val, cfg.epochs_qat, "qat", report, **resume)
    return model, report


def select_best(report: TrainReport, checkpoints: list[D2NNModel] | None = None) -> D2NNModel:
    """Checkpoint with the highest validation metric; the earliest wins ties."""
    checkpoints = report.checkpoints if checkpoints is None else checkpoints
    if not report.records or not checkpoints:
        raise ValueError("report has no checkpoints to select from")
    if len(checkpoints) != len(report.records):
        raise ValueError("report and checkpoint counts differ")
    return checkpoints[best_index(report)]


def best_index(report: TrainReport) -> int:
    return max(range(len(report.records)), key=lambda i: (report.records[i].val_metric, -i))


def hard_phase_maps(model: D2NNModel) -> list[np.ndarray]:
    return [np.array(layer.hard_phase(), dtype=float) for layer in model.layers]


def full_precision_from_phases(geometry: GeometrySpec, phases) -> D2NNModel:
    return D2NNModel([PhaseLayer(np.array(p, dtype=float)) for p in phases], geometry)


def post_quantize(fp_model: D2NNModel, spec: QuantizerSpec) -> D2NNModel:
    """PQ baseline: hard quantization of the wrapped FP phases."""
    layers = [PhaseLayer(wrap_phase(layer.phi), QuantizerMode.HARD, spec)
              for layer in fp_model.layers]
    return D2NNModel(layers, fp_model.geometry)
