"""Desk-scale comparison protocol on an MNIST subset.

One FP model is trained per task, then each requested (method, levels) pair
starts from it: ``pq`` is hard quantization with zero QAT epochs, any other
name is a QAT quantizer. Every model is picked by its best validation epoch
and scored on a held-out test split with hard-quantized phases.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, replace

import numpy as np

from . import data as ds
from . import training as tr

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DeskPreset:
    name: str
    size: int
    layers: int
    n_train: int = 2000
    n_val: int = 500
    n_test: int = 500
    epochs_fp: int = 20
    epochs_qat: int = 20
    lr: float = 0.03
    lr_qat: float | None = None
    seed: int = 0

    def config(self, task: str, **kw) -> tr.TrainConfig:
        base = dict(task=task, num_layers=self.layers, layer_size=self.size,
                    fov_size=self.size, detector_size=self.size, epochs_fp=self.epochs_fp,
                    epochs_qat=self.epochs_qat, lr=self.lr, lr_qat=self.lr_qat,
                    seed=self.seed)
        base.update(kw)
        return tr.TrainConfig(**base)


PRESETS = {
    "desk": DeskPreset("desk", 64, 7),
    "fallback": DeskPreset("fallback", 32, 5, lr=0.1, lr_qat=0.03),
}


def desk_split(samples: list[ds.PhaseSample], preset: DeskPreset):
    """Disjoint train/validation/test subsets from one seeded shuffle."""
    need = preset.n_train + preset.n_val + preset.n_test
    if len(samples) < need:
        raise ValueError(f"need {need} samples, got {len(samples)}")
    fitted = ds.fit_to_fov(samples, (preset.size, preset.size))
    order = np.random.default_rng(preset.seed).permutation(len(fitted))
    a, b = preset.n_train, preset.n_train + preset.n_val
    return tuple([fitted[i] for i in part] for part in (order[:a], order[a:b], order[b:need]))


@dataclass
class ProtocolResult:
    task: str
    preset: DeskPreset
    fp_model: object
    fp_metrics: dict
    metrics: dict
    reports: dict
    seconds: float

    def metric(self, method: str, levels: int | None = None) -> float:
        key = "accuracy" if self.task == "classification" else "ssim"
        if method == "fp":
            return self.fp_metrics[key]
        return self.metrics[(method, levels)][key]


def run_protocol(task: str, samples: list[ds.PhaseSample], runs, preset: DeskPreset,
                 **overrides) -> ProtocolResult:
    """Train FP once, then every ``(method, levels)`` in ``runs`` from that model."""
    start = time.time()
    train, val, test = desk_split(samples, preset)
    cfg = preset.config(task, **overrides)
    _, fp_report = tr.train_full_precision(cfg, train, val)
    fp = tr.select_best(fp_report)
    fp_metrics = tr.evaluate_hard(fp, test, task)
    log.info("%s %s fp test %s", preset.name, task, fp_metrics)
    metrics, reports = {"fp": fp_metrics}, {"fp": fp_report}
    for method, levels in runs:
        if method == "pq":
            qcfg = replace(cfg, quantizer="hard", levels=levels, epochs_qat=0)
        else:
            qcfg = replace(cfg, quantizer=method, levels=levels)
        _, report = tr.train_qat(qcfg, fp, train, val)
        metrics[(method, levels)] = tr.evaluate_hard(tr.select_best(report), test, task)
        reports[(method, levels)] = report
        log.info("%s %s %s Q%d test %s", preset.name, task, method, levels,
                 metrics[(method, levels)])
    return ProtocolResult(task, preset, fp, fp_metrics, metrics, reports, time.time() - start)
