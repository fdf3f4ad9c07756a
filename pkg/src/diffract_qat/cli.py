"""Command-line front end: train, eval, compare, export and gradcheck.

Exit codes: 0 success, 1 runtime failure (for example an unwritable output),
2 invalid configuration or arguments.

Run directory layout::

    <run>/manifest.json       resolved config, seed, versions, data digests
    <run>/checkpoints/        per-epoch checkpoints, best_fp.d2nn, best.d2nn
    <run>/metrics.csv         per-epoch train/val rows and the final test row
    <run>/schedule.csv        s_t, GS temperature and per-layer tau per epoch
    <run>/result.json         written last; marks the run as complete
    <run>/exports/
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import data as ds
from . import gradcheck as gc
from . import objectives as obj
from . import training as tr
from .network import (
    D2NNModel,
    detector_intensity,
    encode_phase_input,
    forward,
    load_checkpoint,
    save_checkpoint,
    sidecar_path,
)
from .optics import ComplexField, write_field
from .quantizers import QuantizerMode

log = logging.getLogger("diffract_qat")

METRIC_COLUMNS = ("stage", "epoch", "split", "loss", "task_loss", "regularizer",
                  "accuracy", "ssim", "l1")
COMPARE_COLUMNS = ("run", "task", "method", "levels", "seed", "epochs_fp", "epochs_qat",
                   "best_epoch", "test_accuracy", "test_ssim", "test_l1",
                   "val_accuracy", "val_ssim", "val_l1")
DATA_KEYS = {"images", "labels", "image_dir", "resize", "limit", "split"}
SPLIT_KEYS = {"train", "validation", "test", "seed"}


class UsageError(Exception):
    pass


def fmt(value) -> str:
    """CSV cell: 17 significant digits for floats, empty for missing values."""
    if value is None:
        return ""
    if isinstance(value, float):
        return "" if math.isnan(value) else f"{value:.17g}"
    return str(value)


def write_csv(path: Path, header, rows) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])
    os.replace(tmp, path)


def write_json(path: Path, payload) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, path)


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def version_tag() -> str:
    return __version__


# data -----------------------------------------------------------------------

def _check_data_spec(spec: dict) -> dict:
    for key in spec:
        if key not in DATA_KEYS:
            raise tr.ConfigError(f"unknown config key 'data.{key}'")
    for key in spec.get("split", {}):
        if key not in SPLIT_KEYS:
            raise tr.ConfigError(f"unknown config key 'data.split.{key}'")
    if bool(spec.get("image_dir")) == bool(spec.get("images")):
        raise tr.ConfigError("data needs exactly one of 'images' (with 'labels') or 'image_dir'")
    if spec.get("images") and not spec.get("labels"):
        raise tr.ConfigError("data.images needs data.labels")
    return spec


def load_samples(spec: dict, fov: tuple[int, int]):
    """Samples fitted to the FoV plus digests of the source files."""
    resize = tuple(spec["resize"]) if spec.get("resize") else None
    if spec.get("image_dir"):
        samples = ds.load_image_dir(spec["image_dir"], resize)
        files = {p.name: file_digest(p) for p in sorted(Path(spec["image_dir"]).glob("*.pgm"))}
    else:
        samples = ds.load_idx(spec["images"], spec["labels"])
        if resize:
            samples = [ds.PhaseSample(ds.resize_nearest(s.image, resize), s.label, s.id)
                       for s in samples]
        files = {"images": file_digest(spec["images"]), "labels": file_digest(spec["labels"])}
    if spec.get("limit"):
        order = np.random.default_rng(spec.get("split", {}).get("seed", 0)).permutation(
            len(samples))[: int(spec["limit"])]
        samples = [samples[i] for i in sorted(order)]
    for s in samples:
        if s.image.shape[0] > fov[0] or s.image.shape[1] > fov[1]:
            raise UsageError(f"sample {s.id} of shape {s.image.shape} does not fit the "
                             f"{fov[0]}x{fov[1]} field of view")
    return ds.fit_to_fov(samples, fov), files


def _split(samples, spec: dict):
    return ds.split(samples, ds.SplitSpec(**spec.get("split", {})))


# train ----------------------------------------------------------------------

def _read_config(args) -> tuple[tr.TrainConfig, dict]:
    raw = {}
    if args.config:
        try:
            raw = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise tr.ConfigError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(raw, dict):
            raise tr.ConfigError("config must be a JSON object")
    data_spec = dict(raw.pop("data", {}))
    if args.images:
        data_spec.update(images=args.images, labels=args.labels)
        data_spec.pop("image_dir", None)
    if args.image_dir:
        data_spec.update(image_dir=args.image_dir)
        data_spec.pop("images", None)
        data_spec.pop("labels", None)
    overrides = {"seed": args.seed, "task": args.task, "quantizer": args.quantizer,
                 "levels": args.levels, "epochs_fp": args.epochs_fp,
                 "epochs_qat": args.epochs_qat}
    raw.update({k: v for k, v in overrides.items() if v is not None})
    if args.schedule_literal:
        raw.setdefault("schedule", {})["literal"] = True
    cfg = tr.TrainConfig.from_dict(raw)
    return cfg, _check_data_spec(data_spec)


def _record_dict(rec: tr.EpochRecord) -> dict:
    return {"stage": rec.stage, "epoch": rec.epoch, "train_loss": rec.train_loss,
            "task_loss": rec.task_loss, "regularizer": rec.regularizer, "val": rec.val,
            "taus": rec.taus, "s_t": rec.s_t, "gs_temp": rec.gs_temp}


def _record_from(d: dict) -> tr.EpochRecord:
    return tr.EpochRecord(d["stage"], d["epoch"], d["train_loss"], d["task_loss"],
                          d["regularizer"], d["val"], d["taus"], d["s_t"], d["gs_temp"])


class RunWriter:
    """Incremental writer for one run directory."""

    def __init__(self, root: Path):
        self.root = root
        self.ckpt = root / "checkpoints"
        self.records: dict[str, list[tr.EpochRecord]] = {"fp": [], "qat": []}
        self.test_row = None

    def ckpt_path(self, stage: str, epoch: int) -> Path:
        return self.ckpt / f"{stage}_epoch{epoch:03d}.d2nn"

    def save_epoch(self, rec: tr.EpochRecord, model: D2NNModel, adam: tr.AdamState | None):
        save_checkpoint(model, self.ckpt_path(rec.stage, rec.epoch), _record_dict(rec))
        if adam is not None:
            tmp = self.ckpt / f"{rec.stage}_adam.tmp.npz"
            np.savez(tmp, __epoch=np.array(rec.epoch), **adam.to_arrays())
            os.replace(tmp, self.ckpt / f"{rec.stage}_adam.npz")
        self.records[rec.stage].append(rec)
        self.flush()

    def restore(self, stage: str):
        """Completed epochs of a stage that can be resumed exactly."""
        adam_path = self.ckpt / f"{stage}_adam.npz"
        last = 0
        adam = None
        if adam_path.exists():
            with np.load(adam_path) as arrays:
                last = int(arrays["__epoch"])
                adam = tr.AdamState.from_arrays({k: arrays[k] for k in arrays.files})
        records, models = [], []
        for epoch in range(1, last + 1):
            path = self.ckpt_path(stage, epoch)
            if not path.exists():
                return [], [], None, 0
            records.append(_record_from(json.loads(sidecar_path(path).read_text())))
            models.append(load_checkpoint(path))
        self.records[stage] = list(records)
        return records, models, adam, last

    def flush(self):
        rows = []
        for stage in ("fp", "qat"):
            for r in self.records[stage]:
                rows.append((stage, r.epoch, "train", r.train_loss, r.task_loss, r.regularizer,
                             None, None, None))
                rows.append((stage, r.epoch, "validation", None, None, None,
                             r.val.get("accuracy"), r.val.get("ssim"), r.val.get("l1")))
        if self.test_row:
            rows.append(self.test_row)
        write_csv(self.root / "metrics.csv", METRIC_COLUMNS, rows)
        trace = []
        width = 0
        for stage in ("fp", "qat"):
            for r in self.records[stage]:
                width = max(width, len(r.taus))
                trace.append((stage, r.epoch, r.s_t, r.gs_temp, *r.taus))
        write_csv(self.root / "schedule.csv",
                  ("stage", "epoch", "s_t", "gs_temp", *[f"tau{n}" for n in range(width)]), trace)


def _run_stage(writer: RunWriter, stage: str, cfg, train, val, start_model, resume: bool):
    """Run one stage with per-epoch checkpoints; returns the selected model and its epoch."""
    epochs = cfg.epochs_fp if stage == "fp" else cfg.epochs_qat
    prior_records, prior_models, adam, done = ([], [], None, 0)
    if resume:
        prior_records, prior_models, adam, done = writer.restore(stage)
    if epochs == 0:
        fn = tr.train_full_precision if stage == "fp" else tr.train_qat
        args = (cfg, train, val) if stage == "fp" else (cfg, start_model, train, val)
        model, report = fn(*args)
        writer.save_epoch(report.records[0], model, None)
        return model, 0
    report = tr.TrainReport(cfg.task, stage, list(prior_records), list(prior_models),
                            cfg.to_dict())
    if done < epochs:
        kwargs = {"on_epoch": writer.save_epoch}
        if done:
            kwargs.update(model=prior_models[-1].copy(), adam=adam, start_epoch=done)
        if stage == "fp":
            _, new = tr.train_full_precision(cfg, train, val, **kwargs)
        else:
            _, new = tr.train_qat(cfg, start_model, train, val, **kwargs)
        report.records += new.records
        report.checkpoints += new.checkpoints
    best = tr.best_index(report)
    return report.checkpoints[best], report.records[best].epoch


def cmd_train(args) -> int:
    root = Path(args.run_dir)
    if args.resume:
        manifest_path = root / "manifest.json"
        if not manifest_path.exists():
            raise UsageError(f"{root} has no manifest to resume from")
        if any(getattr(args, k) is not None for k in ("config", "seed", "task", "quantizer",
                                                      "levels", "epochs_fp", "epochs_qat",
                                                      "images", "image_dir")):
            raise UsageError("--resume uses the stored configuration; drop other options")
        manifest = json.loads(manifest_path.read_text())
        cfg = tr.TrainConfig.from_dict(manifest["config"])
        data_spec = _check_data_spec(manifest["data"])
    else:
        cfg, data_spec = _read_config(args)
        if root.exists() and any(root.iterdir()):
            raise UsageError(f"run directory {root} is not empty (use --resume to continue)")

    samples, files = load_samples(data_spec, cfg.geometry().fov_shape)
    train, val, test = _split(samples, data_spec)
    digests = {"files": files, "train": ds.digest(train), "validation": ds.digest(val),
               "test": ds.digest(test)}
    if args.resume:
        if manifest["data_digests"] != digests:
            raise UsageError("input data changed since the run started")
    else:
        (root / "checkpoints").mkdir(parents=True)
        (root / "exports").mkdir()
        manifest = {
            "config": cfg.to_dict(), "data": data_spec, "seed": cfg.seed,
            "version": version_tag(), "data_digests": digests,
            "split_sizes": {"train": len(train), "validation": len(val), "test": len(test)},
            "outputs": {"checkpoints": "checkpoints", "metrics": "metrics.csv",
                        "schedule": "schedule.csv", "result": "result.json",
                        "exports": "exports"},
        }
        write_json(root / "manifest.json", manifest)

    writer = RunWriter(root)
    fp_model, fp_epoch = _run_stage(writer, "fp", cfg, train, val, None, args.resume)
    save_checkpoint(fp_model, root / "checkpoints" / "best_fp.d2nn", {"epoch": fp_epoch})
    if cfg.quantizer == "fp":
        best, best_epoch, stage = fp_model, fp_epoch, "fp"
    else:
        best, best_epoch = _run_stage(writer, "qat", cfg, train, val, fp_model, args.resume)
        stage = "qat"
    save_checkpoint(best, root / "checkpoints" / "best.d2nn", {"stage": stage,
                                                               "epoch": best_epoch})
    rec = next(r for r in writer.records[stage] if r.epoch == best_epoch)
    result = {"stage": stage, "best_epoch": best_epoch, "validation": rec.val}
    if test:
        test_metrics = tr.evaluate_hard(best, test, cfg.task, cfg.eval_batch_size)
        result["test"] = test_metrics
        writer.test_row = (stage, best_epoch, "test", None, None, None,
                           test_metrics.get("accuracy"), test_metrics.get("ssim"),
                           test_metrics.get("l1"))
    writer.flush()
    write_json(root / "result.json", result)
    print(json.dumps(result, sort_keys=True))
    return 0


# eval -----------------------------------------------------------------------

def cmd_eval(args) -> int:
    model = load_checkpoint(args.checkpoint)
    spec = {"images": args.images, "labels": args.labels} if args.images else \
        {"image_dir": args.image_dir}
    _check_data_spec(spec)
    samples, _ = load_samples(spec, model.geometry.fov_shape)
    if args.task == "classification" and any(s.label is None for s in samples):
        raise UsageError("classification evaluation needs labelled samples")
    metrics = tr.evaluate_hard(model, samples, args.task, return_outputs=True)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        if args.task == "classification":
            write_csv(out / "eval_metrics.csv", ("task", "samples", "accuracy"),
                      [(args.task, len(samples), metrics["accuracy"])])
            conf = np.zeros((obj.NUM_CLASSES, obj.NUM_CLASSES), dtype=int)
            np.add.at(conf, (metrics["labels"], metrics["predictions"]), 1)
            write_csv(out / "confusion_matrix.csv",
                      ("true", *[f"pred{c}" for c in range(obj.NUM_CLASSES)]),
                      [(c, *conf[c]) for c in range(obj.NUM_CLASSES)])
            summary = {"accuracy": metrics["accuracy"]}
        else:
            write_csv(out / "eval_metrics.csv", ("task", "samples", "ssim", "l1"),
                      [(args.task, len(samples), metrics["ssim"], metrics["l1"])])
            phase = np.pi * np.stack([s.image for s in samples])
            curve = obj.phase_error_curve(metrics["intensity"], phase, bins=args.bins)
            write_csv(out / "phase_error_curve.csv", ("phase_center", "mean_abs_error"), curve)
            summary = {"ssim": metrics["ssim"], "l1": metrics["l1"]}
    except OSError as exc:
        print(f"error: cannot write metrics to {out}: {exc}", file=sys.stderr)
        return 1
    print(json.dumps(summary, sort_keys=True))
    return 0


# compare --------------------------------------------------------------------

def _method(config: dict) -> str:
    if config["quantizer"] == "hard" and config["epochs_qat"] == 0:
        return "pq"
    return config["quantizer"]


def cmd_compare(args) -> int:
    rows = []
    for run in args.run_dirs:
        run = Path(run)
        try:
            manifest = json.loads((run / "manifest.json").read_text())
            result = json.loads((run / "result.json").read_text())
        except (OSError, json.JSONDecodeError):
            log.warning("skipping incomplete run %s", run)
            continue
        cfg = manifest["config"]
        test, val = result.get("test", {}), result.get("validation", {})
        rows.append((run.name, cfg["task"], _method(cfg),
                     None if cfg["quantizer"] == "fp" else cfg["levels"], cfg["seed"],
                     cfg["epochs_fp"], cfg["epochs_qat"], result["best_epoch"],
                     test.get("accuracy"), test.get("ssim"), test.get("l1"),
                     val.get("accuracy"), val.get("ssim"), val.get("l1")))
    if len(rows) < 2:
        log.warning("fewer than two completed runs to compare")
    try:
        if args.out:
            write_csv(Path(args.out), COMPARE_COLUMNS, rows)
        else:
            w = csv.writer(sys.stdout, lineterminator="\n")
            w.writerow(COMPARE_COLUMNS)
            for row in rows:
                w.writerow([fmt(v) for v in row])
    except OSError as exc:
        print(f"error: cannot write {args.out}: {exc}", file=sys.stderr)
        return 1
    return 0


# export ---------------------------------------------------------------------

def _phase_field(model: D2NNModel, phase) -> ComplexField:
    g = model.geometry
    return ComplexField(np.asarray(phase, dtype=complex), g.pitch, g.wavelength)


def cmd_export(args) -> int:
    model = load_checkpoint(args.checkpoint)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.what == "phase-maps":
        hist_rows, tau_rows = [], []
        for n, layer in enumerate(model.layers):
            hard = np.asarray(layer.hard_phase(), dtype=float)
            write_field(out / f"layer{n}_raw.cfld", _phase_field(model, layer.phi))
            write_field(out / f"layer{n}_hard.cfld", _phase_field(model, hard))
            counts, edges = np.histogram(tr.wrap_phase(layer.phi), bins=args.bins,
                                         range=(0.0, 2 * np.pi))
            for c, lo, hi in zip(counts, edges[:-1], edges[1:]):
                hist_rows.append((n, "raw", float(lo), float(hi), int(c)))
            values, counts = np.unique(hard, return_counts=True)
            for v, c in zip(values, counts):
                hist_rows.append((n, "hard", float(v), float(v), int(c)))
            tau = layer.tau if layer.mode in (QuantizerMode.PSQ, QuantizerMode.DSQ) else None
            tau_rows.append((n, layer.mode.name.lower(), tau))
        write_csv(out / "histograms.csv", ("layer", "kind", "bin_low", "bin_high", "count"),
                  hist_rows)
        write_csv(out / "taus.csv", ("layer", "mode", "tau"), tau_rows)
    else:
        if not (args.images or args.image_dir):
            raise UsageError("export field needs --images/--labels or --image-dir")
        spec = {"images": args.images, "labels": args.labels} if args.images else \
            {"image_dir": args.image_dir}
        samples, _ = load_samples(_check_data_spec(spec), model.geometry.fov_shape)
        if not 0 <= args.index < len(samples):
            raise UsageError(f"sample index {args.index} out of range (0..{len(samples) - 1})")
        sample = samples[args.index]
        images, _ = ds.stack([sample])
        g = model.geometry
        field, _ = forward(model, encode_phase_input(images[0], g.pitch, g.wavelength))
        write_field(out / "output_field.cfld", field)
        write_csv(out / "output_intensity.csv", [f"c{j}" for j in range(field.width)],
                  [tuple(float(v) for v in row) for row in detector_intensity(field.values)])
    print(f"wrote {args.what} to {out}")
    return 0


# gradcheck ------------------------------------------------------------------

def cmd_gradcheck(args) -> int:
    results = gc.run(args.preset)
    for r in results:
        status = "ok" if r.passed else "FAIL"
        if not r.enforced:
            status = "info"
        print(f"{r.name:28s} max_rel={r.max_rel:.3e} tol={r.tolerance:.0e} "
              f"worst={r.worst} [{status}]")
    failed = [r for r in results if not r.passed]
    if failed:
        worst = max(failed, key=lambda r: r.max_rel)
        print(f"gradient check failed: {worst.name} at {worst.worst} "
              f"(relative error {worst.max_rel:.3e})", file=sys.stderr)
        return 1
    return 0


# entry point ----------------------------------------------------------------

def _add_data_args(p, required=False):
    g = p.add_mutually_exclusive_group(required=required)
    g.add_argument("--images", help="IDX image file (optionally gzipped)")
    g.add_argument("--image-dir", help="directory of binary PGM images")
    p.add_argument("--labels", help="IDX label file matching --images")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="diffract-qat",
                                     description="Quantization-aware training of D2NNs.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run the FP stage and then QAT")
    p.add_argument("run_dir")
    p.add_argument("--config", help="JSON file with TrainConfig keys and a 'data' section")
    p.add_argument("--seed", type=int)
    p.add_argument("--task", choices=tr.TASKS)
    p.add_argument("--quantizer", choices=tr.QUANTIZERS)
    p.add_argument("--levels", type=int)
    p.add_argument("--epochs-fp", type=int)
    p.add_argument("--epochs-qat", type=int)
    p.add_argument("--schedule-literal", action="store_true",
                   help="use tau0 + floor(delta_tau / delta_t) * t for LI")
    p.add_argument("--resume", action="store_true", help="continue an interrupted run")
    _add_data_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="hard-quantized evaluation of a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--task", choices=tr.TASKS, required=True)
    p.add_argument("--out", required=True, help="output directory for CSV files")
    p.add_argument("--bins", type=int, default=16, help="phase error curve bins")
    _add_data_args(p, required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="merge completed runs into one table")
    p.add_argument("run_dirs", nargs="+")
    p.add_argument("--out", help="CSV path (default: stdout)")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("export", help="dump phase maps or an output field")
    p.add_argument("checkpoint")
    p.add_argument("what", choices=("phase-maps", "field"))
    p.add_argument("--out", required=True)
    p.add_argument("--bins", type=int, default=32, help="raw phase histogram bins")
    p.add_argument("--index", type=int, default=0, help="sample index for 'field'")
    _add_data_args(p)
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--preset", choices=gc.PRESETS, default="default")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "images", None) and not args.labels:
        parser.error("--images needs --labels")
    try:
        return args.func(args)
    except (tr.ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ds.DataFormatError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
