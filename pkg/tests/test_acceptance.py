"""Acceptance suite: one group of tests per criterion.

The desk-scale trainings (criteria 4 to 7) run once per module and are shared.
A per-criterion PASS/FAIL line is printed in the terminal summary.
"""
import csv
import hashlib
import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from diffract_qat import cli
from diffract_qat import data as ds
from diffract_qat import experiments as ex
from diffract_qat import gradcheck as gc
from diffract_qat import objectives as obj
from diffract_qat import quantizers as q
from diffract_qat import training as tr
from diffract_qat.network import save_checkpoint
from diffract_qat.optics import PropagationPlan, propagate_direct_rs, read_field
from diffract_qat.quantizers import QuantizerMode

from test_optics import LAM, band_limited, rel_l2, smooth_field

DATA = Path(__file__).parent / "data"
IMAGES = DATA / "mnist5k-images-idx3-ubyte.gz"
LABELS = DATA / "mnist5k-labels-idx1-ubyte.gz"
PI = math.pi

C1 = pytest.mark.criterion(1, "gradient fidelity")
C2 = pytest.mark.criterion(2, "PSQ converges to hard quantization")
C3 = pytest.mark.criterion(3, "angular spectrum matches direct Rayleigh-Sommerfeld")
C4 = pytest.mark.criterion(4, "desk classification ordering")
C5 = pytest.mark.criterion(5, "desk QPI ordering")
C6 = pytest.mark.criterion(6, "PQ identity")
C7 = pytest.mark.criterion(7, "exported hard phases reproduce evaluation")
C8 = pytest.mark.criterion(8, "LT schedule behaviour")
C9 = pytest.mark.criterion(9, "loss and metric example tables")


@pytest.fixture(scope="module")
def mnist():
    return ds.load_idx(IMAGES, LABELS)


def _protocol(task, samples, preset, runs):
    return ex.run_protocol(task, samples, runs, ex.PRESETS[preset])


@pytest.fixture(scope="module")
def desk_cls(mnist):
    return _protocol("classification", mnist, "desk", [("pq", 2), ("psq-lt", 2), ("pq", 8)])


@pytest.fixture(scope="module")
def fallback_cls(mnist):
    return _protocol("classification", mnist, "fallback", [("pq", 2), ("psq-lt", 2), ("pq", 8)])


QPI_RUNS = [("pq", 4), ("psq-lt", 4), ("pq", 16), ("psq-lt", 16)]


@pytest.fixture(scope="module")
def desk_qpi(mnist):
    return _protocol("qpi", mnist, "desk", QPI_RUNS)


@pytest.fixture(scope="module")
def fallback_qpi(mnist):
    return _protocol("qpi", mnist, "fallback", QPI_RUNS)


# 1 -----------------------------------------------------------------------------

@C1
def test_gradient_fidelity(note):
    start = time.time()
    results = gc.run("default")
    elapsed = time.time() - start
    by_name = {r.name: r for r in results}
    assert by_name["network d/dphi"].tolerance == 1e-4
    assert by_name["network d/dk"].tolerance == 1e-4
    for r in results:
        if not r.name.startswith("network"):
            assert r.tolerance == 1e-5
        assert r.passed, f"{r.name}: {r.max_rel:.3e} at {r.worst}"
    note(f"phi {by_name['network d/dphi'].max_rel:.1e}, k {by_name['network d/dk'].max_rel:.1e}, "
         f"quantizer max {max(r.max_rel for r in results[2:]):.1e}, {elapsed:.1f}s")
    assert elapsed < 60


@C1
def test_gradient_fidelity_geometry():
    model, _, _ = gc.build_network(QuantizerMode.PSQ)
    assert len(model.layers) == 2 and model.geometry.layer_shape == (8, 8)
    assert model.taus == pytest.approx([4.0, 4.0])
    assert model.layers[0].spec.levels == 4


# 2 -----------------------------------------------------------------------------

@C2
@pytest.mark.parametrize("levels", [2, 4, 8, 16])
def test_psq_converges_to_hard(levels, note):
    spec = q.QuantizerSpec(0.0, 1.99 * PI, levels)
    x = np.linspace(spec.lower, spec.upper, 10_000)
    band = spec.step / 20
    keep = np.min(np.abs(x[:, None] - spec.midpoints()[None, :]), axis=1) > band
    hard = q.hard_quantize(x[keep], spec)
    dists = [float(np.abs(q.psq_eval(x[keep], tau, spec) - hard).max())
             for tau in (1, 5, 20, 100, 1e4)]
    note(f"N={levels}: {dists[-1] / spec.step:.1e} step")
    assert dists[-1] <= 1e-3 * spec.step
    assert all(b <= a for a, b in zip(dists, dists[1:])), dists


# 3 -----------------------------------------------------------------------------

@C3
@pytest.mark.parametrize("z_wl", [2.0, 5.3, 9.3])
def test_propagation_oracle(z_wl, note):
    start = time.time()
    errs = []
    for pitch, n in ((0.5 * LAM, 16), (0.25 * LAM, 32)):
        f = smooth_field(pitch, n)
        a = PropagationPlan((n, n), pitch, LAM, z_wl * LAM, pad=2).forward(f).values
        errs.append(rel_l2(a, propagate_direct_rs(f, z_wl * LAM).values))
    note(f"z={z_wl}λ: {errs[0]:.1e} -> {errs[1]:.1e}")
    assert errs[0] <= 0.05
    assert errs[1] < errs[0]
    assert time.time() - start < 60


@C3
def test_band_limited_power_conservation(note):
    pitch = 0.5 * LAM
    f = band_limited((32, 32), 0.9 / LAM, seed=2, pitch=pitch)
    worst = 0.0
    for z_wl in (2.0, 5.3, 9.3):
        out = PropagationPlan((32, 32), pitch, LAM, z_wl * LAM).forward(f)
        worst = max(worst, abs(out.power() - f.power()) / f.power())
    note(f"power drift {worst:.1e}")
    assert worst <= 1e-6


# 4 -----------------------------------------------------------------------------

def _check_classification(result, note, budget):
    fp = result.metric("fp")
    pq2, lt2, pq8 = (result.metric("pq", 2), result.metric("psq-lt", 2), result.metric("pq", 8))
    note(f"{result.preset.name}: FP {fp:.3f}, PQ Q2 {pq2:.3f}, PSQ-LT Q2 {lt2:.3f}, "
         f"PQ Q8 {pq8:.3f}, {result.seconds / 60:.1f} min")
    assert lt2 - pq2 >= 0.20
    assert abs(pq8 - fp) <= 0.05
    assert result.seconds <= budget


@C4
def test_desk_classification(desk_cls, note):
    p = desk_cls.preset
    assert (p.size, p.layers, p.n_train, p.n_test, p.epochs_fp, p.epochs_qat) == \
        (64, 7, 2000, 500, 20, 20)
    _check_classification(desk_cls, note, 3 * 3600)


@C4
def test_fallback_classification(fallback_cls, note):
    assert (fallback_cls.preset.size, fallback_cls.preset.layers) == (32, 5)
    _check_classification(fallback_cls, note, 30 * 60)


# 5 -----------------------------------------------------------------------------

def _check_qpi(result, note):
    pq4, lt4 = result.metric("pq", 4), result.metric("psq-lt", 4)
    pq16, lt16 = result.metric("pq", 16), result.metric("psq-lt", 16)
    note(f"{result.preset.name}: FP {result.metric('fp'):.4f}, Q4 PQ {pq4:.4f} / PSQ-LT {lt4:.4f}, "
         f"Q16 PQ {pq16:.4f} / PSQ-LT {lt16:.4f}")
    assert lt4 > pq4
    assert lt16 >= pq16


@C5
def test_desk_qpi(desk_qpi, note):
    _check_qpi(desk_qpi, note)


@C5
def test_fallback_qpi(fallback_qpi, note):
    _check_qpi(fallback_qpi, note)


# 6 -----------------------------------------------------------------------------

@C6
@pytest.mark.parametrize("levels", [2, 8])
def test_pq_identity(desk_cls, mnist, levels):
    train, val, test = ex.desk_split(mnist, desk_cls.preset)
    cfg = desk_cls.preset.config("classification", quantizer="hard", levels=levels, epochs_qat=0)
    qat_model, report = tr.train_qat(cfg, desk_cls.fp_model, train, val)

    spec = tr.make_quant_spec(levels, "classification")
    manual = [q.hard_quantize(tr.wrap_phase(layer.phi), spec) for layer in desk_cls.fp_model.layers]
    manual_model = tr.full_precision_from_phases(desk_cls.fp_model.geometry, manual)
    for a, b in zip(tr.hard_phase_maps(qat_model), manual):
        np.testing.assert_array_equal(a, b)
    assert report.records[0].val == tr.evaluate_hard(manual_model, val, "classification")
    assert tr.evaluate_hard(tr.select_best(report), test, "classification") == \
        tr.evaluate_hard(manual_model, test, "classification")


# 7 -----------------------------------------------------------------------------

@C7
@pytest.mark.parametrize("which", ["classification", "qpi"])
def test_export_reimport(which, desk_cls, desk_qpi, mnist, tmp_path):
    result = desk_cls if which == "classification" else desk_qpi
    key = ("psq-lt", 2) if which == "classification" else ("psq-lt", 4)
    model = tr.select_best(result.reports[key])
    _, _, test = ex.desk_split(mnist, result.preset)
    ckpt = tmp_path / "model.d2nn"
    save_checkpoint(model, ckpt)
    assert cli.main(["export", str(ckpt), "phase-maps", "--out", str(tmp_path / "maps")]) == 0
    phases = [read_field(tmp_path / "maps" / f"layer{n}_hard.cfld").values.real
              for n in range(len(model.layers))]
    rebuilt = tr.full_precision_from_phases(model.geometry, phases)
    assert tr.evaluate_hard(rebuilt, test, which) == tr.evaluate_hard(model, test, which)


# 8 -----------------------------------------------------------------------------

@C8
def test_lt_schedule_trace(tmp_path, note):
    # defaults throughout: only the data source and the split are given
    config = {"data": {"images": str(IMAGES), "labels": str(LABELS), "limit": 2500,
                       "split": {"train": 0.8, "validation": 0.2, "test": 0.0}}}
    path = tmp_path / "lt.json"
    path.write_text(json.dumps(config))
    run = tmp_path / "lt"
    assert cli.main(["train", str(run), "--config", str(path), "--quantizer", "psq-lt"]) == 0
    manifest = json.loads((run / "manifest.json").read_text())
    cfg = tr.TrainConfig.from_dict(manifest["config"])
    defaults = tr.TrainConfig()
    assert cfg.schedule == defaults.schedule and cfg.lr == defaults.lr
    assert cfg.epochs_qat == 20

    with open(run / "schedule.csv", newline="") as fh:
        rows = [r for r in csv.DictReader(fh) if r["stage"] == "qat"]
    assert [int(r["epoch"]) for r in rows] == list(range(1, 21))
    beta = cfg.schedule.beta
    s_t = [int(r["s_t"]) for r in rows]
    assert s_t == [2 ** ((e - 1) // beta) for e in range(1, 21)]
    for e in range(beta, 20, beta):
        assert s_t[e] == 2 * s_t[e - 1]
    taus = np.array([[float(r[f"tau{n}"]) for n in range(cfg.num_layers)] for r in rows])
    start = np.full(cfg.num_layers, cfg.schedule.tau0)
    steps = np.diff(np.vstack([start, taus]), axis=0)
    note(f"tau {taus[0].min():.3f}..{taus[-1].max():.3f}, min step {steps.min():.2e}, "
         f"s_t {s_t[0]}->{s_t[-1]}")
    assert (steps >= 0).all(), f"tau decreased at epochs {np.nonzero((steps < 0).any(axis=1))[0] + 1}"


# 9 -----------------------------------------------------------------------------

@C9
def test_classification_loss_table():
    shape = (64, 64)
    n = shape[0] * shape[1]
    label = obj.build_label_map(7, shape)
    assert obj.classification_loss(label, label.grid)[0] == 0.0
    on_patch = label.grid.copy()
    r, c, _ = label.layout.patches[7]
    on_patch[r, c] = 0.0
    assert obj.classification_loss(label, on_patch)[0] == pytest.approx((10 / 11) / n, rel=1e-12)
    off_patch = label.grid.copy()
    off_patch[0, 0] = 1.0
    assert obj.classification_loss(label, off_patch)[0] == pytest.approx(1 / n, rel=1e-12)


@C9
def test_label_layout_table():
    layout = obj.patch_layout((64, 64))
    masks = [layout.mask(c) for c in range(10)]
    assert all((masks[a] * masks[b]).sum() == 0 for a in range(10) for b in range(a + 1, 10))
    side = layout.patches[0][2]
    assert all(m.sum() == side * side for m in masks)
    digest = hashlib.sha256(np.stack(masks).astype(np.uint8).tobytes()).hexdigest()
    assert digest == "e24d62f86de211508960c3118c4b2d4beda4e847f6ad2fe50e64912f15fef03f"


@C9
def test_classify_table():
    layout = obj.patch_layout((64, 64))
    grid = obj.build_label_map(7, (64, 64)).grid
    assert obj.classify(grid, layout) == 7
    assert obj.classify(np.ones((64, 64)), layout) == 0
    assert obj.classify(grid + 3.25, layout) == 7


@C9
def test_berhu_table():
    assert obj.reverse_huber(np.ones((4, 4)), np.ones((4, 4)))[0] == 0.0
    # max |e| = 1 so c = 0.2: |e| = c stays on the L1 branch, |e| = 2c gives 2.5c
    at_max = (1.0 + 0.04) / 0.4
    for e, want in ((0.2, 0.2), (0.4, 0.5)):
        loss, _ = obj.reverse_huber(np.array([1.0, e]), np.zeros(2))
        assert 2 * loss - at_max == pytest.approx(want, rel=1e-12)


@C9
def test_qpi_target_table():
    np.testing.assert_array_equal(obj.qpi_target(np.array([0.0, PI, PI / 2])), [0.0, 1.0, 0.5])


@C9
def test_regularizer_table():
    assert [obj.regularizer_scale(t, 5) for t in (0, 5, 15)] == [1, 2, 8]
    value, _ = obj.lt_regularizer(np.zeros(7), 12, 5, 1e-4, 0.1)
    assert value == pytest.approx(-1e-4 * 4 * 0.01, rel=1e-14)
    k = np.array([0.3, -0.8, 1.1])
    _, grad = obj.lt_regularizer(k, 7, 5, 0.5, 0.05)
    h = 1e-5
    for i in range(3):
        step = np.zeros(3)
        step[i] = h
        fd = (obj.lt_regularizer(k + step, 7, 5, 0.5, 0.05)[0]
              - obj.lt_regularizer(k - step, 7, 5, 0.5, 0.05)[0]) / (2 * h)
        assert abs(grad[i] - fd) <= 1e-8 * abs(fd)


@C9
def test_ssim_table():
    y, x = np.mgrid[0:32, 0:32] / 31.0
    a = 0.5 + 0.4 * np.sin(2 * PI * x) * np.cos(PI * y)
    b = np.clip(a + 0.1 * np.cos(5 * x + 3 * y) - 0.05, 0, 1)
    assert obj.ssim(a, a) == 1.0
    assert obj.ssim(a * 0.5, a * 0.5 + 0.5) < 1.0
    # reference: scikit-image structural_similarity, Gaussian sigma 1.5, population covariance
    assert obj.ssim(a, b) == pytest.approx(0.8980560497783467, abs=1e-12)


@C9
def test_phase_error_curve_table():
    phase = np.linspace(0, PI, 101)
    assert all(m <= 1e-15 for _, m in obj.phase_error_curve(phase / PI, phase, bins=10))
    edges = np.linspace(0, PI, 11)
    curve = obj.phase_error_curve(np.zeros_like(phase), phase, 10)
    assert len(curve) == 10
    for b, (center, m) in enumerate(curve):
        lo, hi = edges[b], edges[b + 1]
        inside = phase[(phase >= lo) & ((phase < hi) | (b == 9))]
        assert center == pytest.approx((lo + hi) / 2, rel=1e-15)
        assert m == pytest.approx(inside.mean(), rel=1e-14)
    # brute-force oracle on a fixed synthetic pair
    rng = np.random.default_rng(8)
    phase = rng.uniform(0, PI, (16, 16))
    pred = np.clip(phase / PI + rng.normal(0, 0.05, phase.shape), 0, 1)
    width = PI / 8
    want = []
    for b in range(8):
        sel = [(p, i) for p, i in zip(phase.ravel(), pred.ravel())
               if b * width <= p < (b + 1) * width]
        want.append(math.fsum(abs(PI * i - p) for p, i in sel) / len(sel))
    got = [m for _, m in obj.phase_error_curve(pred, phase, bins=8)]
    assert got == pytest.approx(want, rel=1e-12)
