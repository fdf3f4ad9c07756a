import numpy as np
import pytest

from diffract_qat import quantizers as q
from diffract_qat.network import (
    D2NNModel,
    PhaseLayer,
    backward,
    detector_intensity,
    encode_phase_input,
    forward,
    load_checkpoint,
    modulate,
    save_checkpoint,
    sidecar_path,
)
from diffract_qat.optics import ComplexField, GeometrySpec, PropagationPlan
from diffract_qat.quantizers import QuantizerMode, QuantizerSpec, TemperatureParam

PI = np.pi
Q4 = QuantizerSpec(0.0, 1.99 * PI, 4)


def small_model(mode=QuantizerMode.PSQ, tau=4.0, seed=0, layers=2, size=8, gamma=0.05):
    rng = np.random.default_rng(seed)
    geometry = GeometrySpec(layers, (size, size), (size, size), (size, size))
    k = 1.0 / tau - gamma
    spec = None if mode is QuantizerMode.FULL_PRECISION else Q4
    stack = [PhaseLayer(rng.uniform(0, 2 * PI, (size, size)), mode, spec,
                        TemperatureParam(k, gamma)) for _ in range(layers)]
    return D2NNModel(stack, geometry)


def random_input(model, seed=1, batch=None):
    rng = np.random.default_rng(seed)
    shape = model.geometry.fov_shape if batch is None else (batch, *model.geometry.fov_shape)
    return encode_phase_input(rng.uniform(0, 1, shape), model.geometry.pitch,
                              model.geometry.wavelength)


def patch_mask(shape):
    mask = np.zeros(shape)
    mask[2:5, 3:6] = 1.0
    return mask


def patch_loss(model, inp, mask):
    out, tape = forward(model, inp, train_mode=True)
    return float((detector_intensity(out) * mask).sum()), tape


def fd_phi(model, inp, mask, n, idx, h=1e-4):
    layer = model.layers[n]
    p = layer.phi[idx]
    layer.phi[idx] = p + h
    up = patch_loss(model, inp, mask)[0]
    layer.phi[idx] = p - h
    down = patch_loss(model, inp, mask)[0]
    layer.phi[idx] = p
    return (up - down) / (2 * h)


def fd_k(model, inp, mask, n, h=1e-4):
    layer = model.layers[n]
    k, gamma = layer.temp.k, layer.temp.gamma
    layer.temp = TemperatureParam(k + h, gamma)
    up = patch_loss(model, inp, mask)[0]
    layer.temp = TemperatureParam(k - h, gamma)
    down = patch_loss(model, inp, mask)[0]
    layer.temp = TemperatureParam(k, gamma)
    return (up - down) / (2 * h)


class TestEncoding:
    def test_zero_image(self):
        f = encode_phase_input(np.zeros((4, 4)), 1.0, 2.0)
        np.testing.assert_array_equal(f.values, np.ones((4, 4)))

    def test_one_maps_to_minus_one(self):
        f = encode_phase_input(np.ones((2, 2)), 1.0, 2.0)
        np.testing.assert_allclose(f.values, -1.0, atol=1e-15)

    def test_unit_modulus(self):
        f = encode_phase_input(np.random.default_rng(0).uniform(0, 1, (16, 16)), 1.0, 2.0)
        np.testing.assert_allclose(np.abs(f.values), 1.0, atol=1e-15)

    @pytest.mark.parametrize("bad", [-0.01, 1.01, np.nan])
    def test_rejects_out_of_range(self, bad):
        img = np.zeros((3, 3))
        img[1, 1] = bad
        with pytest.raises(ValueError):
            encode_phase_input(img, 1.0, 2.0)


class TestModulate:
    def test_zero_phase_identity(self):
        f = ComplexField(np.random.default_rng(0).normal(size=(6, 6)) + 0j, 1.0, 2.0)
        out = modulate(f, PhaseLayer(np.zeros((6, 6))))
        np.testing.assert_array_equal(out.values, f.values)

    def test_phase_only(self):
        rng = np.random.default_rng(2)
        f = ComplexField(rng.normal(size=(8, 8)) + 1j * rng.normal(size=(8, 8)), 1.0, 2.0)
        out = modulate(f, PhaseLayer(rng.uniform(-10, 10, (8, 8))))
        np.testing.assert_allclose(np.abs(out.values), np.abs(f.values), atol=1e-12)

    def test_hard_levels(self):
        rng = np.random.default_rng(3)
        phi = rng.uniform(-1, 8, (8, 8))
        layer = PhaseLayer(phi, QuantizerMode.HARD, Q4)
        f = ComplexField(np.ones((8, 8)), 1.0, 2.0)
        shift = np.angle(modulate(f, layer).values)
        expected = q.hard_quantize(phi, Q4)
        # compare on the unit circle to avoid the +-pi branch cut
        np.testing.assert_allclose(np.exp(1j * shift), np.exp(1j * expected), atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            modulate(ComplexField(np.ones((4, 4)), 1.0, 2.0), PhaseLayer(np.zeros((5, 5))))


class TestForward:
    def test_zero_phase_is_free_space(self):
        g = GeometrySpec(3, (32, 32), (32, 32), (32, 32))
        model = D2NNModel([PhaseLayer(np.zeros((32, 32))) for _ in range(3)], g)
        rng = np.random.default_rng(0)
        values = rng.normal(size=(32, 32)) + 1j * rng.normal(size=(32, 32))
        from diffract_qat.optics import frequency_grid
        fy, fx = frequency_grid((32, 32), g.pitch)
        values = np.fft.ifft2(np.fft.fft2(values) * (fx**2 + fy**2 < (0.8 / g.wavelength) ** 2))
        inp = ComplexField(values, g.pitch, g.wavelength)
        out, _ = forward(model, inp)
        z_in, z, z_out = g.distances
        total = PropagationPlan((32, 32), g.pitch, g.wavelength, z_in + 2 * z + z_out)
        np.testing.assert_allclose(out.values, total.forward(inp).values, atol=1e-10)

    def test_linear_in_field(self):
        model = small_model()
        inp = random_input(model)
        out1, _ = forward(model, inp, train_mode=True)
        out2, _ = forward(model, inp.with_values(2 * inp.values), train_mode=True)
        np.testing.assert_allclose(out2.values, 2 * out1.values, atol=1e-13)

    def test_eval_matches_train_on_levels(self):
        model = small_model(tau=1e4, gamma=1e-4)
        for layer in model.layers:
            idx = np.random.default_rng(5).integers(0, 4, layer.phi.shape)
            layer.phi = Q4.level_set()[idx]
        model.layers[0].fixed_tau = model.layers[1].fixed_tau = 1e4
        inp = random_input(model)
        train_out, _ = forward(model, inp, train_mode=True)
        eval_out, _ = forward(model, inp, train_mode=False)
        np.testing.assert_allclose(train_out.values, eval_out.values, atol=1e-9)

    def test_eval_is_deterministic(self):
        model = small_model(mode=QuantizerMode.GUMBEL_SOFTMAX)
        inp = random_input(model)
        a, _ = forward(model, inp, rng=np.random.default_rng(1))
        b, _ = forward(model, inp, rng=np.random.default_rng(2))
        np.testing.assert_array_equal(a.values, b.values)

    def test_tape_replay(self):
        model = small_model()
        inp = random_input(model)
        _, tape = forward(model, inp, train_mode=True)
        assert len(tape) == 2
        last = model.plan_out.forward(
            ComplexField(tape.inputs[-1] * np.exp(1j * tape.phases[-1]), model.geometry.pitch,
                         model.geometry.wavelength))
        np.testing.assert_array_equal(last.values, tape.last_field)

    def test_geometry_mismatch(self):
        model = small_model()
        with pytest.raises(ValueError):
            forward(model, encode_phase_input(np.zeros((6, 6)), model.geometry.pitch,
                                              model.geometry.wavelength))
        with pytest.raises(ValueError):
            forward(model, encode_phase_input(np.zeros((8, 8)), 1.0, model.geometry.wavelength))

    def test_batched_matches_single(self):
        model = small_model()
        batch = random_input(model, batch=3)
        out, _ = forward(model, batch, train_mode=True)
        single, _ = forward(model, batch.with_values(batch.values[1]), train_mode=True)
        np.testing.assert_allclose(out.values[1], single.values, atol=1e-14)


class TestIntensity:
    def test_values(self):
        np.testing.assert_array_equal(detector_intensity(np.ones((2, 2), complex)), np.ones((2, 2)))
        assert detector_intensity(np.array([3 + 4j]))[0] == 25.0

    def test_global_phase_invariant(self):
        v = np.random.default_rng(0).normal(size=(4, 4)) * (1 + 1j)
        np.testing.assert_allclose(detector_intensity(v * np.exp(0.7j)), detector_intensity(v),
                                   rtol=1e-13)


class TestBackward:
    def test_phi_gradients_match_finite_differences(self):
        model = small_model()
        inp = random_input(model)
        mask = patch_mask((8, 8))
        _, tape = patch_loss(model, inp, mask)
        grads = backward(model, tape, mask)
        for n in range(2):
            for idx in np.ndindex(8, 8):
                fd = fd_phi(model, inp, mask, n, idx)
                an = grads.phi[n][idx]
                assert abs(fd - an) <= 1e-4 * max(abs(fd), abs(an)), (n, idx, fd, an)

    def test_k_gradients_match_finite_differences(self):
        model = small_model()
        inp = random_input(model)
        mask = patch_mask((8, 8))
        _, tape = patch_loss(model, inp, mask)
        grads = backward(model, tape, mask)
        for n in range(2):
            fd = fd_k(model, inp, mask, n)
            assert grads.k[n] == pytest.approx(fd, rel=1e-4)

    @pytest.mark.parametrize("mode", [QuantizerMode.DSQ, QuantizerMode.FULL_PRECISION])
    def test_other_differentiable_modes(self, mode):
        model = small_model(mode=mode, tau=3.0, layers=2, size=6)
        if mode is QuantizerMode.DSQ:
            # keep away from the clamp kinks at the range ends
            for layer in model.layers:
                layer.phi = np.clip(layer.phi, 0.2, 6.0)
        inp = random_input(model)
        mask = np.zeros((6, 6))
        mask[1:4, 2:5] = 1
        _, tape = patch_loss(model, inp, mask)
        grads = backward(model, tape, mask)
        for n in range(2):
            for idx in [(0, 0), (2, 3), (5, 1)]:
                assert grads.phi[n][idx] == pytest.approx(fd_phi(model, inp, mask, n, idx), rel=1e-4)
            if mode is QuantizerMode.DSQ:
                assert grads.k[n] == pytest.approx(fd_k(model, inp, mask, n), rel=1e-4)
            else:
                assert grads.k[n] == 0.0

    def test_gumbel_logit_gradient(self):
        model = small_model(mode=QuantizerMode.GUMBEL_SOFTMAX, layers=2, size=6)
        for layer in model.layers:
            layer.gs_temp = 2.0
        inp = random_input(model)
        mask = np.zeros((6, 6))
        mask[1:4, 2:5] = 1

        def loss():
            out, tape = forward(model, inp, train_mode=True, rng=np.random.default_rng(9))
            return float((detector_intensity(out) * mask).sum()), tape

        _, tape = loss()
        grads = backward(model, tape, mask)
        logits = model.layers[1].gs_logits
        for idx in [(0, 0, 1), (3, 2, 0), (5, 5, 3)]:
            p = logits[idx]
            logits[idx] = p + 1e-5
            up = loss()[0]
            logits[idx] = p - 1e-5
            down = loss()[0]
            logits[idx] = p
            assert grads.gs_logits[1][idx] == pytest.approx((up - down) / 2e-5, rel=1e-5)
        assert not grads.phi[0].any()

    def test_ste_uses_identity(self):
        model = small_model(mode=QuantizerMode.STE)
        inp = random_input(model)
        mask = patch_mask((8, 8))
        _, tape = patch_loss(model, inp, mask)
        ste = backward(model, tape, mask).phi
        # same hard phases in a full-precision model give the true gradient
        fp = D2NNModel([PhaseLayer(layer.hard_phase()) for layer in model.layers], model.geometry)
        _, tape_fp = patch_loss(fp, inp, mask)
        for a, b in zip(ste, backward(fp, tape_fp, mask).phi):
            np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-15)

    def test_hard_mode_zero(self):
        model = small_model(mode=QuantizerMode.HARD)
        inp = random_input(model)
        _, tape = patch_loss(model, inp, patch_mask((8, 8)))
        grads = backward(model, tape, patch_mask((8, 8)))
        assert all(not g.any() for g in grads.phi) and grads.k == [0.0, 0.0]

    def test_constant_loss_zero_gradients(self):
        model = small_model()
        _, tape = forward(model, random_input(model), train_mode=True)
        grads = backward(model, tape, np.zeros((8, 8)))
        assert all((g == 0).all() for g in grads.phi)
        assert all(k == 0 for k in grads.k)

    def test_linear_in_upstream(self):
        model = small_model()
        _, tape = forward(model, random_input(model), train_mode=True)
        rng = np.random.default_rng(4)
        a, b = rng.normal(size=(8, 8)), rng.normal(size=(8, 8))
        ga, gb = backward(model, tape, a), backward(model, tape, b)
        gab = backward(model, tape, 2 * a - 3 * b)
        for n in range(2):
            np.testing.assert_allclose(gab.phi[n], 2 * ga.phi[n] - 3 * gb.phi[n], atol=1e-12)
            assert gab.k[n] == pytest.approx(2 * ga.k[n] - 3 * gb.k[n], rel=1e-10, abs=1e-13)

    def test_batch_sums_samples(self):
        model = small_model()
        batch = random_input(model, batch=2)
        mask = patch_mask((8, 8))
        _, tape = forward(model, batch, train_mode=True)
        total = backward(model, tape, np.stack([mask, mask]))
        parts = []
        for i in range(2):
            _, t = forward(model, batch.with_values(batch.values[i]), train_mode=True)
            parts.append(backward(model, t, mask))
        np.testing.assert_allclose(total.phi[0], parts[0].phi[0] + parts[1].phi[0], atol=1e-12)

    def test_rejects_stale_tape(self):
        model = small_model()
        _, tape = forward(model, random_input(model), train_mode=True)
        model.touch()
        with pytest.raises(ValueError):
            backward(model, tape, np.zeros((8, 8)))
        with pytest.raises(ValueError):
            backward(small_model(), forward(model, random_input(model), train_mode=True)[1],
                     np.zeros((8, 8)))

    def test_rejects_eval_tape_and_bad_shape(self):
        model = small_model()
        _, tape = forward(model, random_input(model), train_mode=False)
        with pytest.raises(ValueError):
            backward(model, tape, np.zeros((8, 8)))
        _, tape = forward(model, random_input(model), train_mode=True)
        with pytest.raises(ValueError):
            backward(model, tape, np.zeros((7, 8)))

    def test_backward_only_runs_adjoint_propagations(self, monkeypatch):
        model = small_model(layers=3)
        _, tape = forward(model, random_input(model), train_mode=True)
        calls = {"forward": 0, "adjoint": 0}
        orig_fwd, orig_adj = PropagationPlan.forward, PropagationPlan.adjoint

        def counting_forward(self, f):
            calls["forward"] += 1
            return orig_fwd(self, f)

        def counting_adjoint(self, f):
            calls["adjoint"] += 1
            return orig_adj(self, f)

        monkeypatch.setattr(PropagationPlan, "forward", counting_forward)
        monkeypatch.setattr(PropagationPlan, "adjoint", counting_adjoint)
        backward(model, tape, patch_mask((8, 8)))
        assert calls == {"forward": 0, "adjoint": 3}


class TestCheckpoint:
    @pytest.mark.parametrize("mode", list(QuantizerMode))
    def test_roundtrip(self, tmp_path, mode):
        model = small_model(mode=mode)
        model.layers[1].fixed_tau = 2.5
        save_checkpoint(model, tmp_path / "m.d2nn", {"epoch": 3, "seed": 1})
        back = load_checkpoint(tmp_path / "m.d2nn")
        assert back.geometry == model.geometry
        for a, b in zip(model.layers, back.layers):
            np.testing.assert_array_equal(a.phi, b.phi)
            assert a.mode is b.mode and a.spec == b.spec and a.temp == b.temp
            assert a.fixed_tau == b.fixed_tau
            if mode is QuantizerMode.GUMBEL_SOFTMAX:
                np.testing.assert_array_equal(a.gs_logits, b.gs_logits)
        assert sidecar_path(tmp_path / "m.d2nn").exists()
        inp = random_input(model)
        np.testing.assert_array_equal(forward(model, inp)[0].values, forward(back, inp)[0].values)

    def test_layout(self, tmp_path):
        model = small_model(layers=1, size=2)
        save_checkpoint(model, tmp_path / "m.d2nn")
        raw = (tmp_path / "m.d2nn").read_bytes()
        assert raw[:4] == b"D2NN"
        assert int.from_bytes(raw[4:8], "little") == 1
        geom = 4 + 24 + 40 + 1 + 4
        layer_header = 1 + 24 + 4 + 32
        assert len(raw) == 8 + geom + layer_header + 4 * 8
        assert raw[8 + geom] == QuantizerMode.PSQ.value

    def test_rejects_corrupt(self, tmp_path):
        save_checkpoint(small_model(), tmp_path / "m.d2nn")
        raw = (tmp_path / "m.d2nn").read_bytes()
        (tmp_path / "short.d2nn").write_bytes(raw[:-8])
        (tmp_path / "long.d2nn").write_bytes(raw + b"\0")
        (tmp_path / "magic.d2nn").write_bytes(b"NOPE" + raw[4:])
        for name in ("short", "long", "magic"):
            with pytest.raises(ValueError):
                load_checkpoint(tmp_path / f"{name}.d2nn")


class TestLayer:
    def test_gs_logit_shape_checked(self):
        with pytest.raises(ValueError):
            PhaseLayer(np.zeros((4, 4)), QuantizerMode.GUMBEL_SOFTMAX, Q4,
                       gs_logits=np.zeros((4, 4, 3)))

    def test_quantized_layer_needs_spec(self):
        with pytest.raises(ValueError):
            PhaseLayer(np.zeros((4, 4)), QuantizerMode.PSQ)

    def test_model_shape_checked(self):
        g = GeometrySpec(1, (8, 8), (8, 8), (8, 8))
        with pytest.raises(ValueError):
            D2NNModel([PhaseLayer(np.zeros((6, 6)))], g)
        with pytest.raises(ValueError):
            D2NNModel([PhaseLayer(np.zeros((8, 8)))] * 2, g)
