"""Tests for loss, optimizer, schedule, training loop, and checkpoints."""

import numpy as np
import pytest

from helpers import central_difference, max_rel_err
from tsal import model as Mo
from tsal import train as Tr
from tsal.errors import (
    CorruptCheckpoint,
    DimensionMismatch,
    EmptyDataset,
    LengthMismatch,
    ShapeMismatch,
)
from tsal.tensor import Tensor4


def tiny_model(variant: str, seed: int = 0) -> Mo.AdaptationModel:
    return Mo.init_parameters(variant, rng_seed=seed, hidden_channels=4)


class TestBceLoss:
    def test_uniform_half_prediction(self):
        rng = np.random.default_rng(0)
        pred = Tensor4(np.full((1, 1, 4, 4), 0.5))
        target = Tensor4(rng.integers(0, 2, size=(1, 1, 4, 4)).astype(float))
        loss, _ = Tr.bce_loss(pred, target)
        assert loss == pytest.approx(np.log(2.0), abs=1e-12)

    def test_stationary_at_pred_equal_target(self):
        pred = Tensor4(np.full((1, 1, 2, 2), 0.5))
        loss, grad = Tr.bce_loss(pred, pred)
        assert loss == pytest.approx(np.log(2.0), abs=1e-12)
        assert np.allclose(grad.data, 0.0)

    def test_loss_equals_target_entropy_at_match(self):
        rng = np.random.default_rng(1)
        t = rng.uniform(0.1, 0.9, size=(1, 1, 3, 3))
        loss, grad = Tr.bce_loss(Tensor4(t), Tensor4(t))
        entropy = -np.mean(t * np.log(t) + (1 - t) * np.log(1 - t))
        assert loss == pytest.approx(entropy, abs=1e-12)
        assert np.max(np.abs(grad.data)) < 1e-12

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(2)
        for _ in range(10):
            p = rng.uniform(0.05, 0.95, size=(1, 1, 4, 4))
            t = rng.uniform(0.0, 1.0, size=(1, 1, 4, 4))
            _, grad = Tr.bce_loss(Tensor4(p), Tensor4(t))
            numeric = central_difference(
                lambda: Tr.bce_loss(Tensor4(p), Tensor4(t))[0], p
            )
            assert max_rel_err(grad.data, numeric) < 1e-6

    def test_clamp_keeps_loss_finite(self):
        pred = Tensor4(np.array([[[[1e-12, 1.0 - 1e-12]]]]))
        target = Tensor4(np.array([[[[1.0, 0.0]]]]))
        loss, grad = Tr.bce_loss(pred, target)
        assert np.isfinite(loss)
        assert np.all(np.isfinite(grad.data))

    def test_dim_mismatch(self):
        with pytest.raises(DimensionMismatch):
            Tr.bce_loss(Tensor4(np.full((1, 1, 2, 2), 0.5)), Tensor4(np.zeros((1, 1, 3, 3))))


class TestSgdStep:
    def test_vanilla_without_momentum_or_decay(self):
        m = tiny_model(Mo.CONV_ONLY)
        hyper = Tr.Hyper(momentum=0.0, weight_decay=0.0, lr0=0.01)
        state = Tr.OptimizerState.fresh(m, hyper)
        before = {n: a.copy() for n, a in m.named_parameters()}
        grads = {n: np.full_like(a, 0.25) for n, a in m.named_parameters()}
        Tr.sgd_step(m, grads, state)
        for n, a in m.named_parameters():
            assert np.allclose(a, before[n] - 0.01 * 0.25)
        assert state.step_count == 1

    def test_hand_computed_single_step(self):
        # w=1, g=0.5, lr=0.1, momentum=0.9, wd=1e-4 -> v=0.5001, w=0.94999
        m = tiny_model(Mo.CONV_ONLY)
        for _, a in m.named_parameters():
            a[...] = 1.0
        hyper = Tr.Hyper(momentum=0.9, weight_decay=1e-4, lr0=0.1)
        state = Tr.OptimizerState.fresh(m, hyper)
        grads = {n: np.full_like(a, 0.5) for n, a in m.named_parameters()}
        Tr.sgd_step(m, grads, state)
        for n, a in m.named_parameters():
            assert np.max(np.abs(state.momentum_buffers[n] - 0.5001)) < 1e-12
            assert np.max(np.abs(a - 0.94999)) < 1e-12

    def test_momentum_coasting(self):
        m = tiny_model(Mo.CONV_ONLY)
        hyper = Tr.Hyper(momentum=0.9, weight_decay=0.0, lr0=0.1)
        state = Tr.OptimizerState.fresh(m, hyper)
        grads = {n: np.full_like(a, 1.0) for n, a in m.named_parameters()}
        Tr.sgd_step(m, grads, state)
        before = {n: a.copy() for n, a in m.named_parameters()}
        zero = {n: np.zeros_like(a) for n, a in m.named_parameters()}
        Tr.sgd_step(m, zero, state)
        for n, a in m.named_parameters():
            assert np.allclose(before[n] - a, 0.1 * 0.9 * 1.0)

    def test_geometric_coasting_decay(self):
        m = tiny_model(Mo.CONV_ONLY)
        hyper = Tr.Hyper(momentum=0.9, weight_decay=0.0, lr0=0.05)
        state = Tr.OptimizerState.fresh(m, hyper)
        grads = {n: np.full_like(a, 2.0) for n, a in m.named_parameters()}
        Tr.sgd_step(m, grads, state)
        zero = {n: np.zeros_like(a) for n, a in m.named_parameters()}
        prev = {n: a.copy() for n, a in m.named_parameters()}
        expected = 0.05 * 0.9 * 2.0
        for _ in range(10):
            Tr.sgd_step(m, zero, state)
            for n, a in m.named_parameters():
                assert np.max(np.abs((prev[n] - a) - expected)) < 1e-12
            prev = {n: a.copy() for n, a in m.named_parameters()}
            expected *= 0.9

    def test_shape_mismatch(self):
        m = tiny_model(Mo.CONV_ONLY)
        state = Tr.OptimizerState.fresh(m, Tr.Hyper())
        grads = {n: np.zeros(3) for n, _ in m.named_parameters()}
        with pytest.raises(ShapeMismatch):
            Tr.sgd_step(m, grads, state)


class TestLrSchedule:
    def test_paper_values(self):
        hyper = Tr.Hyper(decay_every_epochs=3)
        assert Tr.lr_schedule(hyper, 0) == pytest.approx(1e-5)
        assert Tr.lr_schedule(hyper, 3) == pytest.approx(1e-6)
        assert Tr.lr_schedule(hyper, 7) == pytest.approx(1e-7)

    def test_non_increasing_piecewise_constant(self):
        hyper = Tr.Hyper(decay_every_epochs=2)
        values = [Tr.lr_schedule(hyper, e) for e in range(10)]
        assert all(a >= b for a, b in zip(values, values[1:]))
        assert values[0] == values[1] and values[2] == values[3]


class TestClipGradients:
    def test_below_threshold_untouched(self):
        grads = {"a": np.array([3.0, 4.0])}  # norm 5
        norm = Tr.clip_gradients(grads, 10.0)
        assert norm == pytest.approx(5.0)
        assert np.allclose(grads["a"], [3.0, 4.0])

    def test_above_threshold_rescaled(self):
        grads = {"a": np.array([30.0, 40.0])}  # norm 50
        norm = Tr.clip_gradients(grads, 10.0)
        assert norm == pytest.approx(50.0)
        assert np.linalg.norm(grads["a"]) == pytest.approx(10.0)
        # direction preserved
        assert np.allclose(grads["a"] / np.linalg.norm(grads["a"]), [0.6, 0.8])


def blob_sample(rng, video_id: str, frames: int = 8, size: int = 8) -> Tr.TrainSample:
    xs, ts = [], []
    for _ in range(frames):
        x = rng.uniform(0, 1, size=(1, 1, size, size))
        xs.append(Tensor4(x))
        ts.append(Tensor4((x > 0.5).astype(float)))
    return Tr.TrainSample(video_id=video_id, frames=xs, targets=ts)


class TestTrainLoop:
    def test_single_window_single_step(self):
        rng = np.random.default_rng(3)
        sample = blob_sample(rng, "v0", frames=5)
        model = tiny_model(Mo.CONV_ONLY)
        config = Tr.TrainConfig(epochs=1, clip_length=8, seed=0)
        result = Tr.train(model, [sample], config)
        assert len(result.history) == 1
        assert result.state.step_count == 1

    def test_window_count_bookkeeping(self):
        rng = np.random.default_rng(4)
        sample = blob_sample(rng, "v0", frames=10)
        model = tiny_model(Mo.CONV_ONLY)
        config = Tr.TrainConfig(epochs=2, clip_length=4, seed=0)
        result = Tr.train(model, [sample], config)
        # 10 frames -> windows of 4,4,2 per epoch
        assert len(result.history) == 6
        assert [step for step, _ in result.history] == [1, 2, 3, 4, 5, 6]

    def test_max_steps_cap(self):
        rng = np.random.default_rng(5)
        samples = [blob_sample(rng, f"v{k}", frames=8) for k in range(3)]
        model = tiny_model(Mo.CONV_ONLY)
        config = Tr.TrainConfig(epochs=50, clip_length=4, seed=0, max_steps=7)
        result = Tr.train(model, samples, config)
        assert result.state.step_count == 7
        assert len(result.history) == 7

    def test_deterministic_repeat(self):
        def run():
            rng = np.random.default_rng(6)
            samples = [blob_sample(rng, f"v{k}") for k in range(2)]
            model = tiny_model(Mo.CONV_LSTM, seed=1)
            config = Tr.TrainConfig(epochs=2, clip_length=4, seed=9)
            return Tr.train(model, samples, config)

        a, b = run(), run()
        assert a.history == b.history
        for (na, pa), (nb, pb) in zip(
            a.model.named_parameters(), b.model.named_parameters()
        ):
            assert na == nb and np.array_equal(pa, pb)

    def test_loss_decreases_on_overfit(self):
        rng = np.random.default_rng(7)
        sample = blob_sample(rng, "v0", frames=4)
        model = tiny_model(Mo.CONV_ONLY, seed=2)
        hyper = Tr.Hyper(lr0=0.5, decay_every_epochs=1000)
        config = Tr.TrainConfig(epochs=60, clip_length=4, seed=0, hyper=hyper)
        result = Tr.train(model, [sample], config)
        first = result.history[0][1]
        last = result.history[-1][1]
        assert last < 0.5 * first

    def test_empty_dataset(self):
        with pytest.raises(EmptyDataset):
            Tr.train(tiny_model(Mo.CONV_ONLY), [], Tr.TrainConfig())

    def test_sample_validation(self):
        with pytest.raises(LengthMismatch):
            Tr.TrainSample("bad", [Tensor4(np.zeros((1, 1, 2, 2)))], [])


class TestCheckpoint:
    def roundtrip(self, tmp_path, variant):
        model = tiny_model(variant, seed=3)
        state = Tr.OptimizerState.fresh(model, Tr.Hyper())
        rng = np.random.default_rng(8)
        for name in state.momentum_buffers:
            state.momentum_buffers[name][...] = rng.uniform(
                -1, 1, size=state.momentum_buffers[name].shape
            )
        path = str(tmp_path / "model.tsal")
        Tr.save_checkpoint(model, state.momentum_buffers, path)
        return model, state, path

    @pytest.mark.parametrize("variant", [Mo.CONV_ONLY, Mo.CONV_LSTM])
    def test_round_trip_exact_at_32_bit(self, tmp_path, variant):
        model, state, path = self.roundtrip(tmp_path, variant)
        loaded, buffers = Tr.load_checkpoint(path)
        assert loaded.variant == variant
        assert loaded.hidden_channels == model.hidden_channels
        for name, arr in model.named_parameters():
            expected = arr.astype(np.float32).astype(np.float64)
            assert np.array_equal(dict(loaded.named_parameters())[name], expected)
        for name, buf in state.momentum_buffers.items():
            expected = buf.astype(np.float32).astype(np.float64)
            assert np.array_equal(buffers[name], expected)

    def test_double_round_trip_identical_bytes(self, tmp_path):
        model, state, path = self.roundtrip(tmp_path, Mo.CONV_LSTM)
        loaded, buffers = Tr.load_checkpoint(path)
        path2 = str(tmp_path / "again.tsal")
        Tr.save_checkpoint(loaded, buffers, path2)
        with open(path, "rb") as a, open(path2, "rb") as b:
            assert a.read() == b.read()

    def test_header_fields(self, tmp_path):
        _, _, path = self.roundtrip(tmp_path, Mo.CONV_LSTM)
        with open(path, "rb") as fh:
            blob = fh.read()
        assert blob[:4] == b"TSAL"
        version, variant_code, hidden = (
            int.from_bytes(blob[4:6], "little"),
            blob[6],
            int.from_bytes(blob[7:9], "little"),
        )
        assert version == 1
        assert variant_code == 1
        assert hidden == 4

    def test_truncated_rejected(self, tmp_path):
        _, _, path = self.roundtrip(tmp_path, Mo.CONV_ONLY)
        with open(path, "rb") as fh:
            blob = fh.read()
        for cut in (len(blob) - 1, len(blob) // 2, 8, 3):
            bad = str(tmp_path / f"cut{cut}.tsal")
            with open(bad, "wb") as fh:
                fh.write(blob[:cut])
            with pytest.raises(CorruptCheckpoint):
                Tr.load_checkpoint(bad)

    def test_corrupted_payload_rejected(self, tmp_path):
        _, _, path = self.roundtrip(tmp_path, Mo.CONV_ONLY)
        with open(path, "rb") as fh:
            blob = bytearray(fh.read())
        blob[20] ^= 0xFF
        bad = str(tmp_path / "flip.tsal")
        with open(bad, "wb") as fh:
            fh.write(bytes(blob))
        with pytest.raises(CorruptCheckpoint):
            Tr.load_checkpoint(bad)

    def test_bad_magic_rejected(self, tmp_path):
        bad = str(tmp_path / "junk.tsal")
        body = b"JUNK" + b"\x00" * 16
        with open(bad, "wb") as fh:
            fh.write(body + np.uint32(__import__("zlib").crc32(body)).tobytes())
        with pytest.raises(CorruptCheckpoint):
            Tr.load_checkpoint(bad)

    def test_variant_mismatch(self, tmp_path):
        _, _, path = self.roundtrip(tmp_path, Mo.CONV_ONLY)
        with pytest.raises(CorruptCheckpoint, match="variant mismatch"):
            Tr.load_checkpoint(path, expect_variant=Mo.CONV_LSTM)

    def test_atomic_write_leaves_no_temp(self, tmp_path):
        _, _, path = self.roundtrip(tmp_path, Mo.CONV_ONLY)
        assert not (tmp_path / "model.tsal.tmp").exists()
