"""Module to test the sequence model"""

import itertools
import math
import unittest
from unittest.mock import patch

import numpy as np
import torch

from vital_sign_synth.configs import (
    LossWeights,
    ModelConfig,
    OptimizerType,
    VideoConfig,
)
from vital_sign_synth.errors import (
    InsufficientPeaksError,
    ModelNumericError,
    ParameterError,
    TrainingDivergedError,
)
from vital_sign_synth.model import (
    LOSS_TERMS,
    LossBreakdown,
    ModelOutput,
    build_model,
    compute_gradients,
    compute_loss,
    forward,
    infer_rate,
    make_loader,
    model_params,
    predict,
    sample_tensors,
    train_model,
)
from vital_sign_synth.scene_synth import VideoSample, generate_video
from vital_sign_synth.signal_models import (
    SignalFamily,
    SignalSpec,
    TimeSeries,
)

TINY = ModelConfig(
    num_frames=16,
    height=16,
    width=16,
    encoder_blocks=2,
    channels=4,
    recurrent_layers=1,
    hidden_units=8,
    signal_head_widths=[8],
    decoder_channels=4,
    dropout=0.0,
    batch_size=1,
)
VIDEO = VideoConfig(width=16, height=16, num_frames=16, seed=1)


def _frames(batch: int, steps: int = 16, seed: int = 0) -> torch.Tensor:
    """Uniform random frames."""
    generator = torch.Generator().manual_seed(seed)
    return torch.rand(batch, steps, 16, 16, generator=generator)


def _static_sample() -> VideoSample:
    """A fixed disk whose intensity changes once every four frames."""
    levels = np.repeat([0.3, 0.9, 0.5, 0.8], 4)
    rows, cols = np.mgrid[:16, :16]
    mask = (rows - 8) ** 2 + (cols - 7) ** 2 <= 12
    masks = np.repeat(mask[None], 16, axis=0)
    frames = np.where(masks, levels[:, None, None], 0.2)
    spec = SignalSpec(
        family=SignalFamily.STEP,
        freq_hz=27 / 8,
        fs=27.0,
        amp_min=0.3,
        amp_max=0.9,
        phase_frames=0.0,
    )
    return VideoSample(
        frames=frames,
        gt_signal=TimeSeries(values=levels, fs=27.0),
        gt_rate=spec.rate_bpm,
        gt_masks=masks,
        config=VIDEO,
        target_spec=spec,
    )


def _batch(sample: VideoSample) -> tuple:
    """Sample tensors with a leading batch axis of one."""
    return tuple(t.unsqueeze(0) for t in sample_tensors(sample))


class TestForward(unittest.TestCase):
    """Tests the network forward pass"""

    def test_shapes(self):
        """Tests per-frame output shapes and probability range"""
        model = build_model(TINY, seed=0)
        output = forward(model, _frames(2, 32))
        self.assertEqual((2, 32), tuple(output.signal_local.shape))
        self.assertEqual((2, 32), tuple(output.signal_global.shape))
        self.assertEqual((2, 32, 16, 16), tuple(output.roi_local.shape))
        self.assertEqual((2, 32, 16, 16), tuple(output.roi_global.shape))
        for roi in (output.roi_local, output.roi_global):
            self.assertTrue(bool(((roi >= 0) & (roi <= 1)).all()))

    def test_shapes_random_configs(self):
        """Tests the per-frame shape contract over random valid configs"""
        rng = np.random.default_rng(11)
        for _ in range(8):
            blocks = int(rng.integers(1, 3))
            t_stride = int(rng.integers(1, 3))
            s_stride = int(rng.integers(1, 3))
            t_factor, s_factor = t_stride**blocks, s_stride**blocks
            widths = rng.integers(1, 6, size=int(rng.integers(0, 3)))
            config = ModelConfig(
                num_frames=t_factor * int(rng.integers(2, 5)),
                height=s_factor * int(rng.integers(2, 5)),
                width=s_factor * int(rng.integers(2, 5)),
                encoder_blocks=blocks,
                kernel_size=int(rng.choice([1, 3])),
                temporal_stride=t_stride,
                spatial_stride=s_stride,
                channels=int(rng.integers(1, 4)),
                recurrent_layers=int(rng.integers(1, 3)),
                hidden_units=int(rng.integers(1, 5)),
                bidirectional=bool(rng.integers(2)),
                signal_head_widths=[int(w) for w in widths],
                decoder_channels=int(rng.integers(1, 4)),
                dropout=0.0,
            )
            batch = int(rng.integers(1, 3))
            frames = torch.rand(
                batch, config.num_frames, config.height, config.width
            )
            output = forward(build_model(config, seed=0), frames)
            steps = (batch, config.num_frames)
            maps = steps + (config.height, config.width)
            self.assertEqual(steps, tuple(output.signal_local.shape))
            self.assertEqual(steps, tuple(output.signal_global.shape))
            self.assertEqual(maps, tuple(output.roi_local.shape))
            self.assertEqual(maps, tuple(output.roi_global.shape))

    def test_local_signal_blocks(self):
        """Tests that the local signal is constant over each stride block"""
        model = build_model(TINY, seed=0)
        signal = forward(model, _frames(1)).signal_local[0]
        blocks = signal.reshape(4, 4)
        self.assertTrue(bool((blocks == blocks[:, :1]).all()))

    def test_batch_equivariance(self):
        """Tests that samples in a batch do not interact in eval mode"""
        model = build_model(TINY, seed=0)
        frames = _frames(3)
        batched = forward(model, frames)
        for index in range(3):
            single = forward(model, frames[index : index + 1])
            for name in ModelOutput._fields:
                torch.testing.assert_close(
                    getattr(batched, name)[index],
                    getattr(single, name)[0],
                    atol=1e-5,
                    rtol=1e-5,
                )

    def test_invalid_input(self):
        """Tests frame size and clip length preconditions"""
        model = build_model(TINY, seed=0)
        with self.assertRaises(ParameterError):
            forward(model, torch.zeros(1, 16, 8, 8))
        with self.assertRaises(ParameterError):
            forward(model, torch.zeros(1, 10, 16, 16))
        with self.assertRaises(ParameterError):
            forward(model, torch.zeros(16, 16, 16))

    def test_non_finite_input(self):
        """Tests that NaN frames raise a numeric error naming a tensor"""
        model = build_model(TINY, seed=0)
        frames = _frames(1)
        frames[0, 3, 4, 4] = float("nan")
        with self.assertRaises(ModelNumericError) as e:
            forward(model, frames)
        self.assertIn(e.exception.tensor_name, ModelOutput._fields)

    def test_build_determinism(self):
        """Tests that equal seeds give equal initial weights"""
        first = model_params(build_model(TINY, seed=3))
        second = model_params(build_model(TINY, seed=3))
        third = model_params(build_model(TINY, seed=4))
        for name in first:
            torch.testing.assert_close(first[name], second[name])
        self.assertFalse(
            all(torch.equal(first[n], third[n]) for n in first)
        )


class TestLoss(unittest.TestCase):
    """Tests compute_loss"""

    def setUp(self) -> None:
        """Ground truth for a (1, 4, 2, 2) batch"""
        self.signal = torch.tensor([[0.1, 0.4, 0.7, 0.2]])
        self.masks = torch.zeros(1, 4, 2, 2)
        self.masks[0, :, 0, 0] = 1.0

    def _output(self, signal, roi) -> ModelOutput:
        """Same prediction for both pathways."""
        return ModelOutput(signal, signal, roi, roi)

    def test_exact_prediction(self):
        """Tests that a perfect prediction has zero loss"""
        loss = compute_loss(
            self._output(self.signal, self.masks),
            self.signal,
            self.masks,
            LossWeights(),
        )
        self.assertEqual(0.0, float(loss.total))
        self.assertEqual(set(LOSS_TERMS), set(loss.terms))

    def test_half_probabilities(self):
        """Tests that p = 0.5 everywhere gives ln 2 per ROI term"""
        roi = torch.full_like(self.masks, 0.5)
        loss = compute_loss(
            self._output(self.signal, roi),
            self.signal,
            self.masks,
            LossWeights(signal_local=0, signal_global=0),
        )
        self.assertAlmostEqual(math.log(2), loss.terms["roi_local"], 6)
        self.assertAlmostEqual(2 * math.log(2), float(loss.total), 6)

    def test_signal_mse(self):
        """Tests the signal terms and linearity in the weights"""
        output = self._output(self.signal + 0.5, self.masks)
        weights = LossWeights(roi_local=0, roi_global=0, signal_local=0.5)
        loss = compute_loss(output, self.signal, self.masks, weights)
        self.assertAlmostEqual(0.25, loss.terms["signal_global"], 6)
        self.assertAlmostEqual(0.375, float(loss.total), 6)
        doubled = compute_loss(
            output, self.signal, self.masks, weights.scaled(2.0)
        )
        self.assertAlmostEqual(0.75, float(doubled.total), 6)


class TestGradients(unittest.TestCase):
    """Tests compute_gradients"""

    @classmethod
    def setUpClass(cls) -> None:
        """Small float64 network and data"""
        cls.config = TINY.model_copy(
            update={
                "num_frames": 8,
                "hidden_units": 3,
                "channels": 2,
                "signal_head_widths": [3],
                "decoder_channels": 2,
            }
        )
        generator = torch.Generator().manual_seed(5)
        cls.frames = torch.rand(1, 8, 16, 16, generator=generator).double()
        cls.signal = torch.rand(1, 8, generator=generator).double()
        cls.masks = (
            torch.rand(1, 8, 16, 16, generator=generator) > 0.7
        ).double()

    def _model(self):
        """Fresh float64 model."""
        return build_model(self.config, seed=2).double()

    def _loss(self, model, weights=None) -> float:
        """Eval-mode loss."""
        with torch.no_grad():
            output = forward(model, self.frames, train=False)
            loss = compute_loss(
                output, self.signal, self.masks, weights or LossWeights()
            )
        return float(loss.total)

    def test_finite_differences(self):
        """Tests gradients against central differences"""
        model = self._model()
        gradients = compute_gradients(
            model, self.frames, self.signal, self.masks, LossWeights()
        )
        params = dict(model.named_parameters())
        rng = np.random.default_rng(0)
        checks = []
        for name, param in params.items():
            count = min(20, param.numel())
            for index in rng.choice(param.numel(), count, replace=False):
                checks.append((name, int(index)))
        eps = 1e-7
        loose = 0
        for name, index in checks:
            flat = params[name].data.view(-1)
            original = float(flat[index])
            flat[index] = original + eps
            upper = self._loss(model)
            flat[index] = original - eps
            lower = self._loss(model)
            flat[index] = original
            numeric = (upper - lower) / (2 * eps)
            analytic = float(gradients[name].view(-1)[index])
            scale = max(abs(numeric), abs(analytic))
            error = abs(numeric - analytic)
            # A step across a ReLU kink averages two slopes
            self.assertLessEqual(
                error, 1e-2 * scale + 1e-6, f"{name}[{index}]"
            )
            if error > 1e-4 * scale + 1e-7:
                loose += 1
        self.assertLessEqual(loose, len(checks) // 100)

    def test_zero_roi_weights(self):
        """Tests that decoders get no gradient without ROI terms"""
        weights = LossWeights(roi_local=0, roi_global=0)
        gradients = compute_gradients(
            self._model(), self.frames, self.signal, self.masks, weights
        )
        for name, grad in gradients.items():
            if name.startswith(("roi_local.", "roi_global.")):
                self.assertEqual(0.0, float(grad.abs().max()), name)
        encoder = gradients["encoder.0.0.weight"]
        self.assertGreater(float(encoder.abs().max()), 0)

    def test_duplicated_batch(self):
        """Tests that a duplicated batch gives the same mean gradient"""
        single = compute_gradients(
            self._model(), self.frames, self.signal, self.masks, LossWeights()
        )
        double = compute_gradients(
            self._model(),
            self.frames.repeat(2, 1, 1, 1),
            self.signal.repeat(2, 1),
            self.masks.repeat(2, 1, 1, 1),
            LossWeights(),
        )
        for name in single:
            torch.testing.assert_close(single[name], double[name])


class TestTraining(unittest.TestCase):
    """Tests train_model"""

    def test_zero_steps(self):
        """Tests that zero steps returns the initial weights"""
        result = train_model(TINY, make_loader(VIDEO, 1), 0, seed=9)
        self.assertEqual([], result.trace)
        initial = model_params(build_model(TINY, seed=9))
        trained = model_params(result.model)
        for name in initial:
            torch.testing.assert_close(initial[name], trained[name])

    def test_determinism(self):
        """Tests that equal seeds and streams give equal weights"""
        config = TINY.model_copy(update={"dropout": 0.2})
        first = train_model(config, make_loader(VIDEO, 1), 3, seed=1)
        second = train_model(config, make_loader(VIDEO, 1), 3, seed=1)
        self.assertEqual(first.trace, second.trace)
        a, b = model_params(first.model), model_params(second.model)
        for name in a:
            self.assertTrue(torch.equal(a[name], b[name]), name)
        self.assertEqual([0, 1, 2], [r["step"] for r in first.trace])
        self.assertFalse(first.model.training)

    def test_on_step_callback(self):
        """Tests the callback receives completed step numbers"""
        seen = []
        train_model(
            TINY,
            make_loader(VIDEO, 1),
            2,
            start_step=5,
            on_step=lambda step, model: seen.append(step),
        )
        self.assertEqual([6, 7], seen)

    def test_overfit_single_video(self):
        """Tests that the loss on one repeated video drops tenfold. Adam is
        used because plain SGD at the default rate needs thousands of steps
        to get there; the clip holds each level for one stride block so
        the local pathway can fit it exactly."""
        config = TINY.model_copy(
            update={"optimizer": OptimizerType.ADAM, "learning_rate": 0.005}
        )
        result = train_model(
            config, itertools.repeat(_batch(_static_sample())), 500, seed=0
        )
        totals = [record["total"] for record in result.trace]
        self.assertLess(min(totals[-20:]), 0.1 * totals[0])

    def test_default_optimizer_generated_video(self):
        """Tests that default SGD lowers the loss on a repeated generated
        video"""
        self.assertEqual(OptimizerType.SGD, TINY.optimizer)
        batch = _batch(generate_video(VIDEO))
        result = train_model(TINY, itertools.repeat(batch), 200, seed=0)
        totals = [record["total"] for record in result.trace]
        self.assertLess(np.mean(totals[-20:]), totals[0])

    @patch("vital_sign_synth.model.compute_loss")
    def test_divergence(self, mock_loss):
        """Tests that a non-finite loss stops training"""
        nan = torch.tensor(float("nan"), requires_grad=True)
        mock_loss.return_value = LossBreakdown(
            total=nan, terms={name: float("nan") for name in LOSS_TERMS}
        )
        with self.assertRaises(TrainingDivergedError) as e:
            train_model(TINY, make_loader(VIDEO, 1), 5, start_step=2)
        self.assertEqual(2, e.exception.step)
        self.assertEqual(1, len(e.exception.trace))


class TestLoader(unittest.TestCase):
    """Tests make_loader"""

    def test_batch_seeds(self):
        """Tests that batch b holds seeds start + b * size + i"""
        batches = iter(make_loader(VIDEO, 2, start_seed=30))
        for first in (30, 32):
            frames, signal, masks = next(batches)
            self.assertEqual((2, 16, 16, 16), tuple(frames.shape))
            self.assertEqual((2, 16), tuple(signal.shape))
            self.assertEqual(torch.float32, masks.dtype)
            for i in range(2):
                cfg = VIDEO.model_copy(update={"seed": first + i})
                expected = generate_video(cfg)
                np.testing.assert_allclose(
                    expected.frames, frames[i].double().numpy(), atol=1e-6
                )

    def test_workers_keep_order(self):
        """Tests that worker processes yield the in-process batches"""
        serial = make_loader(VIDEO, 1)
        parallel = make_loader(VIDEO, 1, num_workers=2, prefetch_factor=1)
        pairs = itertools.islice(zip(serial, parallel), 4)
        for expected, actual in pairs:
            for a, b in zip(expected, actual):
                self.assertTrue(torch.equal(a, b))

    def test_resume_offset(self):
        """Tests that a later start seed continues the same stream"""
        full = list(itertools.islice(make_loader(VIDEO, 2), 3))
        resumed = next(iter(make_loader(VIDEO, 2, VIDEO.seed + 4)))
        for a, b in zip(full[2], resumed):
            self.assertTrue(torch.equal(a, b))


class TestInference(unittest.TestCase):
    """Tests predict and infer_rate"""

    def test_predict_any_length(self):
        """Tests that clips of any length are padded and cropped"""
        model = build_model(TINY, seed=0)
        frames = _frames(1, 18).numpy()[0]
        result = predict(model, frames, 27.0)
        self.assertEqual(18, len(result.signal))
        self.assertEqual((18, 16, 16), result.roi.shape)
        self.assertEqual(bool, result.roi.dtype)
        np.testing.assert_array_equal(
            result.roi, result.roi_probability > 0.5
        )
        self.assertIsNone(result.rate)

    def test_infer_rate_contract(self):
        """Tests that an untrained model gives a rate or a clear error"""
        model = build_model(TINY, seed=0)
        frames = _frames(1, 256).numpy()[0]
        try:
            result = infer_rate(model, frames, 27.0, min_distance=5)
        except InsufficientPeaksError as e:
            self.assertLess(e.count, 2)
        else:
            self.assertGreater(result.rate, 0)
            self.assertEqual(sorted(result.peaks), result.peaks)
            self.assertEqual(256, len(result.signal))


if __name__ == "__main__":
    unittest.main()
