"""Module to test synthetic scene generation"""

import math
import unittest

import numpy as np
from scipy import stats

from vital_sign_synth.configs import (
    DspConfig,
    FrequencyRange,
    SignalSamplingConfig,
    VideoConfig,
)
from vital_sign_synth.dsp import (
    Box,
    baseline_rate,
    dft_rate,
    dominant_frequency,
    fill_missing_boxes,
    mean_roi_signal,
)
from vital_sign_synth.errors import ParameterError, SceneCompositionError
from vital_sign_synth.scene_synth import (
    EllipseState,
    EllipseTrack,
    TrackRole,
    _background_keyframes,
    _object_series,
    compose_frame,
    ellipse_mask,
    generate_background,
    generate_video,
    rasterize_scene_masks,
    sample_ellipse_track,
    step_ellipse,
    stream_samples,
)
from vital_sign_synth.signal_models import (
    SignalFamily,
    SignalSpec,
    TimeSeries,
)

TINY = VideoConfig(width=16, height=16, num_frames=8, seed=3)
QUIET = SignalSamplingConfig(noise_std=0.0, flatten_probability=0.0)


def _track(
    position=(10.0, 10.0), axes=(5.0, 5.0), angle=0.0, z_order=0
) -> EllipseTrack:
    """Static track with a constant signal."""
    signal = SignalSpec(
        family=SignalFamily.SIN,
        freq_hz=0.3,
        fs=27.0,
        amp_min=0.5,
        amp_max=0.5,
        phase_frames=0.0,
    )
    return EllipseTrack(
        start_pos=position,
        end_pos=position,
        axes=axes,
        angle=angle,
        z_order=z_order,
        role=TrackRole.INTEREST,
        signal=signal,
    )


class TestEllipseTracks(unittest.TestCase):
    """Tests track sampling and motion"""

    def test_axes_uniform(self):
        """Tests that sampled semi-axes are uniform over [1, Dim/4]"""
        cfg = VideoConfig(width=256, height=256)
        rng = np.random.default_rng(0)
        axes = []
        for _ in range(2000):
            track = sample_ellipse_track(rng, cfg, TrackRole.DISTRACTOR)
            axes.extend(track.axes)
            self.assertTrue(0 <= track.start_pos[0] < 256)
            self.assertTrue(0 <= track.angle < 360)
        axes = np.asarray(axes)
        self.assertGreaterEqual(axes.min(), 1.0)
        self.assertLessEqual(axes.max(), 64.0)
        result = stats.kstest(axes, "uniform", args=(1.0, 63.0))
        self.assertGreater(result.pvalue, 0.001)

    def test_track_determinism(self):
        """Tests that equal seeds give equal tracks"""
        first = sample_ellipse_track(
            np.random.default_rng(4), TINY, TrackRole.INTEREST
        )
        second = sample_ellipse_track(
            np.random.default_rng(4), TINY, TrackRole.INTEREST
        )
        self.assertEqual(first, second)

    def test_step_without_noise(self):
        """Tests the deterministic blend toward the end position"""
        cfg = TINY.model_copy(
            update={
                "size_noise_std": 0.0,
                "angle_noise_std": 0.0,
                "position_noise_std": 0.0,
            }
        )
        track = _track().model_copy(update={"end_pos": (2.0, 14.0)})
        state = EllipseState(position=(10.0, 4.0), axes=(3.0, 2.0), angle=30)
        out = step_ellipse(state, track, 7, 8, np.random.default_rng(0), cfg)
        self.assertAlmostEqual(10.0 / 8 + 2.0 * 7 / 8, out.position[0])
        self.assertAlmostEqual(4.0 / 8 + 14.0 * 7 / 8, out.position[1])
        self.assertEqual((3.0, 2.0), out.axes)
        self.assertEqual(30.0, out.angle)

    def test_step_range(self):
        """Tests that t must lie in [1, T)"""
        state = _track().initial_state()
        rng = np.random.default_rng(0)
        for t in (0, 8):
            with self.assertRaises(ParameterError):
                step_ellipse(state, _track(), t, 8, rng, TINY)

    def test_axis_log_change(self):
        """Tests the mean log change of the semi-axes per step"""
        cfg = VideoConfig(width=256, height=256)
        track = _track(position=(128.0, 128.0))
        state = EllipseState(
            position=(128.0, 128.0), axes=(20.0, 20.0), angle=10.0
        )
        rng = np.random.default_rng(6)
        changes = []
        for _ in range(10000):
            out = step_ellipse(state, track, 1, 100, rng, cfg)
            changes.extend(np.log(np.asarray(out.axes) / 20.0))
        self.assertAlmostEqual(-0.00508, np.mean(changes), delta=0.002)


class TestMasks(unittest.TestCase):
    """Tests ellipse rasterization and occlusion"""

    def test_area(self):
        """Tests that the pixel count approximates pi * a * b"""
        state = EllipseState(
            position=(64.0, 64.0), axes=(30.0, 20.0), angle=33.0
        )
        area = ellipse_mask(state, (128, 128)).sum()
        self.assertAlmostEqual(math.pi * 600, area, delta=0.02 * math.pi * 600)

    def test_orientation(self):
        """Tests that the first semi-axis runs along rows at angle 0"""
        state = EllipseState(position=(32.0, 32.0), axes=(10.0, 3.0), angle=0)
        mask = ellipse_mask(state, (64, 64))
        self.assertTrue(mask[41, 32])
        self.assertFalse(mask[32, 41])

    def test_outside_frame(self):
        """Tests that off-frame ellipses give empty masks"""
        state = EllipseState(position=(15.0, 15.0), axes=(3.0, 3.0), angle=0)
        self.assertEqual(0, ellipse_mask(state, (8, 8)).sum())

    def test_concentric_occlusion(self):
        """Tests that the lower z_order claims the shared pixels"""
        inner = _track(position=(20.0, 20.0), axes=(5.0, 5.0), z_order=0)
        outer = _track(position=(20.0, 20.0), axes=(10.0, 10.0), z_order=1)
        tracks = [outer, inner]
        states = [t.initial_state() for t in tracks]
        masks = rasterize_scene_masks(tracks, states, (40, 40))
        self.assertFalse(np.any(masks[0] & masks[1]))
        np.testing.assert_array_equal(
            ellipse_mask(inner.initial_state(), (40, 40)), masks[1]
        )
        np.testing.assert_array_equal(
            ellipse_mask(outer.initial_state(), (40, 40)),
            masks[0] | masks[1],
        )
        self.assertFalse(masks[0][20, 20])

    def test_disjoint_unchanged(self):
        """Tests that disjoint ellipses keep their full masks"""
        tracks = [
            _track(position=(8.0, 8.0), axes=(4.0, 4.0), z_order=1),
            _track(position=(30.0, 30.0), axes=(4.0, 4.0), z_order=0),
        ]
        states = [t.initial_state() for t in tracks]
        masks = rasterize_scene_masks(tracks, states, (40, 40))
        for mask, state in zip(masks, states):
            np.testing.assert_array_equal(ellipse_mask(state, (40, 40)), mask)
        with self.assertRaises(ParameterError):
            rasterize_scene_masks(tracks, states[:1], (40, 40))


class TestBackground(unittest.TestCase):
    """Tests generate_background"""

    def test_single_cell_constant(self):
        """Tests that a 1x1 grid gives spatially constant frames"""
        cfg = TINY.model_copy(update={"bg_lowres": (1, 1)})
        background = generate_background(np.random.default_rng(1), cfg)
        self.assertEqual((8, 16, 16), background.shape)
        for frame in background:
            np.testing.assert_allclose(frame, frame[0, 0])

    def test_keyframes_and_midpoint(self):
        """Tests interpolation between keyframes"""
        cfg = VideoConfig(
            width=16, height=16, num_frames=21, bg_keyframe_stride=10
        )
        keys = _background_keyframes(np.random.default_rng(2), cfg)
        background = generate_background(np.random.default_rng(2), cfg)
        self.assertEqual(3, len(keys))
        np.testing.assert_allclose(background[0], keys[0])
        np.testing.assert_allclose(background[10], keys[1])
        np.testing.assert_allclose(background[20], keys[2])
        np.testing.assert_allclose(background[5], (keys[0] + keys[1]) / 2)
        self.assertTrue(np.all((background >= 0) & (background <= 1)))


class TestComposeFrame(unittest.TestCase):
    """Tests compose_frame"""

    def test_exact_values(self):
        """Tests painting without blur or noise"""
        cfg = TINY.model_copy(update={"blur_sigma": 0.0, "sp_density": 0.0})
        mask = np.zeros((16, 16), dtype=bool)
        mask[2:5, 3:7] = True
        background = np.full((16, 16), 0.25)
        frame = compose_frame(
            [mask], [0.8], background, cfg, np.random.default_rng(0)
        )
        np.testing.assert_array_equal(frame[mask], 0.8)
        np.testing.assert_array_equal(frame[~mask], 0.25)

    def test_salt_and_pepper_count(self):
        """Tests the number of corrupted pixels at density 0.05"""
        cfg = VideoConfig(
            width=256, height=256, blur_sigma=0.0, sp_density=0.05
        )
        frame = compose_frame(
            [], [], np.full((256, 256), 0.5), cfg, np.random.default_rng(8)
        )
        changed = int((frame != 0.5).sum())
        self.assertAlmostEqual(3277, changed, delta=167)
        self.assertTrue(np.all(np.isin(frame[frame != 0.5], [0.0, 1.0])))

    def test_overlap_rejected(self):
        """Tests that overlapping masks raise"""
        mask = np.ones((16, 16), dtype=bool)
        with self.assertRaises(SceneCompositionError):
            compose_frame(
                [mask, mask],
                [0.1, 0.2],
                np.zeros((16, 16)),
                TINY,
                np.random.default_rng(0),
            )


class TestGenerateVideo(unittest.TestCase):
    """Tests generate_video"""

    def test_shapes_and_range(self):
        """Tests shapes, value range and ground truth"""
        sample = generate_video(TINY)
        self.assertEqual((8, 16, 16), sample.frames.shape)
        self.assertEqual(sample.frames.shape, sample.gt_masks.shape)
        self.assertEqual(8, len(sample.gt_signal))
        self.assertTrue(np.all((sample.frames >= 0) & (sample.frames <= 1)))
        self.assertEqual(sample.target_spec.rate_bpm, sample.gt_rate)
        self.assertEqual(2, len(sample.distractor_specs))
        self.assertEqual(3, len(sample.tracks))

    def test_determinism(self):
        """Tests that equal configs give identical videos"""
        first = generate_video(TINY)
        second = generate_video(TINY)
        np.testing.assert_array_equal(first.frames, second.frames)
        np.testing.assert_array_equal(first.gt_masks, second.gt_masks)
        third = generate_video(TINY.model_copy(update={"seed": 4}))
        self.assertFalse(np.array_equal(first.frames, third.frames))

    def test_composition_identity(self):
        """Tests that interest pixels carry the target signal"""
        rng = np.random.default_rng(2024)
        for trial in range(20):
            cfg = VideoConfig(
                width=int(rng.integers(16, 48)),
                height=int(rng.integers(16, 48)),
                num_frames=int(rng.integers(2, 40)),
                blur_sigma=0.0,
                sp_density=0.0,
                n_interest=int(rng.integers(1, 4)),
                n_distractors=int(rng.integers(0, 4)),
                seed=trial,
            )
            sample = generate_video(cfg)
            for t in range(cfg.num_frames):
                np.testing.assert_array_equal(
                    sample.frames[t][sample.gt_masks[t]],
                    sample.gt_signal.values[t],
                )

    def test_spectral_rate(self):
        """Tests that a fixed 0.3 Hz prior lands on DFT bin 11"""
        cfg = VideoConfig(
            width=32,
            height=32,
            num_frames=1000,
            target_range={"min_hz": 0.3, "max_hz": 0.3},
            signals=QUIET,
            seed=5,
        )
        sample = generate_video(cfg)
        self.assertAlmostEqual(18.0, sample.gt_rate)
        self.assertAlmostEqual(
            17.82, dft_rate(sample.gt_signal, (0.1, 0.5))
        )

    def test_bounding_boxes(self):
        """Tests oracle boxes against hand-made masks"""
        sample = generate_video(TINY)
        masks = np.zeros_like(sample.gt_masks)
        masks[0, 2:5, 7:9] = True
        sample = sample.model_copy(update={"gt_masks": masks})
        boxes = sample.bounding_boxes()
        self.assertEqual(Box(x0=7, y0=2, x1=9, y1=5), boxes[0])
        self.assertIsNone(boxes[1])

    def test_per_object_amplitude(self):
        """Tests that each interest object gets its own amplitude interval
        over the shared target waveform"""
        quiet = QUIET.model_copy(update={"per_object_amplitude": True})
        cfg = TINY.model_copy(
            update={"n_interest": 2, "num_frames": 64, "signals": quiet}
        )
        separate = generate_video(cfg)
        shared = generate_video(
            cfg.model_copy(update={"signals": QUIET})
        )
        np.testing.assert_array_equal(
            shared.gt_signal.values, separate.gt_signal.values
        )
        self.assertFalse(np.array_equal(shared.frames, separate.frames))
        target = separate.target_spec
        gt = separate.gt_signal
        rng = np.random.default_rng(4)
        self.assertIs(gt.values, _object_series(rng, target, gt, False))
        values = _object_series(rng, target, gt, True)
        self.assertTrue(np.all((values >= 0) & (values <= 1)))
        self.assertFalse(np.allclose(values, gt.values))
        correlation = np.corrcoef(values, gt.values)[0, 1]
        self.assertAlmostEqual(1.0, correlation, places=6)


class TestGeneratedCorpus(unittest.TestCase):
    """Tests rate recovery on full-length generated videos"""

    @classmethod
    def setUpClass(cls) -> None:
        """Thirty 1000-frame videos, keeping only per-frame series"""
        cls.prior = FrequencyRange(min_hz=0.24, max_hz=0.54)
        cls.cfg = VideoConfig(
            num_frames=1000,
            fs=27.0,
            sp_density=0.02,
            n_distractors=2,
            target_range=cls.prior,
        )
        cls.videos = []
        for seed in range(100, 130):
            sample = generate_video(cls.cfg.model_copy(update={"seed": seed}))
            mask_means = np.empty(sample.num_frames)
            last = float(sample.frames[0].mean())
            for t, (frame, mask) in enumerate(
                zip(sample.frames, sample.gt_masks)
            ):
                if mask.any():
                    last = float(frame[mask].mean())
                mask_means[t] = last
            boxes = fill_missing_boxes(sample.bounding_boxes())
            box_means = mean_roi_signal(sample.frames, boxes, cls.cfg.fs)
            freq_hz = sample.target_spec.freq_hz
            cls.videos.append(
                (freq_hz, sample.gt_rate, mask_means, box_means)
            )

    def test_spectral_separation(self):
        """Tests that the mean over interest masks peaks at the target
        frequency inside the prior"""
        resolution = self.cfg.fs / self.cfg.num_frames
        hits = 0
        for freq_hz, _, mask_means, _ in self.videos:
            series = TimeSeries(values=mask_means, fs=self.cfg.fs)
            found = dominant_frequency(series, self.prior)
            hits += abs(found - freq_hz) <= resolution
        self.assertGreaterEqual(hits, 27)

    def test_oracle_box_baseline(self):
        """Tests the default DSP chain on oracle boxes against the planted
        rates"""
        config = DspConfig(rate_band=self.prior)
        errors = [
            abs(baseline_rate(box_means, config).rate - gt_rate)
            for _, gt_rate, _, box_means in self.videos
        ]
        self.assertLessEqual(np.mean(errors), 1.7)


class TestStreaming(unittest.TestCase):
    """Tests stream_samples"""

    def test_stream_seeds(self):
        """Tests that the stream walks consecutive seeds"""
        stream = stream_samples(TINY, start_seed=20)
        for seed in (20, 21):
            expected = generate_video(TINY.model_copy(update={"seed": seed}))
            np.testing.assert_array_equal(
                expected.frames, next(stream).frames
            )


if __name__ == "__main__":
    unittest.main()
