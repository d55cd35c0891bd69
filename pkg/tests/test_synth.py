import numpy as np
import pytest

from pix2affect.errors import ConfigError
from pix2affect.synth import SynthConfig, latent_for_frames, synth_corpus
from pix2affect.traces import normalize_trace, align_to_frames


def small_cfg(**kw):
    defaults = dict(num_videos=3, duration_s=8.0, seed=5)
    defaults.update(kw)
    return SynthConfig(**defaults)


class TestSynthConfig:
    def test_region_over_budget(self):
        with pytest.raises(ConfigError):
            SynthConfig(signal_region=(0, 36, 0, 128))  # half the frame

    def test_region_out_of_frame(self):
        with pytest.raises(ConfigError):
            SynthConfig(signal_region=(0, 80, 0, 10))

    def test_zero_videos(self):
        with pytest.raises(ConfigError):
            SynthConfig(num_videos=0)

    def test_negative_noise(self):
        with pytest.raises(ConfigError):
            SynthConfig(noise_sigma=-0.1)

    def test_default_region_within_budget(self):
        cfg = SynthConfig()
        r0, r1, c0, c1 = cfg.signal_region
        assert (r1 - r0) * (c1 - c0) <= 0.10 * 72 * 128


class TestDeterminism:
    def test_same_seed_bit_identical(self):
        a_clips, a_traces = synth_corpus(small_cfg())
        b_clips, b_traces = synth_corpus(small_cfg())
        for ca, cb in zip(a_clips, b_clips):
            assert (ca.frames == cb.frames).all()
        for ta, tb in zip(a_traces, b_traces):
            assert (ta.values == tb.values).all()

    def test_different_seed_differs(self):
        a_clips, _ = synth_corpus(small_cfg(seed=5))
        b_clips, _ = synth_corpus(small_cfg(seed=6))
        assert not (a_clips[0].frames == b_clips[0].frames).all()


class TestNoiselessCase:
    def test_per_frame_arousal_recovers_latent(self):
        cfg = small_cfg(noise_sigma=0.0, annotator_lag_s=0.0, annotator_noise=0.0)
        clips, traces, latents = synth_corpus(cfg, return_latent=True)
        for clip, trace, latent in zip(clips, traces, latents):
            norm = normalize_trace(trace)
            per_frame = align_to_frames(norm, clip.frames.shape[0])
            lat_norm = (latent - latent.min()) / (latent.max() - latent.min())
            expected = latent_for_frames(lat_norm, clip.frames.shape[0])
            np.testing.assert_allclose(per_frame, expected, atol=1e-6)


class TestPlantedSignal:
    def test_region_intensity_tracks_latent(self):
        cfg = small_cfg(num_videos=4, duration_s=20.0, noise_sigma=0.05)
        clips, traces, latents = synth_corpus(cfg, return_latent=True)
        r0, r1, c0, c1 = cfg.signal_region
        for clip, latent in zip(clips, latents):
            region_mean = clip.frames[:, r0:r1, c0:c1].mean(axis=(1, 2))
            lat = latent_for_frames(latent, clip.frames.shape[0])
            corr = np.corrcoef(region_mean, lat)[0, 1]
            assert corr >= 0.9

    def test_drift_increases_outnumber_decreases(self):
        for seed in range(5):
            cfg = small_cfg(num_videos=4, duration_s=30.0, seed=seed)
            _, _, latents = synth_corpus(cfg, return_latent=True)
            for latent in latents:
                steps = np.diff(latent)
                assert (steps > 0).sum() > (steps < 0).sum()

    def test_traces_are_unbounded_raw(self):
        _, traces = synth_corpus(small_cfg(num_videos=6, duration_s=10.0))
        # affine rescales should leave values outside [0,1] for most videos
        outside = sum(1 for t in traces
                      if t.values.min() < 0 or t.values.max() > 1)
        assert outside >= 4

    def test_pixels_in_unit_interval(self):
        clips, _ = synth_corpus(small_cfg())
        for clip in clips:
            assert float(clip.frames.min()) >= 0.0
            assert float(clip.frames.max()) <= 1.0

    def test_annotation_count_matches_rate(self):
        _, traces = synth_corpus(small_cfg(duration_s=16.0))
        assert all(len(t.times) == 64 for t in traces)
