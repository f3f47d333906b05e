"""Binaural oracle, rasterization and deterministic dataset generation."""

import hashlib
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from binauralnet import scenegen as sg
from binauralnet import signal as sig
from binauralnet.scenegen import GenConfig, SceneError, SceneSpec, SourceSpec


def sine_source(az, dist=1.0, seed=0):
    params = {"freqs": [220.0, 440.0, 660.0], "amps": [0.3, 0.1, 0.05], "phases": [0.1, 0.2, 0.3]}
    return SourceSpec(az, dist, "sine", params, seed)


def noise_source(az, dist=1.0, seed=0):
    return SourceSpec(az, dist, "noise", {"low": 300.0, "high": 600.0, "rms": 0.15}, seed)


def random_scenes(count, seed=0, max_distance=10.0):
    rng = np.random.default_rng(seed)
    cfg = GenConfig()
    out = []
    for _ in range(count):
        scene = sg.random_scene(cfg, rng)
        srcs = tuple(SourceSpec(s.azimuth, min(s.distance, max_distance), s.generator, s.params, s.seed)
                     for s in scene.sources)
        out.append(SceneSpec(srcs, scene.duration, scene.room_gain, scene.seed))
    return out


# ---------------------------------------------------------------------------
# Pan law and delay
# ---------------------------------------------------------------------------


class TestPanAndDelay:
    def test_thirty_degrees_two_meters(self):
        gl, gr = sg.pan_gains(30.0)
        assert (gl / 2, gr / 2) == pytest.approx((0.25, 0.4330127), abs=1e-7)
        tau = sg.interaural_delay(30.0)
        assert tau == pytest.approx(262.39e-6, abs=0.01e-6)
        assert tau * 16000 == pytest.approx(4.198, abs=1e-3)

    @settings(max_examples=200, deadline=None)
    @given(az=st.floats(-90, 90))
    def test_constant_power_and_mirror(self, az):
        gl, gr = sg.pan_gains(az)
        assert gl * gl + gr * gr == pytest.approx(1.0, abs=1e-12)
        assert sg.pan_gains(-az) == (gr, gl)
        assert sg.interaural_delay(-az) == -sg.interaural_delay(az)

    def test_center_gains_equal(self):
        gl, gr = sg.pan_gains(0.0)
        assert gl == gr

    def test_delay_kernel_unit_dc_and_size(self):
        _, h = sg.fractional_delay_taps(4.2)
        assert h.size == sg.DELAY_TAPS
        assert h.sum() == pytest.approx(1.0, abs=1e-12)

    def test_zero_delay_is_passthrough(self, rng):
        x = rng.standard_normal(100)
        np.testing.assert_array_equal(sg.fractional_delay(x, 0.0), x)

    def test_integer_delay_is_a_shift(self, rng):
        x = rng.standard_normal(200)
        y = sg.fractional_delay(x, 5.0)
        np.testing.assert_allclose(y[5:], x[:-5], atol=1e-12)

    @pytest.mark.parametrize("freq", [200.0, 1000.0, 4000.0])
    @pytest.mark.parametrize("delay", [0.3, 4.2, 7.9])
    def test_fractional_delay_matches_shifted_sine(self, freq, delay):
        n = np.arange(4000)
        y = sg.fractional_delay(np.sin(2 * np.pi * freq * n / 16000), delay)
        ref = np.sin(2 * np.pi * freq * (n - delay) / 16000)
        assert np.abs(y[100:-100] - ref[100:-100]).max() < 1e-3


# ---------------------------------------------------------------------------
# Binaural rendering
# ---------------------------------------------------------------------------


class TestRenderBinaural:
    def test_center_source_channels_identical(self):
        w = sg.render_binaural(SceneSpec((sine_source(0.0),)))
        np.testing.assert_array_equal(w.left, w.right)

    def test_hard_right_silences_left(self):
        w = sg.render_binaural(SceneSpec((noise_source(90.0),)))
        ratio_db = 20 * np.log10(np.linalg.norm(w.left) / np.linalg.norm(w.right))
        assert ratio_db < -60

    def test_duration_in_samples(self):
        w = sg.render_binaural(SceneSpec((sine_source(10.0),), duration=0.63))
        assert w.samples.shape == (2, 10080)

    def test_right_source_reaches_right_ear_first(self):
        w = sg.render_binaural(SceneSpec((noise_source(60.0),)))
        lags = np.arange(-20, 21)
        xc = [np.dot(w.left[20:-20], np.roll(w.right, k)[20:-20]) for k in lags]
        # left lags right by tau = 0.18 sin(60) / 343 * 16000 ~ 7.3 samples
        assert lags[int(np.argmax(xc))] in (7, 8)

    def test_mirror_equivariance_random_scenes(self):
        worst = 0.0
        for scene in random_scenes(100, seed=11):
            a = sg.render_binaural(scene)
            b = sg.render_binaural(scene.mirrored())
            worst = max(worst, np.abs(a.samples[::-1] - b.samples).max())
        assert worst <= 1e-6

    def test_energy_halves_when_distance_doubles(self):
        for scene in random_scenes(20, seed=5, max_distance=5.0):
            a = sg.render_binaural(scene)
            b = sg.render_binaural(scene.with_distance_scale(2.0))
            ra = np.sqrt(np.mean(a.samples ** 2, axis=1))
            rb = np.sqrt(np.mean(b.samples ** 2, axis=1))
            np.testing.assert_allclose(rb / ra, 0.5, rtol=0.01)

    def test_oracle_consistency_with_mono_split(self):
        for scene in random_scenes(20, seed=9):
            if all(abs(s.azimuth) <= 5 for s in scene.sources):
                continue
            w = sg.render_binaural(scene)
            x = sg.mono_mix(w)
            split = sig.Waveform(np.stack([x.samples[0] / 2, x.samples[0] / 2]), w.sample_rate)
            yl, yr = sig.stft(w.left), sig.stft(w.right)
            half = sig.stft(split.left)
            assert sig.stft_distance((yl, yr), (yl, yr)) == 0.0
            assert sig.env_distance(w, w) == 0.0
            assert sig.stft_distance((half, half), (yl, yr)) > 0
            assert sig.env_distance(split, w) > 0

    def test_invalid_ranges(self):
        with pytest.raises(SceneError):
            sine_source(91.0)
        with pytest.raises(SceneError):
            sine_source(0.0, dist=0.5)
        with pytest.raises(SceneError):
            SourceSpec(0.0, 1.0, "chirp")
        with pytest.raises(SceneError):
            SceneSpec(())
        with pytest.raises(SceneError):
            SceneSpec(tuple(sine_source(a) for a in (-60, -20, 20, 60)))

    def test_source_signal_seeded(self):
        a = sg.source_signal(noise_source(0, seed=4), 5000, 16000)
        b = sg.source_signal(noise_source(0, seed=4), 5000, 16000)
        c = sg.source_signal(noise_source(0, seed=5), 5000, 16000)
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, c)
        assert np.sqrt(np.mean(a ** 2)) == pytest.approx(0.15, rel=1e-9)

    def test_noise_band_limited(self):
        x = sg.source_signal(noise_source(0), 16000, 16000)
        spec = np.abs(np.fft.rfft(x))
        freqs = np.fft.rfftfreq(16000, 1 / 16000)
        outside = spec[(freqs < 300) | (freqs > 600)]
        assert outside.max() < 1e-9 * spec.max()


class TestMonoMix:
    def test_equal_channels_double(self, rng):
        s = rng.standard_normal(500)
        x = sg.mono_mix(sig.Waveform(np.stack([s, s]), 16000))
        np.testing.assert_array_equal(x.samples[0], 2 * s)

    def test_mono_input_rejected(self, rng):
        with pytest.raises(sig.ShapeError):
            sg.mono_mix(sig.Waveform(rng.standard_normal((1, 500)), 16000))

    def test_stft_linearity_and_recombination(self):
        w = sg.render_binaural(SceneSpec((sine_source(-40.0, 2.0), noise_source(35.0, 3.0))))
        x = sg.mono_mix(w)
        yl, yr = sig.stft(w.left), sig.stft(w.right)
        a = sig.stft(x)
        np.testing.assert_allclose(a.planes, yl.planes + yr.planes, atol=1e-12)
        left, right = sig.recombine(a, sig.stft(w.left - w.right))
        np.testing.assert_allclose(left.planes, yl.planes, atol=1e-6)
        np.testing.assert_allclose(right.planes, yr.planes, atol=1e-6)


# ---------------------------------------------------------------------------
# Rasterization
# ---------------------------------------------------------------------------


class TestRaster:
    def test_mirror_flips_image_and_depth(self):
        for scene in random_scenes(30, seed=2):
            np.testing.assert_array_equal(sg.render_image(scene.mirrored()), sg.render_image(scene)[:, ::-1])
            np.testing.assert_array_equal(sg.render_depth(scene.mirrored()), sg.render_depth(scene)[:, ::-1])

    def test_background_constant(self):
        img = sg.render_image(SceneSpec((sine_source(80.0, 10.0),)))
        np.testing.assert_array_equal(img[:, :20], np.broadcast_to(sg.BACKGROUND_RGB, (112, 20, 3)))

    def test_center_source_blob_centered(self):
        img = sg.render_image(SceneSpec((noise_source(0.0, 2.0),))).astype(float)
        np.testing.assert_array_equal(img, img[:, ::-1])
        weight = np.abs(img - np.asarray(sg.BACKGROUND_RGB)).sum(axis=(0, 2))
        cols = np.arange(112) + 0.5
        assert (weight * cols).sum() / weight.sum() == pytest.approx(56.0, abs=1e-9)

    def test_blob_shrinks_with_distance(self):
        near = sg.render_depth(SceneSpec((sine_source(0.0, 2.0),)))
        far = sg.render_depth(SceneSpec((sine_source(0.0, 4.0),)))
        assert (near < 20).sum() > (far < 20).sum() > 0

    def test_color_keyed_to_generator(self):
        img = sg.render_image(SceneSpec((sine_source(0.0, 1.0),)))
        assert tuple(img[56, 56]) == pytest.approx(sg.GENERATOR_RGB["sine"], abs=3)
        img = sg.render_image(SceneSpec((noise_source(0.0, 1.0),)))
        assert tuple(img[56, 56]) == pytest.approx(sg.GENERATOR_RGB["noise"], abs=3)

    def test_depth_values(self):
        d = sg.render_depth(SceneSpec((sine_source(0.0, 3.0),)))
        assert d[56, 56] == 3.0
        assert d[0, 0] == sg.FAR_DEPTH
        assert set(np.unique(d)) == {3.0, sg.FAR_DEPTH}

    def test_overlap_nearest_wins(self):
        scene = SceneSpec((sine_source(0.0, 5.0), noise_source(2.0, 2.0)))
        d = sg.render_depth(scene)
        assert d[56, 57] == 2.0
        d_rev = sg.render_depth(SceneSpec(scene.sources[::-1]))
        np.testing.assert_array_equal(d, d_rev)

    def test_size_must_be_patch_multiple(self):
        with pytest.raises(SceneError):
            sg.render_image(SceneSpec((sine_source(0.0),)), size=(100, 112))
        with pytest.raises(SceneError):
            sg.render_depth(SceneSpec((sine_source(0.0),)), size=(112, 120), patch_size=16)

    def test_depth_png_round_trip(self, tmp_path):
        d = sg.render_depth(SceneSpec((sine_source(10.0, 2.345),)))
        sg.save_png_depth(tmp_path / "d.png", d)
        np.testing.assert_allclose(sg.load_png_depth(tmp_path / "d.png"), d, atol=5e-4)


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------


def tree_digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(p.relative_to(root).as_posix().encode())
            h.update(p.read_bytes())
    return h.hexdigest()


SMALL = GenConfig(image_size=(32, 32), duration=0.1)


class TestDataset:
    def test_byte_identical_across_runs(self, tmp_path):
        sg.make_dataset(SMALL, tmp_path / "a", counts=(6, 2, 2), seed=7)
        sg.make_dataset(SMALL, tmp_path / "b", counts=(6, 2, 2), seed=7)
        assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")
        sg.make_dataset(SMALL, tmp_path / "c", counts=(6, 2, 2), seed=8)
        assert tree_digest(tmp_path / "a") != tree_digest(tmp_path / "c")

    def test_counts_ids_and_durations(self, tmp_path):
        m = sg.make_dataset(SMALL, tmp_path, counts=(100, 20, 20), seed=1)
        ids = [e["id"] for e in m["samples"]]
        assert len(ids) == len(set(ids)) == 140
        assert [sum(e["split"] == s for e in m["samples"]) for s in sg.SPLITS] == [100, 20, 20]
        for e in m["samples"][:10]:
            assert sig.load_wav(tmp_path / e["stereo"]).num_samples == round(SMALL.duration * 16000)
        assert sg.load_manifest(tmp_path)["config"] == SMALL.to_dict()

    def test_single_sample_regenerates_in_isolation(self, tmp_path):
        sg.make_dataset(SMALL, tmp_path, counts=(5, 1, 3), seed=21)
        for index in (0, 4, 8):
            sid = sg.sample_id(index)
            stored = json.loads((tmp_path / f"{sid}_scene.json").read_text())
            assert sg.make_sample(SMALL, 21, index).to_dict() == stored
            (tmp_path / "iso").mkdir(exist_ok=True)
            sg.write_sample(sg.make_sample(SMALL, 21, index), SMALL, tmp_path / "iso", sid)
            for suffix in ("_stereo.wav", "_frame.png", "_depth.png"):
                assert (tmp_path / "iso" / (sid + suffix)).read_bytes() == (tmp_path / (sid + suffix)).read_bytes()

    def test_source_count_and_azimuth_gap(self):
        cfg = GenConfig(max_sources=2)
        for i in range(200):
            scene = sg.make_sample(cfg, 7, i)
            assert 1 <= len(scene.sources) <= 2
            az = [s.azimuth for s in scene.sources]
            if len(az) == 2:
                assert abs(az[0] - az[1]) >= cfg.min_azimuth_gap

    def test_scene_json_round_trip(self):
        scene = sg.make_sample(GenConfig(), 3, 17)
        assert SceneSpec.from_dict(json.loads(json.dumps(scene.to_dict()))) == scene

    def test_manifest_missing_file_detected(self, tmp_path):
        sg.make_dataset(SMALL, tmp_path, counts=(2, 0, 0), seed=0)
        (tmp_path / "s000001_depth.png").unlink()
        with pytest.raises(FileNotFoundError, match="s000001"):
            sg.load_manifest(tmp_path)

    def test_unknown_config_key_rejected(self):
        with pytest.raises(SceneError):
            GenConfig.from_dict({"colour": 1})

    def test_config_validation(self):
        with pytest.raises(SceneError):
            GenConfig(image_size=(100, 100))
        with pytest.raises(SceneError):
            GenConfig(duration=0.01)
        with pytest.raises(SceneError):
            GenConfig(min_sources=2, max_sources=1)

    def test_sample_streams_independent_of_split_sizes(self):
        assert sg.make_sample(SMALL, 5, 3) == sg.make_sample(SMALL, 5, 3)
        assert sg.make_sample(SMALL, 5, 3) != sg.make_sample(SMALL, 5, 4)
        assert math.isclose(sg.make_sample(SMALL, 5, 3).duration, SMALL.duration)
