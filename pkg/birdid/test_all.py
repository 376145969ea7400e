import argparse
import json
import math
import os
import tempfile
import unittest

import numpy as np
import torch
import torch.nn.functional as F
from numpy.testing import assert_allclose, assert_array_equal
from scipy.io import wavfile
from sklearn.metrics import average_precision_score

from birdid.config import config_matches, load_defaults, parse_overrides, resolve_config, save_config
from birdid.datasets.audio import (AudioClip, SynthSpec, default_synth_spec, load_wav, read_corpus_manifest,
                                   synth_corpus, synthesize_clip, write_wav)
from birdid.datasets.preprocess import (FrameSequence, Syllable, frame_energies, frame_signal, pre_emphasize,
                                        preprocess_clip, read_segments, segment_syllables, write_segments)
from birdid.datasets.samples import (SampleEntry, SampleSet, SpectrogramImageDataset, SplitAssignment, batches,
                                     check_alignment, class_weights, read_manifest, read_split, split_dataset,
                                     write_manifest, write_split)
from birdid.datasets.tfr import (COLORMAP, Spectrogram, build_chirplet_dictionary, chirplet_spectrogram,
                                 colormap_indices, load_image, load_spectrogram, mel_spectrogram, render_image,
                                 save_image, save_spectrogram, stft_spectrogram, window_columns, window_spectrogram)
from birdid.eval import (EvalReport, TrainHistory, average_precision, emit_history, evaluate,
                         mean_average_precision, read_grid_summary, read_history, write_grid_summary, write_report)
from birdid.models.backbone import (build_surrogate, export_features, extract_features, extract_set_features,
                                    import_features)
from birdid.models.fusion import (CHANNELS, FeatureBank, FeatureNorm, load_bundle, predict, save_bundle,
                                  train_fe_fuse, train_re_fuse, train_tf)
from birdid.models.head import (ClassifierHead, WeightedCrossEntropy, adam_state, adam_step, build_optimizer,
                                count_trainable_params, head_forward, head_gradients, head_parameter_count,
                                load_checkpoint, save_checkpoint, wce_loss)
from birdid.util.errors import (AlignmentError, CheckpointFormatError, ConfigError, DimensionError, EmptySignalError,
                                EvaluationError, FeatureFormatError, InsufficientSamplesError,
                                InvalidSynthSpecError, LabelError, ParameterError, ProtocolError, SampleRateError,
                                ShapeError, SignalTooShortError, SpectrogramFormatError, UnknownKeyError,
                                UnsupportedFormatError, WavFormatError)
from birdid.util.misc import derive_seed, parameter_fingerprint
from birdid.util.plot_utils import plot_grid, plot_history

SR = 44100


def _clip(samples, sample_rate=SR, source_id="clip"):
    return AudioClip(samples=np.asarray(samples, dtype=np.float64), sample_rate=sample_rate, source_id=source_id)


def _frames(matrix, frame_len=None, hop=1543):
    matrix = np.atleast_2d(np.asarray(matrix))
    n = matrix.shape[1] if frame_len is None else frame_len
    return FrameSequence(frames=matrix, frame_len=n, hop=hop, offsets=np.arange(matrix.shape[0]) * hop,
                         sample_rate=SR)


def _sample_set(counts, kind="Ch", per_clip=1, root="/nonexistent"):
    entries = []
    for c, n in enumerate(counts):
        for i in range(n):
            key = "c{}_{:04d}".format(c, i)
            entries.append(SampleEntry(key=key, path=os.path.join(root, key + ".png"), class_index=c,
                                       clip_id="c{}_clip{:03d}".format(c, i // per_clip)))
    return SampleSet(entries, ["class_{}".format(c) for c in range(len(counts))], kind, 300)


def _feature_bank(num_classes=3, per_class=40, dim=16, seed=0, separation=3.0, channels=CHANNELS):
    rng = np.random.default_rng(seed)
    sample_set = _sample_set([per_class] * num_classes)
    labels = sample_set.labels
    features = {}
    for kind in channels:
        centers = rng.normal(0.0, separation, size=(num_classes, dim))
        x = centers[labels] + rng.normal(0.0, 1.0, size=(labels.size, dim))
        features[kind] = torch.from_numpy(x.astype(np.float32))
    bank = FeatureBank(keys=sample_set.keys, labels=labels, class_names=list(sample_set.class_names),
                       features=features, duration_ms=300)
    return bank, split_dataset(sample_set, seed=seed)


def _args(**overrides):
    config = dict(epochs=20, batch_size=16, hidden_dims=[16, 8], lr=0.005, verbose=False, print_freq=100)
    config.update(overrides)
    return resolve_config(overrides=config)


class AudioTester(unittest.TestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)

    def path(self, name):
        return os.path.join(self.tmp.name, name)

    def test_load_wav_scales_16bit(self):
        wavfile.write(self.path("a.wav"), SR, np.array([0, 16384, -16384], dtype=np.int16))
        clip = load_wav(self.path("a.wav"), expected_rate=SR)
        assert_array_equal(clip.samples, [0.0, 0.5, -0.5])
        self.assertEqual(clip.source_id, "a")

    def test_load_wav_averages_channels(self):
        wavfile.write(self.path("st.wav"), SR, np.array([[1.0, 0.0]], dtype=np.float32))
        assert_array_equal(load_wav(self.path("st.wav")).samples, [0.5])

    def test_load_wav_one_second(self):
        wavfile.write(self.path("s.wav"), SR, np.zeros(SR, dtype=np.int16))
        self.assertEqual(len(load_wav(self.path("s.wav"))), SR)

    def test_load_wav_errors(self):
        wavfile.write(self.path("empty.wav"), SR, np.zeros(0, dtype=np.int16))
        with self.assertRaises(EmptySignalError):
            load_wav(self.path("empty.wav"))
        with open(self.path("junk.wav"), "wb") as f:
            f.write(b"hello world, not a wave file")
        with self.assertRaises(WavFormatError):
            load_wav(self.path("junk.wav"))
        wavfile.write(self.path("i32.wav"), SR, np.zeros(10, dtype=np.int32))
        with self.assertRaises(UnsupportedFormatError):
            load_wav(self.path("i32.wav"))
        wavfile.write(self.path("22k.wav"), 22050, np.zeros(10, dtype=np.int16))
        with self.assertRaises(SampleRateError):
            load_wav(self.path("22k.wav"), expected_rate=SR)

    def test_write_then_load(self):
        rng = np.random.default_rng(0)
        clip = _clip(rng.uniform(-0.9, 0.9, 1000))
        write_wav(clip, self.path("rt.wav"))
        self.assertLessEqual(np.abs(load_wav(self.path("rt.wav")).samples - clip.samples).max(), 1.0 / 32768)

    def test_synth_spec_validation(self):
        with self.assertRaises(InvalidSynthSpecError):
            SynthSpec(templates=(), clips_per_class=1).validate()
        with self.assertRaises(InvalidSynthSpecError):
            default_synth_spec(clips_per_class=0).validate()
        default_synth_spec(num_classes=18).validate()

    def test_synth_corpus_deterministic(self):
        spec = default_synth_spec(num_classes=2, clips_per_class=2, clip_seconds=0.5)
        rows_a = synth_corpus(spec, self.path("a"))
        rows_b = synth_corpus(spec, self.path("b"))
        self.assertEqual(rows_a, rows_b)
        for rel, _ in rows_a:
            with open(os.path.join(self.path("a"), rel), "rb") as fa, open(os.path.join(self.path("b"), rel),
                                                                          "rb") as fb:
                self.assertEqual(fa.read(), fb.read())
        listed = read_corpus_manifest(os.path.join(self.path("a"), "manifest.csv"))
        self.assertEqual([label for _, label in listed], [label for _, label in rows_a])
        self.assertTrue(all(os.path.isabs(p) and os.path.exists(p) for p, _ in listed))

    def test_synth_corpus_size(self):
        spec = default_synth_spec(num_classes=4, clips_per_class=30, clip_seconds=0.3, syllable_ms=(100, 150))
        rows = synth_corpus(spec, self.path("corpus"))
        self.assertEqual(len(rows), 120)
        labels, counts = np.unique([label for _, label in rows], return_counts=True)
        self.assertEqual(len(labels), 4)
        self.assertTrue(np.all(counts == 30))

    def test_noiseless_clip_silent_outside_syllables(self):
        spec = default_synth_spec(noise_level=0.0)
        signal = synthesize_clip(spec, 0, np.random.default_rng(3))
        syllable_len = int(round(spec.templates[0].duration_ms / 1000.0 * SR))
        self.assertLessEqual(np.count_nonzero(signal), spec.max_syllables * syllable_len)
        self.assertLessEqual(np.abs(signal).max(), 0.9 + 1e-12)


class PreprocessTester(unittest.TestCase):

    def test_pre_emphasis_examples(self):
        assert_allclose(pre_emphasize(_clip([1.0, 1.0, 1.0])).samples, [1.0, 0.05, 0.05], atol=1e-12)
        assert_allclose(pre_emphasize(_clip([1.0, 0.0, 0.0])).samples, [1.0, -0.95, 0.0], atol=1e-12)
        assert_array_equal(pre_emphasize(_clip(np.zeros(5))).samples, np.zeros(5))
        with self.assertRaises(ParameterError):
            pre_emphasize(_clip([1.0]), lam=1.0)

    def test_pre_emphasis_linear(self):
        rng = np.random.default_rng(1)
        a, b = rng.standard_normal(50), rng.standard_normal(50)
        lhs = pre_emphasize(_clip(2.0 * a - 3.0 * b)).samples
        rhs = 2.0 * pre_emphasize(_clip(a)).samples - 3.0 * pre_emphasize(_clip(b)).samples
        assert_allclose(lhs, rhs, atol=1e-12)

    def test_framing_arithmetic(self):
        frames = frame_signal(_clip(np.ones(SR)))
        self.assertEqual(frames.frame_len, 2205)
        self.assertEqual(frames.hop, 1543)
        self.assertEqual(len(frames), 28)
        assert_array_equal(frames.offsets[:3], [0, 1543, 3086])
        self.assertAlmostEqual(frames.frames[0, 0], 0.08, places=12)
        self.assertAlmostEqual(frames.time_step, 1543 / SR)

    def test_framing_too_short(self):
        with self.assertRaises(SignalTooShortError):
            frame_signal(_clip(np.ones(2204)))

    def test_frame_energies(self):
        n = 2205
        t = np.arange(n) / SR
        energy = frame_energies(frame_signal(_clip(np.sin(2 * np.pi * 1000 * t))))[0]
        self.assertAlmostEqual(energy / (0.3974 * n / 2), 1.0, delta=1e-2)
        double = frame_energies(frame_signal(_clip(2 * np.sin(2 * np.pi * 1000 * t))))[0]
        self.assertAlmostEqual(double / energy, 4.0, places=9)
        self.assertEqual(frame_energies(frame_signal(_clip(np.zeros(n))))[0], 0.0)

    def test_segment_single_burst(self):
        syllables = segment_syllables([1, 1, 50, 60, 55, 1, 1, 1])
        self.assertEqual([(s.start_frame, s.end_frame) for s in syllables], [(2, 4)])
        self.assertEqual(syllables[0].peak_energy, 60.0)

    def test_segment_merges_short_gap(self):
        syllables = segment_syllables([1, 1, 50, 60, 1, 55, 50, 1, 1, 1, 1, 1])
        self.assertEqual([(s.start_frame, s.end_frame) for s in syllables], [(2, 6)])

    def test_segment_silence(self):
        self.assertEqual(segment_syllables(np.zeros(10)), [])
        self.assertEqual(segment_syllables([]), [])

    def test_segment_scale_invariant(self):
        rng = np.random.default_rng(2)
        energies = rng.exponential(1.0, 40)
        energies[10:15] += 40.0
        energies[25:29] += 30.0
        a = segment_syllables(energies)
        b = segment_syllables(7.5 * energies)
        self.assertEqual([(s.start_frame, s.end_frame) for s in a], [(s.start_frame, s.end_frame) for s in b])
        self.assertTrue(all(s.num_frames >= 2 for s in a))

    def test_segment_sample_positions(self):
        s = segment_syllables([1, 1, 50, 60, 55, 1, 1, 1], hop=1543, frame_len=2205)[0]
        self.assertEqual((s.start_sample, s.end_sample), (2 * 1543, 4 * 1543 + 2204))

    def test_segments_file(self):
        syllables = segment_syllables([1, 1, 50, 60, 55, 1, 1, 1, 70, 80, 1, 1], hop=1543, frame_len=2205)
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "segments.csv")
            write_segments([("clip_a", s) for s in syllables], path)
            back = read_segments(path, hop=1543, frame_len=2205)
        self.assertEqual(list(back), ["clip_a"])
        self.assertEqual([(s.start_frame, s.end_frame) for s in back["clip_a"]],
                         [(s.start_frame, s.end_frame) for s in syllables])

    def test_preprocess_clip_finds_tone_burst(self):
        samples = 0.001 * np.random.default_rng(4).standard_normal(2 * SR)
        burst = slice(SR, SR + SR // 5)
        samples[burst] += 0.5 * np.sin(2 * np.pi * 3000.0 * np.arange(SR // 5) / SR)
        frames, energies, syllables = preprocess_clip(_clip(samples), resolve_config())
        self.assertEqual((frames.frame_len, frames.hop), (2205, 1543))
        self.assertEqual(energies.shape, (len(frames),))
        self.assertEqual(len(syllables), 1)
        self.assertLess(syllables[0].start_sample, burst.stop)
        self.assertGreater(syllables[0].end_sample, burst.start)


class TransformTester(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        cls.dictionary = build_chirplet_dictionary(SR, 2205)

    def test_stft_parseval(self):
        rng = np.random.default_rng(0)
        frames = _frames(rng.standard_normal((3, 2205)))
        spec = stft_spectrogram(frames, 4096)
        self.assertEqual(spec.num_rows, 2049)
        power = spec.values ** 2
        one_sided = power[0] + 2 * power[1:-1].sum(axis=0) + power[-1]
        assert_allclose(one_sided / 4096, np.sum(frames.frames ** 2, axis=1), rtol=1e-6)

    def test_stft_sine_peak(self):
        t = np.arange(SR) / SR
        spec = stft_spectrogram(frame_signal(_clip(np.sin(2 * np.pi * 440 * t))))
        self.assertTrue(np.all(spec.values.argmax(axis=0) == 41))

    def test_stft_dc_and_zeros(self):
        self.assertEqual(stft_spectrogram(_frames(np.ones((1, 2205)))).values[:, 0].argmax(), 0)
        self.assertFalse(stft_spectrogram(_frames(np.zeros((2, 2205)))).values.any())
        with self.assertRaises(ParameterError):
            stft_spectrogram(_frames(np.ones((1, 2205))), 3000)

    def test_mel_rows_and_amplitude_invariance(self):
        rng = np.random.default_rng(4)
        frames = rng.standard_normal((4, 2205))
        a = mel_spectrogram(_frames(frames))
        b = mel_spectrogram(_frames(3.7 * frames))
        self.assertEqual(a.values.shape, (31, 4))
        assert_allclose(a.values, b.values, atol=1e-6)
        with self.assertRaises(ParameterError):
            mel_spectrogram(_frames(frames), num_mel_filters=20)

    def test_mel_silence(self):
        assert_allclose(mel_spectrogram(_frames(np.zeros((2, 2205)))).values, 0.0, atol=1e-9)

    def test_chirplet_dictionary(self):
        d = self.dictionary
        self.assertEqual(len(d), 320)
        self.assertEqual(d.atoms.shape, (64, 5, 2205))
        assert_allclose(np.linalg.norm(d.atoms, axis=2), 1.0, atol=1e-9)
        assert_array_equal(d.rates[:, 2], 0.0)
        self.assertTrue(np.all(np.diff(d.centers) > 0))
        self.assertFalse(d.atoms.flags.writeable)
        single = build_chirplet_dictionary(SR, 2205, num_channels=8, num_rates=1)
        assert_array_equal(single.rates, 0.0)
        with self.assertRaises(ParameterError):
            build_chirplet_dictionary(SR, 2205, num_rates=4)

    def test_chirplet_matched_atom(self):
        d = self.dictionary
        frame = np.real(d.atoms[30, 3])
        spec = chirplet_spectrogram(_frames(frame[None]), d)
        self.assertEqual(spec.values[:, 0].argmax(), 30)
        responses = np.abs(d.atoms[30].conj() @ frame)
        self.assertEqual(responses.argmax(), 3)
        self.assertLessEqual(spec.values.max(), np.linalg.norm(frame) + 1e-12)

    def test_chirplet_tone_prefers_zero_rate(self):
        d = self.dictionary
        t = (np.arange(2205) - 1102.0) / SR
        tone = np.cos(2 * np.pi * d.centers[20] * t)
        self.assertEqual(np.abs(d.atoms[20].conj() @ tone).argmax(), 2)

    def test_chirplet_zeros(self):
        self.assertFalse(chirplet_spectrogram(_frames(np.zeros((3, 2205))), self.dictionary).values.any())

    def test_window_columns(self):
        step = 1543 / SR
        self.assertEqual([window_columns(d, step) for d in (100, 300, 500)], [3, 9, 14])
        self.assertEqual(window_columns(35, step), 1)
        with self.assertRaises(ParameterError):
            window_columns(10, step)

    def test_window_pads_left_edge(self):
        spec = Spectrogram(np.arange(100, dtype=float).reshape(5, 20), "Spe", 1543 / SR)
        segment, = window_spectrogram(spec, [Syllable(0, 0, 0, 2204, 1.0)], 300)
        self.assertEqual(segment.values.shape, (5, 9))
        assert_array_equal(segment.values[:, :4], 0.0)
        assert_array_equal(segment.values[:, 4:], spec.values[:, :5])

    def test_window_centroid(self):
        spec = Spectrogram(np.arange(100, dtype=float).reshape(5, 20), "Mel", 1543 / SR)
        weights = np.zeros(20)
        weights[10] = 1.0
        segment, = window_spectrogram(spec, [Syllable(8, 12, 0, 0, 1.0)], 300, weights=weights)
        assert_array_equal(segment.values, spec.values[:, 6:15])
        self.assertEqual(window_spectrogram(spec, [], 300), [])

    def test_window_tiles(self):
        spec = Spectrogram(np.arange(100, dtype=float).reshape(5, 20), "Ch", 1543 / SR)
        tiles = window_spectrogram(spec, [Syllable(2, 11, 0, 0, 1.0)], 100, mode="tile")
        self.assertEqual([t.source for t in tiles], [(0, 0), (0, 1), (0, 2), (0, 3)])
        assert_array_equal(tiles[-1].values, spec.values[:, 11:14])

    def test_render_constant(self):
        image = render_image(Spectrogram(np.full((6, 9), 5.0), "Spe", 0.035), "clip", 300)
        self.assertEqual(image.pixels.shape, (224, 224, 3))
        self.assertEqual(image.pixels.dtype, np.float32)
        assert_allclose(image.pixels, np.broadcast_to(COLORMAP[0], (224, 224, 3)), atol=1e-6)
        self.assertEqual(image.key, "clip_s000_w00")

    def test_render_orientation(self):
        values = np.zeros((6, 4))
        values[5] = 1.0
        pixels = render_image(Spectrogram(values, "Spe", 0.035)).pixels
        assert_allclose(pixels[0, 0], COLORMAP[255], atol=1e-6)
        assert_allclose(pixels[223, 0], COLORMAP[0], atol=1e-6)
        self.assertTrue(pixels.min() >= 0.0 and pixels.max() <= 1.0)

    def test_colormap_indices_monotonic(self):
        indices = colormap_indices(np.tile(np.arange(10.0), (4, 1)))
        self.assertTrue(np.all(np.diff(indices, axis=1) >= 0))
        self.assertEqual((indices.min(), indices.max()), (0, 255))

    def test_image_file(self):
        rng = np.random.default_rng(5)
        image = render_image(Spectrogram(rng.random((8, 9)), "Ch", 0.035))
        with tempfile.TemporaryDirectory() as tmp:
            save_image(image, os.path.join(tmp, "img.png"))
            pixels = load_image(os.path.join(tmp, "img.png"))
        self.assertLessEqual(np.abs(pixels - image.pixels).max(), 0.5 / 255 + 1e-6)

    def test_spectrogram_file(self):
        rng = np.random.default_rng(6)
        spec = Spectrogram(rng.random((31, 12)), "Mel", 1543 / SR)
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "x.spec")
            save_spectrogram(spec, path)
            back = load_spectrogram(path)
            self.assertEqual(back.kind, "Mel")
            self.assertAlmostEqual(back.time_step, spec.time_step)
            assert_allclose(back.values, spec.values, rtol=1e-6)
            with open(path, "rb") as f:
                blob = f.read()
            with open(path, "wb") as f:
                f.write(blob[:-3])
            with self.assertRaises(SpectrogramFormatError):
                load_spectrogram(path)
            with open(path, "wb") as f:
                f.write(b"NOPE" + blob[4:])
            with self.assertRaises(SpectrogramFormatError):
                load_spectrogram(path)


class DatasetTester(unittest.TestCase):

    def test_split_single_class(self):
        split = split_dataset(_sample_set([100]), seed=3)
        self.assertEqual((len(split.train), len(split.val), len(split.test)), (80, 10, 10))
        self.assertEqual(len(split), 100)

    def test_split_per_class(self):
        s = _sample_set([10, 10])
        split = split_dataset(s, seed=0)
        assert_array_equal(s.class_counts(split.train), [8, 8])
        assert_array_equal(s.class_counts(split.val), [1, 1])
        assert_array_equal(s.class_counts(split.test), [1, 1])

    def test_split_seed_sweep(self):
        s = _sample_set([10, 23, 7])
        expected = {"train": [8, 19, 5], "val": [1, 2, 1], "test": [1, 2, 1]}
        for seed in range(100):
            split = split_dataset(s, seed=seed)
            portions = [set(split.portion(name)) for name in ("train", "val", "test")]
            self.assertEqual(set.union(*portions), set(range(len(s))))
            self.assertEqual(sum(len(p) for p in portions), len(s))
            for name in expected:
                assert_array_equal(s.class_counts(split.portion(name)), expected[name])
        self.assertEqual(split_dataset(s, seed=11), split_dataset(s, seed=11))

    def test_split_by_clip(self):
        s = _sample_set([20, 20], per_clip=2)
        split = split_dataset(s, seed=5, by_clip=True)
        owner = {}
        for name in ("train", "val", "test"):
            for i in split.portion(name):
                clip = s.entries[i].clip_id
                self.assertEqual(owner.setdefault(clip, name), name)
        assert_array_equal(s.class_counts(split.train), [16, 16])

    def test_split_needs_three_per_class(self):
        with self.assertRaises(InsufficientSamplesError) as ctx:
            split_dataset(_sample_set([10, 2]))
        self.assertEqual(ctx.exception.class_name, "class_1")

    def test_class_weights(self):
        assert_allclose(class_weights(_sample_set([10, 10])).omega, [1.0, 1.0])
        assert_allclose(class_weights(_sample_set([10, 30])).omega, [2.0, 2.0 / 3.0])
        assert_array_equal(class_weights(_sample_set([10, 30]), "uniform").omega, [1.0, 1.0])
        rng = np.random.default_rng(8)
        for _ in range(20):
            counts = rng.integers(1, 60, size=rng.integers(2, 10))
            omega = class_weights(_sample_set(counts)).omega
            self.assertAlmostEqual(float(np.sum(counts * omega)), float(counts.sum()), delta=1e-9)

    def test_batches(self):
        out = batches(range(120), 50, epoch_seed=4)
        self.assertEqual([len(b) for b in out], [50, 50, 20])
        self.assertEqual(sorted(i for b in out for i in b), list(range(120)))
        self.assertEqual(out, batches(range(120), 50, epoch_seed=4))
        self.assertEqual(batches([], 50), [])

    def test_alignment(self):
        a = _sample_set([3, 3], kind="Ch")
        b = _sample_set([3, 3], kind="Mel")
        check_alignment([a, b])
        c = SampleSet(tuple(reversed(b.entries)), b.class_names, "Spe", 300)
        with self.assertRaises(AlignmentError):
            check_alignment([a, c])

    def test_manifest_and_split_files(self):
        with tempfile.TemporaryDirectory() as tmp:
            sets = [_sample_set([4, 5], kind=k, root=os.path.join(tmp, "img", k)) for k in ("Ch", "Mel", "Spe")]
            path = os.path.join(tmp, "samples.csv")
            write_manifest(sets, path)
            back = read_manifest(path, 300)
            self.assertEqual(sorted(back), ["Ch", "Mel", "Spe"])
            self.assertEqual(back["Mel"].keys, sets[1].keys)
            self.assertEqual([e.path for e in back["Ch"].entries], [e.path for e in sets[0].entries])
            split = split_dataset(back["Ch"], seed=2)
            write_split(split, back["Ch"].keys, os.path.join(tmp, "split.csv"))
            again = read_split(os.path.join(tmp, "split.csv"), back["Ch"].keys)
            self.assertEqual((again.train, again.val, again.test), (split.train, split.val, split.test))

    def test_split_file_rejects_repeated_key(self):
        keys = _sample_set([4, 5]).keys
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "split.csv")
            with open(path, "w") as f:
                # the first key stands in for the missing last one, so the count still matches
                f.write("key,split\n")
                for k in keys[:-1]:
                    f.write("{},train\n".format(k))
                f.write("{},test\n".format(keys[0]))
            with self.assertRaises(AlignmentError):
                read_split(path, keys)

    def test_image_dataset(self):
        with tempfile.TemporaryDirectory() as tmp:
            image = render_image(Spectrogram(np.eye(6), "Spe", 0.035), "clip")
            save_image(image, os.path.join(tmp, "c0_0000.png"))
            s = SampleSet([SampleEntry("c0_0000", os.path.join(tmp, "c0_0000.png"), 0, "clip")], ["a"], "Spe", 300)
            tensor, label = SpectrogramImageDataset(s)[0]
        self.assertEqual(tuple(tensor.shape), (3, 224, 224))
        self.assertEqual(label, 0)


class BackboneTester(unittest.TestCase):

    def test_surrogate_deterministic(self):
        a, b = build_surrogate(5), build_surrogate(5)
        self.assertEqual(parameter_fingerprint(a), parameter_fingerprint(b))
        self.assertNotEqual(parameter_fingerprint(a), parameter_fingerprint(build_surrogate(6)))
        self.assertFalse(any(p.requires_grad for p in a.parameters()))

    def test_surrogate_bounds(self):
        backbone = build_surrogate(1)
        convs = [m for m in backbone.modules() if isinstance(m, torch.nn.Conv2d)]
        self.assertEqual(len(convs), 4)
        for conv, bound in zip(convs, backbone.bounds):
            self.assertLessEqual(conv.weight.abs().max().item(), bound)
            self.assertFalse(conv.bias.any())

    def test_extract_features(self):
        backbone = build_surrogate(2)
        zero = extract_features(backbone, np.zeros((224, 224, 3), dtype=np.float32), "z")
        self.assertEqual(zero.values.shape, (64,))
        self.assertFalse(zero.values.any())
        image = np.random.default_rng(0).random((224, 224, 3)).astype(np.float32)
        before = parameter_fingerprint(backbone)
        assert_array_equal(extract_features(backbone, image).values, extract_features(backbone, image).values)
        self.assertEqual(before, parameter_fingerprint(backbone))
        with self.assertRaises(ShapeError):
            extract_features(backbone, np.zeros((100, 100, 3)))

    def test_extract_set_features_matches_single_images(self):
        backbone = build_surrogate(8)
        with tempfile.TemporaryDirectory() as tmp:
            entries = []
            for i, values in enumerate((np.eye(6), np.arange(24.0).reshape(4, 6))):
                key = "c0_{:04d}".format(i)
                save_image(render_image(Spectrogram(values, "Ch", 0.035), "clip"), os.path.join(tmp, key + ".png"))
                entries.append(SampleEntry(key, os.path.join(tmp, key + ".png"), 0, "clip"))
            s = SampleSet(entries, ["a"], "Ch", 300)
            batched = extract_set_features(backbone, s, batch_size=1, verbose=False)
            singles = [extract_features(backbone, SpectrogramImageDataset(s)[i][0]).values for i in range(2)]
        self.assertEqual(tuple(batched.shape), (2, 64))
        assert_allclose(batched.numpy(), np.stack(singles), rtol=1e-5, atol=1e-6)

    def test_distinct_templates_give_distinct_features(self):
        spec = default_synth_spec(noise_level=0.0)
        dictionary = build_chirplet_dictionary(SR, 2205)
        backbone = build_surrogate(derive_seed(42, "backbone", "Ch"))
        vectors = []
        for c in (0, 3):
            clip = _clip(synthesize_clip(spec, c, np.random.default_rng(c)))
            frames = frame_signal(pre_emphasize(clip))
            energies = frame_energies(frames)
            peak = int(energies.argmax())
            segment, = window_spectrogram(chirplet_spectrogram(frames, dictionary),
                                          [Syllable(peak, peak, 0, 0, float(energies[peak]))], 300, energies)
            vectors.append(extract_features(backbone, render_image(segment)).values.astype(np.float64))
        a, b = vectors
        cosine = a @ b / (np.linalg.norm(a) * np.linalg.norm(b))
        self.assertLess(cosine, 0.999)

    def test_feature_file(self):
        rng = np.random.default_rng(3)
        features = {"a": rng.standard_normal(8), "b": rng.standard_normal(8)}
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "x.feat")
            export_features(features, path)
            back = import_features(path)
            self.assertEqual(list(back), ["a", "b"])
            assert_allclose(back["b"], features["b"].astype(np.float32))
            with self.assertRaises(UnknownKeyError):
                import_features(path, manifest_keys=["a"])
            with self.assertRaises(DimensionError):
                import_features(path, expected_dim=16)
            with open(path, "rb") as f:
                blob = f.read()
            with open(path, "wb") as f:
                f.write(blob[:-10])
            with self.assertRaises(FeatureFormatError):
                import_features(path)
            with open(path, "wb") as f:
                f.write(b"NOPE" + blob[4:])
            with self.assertRaises(FeatureFormatError):
                import_features(path)

    def test_feature_file_wide(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "vgg.feat")
            export_features({"k": np.ones(4096)}, path)
            self.assertEqual(import_features(path, expected_dim=4096)["k"].shape, (4096,))


class HeadTester(unittest.TestCase):

    def test_zero_head_is_uniform(self):
        head = ClassifierHead((8, 4, 4, 5))
        with torch.no_grad():
            for p in head.parameters():
                p.zero_()
        torch.testing.assert_close(head_forward(head, torch.randn(3, 8)), torch.full((3, 5), 0.2))

    def test_output_bias_shift(self):
        head = ClassifierHead((8, 6, 4, 3), seed=1)
        x = torch.randn(4, 8)
        before = head_forward(head, x)
        with torch.no_grad():
            head.layers[2].bias += 3.0
        torch.testing.assert_close(head_forward(head, x), before, rtol=0, atol=1e-6)

    def test_probabilities_sum_to_one(self):
        head = ClassifierHead((54, 64, 32, 18), seed=2).double()
        p = head_forward(head, torch.randn(10, 54, dtype=torch.float64))
        self.assertLess((p.sum(dim=1) - 1).abs().max().item(), 1e-9)
        self.assertTrue(torch.all(p > 0))
        with self.assertRaises(ShapeError):
            head_forward(head, torch.randn(2, 53, dtype=torch.float64))

    def test_wce_examples(self):
        eye = torch.eye(3, dtype=torch.float64)
        self.assertLess(wce_loss(eye, [0, 1, 2], torch.ones(3)).item(), 1e-10)
        uniform = torch.full((1, 18), 1.0 / 18, dtype=torch.float64)
        loss = wce_loss(uniform, [0], torch.ones(18)).item()
        self.assertAlmostEqual(loss, -math.log(1 / 18) - 17 * math.log(17 / 18), places=12)
        self.assertAlmostEqual(loss, 3.8626, delta=1e-3)

    def test_wce_saturated_float32(self):
        clipped = -2.0 * math.log(1e-12)
        wrong = torch.tensor([[1.0, 0.0]], dtype=torch.float32)
        self.assertAlmostEqual(wce_loss(wrong, [1], torch.ones(2)).item(), clipped, places=3)
        self.assertAlmostEqual(wce_loss(wrong.double(), [1], torch.ones(2)).item(), clipped, places=6)

        logits = torch.tensor([[30.0, 0.0]], dtype=torch.float32, requires_grad=True)
        loss = WeightedCrossEntropy([1.0, 1.0])(logits, torch.tensor([1]))
        loss.backward()
        self.assertTrue(math.isfinite(loss.item()))
        self.assertTrue(torch.isfinite(logits.grad).all())

    def test_wce_linear_in_weight(self):
        p = torch.tensor([[0.6, 0.3, 0.1]], dtype=torch.float64)
        single = wce_loss(p, [1], torch.ones(3)).item()
        double = wce_loss(p, [1], torch.tensor([1.0, 2.0, 1.0])).item()
        self.assertAlmostEqual(double - single, -math.log(0.3), places=12)

    def test_wce_label_errors(self):
        p = torch.full((1, 3), 1.0 / 3)
        with self.assertRaises(LabelError):
            wce_loss(p, torch.tensor([[0.5, 0.5, 0.0]]), torch.ones(3))
        with self.assertRaises(LabelError):
            wce_loss(p, [3], torch.ones(3))
        self.assertGreaterEqual(wce_loss(p, torch.tensor([[0.0, 1.0, 0.0]]), torch.ones(3)).item(), 0.0)

    def test_criterion_matches_loss(self):
        logits = torch.randn(5, 4, dtype=torch.float64)
        targets = torch.tensor([0, 1, 2, 3, 1])
        omega = [1.0, 2.0, 0.5, 1.5]
        torch.testing.assert_close(WeightedCrossEntropy(omega)(logits, targets),
                                   wce_loss(F.softmax(logits, dim=-1), targets, torch.tensor(omega)))

    @staticmethod
    def _clear_of_kinks(head, x, margin=1e-3):
        h = x
        for layer in head.layers[:-1]:
            pre = layer(h)
            if pre.abs().min().item() < margin:
                return False
            h = F.relu(pre)
        return True

    def test_gradients_match_finite_differences(self):
        step = 1e-5
        checked = 0
        for d_in in (8, 54, 64):
            for c in (2, 18):
                for seed in range(4):
                    head = ClassifierHead((d_in, 12, 6, c), seed=seed).double()
                    gen = torch.Generator().manual_seed(1000 + seed)
                    while True:
                        x = torch.randn(3, d_in, generator=gen, dtype=torch.float64)
                        with torch.no_grad():
                            if self._clear_of_kinks(head, x):
                                break
                    y = torch.randint(0, c, (3,), generator=gen)
                    omega = torch.rand(c, generator=gen, dtype=torch.float64) + 0.5
                    grads = head_gradients(head, x, y, omega)
                    for name, p in head.named_parameters():
                        numeric = torch.zeros_like(p)
                        flat, out = p.data.view(-1), numeric.view(-1)
                        with torch.no_grad():
                            for i in range(flat.numel()):
                                orig = flat[i].item()
                                flat[i] = orig + step
                                plus = wce_loss(head_forward(head, x), y, omega).item()
                                flat[i] = orig - step
                                minus = wce_loss(head_forward(head, x), y, omega).item()
                                flat[i] = orig
                                out[i] = (plus - minus) / (2 * step)
                        scale = (grads[name].norm() + numeric.norm()).item()
                        if scale < 1e-10:
                            continue
                        self.assertLess((grads[name] - numeric).norm().item() / scale, 1e-4,
                                        "{} (D_in={}, C={}, seed={})".format(name, d_in, c, seed))
                    checked += 1
        self.assertGreaterEqual(checked, 20)

    def test_zero_input_gives_zero_first_layer_gradient(self):
        head = ClassifierHead((8, 6, 4, 3), seed=3).double()
        grads = head_gradients(head, torch.zeros(2, 8, dtype=torch.float64), [0, 2], torch.ones(3))
        self.assertFalse(grads["layers.0.weight"].any())

    def test_adam_zero_gradient(self):
        head = ClassifierHead((8, 6, 4, 3), seed=4)
        before = [p.detach().clone() for p in head.parameters()]
        optimizer = build_optimizer(head)
        adam_step(optimizer, [torch.zeros_like(p) for p in head.parameters()])
        for b, p in zip(before, head.parameters()):
            self.assertTrue(torch.equal(b, p.detach()))

    def test_adam_first_step(self):
        head = ClassifierHead((8, 6, 4, 3), seed=5)
        before = [p.detach().clone() for p in head.parameters()]
        optimizer = build_optimizer(head, lr=0.001)
        adam_step(optimizer, [torch.ones_like(p) for p in head.parameters()])
        for b, p in zip(before, head.parameters()):
            torch.testing.assert_close(p.detach() - b, torch.full_like(b, -0.001), rtol=0, atol=1e-6)
        _, step = adam_state(optimizer)
        self.assertEqual(step, 1)
        with self.assertRaises(ShapeError):
            adam_step(optimizer, [torch.ones(2)])

    def test_adam_matches_update_rule(self):
        head = ClassifierHead((5, 4, 3, 2), seed=6).double()
        theta = [p.detach().clone() for p in head.parameters()]
        m = [torch.zeros_like(t) for t in theta]
        v = [torch.zeros_like(t) for t in theta]
        optimizer = build_optimizer(head, lr=0.01)
        gen = torch.Generator().manual_seed(7)
        for t in range(1, 4):
            grads = [torch.randn(tuple(p.shape), generator=gen, dtype=torch.float64) for p in head.parameters()]
            adam_step(optimizer, grads)
            for i, g in enumerate(grads):
                m[i] = 0.9 * m[i] + 0.1 * g
                v[i] = 0.999 * v[i] + 0.001 * g * g
                m_hat, v_hat = m[i] / (1 - 0.9 ** t), v[i] / (1 - 0.999 ** t)
                theta[i] = theta[i] - 0.01 * m_hat / (v_hat.sqrt() + 1e-8)
        for expected, p in zip(theta, head.parameters()):
            torch.testing.assert_close(p.detach(), expected, rtol=0, atol=1e-12)

    def test_count_trainable_params(self):
        self.assertEqual(count_trainable_params((54, 64, 32, 18)), 6194)
        self.assertEqual(count_trainable_params((1, 1, 1, 1)), 6)
        rng = np.random.default_rng(9)
        for _ in range(10):
            dims = tuple(int(d) for d in rng.integers(1, 40, size=4))
            self.assertEqual(head_parameter_count(ClassifierHead(dims)), count_trainable_params(dims))

    def test_checkpoint_file(self):
        head = ClassifierHead((6, 5, 4, 3), seed=8)
        optimizer = build_optimizer(head)
        gen = torch.Generator().manual_seed(9)
        for _ in range(2):
            adam_step(optimizer, [torch.randn(tuple(p.shape), generator=gen) for p in head.parameters()])
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "head.ckpt")
            save_checkpoint(head, optimizer, path)
            loaded, loaded_opt = load_checkpoint(path)
            self.assertEqual(loaded.dims, head.dims)
            for a, b in zip(head.parameters(), loaded.parameters()):
                self.assertTrue(torch.equal(a.detach(), b.detach()))
            moments, step = adam_state(optimizer)
            loaded_moments, loaded_step = adam_state(loaded_opt)
            self.assertEqual(step, loaded_step)
            for (m, v), (lm, lv) in zip(moments, loaded_moments):
                self.assertTrue(torch.equal(m, lm) and torch.equal(v, lv))
            grads = [torch.randn(tuple(p.shape), generator=gen) for p in head.parameters()]
            adam_step(optimizer, grads)
            adam_step(loaded_opt, grads)
            for a, b in zip(head.parameters(), loaded.parameters()):
                torch.testing.assert_close(a.detach(), b.detach())
            with open(path, "rb") as f:
                blob = f.read()
            with open(path, "wb") as f:
                f.write(blob[:-8])
            with self.assertRaises(CheckpointFormatError):
                load_checkpoint(path)


class _FixedScores(object):
    model_id = "tf"
    channel_id = "ch"

    def __init__(self, scores):
        self.scores = torch.as_tensor(scores, dtype=torch.float64)

    def probabilities(self, bank, indices):
        return self.scores[indices]


class EvalTester(unittest.TestCase):

    def test_average_precision_examples(self):
        self.assertEqual(average_precision([0.9, 0.8, 0.1, 0.05], [1, 1, 0, 0]), 1.0)
        self.assertAlmostEqual(average_precision([0.9, 0.8, 0.7], [1, 0, 1]), (1 + 2 / 3) / 2)
        self.assertAlmostEqual(average_precision([0.9, 0.8, 0.7, 0.6, 0.5], [0, 0, 0, 0, 1]), 0.2)
        with self.assertRaises(EvaluationError):
            average_precision([0.1, 0.2], [0, 0])

    def test_average_precision_ties_by_key(self):
        self.assertEqual(average_precision([0.5, 0.5], [0, 1], keys=["b", "a"]), 1.0)
        self.assertEqual(average_precision([0.5, 0.5], [0, 1], keys=["a", "b"]), 0.5)

    def test_average_precision_rank_only(self):
        rng = np.random.default_rng(10)
        for _ in range(20):
            scores = rng.random(50)
            positives = rng.random(50) < 0.3
            positives[0] = True
            ap = average_precision(scores, positives)
            self.assertAlmostEqual(ap, average_precision(np.exp(3 * scores), positives), places=12)
            self.assertAlmostEqual(ap, average_precision_score(positives, scores), places=10)

    def test_mean_average_precision(self):
        labels = np.array([0, 0, 1, 1])
        self.assertEqual(mean_average_precision(np.eye(2)[labels], labels), 1.0)
        rng = np.random.default_rng(11)
        labels = rng.integers(0, 2, 1000)
        self.assertAlmostEqual(mean_average_precision(rng.random((1000, 2)), labels), 0.5, delta=0.1)
        scores = np.array([[0.9, 0.1, 0.0], [0.2, 0.8, 0.0], [0.6, 0.4, 0.0], [0.3, 0.7, 0.0]])
        self.assertEqual(mean_average_precision(scores, [0, 1, 0, 1], warn=False), 1.0)
        with self.assertRaises(EvaluationError):
            mean_average_precision(np.zeros((0, 3)), np.zeros(0, dtype=int), warn=False)

    def test_evaluate(self):
        keys = ["k{}".format(i) for i in range(6)]
        bank = FeatureBank(keys, [0, 0, 1, 1, 2, 2], ["a", "b", "c"], {"Ch": torch.zeros(6, 2)}, 300)
        scores = np.array([[0.8, 0.1, 0.1], [0.2, 0.7, 0.1], [0.1, 0.8, 0.1],
                           [0.1, 0.6, 0.3], [0.1, 0.1, 0.8], [0.3, 0.3, 0.4]])
        split = SplitAssignment(train=[], val=[], test=range(6))
        report = evaluate(_FixedScores(scores), bank, split, "test")
        self.assertEqual(report.num_correct, 5)
        assert_array_equal(report.confusion.sum(axis=1), [2, 2, 2])
        self.assertEqual((report.model, report.channel, report.duration_ms), ("tf", "ch", 300))
        self.assertAlmostEqual(report.map, float(np.mean(report.ap)))
        with self.assertRaises(EvaluationError):
            evaluate(_FixedScores(scores), bank, split, "val")

    def test_history(self):
        history = TrainHistory()
        for epoch, val_map in enumerate([0.5, 0.9, 0.95, 0.95, 0.94], start=1):
            history.record(epoch, 1.0 / epoch, val_map)
        self.assertEqual((history.best_epoch, history.best_map), (3, 0.95))
        self.assertEqual(history.epochs_to_reach(0.01), 3)
        self.assertEqual(history.epochs_to_reach(0.06), 2)
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "history.csv")
            emit_history(history, path)
            back = read_history(path)
            with open(path) as f:
                summary = f.read().split("\n\n")[1].splitlines()
        self.assertEqual(back.epochs, history.epochs)
        assert_allclose(back.train_loss, history.train_loss, rtol=1e-8)
        assert_allclose(back.val_map, history.val_map, rtol=1e-8)
        self.assertEqual(summary, ["best_epoch,best_map", "3,0.95"])

    def test_report_file(self):
        report = EvalReport("re-fuse", "fused", 300, "test", ["a", "b"], np.array([1.0, np.nan]), 1.0,
                            np.array([[2, 0], [0, 0]]), ["b"])
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "r.csv")
            write_report(report, path)
            with open(path) as f:
                blocks = f.read().strip().split("\n\n")
        self.assertEqual(blocks[0].splitlines(), ["class,ap", "a,1", "b,skipped"])
        self.assertEqual(blocks[1].splitlines()[0], "true_class,a,b")
        self.assertEqual(blocks[2].splitlines(), ["model,channel,duration_ms,split,map", "re-fuse,fused,300,test,1"])

    def test_grid_summary(self):
        rows = [("tf", "spe", 300, 0.9), ("fe-fuse", "fused", 100, 0.8), ("tf", "ch", 100, 0.95)]
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "summary.csv")
            write_grid_summary(rows, path)
            df = read_grid_summary(path)
        self.assertEqual(list(df["model"]), ["fe-fuse", "tf", "tf"])
        self.assertEqual(list(df["channel"]), ["fused", "ch", "spe"])

    def test_plots(self):
        history = TrainHistory()
        for epoch, (loss, val_map) in enumerate([(1.2, 0.5), (0.6, 0.8), (0.4, 0.75)], start=1):
            history.record(epoch, loss, val_map)
        rows = [("tf", "ch", 100, 0.9), ("tf", "ch", 300, 0.95), ("re-fuse", "fused", 300, 0.97)]
        with tempfile.TemporaryDirectory() as tmp:
            plot_history({"tf ch": history}, os.path.join(tmp, "curves", "history.png"))
            summary = write_grid_summary(rows, os.path.join(tmp, "summary.csv"))
            plot_grid(summary, os.path.join(tmp, "grid.png"))
            self.assertGreater(os.path.getsize(os.path.join(tmp, "curves", "history.png")), 0)
            self.assertGreater(os.path.getsize(os.path.join(tmp, "grid.png")), 0)
        with self.assertRaises(ValueError):
            plot_history({}, "unused.png")


class ModelTester(unittest.TestCase):

    def test_train_tf(self):
        bank, split = _feature_bank()
        args = _args()
        model, history = train_tf(bank, split, args, "Ch")
        self.assertEqual(len(history), args.epochs)
        self.assertLess(history.train_loss[-1], 0.5 * history.train_loss[0])
        self.assertGreater(history.best_map, 0.95)
        self.assertEqual(history.best_map, max(history.val_map))
        self.assertEqual(head_parameter_count(model.head), count_trainable_params((16, 16, 8, 3)))

    def test_train_tf_keeps_best_epoch_optimizer(self):
        bank, split = _feature_bank(seed=3, separation=1.0)
        args = _args(epochs=8)
        model, history = train_tf(bank, split, args, "Mel")
        steps_per_epoch = math.ceil(len(split.train) / args.batch_size)
        self.assertEqual(adam_state(model.optimizer)[1], history.best_epoch * steps_per_epoch)

    def test_train_tf_deterministic(self):
        bank, split = _feature_bank(seed=1)
        args = _args(epochs=5)
        a, ha = train_tf(bank, split, args, "Mel")
        b, hb = train_tf(bank, split, args, "Mel")
        self.assertEqual(ha.train_loss, hb.train_loss)
        self.assertEqual(ha.val_map, hb.val_map)
        self.assertEqual(parameter_fingerprint(a.head), parameter_fingerprint(b.head))
        _, longer = train_tf(bank, split, _args(epochs=10), "Mel")
        self.assertEqual(longer.val_map[:5], ha.val_map)
        self.assertGreaterEqual(longer.best_map, ha.best_map)

    def test_fe_fuse_on_identical_channels(self):
        bank, split = _feature_bank(channels=("Ch",), seed=2)
        x = bank.channel("Ch")
        same = FeatureBank(bank.keys, bank.labels, bank.class_names, {k: x for k in CHANNELS}, 300)
        wide = FeatureBank(bank.keys, bank.labels, bank.class_names, {"Ch": torch.cat([x, x, x], dim=1)}, 300)
        args = _args(epochs=8)
        fused, hf = train_fe_fuse(same, split, args, seed=7)
        single, hs = train_tf(wide, split, args, "Ch", seed=7)
        self.assertEqual(fused.head.input_dim, 48)
        self.assertEqual(hf.train_loss, hs.train_loss)
        self.assertEqual(hf.val_map, hs.val_map)
        torch.testing.assert_close(predict(fused, same, same.keys), predict(single, wide, wide.keys), rtol=0, atol=0)

    def test_re_fuse(self):
        bank, split = _feature_bank(seed=3)
        args = _args(epochs=60, lr=0.01)
        members = {kind: train_tf(bank, split, args, kind)[0] for kind in CHANNELS}
        before = {kind: parameter_fingerprint(m) for kind, m in members.items()}
        model, history = train_re_fuse(members, bank, split, args)
        self.assertEqual({kind: parameter_fingerprint(m) for kind, m in members.items()}, before)
        self.assertEqual(model.head.input_dim, 9)
        self.assertEqual(head_parameter_count(model.head), count_trainable_params((9, 16, 8, 3)))
        self.assertFalse(any(p.requires_grad for p in model.members.parameters()))
        self.assertLess(history.train_loss[-1], 0.1)

    def test_re_fuse_rejects_other_split(self):
        bank, split = _feature_bank(seed=4)
        args = _args(epochs=2)
        members = {kind: train_tf(bank, split, args, kind)[0] for kind in CHANNELS}
        other = split_dataset(_sample_set([40, 40, 40]), seed=99)
        with self.assertRaises(ProtocolError):
            train_re_fuse(members, bank, other, args)

    def test_predict(self):
        bank, split = _feature_bank(seed=5)
        model, _ = train_fe_fuse(bank, split, _args(epochs=2))
        p = predict(model, bank, bank.keys[:7])
        self.assertLess((p.sum(dim=1) - 1).abs().max().item(), 1e-9)
        self.assertEqual(tuple(predict(model, bank, bank.keys[0]).shape), (3,))
        with self.assertRaises(AlignmentError):
            predict(model, bank, ["missing"])
        with torch.no_grad():
            for p in model.head.parameters():
                p.zero_()
        torch.testing.assert_close(predict(model, bank, bank.keys), torch.full((len(bank), 3), 1 / 3,
                                                                                dtype=torch.float64))

    def test_feature_norm(self):
        x = torch.tensor([[1.0, 5.0], [3.0, 5.0]])
        norm = FeatureNorm.fit(x)
        torch.testing.assert_close(norm(x), torch.tensor([[-1.0, 0.0], [1.0, 0.0]]))

    def test_bundle(self):
        bank, split = _feature_bank(seed=6)
        args = _args(epochs=3)
        members = {kind: train_tf(bank, split, args, kind)[0] for kind in CHANNELS}
        with tempfile.TemporaryDirectory() as tmp:
            for name, (model, history) in (("tf", (members["Spe"], None)),
                                           ("re", train_re_fuse(members, bank, split, args))):
                if history is None:
                    history = TrainHistory()
                    history.record(1, 1.0, 0.5)
                out = os.path.join(tmp, name)
                save_bundle(model, history, out, args, split, bank.keys, 300)
                loaded, loaded_history, loaded_split, meta = load_bundle(out, bank.keys)
                self.assertEqual(meta["model"], model.model_id)
                self.assertEqual(loaded_split.test, split.test)
                self.assertEqual(loaded_history.epochs, history.epochs)
                self.assertEqual(history.checkpoint, os.path.join(out, "head.ckpt"))
                self.assertEqual(loaded_history.checkpoint, os.path.join(out, "head.ckpt"))
                self.assertEqual(adam_state(loaded.optimizer)[1], adam_state(model.optimizer)[1])
                torch.testing.assert_close(loaded.probabilities(bank, list(split.test)),
                                           model.probabilities(bank, list(split.test)))
                with open(os.path.join(out, "config.json")) as f:
                    self.assertEqual(json.load(f)["epochs"], 3)
            for kind in CHANNELS:
                moments, step = adam_state(loaded.members[kind].optimizer)
                self.assertGreater(step, 0)
                self.assertEqual(step, adam_state(members[kind].optimizer)[1])
                torch.testing.assert_close(moments[0][0], adam_state(members[kind].optimizer)[0][0][0])


class ConfigTester(unittest.TestCase):

    def test_defaults(self):
        args = resolve_config()
        self.assertEqual(args.preemphasis, 0.95)
        self.assertEqual(args.durations, [100, 300, 500])
        self.assertEqual(args.split_ratios, [0.8, 0.1, 0.1])
        self.assertEqual((args.batch_size, args.lr, args.epochs), (50, 0.001, 100))

    def test_overrides(self):
        args = resolve_config(overrides=parse_overrides(["--durations", "100,300", "--epochs", "7",
                                                          "--verbose", "false", "--window-mode", "tile"]))
        self.assertEqual(args.durations, [100, 300])
        self.assertEqual(args.epochs, 7)
        self.assertIs(args.verbose, False)
        self.assertEqual(args.window_mode, "tile")
        with self.assertRaises(argparse.ArgumentTypeError):
            parse_overrides(["--epochs"])

    def test_config_errors(self):
        for overrides, key in (({"nonsense": "1"}, "nonsense"), ({"preemphasis": "1.0"}, "preemphasis"),
                               ({"epochs": "ten"}, "epochs"), ({"epochs": "2.5"}, "epochs"),
                               ({"chirplet_rates": "4"}, "chirplet_rates"),
                               ({"split_ratios": "0.5,0.3,0.3"}, "split_ratios")):
            with self.assertRaises(ConfigError) as ctx:
                resolve_config(overrides=overrides)
            self.assertEqual(ctx.exception.key, key)

    def test_config_file(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "c.json")
            with open(path, "w") as f:
                json.dump({"epochs": 12, "lr": 0.01}, f)
            args = resolve_config(path, {"lr": "0.02"})
            self.assertEqual((args.epochs, args.lr), (12, 0.02))
            save_config(args, os.path.join(tmp, "out", "config.json"))
            with open(os.path.join(tmp, "out", "config.json")) as f:
                saved = json.load(f)
        self.assertEqual(sorted(saved), sorted(load_defaults()))
        self.assertEqual(resolve_config(overrides=saved).epochs, 12)

    def test_config_matches(self):
        args = resolve_config(overrides={"durations": "100,300", "preemphasis": "0.9"})
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "config.json")
            self.assertFalse(config_matches(path, args, ["durations"]))
            save_config(args, path)
            self.assertTrue(config_matches(path, args, ["durations", "preemphasis", "seed"]))
            changed = resolve_config(overrides={"durations": "100", "preemphasis": "0.9"})
            self.assertTrue(config_matches(path, changed, ["preemphasis", "seed"]))
            self.assertFalse(config_matches(path, changed, ["durations"]))


if __name__ == '__main__':
    unittest.main()
