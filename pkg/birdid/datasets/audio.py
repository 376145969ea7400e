"""
Audio clip loading and the seeded synthetic birdsong corpus.

Field recordings are 16-bit linear (or 32-bit float) RIFF/WAVE files at
44.1 kHz. The synthetic corpus stands in for a field corpus: each class is
a syllable template rendered as a Hann-windowed harmonic linear chirp over
optional Gaussian background noise.
"""
import os
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.io import wavfile

from birdid.util.errors import (EmptySignalError, InvalidSynthSpecError, SampleRateError,
                                UnsupportedFormatError, WavFormatError)

CORPUS_SAMPLE_RATE = 44100
PEAK_LEVEL = 0.9


@dataclass(frozen=True)
class AudioClip:
    samples: np.ndarray
    sample_rate: int
    source_id: str = ""

    def __post_init__(self):
        if int(self.sample_rate) <= 0:
            raise SampleRateError("sample rate must be positive, got {}".format(self.sample_rate))
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise WavFormatError("clip samples must be one-dimensional")
        if not np.all(np.isfinite(samples)):
            raise WavFormatError("clip '{}' contains non-finite samples".format(self.source_id))
        object.__setattr__(self, "samples", samples)

    def __len__(self):
        return len(self.samples)

    @property
    def duration(self):
        return len(self.samples) / self.sample_rate


def load_wav(path, expected_rate: Optional[int] = None, source_id: Optional[str] = None) -> AudioClip:
    """
    Read a PCM 16-bit or 32-bit float WAV file into a mono clip in [-1, +1].

    Multi-channel files are mixed down by averaging the channels. Clips whose
    rate differs from expected_rate are rejected, never resampled.
    """
    try:
        sample_rate, data = wavfile.read(path)
    except ValueError as e:
        msg = str(e)
        if "Unknown wave file format" in msg or "Unsupported" in msg:
            raise UnsupportedFormatError("{}: {}".format(path, msg)) from e
        raise WavFormatError("{}: {}".format(path, msg)) from e
    except (EOFError, IndexError) as e:
        raise WavFormatError("{}: truncated or malformed header".format(path)) from e

    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        samples = np.clip(data.astype(np.float64), -1.0, 1.0)
    else:
        raise UnsupportedFormatError("{}: sample type {} is not supported (PCM 16-bit or float 32-bit only)".format(
            path, data.dtype))

    if samples.ndim == 2:
        samples = samples.mean(axis=1)
    if samples.size == 0:
        raise EmptySignalError("{}: no samples in payload".format(path))
    if expected_rate is not None and sample_rate != expected_rate:
        raise SampleRateError("{}: sample rate {} Hz differs from corpus rate {} Hz".format(
            path, sample_rate, expected_rate))

    if source_id is None:
        source_id = os.path.splitext(os.path.basename(path))[0]
    return AudioClip(samples=samples, sample_rate=int(sample_rate), source_id=source_id)


def write_wav(clip: AudioClip, path):
    """Write a clip as 16-bit PCM (samples scaled by 32768 and clipped to the int16 range)."""
    pcm = np.clip(np.round(clip.samples * 32768.0), -32768, 32767).astype(np.int16)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    wavfile.write(path, clip.sample_rate, pcm)


@dataclass(frozen=True)
class SyllableTemplate:
    base_frequency: float
    chirp_rate: float
    duration_ms: float
    harmonics: int = 1
    amplitude: float = 0.8


@dataclass(frozen=True)
class SynthSpec:
    templates: Tuple[SyllableTemplate, ...]
    clips_per_class: int
    clip_seconds: float = 2.0
    noise_level: float = 0.05
    seed: int = 42
    sample_rate: int = CORPUS_SAMPLE_RATE
    max_syllables: int = 2
    class_names: Tuple[str, ...] = field(default=())

    @property
    def num_classes(self):
        return len(self.templates)

    def names(self):
        if self.class_names:
            return list(self.class_names)
        return ["class_{:02d}".format(c) for c in range(self.num_classes)]

    def validate(self):
        if self.num_classes == 0:
            raise InvalidSynthSpecError("synthetic corpus needs at least one class")
        if self.clips_per_class <= 0:
            raise InvalidSynthSpecError("synthetic corpus needs at least one clip per class")
        if self.class_names and len(self.class_names) != self.num_classes:
            raise InvalidSynthSpecError("class_names must name every template")
        if self.noise_level < 0:
            raise InvalidSynthSpecError("noise_level must be >= 0")
        if self.max_syllables < 1:
            raise InvalidSynthSpecError("max_syllables must be >= 1")
        nyquist = self.sample_rate / 2
        seen = set()
        for c, t in enumerate(self.templates):
            if not 50 <= t.duration_ms <= 400:
                raise InvalidSynthSpecError("class {}: syllable duration {} ms outside [50, 400]".format(
                    c, t.duration_ms))
            if t.harmonics < 1 or t.amplitude <= 0:
                raise InvalidSynthSpecError("class {}: harmonics and amplitude must be positive".format(c))
            sweep = t.chirp_rate * t.duration_ms / 1000.0
            top = t.harmonics * (t.base_frequency + max(sweep, 0.0))
            if t.base_frequency + min(sweep, 0.0) <= 0 or top >= nyquist:
                raise InvalidSynthSpecError("class {}: harmonics exceed the Nyquist frequency".format(c))
            if t.duration_ms / 1000.0 > self.clip_seconds:
                raise InvalidSynthSpecError("class {}: syllable longer than the clip".format(c))
            key = (float(t.base_frequency), float(t.chirp_rate))
            if key in seen:
                raise InvalidSynthSpecError("class {}: template repeats (base frequency, chirp rate) {}".format(
                    c, key))
            seen.add(key)


def default_synth_spec(num_classes=4, clips_per_class=30, clip_seconds=2.0, noise_level=0.05,
                       seed=42, syllable_ms=(150, 250), max_syllables=2,
                       sample_rate=CORPUS_SAMPLE_RATE) -> SynthSpec:
    """
    A ladder of distinct templates: base frequencies on a geometric grid,
    alternating chirp direction, harmonic count cycling 1..4 and durations
    spread evenly over syllable_ms.
    """
    lo, hi = syllable_ms
    templates = []
    for c in range(num_classes):
        position = c / (num_classes - 1) if num_classes > 1 else 0.5
        base = 2000.0 * (3.0 ** position)
        duration = lo + (hi - lo) * position
        magnitude = 4000.0 + 3000.0 * (c % 3)
        if c % 2 == 1:
            # a down-sweep may fall to at most 40 % of the base frequency
            magnitude = min(magnitude, 0.6 * base / (duration / 1000.0))
        rate = magnitude if c % 2 == 0 else -magnitude
        harmonics = 1 + (c % 4)
        # keep the top harmonic below 0.45 of the sample rate
        while harmonics > 1 and harmonics * (base + magnitude * duration / 1000.0) >= 0.45 * sample_rate:
            harmonics -= 1
        templates.append(SyllableTemplate(base_frequency=base, chirp_rate=rate, duration_ms=duration,
                                          harmonics=harmonics))
    return SynthSpec(templates=tuple(templates), clips_per_class=clips_per_class, clip_seconds=clip_seconds,
                     noise_level=noise_level, seed=seed, sample_rate=sample_rate, max_syllables=max_syllables)


def render_syllable(template: SyllableTemplate, sample_rate, rng) -> np.ndarray:
    n = int(round(template.duration_ms / 1000.0 * sample_rate))
    t = np.arange(n) / sample_rate
    # small per-rendition jitter so clips of one class are not identical
    f0 = template.base_frequency * (1.0 + 0.03 * rng.uniform(-1, 1))
    rate = template.chirp_rate * (1.0 + 0.05 * rng.uniform(-1, 1))
    envelope = np.hanning(n)
    out = np.zeros(n)
    for h in range(1, template.harmonics + 1):
        phase = 2 * np.pi * h * (f0 * t + 0.5 * rate * t ** 2) + rng.uniform(0, 2 * np.pi)
        out += np.sin(phase) / h
    return template.amplitude * envelope * out / template.harmonics ** 0.5


def synthesize_clip(spec: SynthSpec, class_index, rng) -> np.ndarray:
    template = spec.templates[class_index]
    length = int(round(spec.clip_seconds * spec.sample_rate))
    signal = np.zeros(length)
    syllable_len = int(round(template.duration_ms / 1000.0 * spec.sample_rate))
    count = int(rng.integers(1, spec.max_syllables + 1))
    # disjoint slots; fall back to fewer syllables when they do not fit
    while count > 1 and length // count < 2 * syllable_len:
        count -= 1
    slot = length // count
    gap = min(syllable_len // 2, slot - syllable_len) if count > 1 else 0
    for k in range(count):
        start = k * slot + int(rng.integers(0, slot - syllable_len - gap + 1))
        signal[start:start + syllable_len] += render_syllable(template, spec.sample_rate, rng)
    if spec.noise_level > 0:
        signal += spec.noise_level * template.amplitude * rng.standard_normal(length)
    peak = np.max(np.abs(signal))
    if peak > PEAK_LEVEL:
        signal *= PEAK_LEVEL / peak
    return signal


def synth_corpus(spec: SynthSpec, out_dir) -> List[Tuple[str, str]]:
    """
    Render the synthetic corpus under out_dir and write out_dir/manifest.csv
    (header `path,label`, paths relative to out_dir).

    Deterministic for a fixed spec: one generator seeded from spec.seed is
    consumed class by class, clip by clip.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    names = spec.names()
    rows = []
    for c, name in enumerate(names):
        for i in range(spec.clips_per_class):
            signal = synthesize_clip(spec, c, rng)
            rel_path = "{}/{}_clip_{:03d}.wav".format(name, name, i)
            clip = AudioClip(samples=signal, sample_rate=spec.sample_rate,
                             source_id="{}_clip_{:03d}".format(name, i))
            write_wav(clip, os.path.join(out_dir, rel_path))
            rows.append((rel_path, name))
    write_corpus_manifest(rows, os.path.join(out_dir, "manifest.csv"))
    return rows


def write_corpus_manifest(rows: Sequence[Tuple[str, str]], path):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    df = pd.DataFrame(list(rows), columns=["path", "label"])
    df.to_csv(path, index=False, lineterminator="\n", encoding="utf-8")


def read_corpus_manifest(path) -> List[Tuple[str, str]]:
    """Rows of a `path,label` manifest with paths resolved against the manifest directory."""
    df = pd.read_csv(path, dtype=str, keep_default_na=False)
    if list(df.columns) != ["path", "label"]:
        raise WavFormatError("{}: corpus manifest must have header 'path,label'".format(path))
    root = os.path.dirname(os.path.abspath(path))
    return [(p if os.path.isabs(p) else os.path.join(root, p), label) for p, label in zip(df["path"], df["label"])]
