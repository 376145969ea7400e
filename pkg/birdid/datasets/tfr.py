"""
Time-frequency representations of framed clips and their rendering as
224x224 color images.

Three kinds are produced, each an F x T matrix with one column per frame:
  Spe  magnitude STFT, F = fft_size / 2 + 1
  Mel  cepstral coefficients 1..31 of the log mel filterbank energies
  Ch   max-over-rates response of a Gaussian chirplet filterbank
"""
import math
import os
import struct
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from matplotlib import colormaps
from PIL import Image
from scipy import fft as sp_fft

from birdid.util.errors import ParameterError, SpectrogramFormatError

from .preprocess import FrameSequence, Syllable

KINDS = ("Spe", "Mel", "Ch")
KIND_CODES = {"Spe": 0, "Mel": 1, "Ch": 2}
IMAGE_SIZE = 224
MEL_COEFFICIENTS = 31
ENERGY_FLOOR = 1e-10

# 256 x 3 perceptually ordered lookup table, fixed so renders are reproducible
COLORMAP = np.asarray(colormaps["viridis"].colors, dtype=np.float64)

_SPEC_HEADER = struct.Struct("<4sHBIId")
_SPEC_MAGIC = b"SPEC"
_SPEC_VERSION = 1


@dataclass(frozen=True)
class Spectrogram:
    values: np.ndarray          # [F x T]
    kind: str
    time_step: float            # seconds per column
    freq_axis: np.ndarray = field(default=None)
    # (syllable index, window index) for windowed segments
    source: Tuple[int, int] = (0, 0)

    def __post_init__(self):
        if self.kind not in KIND_CODES:
            raise ParameterError("unknown spectrogram kind '{}', expected one of {}".format(self.kind, KINDS))
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise ParameterError("spectrogram values must be a 2-D [F x T] matrix")
        if not np.all(np.isfinite(values)):
            raise ParameterError("spectrogram contains non-finite values")
        object.__setattr__(self, "values", values)
        if self.freq_axis is None:
            object.__setattr__(self, "freq_axis", np.arange(values.shape[0], dtype=np.float64))

    @property
    def num_rows(self):
        return self.values.shape[0]

    @property
    def num_columns(self):
        return self.values.shape[1]


@dataclass(frozen=True)
class ChirpletDictionary:
    centers: np.ndarray         # [F] Hz, strictly increasing
    rates: np.ndarray           # [F x R] Hz/s
    width: float                # Gaussian sigma in seconds
    atoms: np.ndarray           # [F x R x frame_len] complex, unit energy
    sample_rate: int
    frame_len: int

    @property
    def num_channels(self):
        return self.centers.shape[0]

    @property
    def num_rates(self):
        return self.rates.shape[1]

    def __len__(self):
        return self.num_channels * self.num_rates

    def atom_params(self):
        return [(float(fc), float(r), self.width)
                for fc, row in zip(self.centers, self.rates) for r in row]


@dataclass(frozen=True)
class SpectrogramImage:
    pixels: np.ndarray          # [224 x 224 x 3] in [0, 1]
    clip_id: str
    syllable: int
    window: int
    kind: str
    duration_ms: int

    @property
    def key(self):
        return sample_key(self.clip_id, self.syllable, self.window)


def sample_key(clip_id, syllable, window):
    """Channel-independent identity of one windowed sample."""
    return "{}_s{:03d}_w{:02d}".format(clip_id, syllable, window)


def default_fft_size(frame_len):
    return 1 << max(0, int(math.ceil(math.log2(frame_len))))


def _power_of_two(n):
    return n >= 1 and (n & (n - 1)) == 0


def _spectrum(frames: FrameSequence, fft_size):
    if fft_size is None:
        fft_size = default_fft_size(frames.frame_len)
    if fft_size < frames.frame_len or not _power_of_two(fft_size):
        raise ParameterError("fft_size must be a power of two >= frame_len {}, got {}".format(
            frames.frame_len, fft_size))
    return sp_fft.rfft(frames.frames, n=fft_size, axis=1), fft_size


def stft_spectrogram(frames: FrameSequence, fft_size: Optional[int] = None) -> Spectrogram:
    """Magnitude of the zero-padded DFT of every frame, bins 0..fft_size/2."""
    spectrum, fft_size = _spectrum(frames, fft_size)
    freqs = np.arange(fft_size // 2 + 1) * frames.sample_rate / fft_size
    return Spectrogram(values=np.abs(spectrum).T, kind="Spe", time_step=frames.time_step, freq_axis=freqs)


def hz_to_mel(hz):
    return 2595.0 * np.log10(1.0 + np.asarray(hz, dtype=np.float64) / 700.0)


def mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(num_filters, fft_size, sample_rate):
    """Triangular filters evenly spaced on the mel scale from 0 Hz to Nyquist, [num_filters x fft_size/2+1]."""
    mel_points = np.linspace(0.0, hz_to_mel(sample_rate / 2.0), num_filters + 2)
    bins = np.floor((fft_size + 1) * mel_to_hz(mel_points) / sample_rate).astype(int)
    bins = np.minimum(bins, fft_size // 2)
    fb = np.zeros((num_filters, fft_size // 2 + 1))
    k = np.arange(fft_size // 2 + 1)
    for j in range(num_filters):
        left, center, right = bins[j], bins[j + 1], bins[j + 2]
        if center > left:
            rising = (k >= left) & (k < center)
            fb[j, rising] = (k[rising] - left) / (center - left)
        if right > center:
            falling = (k >= center) & (k < right)
            fb[j, falling] = (right - k[falling]) / (right - center)
        else:
            fb[j, center] = 1.0
    return fb


def mel_spectrogram(frames: FrameSequence, num_mel_filters: int = 40, fft_size: Optional[int] = None,
                    floor: float = ENERGY_FLOOR) -> Spectrogram:
    """
    Power spectrum -> mel filterbank -> log of floored band energies ->
    orthonormal DCT-II, keeping cepstral coefficients 1..31. Coefficient 0
    carries the overall level, so the retained rows do not change when a
    frame is scaled by a positive constant.
    """
    if num_mel_filters < MEL_COEFFICIENTS + 1:
        raise ParameterError("num_mel_filters must be >= {}, got {}".format(MEL_COEFFICIENTS + 1, num_mel_filters))
    spectrum, fft_size = _spectrum(frames, fft_size)
    power = np.abs(spectrum) ** 2
    bands = power @ mel_filterbank(num_mel_filters, fft_size, frames.sample_rate).T
    log_bands = np.log(np.maximum(bands, floor))
    cepstrum = sp_fft.dct(log_bands, type=2, norm="ortho", axis=1)
    values = cepstrum[:, 1:MEL_COEFFICIENTS + 1].T
    return Spectrogram(values=values, kind="Mel", time_step=frames.time_step,
                       freq_axis=np.arange(1, MEL_COEFFICIENTS + 1, dtype=np.float64))


def build_chirplet_dictionary(sample_rate, frame_len, num_channels: int = 64, num_rates: int = 5,
                              rate_span: Optional[float] = None, f_min: float = 200.0,
                              octaves: float = 2.0) -> ChirpletDictionary:
    """
    Gaussian-windowed complex linear chirps over one frame.

    Channels are geometrically spaced from f_min to 0.45 * Nyquist. Each
    channel gets num_rates chirp rates evenly spaced over [-span, +span] with
    the middle rate exactly 0. With rate_span unset, the span of a channel
    makes its atom sweep `octaves` octaves centred on the channel frequency
    over one frame. The envelope is centred on the frame with sigma equal to
    a sixth of the frame duration.
    """
    if num_channels < 1:
        raise ParameterError("need at least one chirplet channel")
    if num_rates < 1 or num_rates % 2 == 0:
        raise ParameterError("num_rates must be odd so a zero-rate atom exists, got {}".format(num_rates))
    f_max = 0.45 * sample_rate / 2.0
    if not 0 < f_min < f_max:
        raise ParameterError("f_min must lie in (0, {:.1f}) Hz, got {}".format(f_max, f_min))

    frame_duration = frame_len / sample_rate
    if num_channels == 1:
        centers = np.array([f_min])
    else:
        centers = np.geomspace(f_min, f_max, num_channels)
    if rate_span is None:
        spans = (2.0 ** (octaves / 2.0) - 2.0 ** (-octaves / 2.0)) * centers / frame_duration
    else:
        spans = np.full(num_channels, float(rate_span))
    grid = np.linspace(-1.0, 1.0, num_rates)
    grid[num_rates // 2] = 0.0
    rates = spans[:, None] * grid[None, :]

    t = (np.arange(frame_len) - (frame_len - 1) / 2.0) / sample_rate
    sigma = frame_duration / 6.0
    envelope = np.exp(-0.5 * (t / sigma) ** 2)
    phase = 2 * np.pi * (centers[:, None, None] * t + 0.5 * rates[:, :, None] * t ** 2)
    atoms = envelope * np.exp(1j * phase)
    atoms /= np.linalg.norm(atoms, axis=2, keepdims=True)
    atoms.setflags(write=False)
    return ChirpletDictionary(centers=centers, rates=rates, width=sigma, atoms=atoms,
                              sample_rate=int(sample_rate), frame_len=int(frame_len))


def chirplet_spectrogram(frames: FrameSequence, dictionary: ChirpletDictionary) -> Spectrogram:
    """Row f of column t is max over rates r of |<frame t, atom(f, r)>|."""
    if dictionary.frame_len != frames.frame_len:
        raise ParameterError("chirplet atoms span {} samples but frames have {}".format(
            dictionary.frame_len, frames.frame_len))
    num_channels, num_rates, n = dictionary.atoms.shape
    responses = np.abs(frames.frames @ dictionary.atoms.reshape(-1, n).conj().T)
    values = responses.reshape(len(frames), num_channels, num_rates).max(axis=2).T
    return Spectrogram(values=values, kind="Ch", time_step=frames.time_step, freq_axis=dictionary.centers)


def window_columns(duration_ms, time_step):
    width = int(round(duration_ms / 1000.0 / time_step))
    if width < 1:
        raise ParameterError("duration {} ms is shorter than one column ({:.1f} ms)".format(
            duration_ms, time_step * 1000.0))
    return width


def _take_columns(spec: Spectrogram, left, width, fill):
    segment = np.full((spec.num_rows, width), fill)
    lo, hi = max(left, 0), min(left + width, spec.num_columns)
    if hi > lo:
        segment[:, lo - left:hi - left] = spec.values[:, lo:hi]
    return segment


def window_spectrogram(spec: Spectrogram, syllables: List[Syllable], duration_ms, weights=None,
                       mode: str = "centroid") -> List[Spectrogram]:
    """
    Cut fixed-width W-column segments out of a spectrogram, one per syllable
    centred on its energy centroid ("centroid"), or consecutive tiles
    covering the syllable span ("tile"). Columns falling outside the
    spectrogram are filled with its minimum value.

    weights gives the per-column energy used for the centroid. Without it
    the column sum of squared values is used.
    """
    if mode not in ("centroid", "tile"):
        raise ParameterError("window mode must be 'centroid' or 'tile', got '{}'".format(mode))
    width = window_columns(duration_ms, spec.time_step)
    if not syllables:
        return []
    if weights is None:
        weights = np.sum(spec.values ** 2, axis=0)
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape[0] != spec.num_columns:
        raise ParameterError("{} column weights for a {}-column spectrogram".format(
            weights.shape[0], spec.num_columns))

    fill = spec.values.min()
    segments = []
    for s, syl in enumerate(syllables):
        if syl.end_frame >= spec.num_columns or syl.start_frame < 0:
            raise ParameterError("syllable frames {}..{} outside a {}-column spectrogram".format(
                syl.start_frame, syl.end_frame, spec.num_columns))
        if mode == "centroid":
            w = weights[syl.start_frame:syl.end_frame + 1]
            if w.sum() > 0:
                centroid = int(round(float(np.dot(np.arange(syl.start_frame, syl.end_frame + 1), w) / w.sum())))
            else:
                centroid = (syl.start_frame + syl.end_frame) // 2
            lefts = [centroid - (width - 1) // 2]
        else:
            count = max(1, int(math.ceil(syl.num_frames / width)))
            lefts = [syl.start_frame + i * width for i in range(count)]
        for i, left in enumerate(lefts):
            segments.append(Spectrogram(values=_take_columns(spec, left, width, fill), kind=spec.kind,
                                        time_step=spec.time_step, freq_axis=spec.freq_axis, source=(s, i)))
    return segments


def colormap_indices(values):
    """Min-max normalized values as 0..255 colormap rows, flipped so row 0 is the highest frequency."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise ParameterError("cannot render an empty segment")
    lo, hi = values.min(), values.max()
    if hi > lo:
        normalized = (values - lo) / (hi - lo)
    else:
        normalized = np.zeros_like(values)
    return np.flipud(np.clip(np.round(normalized * 255.0), 0, 255).astype(np.int64))


def render_image(segment: Spectrogram, clip_id: str = "", duration_ms: int = 0) -> SpectrogramImage:
    """
    Map a segment through the 256-entry colormap and resize to 224x224 with
    bilinear interpolation on corner-aligned sample grids (align_corners=True,
    so image corners hold the segment's corner colors).
    """
    rgb = COLORMAP[colormap_indices(segment.values)]    # [F x W x 3]
    tensor = torch.from_numpy(np.ascontiguousarray(rgb.transpose(2, 0, 1)))[None]
    resized = F.interpolate(tensor, size=(IMAGE_SIZE, IMAGE_SIZE), mode="bilinear", align_corners=True)
    pixels = resized[0].clamp(0.0, 1.0).permute(1, 2, 0).numpy().astype(np.float32)
    syllable, window = segment.source
    return SpectrogramImage(pixels=pixels, clip_id=clip_id, syllable=syllable, window=window,
                            kind=segment.kind, duration_ms=int(duration_ms))


def save_image(image: SpectrogramImage, path):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    data = np.round(np.clip(image.pixels, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(data, mode="RGB").save(path, format="PNG")


def load_image(path) -> np.ndarray:
    """224x224x3 float32 pixels in [0, 1]."""
    with Image.open(path) as im:
        data = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    if data.shape != (IMAGE_SIZE, IMAGE_SIZE, 3):
        raise ParameterError("{}: image is {}, expected {}x{}x3".format(path, data.shape, IMAGE_SIZE, IMAGE_SIZE))
    return data


def save_spectrogram(spec: Spectrogram, path):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    header = _SPEC_HEADER.pack(_SPEC_MAGIC, _SPEC_VERSION, KIND_CODES[spec.kind], spec.num_rows,
                               spec.num_columns, float(spec.time_step))
    with open(path, "wb") as f:
        f.write(header)
        f.write(np.ascontiguousarray(spec.values, dtype="<f4").tobytes())


def load_spectrogram(path) -> Spectrogram:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < _SPEC_HEADER.size:
        raise SpectrogramFormatError("{}: truncated header".format(path))
    magic, version, kind_code, rows, cols, time_step = _SPEC_HEADER.unpack_from(blob)
    if magic != _SPEC_MAGIC or version != _SPEC_VERSION:
        raise SpectrogramFormatError("{}: not a version {} SPEC file".format(path, _SPEC_VERSION))
    kinds = {v: k for k, v in KIND_CODES.items()}
    if kind_code not in kinds:
        raise SpectrogramFormatError("{}: unknown kind code {}".format(path, kind_code))
    payload = blob[_SPEC_HEADER.size:]
    if len(payload) != rows * cols * 4:
        raise SpectrogramFormatError("{}: payload holds {} bytes, header announces {}x{} f32".format(
            path, len(payload), rows, cols))
    values = np.frombuffer(payload, dtype="<f4").reshape(rows, cols).astype(np.float64)
    return Spectrogram(values=values, kind=kinds[kind_code], time_step=time_step)
