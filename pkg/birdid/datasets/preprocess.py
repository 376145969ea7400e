"""
Pre-emphasis, Hamming-windowed framing, frame energies and energy-based
syllable segmentation.
"""
import math
import os
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np
import pandas as pd
from numpy.lib.stride_tricks import sliding_window_view
from scipy.signal import lfilter
from scipy.signal.windows import hamming

from birdid.util.errors import ParameterError, SignalTooShortError

from .audio import AudioClip


@dataclass(frozen=True)
class FrameSequence:
    frames: np.ndarray      # [num_frames x frame_len], windowed
    frame_len: int
    hop: int
    offsets: np.ndarray     # sample index of each frame start
    sample_rate: int
    clip_id: str = ""

    def __len__(self):
        return self.frames.shape[0]

    @property
    def time_step(self):
        return self.hop / self.sample_rate


@dataclass(frozen=True)
class Syllable:
    start_frame: int
    end_frame: int          # inclusive
    start_sample: int
    end_sample: int         # inclusive
    peak_energy: float

    @property
    def num_frames(self):
        return self.end_frame - self.start_frame + 1


def pre_emphasize(clip: AudioClip, lam: float = 0.95) -> AudioClip:
    """y(n) = x(n) - lam * x(n-1), with x(-1) = 0 so the length is unchanged."""
    if not 0.0 <= lam < 1.0:
        raise ParameterError("pre-emphasis coefficient must lie in [0, 1), got {}".format(lam))
    emphasized = lfilter([1.0, -lam], [1.0], clip.samples)
    return AudioClip(samples=emphasized, sample_rate=clip.sample_rate, source_id=clip.source_id)


def frame_length(sample_rate, frame_ms):
    return int(round(frame_ms / 1000.0 * sample_rate))


def hop_length(frame_len, overlap):
    return int(math.floor((1.0 - overlap) * frame_len))


def frame_signal(clip: AudioClip, frame_ms: float = 50.0, overlap: float = 0.30) -> FrameSequence:
    """
    Cut a clip into Hamming-windowed frames of round(frame_ms * sr) samples,
    hop floor((1 - overlap) * frame_len). Trailing samples that do not fill
    a whole frame are dropped.
    """
    if not 0.0 <= overlap < 1.0:
        raise ParameterError("overlap must lie in [0, 1), got {}".format(overlap))
    n = frame_length(clip.sample_rate, frame_ms)
    hop = hop_length(n, overlap)
    if n < 1 or hop < 1:
        raise ParameterError("frame of {} ms with overlap {} gives frame_len {} / hop {}".format(
            frame_ms, overlap, n, hop))
    if len(clip) < n:
        raise SignalTooShortError("clip '{}' has {} samples, shorter than one {}-sample frame".format(
            clip.source_id, len(clip), n))

    frames = sliding_window_view(clip.samples, n)[::hop] * hamming(n, sym=True)
    offsets = np.arange(frames.shape[0]) * hop
    return FrameSequence(frames=np.ascontiguousarray(frames), frame_len=n, hop=hop, offsets=offsets,
                         sample_rate=clip.sample_rate, clip_id=clip.source_id)


def frame_energies(frames: FrameSequence) -> np.ndarray:
    if len(frames) == 0:
        raise ParameterError("no frames to measure")
    return np.sum(frames.frames ** 2, axis=1)


def segment_syllables(energies, high_factor: float = 4.0, low_factor: float = 2.0, min_frames: int = 2,
                      merge_gap: int = 1, hop: int = 1, frame_len: int = 1) -> List[Syllable]:
    """
    Hysteresis detection relative to the median frame energy.

    A syllable opens on a frame above high_factor * median and extends while
    frames stay above low_factor * median. Runs shorter than min_frames are
    dropped, then runs separated by at most merge_gap quiet frames are joined.
    hop and frame_len convert frame indices to sample positions; the defaults
    leave positions in frame units.
    """
    if not high_factor >= low_factor > 0:
        raise ParameterError("need high_factor >= low_factor > 0, got {} / {}".format(high_factor, low_factor))
    energies = np.asarray(energies, dtype=np.float64)
    if energies.size == 0:
        return []

    noise_floor = np.median(energies)
    high = high_factor * noise_floor
    low = low_factor * noise_floor

    runs = []
    start = None
    for i, e in enumerate(energies):
        if start is None:
            if e > high:
                start = i
        elif not e > low:
            runs.append([start, i - 1])
            start = None
    if start is not None:
        runs.append([start, len(energies) - 1])

    runs = [r for r in runs if r[1] - r[0] + 1 >= min_frames]

    merged = []
    for run in runs:
        if merged and run[0] - merged[-1][1] - 1 <= merge_gap:
            merged[-1][1] = run[1]
        else:
            merged.append(run)

    return [Syllable(start_frame=s, end_frame=e,
                     start_sample=s * hop, end_sample=e * hop + frame_len - 1,
                     peak_energy=float(energies[s:e + 1].max()))
            for s, e in merged]


def preprocess_clip(clip: AudioClip, args) -> Tuple[FrameSequence, np.ndarray, List[Syllable]]:
    """Pre-emphasis, framing, energies and segmentation with the run configuration."""
    frames = frame_signal(pre_emphasize(clip, args.preemphasis), args.frame_ms, args.overlap)
    energies = frame_energies(frames)
    syllables = segment_syllables(energies, args.high_factor, args.low_factor, args.min_frames,
                                  args.merge_gap, hop=frames.hop, frame_len=frames.frame_len)
    return frames, energies, syllables


SEGMENT_COLUMNS = ["clip_id", "start_sample", "end_sample", "peak_energy"]


def write_segments(rows: Sequence[Tuple[str, Syllable]], path):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    df = pd.DataFrame([(clip_id, s.start_sample, s.end_sample, s.peak_energy) for clip_id, s in rows],
                      columns=SEGMENT_COLUMNS)
    df.to_csv(path, index=False, lineterminator="\n", float_format="%.9g")


def read_segments(path, hop, frame_len):
    """Segments grouped by clip id, with frame indices recovered from sample positions."""
    df = pd.read_csv(path, dtype={"clip_id": str})
    by_clip = {}
    for row in df.itertuples(index=False):
        start_frame = int(row.start_sample) // hop
        end_frame = (int(row.end_sample) - frame_len + 1) // hop
        by_clip.setdefault(row.clip_id, []).append(
            Syllable(start_frame=start_frame, end_frame=end_frame, start_sample=int(row.start_sample),
                     end_sample=int(row.end_sample), peak_energy=float(row.peak_energy)))
    return by_clip
