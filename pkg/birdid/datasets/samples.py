"""
Sample sets over rendered spectrogram images: manifests, stratified
largest-remainder splits, inverse-frequency class weights and seeded
batch iteration.
"""
import os
from collections import OrderedDict, defaultdict
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch
from PIL import Image
from torchvision.transforms import functional as F

from birdid.util.errors import (AlignmentError, DatasetError, InsufficientSamplesError, LabelError,
                                ParameterError, ShapeError)

from .tfr import IMAGE_SIZE, KINDS

SPLITS = ("train", "val", "test")
MANIFEST_COLUMNS = ["key", "kind", "duration_ms", "path", "class_index", "class_name", "clip_id"]
MIN_CLASS_ENTRIES = 3


@dataclass(frozen=True)
class SampleEntry:
    key: str
    path: str
    class_index: int
    clip_id: str


@dataclass(frozen=True)
class SampleSet:
    entries: Tuple[SampleEntry, ...]
    class_names: Tuple[str, ...]
    kind: str
    duration_ms: int

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        object.__setattr__(self, "class_names", tuple(self.class_names))
        if self.kind not in KINDS:
            raise DatasetError("unknown sample kind '{}'".format(self.kind))
        if not self.entries:
            raise DatasetError("sample set {} / {} ms is empty".format(self.kind, self.duration_ms))
        num_classes = len(self.class_names)
        for e in self.entries:
            if not 0 <= e.class_index < num_classes:
                raise LabelError("entry '{}' has class index {} outside [0, {})".format(
                    e.key, e.class_index, num_classes))
        counts = self.class_counts()
        missing = [self.class_names[c] for c in range(num_classes) if counts[c] == 0]
        if missing:
            raise DatasetError("classes without samples: {}".format(", ".join(missing)))

    def __len__(self):
        return len(self.entries)

    @property
    def num_classes(self):
        return len(self.class_names)

    @property
    def keys(self):
        return [e.key for e in self.entries]

    @property
    def labels(self):
        return np.array([e.class_index for e in self.entries], dtype=np.int64)

    def class_counts(self, indices=None):
        labels = self.labels if indices is None else self.labels[np.asarray(indices, dtype=np.int64)]
        return np.bincount(labels, minlength=self.num_classes)


@dataclass(frozen=True)
class SplitAssignment:
    train: Tuple[int, ...]
    val: Tuple[int, ...]
    test: Tuple[int, ...]
    seed: Optional[int] = None
    ratios: Tuple[float, float, float] = (0.8, 0.1, 0.1)

    def __post_init__(self):
        for name in SPLITS:
            object.__setattr__(self, name, tuple(int(i) for i in getattr(self, name)))
        seen = set()
        for name in SPLITS:
            portion = set(getattr(self, name))
            if portion & seen:
                raise DatasetError("split portions overlap")
            seen |= portion

    def portion(self, name) -> List[int]:
        if name not in SPLITS:
            raise ParameterError("unknown split portion '{}', expected one of {}".format(name, SPLITS))
        return list(getattr(self, name))

    def __len__(self):
        return len(self.train) + len(self.val) + len(self.test)


@dataclass(frozen=True)
class ClassWeights:
    omega: np.ndarray

    def __post_init__(self):
        omega = np.asarray(self.omega, dtype=np.float64)
        if omega.ndim != 1 or not np.all(omega > 0) or not np.all(np.isfinite(omega)):
            raise ParameterError("class weights must be a vector of positive finite values")
        object.__setattr__(self, "omega", omega)

    def __len__(self):
        return self.omega.shape[0]

    def as_tensor(self, dtype=torch.float32):
        return torch.as_tensor(self.omega, dtype=dtype)


def _largest_remainder(n, ratios):
    quotas = np.asarray(ratios, dtype=np.float64) * n
    counts = np.floor(quotas).astype(int)
    order = np.argsort(-(quotas - counts), kind="stable")
    for i in order[:n - counts.sum()]:
        counts[i] += 1
    return counts


def split_dataset(sample_set: SampleSet, ratios=(0.8, 0.1, 0.1), seed=0, by_clip=False) -> SplitAssignment:
    """
    Per-class shuffle with a generator seeded from `seed`, then
    largest-remainder allocation of each class to train / val / test.

    With by_clip, whole clips are allocated so the windows of one recording
    never straddle two portions.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or min(ratios) < 0 or abs(sum(ratios) - 1.0) > 1e-9:
        raise ParameterError("split ratios must be three non-negative values summing to 1, got {}".format(ratios))

    rng = np.random.default_rng(seed)
    labels = sample_set.labels
    portions = [[], [], []]
    for c, name in enumerate(sample_set.class_names):
        members = np.flatnonzero(labels == c)
        if by_clip:
            groups = OrderedDict()
            for i in members:
                groups.setdefault(sample_set.entries[i].clip_id, []).append(int(i))
            units = [groups[k] for k in sorted(groups)]
        else:
            units = [[int(i)] for i in members]
        if len(units) < MIN_CLASS_ENTRIES:
            raise InsufficientSamplesError(name, len(units), MIN_CLASS_ENTRIES)
        order = rng.permutation(len(units))
        counts = _largest_remainder(len(units), ratios)
        start = 0
        for p, count in enumerate(counts):
            for u in order[start:start + count]:
                portions[p].extend(units[u])
            start += count
    train, val, test = (sorted(p) for p in portions)
    return SplitAssignment(train=train, val=val, test=test, seed=seed, ratios=ratios)


def class_weights(sample_set: SampleSet, mode="inverse_frequency", indices=None) -> ClassWeights:
    """omega_c = N / (C * N_c) over the given indices (all entries by default), or all ones."""
    if mode == "uniform":
        return ClassWeights(np.ones(sample_set.num_classes))
    if mode != "inverse_frequency":
        raise ParameterError("unknown class weight mode '{}'".format(mode))
    counts = sample_set.class_counts(indices)
    if counts.sum() == 0:
        raise DatasetError("cannot weight classes of an empty selection")
    if np.any(counts == 0):
        empty = [sample_set.class_names[c] for c in np.flatnonzero(counts == 0)]
        raise DatasetError("classes absent from the weighted selection: {}".format(", ".join(empty)))
    return ClassWeights(counts.sum() / (sample_set.num_classes * counts.astype(np.float64)))


def batches(indices: Sequence[int], batch_size=50, epoch_seed=0) -> List[List[int]]:
    """Seeded shuffle, then consecutive chunks; the final partial batch is kept."""
    if batch_size < 1:
        raise ParameterError("batch_size must be >= 1, got {}".format(batch_size))
    indices = np.asarray(list(indices), dtype=np.int64)
    if indices.size == 0:
        return []
    shuffled = indices[np.random.default_rng(epoch_seed).permutation(indices.size)]
    return [shuffled[i:i + batch_size].tolist() for i in range(0, shuffled.size, batch_size)]


def check_alignment(sets):
    """All sets of one experiment must list the same keys in the same order with the same labels."""
    sets = list(sets.values()) if isinstance(sets, dict) else list(sets)
    if not sets:
        return
    reference = sets[0]
    for other in sets[1:]:
        if other.class_names != reference.class_names:
            raise AlignmentError("{} and {} sets disagree on class names".format(reference.kind, other.kind))
        if other.keys != reference.keys:
            raise AlignmentError("{} and {} sets do not list the same sample keys in the same order".format(
                reference.kind, other.kind))
        if not np.array_equal(other.labels, reference.labels):
            raise AlignmentError("{} and {} sets disagree on labels".format(reference.kind, other.kind))


def write_manifest(sets, path):
    sets = list(sets.values()) if isinstance(sets, dict) else list(sets)
    root = os.path.dirname(os.path.abspath(path))
    rows = []
    for s in sets:
        for e in s.entries:
            rows.append((e.key, s.kind, s.duration_ms, os.path.relpath(os.path.abspath(e.path), root),
                         e.class_index, s.class_names[e.class_index], e.clip_id))
    os.makedirs(root, exist_ok=True)
    pd.DataFrame(rows, columns=MANIFEST_COLUMNS).to_csv(path, index=False, lineterminator="\n")


def read_manifest(path, duration_ms=None) -> Dict[str, SampleSet]:
    """
    One SampleSet per kind of the requested duration, aligned across kinds.
    Image paths resolve against the manifest directory.
    """
    df = pd.read_csv(path, dtype={"key": str, "path": str, "class_name": str, "clip_id": str, "kind": str},
                     keep_default_na=False)
    if list(df.columns) != MANIFEST_COLUMNS:
        raise DatasetError("{}: manifest header must be {}".format(path, ",".join(MANIFEST_COLUMNS)))
    if duration_ms is not None:
        df = df[df["duration_ms"] == int(duration_ms)]
    if df.empty:
        raise DatasetError("{}: no samples for duration {} ms".format(path, duration_ms))
    durations = sorted(df["duration_ms"].unique())
    if len(durations) != 1:
        raise DatasetError("{}: several durations {} present, pick one".format(path, durations))

    names = {}
    for idx, name in zip(df["class_index"], df["class_name"]):
        if names.setdefault(int(idx), name) != name:
            raise LabelError("{}: class index {} names both '{}' and '{}'".format(path, idx, names[idx], name))
    class_names = tuple(names[c] for c in range(len(names))) if sorted(names) == list(range(len(names))) else None
    if class_names is None:
        raise LabelError("{}: class indices are not contiguous from 0".format(path))

    root = os.path.dirname(os.path.abspath(path))
    sets = {}
    for kind in KINDS:
        rows = df[df["kind"] == kind]
        if rows.empty:
            continue
        entries = [SampleEntry(key=r.key, path=os.path.join(root, r.path), class_index=int(r.class_index),
                               clip_id=r.clip_id) for r in rows.itertuples(index=False)]
        sets[kind] = SampleSet(entries=entries, class_names=class_names, kind=kind,
                               duration_ms=int(durations[0]))
    check_alignment(sets)
    return sets


def write_split(split: SplitAssignment, keys: Sequence[str], path):
    assigned = {}
    for name in SPLITS:
        for i in split.portion(name):
            assigned[i] = name
    if len(assigned) != len(keys):
        raise DatasetError("split covers {} of {} samples".format(len(assigned), len(keys)))
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    df = pd.DataFrame({"key": list(keys), "split": [assigned[i] for i in range(len(keys))]})
    df.to_csv(path, index=False, lineterminator="\n")


def read_split(path, keys: Sequence[str], seed=None) -> SplitAssignment:
    df = pd.read_csv(path, dtype=str, keep_default_na=False)
    if list(df.columns) != ["key", "split"]:
        raise DatasetError("{}: split file header must be key,split".format(path))
    repeated = df["key"][df["key"].duplicated()]
    if not repeated.empty:
        raise AlignmentError("{}: key '{}' is listed more than once".format(path, repeated.iloc[0]))
    position = {k: i for i, k in enumerate(keys)}
    portions = defaultdict(list)
    for key, name in zip(df["key"], df["split"]):
        if key not in position:
            raise AlignmentError("{}: key '{}' is not in the sample set".format(path, key))
        if name not in SPLITS:
            raise DatasetError("{}: unknown split '{}'".format(path, name))
        portions[name].append(position[key])
    if sum(len(v) for v in portions.values()) != len(keys):
        raise AlignmentError("{}: split lists {} keys for {} samples".format(path, len(df), len(keys)))
    return SplitAssignment(train=sorted(portions["train"]), val=sorted(portions["val"]),
                           test=sorted(portions["test"]), seed=seed)


class SpectrogramImageDataset(torch.utils.data.Dataset):
    """Rendered images of one sample set as (3x224x224 float tensor, class index)."""

    def __init__(self, sample_set: SampleSet, indices=None):
        self.sample_set = sample_set
        self.indices = list(range(len(sample_set))) if indices is None else list(indices)

    def __len__(self):
        return len(self.indices)

    def __getitem__(self, idx):
        entry = self.sample_set.entries[self.indices[idx]]
        with Image.open(entry.path) as im:
            img = F.to_tensor(im.convert("RGB"))
        if img.shape != (3, IMAGE_SIZE, IMAGE_SIZE):
            raise ShapeError("{}: image tensor is {}, expected (3, {}, {})".format(
                entry.path, tuple(img.shape), IMAGE_SIZE, IMAGE_SIZE))
        return img, entry.class_index
