"""
Backbone modules.

The frozen feature extractor of a transfer model: a seeded random
convolutional surrogate, or feature vectors computed elsewhere and
imported from a FEAT file.
"""
import math
import os
import struct
from collections import OrderedDict
from dataclasses import dataclass
from typing import Dict, Iterable, Optional, Sequence

import numpy as np
import torch
from torch import nn
from tqdm import tqdm

from birdid.datasets.samples import SampleSet, SpectrogramImageDataset
from birdid.datasets.tfr import IMAGE_SIZE, SpectrogramImage
from birdid.util.errors import (AlignmentError, DimensionError, FeatureFormatError, ParameterError, ShapeError,
                                UnknownKeyError)
from birdid.util.misc import derive_seed

_FEAT_HEADER = struct.Struct("<4sHII")
_FEAT_MAGIC = b"FEAT"
_FEAT_VERSION = 1
_KEY_LEN = struct.Struct("<H")


@dataclass(frozen=True)
class FeatureVector:
    key: str
    values: np.ndarray


class SurrogateBackbone(nn.Module):
    """
    conv3x3 -> ReLU -> maxpool 2x2 blocks with the given widths, followed by
    global average pooling. Weights are Xavier-uniform from a generator
    seeded with `seed`, biases are zero, and nothing requires grad.
    """

    def __init__(self, channel_widths: Sequence[int] = (8, 16, 32, 64), seed: int = 0, in_channels: int = 3):
        super().__init__()
        if not channel_widths:
            raise ParameterError("surrogate backbone needs at least one conv block")
        generator = torch.Generator().manual_seed(int(seed))
        layers = []
        self.bounds = []
        prev = in_channels
        for width in channel_widths:
            conv = nn.Conv2d(prev, width, kernel_size=3, stride=1, padding=1)
            fan_in, fan_out = prev * 9, width * 9
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            with torch.no_grad():
                conv.weight.uniform_(-bound, bound, generator=generator)
                conv.bias.zero_()
            layers += [conv, nn.ReLU(inplace=True), nn.MaxPool2d(2)]
            self.bounds.append(bound)
            prev = width
        self.body = nn.Sequential(*layers)
        self.body.requires_grad_(False)
        self.num_channels = prev
        self.seed = int(seed)
        self.eval()

    def forward(self, x):
        return self.body(x).mean(dim=(2, 3))


def build_surrogate(seed, channel_widths=(8, 16, 32, 64)) -> SurrogateBackbone:
    return SurrogateBackbone(channel_widths=tuple(channel_widths), seed=seed)


def build_backbone(kind, args) -> SurrogateBackbone:
    # one surrogate per channel, each from its own seed stream
    return build_surrogate(derive_seed(args.seed, "backbone", kind), args.backbone_widths)


def _as_batch(image):
    if isinstance(image, SpectrogramImage):
        image = image.pixels
    if isinstance(image, np.ndarray):
        if image.shape != (IMAGE_SIZE, IMAGE_SIZE, 3):
            raise ShapeError("image is {}, expected ({}, {}, 3)".format(image.shape, IMAGE_SIZE, IMAGE_SIZE))
        image = torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1), dtype=np.float32))
    if image.dim() == 3:
        image = image[None]
    if image.dim() != 4 or tuple(image.shape[1:]) != (3, IMAGE_SIZE, IMAGE_SIZE):
        raise ShapeError("image batch is {}, expected (N, 3, {}, {})".format(
            tuple(image.shape), IMAGE_SIZE, IMAGE_SIZE))
    return image.float()


@torch.no_grad()
def extract_features(backbone: SurrogateBackbone, image, key: str = "") -> FeatureVector:
    """Frozen forward pass of one 224x224x3 image (HWC array, CHW tensor or SpectrogramImage)."""
    if isinstance(image, SpectrogramImage) and not key:
        key = image.key
    features = backbone(_as_batch(image))[0]
    return FeatureVector(key=key, values=features.numpy().copy())


@torch.no_grad()
def extract_set_features(backbone: SurrogateBackbone, sample_set: SampleSet, batch_size=50, num_workers=0,
                         verbose=True) -> torch.Tensor:
    """[N x D] features of every image of a sample set, in entry order."""
    loader = torch.utils.data.DataLoader(SpectrogramImageDataset(sample_set), batch_size=batch_size,
                                         shuffle=False, num_workers=num_workers)
    chunks = []
    desc = "features {} {}ms".format(sample_set.kind, sample_set.duration_ms)
    for images, _ in tqdm(loader, desc=desc, disable=not verbose):
        chunks.append(backbone(images))
    return torch.cat(chunks, dim=0)


def export_features(features, path):
    """Write key -> vector pairs (a mapping or FeatureVectors) in the FEAT format."""
    if isinstance(features, dict):
        items = list(features.items())
    else:
        items = [(f.key, f.values) for f in features]
    dims = {np.asarray(v).shape for _, v in items}
    if len(dims) > 1:
        raise DimensionError("feature vectors of mixed shapes {}".format(sorted(dims)))
    dim = int(np.asarray(items[0][1]).shape[0]) if items else 0
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "wb") as f:
        f.write(_FEAT_HEADER.pack(_FEAT_MAGIC, _FEAT_VERSION, dim, len(items)))
        for key, values in items:
            raw = key.encode("utf-8")
            f.write(_KEY_LEN.pack(len(raw)))
            f.write(raw)
            f.write(np.asarray(values, dtype="<f4").tobytes())


def import_features(path, manifest_keys: Optional[Iterable[str]] = None,
                    expected_dim: Optional[int] = None) -> Dict[str, np.ndarray]:
    """
    Read a FEAT file into an ordered key -> float32 vector mapping. Reading
    fails closed: a truncated file never yields partial data.
    """
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < _FEAT_HEADER.size:
        raise FeatureFormatError("{}: truncated header".format(path))
    magic, version, dim, count = _FEAT_HEADER.unpack_from(blob)
    if magic != _FEAT_MAGIC or version != _FEAT_VERSION:
        raise FeatureFormatError("{}: not a version {} FEAT file".format(path, _FEAT_VERSION))
    if dim == 0 and count > 0:
        raise DimensionError("{}: zero-dimensional feature vectors".format(path))
    if expected_dim is not None and dim != expected_dim:
        raise DimensionError("{}: features have dimension {}, expected {}".format(path, dim, expected_dim))

    known = set(manifest_keys) if manifest_keys is not None else None
    features = OrderedDict()
    offset = _FEAT_HEADER.size
    for _ in range(count):
        if offset + _KEY_LEN.size > len(blob):
            raise FeatureFormatError("{}: truncated record".format(path))
        (key_len,) = _KEY_LEN.unpack_from(blob, offset)
        offset += _KEY_LEN.size
        end = offset + key_len + 4 * dim
        if end > len(blob):
            raise FeatureFormatError("{}: truncated record".format(path))
        key = blob[offset:offset + key_len].decode("utf-8")
        values = np.frombuffer(blob, dtype="<f4", count=dim, offset=offset + key_len).astype(np.float32)
        offset = end
        if known is not None and key not in known:
            raise UnknownKeyError("{}: key '{}' is not in the sample manifest".format(path, key))
        if not np.all(np.isfinite(values)):
            raise FeatureFormatError("{}: non-finite values for key '{}'".format(path, key))
        features[key] = values
    if offset != len(blob):
        raise FeatureFormatError("{}: {} trailing bytes after {} records".format(path, len(blob) - offset, count))
    return features


class FeatureStore(object):
    """Imported features standing in for a backbone on one channel."""

    def __init__(self, features: Dict[str, np.ndarray]):
        if not features:
            raise FeatureFormatError("feature store is empty")
        self.features = features
        self.num_channels = int(next(iter(features.values())).shape[0])

    @classmethod
    def from_file(cls, path, manifest_keys=None):
        return cls(import_features(path, manifest_keys))

    def __len__(self):
        return len(self.features)

    def lookup(self, keys: Sequence[str]) -> torch.Tensor:
        missing = [k for k in keys if k not in self.features]
        if missing:
            raise AlignmentError("{} sample(s) have no imported features, first: '{}'".format(
                len(missing), missing[0]))
        return torch.from_numpy(np.stack([self.features[k] for k in keys]))


def feature_file(features_dir, kind, duration_ms):
    return os.path.join(features_dir, "{}_{}.feat".format(kind, duration_ms))
