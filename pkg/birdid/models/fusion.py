"""
Transfer (TF), feature-fusion (Fe-fuse) and result-fusion (Re-fuse) models.

Every model reads frozen backbone features from a FeatureBank and owns one
trainable ClassifierHead. Channels are always concatenated in the order
(Ch, Mel, Spe).
"""
import hashlib
import json
import os
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from birdid.datasets.samples import (SampleSet, SplitAssignment, check_alignment, class_weights, read_split,
                                     write_split)
from birdid.config import save_config
from birdid.engine import fit
from birdid.eval import TrainHistory, emit_history, read_history
from birdid.util.errors import AlignmentError, CheckpointFormatError, DatasetError, DimensionError, ProtocolError
from birdid.util.misc import derive_seed

from .backbone import FeatureStore, build_backbone, extract_set_features, feature_file
from .head import (ClassifierHead, count_trainable_params, head_parameter_count, load_checkpoint,
                   save_checkpoint)

CHANNELS = ("Ch", "Mel", "Spe")
CHANNEL_ARGS = {"ch": "Ch", "mel": "Mel", "spe": "Spe"}
MODEL_IDS = ("tf", "fe-fuse", "re-fuse")


@dataclass
class FeatureBank:
    """Frozen features of one experiment: aligned keys and labels, one [N x D] tensor per channel."""
    keys: List[str]
    labels: torch.Tensor
    class_names: List[str]
    features: Dict[str, torch.Tensor]
    duration_ms: int = 0

    def __post_init__(self):
        self.labels = torch.as_tensor(self.labels, dtype=torch.int64)
        n = len(self.keys)
        if self.labels.shape != (n,):
            raise AlignmentError("{} labels for {} keys".format(tuple(self.labels.shape), n))
        for kind, x in self.features.items():
            if kind not in CHANNELS:
                raise AlignmentError("unknown channel '{}'".format(kind))
            if x.dim() != 2 or x.shape[0] != n:
                raise AlignmentError("{} features of shape {} for {} keys".format(kind, tuple(x.shape), n))
        self._position = {k: i for i, k in enumerate(self.keys)}

    def __len__(self):
        return len(self.keys)

    @property
    def num_classes(self):
        return len(self.class_names)

    def channel(self, kind) -> torch.Tensor:
        if kind not in self.features:
            raise AlignmentError("no {} features in this experiment".format(kind))
        return self.features[kind]

    def dim(self, kind):
        return self.channel(kind).shape[1]

    def class_counts(self, indices=None):
        labels = self.labels.numpy()
        if indices is not None:
            labels = labels[np.asarray(indices, dtype=np.int64)]
        return np.bincount(labels, minlength=self.num_classes)

    def indices(self, keys: Sequence[str]) -> List[int]:
        missing = [k for k in keys if k not in self._position]
        if missing:
            raise AlignmentError("{} sample(s) missing from the experiment, first: '{}'".format(
                len(missing), missing[0]))
        return [self._position[k] for k in keys]


def build_feature_bank(sets: Dict[str, SampleSet], args, verbose=True):
    """
    Frozen features of every channel present in `sets`. A channel reads
    <features_dir>/<kind>_<duration>.feat when that file exists, otherwise
    it runs its own seeded surrogate backbone.

    Returns (bank, backbones) with the surrogates that were used.
    """
    check_alignment(sets)
    reference = next(iter(sets.values()))
    keys = reference.keys
    features, backbones = {}, {}
    for kind in CHANNELS:
        if kind not in sets:
            continue
        path = feature_file(args.features_dir, kind, reference.duration_ms) if args.features_dir else None
        if path and os.path.exists(path):
            if verbose:
                print("reading {} features from {}".format(kind, path))
            features[kind] = FeatureStore.from_file(path, keys).lookup(keys)
        else:
            backbones[kind] = build_backbone(kind, args)
            features[kind] = extract_set_features(backbones[kind], sets[kind], batch_size=args.batch_size,
                                                  num_workers=args.num_workers, verbose=verbose)
    bank = FeatureBank(keys=keys, labels=reference.labels, class_names=list(reference.class_names),
                       features=features, duration_ms=reference.duration_ms)
    return bank, backbones


class FeatureNorm(nn.Module):
    """Per-dimension standardization with fixed statistics (buffers, never trained)."""

    def __init__(self, mean, std):
        super().__init__()
        self.register_buffer("mean", torch.as_tensor(mean, dtype=torch.float32))
        self.register_buffer("std", torch.as_tensor(std, dtype=torch.float32))

    @classmethod
    def fit(cls, x: torch.Tensor):
        x = x.detach().double()
        std = x.std(dim=0, unbiased=False)
        # constant dimensions pass through centred
        std = torch.where(std < 1e-6, torch.ones_like(std), std)
        return cls(x.mean(dim=0), std)

    @classmethod
    def identity(cls, dim):
        return cls(torch.zeros(dim), torch.ones(dim))

    def forward(self, x):
        return (x - self.mean) / self.std

    def save(self, path):
        np.savez(path, mean=self.mean.numpy(), std=self.std.numpy())

    @classmethod
    def load(cls, path):
        with np.load(path) as data:
            return cls(data["mean"], data["std"])


class _HeadModel(nn.Module):
    model_id = ""

    def __init__(self, head: ClassifierHead, split_fingerprint: str = ""):
        super().__init__()
        self.head = head
        self.split_fingerprint = split_fingerprint

    def head_input(self, bank: FeatureBank, indices) -> torch.Tensor:
        raise NotImplementedError

    @torch.no_grad()
    def probabilities(self, bank: FeatureBank, indices) -> torch.Tensor:
        """[len(indices) x C] softmax outputs in double precision."""
        self.eval()
        logits = self.head(self.head_input(bank, indices).float())
        return F.softmax(logits.double(), dim=-1)

    def check_dims(self, bank: FeatureBank):
        x = self.head_input(bank, [0])
        if x.shape[1] != self.head.input_dim:
            raise DimensionError("{} head expects {} inputs but the features give {}".format(
                self.model_id, self.head.input_dim, x.shape[1]))
        if self.head.num_classes != bank.num_classes:
            raise DimensionError("head has {} classes, experiment has {}".format(
                self.head.num_classes, bank.num_classes))


class TfModel(_HeadModel):
    """ Frozen backbone features of one channel, standardized, into a classifier head """
    model_id = "tf"

    def __init__(self, channel: str, head: ClassifierHead, norm: FeatureNorm, split_fingerprint: str = ""):
        super().__init__(head, split_fingerprint)
        if channel not in CHANNELS:
            raise AlignmentError("unknown channel '{}'".format(channel))
        self.channel = channel
        self.norm = norm

    @property
    def channel_id(self):
        return self.channel.lower()

    def head_input(self, bank, indices):
        return self.norm(bank.channel(self.channel)[indices])


class FeFuseModel(_HeadModel):
    """ Concatenated (Ch, Mel, Spe) backbone features into one head with D_in = 3 D """
    model_id = "fe-fuse"
    channel_id = "fused"

    def __init__(self, head: ClassifierHead, norm: FeatureNorm, split_fingerprint: str = ""):
        super().__init__(head, split_fingerprint)
        self.norm = norm

    def head_input(self, bank, indices):
        return self.norm(torch.cat([bank.channel(kind)[indices] for kind in CHANNELS], dim=1))


class ReFuseModel(_HeadModel):
    """ Concatenated softmax outputs of three frozen TF models into a head with D_in = 3 C """
    model_id = "re-fuse"
    channel_id = "fused"

    def __init__(self, members: Dict[str, TfModel], head: ClassifierHead, split_fingerprint: str = ""):
        super().__init__(head, split_fingerprint)
        if sorted(members) != sorted(CHANNELS):
            raise AlignmentError("result fusion needs one TF model per channel {}, got {}".format(
                CHANNELS, sorted(members)))
        self.members = nn.ModuleDict({kind: members[kind] for kind in CHANNELS})
        self.members.requires_grad_(False)

    def head_input(self, bank, indices):
        return torch.cat([self.members[kind].probabilities(bank, indices).float() for kind in CHANNELS], dim=1)


def predict(model: _HeadModel, bank: FeatureBank, keys) -> torch.Tensor:
    """Class probabilities for one sample key or a list of keys."""
    single = isinstance(keys, str)
    indices = bank.indices([keys] if single else list(keys))
    probs = model.probabilities(bank, indices)
    return probs[0] if single else probs


def split_fingerprint(keys: Sequence[str], split: SplitAssignment) -> str:
    sha = hashlib.sha1()
    for name in ("train", "val", "test"):
        sha.update(name.encode("utf-8"))
        for i in split.portion(name):
            sha.update(b"\0" + keys[i].encode("utf-8"))
    return sha.hexdigest()


def head_dims(input_dim, args, num_classes):
    return (int(input_dim), int(args.hidden_dims[0]), int(args.hidden_dims[1]), int(num_classes))


def _train(model: _HeadModel, bank: FeatureBank, split: SplitAssignment, args, output_dir, verbose):
    model.check_dims(bank)
    if head_parameter_count(model.head) != count_trainable_params(model.head.dims):
        raise DimensionError("trainable parameters do not match the head dims")
    with torch.no_grad():
        inputs = model.head_input(bank, list(range(len(bank))))
    weights = class_weights_for(bank, split, args.weight_mode)
    history, optimizer = fit(model.head, inputs, bank.labels, bank.keys, split, weights, args,
                             output_dir=output_dir, verbose=verbose)
    model.optimizer = optimizer
    return model, history


def class_weights_for(bank: FeatureBank, split: SplitAssignment, mode):
    """Class weights computed on the train portion."""
    train = split.portion("train")
    if not train:
        raise DatasetError("the train portion is empty")
    return class_weights(bank, mode, indices=train)


def _norm_for(x: torch.Tensor, split: SplitAssignment, args):
    if args.feature_norm:
        return FeatureNorm.fit(x[split.portion("train")])
    return FeatureNorm.identity(x.shape[1])


def train_tf(bank: FeatureBank, split: SplitAssignment, args, channel: str, seed: Optional[int] = None,
             output_dir=None, verbose=True):
    """Transfer model on one channel; returns (TfModel, TrainHistory)."""
    x = bank.channel(channel)
    if seed is None:
        seed = derive_seed(args.seed, "head", "tf", channel)
    head = ClassifierHead(head_dims(x.shape[1], args, bank.num_classes), seed=seed)
    model = TfModel(channel, head, _norm_for(x, split, args), split_fingerprint(bank.keys, split))
    return _train(model, bank, split, args, output_dir, verbose)


def train_fe_fuse(bank: FeatureBank, split: SplitAssignment, args, seed: Optional[int] = None,
                  output_dir=None, verbose=True):
    """One head over the concatenated frozen features of the three channels."""
    missing = [kind for kind in CHANNELS if kind not in bank.features]
    if missing:
        raise AlignmentError("feature fusion needs all channels, missing {}".format(missing))
    x = torch.cat([bank.channel(kind) for kind in CHANNELS], dim=1)
    if seed is None:
        seed = derive_seed(args.seed, "head", "fe-fuse")
    head = ClassifierHead(head_dims(x.shape[1], args, bank.num_classes), seed=seed)
    model = FeFuseModel(head, _norm_for(x, split, args), split_fingerprint(bank.keys, split))
    return _train(model, bank, split, args, output_dir, verbose)


def train_re_fuse(members: Dict[str, TfModel], bank: FeatureBank, split: SplitAssignment, args,
                  seed: Optional[int] = None, output_dir=None, verbose=True):
    """
    Phase two of result fusion: the three phase-one TF models stay frozen and
    a head is trained on their concatenated softmax outputs over the same
    split they were trained on.
    """
    fingerprint = split_fingerprint(bank.keys, split)
    for kind, member in members.items():
        if member.split_fingerprint != fingerprint:
            raise ProtocolError("the {} model was trained on a different split".format(kind))
    if seed is None:
        seed = derive_seed(args.seed, "head", "re-fuse")
    head = ClassifierHead(head_dims(len(CHANNELS) * bank.num_classes, args, bank.num_classes), seed=seed)
    model = ReFuseModel(members, head, fingerprint)
    return _train(model, bank, split, args, output_dir, verbose)


def model_dir_name(model_id, channel_id, duration_ms):
    return "{}_{}_{}".format(model_id, channel_id, duration_ms)


def save_bundle(model: _HeadModel, history: TrainHistory, out_dir, args, split: SplitAssignment,
                keys: Sequence[str], duration_ms):
    """
    Everything needed to re-evaluate without retraining: head checkpoint(s),
    feature statistics, split, history and the resolved config.
    """
    os.makedirs(out_dir, exist_ok=True)
    save_checkpoint(model.head, _optimizer_of(model), os.path.join(out_dir, "head.ckpt"))
    history.checkpoint = os.path.join(out_dir, "head.ckpt")
    meta = {"model": model.model_id, "channel": model.channel_id, "duration_ms": int(duration_ms),
            "split_fingerprint": model.split_fingerprint, "dims": list(model.head.dims)}
    if isinstance(model, (TfModel, FeFuseModel)):
        model.norm.save(os.path.join(out_dir, "norm.npz"))
    if isinstance(model, ReFuseModel):
        for kind, member in model.members.items():
            save_checkpoint(member.head, _optimizer_of(member),
                            os.path.join(out_dir, "member_{}.ckpt".format(kind)))
            member.norm.save(os.path.join(out_dir, "member_{}_norm.npz".format(kind)))
    with open(os.path.join(out_dir, "bundle.json"), "w") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
    write_split(split, keys, os.path.join(out_dir, "split.csv"))
    emit_history(history, os.path.join(out_dir, "history.csv"))
    save_config(args, os.path.join(out_dir, "config.json"))


def _optimizer_of(model):
    """The optimizer a model was trained with, or a fresh one for a model that was never trained here."""
    optimizer = getattr(model, "optimizer", None)
    if optimizer is not None:
        return optimizer
    # zero moments over every head tensor, frozen members included
    return torch.optim.Adam(list(model.head.parameters()))


def load_bundle(bundle_dir, keys: Sequence[str]):
    """Returns (model, history, split, meta) from a directory written by save_bundle."""
    with open(os.path.join(bundle_dir, "bundle.json")) as f:
        meta = json.load(f)
    head, optimizer = load_checkpoint(os.path.join(bundle_dir, "head.ckpt"))
    split = read_split(os.path.join(bundle_dir, "split.csv"), keys)
    fingerprint = split_fingerprint(keys, split)
    if fingerprint != meta["split_fingerprint"]:
        raise ProtocolError("{}: split file does not match the recorded fingerprint".format(bundle_dir))
    if meta["model"] == "tf":
        model = TfModel(CHANNEL_ARGS[meta["channel"]], head,
                        FeatureNorm.load(os.path.join(bundle_dir, "norm.npz")), fingerprint)
    elif meta["model"] == "fe-fuse":
        model = FeFuseModel(head, FeatureNorm.load(os.path.join(bundle_dir, "norm.npz")), fingerprint)
    elif meta["model"] == "re-fuse":
        members = {}
        for kind in CHANNELS:
            member_head, member_optimizer = load_checkpoint(os.path.join(bundle_dir, "member_{}.ckpt".format(kind)))
            norm = FeatureNorm.load(os.path.join(bundle_dir, "member_{}_norm.npz".format(kind)))
            members[kind] = TfModel(kind, member_head, norm, fingerprint)
            members[kind].optimizer = member_optimizer
        model = ReFuseModel(members, head, fingerprint)
    else:
        raise CheckpointFormatError("{}: unknown model '{}'".format(bundle_dir, meta["model"]))
    model.optimizer = optimizer
    history = read_history(os.path.join(bundle_dir, "history.csv"))
    history.checkpoint = os.path.join(bundle_dir, "head.ckpt")
    return model, history, split, meta
