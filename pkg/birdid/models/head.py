"""
Classifier head and criterion classes.

The only trainable part of every model: two ReLU hidden layers and a
softmax output, trained with weighted cross-entropy and Adam.
"""
import math
import os
import struct
from collections import OrderedDict
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from birdid.util.errors import CheckpointFormatError, LabelError, ParameterError, ShapeError

PROB_CLIP = 1e-12

_HEAD_HEADER = struct.Struct("<4sHIIII")
_HEAD_MAGIC = b"HEAD"
_HEAD_VERSION = 1
_STEP = struct.Struct("<Q")


class ClassifierHead(nn.Module):
    """ Two fully-connected hidden layers and a softmax output layer """

    def __init__(self, dims: Sequence[int], seed: int = 0):
        """
        Parameters:
            dims: (D_in, H1, H2, C)
            seed: generator seed of the uniform fan-based initialization;
                  biases start at zero
        """
        super().__init__()
        dims = tuple(int(d) for d in dims)
        if len(dims) != 4 or min(dims) < 1:
            raise ParameterError("head dims must be four positive sizes (D_in, H1, H2, C), got {}".format(dims))
        self.dims = dims
        self.layers = nn.ModuleList(nn.Linear(n, k) for n, k in zip(dims[:-1], dims[1:]))
        generator = torch.Generator().manual_seed(int(seed))
        with torch.no_grad():
            for layer in self.layers:
                bound = math.sqrt(6.0 / (layer.in_features + layer.out_features))
                layer.weight.uniform_(-bound, bound, generator=generator)
                layer.bias.zero_()

    @property
    def input_dim(self):
        return self.dims[0]

    @property
    def num_classes(self):
        return self.dims[-1]

    def forward(self, x):
        """Logits; head_forward turns them into probabilities."""
        for i, layer in enumerate(self.layers):
            x = F.relu(layer(x)) if i < len(self.layers) - 1 else layer(x)
        return x


def head_forward(head: ClassifierHead, x) -> torch.Tensor:
    """softmax(W3 relu(W2 relu(W1 x + b1) + b2) + b3) for one vector or a batch."""
    x = torch.as_tensor(x, dtype=head.layers[0].weight.dtype)
    if x.shape[-1] != head.input_dim:
        raise ShapeError("head expects {}-dimensional input, got {}".format(head.input_dim, tuple(x.shape)))
    return F.softmax(head(x), dim=-1)


def _one_hot(y, num_classes, dtype):
    y = torch.as_tensor(y)
    if y.dtype in (torch.int64, torch.int32, torch.int16, torch.uint8) and y.dim() <= 1:
        if y.numel() and (y.min() < 0 or y.max() >= num_classes):
            raise LabelError("class index outside [0, {})".format(num_classes))
        return F.one_hot(y.long(), num_classes).to(dtype)
    y = y.to(dtype)
    if y.shape[-1] != num_classes:
        raise LabelError("label vectors have {} entries for {} classes".format(y.shape[-1], num_classes))
    binary = torch.all((y == 0) | (y == 1))
    if not binary or not torch.all(y.sum(dim=-1) == 1):
        raise LabelError("labels must be one-hot")
    return y


def wce_loss(p, y, omega, reduction="mean"):
    """
    L = sum_c [ -omega_c y_c log p_c - (1 - y_c) log(1 - p_c) ] with p and
    1 - p clipped below at 1e-12, so a saturated float32 softmax stays
    finite. y is one-hot (or a class index per sample); the batch reduction
    is the mean.
    """
    p = torch.as_tensor(p)
    if not p.is_floating_point():
        p = p.double()
    omega = torch.as_tensor(omega, dtype=p.dtype)
    y = _one_hot(y, p.shape[-1], p.dtype)
    if y.shape != p.shape:
        raise LabelError("labels of shape {} for probabilities of shape {}".format(tuple(y.shape), tuple(p.shape)))
    # 1 - 1e-12 rounds to 1 in float32, so the complement is clipped on its own
    log_p = torch.log(p.clamp_min(PROB_CLIP))
    log_q = torch.log((1.0 - p).clamp_min(PROB_CLIP))
    per_sample = (-omega * y * log_p - (1.0 - y) * log_q).sum(dim=-1)
    if reduction == "none":
        return per_sample
    return per_sample.mean()


class WeightedCrossEntropy(nn.Module):
    """ Weighted cross-entropy over softmax outputs, class weights held as a buffer """

    def __init__(self, omega):
        super().__init__()
        self.register_buffer("omega", torch.as_tensor(np.asarray(omega, dtype=np.float32)))

    def forward(self, logits, targets):
        return wce_loss(F.softmax(logits, dim=-1), targets, self.omega.to(logits.dtype))


def head_gradients(head: ClassifierHead, x, y, omega) -> "OrderedDict[str, torch.Tensor]":
    """Reverse-mode gradients of wce_loss(head_forward(x)) for every head parameter."""
    params = OrderedDict((n, p) for n, p in head.named_parameters() if p.requires_grad)
    loss = wce_loss(head_forward(head, x), y, omega)
    grads = torch.autograd.grad(loss, list(params.values()))
    return OrderedDict(zip(params.keys(), grads))


def build_optimizer(head: nn.Module, lr=0.001, betas=(0.9, 0.999), eps=1e-8) -> torch.optim.Adam:
    params = [p for p in head.parameters() if p.requires_grad]
    return torch.optim.Adam(params, lr=lr, betas=betas, eps=eps)


def adam_step(optimizer: torch.optim.Adam, grads):
    """
    One bias-corrected Adam update with the given gradients, in parameter
    order of the optimizer (a sequence, or a mapping in that order).
    """
    params = [p for group in optimizer.param_groups for p in group["params"]]
    grads = list(grads.values()) if isinstance(grads, dict) else list(grads)
    if len(grads) != len(params):
        raise ShapeError("{} gradients for {} parameters".format(len(grads), len(params)))
    for p, g in zip(params, grads):
        if tuple(g.shape) != tuple(p.shape):
            raise ShapeError("gradient of shape {} for parameter of shape {}".format(tuple(g.shape), tuple(p.shape)))
        p.grad = g.detach().to(p.dtype).clone()
    optimizer.step()


def adam_state(optimizer: torch.optim.Adam):
    """Per-parameter (m, v) tensors and the shared step count t."""
    moments = []
    step = 0
    for group in optimizer.param_groups:
        for p in group["params"]:
            state = optimizer.state.get(p, {})
            if state:
                moments.append((state["exp_avg"], state["exp_avg_sq"]))
                step = int(state["step"])
            else:
                moments.append((torch.zeros_like(p), torch.zeros_like(p)))
    return moments, step


def count_trainable_params(dims) -> int:
    d_in, h1, h2, c = (int(d) for d in dims)
    if min(d_in, h1, h2, c) < 1:
        raise ParameterError("head dims must be positive, got {}".format(dims))
    return (d_in + 1) * h1 + (h1 + 1) * h2 + (h2 + 1) * c


def head_parameter_count(head: nn.Module) -> int:
    return sum(p.numel() for p in head.parameters() if p.requires_grad)


def _head_arrays(head: ClassifierHead):
    # W1, b1, W2, b2, W3, b3 with weights as (out, in)
    return [t for layer in head.layers for t in (layer.weight, layer.bias)]


def save_checkpoint(head: ClassifierHead, optimizer: torch.optim.Adam, path):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    moments, step = adam_state(optimizer)
    with open(path, "wb") as f:
        f.write(_HEAD_HEADER.pack(_HEAD_MAGIC, _HEAD_VERSION, *head.dims))
        for t in _head_arrays(head):
            f.write(t.detach().cpu().numpy().astype("<f4").tobytes())
        for which in (0, 1):
            for pair in moments:
                f.write(pair[which].detach().cpu().numpy().astype("<f4").tobytes())
        f.write(_STEP.pack(step))


def load_checkpoint(path, lr=0.001, betas=(0.9, 0.999), eps=1e-8):
    """Rebuild (head, optimizer) from a HEAD file, Adam moments and step count included."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < _HEAD_HEADER.size:
        raise CheckpointFormatError("{}: truncated header".format(path))
    magic, version, *dims = _HEAD_HEADER.unpack_from(blob)
    if magic != _HEAD_MAGIC or version != _HEAD_VERSION:
        raise CheckpointFormatError("{}: not a version {} HEAD file".format(path, _HEAD_VERSION))
    head = ClassifierHead(dims)
    arrays = _head_arrays(head)
    sizes = [t.numel() for t in arrays]
    expected = _HEAD_HEADER.size + 3 * 4 * sum(sizes) + _STEP.size
    if len(blob) != expected:
        raise CheckpointFormatError("{}: {} bytes, dims {} need {}".format(path, len(blob), tuple(dims), expected))

    offset = _HEAD_HEADER.size

    def take(like):
        nonlocal offset
        data = np.frombuffer(blob, dtype="<f4", count=like.numel(), offset=offset).reshape(tuple(like.shape))
        offset += 4 * like.numel()
        return torch.from_numpy(data.astype(np.float32))

    with torch.no_grad():
        for t in arrays:
            t.copy_(take(t))
    first = [take(t) for t in arrays]
    second = [take(t) for t in arrays]
    (step,) = _STEP.unpack_from(blob, offset)

    optimizer = build_optimizer(head, lr=lr, betas=betas, eps=eps)
    if step > 0:
        for p, m, v in zip(arrays, first, second):
            optimizer.state[p] = {"step": torch.tensor(float(step)), "exp_avg": m, "exp_avg_sq": v}
    return head, optimizer
