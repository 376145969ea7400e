"""
Train and eval functions used by the model builders in models/fusion.py
"""
import copy
import json
import math
import os
from typing import List, Optional, Sequence

import torch
import torch.nn.functional as F

import birdid.util.misc as utils
from birdid.datasets.samples import ClassWeights, SplitAssignment, batches
from birdid.eval import TrainHistory, mean_average_precision
from birdid.models.head import ClassifierHead, WeightedCrossEntropy, build_optimizer, head_parameter_count
from birdid.util.errors import DatasetError


def train_one_epoch(head: ClassifierHead, criterion: torch.nn.Module, optimizer: torch.optim.Optimizer,
                    inputs: torch.Tensor, labels: torch.Tensor, batch_list: Sequence[List[int]], epoch: int,
                    print_freq=10, verbose=True):
    head.train()
    criterion.train()
    metric_logger = utils.MetricLogger(delimiter="  ", verbose=verbose)
    metric_logger.add_meter('lr', utils.SmoothedValue(window_size=1, fmt='{value:.6f}'))
    header = 'Epoch: [{}]'.format(epoch)

    for batch in metric_logger.log_every(batch_list, print_freq, header):
        idx = torch.as_tensor(batch, dtype=torch.int64)
        logits = head(inputs[idx])
        loss = criterion(logits, labels[idx])

        loss_value = loss.item()
        if not math.isfinite(loss_value):
            raise DatasetError("Loss is {} at epoch {}, stopping training".format(loss_value, epoch))

        optimizer.zero_grad()
        loss.backward()
        optimizer.step()

        metric_logger.update(n=len(batch), loss=loss_value)
        metric_logger.update(lr=optimizer.param_groups[0]["lr"])
    if verbose:
        print("Averaged stats:", metric_logger)
    return {k: meter.global_avg for k, meter in metric_logger.meters.items()}


@torch.no_grad()
def evaluate_head(head: ClassifierHead, inputs: torch.Tensor, labels: torch.Tensor, keys: Sequence[str]):
    """Validation MAP of a head over precomputed inputs."""
    head.eval()
    scores = F.softmax(head(inputs).double(), dim=-1).numpy()
    return mean_average_precision(scores, labels.numpy(), keys, warn=False)


def fit(head: ClassifierHead, inputs: torch.Tensor, labels: torch.Tensor, keys: Sequence[str],
        split: SplitAssignment, weights: ClassWeights, args, output_dir: Optional[str] = None,
        verbose: bool = True):
    """
    Train a head for args.epochs epochs on the train portion, scoring the
    validation portion after every epoch. The head ends up holding the
    parameters of its best validation epoch.

    inputs holds the (frozen) head input of every sample, so only the head
    sees gradients. Batch order depends on the run seed and the epoch only.
    Returns (history, optimizer), the optimizer holding the Adam moments of
    the best epoch.
    """
    train_idx, val_idx = split.portion("train"), split.portion("val")
    if not train_idx:
        raise DatasetError("the train portion is empty")
    if not val_idx:
        raise DatasetError("the validation portion is empty")
    inputs = inputs.detach().float()
    labels = torch.as_tensor(labels, dtype=torch.int64)
    val_inputs, val_labels = inputs[val_idx], labels[val_idx]
    val_keys = [keys[i] for i in val_idx]

    criterion = WeightedCrossEntropy(weights.omega)
    optimizer = build_optimizer(head, lr=args.lr)
    n_parameters = head_parameter_count(head)
    if verbose:
        print('number of params:', n_parameters)

    history = TrainHistory()
    best_state = best_optimizer = None
    for epoch in range(1, args.epochs + 1):
        batch_list = batches(train_idx, args.batch_size, utils.derive_seed(args.seed, "epoch", epoch))
        train_stats = train_one_epoch(head, criterion, optimizer, inputs, labels, batch_list, epoch,
                                      print_freq=args.print_freq, verbose=verbose)
        val_map = evaluate_head(head, val_inputs, val_labels, val_keys)
        if best_state is None or val_map > history.best_map:
            best_state = copy.deepcopy(head.state_dict())
            best_optimizer = copy.deepcopy(optimizer.state_dict())
        history.record(epoch, train_stats["loss"], val_map)

        log_stats = {'epoch': epoch,
                     'train_loss': train_stats["loss"],
                     'val_map': val_map,
                     'n_parameters': n_parameters}
        if output_dir:
            os.makedirs(output_dir, exist_ok=True)
            with open(os.path.join(output_dir, "log.txt"), "a") as f:
                f.write(json.dumps(log_stats) + "\n")

    head.load_state_dict(best_state)
    optimizer.load_state_dict(best_optimizer)
    if verbose:
        print("best validation MAP {:.4f} at epoch {}".format(history.best_map, history.best_epoch))
    return history, optimizer
