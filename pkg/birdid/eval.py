"""
Average precision, MAP, confusion matrices and the CSV files the curves
and comparison charts are drawn from.
"""
import io
import os
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
import pandas as pd
from sklearn.metrics import confusion_matrix

from birdid.util.errors import AlignmentError, EvaluationError, ParameterError

GRID_COLUMNS = ["model", "channel", "duration_ms", "map"]


@dataclass
class TrainHistory:
    epochs: List[int] = field(default_factory=list)
    train_loss: List[float] = field(default_factory=list)
    val_map: List[float] = field(default_factory=list)
    checkpoint: Optional[str] = None

    def record(self, epoch, train_loss, val_map):
        self.epochs.append(int(epoch))
        self.train_loss.append(float(train_loss))
        self.val_map.append(float(val_map))

    def __len__(self):
        return len(self.epochs)

    @property
    def best_index(self):
        if not self.epochs:
            raise EvaluationError("empty training history")
        return int(np.argmax(self.val_map))

    @property
    def best_epoch(self):
        return self.epochs[self.best_index]

    @property
    def best_map(self):
        return self.val_map[self.best_index]

    def epochs_to_reach(self, tolerance=0.01):
        """First epoch whose validation MAP is within tolerance of the best."""
        target = self.best_map - tolerance
        return next(e for e, m in zip(self.epochs, self.val_map) if m >= target)


@dataclass
class EvalReport:
    model: str
    channel: str
    duration_ms: int
    split: str
    class_names: List[str]
    ap: np.ndarray                  # per class, NaN where skipped
    map: float
    confusion: np.ndarray           # rows true class, columns predicted class
    skipped: List[str] = field(default_factory=list)

    @property
    def num_correct(self):
        return int(np.trace(self.confusion))


def average_precision(scores, positives, keys: Optional[Sequence[str]] = None) -> float:
    """
    Mean over positives of precision at their rank, samples sorted by
    descending score. Equal scores are ordered by ascending sample key (by
    position when no keys are given).
    """
    scores = np.asarray(scores, dtype=np.float64)
    positives = np.asarray(positives, dtype=bool)
    if scores.shape != positives.shape or scores.ndim != 1:
        raise ParameterError("scores and positives must be vectors of equal length")
    if not positives.any():
        raise EvaluationError("average precision is undefined without positives")
    if keys is None:
        tiebreak = np.arange(scores.size)
    else:
        if len(keys) != scores.size:
            raise AlignmentError("{} keys for {} scores".format(len(keys), scores.size))
        tiebreak = np.argsort(np.asarray(keys, dtype=object), kind="stable").argsort()
    order = np.lexsort((tiebreak, -scores))
    hits = positives[order]
    ranks = np.flatnonzero(hits) + 1
    return float(np.mean(np.arange(1, ranks.size + 1) / ranks))


def per_class_average_precision(scores, labels, keys=None, class_names=None, warn=True):
    """AP of every class column, NaN for classes without positives, plus the skipped class names."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if scores.ndim != 2 or scores.shape[0] != labels.shape[0]:
        raise ParameterError("score matrix {} does not match {} labels".format(scores.shape, labels.shape[0]))
    num_classes = scores.shape[1]
    if class_names is None:
        class_names = [str(c) for c in range(num_classes)]
    ap = np.full(num_classes, np.nan)
    skipped = []
    for c in range(num_classes):
        positives = labels == c
        if not positives.any():
            skipped.append(class_names[c])
            if warn:
                print("*** WARNING: class '{}' has no samples here, skipped from MAP".format(class_names[c]))
            continue
        ap[c] = average_precision(scores[:, c], positives, keys)
    return ap, skipped


def mean_average_precision(scores, labels, keys=None, class_names=None, warn=True) -> float:
    ap, _ = per_class_average_precision(scores, labels, keys, class_names, warn)
    if np.all(np.isnan(ap)):
        raise EvaluationError("no class has a positive sample, MAP is undefined")
    return float(np.nanmean(ap))


def evaluate(model, bank, split, portion: str, duration_ms=None, warn=True) -> EvalReport:
    """Score one split portion with a trained model and summarize it."""
    indices = split.portion(portion)
    if not indices:
        raise EvaluationError("the {} portion is empty".format(portion))
    scores = model.probabilities(bank, indices).numpy()
    labels = bank.labels[indices].numpy()
    keys = [bank.keys[i] for i in indices]
    ap, skipped = per_class_average_precision(scores, labels, keys, bank.class_names, warn)
    if np.all(np.isnan(ap)):
        raise EvaluationError("no class has a sample in the {} portion".format(portion))
    num_classes = len(bank.class_names)
    confusion = confusion_matrix(labels, scores.argmax(axis=1), labels=list(range(num_classes)))
    return EvalReport(model=model.model_id, channel=model.channel_id,
                      duration_ms=int(bank.duration_ms if duration_ms is None else duration_ms),
                      split=portion, class_names=list(bank.class_names), ap=ap, map=float(np.nanmean(ap)),
                      confusion=confusion, skipped=skipped)


def _ensure_parent(path):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)


def emit_history(history: TrainHistory, path):
    """
    `epoch,train_loss,val_map` rows, a blank line, then the
    `best_epoch,best_map` summary.
    """
    if len(history) == 0:
        raise EvaluationError("cannot emit an empty training history")
    _ensure_parent(path)
    rows = pd.DataFrame({"epoch": history.epochs, "train_loss": history.train_loss, "val_map": history.val_map})
    summary = pd.DataFrame({"best_epoch": [history.best_epoch], "best_map": [history.best_map]})
    with open(path, "w", newline="") as f:
        rows.to_csv(f, index=False, lineterminator="\n", float_format="%.9g")
        f.write("\n")
        summary.to_csv(f, index=False, lineterminator="\n", float_format="%.9g")


def read_history(path) -> TrainHistory:
    with open(path) as f:
        blocks = [b for b in f.read().split("\n\n") if b.strip()]
    if not blocks:
        raise EvaluationError("{}: empty history file".format(path))
    rows = pd.read_csv(io.StringIO(blocks[0]))
    if list(rows.columns) != ["epoch", "train_loss", "val_map"]:
        raise EvaluationError("{}: history header must be epoch,train_loss,val_map".format(path))
    history = TrainHistory()
    for r in rows.itertuples(index=False):
        history.record(r.epoch, r.train_loss, r.val_map)
    return history


def write_report(report: EvalReport, path):
    """Per-class AP block, confusion block and a one-row summary, separated by blank lines."""
    _ensure_parent(path)
    ap = pd.DataFrame({"class": report.class_names, "ap": report.ap})
    confusion = pd.DataFrame(report.confusion, columns=report.class_names)
    confusion.insert(0, "true_class", report.class_names)
    summary = pd.DataFrame([(report.model, report.channel, report.duration_ms, report.split, report.map)],
                           columns=["model", "channel", "duration_ms", "split", "map"])
    with open(path, "w", newline="") as f:
        ap.to_csv(f, index=False, lineterminator="\n", float_format="%.9g", na_rep="skipped")
        f.write("\n")
        confusion.to_csv(f, index=False, lineterminator="\n")
        f.write("\n")
        summary.to_csv(f, index=False, lineterminator="\n", float_format="%.9g")


def write_grid_summary(rows, path):
    """`model,channel,duration_ms,map` rows in a stable order."""
    df = pd.DataFrame(list(rows), columns=GRID_COLUMNS)
    df = df.sort_values(["model", "channel", "duration_ms"], kind="stable").reset_index(drop=True)
    _ensure_parent(path)
    df.to_csv(path, index=False, lineterminator="\n", float_format="%.9g")
    return df


def read_grid_summary(path) -> pd.DataFrame:
    df = pd.read_csv(path)
    if list(df.columns) != GRID_COLUMNS:
        raise EvaluationError("{}: grid summary header must be {}".format(path, ",".join(GRID_COLUMNS)))
    return df
