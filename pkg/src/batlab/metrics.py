"""Evaluation: clean/adversarial accuracy, class-wise cosine distance, CSV records.

The headline representation metric is reported two ways, because "how distinct
are the classes" can be read either as a distance or as a similarity: each
record carries ``cosine_distance`` (1 - mean cross-class cosine similarity)
and the raw ``mean_cos_similarity``.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, fields
from typing import Optional

import numpy as np

from .attack import AttackConfig, pgd
from .errors import EmptySplitError
from .model import MlpModel, forward_arrays, predict_labels

CSV_HEADER = ["epoch", "split", "clean_acc", "adv_acc", "cosine_distance",
              "mean_cos_similarity", "mean_weight", "ce_loss", "dl_loss"]


@dataclass
class MetricsRecord:
    """One evaluation row; undefined fields stay None and serialize as empty."""

    epoch: int
    split: str
    clean_acc: Optional[float] = None
    adv_acc: Optional[float] = None
    cosine_distance: Optional[float] = None
    mean_cos_similarity: Optional[float] = None
    mean_weight: Optional[float] = None
    ce_loss: Optional[float] = None
    dl_loss: Optional[float] = None

    def __post_init__(self):
        for name in ("clean_acc", "adv_acc"):
            value = getattr(self, name)
            if value is not None and not 0.0 <= value <= 1.0:
                raise ValueError(f"{name}={value} outside [0, 1]")


@dataclass
class CosineStats:
    distance: float
    mean_similarity: float
    pairs_used: int
    zero_vectors_skipped: int


def clean_accuracy(model: MlpModel, x: np.ndarray, y: np.ndarray) -> float:
    """Fraction of samples whose argmax prediction equals the label."""
    y = np.asarray(y)
    if len(y) == 0:
        raise EmptySplitError("clean_accuracy over an empty sample set")
    return float((predict_labels(model, x) == y).mean())


def adv_accuracy(model: MlpModel, x: np.ndarray, y: np.ndarray,
                 attack_config: AttackConfig,
                 rng: Optional[np.random.Generator] = None) -> float:
    """Accuracy on PGD-perturbed inputs under the evaluation attack."""
    y = np.asarray(y)
    if len(y) == 0:
        raise EmptySplitError("adv_accuracy over an empty sample set")
    x_adv = pgd(model, x, y, attack_config, rng=rng)
    return float((predict_labels(model, x_adv) == y).mean())


def classwise_cosine_distance(model: MlpModel, x: np.ndarray, y: np.ndarray,
                              pair_budget: int = 10_000,
                              seed: int = 0) -> CosineStats:
    """1 - mean cosine similarity of representations across class boundaries.

    Cross-class pairs are enumerated; when there are more than ``pair_budget``
    a uniform subsample (deterministic in the seed) is scored. Zero-norm
    representations cannot be scored and are skipped and counted.
    """
    y = np.asarray(y)
    if len(y) == 0:
        raise EmptySplitError("cosine distance over an empty sample set")
    _, reps = forward_arrays(model, x)
    norms = np.linalg.norm(reps, axis=1)
    nonzero = norms > 0.0
    skipped = int((~nonzero).sum())
    reps = reps[nonzero]
    labels = y[nonzero]
    norms = norms[nonzero]

    diff = labels[:, None] != labels[None, :]
    ii, jj = np.nonzero(np.triu(diff, k=1))
    if len(ii) == 0:
        raise EmptySplitError("no valid cross-class pair for cosine distance")
    if len(ii) > pair_budget:
        rng = np.random.default_rng(seed)
        pick = rng.choice(len(ii), size=pair_budget, replace=False)
        pick.sort()
        ii, jj = ii[pick], jj[pick]
    unit = reps / norms[:, None]
    sims = np.einsum("ij,ij->i", unit[ii], unit[jj])
    mean_sim = float(sims.mean())
    return CosineStats(distance=1.0 - mean_sim, mean_similarity=mean_sim,
                       pairs_used=len(ii), zero_vectors_skipped=skipped)


def evaluate_epoch(model: MlpModel,
                   splits: dict[str, tuple[np.ndarray, np.ndarray]],
                   attack_config: AttackConfig, epoch: int,
                   cosine_split: Optional[str] = None,
                   pair_budget: int = 10_000,
                   seed: int = 0) -> list[MetricsRecord]:
    """One record per requested split; cosine only on the designated split.

    An empty split produces a record with empty metric fields plus a warning,
    never an exception, so a long run survives a degenerate epoch.
    """
    records = []
    for name, (x, y) in splits.items():
        if len(np.asarray(y)) == 0:
            warnings.warn(f"split {name!r} is empty at epoch {epoch}; "
                          "recording empty fields")
            records.append(MetricsRecord(epoch=epoch, split=name))
            continue
        record = MetricsRecord(
            epoch=epoch, split=name,
            clean_acc=clean_accuracy(model, x, y),
            adv_acc=adv_accuracy(model, x, y, attack_config),
        )
        if cosine_split is not None and name == cosine_split:
            try:
                stats = classwise_cosine_distance(model, x, y,
                                                  pair_budget=pair_budget,
                                                  seed=seed)
                record.cosine_distance = stats.distance
                record.mean_cos_similarity = stats.mean_similarity
            except EmptySplitError as e:
                warnings.warn(str(e))
        records.append(record)
    return records


# -- CSV persistence -------------------------------------------------------


def _format_value(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.6g}"
    return str(value)


def write_metrics_csv(records: list[MetricsRecord], path) -> None:
    """Deterministic row order: by epoch, then split name."""
    ordered = sorted(records, key=lambda r: (r.epoch, r.split))
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for rec in ordered:
            writer.writerow([_format_value(getattr(rec, f.name))
                             for f in fields(MetricsRecord)])


def read_metrics_csv(path) -> list[MetricsRecord]:
    records = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            kwargs = {"epoch": int(row["epoch"]), "split": row["split"]}
            for key in CSV_HEADER[2:]:
                kwargs[key] = float(row[key]) if row[key] != "" else None
            records.append(MetricsRecord(**kwargs))
    return records
