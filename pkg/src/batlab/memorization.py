"""Subsampled estimation of per-sample memorization and train-test influence.

Exact leave-one-out retraining needs one run per training sample; instead, T
independent models are each trained on a Bernoulli(p) inclusion subset, and
every sample's memorization value is the difference between the correct-answer
rate of the models that saw it and the rate of the models that did not. The
same T models and masks also yield all train-test influence values and the
per-test-sample predictability, so the whole table costs T trainings total.

Trials derive their seeds purely from (base_seed, trial_index) and merge in
trial order, which makes parallel execution bit-identical to serial.
"""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .errors import ContractError
from .model import MlpModel, forward, init_mlp, predict_labels
from .synthdata import LabeledDataset

DEFAULT_MIN_TRIALS_PER_SIDE = 5
DEFAULT_INFLUENCE_FLOOR = 0.01


@dataclass(frozen=True)
class EstimatorTrainerConfig:
    """Plain ERM trainer used inside every estimation trial.

    Defaults are tuned so the benchmark profiles reach the interpolation
    regime: planted singletons, including the ones sitting inside another
    class's blob, are memorized whenever included.
    """

    hidden_dims: tuple[int, ...] = (128,)
    epochs: int = 300
    batch_size: int = 64
    learning_rate: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 0.0
    lr_decay_factor: float = 0.1
    decay_epochs: tuple[int, ...] = (210, 255)
    input_center: float = 0.5
    input_gain: float = 20.0

    def to_dict(self) -> dict:
        return {
            "hidden_dims": list(self.hidden_dims),
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "momentum": self.momentum,
            "weight_decay": self.weight_decay,
            "lr_decay_factor": self.lr_decay_factor,
            "decay_epochs": list(self.decay_epochs),
            "input_center": self.input_center,
            "input_gain": self.input_gain,
        }


@dataclass
class SubsampleTrials:
    """Raw outcome of the T subset-trained models.

    ``inclusion[t, i]`` says whether train sample i was in trial t's subset;
    the correctness matrices record argmax agreement with the labels.
    """

    inclusion: np.ndarray       # bool [T x n_train]
    train_correct: np.ndarray   # bool [T x n_train]
    test_correct: np.ndarray    # bool [T x n_test]
    base_seed: int
    inclusion_rate: float
    trainer: EstimatorTrainerConfig

    @property
    def trials(self) -> int:
        return self.inclusion.shape[0]


@dataclass
class MemEstimate:
    """Per-train-sample memorization values with trial-count confidence."""

    mem: np.ndarray                # float in [-1, 1], 0 when low confidence
    included_trials: np.ndarray    # int
    excluded_trials: np.ndarray    # int
    low_confidence: np.ndarray     # bool
    trials: int
    inclusion_rate: float
    base_seed: int
    min_trials_per_side: int


@dataclass
class InfluenceTable:
    """Sparse (train, test) -> influence map above the report floor."""

    pairs: dict[tuple[int, int], float]
    report_floor: float
    n_train: int
    n_test: int
    trials: int
    min_trials_per_side: int
    low_confidence_train: np.ndarray = field(default_factory=lambda: np.zeros(0, bool))

    def get(self, train_index: int, test_index: int, default: float = 0.0) -> float:
        return self.pairs.get((int(train_index), int(test_index)), default)

    def max_over_train(self, train_indices) -> np.ndarray:
        """Per test sample, the largest influence from any of the given trains."""
        wanted = set(int(i) for i in np.asarray(train_indices).ravel())
        best = np.full(self.n_test, -np.inf)
        for (i, j), value in self.pairs.items():
            if i in wanted and value > best[j]:
                best[j] = value
        return best


@dataclass(frozen=True)
class SplitThresholds:
    """Cutoffs used to partition train and test samples."""

    sigma_atypical: float = 0.15
    sigma_typical: float = 0.02
    influence_atypical: float = 0.15
    influence_typical: float = 0.02
    predictability_floor: float = 0.8

    def __post_init__(self):
        if not self.sigma_typical < self.sigma_atypical:
            raise ContractError("need sigma_typical < sigma_atypical")


@dataclass
class SplitAssignment:
    """Index sets of the typical/atypical partition plus the cutoffs used."""

    train_typical: np.ndarray
    train_atypical: np.ndarray
    train_unassigned: np.ndarray
    test_typical: np.ndarray
    test_atypical: np.ndarray
    thresholds: SplitThresholds


# -- trial execution -----------------------------------------------------


def _trial_seed_sequence(base_seed: int, trial_index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(base_seed), 104729, int(trial_index)])


def _fit_erm(features: np.ndarray, labels: np.ndarray, num_classes: int,
             cfg: EstimatorTrainerConfig, seed_seq: np.random.SeedSequence) -> MlpModel:
    """Momentum-SGD ERM fit, lean on purpose: no records, no evaluation."""
    init_seed, shuffle_seed = (int(s.generate_state(1)[0]) for s in seed_seq.spawn(2))
    model = init_mlp(features.shape[1], cfg.hidden_dims, num_classes,
                     seed=init_seed, input_center=cfg.input_center,
                     input_gain=cfg.input_gain)
    rng = np.random.default_rng(shuffle_seed)
    velocity = [np.zeros_like(p.data) for p in model.parameters()]
    n = len(labels)
    for epoch in range(cfg.epochs):
        lr = cfg.learning_rate
        for d in cfg.decay_epochs:
            if epoch >= d:
                lr *= cfg.lr_decay_factor
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            model.zero_grad()
            loss = ad.softmax_cross_entropy(
                forward(model, features[idx]).logits, labels[idx])
            ad.backward(loss)
            for p, v in zip(model.parameters(), velocity):
                g = p.grad + cfg.weight_decay * p.data
                v *= cfg.momentum
                v += g
                p.data -= lr * v
    return model


def _run_single_trial(args) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    (trial_index, train_x, train_y, test_x, test_y,
     num_classes, cfg, base_seed, inclusion_rate) = args
    seq = _trial_seed_sequence(base_seed, trial_index)
    mask_seq, fit_seq = seq.spawn(2)
    mask_rng = np.random.default_rng(mask_seq)
    inclusion = mask_rng.random(len(train_y)) < inclusion_rate
    if not inclusion.any():
        # Degenerate subset: fall back to an untrained-model evaluation.
        model = init_mlp(train_x.shape[1], cfg.hidden_dims, num_classes,
                         seed=int(fit_seq.generate_state(1)[0]),
                         input_center=cfg.input_center, input_gain=cfg.input_gain)
    else:
        model = _fit_erm(train_x[inclusion], train_y[inclusion], num_classes,
                         cfg, fit_seq)
    train_correct = predict_labels(model, train_x) == train_y
    test_correct = (predict_labels(model, test_x) == test_y
                    if len(test_y) else np.zeros(0, dtype=bool))
    return inclusion, train_correct, test_correct


def run_trials(train_set: LabeledDataset, test_set: Optional[LabeledDataset],
               trainer: EstimatorTrainerConfig, trials: int,
               inclusion_rate: float, base_seed: int,
               jobs: int = 1) -> SubsampleTrials:
    """Train T subset models and record inclusion plus correctness.

    ``jobs > 1`` fans trials out to worker processes; results are merged in
    trial-index order, so the output is bit-identical to a serial run.
    """
    if trials < 2:
        raise ContractError(f"need at least 2 trials, got {trials}")
    if not 0.0 < inclusion_rate < 1.0:
        raise ContractError(f"inclusion rate must be in (0, 1), got {inclusion_rate}")
    num_classes = int(train_set.labels.max()) + 1
    test_x = test_set.features if test_set is not None else np.zeros((0, train_set.dim))
    test_y = test_set.labels if test_set is not None else np.zeros(0, dtype=np.int64)
    arg_list = [
        (t, train_set.features, train_set.labels, test_x, test_y,
         num_classes, trainer, base_seed, inclusion_rate)
        for t in range(trials)
    ]
    if jobs <= 1:
        results = [_run_single_trial(a) for a in arg_list]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_single_trial, arg_list))
    inclusion = np.stack([r[0] for r in results])
    train_correct = np.stack([r[1] for r in results])
    test_correct = np.stack([r[2] for r in results])
    return SubsampleTrials(inclusion=inclusion, train_correct=train_correct,
                           test_correct=test_correct, base_seed=base_seed,
                           inclusion_rate=inclusion_rate, trainer=trainer)


# -- estimators ----------------------------------------------------------


def _side_rates(masks_in: np.ndarray, correct: np.ndarray
                ) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Correct-rate on the included side and excluded side, with counts."""
    inc_count = masks_in.sum(axis=0)
    exc_count = (~masks_in).sum(axis=0)
    inc_hits = (masks_in & correct).sum(axis=0)
    exc_hits = (~masks_in & correct).sum(axis=0)
    inc_rate = np.divide(inc_hits, inc_count,
                         out=np.zeros(len(inc_count)), where=inc_count > 0)
    exc_rate = np.divide(exc_hits, exc_count,
                         out=np.zeros(len(exc_count)), where=exc_count > 0)
    return inc_rate, exc_rate, inc_count, exc_count


def estimate_memorization(trials: SubsampleTrials,
                          min_trials_per_side: int = DEFAULT_MIN_TRIALS_PER_SIDE
                          ) -> MemEstimate:
    """Included-rate minus excluded-rate per train sample.

    A sample whose inclusion pattern leaves fewer than ``min_trials_per_side``
    trials on either side is flagged low confidence and reported as 0.
    """
    inc_rate, exc_rate, inc_count, exc_count = _side_rates(
        trials.inclusion, trials.train_correct)
    low = (inc_count < min_trials_per_side) | (exc_count < min_trials_per_side)
    mem = np.where(low, 0.0, inc_rate - exc_rate)
    return MemEstimate(mem=mem, included_trials=inc_count.astype(int),
                       excluded_trials=exc_count.astype(int),
                       low_confidence=low, trials=trials.trials,
                       inclusion_rate=trials.inclusion_rate,
                       base_seed=trials.base_seed,
                       min_trials_per_side=min_trials_per_side)


def estimate_influence(trials: SubsampleTrials,
                       report_floor: float = DEFAULT_INFLUENCE_FLOOR,
                       min_trials_per_side: int = DEFAULT_MIN_TRIALS_PER_SIDE
                       ) -> InfluenceTable:
    """Influence of each train sample on each test sample.

    infl(i, j) is the test-j correct rate among models whose subset contained
    train i minus the rate among models that excluded i. Only entries with
    |infl| above the report floor are stored; train samples without enough
    trials on both sides contribute no entries and are flagged.
    """
    T, n_train = trials.inclusion.shape
    n_test = trials.test_correct.shape[1]
    inc_count = trials.inclusion.sum(axis=0).astype(float)
    exc_count = T - inc_count
    low = (inc_count < min_trials_per_side) | (exc_count < min_trials_per_side)

    m = trials.inclusion.astype(np.float64)
    c = trials.test_correct.astype(np.float64)
    inc_hits = m.T @ c
    exc_hits = (1.0 - m).T @ c
    with np.errstate(invalid="ignore", divide="ignore"):
        infl = (np.divide(inc_hits, inc_count[:, None],
                          out=np.zeros_like(inc_hits), where=inc_count[:, None] > 0)
                - np.divide(exc_hits, exc_count[:, None],
                            out=np.zeros_like(exc_hits), where=exc_count[:, None] > 0))
    keep = (np.abs(infl) > report_floor) & ~low[:, None]
    pairs = {(int(i), int(j)): float(infl[i, j])
             for i, j in zip(*np.nonzero(keep))}
    return InfluenceTable(pairs=pairs, report_floor=report_floor,
                          n_train=n_train, n_test=n_test, trials=T,
                          min_trials_per_side=min_trials_per_side,
                          low_confidence_train=low)


def predictability(trials: SubsampleTrials) -> np.ndarray:
    """Per-test-sample correct rate over all T models."""
    return trials.test_correct.mean(axis=0)


def partition_splits(mem: MemEstimate, infl: InfluenceTable,
                     predictability_values: np.ndarray,
                     thresholds: SplitThresholds) -> SplitAssignment:
    """Typical/atypical partition of train and test indices.

    All comparisons are strict: a train sample is atypical only when its
    memorization value exceeds the atypical cutoff, typical only when below
    the typical cutoff; low-confidence samples land in neither set. A test
    sample is atypical when some atypical train sample influences it above the
    atypical influence cutoff, and typical when no atypical train sample
    influences it above the typical influence cutoff and its predictability is
    not below the floor.
    """
    confident = ~mem.low_confidence
    train_atypical = np.flatnonzero(confident & (mem.mem > thresholds.sigma_atypical))
    train_typical = np.flatnonzero(confident & (mem.mem < thresholds.sigma_typical))
    train_unassigned = np.flatnonzero(mem.low_confidence)

    best = infl.max_over_train(train_atypical)
    predictability_values = np.asarray(predictability_values, dtype=np.float64)
    test_atypical = np.flatnonzero(best > thresholds.influence_atypical)
    excluded = ((best > thresholds.influence_typical)
                | (predictability_values < thresholds.predictability_floor))
    test_typical = np.flatnonzero(~excluded)
    return SplitAssignment(train_typical=train_typical,
                           train_atypical=train_atypical,
                           train_unassigned=train_unassigned,
                           test_typical=test_typical,
                           test_atypical=test_atypical,
                           thresholds=thresholds)


# -- persistence ----------------------------------------------------------


def save_mem_estimate(est: MemEstimate, path, manifest_hash: Optional[str] = None) -> None:
    payload = {
        "metadata": {
            "trials": est.trials,
            "inclusion_rate": est.inclusion_rate,
            "base_seed": est.base_seed,
            "min_trials_per_side": est.min_trials_per_side,
        },
        "samples": [
            {
                "index": i,
                "mem": float(est.mem[i]),
                "included_trials": int(est.included_trials[i]),
                "excluded_trials": int(est.excluded_trials[i]),
                "low_confidence": bool(est.low_confidence[i]),
            }
            for i in range(len(est.mem))
        ],
    }
    if manifest_hash is not None:
        payload["metadata"]["manifest_hash"] = manifest_hash
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)


def load_mem_estimate(path) -> MemEstimate:
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    samples = sorted(payload["samples"], key=lambda s: s["index"])
    meta = payload["metadata"]
    return MemEstimate(
        mem=np.asarray([s["mem"] for s in samples], dtype=np.float64),
        included_trials=np.asarray([s["included_trials"] for s in samples], dtype=int),
        excluded_trials=np.asarray([s["excluded_trials"] for s in samples], dtype=int),
        low_confidence=np.asarray([s["low_confidence"] for s in samples], dtype=bool),
        trials=meta["trials"], inclusion_rate=meta["inclusion_rate"],
        base_seed=meta["base_seed"],
        min_trials_per_side=meta["min_trials_per_side"])


def save_influence_table(table: InfluenceTable, path,
                         manifest_hash: Optional[str] = None) -> None:
    payload = {
        "metadata": {
            "report_floor": table.report_floor,
            "n_train": table.n_train,
            "n_test": table.n_test,
            "trials": table.trials,
            "min_trials_per_side": table.min_trials_per_side,
        },
        "pairs": [
            {"train_index": i, "test_index": j, "infl": v}
            for (i, j), v in sorted(table.pairs.items())
        ],
    }
    if manifest_hash is not None:
        payload["metadata"]["manifest_hash"] = manifest_hash
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)


def load_influence_table(path) -> InfluenceTable:
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    meta = payload["metadata"]
    pairs = {(int(p["train_index"]), int(p["test_index"])): float(p["infl"])
             for p in payload["pairs"]}
    return InfluenceTable(pairs=pairs, report_floor=meta["report_floor"],
                          n_train=meta["n_train"], n_test=meta["n_test"],
                          trials=meta["trials"],
                          min_trials_per_side=meta["min_trials_per_side"])
