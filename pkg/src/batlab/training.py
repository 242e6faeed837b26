"""Training loops: ERM, PGD adversarial training, and BAT.

BAT extends adversarial training with two pieces computed every mini-batch
from the current model:

* cost-sensitive reweighting: a misclassified adversarial example whose
  memorization value exceeds sigma gets weight exp(-alpha * q), where q is its
  largest wrong-class softmax probability (the poisoning score); everything
  else keeps weight 1,
* a discrimination loss pulling same-class typical adversarial
  representations together against in-batch typical negatives of other
  classes, weighted by beta.

The three methods share one loop so that BAT with alpha = beta = 0 follows the
exact op sequence of PGD adversarial training and reproduces it bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import attack as attack_mod
from . import autodiff as ad
from .attack import AttackConfig, pgd, training_attack, evaluation_attack
from .autodiff import Tensor
from .errors import ConfigError, ContractError, DimensionError
from .metrics import MetricsRecord, evaluate_epoch
from .model import MlpModel, forward, forward_arrays, init_mlp, predict_proba
from .synthdata import LabeledDataset

METHOD_ERM = "erm"
METHOD_PGD_AT = "pgd_at"
METHOD_BAT = "bat"
METHODS = (METHOD_ERM, METHOD_PGD_AT, METHOD_BAT)


@dataclass(frozen=True)
class OptimizerConfig:
    """Momentum SGD with weight decay and a step learning-rate schedule.

    The rate is multiplied by ``lr_decay_factor`` once for every decay epoch
    less than or equal to the current (0-based) epoch index.
    """

    learning_rate: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_decay_factor: float = 0.1
    decay_epochs: tuple[int, ...] = (30, 45)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ContractError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ContractError(f"momentum must be in [0, 1), got {self.momentum}")

    def rate_at(self, epoch: int) -> float:
        lr = self.learning_rate
        for d in self.decay_epochs:
            if epoch >= d:
                lr *= self.lr_decay_factor
        return lr


@dataclass(frozen=True)
class BatConfig:
    """Everything one training run consumes."""

    alpha: float = 1.0
    beta: float = 0.2
    sigma: float = 0.15
    tau: float = 0.5
    include_positive_in_denominator: bool = False
    attack: AttackConfig = field(default_factory=lambda: training_attack(0.05))
    eval_attack: AttackConfig = field(default_factory=lambda: evaluation_attack(0.05))
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    hidden_dims: tuple[int, ...] = (64, 64)
    input_center: float = 0.5
    input_gain: float = 20.0
    epochs: int = 60
    batch_size: int = 128
    seed: int = 0

    def __post_init__(self):
        if self.tau <= 0:
            raise ContractError(f"tau must be > 0, got {self.tau}")
        if self.alpha < 0 or self.beta < 0:
            raise ContractError("alpha and beta must be >= 0")
        if not 0.0 <= self.sigma <= 1.0:
            raise ContractError(f"sigma must be in [0, 1], got {self.sigma}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ContractError("epochs and batch_size must be >= 1")


@dataclass
class TrainReport:
    """Per-epoch records plus the final model and loss trajectories."""

    model: MlpModel
    records: list[MetricsRecord]
    epoch_mean_weight: list[float]
    epoch_ce_loss: list[float]
    epoch_dl_loss: list[float]
    method: str


# -- BAT objective pieces -------------------------------------------------


def poisoning_score(probs: np.ndarray, y: int) -> float:
    """Largest softmax probability assigned to any class other than y."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 1:
        raise DimensionError(f"poisoning_score takes one probability row, got {probs.shape}")
    if probs.size < 2:
        raise ContractError("poisoning score needs at least two classes")
    mask = np.ones(probs.size, dtype=bool)
    mask[y] = False
    return float(probs[mask].max())


def poisoning_scores(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Row-wise poisoning scores for a batch."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.shape[1] < 2:
        raise ContractError("poisoning score needs at least two classes")
    masked = probs.copy()
    masked[np.arange(len(labels)), labels] = -np.inf
    return masked.max(axis=1)


def bat_weight(q: float, mem_i: float, predicted: int, y: int,
               alpha: float, sigma: float) -> float:
    """exp(-alpha * q) for misclassified atypical samples, else 1."""
    if mem_i > sigma and predicted != y:
        return float(math.exp(-alpha * q))
    return 1.0


def bat_weights(q: np.ndarray, mem: np.ndarray, predicted: np.ndarray,
                labels: np.ndarray, alpha: float, sigma: float) -> np.ndarray:
    downweight = (mem > sigma) & (predicted != labels)
    return np.where(downweight, np.exp(-alpha * np.asarray(q)), 1.0)


def reweighted_adv_loss(per_sample_losses: Tensor, weights: np.ndarray) -> Tensor:
    """Weighted mean sum(w * L) / sum(w); weights are constants on the tape."""
    weights = np.asarray(weights, dtype=np.float64)
    if per_sample_losses.data.ndim != 1:
        raise DimensionError(
            f"per-sample losses must be a vector, got {per_sample_losses.shape}")
    if per_sample_losses.size == 0:
        raise ContractError("reweighted loss needs a non-empty batch")
    if weights.shape != per_sample_losses.shape:
        raise DimensionError(
            f"weights shape {weights.shape} does not match losses {per_sample_losses.shape}")
    if weights.min() <= 0.0 or weights.max() > 1.0:
        raise ContractError("weights must lie in (0, 1]")
    total = (Tensor(weights) * per_sample_losses).sum()
    return total * (1.0 / float(weights.sum()))


def discrimination_loss(representations: Tensor, labels: np.ndarray,
                        typical_mask: np.ndarray, tau: float,
                        include_positive_in_denominator: bool = False) -> Tensor:
    """Contrastive regularizer over typical same-class pairs in the batch.

    Mean over ordered typical pairs (i, j), i != j, same label, of
    ``-log(e^{h_i.h_j/tau} / D)`` where D sums ``e^{h_i.h_k/tau}`` over the
    typical batch members k with a different label than i (optionally plus the
    positive term itself). Anchors without negatives contribute no pairs; with
    no eligible pair at all the loss is the constant 0.

    Written as printed in its source formulation, the denominator omits the
    positive term, so the value can be negative; the
    ``include_positive_in_denominator`` switch restores the standard
    contrastive form.
    """
    if tau <= 0:
        raise ContractError(f"tau must be > 0, got {tau}")
    labels = np.asarray(labels)
    typical = np.asarray(typical_mask, dtype=bool)
    n = len(labels)
    if representations.data.ndim != 2 or representations.shape[0] != n:
        raise DimensionError(
            f"representations {representations.shape} do not match {n} labels")

    same = labels[:, None] == labels[None, :]
    typ_pair = typical[:, None] & typical[None, :]
    mask_pos = same & typ_pair & ~np.eye(n, dtype=bool)
    mask_neg = ~same & typ_pair
    has_neg = mask_neg.any(axis=1)
    pair_mask = (mask_pos & has_neg[:, None]).astype(np.float64)
    n_pairs = pair_mask.sum()
    if n_pairs == 0:
        return Tensor(0.0)

    sims = ad.matmul(representations, representations.T) * (1.0 / tau)
    neg_f = mask_neg.astype(np.float64)

    if not include_positive_in_denominator:
        # Denominator depends on the anchor only: D_i = sum_neg exp(s_ik).
        row_max = np.where(has_neg, sims.data.max(axis=1, initial=-np.inf,
                                                  where=mask_neg), 0.0)
        shifted = (sims - Tensor(row_max[:, None])) * Tensor(neg_f)
        exp_masked = ad.exp(shifted) * Tensor(neg_f)
        row_den = exp_masked.sum(axis=1) + Tensor(np.where(has_neg, 0.0, 1.0))
        log_den = ad.log(row_den)
        pos_per_anchor = pair_mask.sum(axis=1)
        den_total = (Tensor(pos_per_anchor) * log_den).sum() \
            + Tensor(float((pos_per_anchor * row_max).sum()))
    else:
        # Denominator is pair-dependent: D_ij = exp(s_ij) + sum_neg exp(s_ik).
        union_mask = mask_neg | mask_pos
        union = union_mask.astype(np.float64)
        row_max = np.where(union_mask.any(axis=1),
                           sims.data.max(axis=1, initial=-np.inf,
                                         where=union_mask), 0.0)
        shifted = (sims - Tensor(row_max[:, None])) * Tensor(union)
        exp_masked = ad.exp(shifted) * Tensor(union)
        row_neg_sum = (exp_masked * Tensor(neg_f)).sum(axis=1)
        den_mat = exp_masked + ad.reshape(row_neg_sum, (n, 1)) * Tensor(np.ones((1, n)))
        log_den = ad.log(den_mat + Tensor(1.0 - union))
        den_total = (Tensor(pair_mask) * log_den).sum() \
            + Tensor(float((pair_mask.sum(axis=1) * row_max).sum()))

    num_total = (Tensor(pair_mask) * sims).sum()
    return (den_total - num_total) * (1.0 / float(n_pairs))


# -- optimizer -------------------------------------------------------------


@dataclass
class SgdState:
    velocity: list[np.ndarray]

    @classmethod
    def for_model(cls, model: MlpModel) -> "SgdState":
        return cls(velocity=[np.zeros_like(p.data) for p in model.parameters()])


def sgd_update(model: MlpModel, grads: list[np.ndarray], state: SgdState,
               config: OptimizerConfig, epoch: int) -> None:
    """One momentum step with decoupled-into-gradient weight decay."""
    params = model.parameters()
    if len(grads) != len(params):
        raise DimensionError(f"expected {len(params)} gradients, got {len(grads)}")
    lr = config.rate_at(epoch)
    for p, g, v in zip(params, grads, state.velocity):
        if g.shape != p.data.shape:
            raise DimensionError(
                f"gradient shape {g.shape} does not match parameter {p.data.shape}")
        v *= config.momentum
        v += g + config.weight_decay * p.data
        p.data -= lr * v


# -- objective and loop ------------------------------------------------------


def batch_objective(model: MlpModel, x_in: np.ndarray, labels: np.ndarray,
                    weights: np.ndarray, typical_mask: Optional[np.ndarray],
                    config: BatConfig) -> tuple[Tensor, float, float]:
    """Tape objective for one (already attacked) batch.

    Returns (objective, ce_component, dl_component). The discrimination term
    is skipped entirely when beta is 0 so the reduced objective is op-for-op
    the reweighted adversarial loss.
    """
    result = forward(model, x_in)
    per_sample = ad.cross_entropy_rows(result.logits, labels)
    ce = reweighted_adv_loss(per_sample, weights)
    if config.beta != 0.0 and typical_mask is not None:
        dl = discrimination_loss(result.representation, labels, typical_mask,
                                 config.tau, config.include_positive_in_denominator)
        return ce + config.beta * dl, ce.item(), dl.item()
    return ce, ce.item(), 0.0


def train(train_set: LabeledDataset, method: str, config: BatConfig,
          eval_splits: Optional[dict[str, tuple[np.ndarray, np.ndarray]]] = None,
          cosine_split: Optional[str] = None) -> TrainReport:
    """Run one training method over the dataset.

    Per mini-batch: adversarial examples via PGD (skipped by ERM), poisoning
    scores and weights from the current model (BAT only), the discrimination
    loss over typical batch members (BAT with beta > 0), then one SGD step on
    the combined objective. Deterministic given ``config.seed``.

    ``eval_splits`` maps split names to (features, labels); each epoch appends
    one record per split plus a ``train`` record with the loss components.
    """
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}; choose from {METHODS}")
    labels = train_set.labels
    num_classes = int(labels.max()) + 1
    if num_classes < 2:
        raise ContractError("training needs at least 2 classes")
    if method == METHOD_BAT and train_set.mem is None:
        raise ConfigError(
            "BAT needs per-sample memorization values; run estimate-mem first")

    seq = np.random.SeedSequence([config.seed, 2026])
    init_seq, shuffle_seq, attack_seq, eval_seq = seq.spawn(4)
    model = init_mlp(train_set.dim, config.hidden_dims, num_classes,
                     seed=int(init_seq.generate_state(1)[0]),
                     input_center=config.input_center,
                     input_gain=config.input_gain)
    shuffle_rng = np.random.default_rng(shuffle_seq)
    attack_rng = np.random.default_rng(attack_seq)
    eval_pair_seed = int(eval_seq.generate_state(1)[0])

    state = SgdState.for_model(model)
    mem = train_set.mem
    n = len(train_set)
    records: list[MetricsRecord] = []
    mean_weights, ce_losses, dl_losses = [], [], []

    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(n)
        weight_sum = 0.0
        ce_sum = 0.0
        dl_sum = 0.0
        batches = 0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            xb = train_set.features[idx]
            yb = labels[idx]

            if method == METHOD_ERM:
                x_in = xb
            else:
                x_in = pgd(model, xb, yb, config.attack, rng=attack_rng)

            if method == METHOD_BAT:
                probs = predict_proba(model, x_in)
                predicted = probs.argmax(axis=1)
                q = poisoning_scores(probs, yb)
                w = bat_weights(q, mem[idx], predicted, yb, config.alpha,
                                config.sigma)
                typical_mask = mem[idx] < config.sigma
            else:
                w = np.ones(len(idx))
                typical_mask = None

            objective, ce_val, dl_val = batch_objective(
                model, x_in, yb, w, typical_mask, config)
            model.zero_grad()
            ad.backward(objective)
            sgd_update(model, [p.grad for p in model.parameters()], state,
                       config.optimizer, epoch)

            weight_sum += float(w.sum())
            ce_sum += ce_val
            dl_sum += dl_val
            batches += 1

        mean_weights.append(weight_sum / n)
        ce_losses.append(ce_sum / batches)
        dl_losses.append(dl_sum / batches)
        records.append(MetricsRecord(
            epoch=epoch, split="train", mean_weight=mean_weights[-1],
            ce_loss=ce_losses[-1], dl_loss=dl_losses[-1]))
        if eval_splits:
            records.extend(evaluate_epoch(
                model, eval_splits, config.eval_attack, epoch,
                cosine_split=cosine_split, seed=eval_pair_seed))

    return TrainReport(model=model, records=records,
                       epoch_mean_weight=mean_weights,
                       epoch_ce_loss=ce_losses, epoch_dl_loss=dl_losses,
                       method=method)
