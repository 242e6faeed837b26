"""l-infinity bounded adversarial example generation (FGSM and multi-step PGD).

Both attacks ascend the cross-entropy with respect to the input, take signed
steps, and project back onto the epsilon ball intersected with the valid input
range. They run on a detached parameter view, so no gradient ever leaks into a
surrounding training tape. ``sign(0) = 0``: coordinates with a vanishing
gradient receive no perturbation.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError
from .model import MlpModel, forward

# Invocation counters, exposed so tests can observe which code paths ran.
call_counts = {"fgsm": 0, "pgd": 0}


def reset_call_counts() -> None:
    for key in call_counts:
        call_counts[key] = 0


@dataclass(frozen=True)
class AttackConfig:
    """Radius, step schedule, and clamp range of an l-infinity attack."""

    epsilon: float
    step_size: float
    steps: int
    random_init: bool = False
    clamp_min: float = 0.0
    clamp_max: float = 1.0

    def __post_init__(self):
        if self.epsilon < 0:
            raise ContractError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.steps < 0:
            raise ContractError(f"steps must be >= 0, got {self.steps}")
        if self.steps > 0 and self.step_size <= 0:
            raise ContractError(
                f"step_size must be > 0 when steps > 0, got {self.step_size}")
        if not self.clamp_min < self.clamp_max:
            raise ContractError(
                f"clamp range invalid: [{self.clamp_min}, {self.clamp_max}]")


def training_attack(epsilon: float, steps: int = 10,
                    step_size: Optional[float] = None) -> AttackConfig:
    """Community-standard training attack: random start, eta = epsilon/4."""
    return AttackConfig(epsilon=epsilon,
                        step_size=epsilon / 4.0 if step_size is None else step_size,
                        steps=steps, random_init=True)


def evaluation_attack(epsilon: float, steps: int = 20,
                      step_size: Optional[float] = None) -> AttackConfig:
    """20-step deterministic attack used for adversarial accuracy."""
    return AttackConfig(epsilon=epsilon,
                        step_size=epsilon / 4.0 if step_size is None else step_size,
                        steps=steps, random_init=False)


def input_gradient(model: MlpModel, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Gradient of the mean cross-entropy with respect to the input batch."""
    xt = Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)
    loss = ad.softmax_cross_entropy(forward(model, xt).logits, y)
    ad.backward(loss)
    return xt.grad


def pgd(model: MlpModel, x: np.ndarray, y: np.ndarray, config: AttackConfig,
        rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Projected signed-gradient ascent inside the epsilon ball around x.

    With ``random_init`` the iterate starts uniformly in [-eps, eps]^d (clamped);
    supply ``rng`` to make that draw reproducible. The output always satisfies
    ``max|x_adv - x| <= epsilon`` and the clamp bounds.
    """
    call_counts["pgd"] += 1
    return _pgd_core(model, x, y, config, rng)


def fgsm(model: MlpModel, x: np.ndarray, y: np.ndarray,
         config: AttackConfig) -> np.ndarray:
    """Single signed-gradient step of magnitude epsilon (PGD with one step)."""
    call_counts["fgsm"] += 1
    one_step = replace(config, steps=1, random_init=False,
                       step_size=config.epsilon if config.epsilon > 0 else 1.0)
    return _pgd_core(model, x, y, one_step, rng=None)


def _pgd_core(model: MlpModel, x: np.ndarray, y: np.ndarray,
              config: AttackConfig, rng: Optional[np.random.Generator]) -> np.ndarray:
    x0 = np.array(x, dtype=np.float64, copy=True)
    if config.epsilon == 0.0:
        return x0
    detached = model.detached()
    xa = x0
    if config.random_init:
        if rng is None:
            rng = np.random.default_rng(0)
        xa = x0 + rng.uniform(-config.epsilon, config.epsilon, size=x0.shape)
        xa = _project(xa, x0, config)
    for _ in range(config.steps):
        grad = input_gradient(detached, xa, y)
        xa = xa + config.step_size * np.sign(grad)
        xa = _project(xa, x0, config)
    return xa


def _project(xa: np.ndarray, x0: np.ndarray, config: AttackConfig) -> np.ndarray:
    xa = np.clip(xa, x0 - config.epsilon, x0 + config.epsilon)
    return np.clip(xa, config.clamp_min, config.clamp_max)
