"""Multilayer perceptron classifier with access to the penultimate representation.

The representation (post-activation output of the last hidden layer, or the
input itself for a purely affine model) feeds both the contrastive regularizer
and the class-wise cosine metric, so :func:`forward` returns it alongside the
logits on the same tape.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, DimensionError


@dataclass
class MlpModel:
    """Affine layers with ReLU between them and none after the last.

    ``weights[k]`` has shape [out x in]; consecutive layers chain and the last
    out equals ``num_classes``.

    A fixed standardization ``(x - input_center) * input_gain`` runs before the
    first layer. Benchmark features live in [0,1] with blob structure at the
    0.02 scale, which unit-scale initializations cannot resolve; the gain puts
    that structure at O(1) where SGD can actually memorize planted singletons.
    The defaults (center 0, gain 1) make it the identity.
    """

    weights: list[Tensor]
    biases: list[Tensor]
    input_dim: int
    num_classes: int
    input_center: float = 0.0
    input_gain: float = 1.0

    @property
    def hidden_dims(self) -> tuple[int, ...]:
        return tuple(w.shape[0] for w in self.weights[:-1])

    @property
    def representation_dim(self) -> int:
        return self.weights[-1].shape[1]

    def parameters(self) -> list[Tensor]:
        params: list[Tensor] = []
        for w, b in zip(self.weights, self.biases):
            params.append(w)
            params.append(b)
        return params

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def detached(self) -> "MlpModel":
        """View sharing the same parameter arrays but recording no gradients.

        Attack loops differentiate with respect to inputs only; running them on
        the detached view keeps parameter ``.grad`` buffers untouched.
        """
        return MlpModel(
            weights=[Tensor(w.data) for w in self.weights],
            biases=[Tensor(b.data) for b in self.biases],
            input_dim=self.input_dim,
            num_classes=self.num_classes,
            input_center=self.input_center,
            input_gain=self.input_gain,
        )


@dataclass
class ForwardResult:
    """Logits plus the exact input of the final affine layer."""

    logits: Tensor
    representation: Tensor


def init_mlp(input_dim: int, hidden_dims: Sequence[int], num_classes: int,
             seed: int, input_center: float = 0.0,
             input_gain: float = 1.0) -> MlpModel:
    """Build an MLP with uniform(+-sqrt(6/fan_in)) weights and zero biases.

    Empty ``hidden_dims`` yields a single affine layer whose representation is
    the (standardized) input itself.
    """
    dims = [int(input_dim), *[int(h) for h in hidden_dims], int(num_classes)]
    if any(d <= 0 for d in dims):
        raise ContractError(f"all layer dimensions must be positive, got {dims}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = math.sqrt(6.0 / fan_in)
        w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        weights.append(Tensor(w, requires_grad=True))
        biases.append(Tensor(np.zeros(fan_out), requires_grad=True))
    return MlpModel(weights, biases, int(input_dim), int(num_classes),
                    input_center=float(input_center), input_gain=float(input_gain))


def _standardize_tape(model: MlpModel, xt: Tensor) -> Tensor:
    if model.input_center == 0.0 and model.input_gain == 1.0:
        return xt
    return (xt - Tensor(model.input_center)) * model.input_gain


def forward(model: MlpModel, x: Union[Tensor, np.ndarray]) -> ForwardResult:
    """Tape forward pass over a [batch x input_dim] batch."""
    xt = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
    if xt.data.ndim != 2 or xt.shape[1] != model.input_dim:
        raise DimensionError(
            f"forward expects [batch x {model.input_dim}] inputs, got {xt.shape}")
    h = _standardize_tape(model, xt)
    for w, b in zip(model.weights[:-1], model.biases[:-1]):
        h = ad.relu(ad.matmul(h, w.T) + b)
    representation = h
    logits = ad.matmul(h, model.weights[-1].T) + model.biases[-1]
    return ForwardResult(logits=logits, representation=representation)


def forward_arrays(model: MlpModel, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Tape-free forward pass returning (logits, representation) arrays.

    Evaluation and score computations call this in hot loops; it must agree
    bit-for-bit with the tape path, so it mirrors the same op order.
    """
    h = np.asarray(x, dtype=np.float64)
    if h.ndim != 2 or h.shape[1] != model.input_dim:
        raise DimensionError(
            f"forward expects [batch x {model.input_dim}] inputs, got {h.shape}")
    if model.input_center != 0.0 or model.input_gain != 1.0:
        h = (h - model.input_center) * model.input_gain
    for w, b in zip(model.weights[:-1], model.biases[:-1]):
        pre = h @ w.data.T + b.data
        h = np.where(pre > 0.0, pre, 0.0)
    logits = h @ model.weights[-1].data.T + model.biases[-1].data
    return logits, h


def predict_proba(model: MlpModel, x: np.ndarray) -> np.ndarray:
    """Softmax probabilities per row; rows are nonnegative and sum to 1."""
    logits, _ = forward_arrays(model, x)
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def predict_labels(model: MlpModel, x: np.ndarray) -> np.ndarray:
    logits, _ = forward_arrays(model, x)
    return logits.argmax(axis=1)


def save_checkpoint(model: MlpModel, path) -> None:
    """Write the model as JSON; decimal text round-trips float64 exactly."""
    payload = checkpoint_payload(model)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)


def checkpoint_payload(model: MlpModel) -> dict:
    return {
        "format": "batlab-mlp-v1",
        "input_dim": model.input_dim,
        "num_classes": model.num_classes,
        "input_center": model.input_center,
        "input_gain": model.input_gain,
        "layers": [
            {
                "out_dim": int(w.shape[0]),
                "in_dim": int(w.shape[1]),
                "weights": w.data.reshape(-1).tolist(),
                "bias": b.data.tolist(),
            }
            for w, b in zip(model.weights, model.biases)
        ],
    }


def load_checkpoint(path) -> MlpModel:
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    return model_from_payload(payload)


def model_from_payload(payload: dict) -> MlpModel:
    if payload.get("format") != "batlab-mlp-v1":
        raise ContractError(f"unrecognized checkpoint format {payload.get('format')!r}")
    weights, biases = [], []
    for layer in payload["layers"]:
        w = np.asarray(layer["weights"], dtype=np.float64).reshape(
            layer["out_dim"], layer["in_dim"])
        b = np.asarray(layer["bias"], dtype=np.float64)
        weights.append(Tensor(w, requires_grad=True))
        biases.append(Tensor(b, requires_grad=True))
    return MlpModel(weights, biases, int(payload["input_dim"]),
                    int(payload["num_classes"]),
                    input_center=float(payload.get("input_center", 0.0)),
                    input_gain=float(payload.get("input_gain", 1.0)))
