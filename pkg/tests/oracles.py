"""Independent reference computations used to cross-check the implementation.

Everything in this module deliberately avoids the package's tape machinery:
finite differences, exhaustive corner enumeration, and plain-loop reference
formulas are computed with raw numpy so they cannot share a bug with the code
under test.
"""

from __future__ import annotations

import itertools

import numpy as np


def finite_difference_gradient(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function at x, one entry at a time."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def assert_close_rel(analytic: np.ndarray, reference: np.ndarray, rtol: float,
                     context: str = "") -> None:
    """Relative comparison with a unit floor so near-zero entries do not blow up."""
    analytic = np.asarray(analytic, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    scale = np.maximum(1.0, np.abs(reference))
    err = np.abs(analytic - reference) / scale
    worst = float(err.max()) if err.size else 0.0
    assert worst <= rtol, f"{context}: relative error {worst:.3e} > {rtol:.1e}"


def softmax_rows(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy_mean(logits: np.ndarray, labels: np.ndarray) -> float:
    """Reference mean cross-entropy computed through explicit softmax rows."""
    p = softmax_rows(np.asarray(logits, dtype=np.float64))
    rows = np.arange(len(labels))
    return float(-np.log(p[rows, labels]).mean())


def mlp_forward_arrays(weights, biases, x):
    """Plain-numpy MLP forward returning (logits, penultimate representation)."""
    h = np.asarray(x, dtype=np.float64)
    for W, b in zip(weights[:-1], biases[:-1]):
        h = np.maximum(0.0, h @ W.T + b)
    rep = h
    logits = h @ weights[-1].T + biases[-1]
    return logits, rep


def corner_search_max_loss(weights, biases, x, y, epsilon,
                           clamp_min=0.0, clamp_max=1.0):
    """Exhaustive max of the cross-entropy over every corner of the feasible box.

    The feasible box per coordinate is [max(clamp_min, x-eps), min(clamp_max, x+eps)];
    for an affine model the loss is convex in the input, so the maximum over the
    box is attained at one of its 2^d corners.
    """
    x = np.asarray(x, dtype=np.float64)
    d = x.size
    lo = np.maximum(clamp_min, x - epsilon)
    hi = np.minimum(clamp_max, x + epsilon)
    best = -np.inf
    for signs in itertools.product((0, 1), repeat=d):
        corner = np.where(np.asarray(signs, dtype=bool), hi, lo)
        logits, _ = mlp_forward_arrays(weights, biases, corner[None, :])
        best = max(best, cross_entropy_mean(logits, np.asarray([y])))
    return best


def discrimination_loss_reference(reps: np.ndarray, labels: np.ndarray,
                                  typical_mask: np.ndarray, tau: float,
                                  include_positive_in_denominator: bool = False) -> float:
    """Brute-force pair/negative enumeration of the contrastive regularizer.

    Ordered same-class typical pairs (i, j), i != j; negatives are the typical
    batch members with a different label than the anchor. Pairs whose anchor has
    no negatives are skipped; no eligible pair yields 0.
    """
    reps = np.asarray(reps, dtype=np.float64)
    labels = np.asarray(labels)
    typical_mask = np.asarray(typical_mask, dtype=bool)
    n = len(labels)
    terms = []
    for i in range(n):
        if not typical_mask[i]:
            continue
        negatives = [k for k in range(n)
                     if typical_mask[k] and labels[k] != labels[i]]
        if not negatives:
            continue
        for j in range(n):
            if j == i or not typical_mask[j] or labels[j] != labels[i]:
                continue
            s_ij = float(reps[i] @ reps[j]) / tau
            denom = sum(np.exp(float(reps[i] @ reps[k]) / tau) for k in negatives)
            if include_positive_in_denominator:
                denom += np.exp(s_ij)
            terms.append(-(s_ij - np.log(denom)))
    if not terms:
        return 0.0
    return float(np.mean(terms))
