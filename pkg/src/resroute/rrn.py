"""Resolution recognition: softmax/cross-entropy training signal and argmax routing."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np
import torch

from .backbone import eval_logits
from .core import ConfigError, NumericError, argmax_first, one_hot

PROB_FLOOR = 1e-12


def _finite(a: np.ndarray, what: str) -> np.ndarray:
    if np.isnan(a).any():
        raise NumericError(f"NaN in {what}")
    return a


def softmax(logits) -> np.ndarray:
    """Max-shifted softmax over the last axis."""
    z = _finite(np.asarray(logits, dtype=np.float64), "softmax input")
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _as_one_hot(target, k: int) -> np.ndarray:
    t = np.asarray(target)
    if t.ndim == 0:
        return one_hot(int(t), k).astype(np.float64)
    if t.shape[-1] != k:
        raise ValueError(f"target length {t.shape[-1]} != probability length {k}")
    return t.astype(np.float64)


def cross_entropy(target, probs) -> float:
    """-sum_j y_j log p_j for one sample; ``target`` is a one-hot vector or class index."""
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 1:
        raise ValueError("cross_entropy takes a single probability vector")
    y = _as_one_hot(target, p.size)
    if y.shape != p.shape:
        raise ValueError(f"length mismatch: {y.shape} vs {p.shape}")
    return float(-(y * np.log(np.maximum(p, PROB_FLOOR))).sum())


def mean_cross_entropy(targets, probs) -> float:
    """Batch loss: mean of :func:`cross_entropy` over rows."""
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 2:
        raise ValueError("expected an N x K probability matrix")
    t = np.asarray(targets)
    y = np.eye(p.shape[1])[t] if t.ndim == 1 else t.astype(np.float64)
    if y.shape != p.shape:
        raise ValueError(f"length mismatch: {y.shape} vs {p.shape}")
    return float(-(y * np.log(np.maximum(p, PROB_FLOOR))).sum(axis=1).mean())


def logit_gradient(logits, targets) -> np.ndarray:
    """d(mean CE(softmax(logits)))/d(logits) = (softmax - onehot) / N."""
    z = np.asarray(logits, dtype=np.float64)
    t = np.asarray(targets)
    y = np.eye(z.shape[1])[t] if t.ndim == 1 else t.astype(np.float64)
    return (softmax(z) - y) / z.shape[0]


def softmax_cross_entropy(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Differentiable training loss with the same stabilisation as :func:`softmax`."""
    z = logits - logits.max(dim=1, keepdim=True).values.detach()
    p = torch.exp(z)
    p = p / p.sum(dim=1, keepdim=True)
    picked = p.gather(1, labels.view(-1, 1)).squeeze(1)
    return -torch.log(picked.clamp_min(PROB_FLOOR)).mean()


def binarize(logits) -> np.ndarray:
    """One-hot vector marking the (first) maximal logit."""
    v = np.asarray(logits, dtype=np.float64)
    return one_hot(argmax_first(v), v.size)


def binarize_batch(logits) -> np.ndarray:
    z = _finite(np.asarray(logits, dtype=np.float64), "routing logits")
    if z.ndim != 2:
        raise ValueError("expected an N x K logit matrix")
    out = np.zeros(z.shape, dtype=np.int8)
    if z.shape[0]:
        out[np.arange(z.shape[0]), z.argmax(axis=1)] = 1
    return out


def rrn_predict(net, x, k: int, batch_size: int = 256, return_confidence: bool = False):
    """Per-sample routing vectors (N x K, int8) in input order."""
    if net.out_classes != k:
        raise ConfigError(f"recognizer head has {net.out_classes} outputs but {k} resolution classes are configured")
    logits = eval_logits(net, x, batch_size).astype(np.float64)
    routes = binarize_batch(logits)
    if return_confidence:
        return routes, softmax(logits).max(axis=1) if len(logits) else np.zeros(0)
    return routes


def write_routes(path, routes, confidence) -> None:
    """Dump routes as CSV: original_index,predicted_class,confidence."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("original_index", "predicted_class", "confidence"))
        for i, (r, c) in enumerate(zip(routes, confidence)):
            w.writerow((i, int(np.argmax(r)), repr(float(c))))
