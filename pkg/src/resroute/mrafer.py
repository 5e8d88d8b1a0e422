"""Route-by-resolution inference: Assign a batch to experts, run them, Gather back.

Group ``k`` receives every sample whose routing vector has its 1 at position
``k``; samples keep their relative order inside a group, so Gather is the
exact inverse permutation.
"""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .backbone import eval_logits
from .core import Batch, ConfigError, ContractError
from .rrn import rrn_predict


@dataclass
class PartitionedBatch:
    """K disjoint groups of (original index, item)."""

    indices: list[np.ndarray]
    items: list
    size: int

    @property
    def k(self) -> int:
        return len(self.indices)

    @property
    def sizes(self) -> list[int]:
        return [len(i) for i in self.indices]

    @property
    def provenance(self) -> np.ndarray:
        """Original index of each position in the concatenated groups."""
        if not self.indices:
            return np.zeros(0, dtype=np.int64)
        return np.concatenate(self.indices)


def check_routes(routes, n: int | None = None, k: int | None = None) -> np.ndarray:
    r = np.asarray(routes)
    if r.ndim == 1 and r.size == 0:
        if k is None:
            raise ContractError("cannot infer the number of groups from an empty routing list")
        r = r.reshape(0, k)
    if r.ndim != 2:
        raise ContractError(f"routes must be an N x K matrix, got shape {r.shape}")
    if k is not None and r.shape[1] != k:
        raise ContractError(f"routes have width {r.shape[1]}, expected {k}")
    if n is not None and r.shape[0] != n:
        raise ContractError(f"{r.shape[0]} routes for a batch of {n}")
    if r.shape[0] and (not np.isin(r, (0, 1)).all() or not (r.sum(axis=1) == 1).all()):
        bad = np.flatnonzero(~(np.isin(r, (0, 1)).all(axis=1) & (r.sum(axis=1) == 1)))
        raise ContractError(f"routes at positions {bad[:10].tolist()} are not one-hot")
    return r


def _take(batch, idx: np.ndarray):
    if isinstance(batch, np.ndarray):
        return batch[idx]
    if isinstance(batch, Batch):
        return [batch.samples[i] for i in idx]
    return [batch[i] for i in idx]


def assign(batch, routes, k: int | None = None) -> PartitionedBatch:
    """Split ``batch`` (array, Batch or sequence) into K groups by one-hot ``routes``."""
    n = len(batch)
    r = check_routes(routes, n, k)
    indices = [np.flatnonzero(r[:, j]) for j in range(r.shape[1])]
    return PartitionedBatch(indices, [_take(batch, idx) for idx in indices], n)


def gather(parts: PartitionedBatch, group_preds: Sequence):
    """Place each group's predictions back at their original indices.

    Array predictions give an N x ... array; anything else gives a list.
    """
    if len(group_preds) != parts.k:
        raise ContractError(f"{len(group_preds)} prediction groups for {parts.k} partitions")
    for j, (idx, preds) in enumerate(zip(parts.indices, group_preds)):
        if len(preds) != len(idx):
            raise ContractError(f"group {j}: {len(preds)} predictions for {len(idx)} samples")
    arrays = [np.asarray(p) for p in group_preds if isinstance(p, np.ndarray) and len(p)]
    if arrays:
        out = np.empty((parts.size,) + arrays[0].shape[1:], dtype=arrays[0].dtype)
        for idx, preds in zip(parts.indices, group_preds):
            if len(idx):
                out[idx] = preds
        return out
    out = [None] * parts.size
    for idx, preds in zip(parts.indices, group_preds):
        for i, p in zip(idx, preds):
            out[i] = p
    return out


@dataclass
class ExpertBank:
    """One classifier per trained resolution factor, in factor order."""

    experts: list
    factors: tuple[int, ...]

    def __post_init__(self):
        self.factors = tuple(self.factors)
        if len(self.experts) != len(self.factors):
            raise ConfigError(f"{len(self.experts)} experts for {len(self.factors)} factors")
        widths = {e.out_classes for e in self.experts}
        if len(widths) > 1:
            raise ConfigError(f"experts disagree on class count: {sorted(widths)}")

    def __len__(self):
        return len(self.experts)

    @property
    def out_classes(self) -> int:
        return self.experts[0].out_classes


def mrafer_forward(bank: ExpertBank, parts: PartitionedBatch, max_workers: int = 1,
                   batch_size: int = 256) -> np.ndarray:
    """Run expert k on group k (skipping empty groups) and gather the logits."""
    if len(bank) != parts.k:
        raise ConfigError(f"expert bank has {len(bank)} experts but routing has {parts.k} groups")
    if parts.size == 0:
        return np.zeros((0, bank.out_classes), dtype=np.float32)

    def run(j):
        if not len(parts.indices[j]):
            return np.zeros((0, bank.out_classes), dtype=np.float32)
        return eval_logits(bank.experts[j], parts.items[j], batch_size)

    if max_workers > 1:
        with ThreadPoolExecutor(max_workers) as pool:
            outs = list(pool.map(run, range(parts.k)))
    else:
        outs = [run(j) for j in range(parts.k)]
    return gather(parts, outs)


def drg_predict(rrn_net, bank: ExpertBank, x: np.ndarray, routes=None, max_workers: int = 1,
                return_details: bool = False):
    """Expression classes for a network-ready batch.

    ``routes`` overrides the recognizer (e.g. ground-truth routing).
    """
    k = len(bank)
    if routes is None:
        if rrn_net.out_classes != k:
            raise ConfigError(f"recognizer predicts {rrn_net.out_classes} resolutions but the bank has {k} experts")
        routes = rrn_predict(rrn_net, x, k) if len(x) else np.zeros((0, k), dtype=np.int8)
    parts = assign(x, routes, k)
    logits = mrafer_forward(bank, parts, max_workers)
    classes = logits.argmax(axis=1) if len(logits) else np.zeros(0, dtype=np.int64)
    if return_details:
        return classes, logits, np.asarray(routes)
    return classes


def write_predictions(path, routes, factors, predicted, truth) -> None:
    """CSV: original_index,routed_factor,predicted_expression,true_expression."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("original_index", "routed_factor", "predicted_expression", "true_expression"))
        for i, (r, p, t) in enumerate(zip(routes, predicted, truth)):
            w.writerow((i, factors[int(np.argmax(r))], int(p), int(t)))
