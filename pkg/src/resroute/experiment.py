"""Desk-scale synthetic experiment: corpus -> degradation -> training -> report."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .baselines import (
    DomainAdversarialClassifier,
    MultiScaleClassifier,
    PooledExpertClassifier,
    ResolutionAwareBNClassifier,
)
from .degrade import DegradeConfig, load_split, prepare, read_normalization, synth_corpus
from .estimators import DynamicResolutionClassifier
from .harness import EvalReport, eval_cross, eval_grid, write_report

log = logging.getLogger(__name__)

ALL_METHODS = ("mean", "max", "rabn", "da", "mstrain", "drg")


@dataclass(frozen=True)
class DeskConfig:
    classes: int = 4
    per_class: int = 500
    test_per_class: int = 125
    base_size: int = 48
    factors: tuple[int, ...] = (1, 2, 4, 6, 8)
    extra_factors: tuple[int, ...] = (12, 14, 16)
    epochs: int = 30
    batch_size: int = 32
    lr: float = 3e-4
    widths: tuple[int, ...] = (8, 16, 32, 64)
    blocks: tuple[int, ...] = (1, 1, 1, 1)
    stem_kernel: int = 5
    seed: int = 0
    methods: tuple[str, ...] = ALL_METHODS

    @property
    def degrade(self) -> DegradeConfig:
        return DegradeConfig(base_size=self.base_size, factors=self.factors,
                             eval_extra_factors=self.extra_factors, net_input_size=self.base_size)

    def net_params(self) -> dict:
        return dict(widths=self.widths, blocks=self.blocks, stem_kernel=self.stem_kernel,
                    epochs=self.epochs, batch_size=self.batch_size, lr=self.lr)


@dataclass
class DeskResult:
    reports: list[EvalReport]
    drg: DynamicResolutionClassifier
    data_root: Path
    timings: dict[str, float] = field(default_factory=dict)

    def report(self, method: str) -> EvalReport:
        return next(r for r in self.reports if r.method == method)


def load_train_views(root, factors):
    """Aligned per-factor training arrays: (V x N x 3 x H x W, labels)."""
    views, labels = [], None
    for f in factors:
        X, y = load_split(root, "train", f)
        if labels is not None and not np.array_equal(labels, y):
            raise ValueError("training splits are not aligned across factors")
        views.append(X)
        labels = y
    return np.stack(views), labels


def run_desk_experiment(output_dir, cfg: DeskConfig = DeskConfig()) -> DeskResult:
    out = Path(output_dir)
    dcfg = cfg.degrade
    timings = {}
    t0 = time.perf_counter()
    synth_corpus(cfg.per_class, cfg.classes, dcfg, cfg.seed, out / "corpus", cfg.test_per_class)
    prepare(out / "corpus", out / "data", dcfg, dcfg.all_factors)
    root = out / "data"
    norm = read_normalization(root)
    timings["data"] = time.perf_counter() - t0

    views, y = load_train_views(root, cfg.factors)
    n = len(y)
    X_all = views.reshape((-1,) + views.shape[2:])
    y_all = np.tile(y, len(cfg.factors))
    r_all = np.repeat(np.asarray(cfg.factors), n)
    common = dict(normalization=norm, random_state=cfg.seed, **cfg.net_params())

    t0 = time.perf_counter()
    drg = DynamicResolutionClassifier(factors=cfg.factors, n_classes=cfg.classes, **common).fit(X_all, y_all, r_all)
    timings["drg"] = time.perf_counter() - t0
    log.info("recognizer + experts trained in %.1fs", timings["drg"])

    reports = []
    models: dict[str, object] = {}
    if "mean" in cfg.methods:
        models["mean"] = PooledExpertClassifier(drg.experts_, "mean")
    if "max" in cfg.methods:
        models["max"] = PooledExpertClassifier(drg.experts_, "max")
    if "rabn" in cfg.methods:
        t0 = time.perf_counter()
        models["rabn"] = ResolutionAwareBNClassifier(factors=cfg.factors, n_classes=cfg.classes, **common).fit(
            X_all, y_all, r_all)
        timings["rabn"] = time.perf_counter() - t0
    if "da" in cfg.methods:
        t0 = time.perf_counter()
        models["da"] = DomainAdversarialClassifier(n_classes=cfg.classes, **common).fit(X_all, y_all, r_all)
        timings["da"] = time.perf_counter() - t0
    if "mstrain" in cfg.methods:
        t0 = time.perf_counter()
        models["mstrain"] = MultiScaleClassifier(factors=cfg.factors, n_classes=cfg.classes, **common).fit(views, y)
        timings["mstrain"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    for method in cfg.methods:
        if method == "drg":
            report = eval_grid(drg, root, cfg.factors, method="drg")
            experts = {f"x{f}": e for f, e in zip(cfg.factors, drg.experts_)}
            if "mstrain" in models:
                experts["&".join(f"x{f}" for f in cfg.factors)] = models["mstrain"]
            report.cross_matrix = eval_cross(experts, root, dcfg.all_factors)
            reports.append(report)
            drg.set_params(routing="oracle")
            oracle = eval_grid(drg, root, cfg.factors, method="drg-oracle")
            drg.set_params(routing="rrn")
            reports.append(oracle)
        else:
            reports.append(eval_grid(models[method], root, cfg.factors, method=method,
                                     trained_factors=cfg.factors))
    timings["eval"] = time.perf_counter() - t0
    write_report(reports, out)
    return DeskResult(reports, drg, root, timings)
