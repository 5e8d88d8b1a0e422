"""scikit-learn style estimators around the backbone, recognizer and routed ensemble.

All estimators take image arrays shaped N x 3 x H x W, either uint8 or
floats in [0, 1], already at the network input size.
"""

from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.exceptions import NotFittedError
from sklearn.utils.multiclass import check_classification_targets

from .backbone import NetworkSpec, eval_logits, init_network, network_from_checkpoint, save_checkpoint
from .core import ConfigError, DataError, fork, make_rng, torch_seed
from .degrade import Normalization, augment_batch
from .harness import TrainConfig, train_model
from .mrafer import ExpertBank, drg_predict
from .rrn import binarize_batch, softmax

DESK_PARAMS = dict(widths=(8, 16, 32, 64), blocks=(1, 1, 1, 1), stem_kernel=5,
                   epochs=30, batch_size=32)


def check_images(X, copy: bool = False) -> np.ndarray:
    """Validate an N x 3 x H x W image array; uint8 passes through, floats become float32."""
    X = np.array(X, copy=copy) if copy else np.asarray(X)
    if X.ndim != 4 or X.shape[1] != 3:
        raise ValueError(f"expected images shaped N x 3 x H x W, got {X.shape}")
    if X.dtype == np.uint8:
        return X
    if not np.issubdtype(X.dtype, np.floating):
        raise ValueError(f"images must be uint8 or floating point, got {X.dtype}")
    if X.size and not np.isfinite(X).all():
        raise ValueError("images contain non-finite values")
    return X.astype(np.float32, copy=False)


def check_factors(resolution, n: int, factors) -> np.ndarray:
    """Map per-sample factors (or one scalar factor) to class indices into ``factors``."""
    r = np.asarray(resolution)
    if r.ndim == 0:
        r = np.full(n, int(r))
    if r.shape != (n,):
        raise ValueError(f"expected {n} resolution labels, got shape {r.shape}")
    lookup = {int(f): i for i, f in enumerate(factors)}
    try:
        return np.array([lookup[int(f)] for f in r], dtype=np.int64)
    except KeyError as exc:
        raise ConfigError(f"factor {exc.args[0]} not in configured factors {list(factors)}") from None


def _normalization(value, X) -> Normalization:
    if value is None:
        return Normalization.from_images(X)
    if isinstance(value, Normalization):
        return value
    mean, std = value
    return Normalization(tuple(mean), tuple(std))


class ResNetClassifier(ClassifierMixin, BaseEstimator):
    """Single ResNet classifier trained with softmax cross-entropy and Adam.

    Defaults are ResNet18 with batch 256, lr 3e-4 and 80 epochs; pass
    ``**DESK_PARAMS`` for a network small enough for a CPU.
    """

    def __init__(self, widths=(64, 128, 256, 512), blocks=(2, 2, 2, 2), stem_kernel=7,
                 stem_stride=2, stem_pool=True, epochs=80, batch_size=256, lr=3e-4,
                 n_classes=None, normalization=None, dtype="float32", random_state=0):
        self.widths = widths
        self.blocks = blocks
        self.stem_kernel = stem_kernel
        self.stem_stride = stem_stride
        self.stem_pool = stem_pool
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.n_classes = n_classes
        self.normalization = normalization
        self.dtype = dtype
        self.random_state = random_state

    def _spec(self, input_size: int) -> NetworkSpec:
        return NetworkSpec(widths=self.widths, blocks=self.blocks, stem_kernel=self.stem_kernel,
                           stem_stride=self.stem_stride, stem_pool=self.stem_pool, input_size=input_size)

    def _train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(batch_size=self.batch_size, lr=self.lr, epochs=self.epochs,
                           seed=seed, dtype=self.dtype)

    def _encode(self, y) -> np.ndarray:
        y = np.asarray(y)
        check_classification_targets(y)
        if self.n_classes is not None:
            self.classes_ = np.arange(self.n_classes)
            if y.min() < 0 or y.max() >= self.n_classes:
                raise DataError(f"labels must lie in [0, {self.n_classes})")
            return y.astype(np.int64)
        self.classes_, encoded = np.unique(y, return_inverse=True)
        return encoded

    def _seeds(self):
        rng = make_rng(self.random_state)
        init_rng, train_rng = fork(rng, 2)
        return torch_seed(init_rng), torch_seed(train_rng)

    def _build(self, X, y):
        X = check_images(X)
        y = self._encode(y)
        if len(X) != len(y):
            raise ValueError(f"{len(X)} images but {len(y)} labels")
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        self.normalization_ = _normalization(self.normalization, X)
        init_seed, train_seed = self._seeds()
        net = init_network(self._spec(X.shape[2]), len(self.classes_), init_seed, dtype=getattr(torch, self.dtype))
        return X, y, net, train_seed

    def fit(self, X, y):
        X, y, net, seed = self._build(X, y)
        result = train_model(net, X, y, self._train_config(seed), self.normalization_)
        self.network_ = result.net
        self.loss_curve_ = result.losses
        return self

    def _check_fitted(self):
        if not hasattr(self, "network_"):
            raise NotFittedError(f"{type(self).__name__} is not fitted yet")

    def prepare(self, X) -> np.ndarray:
        """Normalize images exactly as the network saw them at evaluation time."""
        self._check_fitted()
        return augment_batch(check_images(X), None, False, self.normalization_)

    def decision_function(self, X) -> np.ndarray:
        X = self.prepare(X)
        return eval_logits(self.network_, X)

    def predict_proba(self, X) -> np.ndarray:
        return softmax(self.decision_function(X))

    def predict(self, X) -> np.ndarray:
        logits = self.decision_function(X)
        return self.classes_[logits.argmax(axis=1)] if len(logits) else self.classes_[:0]

    @property
    def out_classes(self) -> int:
        return len(self.classes_)

    def save(self, path, **meta) -> None:
        self._check_fitted()
        save_checkpoint(self.network_, path, {
            "kind": type(self).__name__,
            "classes": [int(c) for c in self.classes_],
            "normalization": [list(self.normalization_.mean), list(self.normalization_.std)],
            "params": {k: list(v) if isinstance(v, tuple) else v for k, v in self.get_params().items()
                       if k != "normalization" and isinstance(v, (int, float, str, bool, tuple, list, type(None)))},
            **meta,
        })

    @classmethod
    def _norm_factory(cls, meta):
        return None

    @classmethod
    def load(cls, path):
        net, meta = network_from_checkpoint(path, cls._norm_factory)
        params = dict(meta.get("params", {}))
        for key, value in params.items():
            if isinstance(value, list):
                params[key] = tuple(value)
        est = cls(**params)
        est.network_ = net
        est.classes_ = np.asarray(meta["classes"])
        est.normalization_ = Normalization(*map(tuple, meta["normalization"]))
        est.meta_ = meta
        return est


class ResolutionRecognizer(ResNetClassifier):
    """Predicts which downsample factor produced an image; ``y`` holds factors."""

    def route(self, X) -> np.ndarray:
        """One-hot routing vectors, N x K, ordered like ``classes_``."""
        return binarize_batch(self.decision_function(X))

    @property
    def factors_(self) -> tuple[int, ...]:
        return tuple(int(f) for f in self.classes_)


class DynamicResolutionClassifier(ClassifierMixin, BaseEstimator):
    """Recognizer-routed bank of per-resolution experts.

    ``fit(X, y, resolution)`` trains the recognizer on every image and
    expert k only on images degraded by ``factors[k]``. With
    ``routing="oracle"`` prediction routes by the true factor instead of
    the recognizer.
    """

    def __init__(self, factors=(1, 2, 4, 6, 8), routing="rrn", widths=(64, 128, 256, 512),
                 blocks=(2, 2, 2, 2), stem_kernel=7, epochs=80, batch_size=256, lr=3e-4,
                 n_classes=None, normalization=None, max_workers=1, random_state=0):
        self.factors = factors
        self.routing = routing
        self.widths = widths
        self.blocks = blocks
        self.stem_kernel = stem_kernel
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.n_classes = n_classes
        self.normalization = normalization
        self.max_workers = max_workers
        self.random_state = random_state

    def _net_params(self, seed):
        return dict(widths=self.widths, blocks=self.blocks, stem_kernel=self.stem_kernel,
                    epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
                    normalization=self.normalization_, random_state=seed)

    def fit(self, X, y, resolution):
        X = check_images(X)
        y = np.asarray(y)
        factors = tuple(int(f) for f in self.factors)
        r = check_factors(resolution, len(X), factors)
        empty = [f for k, f in enumerate(factors) if not (r == k).any()]
        if empty:
            raise DataError(f"no training images at factor(s) {', '.join(f'x{f}' for f in empty)}")
        self.normalization_ = _normalization(self.normalization, X)
        n_classes = self.n_classes if self.n_classes is not None else int(y.max()) + 1
        seeds = [int(s.integers(2**31)) for s in fork(make_rng(self.random_state), len(factors) + 1)]
        self.recognizer_ = ResolutionRecognizer(**self._net_params(seeds[0])).fit(
            X, np.asarray(factors)[r])
        experts = []
        for k, f in enumerate(factors):
            mask = r == k
            experts.append(ResNetClassifier(n_classes=n_classes, **self._net_params(seeds[k + 1]))
                           .fit(X[mask], y[mask]))
        self.experts_ = experts
        self._finish(factors)
        return self

    @classmethod
    def from_parts(cls, recognizer: ResolutionRecognizer, experts, routing="rrn", max_workers=1):
        """Assemble from separately trained recognizer and experts (one per factor)."""
        factors = recognizer.factors_
        if len(experts) != len(factors):
            raise ConfigError(f"recognizer knows {len(factors)} factors but {len(experts)} experts were given")
        est = cls(factors=factors, routing=routing, max_workers=max_workers)
        est.recognizer_ = recognizer
        est.experts_ = list(experts)
        est.normalization_ = experts[0].normalization_
        est._finish(factors)
        return est

    def _finish(self, factors):
        self.trained_factors_ = factors
        self.classes_ = self.experts_[0].classes_
        self.bank_ = ExpertBank([e.network_ for e in self.experts_], factors)
        if self.recognizer_.out_classes != len(self.bank_):
            raise ConfigError("recognizer and expert bank disagree on the number of resolutions")

    def _check_fitted(self):
        if not hasattr(self, "bank_"):
            raise NotFittedError("DynamicResolutionClassifier is not fitted yet")

    def predict_routes(self, X, factor=None) -> np.ndarray:
        self._check_fitted()
        X = check_images(X)
        if self.routing == "oracle":
            if factor is None:
                raise ValueError("oracle routing needs the true factor")
            idx = check_factors(factor, len(X), self.trained_factors_)
            return np.eye(len(self.trained_factors_), dtype=np.int8)[idx]
        if self.routing != "rrn":
            raise ConfigError(f"routing must be 'rrn' or 'oracle', got {self.routing!r}")
        return self.recognizer_.route(X)

    def _prepare_experts(self, X) -> np.ndarray:
        norms = {e.normalization_ for e in self.experts_}
        if len(norms) != 1:
            raise ConfigError("experts were trained with different normalization constants")
        return augment_batch(check_images(X), None, False, self.experts_[0].normalization_)

    def decision_function(self, X, factor=None) -> np.ndarray:
        routes = self.predict_routes(X, factor)
        _, logits, _ = drg_predict(None, self.bank_, self._prepare_experts(X), routes=routes,
                                   max_workers=self.max_workers, return_details=True)
        return logits

    def predict(self, X, factor=None) -> np.ndarray:
        logits = self.decision_function(X, factor)
        return self.classes_[logits.argmax(axis=1)] if len(logits) else self.classes_[:0]
