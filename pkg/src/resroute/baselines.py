"""Comparison methods: pooled experts, multi-scale training, resolution-aware
batch normalization and adversarial domain adaptation."""

from __future__ import annotations

from functools import partial

import numpy as np
import torch
import torch.nn as nn

from .backbone import BN_EPS, BN_MOMENTUM, NetworkSpec, forward, init_network
from .core import ConfigError, DataError, LabeledSample, fork, make_rng, torch_seed
from .degrade import DegradeConfig, augment_batch, degrade_image, degrade_sample
from .estimators import (
    ResNetClassifier,
    ResolutionRecognizer,
    _normalization,
    check_factors,
    check_images,
)
from .harness import Adam, TrainConfig, check_labels, train_model
from .mrafer import assign, gather
from .rrn import softmax, softmax_cross_entropy

POOL_MODES = ("mean", "max")
POOL_SITES = ("logits", "probs")


def ensemble_pool(expert_logits, mode: str = "mean") -> np.ndarray:
    """Elementwise mean or max over K expert outputs (K x C, or K x N x C)."""
    if mode not in POOL_MODES:
        raise ValueError(f"mode must be one of {POOL_MODES}, got {mode!r}")
    try:
        stacked = np.asarray(expert_logits, dtype=np.float64)
    except ValueError:
        raise ValueError("expert outputs have unequal lengths") from None
    if stacked.dtype == object or stacked.ndim < 2 or stacked.shape[0] < 1:
        raise ValueError("need at least one expert output of equal length")
    return stacked.mean(axis=0) if mode == "mean" else stacked.max(axis=0)


class PooledExpertClassifier:
    """Every expert scores every image; outputs are pooled, then argmax.

    Wraps already fitted single-resolution classifiers, like a prefit
    voting ensemble. ``site`` picks what is pooled: raw logits or softmax
    probabilities.
    """

    def __init__(self, experts, mode: str = "mean", site: str = "logits"):
        if mode not in POOL_MODES:
            raise ValueError(f"mode must be one of {POOL_MODES}, got {mode!r}")
        if site not in POOL_SITES:
            raise ValueError(f"site must be one of {POOL_SITES}, got {site!r}")
        if not experts:
            raise ValueError("need at least one expert")
        self.experts = list(experts)
        self.mode = mode
        self.site = site
        self.classes_ = self.experts[0].classes_

    def decision_function(self, X) -> np.ndarray:
        outs = [e.decision_function(X) for e in self.experts]
        if self.site == "probs":
            outs = [softmax(o) for o in outs]
        return ensemble_pool(outs, self.mode)

    def predict(self, X) -> np.ndarray:
        logits = self.decision_function(X)
        return self.classes_[logits.argmax(axis=1)] if len(logits) else self.classes_[:0]


# ---------------------------------------------------------------------------
# multi-scale training


def draw_factor(cfg: DegradeConfig, rng) -> int:
    return int(cfg.factors[make_rng(rng).integers(len(cfg.factors))])


def mstrain_view(sample: LabeledSample, cfg: DegradeConfig, rng) -> LabeledSample:
    """Degrade ``sample`` at a factor drawn uniformly from ``cfg.factors``."""
    return degrade_sample(sample, draw_factor(cfg, rng), cfg)


class MultiScaleClassifier(ResNetClassifier):
    """One network trained on a fresh random-resolution view of each image every epoch.

    ``fit`` accepts base-resolution images (N x 3 x S x S), which are degraded
    on the fly, or pre-degraded aligned views (V x N x 3 x H x W) from which
    one is drawn uniformly per sample and epoch.
    """

    def __init__(self, factors=(1, 2, 4, 6, 8), net_input_size=None, widths=(64, 128, 256, 512), blocks=(2, 2, 2, 2), stem_kernel=7,
                 stem_stride=2, stem_pool=True, epochs=80, batch_size=256, lr=3e-4, n_classes=None,
                 normalization=None, dtype="float32", random_state=0):
        super().__init__(widths=widths, blocks=blocks, stem_kernel=stem_kernel, stem_stride=stem_stride,
                         stem_pool=stem_pool, epochs=epochs, batch_size=batch_size, lr=lr,
                         n_classes=n_classes, normalization=normalization, dtype=dtype,
                         random_state=random_state)
        self.factors = factors
        self.net_input_size = net_input_size

    def _views(self, X):
        X = np.asarray(X)
        if X.ndim == 5:
            if X.shape[0] != len(self.factors):
                raise ValueError(f"{X.shape[0]} views for {len(self.factors)} factors")
            return X
        X = check_images(X)
        side = X.shape[2]
        cfg = DegradeConfig(base_size=side, factors=tuple(self.factors), eval_extra_factors=(),
                            net_input_size=self.net_input_size or side)
        unit = X.astype(np.float32) / 255.0 if X.dtype == np.uint8 else X
        return np.stack([
            np.stack([degrade_image(x.transpose(1, 2, 0), f, cfg).transpose(2, 0, 1) for x in unit])
            for f in cfg.factors
        ])

    def fit(self, X, y):
        views = self._views(X)
        flat = views.reshape((-1,) + views.shape[2:])
        y_enc = self._encode(y)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        self.normalization_ = _normalization(self.normalization, flat)
        init_seed, train_seed = self._seeds()
        net = init_network(self._spec(views.shape[3]), len(self.classes_), init_seed,
                           dtype=getattr(torch, self.dtype))
        result = train_model(net, views, y_enc, self._train_config(train_seed), self.normalization_,
                             multiview=True)
        self.network_ = result.net
        self.loss_curve_ = result.losses
        return self


# ---------------------------------------------------------------------------
# resolution-aware batch normalization


class BranchedBatchNorm2d(nn.Module):
    """K parallel BatchNorm2d layers; only ``active`` is used in a forward pass."""

    def __init__(self, channels: int, branches: int):
        super().__init__()
        self.branches = nn.ModuleList(
            nn.BatchNorm2d(channels, eps=BN_EPS, momentum=BN_MOMENTUM) for _ in range(branches))
        self.active = 0

    def forward(self, x):
        return self.branches[self.active](x)


def branched_norm(branches: int):
    return partial(BranchedBatchNorm2d, branches=branches)


def init_rabn_network(spec: NetworkSpec, out_classes: int, branches: int, seed: int, dtype=torch.float32):
    net = init_network(spec, out_classes, seed, norm=branched_norm(branches), dtype=dtype)
    net.branches = branches
    return net


def set_branch(net: nn.Module, branch: int) -> None:
    k = getattr(net, "branches", None)
    if k is None or not 0 <= branch < k:
        raise ValueError(f"branch {branch} out of range for {k} normalization branches")
    for m in net.modules():
        if isinstance(m, BranchedBatchNorm2d):
            m.active = branch


def rabn_forward(net: nn.Module, x, branch: int, record: bool = False) -> torch.Tensor:
    """Forward with every normalization site using branch ``branch``."""
    set_branch(net, branch)
    return forward(net, x, record=record)


class ResolutionAwareBNClassifier(ResNetClassifier):
    """Shared convolutions, one batch-norm branch per resolution factor.

    At prediction time the branch comes from the true factor
    (``branch_selection="factor"``) or from a fitted recognizer
    (``branch_selection="rrn"``).
    """

    def __init__(self, factors=(1, 2, 4, 6, 8), branch_selection="factor", recognizer=None,
                 widths=(64, 128, 256, 512), blocks=(2, 2, 2, 2), stem_kernel=7,
                 stem_stride=2, stem_pool=True, epochs=80, batch_size=256, lr=3e-4, n_classes=None,
                 normalization=None, dtype="float32", random_state=0):
        super().__init__(widths=widths, blocks=blocks, stem_kernel=stem_kernel, stem_stride=stem_stride,
                         stem_pool=stem_pool, epochs=epochs, batch_size=batch_size, lr=lr,
                         n_classes=n_classes, normalization=normalization, dtype=dtype,
                         random_state=random_state)
        self.factors = factors
        self.branch_selection = branch_selection
        self.recognizer = recognizer

    def fit(self, X, y, resolution):
        X = check_images(X)
        factors = tuple(int(f) for f in self.factors)
        branch = check_factors(resolution, len(X), factors)
        y_enc = self._encode(y)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        self.normalization_ = _normalization(self.normalization, X)
        init_seed, train_seed = self._seeds()
        net = init_rabn_network(self._spec(X.shape[2]), len(self.classes_), len(factors), init_seed,
                                dtype=getattr(torch, self.dtype))
        result = train_model(net, X, y_enc, self._train_config(train_seed), self.normalization_,
                             groups=branch, on_group=partial(set_branch, net))
        self.network_ = result.net
        self.loss_curve_ = result.losses
        return self

    def _branches(self, X, factor):
        factors = tuple(int(f) for f in self.factors)
        if self.branch_selection == "factor":
            if factor is None:
                raise ValueError("branch_selection='factor' needs the true factor")
            return check_factors(factor, len(X), factors)
        if self.branch_selection == "rrn":
            if not isinstance(self.recognizer, ResolutionRecognizer):
                raise ConfigError("branch_selection='rrn' needs a fitted ResolutionRecognizer")
            if self.recognizer.factors_ != factors:
                raise ConfigError("recognizer factors differ from the normalization branches")
            return self.recognizer.route(X).argmax(axis=1)
        raise ConfigError(f"unknown branch_selection {self.branch_selection!r}")

    def decision_function(self, X, factor=None) -> np.ndarray:
        x = self.prepare(X)
        branch = self._branches(X, factor)
        k = len(self.factors)
        parts = assign(x, np.eye(k, dtype=np.int8)[branch], k)
        outs = []
        self.network_.eval()
        for b in range(k):
            if len(parts.indices[b]):
                outs.append(np.concatenate([
                    rabn_forward(self.network_, parts.items[b][i:i + 256], b).numpy()
                    for i in range(0, len(parts.indices[b]), 256)]))
            else:
                outs.append(np.zeros((0, self.out_classes), dtype=np.float32))
        if not len(x):
            return np.zeros((0, self.out_classes), dtype=np.float32)
        return gather(parts, outs)

    def predict(self, X, factor=None) -> np.ndarray:
        logits = self.decision_function(X, factor)
        return self.classes_[logits.argmax(axis=1)] if len(logits) else self.classes_[:0]

    def save(self, path, **meta) -> None:
        super().save(path, branches=len(self.factors), **meta)

    @classmethod
    def _norm_factory(cls, meta):
        return branched_norm(meta["branches"])

    @classmethod
    def load(cls, path):
        est = super().load(path)
        est.network_.branches = est.meta_["branches"]
        return est


# ---------------------------------------------------------------------------
# adversarial domain adaptation


class _GradientReversal(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, lam):
        ctx.lam = lam
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad):
        return -ctx.lam * grad, None


def grad_reverse(x: torch.Tensor, lam: float) -> torch.Tensor:
    """Identity forward; backward multiplies the incoming gradient by ``-lam``."""
    return _GradientReversal.apply(x, float(lam))


class DaHead(nn.Module):
    """Two-way domain classifier on the pooled feature vector, behind gradient reversal."""

    def __init__(self, feature_dim: int, hidden: int | None = None):
        super().__init__()
        hidden = hidden or feature_dim
        self.net = nn.Sequential(nn.Linear(feature_dim, hidden), nn.ReLU(), nn.Linear(hidden, 2))

    def forward(self, features, lam: float):
        return self.net(grad_reverse(features, lam))


def da_losses(net, head: DaHead, source_x, source_y, target_x, lam: float):
    """(task, domain) losses; source images are domain 0, target images domain 1."""
    if lam < 0:
        raise ValueError(f"reversal coefficient must be non-negative, got {lam}")
    fs = net.features(source_x)
    task = softmax_cross_entropy(net.fc(fs), source_y)
    ft = net.features(target_x)
    domain_labels = torch.cat([torch.zeros(len(fs), dtype=torch.long), torch.ones(len(ft), dtype=torch.long)])
    domain = softmax_cross_entropy(head(torch.cat([fs, ft]), lam), domain_labels)
    return task, domain


def da_train_step(net, head: DaHead, source_x, source_y, target_x, lam: float, opt: Adam):
    """One joint step on task + domain loss; returns the two loss values."""
    task, domain = da_losses(net, head, source_x, source_y, target_x, lam)
    opt.step(opt.grads_of(task + domain))
    return task.item(), domain.item()


class DomainAdversarialClassifier(ResNetClassifier):
    """Expression classifier whose features are trained to confuse a domain head.

    Source domain is ``source_factor`` (labels used), target domain is
    ``target_factor`` (labels ignored).
    """

    def __init__(self, source_factor=1, target_factor=2, lam=1.0, warmup_epochs=0,
                 widths=(64, 128, 256, 512), blocks=(2, 2, 2, 2), stem_kernel=7,
                 stem_stride=2, stem_pool=True, epochs=80, batch_size=256, lr=3e-4, n_classes=None,
                 normalization=None, dtype="float32", random_state=0):
        super().__init__(widths=widths, blocks=blocks, stem_kernel=stem_kernel, stem_stride=stem_stride,
                         stem_pool=stem_pool, epochs=epochs, batch_size=batch_size, lr=lr,
                         n_classes=n_classes, normalization=normalization, dtype=dtype,
                         random_state=random_state)
        self.source_factor = source_factor
        self.target_factor = target_factor
        self.lam = lam
        self.warmup_epochs = warmup_epochs

    def fit(self, X, y, resolution):
        if self.lam < 0:
            raise ValueError(f"lam must be non-negative, got {self.lam}")
        X = check_images(X)
        r = np.asarray(resolution)
        if r.ndim == 0:
            r = np.full(len(X), int(r))
        src, tgt = np.flatnonzero(r == self.source_factor), np.flatnonzero(r == self.target_factor)
        if not len(src) or not len(tgt):
            raise DataError(f"need images at both x{self.source_factor} and x{self.target_factor}")
        y_all = self._encode(y)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        y_src = check_labels(y_all[src], len(self.classes_))
        self.normalization_ = _normalization(self.normalization, X[src])
        init_seed, train_seed = self._seeds()
        dtype = getattr(torch, self.dtype)
        net = init_network(self._spec(X.shape[2]), len(self.classes_), init_seed, dtype=dtype)
        torch_gen = torch.Generator().manual_seed(init_seed + 1)
        head = DaHead(net.spec.feature_dim).to(dtype)
        with torch.no_grad():
            for p in head.parameters():
                bound = 1.0 / np.sqrt(p.shape[-1])
                p.uniform_(-bound, bound, generator=torch_gen)
        cfg = self._train_config(train_seed)
        params = list(net.named_parameters()) + [(f"domain.{n}", p) for n, p in head.named_parameters()]
        opt = Adam(params, cfg)
        rng = make_rng(train_seed)
        losses = []
        net.train()
        head.train()
        for epoch in range(cfg.epochs):
            lam = self.lam * min(1.0, (epoch + 1) / self.warmup_epochs) if self.warmup_epochs else self.lam
            order = rng.permutation(len(src))
            total, seen = 0.0, 0
            for i in range(0, len(order), cfg.batch_size):
                idx = order[i:i + cfg.batch_size]
                if len(idx) < 2:
                    continue
                tidx = rng.choice(len(tgt), size=len(idx), replace=len(idx) > len(tgt))
                xs = torch.from_numpy(augment_batch(X[src[idx]], rng, True, self.normalization_)).to(dtype)
                xt = torch.from_numpy(augment_batch(X[tgt[tidx]], rng, True, self.normalization_)).to(dtype)
                task, _ = da_train_step(net, head, xs, torch.from_numpy(y_src[idx]), xt, lam, opt)
                total += task * len(idx)
                seen += len(idx)
            losses.append(total / max(seen, 1))
        net.eval()
        self.network_ = net
        self.domain_head_ = head
        self.loss_curve_ = losses
        return self
