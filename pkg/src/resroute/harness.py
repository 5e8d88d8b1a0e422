"""Training loop, evaluation over factor grids, and report files."""

from __future__ import annotations

import csv
import inspect
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .core import ConfigError, DataError, NumericError, make_rng, total_accuracy
from .degrade import Normalization, augment_batch, load_split
from .rrn import softmax_cross_entropy

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 256
    lr: float = 3e-4
    epochs: int = 80
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.lr >= 0:
            raise ConfigError(f"lr must be non-negative, got {self.lr}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        """CPU-sized defaults: batch 32, 30 epochs."""
        return cls(**{"batch_size": 32, "epochs": 30, **overrides})


# ---------------------------------------------------------------------------
# Adam


def _has_nan(g) -> bool:
    return bool((g != g).any())


def adam_step(params: dict, grads: dict, moments: dict | None, t: int, cfg: TrainConfig):
    """One bias-corrected Adam update.

    Works on numpy arrays or torch tensors. ``moments`` maps name -> (m, v)
    and may be None on the first step. Parameters whose gradient is None are
    left untouched. Returns ``(new_params, new_moments)``.
    """
    if t < 1:
        raise ValueError(f"Adam step counter starts at 1, got {t}")
    moments = dict(moments or {})
    new_params = dict(params)
    c1 = 1.0 - cfg.beta1**t
    c2 = 1.0 - cfg.beta2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if _has_nan(g):
            raise NumericError(f"NaN gradient for parameter {name!r}")
        m, v = moments.get(name, (0.0 * g, 0.0 * g))
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * g
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g
        new_params[name] = p - cfg.lr * (m / c1) / ((v / c2) ** 0.5 + cfg.eps)
        moments[name] = (m, v)
    return new_params, moments


class Adam:
    """Stateful wrapper applying :func:`adam_step` to a module's parameters in place."""

    def __init__(self, named_params, cfg: TrainConfig):
        self.params = dict(named_params)
        self.cfg = cfg
        self.moments: dict = {}
        self.t = 0

    def step(self, grads: dict) -> None:
        self.t += 1
        with torch.no_grad():
            current = {n: p.detach() for n, p in self.params.items()}
            updated, self.moments = adam_step(current, grads, self.moments, self.t, self.cfg)
            for n, p in self.params.items():
                if grads.get(n) is not None:
                    p.copy_(updated[n])

    def grads_of(self, loss: torch.Tensor) -> dict:
        names = list(self.params)
        gs = torch.autograd.grad(loss, [self.params[n] for n in names], allow_unused=True)
        return dict(zip(names, gs))


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    net: torch.nn.Module
    losses: list[float] = field(default_factory=list)


def _batches(rng: np.random.Generator, n: int, batch_size: int, groups: np.ndarray | None):
    if groups is None:
        order = rng.permutation(n)
        out = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    else:
        out = []
        for g in np.unique(groups):
            members = np.flatnonzero(groups == g)
            members = members[rng.permutation(len(members))]
            out += [members[i:i + batch_size] for i in range(0, len(members), batch_size)]
        out = [out[i] for i in rng.permutation(len(out))]
    # a lone sample cannot be batch-normalized in train mode
    return [b for b in out if len(b) > 1 or n == 1]


def check_labels(y, num_classes: int) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1:
        raise DataError(f"labels must be 1-d, got shape {y.shape}")
    bad = np.flatnonzero((y < 0) | (y >= num_classes))
    if bad.size:
        raise DataError(f"label {int(y[bad[0]])} at entry {int(bad[0])} outside [0, {num_classes})")
    return y.astype(np.int64)


def train_model(net: torch.nn.Module, X: np.ndarray, y, cfg: TrainConfig,
                norm: Normalization | None = None, groups=None, multiview: bool = False,
                on_group: Callable[[int], None] | None = None,
                loss_fn=softmax_cross_entropy) -> TrainResult:
    """Seeded epoch loop with Adam.

    ``X`` is N x 3 x H x W (uint8 or [0,1] floats). With ``multiview`` it is
    V x N x 3 x H x W and every sample draws one of its V views uniformly at
    each epoch. With ``groups`` each batch holds a single group and
    ``on_group(g)`` is called before its forward pass.
    """
    X = np.asarray(X)
    n = X.shape[1] if multiview else X.shape[0]
    if n == 0:
        raise DataError("cannot train on an empty dataset")
    y = check_labels(y, net.out_classes)
    if len(y) != n:
        raise DataError(f"{n} images but {len(y)} labels")
    groups = None if groups is None else np.asarray(groups)
    norm = norm or Normalization()
    rng = make_rng(cfg.seed)
    dtype = getattr(torch, cfg.dtype)
    opt = Adam(net.named_parameters(), cfg)
    result = TrainResult(net)
    net.train()
    for epoch in range(cfg.epochs):
        view = rng.integers(0, X.shape[0], size=n) if multiview else None
        total, seen = 0.0, 0
        for idx in _batches(rng, n, cfg.batch_size, groups):
            xb = X[view[idx], idx] if multiview else X[idx]
            xb = torch.from_numpy(augment_batch(xb, rng, True, norm)).to(dtype)
            if on_group is not None:
                on_group(int(groups[idx[0]]))
            loss = loss_fn(net(xb), torch.from_numpy(y[idx]))
            if not torch.isfinite(loss):
                raise NumericError(f"non-finite loss at epoch {epoch}")
            opt.step(opt.grads_of(loss))
            total += loss.item() * len(idx)
            seen += len(idx)
        result.losses.append(total / max(seen, 1))
        log.debug("epoch %d loss %.5f", epoch, result.losses[-1])
    net.eval()
    return result


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalReport:
    method: str
    factors: tuple[int, ...]
    per_factor_accuracy: dict[int, float] = field(default_factory=dict)
    route_accuracy: float | None = None
    cross_matrix: dict[tuple[str, int], float] = field(default_factory=dict)

    def __post_init__(self):
        self.factors = tuple(int(f) for f in self.factors)

    @property
    def mean_accuracy(self) -> float | None:
        vals = [self.per_factor_accuracy[f] for f in self.factors if f in self.per_factor_accuracy]
        if not vals or len(vals) != len(self.factors):
            return None
        return float(sum(vals) / len(vals))


def _accepts(fn, name: str) -> bool:
    try:
        return name in inspect.signature(fn).parameters
    except (TypeError, ValueError):
        return False


def eval_grid(model, dataset_root, factors: Sequence[int], method: str = "model",
              split: str = "test", trained_factors: Sequence[int] | None = None) -> EvalReport:
    """Accuracy of ``model`` at each factor of a prepared dataset.

    Models exposing ``trained_factors_`` (routed ensembles) can only be
    evaluated at those factors. The ground-truth factor is passed to
    ``predict(X, factor=f)`` when the model accepts it.
    """
    restricted = getattr(model, "trained_factors_", None)
    if restricted is not None:
        extra = [f for f in factors if f not in restricted]
        if extra:
            raise ConfigError(
                f"{method}: factors {extra} are not among the trained factors {list(restricted)}; "
                "a routed ensemble has no expert for them")
    trained = tuple(trained_factors if trained_factors is not None else (restricted or factors))
    report = EvalReport(method, tuple(f for f in trained))
    takes_factor = _accepts(model.predict, "factor")
    route_hits, route_total = 0, 0
    for f in factors:
        X, y = load_split(dataset_root, split, f)
        pred = model.predict(X, factor=f) if takes_factor else model.predict(X)
        report.per_factor_accuracy[int(f)] = total_accuracy(pred, y)
        if restricted is not None and hasattr(model, "predict_routes"):
            routes = model.predict_routes(X, factor=f) if _accepts(model.predict_routes, "factor") \
                else model.predict_routes(X)
            routed = np.asarray(model.trained_factors_)[np.argmax(routes, axis=1)]
            route_hits += int(np.count_nonzero(routed == f))
            route_total += len(routed)
    if route_total:
        report.route_accuracy = route_hits / route_total
    return report


def eval_cross(models: dict[str, object], dataset_root, factors: Sequence[int],
               split: str = "test") -> dict[tuple[str, int], float]:
    """Train-set x eval-factor accuracy matrix for single-resolution models."""
    out = {}
    for name, model in models.items():
        for f in factors:
            X, y = load_split(dataset_root, split, f)
            out[(name, int(f))] = total_accuracy(model.predict(X), y)
    return out


# ---------------------------------------------------------------------------
# reports

DISPLAY_NAMES = {"mean": "Mean", "max": "Max", "rabn": "RA-BN", "da": "DA", "mstrain": "MSTrain",
                 "drg": "DRG", "drg-oracle": "DRG (true routes)"}


def _fmt(v: float | None) -> str:
    return "" if v is None else repr(float(v))


def _pct(v: float | None) -> str:
    return "-" if v is None else f"{100.0 * v:.2f}%"


def _layout(reports: Sequence[EvalReport]):
    factors = reports[0].factors if reports else ()
    for r in reports:
        if r.factors != factors:
            raise ConfigError(f"reports disagree on the trained factor set: {r.factors} vs {factors}")
    extra = sorted({f for r in reports for f in r.per_factor_accuracy} - set(factors))
    cross = sorted({k for r in reports for k in r.cross_matrix}, key=lambda k: (k[0], k[1]))
    cross_rows = sorted({(r.method, k[0]) for r in reports for k in r.cross_matrix})
    cross_cols = sorted({k[1] for k in cross})
    return factors, extra, cross_rows, cross_cols


def render_csv(reports: Sequence[EvalReport]) -> str:
    """Accuracy table (rows=factors, cols=methods), then the cross matrix section.

    Rows above ``mean`` are the trained factors, rows below it are extra factors.
    """
    reports = list(reports)
    factors, extra, cross_rows, cross_cols = _layout(reports)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["factor"] + [r.method for r in reports])
    for f in factors:
        w.writerow([f"x{f}"] + [_fmt(r.per_factor_accuracy.get(f)) for r in reports])
    w.writerow(["mean"] + [_fmt(r.mean_accuracy) for r in reports])
    for f in extra:
        w.writerow([f"x{f}"] + [_fmt(r.per_factor_accuracy.get(f)) for r in reports])
    w.writerow(["route_accuracy"] + [_fmt(r.route_accuracy) for r in reports])
    w.writerow([])
    w.writerow(["method", "train_set"] + [f"x{f}" for f in cross_cols])
    by_method = {r.method: r for r in reports}
    for method, train_set in cross_rows:
        m = by_method[method].cross_matrix
        w.writerow([method, train_set] + [_fmt(m.get((train_set, f))) for f in cross_cols])
    return buf.getvalue()


def render_markdown(reports: Sequence[EvalReport]) -> str:
    reports = list(reports)
    factors, extra, cross_rows, cross_cols = _layout(reports)
    names = [DISPLAY_NAMES.get(r.method, r.method) for r in reports]
    lines = ["| Ratio | " + " | ".join(names) + " |", "|---|" + "---|" * len(reports)]
    for f in list(factors) + extra:
        lines.append(f"| x{f} | " + " | ".join(_pct(r.per_factor_accuracy.get(f)) for r in reports) + " |")
    lines.append("| Mean | " + " | ".join(_pct(r.mean_accuracy) for r in reports) + " |")
    routed = [(n, r.route_accuracy) for n, r in zip(names, reports) if r.route_accuracy is not None]
    if routed:
        lines += [""] + [f"Route accuracy ({n}): {_pct(v)}" for n, v in routed]
    if cross_rows:
        by_method = {r.method: r for r in reports}
        lines += ["", "| Train set | " + " | ".join(f"x{f}" for f in cross_cols) + " |",
                  "|---|" + "---|" * len(cross_cols)]
        for method, train_set in cross_rows:
            m = by_method[method].cross_matrix
            lines.append(f"| {train_set} | " + " | ".join(_pct(m.get((train_set, f))) for f in cross_cols) + " |")
    return "\n".join(lines) + "\n"


def write_report(reports, path, formats: Sequence[str] = ("csv", "md")) -> list[Path]:
    """Write report.csv and/or report.md into directory ``path``."""
    if isinstance(reports, EvalReport):
        reports = [reports]
    out_dir = Path(path)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        written = []
        for fmt in formats:
            text = render_csv(reports) if fmt == "csv" else render_markdown(reports) if fmt == "md" else None
            if text is None:
                raise ConfigError(f"unknown report format {fmt!r}")
            target = out_dir / f"report.{fmt}"
            with open(target, "w", newline="") as fh:
                fh.write(text)
            written.append(target)
    except OSError as exc:
        raise OSError(f"cannot write report under {out_dir}: {exc}") from exc
    return written


def _parse_factor(label: str) -> int:
    if not label.startswith("x"):
        raise DataError(f"bad factor label {label!r}")
    return int(label[1:])


def parse_report(text: str) -> list[EvalReport]:
    """Inverse of :func:`render_csv`."""
    rows = list(csv.reader(io.StringIO(text)))
    methods = rows[0][1:]
    per_factor: list[dict] = [{} for _ in methods]
    route: list = [None] * len(methods)
    trained: list[int] = []
    i, seen_mean = 1, False
    while i < len(rows) and rows[i]:
        label, cells = rows[i][0], rows[i][1:]
        if label == "mean":
            seen_mean = True
        elif label == "route_accuracy":
            route = [float(c) if c else None for c in cells]
        else:
            f = _parse_factor(label)
            if not seen_mean:
                trained.append(f)
            for j, c in enumerate(cells):
                if c:
                    per_factor[j][f] = float(c)
        i += 1
    reports = [EvalReport(m, tuple(trained), per_factor[j], route[j]) for j, m in enumerate(methods)]
    by_method = {r.method: r for r in reports}
    i += 1
    if i < len(rows):
        cols = [_parse_factor(c) for c in rows[i][2:]]
        for row in rows[i + 1:]:
            if not row:
                continue
            method, train_set, cells = row[0], row[1], row[2:]
            for f, c in zip(cols, cells):
                if c:
                    by_method[method].cross_matrix[(train_set, f)] = float(c)
    return reports


def read_report(path) -> list[EvalReport]:
    with open(Path(path), newline="") as fh:
        return parse_report(fh.read())


def report_to_dict(r: EvalReport) -> dict:
    return {
        "method": r.method,
        "factors": list(r.factors),
        "per_factor_accuracy": {str(k): v for k, v in sorted(r.per_factor_accuracy.items())},
        "route_accuracy": r.route_accuracy,
        "cross_matrix": [[k[0], k[1], v] for k, v in sorted(r.cross_matrix.items())],
    }


def report_from_dict(d: dict) -> EvalReport:
    return EvalReport(
        d["method"], tuple(d["factors"]),
        {int(k): float(v) for k, v in d["per_factor_accuracy"].items()},
        d.get("route_accuracy"),
        {(a, int(b)): float(v) for a, b, v in d.get("cross_matrix", [])},
    )


# ---------------------------------------------------------------------------
# config files

CONFIG_KEYS = {
    "method": str,
    "factors": lambda s: tuple(int(v) for v in s.replace(" ", "").split(",") if v),
    "batch_size": int,
    "lr": float,
    "epochs": int,
    "seed": int,
    "dataset_root": str,
    "output_dir": str,
}
METHODS = ("mean", "max", "rabn", "da", "mstrain", "drg")


def parse_config(text: str, source: str = "<config>") -> dict:
    """Flat ``key = value`` (or ``key: value``) lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        sep = "=" if "=" in line else ":" if ":" in line else None
        if sep is None:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (p.strip() for p in line.split(sep, 1))
        if key not in CONFIG_KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        try:
            out[key] = CONFIG_KEYS[key](value)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {exc}") from None
    if "method" in out and out["method"] not in METHODS:
        raise ConfigError(f"{source}: method must be one of {METHODS}, got {out['method']!r}")
    if "lr" in out and not (out["lr"] > 0 and math.isfinite(out["lr"])):
        raise ConfigError(f"{source}: lr must be positive")
    return out


def read_config(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} not found")
    return parse_config(path.read_text(), str(path))
