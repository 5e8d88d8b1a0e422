"""Fast in-memory property checks behind ``resroute selftest``."""

from __future__ import annotations

import math
import sys
import traceback

import numpy as np
import torch

from .baselines import ensemble_pool, grad_reverse
from .core import is_one_hot, make_rng
from .degrade import DegradeConfig, bicubic_kernel, degrade_image, degraded_size
from .harness import TrainConfig, adam_step
from .mrafer import assign, gather
from .rrn import binarize, logit_gradient, mean_cross_entropy, softmax


def _routing_round_trip(rng):
    for _ in range(200):
        n, k = int(rng.integers(0, 65)), int(rng.integers(1, 9))
        routes = np.eye(k, dtype=np.int8)[rng.integers(0, k, size=n)]
        items = np.arange(n) * 7 + 3
        parts = assign(items, routes, k)
        out = gather(parts, parts.items)
        assert np.array_equal(out, items), "gather(assign(x)) != x"


def _binarization(rng):
    for _ in range(500):
        v = rng.integers(-3, 4, size=int(rng.integers(1, 9))).astype(np.float64)
        b = binarize(v)
        assert is_one_hot(b)
        assert int(np.argmax(b)) == int(np.flatnonzero(v == v.max())[0]), "ties must pick the lowest index"
        assert np.array_equal(binarize(v + rng.normal()), b) or np.ptp(v) == 0
        assert np.array_equal(binarize(b.astype(np.float64)), b)


def _softmax_ce(rng):
    for _ in range(100):
        z = rng.normal(0, 5, size=(3, 6))
        p = softmax(z)
        assert np.allclose(p.sum(axis=1), 1.0, atol=1e-12)
        y = rng.integers(0, 6, size=3)
        g = logit_gradient(z, y)
        i, j, h = int(rng.integers(3)), int(rng.integers(6)), 1e-6
        zp, zm = z.copy(), z.copy()
        zp[i, j] += h
        zm[i, j] -= h
        fd = (mean_cross_entropy(y, softmax(zp)) - mean_cross_entropy(y, softmax(zm))) / (2 * h)
        assert abs(fd - g[i, j]) < 1e-6, f"CE gradient off by {abs(fd - g[i, j]):.2e}"


def _degradation(rng):
    assert [degraded_size(100, f) for f in (1, 2, 4, 6, 8)] == [100, 50, 25, 17, 13]
    t = np.linspace(0, 1, 101)[:-1]
    shifts = np.stack([bicubic_kernel(t + m) for m in range(-2, 3)])
    assert np.max(np.abs(shifts.sum(axis=0) - 1.0)) < 1e-9, "kernel is not a partition of unity"
    cfg = DegradeConfig(base_size=24, factors=(1, 2, 4, 6, 8), eval_extra_factors=(), net_input_size=24)
    img = np.full((24, 24, 3), 0.375, dtype=np.float32)
    for f in cfg.factors:
        assert np.array_equal(degrade_image(img, f, cfg), img), f"constant image changed at x{f}"


def _adam(rng):
    cfg = TrainConfig(lr=3e-4)
    params, _ = adam_step({"w": np.array(1.0)}, {"w": np.array(0.5)}, None, 1, cfg)
    assert math.isclose(float(params["w"]), 1.0 - 3e-4, rel_tol=0, abs_tol=1e-10)
    params, _ = adam_step({"w": np.array(1.0)}, {"w": np.array(0.0)}, None, 1, cfg)
    assert float(params["w"]) == 1.0


def _baselines(rng):
    x = torch.from_numpy(rng.normal(size=(5, 3))).requires_grad_()
    up = torch.from_numpy(rng.normal(size=(5, 3)))
    grad_reverse(x, 0.7).backward(up)
    assert torch.allclose(x.grad, -0.7 * up, atol=1e-12)
    logits = rng.normal(size=(4, 6, 3))
    assert np.array_equal(ensemble_pool(logits, "max"), logits.max(axis=0))
    assert np.allclose(ensemble_pool(logits, "mean"), logits.mean(axis=0), rtol=0, atol=1e-15)


CHECKS = (
    ("routing round trip", _routing_round_trip),
    ("binarization", _binarization),
    ("softmax / cross-entropy", _softmax_ce),
    ("degradation", _degradation),
    ("adam", _adam),
    ("baseline contracts", _baselines),
)


def run_selftest(seed: int = 0, stream=None) -> bool:
    stream = stream or sys.stdout
    rng = make_rng(seed)
    failed = 0
    for name, check in CHECKS:
        try:
            check(rng)
        except Exception as exc:  # noqa: BLE001 - report every failure
            failed += 1
            print(f"FAIL {name}: {exc or type(exc).__name__}", file=stream)
            traceback.print_exc(limit=2, file=sys.stderr)
        else:
            print(f"PASS {name}", file=stream)
    print(f"{len(CHECKS) - failed}/{len(CHECKS)} checks passed", file=stream)
    return failed == 0
