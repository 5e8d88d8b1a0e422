"""ResNet18-style classifier: stem, BasicBlock stages, average pool, linear head."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import StateError

BN_MOMENTUM = 0.1
BN_EPS = 1e-5


@dataclass(frozen=True)
class NetworkSpec:
    """Architecture description.

    The defaults are ResNet18 at 224 x 224. Narrower/shallower variants are
    used for desk-scale runs and gradient checks; routing does not care.
    """

    in_channels: int = 3
    widths: tuple[int, ...] = (64, 128, 256, 512)
    blocks: tuple[int, ...] = (2, 2, 2, 2)
    stem_kernel: int = 7
    stem_stride: int = 2
    stem_pool: bool = True
    input_size: int = 224

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "blocks", tuple(int(b) for b in self.blocks))
        if len(self.widths) != len(self.blocks) or not self.widths:
            raise ValueError("widths and blocks must be non-empty and equally long")

    @classmethod
    def tiny(cls, input_size: int = 8, width: int = 2) -> "NetworkSpec":
        return cls(widths=(width,), blocks=(1,), stem_kernel=3, stem_stride=1,
                   stem_pool=False, input_size=input_size)

    @classmethod
    def small(cls, input_size: int = 48) -> "NetworkSpec":
        return cls(widths=(8, 16, 32, 64), blocks=(1, 1, 1, 1), stem_kernel=5,
                   input_size=input_size)

    @property
    def feature_dim(self) -> int:
        return self.widths[-1]

    def fingerprint(self, out_classes: int, extra: dict | None = None) -> str:
        payload = dict(asdict(self), out_classes=out_classes, **(extra or {}))
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


NormFactory = Callable[[int], nn.Module]


def _batch_norm(channels: int) -> nn.Module:
    return nn.BatchNorm2d(channels, eps=BN_EPS, momentum=BN_MOMENTUM)


class BasicBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, stride: int = 1, norm: NormFactory = _batch_norm):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride, 1, bias=False)
        self.bn1 = norm(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, 1, 1, bias=False)
        self.bn2 = norm(out_ch)
        self.shortcut = None
        if stride != 1 or in_ch != out_ch:
            self.shortcut = nn.Sequential(nn.Conv2d(in_ch, out_ch, 1, stride, bias=False), norm(out_ch))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        identity = x if self.shortcut is None else self.shortcut(x)
        return F.relu(out + identity)


class ResNet(nn.Module):
    def __init__(self, spec: NetworkSpec, out_classes: int, norm: NormFactory = _batch_norm):
        super().__init__()
        self.spec = spec
        self.out_classes = out_classes
        w0 = spec.widths[0]
        self.conv1 = nn.Conv2d(spec.in_channels, w0, spec.stem_kernel, spec.stem_stride,
                               spec.stem_kernel // 2, bias=False)
        self.bn1 = norm(w0)
        self.maxpool = nn.MaxPool2d(3, 2, 1) if spec.stem_pool else nn.Identity()
        stages = []
        in_ch = w0
        for i, (width, n) in enumerate(zip(spec.widths, spec.blocks)):
            # the first stage keeps the spatial size, later stages halve it once
            stride = 1 if i == 0 else 2
            blocks = [BasicBlock(in_ch, width, stride, norm)]
            blocks += [BasicBlock(width, width, 1, norm) for _ in range(n - 1)]
            stages.append(nn.Sequential(*blocks))
            in_ch = width
        self.stages = nn.Sequential(*stages)
        self.fc = nn.Linear(in_ch, out_classes)

    def features(self, x):
        x = self.maxpool(F.relu(self.bn1(self.conv1(x))))
        x = self.stages(x)
        return torch.flatten(F.adaptive_avg_pool2d(x, 1), 1)

    def forward(self, x):
        return self.fc(self.features(x))


def reset_parameters(net: nn.Module, seed: int) -> nn.Module:
    g = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for m in net.modules():
            if isinstance(m, nn.Conv2d):
                fan_out = m.out_channels * m.kernel_size[0] * m.kernel_size[1]
                m.weight.normal_(0.0, math.sqrt(2.0 / fan_out), generator=g)
            elif isinstance(m, nn.BatchNorm2d):
                m.weight.fill_(1.0)
                m.bias.zero_()
                m.reset_running_stats()
            elif isinstance(m, nn.Linear):
                bound = 1.0 / math.sqrt(m.in_features)
                m.weight.uniform_(-bound, bound, generator=g)
                m.bias.uniform_(-bound, bound, generator=g)
    return net


def init_network(spec: NetworkSpec, out_classes: int, seed: int, norm: NormFactory = _batch_norm,
                 dtype=torch.float32) -> ResNet:
    """Build a network with He (fan-out) convolutions and a uniform head."""
    if out_classes < 2:
        raise ValueError(f"out_classes must be >= 2, got {out_classes}")
    net = ResNet(spec, out_classes, norm)
    reset_parameters(net, seed)
    return net.to(dtype)


def parameter_count(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters())


def _as_input(net: nn.Module, x) -> torch.Tensor:
    dtype = next(net.parameters()).dtype
    t = torch.as_tensor(np.asarray(x) if not isinstance(x, torch.Tensor) else x).to(dtype)
    spec = net.spec
    if t.ndim != 4 or t.shape[1] != spec.in_channels:
        raise ValueError(f"expected N x {spec.in_channels} x H x W input, got {tuple(t.shape)}")
    if t.shape[0] < 1:
        raise ValueError("empty batch")
    return t


def forward(net: nn.Module, x, record: bool = False) -> torch.Tensor:
    """Logits for ``x``. With ``record`` the graph is kept for :func:`backward`."""
    t = _as_input(net, x)
    if record:
        out = net(t)
        net._recorded = (x, out)
        return out
    with torch.no_grad():
        return net(t)


def backward(net: nn.Module, x, upstream_grad) -> dict[str, torch.Tensor]:
    """Parameter gradients of ``<logits, upstream_grad>`` for the recorded forward of ``x``."""
    recorded = getattr(net, "_recorded", None)
    if recorded is None or recorded[0] is not x:
        raise StateError("backward needs a recorded forward on the same input")
    _, out = recorded
    net._recorded = None
    g = torch.as_tensor(np.asarray(upstream_grad) if not isinstance(upstream_grad, torch.Tensor) else upstream_grad)
    g = g.to(out.dtype)
    if g.shape != out.shape:
        raise ValueError(f"upstream gradient shape {tuple(g.shape)} != output shape {tuple(out.shape)}")
    names, params = zip(*[(n, p) for n, p in net.named_parameters() if p.requires_grad])
    grads = torch.autograd.grad(out, params, grad_outputs=g, allow_unused=True)
    return {n: torch.zeros_like(p) if gr is None else gr for n, p, gr in zip(names, params, grads)}


def eval_logits(net: nn.Module, x, batch_size: int = 256) -> np.ndarray:
    """Eval-mode logits for an N x C x H x W array, computed in chunks."""
    was_training = net.training
    net.eval()
    try:
        chunks = [forward(net, x[i:i + batch_size]).numpy() for i in range(0, len(x), batch_size)]
    finally:
        net.train(was_training)
    if not chunks:
        return np.zeros((0, net.out_classes), dtype=np.float32)
    return np.concatenate(chunks)


def save_checkpoint(net: nn.Module, path, meta: dict | None = None) -> None:
    meta = dict(meta or {})
    dtype = str(next(net.parameters()).dtype).replace("torch.", "")
    state = net.state_dict()
    payload = {
        "fingerprint": net.spec.fingerprint(net.out_classes, meta.get("arch")),
        "spec": asdict(net.spec),
        "out_classes": net.out_classes,
        "dtype": dtype,
        "shapes": {k: list(v.shape) for k, v in state.items()},
        "meta": meta,
        "state": state,
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def read_checkpoint(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no checkpoint at {path}")
    return torch.load(path, map_location="cpu", weights_only=True)


def load_checkpoint(net: nn.Module, path) -> dict:
    """Load weights into ``net``; refuses a checkpoint built for a different architecture."""
    payload = read_checkpoint(path)
    expected = net.spec.fingerprint(net.out_classes, payload["meta"].get("arch"))
    if payload["fingerprint"] != expected:
        raise ValueError(f"{path}: fingerprint {payload['fingerprint']} does not match network {expected}")
    net.load_state_dict(payload["state"])
    return payload["meta"]


def network_from_checkpoint(path, norm_for_meta: Callable[[dict], NormFactory | None] | None = None
                            ) -> tuple[ResNet, dict]:
    """Rebuild a network from its checkpoint; ``norm_for_meta`` picks the normalization layer."""
    payload = read_checkpoint(path)
    spec = NetworkSpec(**payload["spec"])
    dtype = getattr(torch, payload["dtype"])
    norm = (norm_for_meta(payload["meta"]) if norm_for_meta else None) or _batch_norm
    net = ResNet(spec, payload["out_classes"], norm).to(dtype)
    meta = load_checkpoint(net, path)
    net.eval()
    return net, meta
