"""Small convolutional encoder, linear heads, SGD with step schedule, gradient checks, checkpoints.

Autograd comes from torch; ``grad_check`` verifies it independently with
central finite differences in float64.
"""

from __future__ import annotations

import copy
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn


@dataclass(frozen=True)
class EncoderConfig:
    widths: tuple[int, ...] = (16, 32, 64)
    norm: str = "batch"  # "batch" or "none"
    proj_dim: int = 64
    mlp_head: bool = True
    in_channels: int = 3

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if not self.widths:
            raise ValueError("need at least one conv block")
        if self.proj_dim < 2:
            raise ValueError("proj_dim must be >= 2")
        if self.norm not in ("batch", "none"):
            raise ValueError(f"unknown norm {self.norm!r}")

    @property
    def feat_dim(self) -> int:
        return self.widths[-1]


class Encoder(nn.Module):
    """Conv blocks -> global average pool (backbone features) -> projection head -> unit sphere."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        layers: list[nn.Module] = []
        c_in = cfg.in_channels
        for i, w in enumerate(cfg.widths):
            layers.append(nn.Conv2d(c_in, w, 3, padding=1, bias=cfg.norm == "none"))
            if cfg.norm == "batch":
                layers.append(nn.BatchNorm2d(w))
            layers.append(nn.ReLU())
            if i < len(cfg.widths) - 1:
                layers.append(nn.AvgPool2d(2))
            c_in = w
        self.backbone = nn.Sequential(*layers)
        d = cfg.feat_dim
        if cfg.mlp_head:
            self.head = nn.Sequential(nn.Linear(d, d), nn.ReLU(), nn.Linear(d, cfg.proj_dim))
        else:
            self.head = nn.Linear(d, cfg.proj_dim)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != self.cfg.in_channels:
            raise ValueError(f"expected [N, {self.cfg.in_channels}, H, W], got {tuple(x.shape)}")
        return self.backbone(x).mean(dim=(2, 3))

    def project(self, x: torch.Tensor, normalize: bool = True) -> torch.Tensor:
        z = self.head(self.features(x))
        return F.normalize(z, dim=1) if normalize else z

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        h = self.features(x)
        return h, F.normalize(self.head(h), dim=1)


def build_encoder(cfg: EncoderConfig, seed: int) -> Encoder:
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        return Encoder(cfg)


def linear_head(feat_dim: int, num_classes: int, seed: int = 0) -> nn.Linear:
    """The only probe shape allowed: one affine layer, no hidden units."""
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        return nn.Linear(feat_dim, num_classes)


def to_tensor(images: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(images, dtype=np.float32))


# -- SGD -----------------------------------------------------------------------


@dataclass(frozen=True)
class SgdConfig:
    lr: float
    momentum: float = 0.9
    weight_decay: float = 0.0
    schedule: tuple[tuple[int, float], ...] = field(default_factory=tuple)

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        object.__setattr__(self, "schedule", tuple((int(e), float(m)) for e, m in self.schedule))

    def lr_at(self, epoch: int) -> float:
        """Base lr times every multiplier whose start epoch has been reached."""
        lr = self.lr
        for start, mult in self.schedule:
            if epoch >= start:
                lr *= mult
        return lr


def make_sgd(params: Iterable[torch.Tensor], cfg: SgdConfig) -> torch.optim.SGD:
    """torch's SGD runs v <- m*v + g + wd*theta; theta <- theta - lr*v, the update we want."""
    return torch.optim.SGD(params, lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)


def set_epoch_lr(opt: torch.optim.Optimizer, cfg: SgdConfig, epoch: int) -> float:
    lr = cfg.lr_at(epoch)
    for group in opt.param_groups:
        group["lr"] = lr
    return lr


def sgd_step(params: Sequence[torch.Tensor], grads: Sequence[torch.Tensor], velocities: list[torch.Tensor],
             cfg: SgdConfig, epoch: int) -> None:
    """Explicit in-place momentum update, for callers not holding an optimizer."""
    lr = cfg.lr_at(epoch)
    with torch.no_grad():
        for i, (p, g) in enumerate(zip(params, grads)):
            d = g + cfg.weight_decay * p
            velocities[i].mul_(cfg.momentum).add_(d)
            p.sub_(lr * velocities[i])


# -- gradient checking ---------------------------------------------------------


def float64_copy(module: nn.Module) -> nn.Module:
    return copy.deepcopy(module).double()


def grad_check(params: Sequence[torch.Tensor], loss_fn: Callable[[], torch.Tensor], eps: float = 1e-6,
               num_checks: int = 64, seed: int = 0, abs_floor: float = 1e-10) -> float:
    """Max relative error between autograd and central finite differences.

    Use float64 parameters (see :func:`float64_copy`). Coordinates are drawn
    uniformly over all parameters; each is perturbed by +/-eps in place and
    restored exactly.
    """
    if not 1e-6 <= eps <= 1e-2:
        raise ValueError("eps must lie in [1e-6, 1e-2]")
    params = list(params)
    for p in params:
        p.grad = None
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g.detach() for p, g in zip(params, grads)]

    sizes = np.array([p.numel() for p in params])
    total = int(sizes.sum())
    rng = np.random.default_rng(seed)
    flat_idx = rng.choice(total, size=min(num_checks, total), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    worst = 0.0
    with torch.no_grad():
        for fi in flat_idx:
            pi = int(np.searchsorted(offsets, fi, side="right") - 1)
            local = int(fi - offsets[pi])
            flat = params[pi].view(-1)
            orig = flat[local].item()
            flat[local] = orig + eps
            up = float(loss_fn())
            flat[local] = orig - eps
            down = float(loss_fn())
            flat[local] = orig
            numeric = (up - down) / (2 * eps)
            analytic = float(grads[pi].view(-1)[local])
            denom = max(abs(numeric), abs(analytic), abs_floor)
            worst = max(worst, abs(numeric - analytic) / denom)
    return worst


# -- checkpoints ---------------------------------------------------------------

CHECKPOINT_MAGIC = b"SAUG"
CHECKPOINT_VERSION = 1


class CheckpointError(OSError):
    pass


def save_checkpoint(path: str | os.PathLike, tensors: Mapping[str, torch.Tensor]) -> None:
    """Binary layout: magic, u32 version, u32 count, then per tensor
    (u32 name length, utf-8 name, u32 rank, u32 dims..., little-endian f32 data)."""
    out = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(tensors))]
    for name in sorted(tensors):
        t = tensors[name].detach().cpu()
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)) + raw)
        out.append(struct.pack(f"<I{t.ndim}I", t.ndim, *t.shape))
        out.append(t.to(torch.float32).numpy().astype("<f4").tobytes())
    Path(path).write_bytes(b"".join(out))


def load_checkpoint(path: str | os.PathLike) -> dict[str, torch.Tensor]:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    try:
        version, count = struct.unpack_from("<II", data, 4)
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        pos = 12
        tensors = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<I", data, pos)
            name = data[pos + 4:pos + 4 + n].decode("utf-8")
            pos += 4 + n
            (rank,) = struct.unpack_from("<I", data, pos)
            shape = struct.unpack_from(f"<{rank}I", data, pos + 4)
            pos += 4 + 4 * rank
            size = int(np.prod(shape)) if rank else 1
            if pos + 4 * size > len(data):
                raise CheckpointError(f"{path}: truncated data for tensor {name!r}")
            arr = np.frombuffer(data, dtype="<f4", count=size, offset=pos).reshape(shape)
            pos += 4 * size
            tensors[name] = torch.from_numpy(arr.astype(np.float32))
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated checkpoint ({exc})") from None
    if pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - pos} trailing bytes")
    return tensors


def module_tensors(prefix: str, module: nn.Module) -> dict[str, torch.Tensor]:
    return {f"{prefix}.{k}": v for k, v in module.state_dict().items()}


def load_module_tensors(prefix: str, module: nn.Module, tensors: Mapping[str, torch.Tensor]) -> None:
    state = module.state_dict()
    new = {}
    for k, ref in state.items():
        key = f"{prefix}.{k}"
        if key not in tensors:
            raise CheckpointError(f"checkpoint lacks tensor {key}")
        if tuple(tensors[key].shape) != tuple(ref.shape):
            raise CheckpointError(f"{key}: shape {tuple(tensors[key].shape)} != {tuple(ref.shape)}")
        new[k] = tensors[key].to(ref.dtype)
    module.load_state_dict(new)
