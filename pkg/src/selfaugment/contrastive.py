"""Momentum-contrast pretraining: InfoNCE, momentum key encoder, FIFO negative queue."""

from __future__ import annotations

import copy
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import torch
import torch.nn.functional as F

from . import _canonjson
from .dataio import Dataset
from .nn import (
    Encoder,
    EncoderConfig,
    SgdConfig,
    build_encoder,
    load_module_tensors,
    make_sgd,
    module_tensors,
    set_epoch_lr,
    to_tensor,
)
from .policy import Augmenter, BasePipeline, augment_batch

UNIT_NORM_TOL = 1e-3
QUEUE_NORM_TOL = 1e-4


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class MocoConfig:
    queue_size: int = 512
    momentum: float = 0.99
    temperature: float = 0.2
    epochs: int = 20
    batch_size: int = 64
    sgd: SgdConfig = field(default_factory=lambda: SgdConfig(lr=0.06, momentum=0.9, weight_decay=1e-4,
                                                             schedule=((12, 0.1), (16, 0.1))))
    encoder: EncoderConfig = field(default_factory=EncoderConfig)

    def __post_init__(self):
        if not 0.0 <= self.momentum <= 1.0:
            raise ValueError("momentum must lie in [0, 1]")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if self.batch_size < 1 or self.queue_size % self.batch_size:
            raise ValueError(f"queue_size {self.queue_size} is not a multiple of batch_size {self.batch_size}")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


@dataclass
class EncoderState:
    query: Encoder
    key: Encoder
    queue: torch.Tensor
    cursor: int = 0

    def tensors(self) -> dict[str, torch.Tensor]:
        out = module_tensors("query", self.query)
        out.update(module_tensors("key", self.key))
        out["queue"] = self.queue
        out["cursor"] = torch.tensor([float(self.cursor)])
        return out

    @classmethod
    def from_tensors(cls, cfg: EncoderConfig, tensors: dict[str, torch.Tensor]) -> "EncoderState":
        query, key = Encoder(cfg), Encoder(cfg)
        load_module_tensors("query", query, tensors)
        load_module_tensors("key", key, tensors)
        for p in key.parameters():
            p.requires_grad_(False)
        return cls(query, key, tensors["queue"].clone(), int(tensors["cursor"][0]))


def init_state(cfg: MocoConfig, seed: int) -> EncoderState:
    query = build_encoder(cfg.encoder, seed)
    key = copy.deepcopy(query)
    for p in key.parameters():
        p.requires_grad_(False)
    g = torch.Generator().manual_seed(seed + 1)
    queue = F.normalize(torch.randn(cfg.queue_size, cfg.encoder.proj_dim, generator=g), dim=1)
    return EncoderState(query, key, queue, 0)


def _check_unit_rows(x: torch.Tensor, name: str, tol: float) -> None:
    dev = (x.detach().norm(dim=1) - 1.0).abs()
    if dev.numel() and float(dev.max()) > tol:
        raise ValueError(f"{name} rows must be unit-norm (max deviation {float(dev.max()):.3g})")


def infonce_loss(q: torch.Tensor, k_pos: torch.Tensor, queue: torch.Tensor, t: float,
                 tol: float = UNIT_NORM_TOL) -> tuple[torch.Tensor, float]:
    """Cross-entropy of the positive among [positive, queue] logits scaled by 1/t.

    Returns the mean loss (differentiable) and the fraction of rows whose
    positive logit is at least every negative logit (ties count as hits).
    """
    if t <= 0:
        raise ValueError("temperature must be > 0")
    for x, name in ((q, "q"), (k_pos, "kPos"), (queue, "queue")):
        _check_unit_rows(x, name, tol)
    pos = (q * k_pos).sum(dim=1, keepdim=True)
    neg = q @ queue.t()
    logits = torch.cat([pos, neg], dim=1) / t
    target = torch.zeros(len(q), dtype=torch.long)
    loss = F.cross_entropy(logits, target)
    with torch.no_grad():
        hits = (logits[:, 0] >= logits[:, 1:].max(dim=1).values) if neg.shape[1] else torch.ones(len(q), dtype=torch.bool)
    return loss, float(hits.double().mean())


@torch.no_grad()
def momentum_update(query: torch.nn.Module, key: torch.nn.Module, m: float) -> None:
    """theta_k <- m * theta_k + (1 - m) * theta_q over parameters (buffers untouched)."""
    qp, kp = list(query.parameters()), list(key.parameters())
    if len(qp) != len(kp):
        raise ValueError("query and key encoders differ in parameter count")
    for a, b in zip(qp, kp):
        if a.shape != b.shape:
            raise ValueError(f"parameter shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
        b.mul_(m).add_(a, alpha=1.0 - m)


@torch.no_grad()
def enqueue(state: EncoderState, keys: torch.Tensor) -> EncoderState:
    size = state.queue.shape[0]
    n = keys.shape[0]
    if n == 0 or size % n:
        raise ValueError(f"batch of {n} keys does not divide queue size {size}")
    _check_unit_rows(keys, "keys", QUEUE_NORM_TOL)
    idx = (state.cursor + torch.arange(n)) % size
    state.queue[idx] = keys.detach().to(state.queue.dtype)
    state.cursor = (state.cursor + n) % size
    return state


@dataclass
class EpochLog:
    epoch: int
    loss: float
    contrastive_top1: float
    wall_seconds: float

    def to_json(self) -> dict[str, Any]:
        return {"epoch": self.epoch, "loss": self.loss, "contrastiveTop1": self.contrastive_top1,
                "wallSeconds": self.wall_seconds}


def train_moco(
    dataset: Dataset,
    policy: Augmenter | None,
    cfg: MocoConfig,
    seed: int,
    pipeline: BasePipeline | None = BasePipeline(),
    log_path: str | Path | None = None,
    state: EncoderState | None = None,
) -> tuple[EncoderState, list[EpochLog]]:
    """Pretrain a query/key encoder pair; two independent augmentations per image form each pair."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    if len(dataset) < cfg.batch_size:
        raise ValueError(f"dataset of {len(dataset)} images is smaller than one batch ({cfg.batch_size})")
    ss = np.random.SeedSequence(seed)
    shuffle_rng, aug_rng = (np.random.default_rng(s) for s in ss.spawn(2))
    if state is None:
        state = init_state(cfg, seed)
    opt = make_sgd(state.query.parameters(), cfg.sgd)
    state.query.train()
    state.key.train()

    logs: list[EpochLog] = []
    n_batches = len(dataset) // cfg.batch_size
    fh = open(log_path, "w") if log_path is not None else None
    try:
        for epoch in range(cfg.epochs):
            start = time.perf_counter()
            set_epoch_lr(opt, cfg.sgd, epoch)
            order = shuffle_rng.permutation(len(dataset))
            loss_sum, top1_sum = 0.0, 0.0
            for b in range(n_batches):
                imgs = dataset.images[order[b * cfg.batch_size:(b + 1) * cfg.batch_size]]
                xq = to_tensor(augment_batch(imgs, policy, aug_rng, pipeline))
                xk = to_tensor(augment_batch(imgs, policy, aug_rng, pipeline))
                q = state.query.project(xq)
                with torch.no_grad():
                    k = state.key.project(xk)
                loss, top1 = infonce_loss(q, k, state.queue, cfg.temperature)
                if not math.isfinite(loss.item()):
                    raise TrainingDivergedError(f"non-finite InfoNCE loss at epoch {epoch}, batch {b} (seed {seed})")
                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()
                momentum_update(state.query, state.key, cfg.momentum)
                enqueue(state, k)
                loss_sum += loss.item()
                top1_sum += top1
            rec = EpochLog(epoch, loss_sum / n_batches, top1_sum / n_batches, time.perf_counter() - start)
            logs.append(rec)
            if fh is not None:
                fh.write(_canonjson.dumps(rec.to_json(), indent=None) + "\n")
                fh.flush()
    finally:
        if fh is not None:
            fh.close()
    return state, logs


@torch.no_grad()
def evaluate_infonce(
    state: EncoderState,
    images: np.ndarray,
    policy: Augmenter | None,
    temperature: float,
    rng: np.random.Generator,
    pipeline: BasePipeline | None = None,
    negatives: str = "views",
    batch_size: int = 256,
) -> tuple[float, float]:
    """Forward-only InfoNCE and contrastive top-1 of augmented view pairs.

    ``negatives="views"`` contrasts every query with the keys of all other
    images in ``images`` (augmented the same way), so the value depends only on
    the augmented set; ``"queue"`` uses the encoder's stored queue instead.
    """
    if negatives not in ("views", "queue"):
        raise ValueError(f"unknown negatives mode {negatives!r}")
    state.query.eval()
    state.key.eval()
    try:
        qs, ks = [], []
        for s in range(0, len(images), batch_size):
            chunk = images[s:s + batch_size]
            qs.append(state.query.project(to_tensor(augment_batch(chunk, policy, rng, pipeline))))
            ks.append(state.key.project(to_tensor(augment_batch(chunk, policy, rng, pipeline))))
        q, k = torch.cat(qs), torch.cat(ks)
        if negatives == "queue":
            loss, top1 = infonce_loss(q, k, state.queue, temperature)
            return loss.item(), top1
        if len(q) < 2:
            raise ValueError("in-set negatives need at least two images")
        _check_unit_rows(q, "q", UNIT_NORM_TOL)
        _check_unit_rows(k, "k", UNIT_NORM_TOL)
        sim = q @ k.t()
        pos = sim.diagonal().unsqueeze(1)
        off = ~torch.eye(len(q), dtype=torch.bool)
        neg = sim[off].view(len(q), len(q) - 1)
        logits = torch.cat([pos, neg], dim=1) / temperature
        loss = F.cross_entropy(logits, torch.zeros(len(q), dtype=torch.long))
        top1 = float((logits[:, 0] >= logits[:, 1:].max(dim=1).values).double().mean())
        return loss.item(), top1
    finally:
        state.query.train()
        state.key.train()


def read_training_log(path: str | Path) -> list[dict[str, Any]]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
