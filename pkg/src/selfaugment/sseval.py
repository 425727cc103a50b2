"""Linear probes on a frozen backbone: rotation (4-way), jigsaw (24-way), supervised labels."""

from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .nn import Encoder, SgdConfig, linear_head, make_sgd, set_epoch_lr, to_tensor

JIGSAW_PERMUTATIONS: tuple[tuple[int, ...], ...] = tuple(itertools.permutations(range(4)))


class TaskKind(str, enum.Enum):
    ROTATION = "rotation"
    JIGSAW = "jigsaw"
    SUPERVISED = "supervised"


@dataclass(frozen=True)
class ProbeTask:
    kind: TaskKind
    num_classes: int

    def __post_init__(self):
        kind = TaskKind(self.kind)
        object.__setattr__(self, "kind", kind)
        fixed = {TaskKind.ROTATION: 4, TaskKind.JIGSAW: 24}.get(kind)
        if fixed is not None and self.num_classes != fixed:
            raise ValueError(f"{kind.value} has exactly {fixed} classes")
        if self.num_classes < 2:
            raise ValueError("a probe needs at least two classes")


ROTATION = ProbeTask(TaskKind.ROTATION, 4)
JIGSAW = ProbeTask(TaskKind.JIGSAW, 24)


def supervised_task(num_classes: int) -> ProbeTask:
    return ProbeTask(TaskKind.SUPERVISED, num_classes)


def rotate_batch(imgs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """All four counter-clockwise quarter turns of every image, grouped by turn count.

    Output row ``r * N + i`` is image ``i`` turned ``r`` times; its label is ``r``.
    """
    if imgs.ndim != 4:
        raise ValueError("expected [N, C, H, W]")
    if imgs.shape[2] != imgs.shape[3]:
        raise ValueError(f"rotation needs square images, got {imgs.shape[2]}x{imgs.shape[3]}")
    out = np.concatenate([np.rot90(imgs, r, axes=(2, 3)) for r in range(4)])
    labels = np.repeat(np.arange(4), len(imgs))
    return np.ascontiguousarray(out), labels


def permute_quadrants(img: np.ndarray, perm) -> np.ndarray:
    """Output quadrant ``i`` (TL, TR, BL, BR) receives input quadrant ``perm[i]``."""
    h2, w2 = img.shape[-2] // 2, img.shape[-1] // 2
    quads = [img[..., :h2, :w2], img[..., :h2, w2:], img[..., h2:, :w2], img[..., h2:, w2:]]
    q = [quads[j] for j in perm]
    top = np.concatenate([q[0], q[1]], axis=-1)
    bottom = np.concatenate([q[2], q[3]], axis=-1)
    return np.concatenate([top, bottom], axis=-2)


def jigsaw_batch(imgs: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Shuffle quadrants by a uniformly drawn permutation; label is its lexicographic index."""
    if imgs.ndim != 4:
        raise ValueError("expected [N, C, H, W]")
    if imgs.shape[2] % 2 or imgs.shape[3] % 2:
        raise ValueError(f"jigsaw needs even height and width, got {imgs.shape[2]}x{imgs.shape[3]}")
    labels = rng.integers(len(JIGSAW_PERMUTATIONS), size=len(imgs))
    out = np.stack([permute_quadrants(img, JIGSAW_PERMUTATIONS[l]) for img, l in zip(imgs, labels)])
    return out, labels


# -- probes ----------------------------------------------------------------------


@dataclass(frozen=True)
class ProbeConfig:
    sgd: SgdConfig = field(default_factory=lambda: SgdConfig(lr=0.1, momentum=0.9, weight_decay=0.0,
                                                             schedule=((20, 0.1), (30, 0.1))))
    epochs: int = 50
    batch_size: int = 256
    standardize: bool = True
    holdout: float = 0.25
    jigsaw_copies: int = 4


@dataclass
class LinearProbe:
    """Fixed feature standardization followed by one affine layer."""

    head: torch.nn.Linear
    mean: torch.Tensor
    scale: torch.Tensor

    def logits(self, feats: torch.Tensor) -> torch.Tensor:
        return self.head((feats - self.mean) / self.scale)

    def num_trainable(self) -> int:
        return sum(p.numel() for p in self.head.parameters())


@dataclass
class ProbeResult:
    task: ProbeTask
    top1: float
    eval_loss: float
    head: LinearProbe


@torch.no_grad()
def extract_features(encoder: Encoder, images: np.ndarray, batch_size: int = 512) -> torch.Tensor:
    was_training = encoder.training
    encoder.eval()
    try:
        parts = [encoder.features(to_tensor(images[s:s + batch_size])) for s in range(0, len(images), batch_size)]
    finally:
        encoder.train(was_training)
    return torch.cat(parts) if parts else torch.empty(0, encoder.cfg.feat_dim)


def task_inputs(task: ProbeTask, images: np.ndarray, labels: np.ndarray | None,
                rng: np.random.Generator, jigsaw_copies: int = 1) -> tuple[np.ndarray, np.ndarray]:
    if task.kind is TaskKind.ROTATION:
        return rotate_batch(images)
    if task.kind is TaskKind.JIGSAW:
        parts = [jigsaw_batch(images, rng) for _ in range(jigsaw_copies)]
        return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])
    if labels is None:
        raise ValueError("the supervised probe needs labels")
    return images, np.asarray(labels)


def _fit_head(feats: torch.Tensor, labels: torch.Tensor, num_classes: int, cfg: ProbeConfig,
              seed: int) -> LinearProbe:
    if cfg.standardize:
        mean = feats.mean(dim=0)
        scale = feats.std(dim=0, unbiased=False).clamp_min(1e-6)
    else:
        mean = torch.zeros(feats.shape[1])
        scale = torch.ones(feats.shape[1])
    probe = LinearProbe(linear_head(feats.shape[1], num_classes, seed), mean, scale)
    x = (feats - mean) / scale
    opt = make_sgd(probe.head.parameters(), cfg.sgd)
    gen = torch.Generator().manual_seed(seed)
    for epoch in range(cfg.epochs):
        set_epoch_lr(opt, cfg.sgd, epoch)
        order = torch.randperm(len(x), generator=gen)
        for s in range(0, len(x), cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            loss = F.cross_entropy(probe.head(x[idx]), labels[idx])
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
    return probe


@torch.no_grad()
def probe_metrics(probe: LinearProbe, feats: torch.Tensor, labels: torch.Tensor) -> tuple[float, float]:
    logits = probe.logits(feats)
    loss = float(F.cross_entropy(logits, labels))
    top1 = float((logits.argmax(dim=1) == labels).double().mean())
    return top1, loss


def _snapshot(encoder: Encoder) -> list[torch.Tensor]:
    return [t.detach().clone() for t in encoder.state_dict().values()]


def train_probe(
    encoder: Encoder,
    task: ProbeTask,
    images: np.ndarray,
    cfg: ProbeConfig,
    seed: int,
    labels: np.ndarray | None = None,
    eval_images: np.ndarray | None = None,
    eval_labels: np.ndarray | None = None,
) -> ProbeResult:
    """Fit a linear head on frozen backbone features and score it on held-out images.

    Without explicit eval data, ``cfg.holdout`` of the images (not of their
    rotated/shuffled copies) is held out.
    """
    if len(images) == 0:
        raise ValueError("empty probe data")
    rng = np.random.default_rng(seed)
    if eval_images is None:
        perm = rng.permutation(len(images))
        n_eval = max(1, int(round(cfg.holdout * len(images))))
        if n_eval >= len(images):
            raise ValueError("not enough images to hold out an evaluation split")
        ev, tr = perm[:n_eval], perm[n_eval:]
        eval_images, train_images = images[ev], images[tr]
        if labels is not None:
            eval_labels, labels = labels[ev], labels[tr]
    else:
        train_images = images

    before = _snapshot(encoder)
    x_tr, y_tr = task_inputs(task, train_images, labels, rng, cfg.jigsaw_copies)
    x_ev, y_ev = task_inputs(task, eval_images, eval_labels, rng, cfg.jigsaw_copies)
    f_tr = extract_features(encoder, x_tr)
    f_ev = extract_features(encoder, x_ev)
    probe = _fit_head(f_tr, torch.as_tensor(y_tr, dtype=torch.long), task.num_classes, cfg, seed)
    top1, loss = probe_metrics(probe, f_ev, torch.as_tensor(y_ev, dtype=torch.long))

    after = _snapshot(encoder)
    if any(not torch.equal(a, b) for a, b in zip(before, after)):
        raise RuntimeError("backbone changed during probe training")
    return ProbeResult(task, top1, loss, probe)


@torch.no_grad()
def rotation_loss(encoder: Encoder, probe: LinearProbe, images: np.ndarray) -> tuple[float, float]:
    """Rotation cross-entropy and top-1 of a trained probe on the given (already augmented) images."""
    x, y = rotate_batch(images)
    return probe_metrics(probe, extract_features(encoder, x), torch.as_tensor(y, dtype=torch.long))[::-1]
