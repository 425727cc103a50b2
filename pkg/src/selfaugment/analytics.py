"""Rank correlation, RV2 similarity, per-model evaluation reports and correlation studies."""

from __future__ import annotations

import csv
import dataclasses
import io
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import _canonjson
from .contrastive import EncoderState, MocoConfig, TrainingDivergedError, train_moco
from .dataio import Dataset
from .policy import Augmenter, BasePipeline
from .sseval import JIGSAW, ROTATION, ProbeConfig, supervised_task, train_probe


class UndefinedCorrelationError(ValueError):
    pass


def rankdata(x: Sequence[float]) -> np.ndarray:
    """1-based ranks; tied values share the mean of the ranks they span."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="stable")
    ranks = np.empty(len(x))
    sx = x[order]
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman(x: Sequence[float], y: Sequence[float]) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("spearman needs two 1-D sequences of equal length")
    if len(x) < 3:
        raise ValueError("spearman needs at least 3 points")
    if not (np.isfinite(x).all() and np.isfinite(y).all()):
        raise ValueError("spearman inputs must be finite")
    rx, ry = rankdata(x), rankdata(y)
    dx, dy = rx - rx.mean(), ry - ry.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise UndefinedCorrelationError("rank correlation is undefined for a constant input")
    rho = float(dx @ dy) / math.sqrt(sxx * syy)
    return min(1.0, max(-1.0, rho))


def rv2(x: np.ndarray, y: np.ndarray) -> float:
    """Matrix correlation of the two Gram matrices with their diagonals zeroed; no centering."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2 or x.shape[0] != y.shape[0]:
        raise ValueError("rv2 needs two matrices with the same number of rows")
    sx = x @ x.T
    sy = y @ y.T
    np.fill_diagonal(sx, 0.0)
    np.fill_diagonal(sy, 0.0)
    nx, ny = float(np.sum(sx * sx)), float(np.sum(sy * sy))
    if nx == 0.0 or ny == 0.0:
        raise UndefinedCorrelationError("rv2 is undefined when an off-diagonal Gram matrix is zero")
    return float(np.sum(sx * sy)) / math.sqrt(nx * ny)


# -- reports -----------------------------------------------------------------------

CSV_COLUMNS = ("modelId", "policyName", "rotationTop1", "jigsawTop1", "supervisedTop1",
               "infoNce", "contrastiveTop1", "epochs", "seed")


@dataclass(frozen=True)
class EvalReport:
    model_id: str
    policy_name: str
    rotation_top1: float
    jigsaw_top1: float | None
    supervised_top1: float | None
    info_nce: float
    contrastive_top1: float
    epochs: int
    seed: int

    def __post_init__(self):
        for name in ("rotation_top1", "jigsaw_top1", "supervised_top1", "contrastive_top1"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} = {v} is not an accuracy")

    def row(self) -> dict[str, object]:
        return {
            "modelId": self.model_id,
            "policyName": self.policy_name,
            "rotationTop1": self.rotation_top1,
            "jigsawTop1": self.jigsaw_top1,
            "supervisedTop1": self.supervised_top1,
            "infoNce": self.info_nce,
            "contrastiveTop1": self.contrastive_top1,
            "epochs": self.epochs,
            "seed": self.seed,
        }


def _csv_cell(v: object) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return _canonjson.format_float(v)
    return str(v)


def reports_to_csv(reports: Sequence[EvalReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in reports:
        row = r.row()
        w.writerow([_csv_cell(row[c]) for c in CSV_COLUMNS])
    return buf.getvalue()


def reports_to_jsonl(reports: Sequence[EvalReport]) -> str:
    return "".join(_canonjson.dumps(r.row(), indent=None) + "\n" for r in reports)


def emit_report(reports: Sequence[EvalReport], path: str | os.PathLike, fmt: str = "csv") -> None:
    if not reports:
        raise ValueError("no reports to emit")
    if fmt == "csv":
        text = reports_to_csv(reports)
    elif fmt == "jsonl":
        text = reports_to_jsonl(reports)
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    Path(path).write_text(text)


def evaluate_model(
    state: EncoderState,
    dataset: Dataset,
    probe_cfg: ProbeConfig,
    seed: int,
    model_id: str,
    policy_name: str,
    info_nce: float,
    contrastive_top1: float,
    epochs: int,
    jigsaw: bool = True,
    supervised: bool = True,
) -> EvalReport:
    """Probe a trained encoder; held-out splits come from ``probe_cfg.holdout``."""
    rot = train_probe(state.query, ROTATION, dataset.images, probe_cfg, seed).top1
    jig = train_probe(state.query, JIGSAW, dataset.images, probe_cfg, seed).top1 if jigsaw else None
    sup = None
    if supervised:
        if dataset.labels is None or dataset.num_classes is None:
            raise ValueError("the supervised probe needs a labelled dataset")
        sup = train_probe(state.query, supervised_task(dataset.num_classes), dataset.images, probe_cfg, seed,
                          labels=dataset.labels).top1
    return EvalReport(model_id, policy_name, rot, jig, sup, info_nce, contrastive_top1, epochs, seed)


@dataclass
class CorrelationStudy:
    reports: list[EvalReport]
    rho_rotation: float
    rho_jigsaw: float | None
    failures: list[str]


def run_correlation_study(
    model_specs: Sequence[tuple[Augmenter | None, int]],
    dataset: Dataset,
    moco_cfg: MocoConfig,
    probe_cfg: ProbeConfig,
    seed: int,
    pipeline: BasePipeline | None = BasePipeline(),
    jigsaw: bool = True,
    progress=None,
) -> CorrelationStudy:
    """Train one model per (policy, epochs) spec, probe it, and rank-correlate each
    self-supervised metric against supervised accuracy.

    Every model starts from the same seed, so specs differ only in policy and epochs.
    """
    if len(model_specs) < 3:
        raise ValueError("a correlation study needs at least 3 model specs")
    reports, failures = [], []
    for i, (policy, epochs) in enumerate(model_specs):
        name = getattr(policy, "name", "none") if policy is not None else "none"
        cfg = dataclasses.replace(moco_cfg, epochs=int(epochs))
        try:
            state, logs = train_moco(dataset.unlabeled(), policy, cfg, seed, pipeline)
        except TrainingDivergedError as exc:
            failures.append(f"model {i} ({name}): {exc}")
            continue
        last = logs[-1] if logs else None
        rep = evaluate_model(state, dataset, probe_cfg, seed, f"m{i:03d}", name,
                             last.loss if last else float("nan"), last.contrastive_top1 if last else 0.0,
                             int(epochs), jigsaw=jigsaw)
        reports.append(rep)
        if progress is not None:
            progress(rep)
    if len(reports) < 3:
        raise RuntimeError(f"only {len(reports)} models trained successfully: {failures}")
    sup = [r.supervised_top1 for r in reports]
    rho_rot = spearman([r.rotation_top1 for r in reports], sup)
    rho_jig = spearman([r.jigsaw_top1 for r in reports], sup) if jigsaw else None
    return CorrelationStudy(reports, rho_rot, rho_jig, failures)
