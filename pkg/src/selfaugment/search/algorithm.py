"""Policy search on unlabeled data.

Fold models are trained once under the base augmentation; candidate
sub-policies are then scored with forward passes only (rotation loss of a
frozen linear probe, InfoNCE against the fold's queue, or a normalized mix),
proposed by TPE, and the best ``P`` of every iteration on every fold are
merged into the final policy.
"""

from __future__ import annotations

import dataclasses
import enum
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from multiprocessing import get_context
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np
import torch

from .. import _canonjson
from ..analytics import EvalReport, evaluate_model
from ..contrastive import EncoderState, MocoConfig, TrainingDivergedError, evaluate_infonce, train_moco
from ..dataio import Dataset, kfold_split
from ..imageops import SEARCHABLE_OPS, Op, as_op
from ..policy import (
    FLIP_ONLY,
    Augmenter,
    BasePipeline,
    Policy,
    RandAugmentConfig,
    TransformSpec,
    augment_batch,
    make_randaugment_policy,
    single_transform_policy,
)
from ..sseval import ROTATION, LinearProbe, ProbeConfig, rotation_loss, train_probe
from .tpe import DEFAULT_CANDIDATES, DEFAULT_GAMMA, DEFAULT_STARTUP, Categorical, Uniform, tpe_suggest


class SearchAbortedError(RuntimeError):
    pass


class LossKind(str, enum.Enum):
    MIN_ROT = "minRot"
    MIN_INFO = "minInfo"
    MAX_INFO = "maxInfo"
    MINIMAX = "minimax"
    WEIGHTED_MINIMAX = "weightedMinimax"


@dataclass(frozen=True)
class LossSpec:
    kind: LossKind = LossKind.MINIMAX
    lambda_rot: float = 1.0
    lambda_nce: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "kind", LossKind(self.kind))

    @property
    def label(self) -> str:
        if self.kind is LossKind.WEIGHTED_MINIMAX:
            return f"weightedMinimax({_canonjson.format_float(self.lambda_rot)},{_canonjson.format_float(self.lambda_nce)})"
        return self.kind.value

    @property
    def needs_rotation(self) -> bool:
        return self.kind in (LossKind.MIN_ROT, LossKind.MINIMAX, LossKind.WEIGHTED_MINIMAX)

    @property
    def needs_infonce(self) -> bool:
        return self.kind is not LossKind.MIN_ROT


@dataclass(frozen=True)
class SearchConfig:
    k_folds: int = 5
    iterations: int = 2  # T, search iterations per fold
    trials: int = 200  # B, trials per iteration
    top_p: int = 10
    n_tau: int = 2  # transforms per candidate sub-policy
    loss: LossSpec = field(default_factory=LossSpec)
    base_policy: Policy | None = None  # set: fixed base, skip the single-transform sweep
    base_epoch_fraction: float = 0.1
    search_ops: bool = True  # False: ops are fixed_ops, only (p, lambda) are searched
    fixed_ops: tuple[Op, ...] = ()
    op_choices: tuple[Op, ...] = SEARCHABLE_OPS
    gamma: float = DEFAULT_GAMMA
    n_candidates: int = DEFAULT_CANDIDATES
    n_startup: int = DEFAULT_STARTUP
    score_pipeline: BasePipeline = FLIP_ONLY
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    workers: int = 1

    def __post_init__(self):
        for name in ("k_folds", "iterations", "trials", "top_p", "n_tau"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.top_p > self.trials:
            raise ValueError("top_p cannot exceed trials per iteration")
        object.__setattr__(self, "fixed_ops", tuple(as_op(o) for o in self.fixed_ops))
        object.__setattr__(self, "op_choices", tuple(as_op(o) for o in self.op_choices))
        if not self.search_ops and len(self.fixed_ops) != self.n_tau:
            raise ValueError("fixed_ops must list exactly n_tau ops when op identity is not searched")
        if not 0.0 < self.base_epoch_fraction <= 1.0:
            raise ValueError("base_epoch_fraction must lie in (0, 1]")


@dataclass(frozen=True)
class LossNormalizer:
    mean_rot: float
    mean_nce: float

    def __post_init__(self):
        if not (self.mean_rot > 0 and self.mean_nce > 0):
            raise ValueError(f"normalizer terms must be positive, got {self.mean_rot}, {self.mean_nce}")


UNIT_NORMALIZER = LossNormalizer(1.0, 1.0)


@dataclass(frozen=True)
class Trial:
    fold_id: int
    iter_id: int
    trial_idx: int
    candidate: tuple[TransformSpec, ...]
    loss_kind: str
    score: float
    seed: int

    def to_json(self) -> dict[str, Any]:
        return {
            "foldId": self.fold_id,
            "iterId": self.iter_id,
            "trialIdx": self.trial_idx,
            "candidate": [{"op": s.op.value, "p": s.p, "lambda": s.magnitude} for s in self.candidate],
            "lossKind": self.loss_kind,
            "score": self.score,
            "seed": self.seed,
        }


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


# -- scoring -------------------------------------------------------------------------


def _rotation_term(state: EncoderState, probe: LinearProbe, candidate: Augmenter | None, images: np.ndarray,
                   rng: np.random.Generator, pipeline: BasePipeline | None) -> float:
    aug = augment_batch(images, candidate, rng, pipeline)
    return rotation_loss(state.query, probe, aug)[0]


def policy_loss(
    loss: LossSpec,
    state: EncoderState,
    probe: LinearProbe,
    candidate: Augmenter | None,
    images: np.ndarray,
    temperature: float,
    seed: int,
    normalizer: LossNormalizer = UNIT_NORMALIZER,
    pipeline: BasePipeline | None = FLIP_ONLY,
) -> float:
    """Score a candidate on held-out images with forward passes only; lower is better.

    The rotation and InfoNCE terms draw from separate streams derived from
    ``seed``, so a term is identical whichever loss kind requested it.
    """
    rot_ss, nce_ss = np.random.SeedSequence(seed).spawn(2)
    l_rot = l_nce = 0.0
    if loss.needs_rotation:
        l_rot = _rotation_term(state, probe, candidate, images, np.random.default_rng(rot_ss), pipeline)
    if loss.needs_infonce:
        l_nce = evaluate_infonce(state, images, candidate, temperature, np.random.default_rng(nce_ss), pipeline)[0]
    kind = loss.kind
    if kind is LossKind.MIN_ROT:
        score = l_rot
    elif kind is LossKind.MIN_INFO:
        score = l_nce
    elif kind is LossKind.MAX_INFO:
        score = -l_nce
    elif kind is LossKind.MINIMAX:
        score = l_rot / normalizer.mean_rot - l_nce / normalizer.mean_nce
    else:
        score = loss.lambda_rot * l_rot / normalizer.mean_rot - loss.lambda_nce * l_nce / normalizer.mean_nce
    if not math.isfinite(score):
        raise FloatingPointError(f"non-finite {loss.label} score (rot {l_rot}, nce {l_nce})")
    return float(score)


# -- base policy ---------------------------------------------------------------------


def base_candidates() -> list[Policy]:
    """The 15 searchable ops plus random-resize-crop, each always applied with a fresh magnitude."""
    return [single_transform_policy(op) for op in SEARCHABLE_OPS] + [single_transform_policy(Op.RANDOM_RESIZE_CROP)]


@dataclass
class BaseSelection:
    policy: Policy
    scores: list[tuple[str, float | None]]  # (candidate name, probe eval loss or None if disqualified)


def select_base_policy(
    dataset: Dataset,
    moco_cfg: MocoConfig,
    short_epochs: int,
    seed: int,
    probe_cfg: ProbeConfig,
    candidates: Sequence[Policy] | None = None,
    pipeline: BasePipeline | None = FLIP_ONLY,
    log: Callable[[str], None] | None = None,
) -> BaseSelection:
    """Short MoCo run per candidate, rotation probe per encoder, argmin of the probe's held-out loss."""
    candidates = list(base_candidates() if candidates is None else candidates)
    if not candidates:
        raise ValueError("no base-policy candidates")
    cfg = dataclasses.replace(moco_cfg, epochs=max(1, int(short_epochs)))
    data = dataset.unlabeled()
    scores: list[tuple[str, float | None]] = []
    best, best_loss = None, math.inf
    for cand in candidates:
        try:
            state, _ = train_moco(data, cand, cfg, seed, pipeline)
            res = train_probe(state.query, ROTATION, data.images, probe_cfg, seed)
            loss = res.eval_loss
            if not math.isfinite(loss):
                raise TrainingDivergedError(f"non-finite probe loss for {cand.name}")
        except TrainingDivergedError as exc:
            scores.append((cand.name, None))
            if log is not None:
                log(f"base candidate {cand.name} disqualified: {exc}")
            continue
        scores.append((cand.name, loss))
        if loss < best_loss:
            best, best_loss = cand, loss
    if best is None:
        raise SearchAbortedError("every base-policy candidate diverged")
    chosen = dataclasses.replace(best, provenance={**best.provenance, "role": "basePolicy",
                                                   "probeLoss": best_loss, "shortEpochs": cfg.epochs})
    return BaseSelection(chosen, scores)


# -- fold preparation ------------------------------------------------------------------


@dataclass
class FoldModel:
    fold_id: int
    model_idx: np.ndarray
    policy_idx: np.ndarray
    state: EncoderState
    probe: LinearProbe
    base_rot: float
    base_nce: float
    train_seed: int


@dataclass
class PreparedSearch:
    dataset: Dataset
    moco_cfg: MocoConfig
    cfg: SearchConfig
    seed: int
    base_policy: Policy
    base_selection: BaseSelection | None
    folds: list[FoldModel]
    normalizer: LossNormalizer


def _train_fold(args) -> FoldModel:
    torch.set_num_threads(1)
    images, fold, moco_cfg, cfg, base_policy, seed = args
    data = Dataset(images[fold.model_idx], None, f"fold{fold.k}")
    last_exc = None
    for attempt in range(2):
        train_seed = derive_seed(seed, 1, fold.k, attempt)
        try:
            state, _ = train_moco(data, base_policy, moco_cfg, train_seed, cfg.score_pipeline)
            probe = train_probe(state.query, ROTATION, data.images, cfg.probe, train_seed).head
            held_out = images[fold.policy_idx]
            base_seed = derive_seed(seed, 2, fold.k)
            base_rot = policy_loss(LossSpec(LossKind.MIN_ROT), state, probe, base_policy, held_out,
                                   moco_cfg.temperature, base_seed, pipeline=cfg.score_pipeline)
            base_nce = policy_loss(LossSpec(LossKind.MIN_INFO), state, probe, base_policy, held_out,
                                   moco_cfg.temperature, base_seed, pipeline=cfg.score_pipeline)
            return FoldModel(fold.k, fold.model_idx, fold.policy_idx, state, probe, base_rot, base_nce, train_seed)
        except (TrainingDivergedError, FloatingPointError) as exc:
            last_exc = exc
    raise SearchAbortedError(f"fold {fold.k} diverged twice: {last_exc}")


def _map(fn, items: list, workers: int) -> list:
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=workers, mp_context=get_context("spawn")) as pool:
        return list(pool.map(fn, items))  # map preserves input order


def prepare_search(dataset: Dataset, cfg: SearchConfig, moco_cfg: MocoConfig, seed: int,
                   log: Callable[[str], None] | None = None) -> PreparedSearch:
    """Base-policy choice, per-fold model and rotation probe, and the loss normalizer."""
    selection = None
    if cfg.base_policy is None:
        short = max(1, int(round(cfg.base_epoch_fraction * moco_cfg.epochs)))
        selection = select_base_policy(dataset, moco_cfg, short, derive_seed(seed, 0), cfg.probe,
                                       pipeline=cfg.score_pipeline, log=log)
        base = selection.policy
    else:
        base = cfg.base_policy
    folds = kfold_split(len(dataset), cfg.k_folds, derive_seed(seed, 3))
    jobs = [(dataset.images, f, moco_cfg, cfg, base, seed) for f in folds]
    models = _map(_train_fold, jobs, cfg.workers)
    normalizer = LossNormalizer(float(np.mean([m.base_rot for m in models])),
                                float(np.mean([m.base_nce for m in models])))
    return PreparedSearch(dataset, moco_cfg, cfg, seed, base, selection, models, normalizer)


# -- search --------------------------------------------------------------------------


def search_space(cfg: SearchConfig) -> list:
    dims: list = []
    for i in range(cfg.n_tau):
        if cfg.search_ops:
            dims.append(Categorical(f"op{i}", tuple(o.value for o in cfg.op_choices)))
        dims.append(Uniform(f"p{i}"))
        dims.append(Uniform(f"lambda{i}"))
    return dims


def candidate_from_params(params: dict[str, Any], cfg: SearchConfig) -> tuple[TransformSpec, ...]:
    specs = []
    for i in range(cfg.n_tau):
        op = params[f"op{i}"] if cfg.search_ops else cfg.fixed_ops[i]
        specs.append(TransformSpec(as_op(op), params[f"p{i}"], params[f"lambda{i}"]))
    return tuple(specs)


def _search_fold(args) -> list[list[Trial]]:
    torch.set_num_threads(1)
    fold, images, cfg, loss, temperature, normalizer, seed = args
    held_out = images[fold.policy_idx]
    space = search_space(cfg)
    rng = np.random.default_rng(derive_seed(seed, 4, fold.fold_id))
    history: list[tuple[dict[str, Any], float]] = []
    per_iter: list[list[Trial]] = []
    for t in range(cfg.iterations):
        trials = []
        for b in range(cfg.trials):
            params = tpe_suggest(history, space, rng, gamma=cfg.gamma, n_candidates=cfg.n_candidates,
                                 n_startup=cfg.n_startup)
            cand = candidate_from_params(params, cfg)
            trial_seed = derive_seed(seed, 5, fold.fold_id, t, b)
            policy = Policy((cand,), name="candidate")
            try:
                score = policy_loss(loss, fold.state, fold.probe, policy, held_out, temperature, trial_seed,
                                    normalizer, cfg.score_pipeline)
            except FloatingPointError:
                continue  # rejected: nothing enters the history
            history.append((params, score))
            trials.append(Trial(fold.fold_id, t, b, cand, loss.label, score, trial_seed))
        per_iter.append(trials)
    return per_iter


def top_p(trials: Sequence[Trial], p: int) -> list[Trial]:
    return sorted(trials, key=lambda tr: (tr.score, tr.seed))[:p]


@dataclass
class SearchResult:
    policy: Policy
    trials: list[Trial]
    base_policy: Policy
    normalizer: LossNormalizer
    base_selection: BaseSelection | None = None


def search_policy(prep: PreparedSearch, loss: LossSpec | None = None,
                  trial_log: str | Path | None = None) -> SearchResult:
    """TPE trials on every fold's held-out half, top-P per iteration, merged over iterations and folds."""
    cfg = prep.cfg
    loss = cfg.loss if loss is None else loss
    jobs = [(f, prep.dataset.images, cfg, loss, prep.moco_cfg.temperature, prep.normalizer, prep.seed)
            for f in prep.folds]
    results = _map(_search_fold, jobs, cfg.workers)

    all_trials: list[Trial] = []
    chosen: list[Trial] = []
    for per_iter in results:
        for trials in per_iter:
            if len(trials) < cfg.top_p:
                raise SearchAbortedError(f"only {len(trials)} valid trials in an iteration, need {cfg.top_p}")
            all_trials.extend(trials)
            chosen.extend(top_p(trials, cfg.top_p))

    provenance = {
        "lossKind": loss.label,
        "seed": prep.seed,
        "folds": cfg.k_folds,
        "iterations": cfg.iterations,
        "trialsPerIteration": cfg.trials,
        "topP": cfg.top_p,
        "nTau": cfg.n_tau,
        "basePolicy": prep.base_policy.name,
        "normalizer": {"meanRot": prep.normalizer.mean_rot, "meanNce": prep.normalizer.mean_nce},
        "sources": [[tr.fold_id, tr.iter_id, tr.trial_idx] for tr in chosen],
    }
    policy = Policy(tuple(tr.candidate for tr in chosen), name=f"selfaugment-{loss.label}", provenance=provenance)
    if trial_log is not None:
        Path(trial_log).write_text("".join(_canonjson.dumps(tr.to_json(), indent=None) + "\n" for tr in all_trials))
    return SearchResult(policy, all_trials, prep.base_policy, prep.normalizer, prep.base_selection)


def run_selfaugment(dataset: Dataset, cfg: SearchConfig, moco_cfg: MocoConfig, seed: int,
                    trial_log: str | Path | None = None, log: Callable[[str], None] | None = None) -> SearchResult:
    """The full search: base policy, fold models, normalizer, TPE trials, merged top-P policy."""
    prep = prepare_search(dataset.unlabeled(), cfg, moco_cfg, seed, log)
    return search_policy(prep, trial_log=trial_log)


# -- RandAugment grid ---------------------------------------------------------------


@dataclass
class GridPoint:
    config: RandAugmentConfig
    rotation_top1: float  # nan when the run diverged
    report: EvalReport | None


def run_selfrandaugment(
    dataset: Dataset,
    grid: Sequence[tuple[int, int]],
    moco_cfg: MocoConfig,
    probe_cfg: ProbeConfig,
    seed: int,
    ops: Sequence[Op] = SEARCHABLE_OPS,
    pipeline: BasePipeline | None = BasePipeline(),
    log: Callable[[str], None] | None = None,
) -> tuple[RandAugmentConfig, list[GridPoint]]:
    """Pretrain per (n_tau, level) point, keep the best rotation accuracy; ties go to the smaller point."""
    if not grid:
        raise ValueError("empty RandAugment grid")
    data = dataset.unlabeled()
    points: list[GridPoint] = []
    for n_tau, level in sorted(set((int(a), int(b)) for a, b in grid)):
        ra_cfg = RandAugmentConfig(n_tau, level, tuple(ops))
        policy = make_randaugment_policy(ra_cfg)
        try:
            state, logs = train_moco(data, policy, moco_cfg, seed, pipeline)
        except TrainingDivergedError as exc:
            if log is not None:
                log(f"grid point {policy.name} diverged: {exc}")
            points.append(GridPoint(ra_cfg, float("nan"), None))
            continue
        last = logs[-1]
        rep = evaluate_model(state, data, probe_cfg, seed, policy.name, policy.name, last.loss,
                             last.contrastive_top1, moco_cfg.epochs, jigsaw=False, supervised=False)
        points.append(GridPoint(ra_cfg, rep.rotation_top1, rep))
    valid = [p for p in points if math.isfinite(p.rotation_top1)]
    if not valid:
        raise SearchAbortedError("every RandAugment grid point diverged")
    best = valid[0]
    for p in valid[1:]:
        if p.rotation_top1 > best.rotation_top1:
            best = p
    return best.config, points
