"""Command-line entry point: find-base, search, pretrain, probe, correlate, randaugment.

Every command writes into its run directory a ``resolved_config.toml`` and a
``manifest.json`` listing the produced files with their SHA-256 digests.
Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import sys
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import torch

from . import __version__, _canonjson
from .analytics import emit_report, evaluate_model, run_correlation_study
from .config import ConfigError, RunConfig, dump_document, load_config, load_dataset, load_policy
from .contrastive import EncoderState, TrainingDivergedError, evaluate_infonce, train_moco
from .dataio import DatasetError
from .imageops import as_op
from .nn import CheckpointError, load_checkpoint, save_checkpoint
from .policy import (
    BasePipeline,
    PolicyFormatError,
    RandAugmentConfig,
    make_randaugment_policy,
    serialize_policy,
    single_transform_policy,
)
from .search import LossSpec, SearchAbortedError, run_selfaugment, run_selfrandaugment, select_base_policy
from .search.algorithm import derive_seed

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


class RunDir:
    def __init__(self, cfg: RunConfig, command: str, argv: Sequence[str]):
        self.path = cfg.output_dir
        self.path.mkdir(parents=True, exist_ok=True)
        self.command = command
        self.argv = list(argv)
        self.cfg = cfg
        self.files: list[str] = []

    def write(self, name: str, data: bytes | str) -> Path:
        p = self.path / name
        p.write_bytes(data.encode("utf-8") if isinstance(data, str) else data)
        self.files.append(name)
        return p

    def register(self, name: str) -> None:
        self.files.append(name)

    def finish(self) -> None:
        self.write("resolved_config.toml", dump_document(self.cfg.document))
        entries = {name: hashlib.sha256((self.path / name).read_bytes()).hexdigest() for name in sorted(set(self.files))}
        manifest = {"command": self.command, "argv": self.argv, "seed": self.cfg.seed, "version": __version__,
                    "files": entries}
        (self.path / "manifest.json").write_text(_canonjson.dumps(manifest) + "\n")


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


# -- commands ------------------------------------------------------------------------


def cmd_find_base(cfg: RunConfig, args, run: RunDir) -> None:
    data = load_dataset(cfg.dataset)
    short = max(1, int(round(cfg.search.base_epoch_fraction * cfg.moco.epochs)))
    sel = select_base_policy(data, cfg.moco, short, derive_seed(cfg.seed, 0), cfg.probe,
                             pipeline=cfg.search.score_pipeline, log=_log)
    run.write("base_policy.json", serialize_policy(sel.policy))
    lines = [_canonjson.dumps({"candidate": n, "probeLoss": s}, indent=None) for n, s in sel.scores]
    run.write("base_scores.jsonl", "\n".join(lines) + "\n")
    _log(f"base policy: {sel.policy.name}")


def cmd_search(cfg: RunConfig, args, run: RunDir) -> None:
    search = cfg.search
    if args.base_policy:
        search = dataclasses.replace(search, base_policy=load_policy(args.base_policy))
    if args.loss:
        search = dataclasses.replace(search, loss=LossSpec(args.loss, search.loss.lambda_rot, search.loss.lambda_nce))
    data = load_dataset(cfg.dataset)
    result = run_selfaugment(data, search, cfg.moco, cfg.seed, trial_log=run.path / "trials.jsonl", log=_log)
    run.register("trials.jsonl")
    run.write("policy.json", serialize_policy(result.policy))
    run.write("base_policy.json", serialize_policy(result.base_policy))
    _log(f"final policy: {len(result.policy)} sub-policies")


def _policy_from_arg(text: str | None):
    if text is None or text == "none":
        return None
    if text.startswith("single:"):
        return single_transform_policy(as_op(text.split(":", 1)[1]))
    if text.startswith("randaugment:"):
        n_tau, level = (int(v) for v in text.split(":", 1)[1].split(","))
        return make_randaugment_policy(RandAugmentConfig(n_tau, level))
    return load_policy(text)


def cmd_pretrain(cfg: RunConfig, args, run: RunDir) -> None:
    data = load_dataset(cfg.dataset).unlabeled()
    policy = _policy_from_arg(args.policy)
    state, logs = train_moco(data, policy, cfg.moco, cfg.seed, BasePipeline(), log_path=run.path / "train_log.jsonl")
    run.register("train_log.jsonl")
    save_checkpoint(run.path / "checkpoint.saug", state.tensors())
    run.register("checkpoint.saug")
    if logs:
        _log(f"final loss {logs[-1].loss:.4f}, contrastive top-1 {logs[-1].contrastive_top1:.4f}")


def cmd_probe(cfg: RunConfig, args, run: RunDir) -> None:
    data = load_dataset(cfg.dataset)
    state = EncoderState.from_tensors(cfg.moco.encoder, load_checkpoint(args.checkpoint))
    nce, top1 = evaluate_infonce(state, data.images, None, cfg.moco.temperature,
                                 np.random.default_rng(cfg.seed), BasePipeline())
    want_jigsaw = args.task in ("jigsaw", "all")
    want_sup = args.task in ("supervised", "all")
    report = evaluate_model(state, data, cfg.probe, cfg.seed, Path(args.checkpoint).stem, args.policy_name,
                            nce, top1, cfg.moco.epochs, jigsaw=want_jigsaw, supervised=want_sup)
    emit_report([report], run.path / "report.csv", "csv")
    emit_report([report], run.path / "report.jsonl", "jsonl")
    run.register("report.csv")
    run.register("report.jsonl")
    _log(f"rotation top-1 {report.rotation_top1:.4f}")


def _study_specs(path: str) -> list[tuple[Any, int]]:
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"study spec {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"study spec {path}: {exc}") from None
    if not isinstance(doc, list):
        raise ConfigError("study spec must be a JSON list of {policy, epochs} objects")
    specs = []
    for i, entry in enumerate(doc):
        if not isinstance(entry, dict) or "epochs" not in entry:
            raise ConfigError(f"study spec entry {i} needs 'policy' and 'epochs'")
        specs.append((_policy_from_arg(entry.get("policy")), int(entry["epochs"])))
    return specs


def cmd_correlate(cfg: RunConfig, args, run: RunDir) -> None:
    data = load_dataset(cfg.dataset)
    specs = _study_specs(args.study)
    study = run_correlation_study(specs, data, cfg.moco, cfg.probe, cfg.seed, BasePipeline(),
                                  progress=lambda r: _log(f"{r.model_id} {r.policy_name}: rot {r.rotation_top1:.3f} "
                                                          f"sup {r.supervised_top1:.3f}"))
    emit_report(study.reports, run.path / "reports.csv", "csv")
    emit_report(study.reports, run.path / "reports.jsonl", "jsonl")
    run.register("reports.csv")
    run.register("reports.jsonl")
    run.write("correlation.json", _canonjson.dumps({"rhoRotation": study.rho_rotation,
                                                    "rhoJigsaw": study.rho_jigsaw,
                                                    "failures": study.failures}) + "\n")
    _log(f"spearman rotation {study.rho_rotation:.4f}, jigsaw {study.rho_jigsaw:.4f}")


def _parse_grid(text: str) -> tuple[tuple[int, int], ...]:
    try:
        return tuple((int(a), int(b)) for a, b in (item.split(":") for item in text.split(",")))
    except ValueError:
        raise ConfigError(f"grid {text!r} must look like 1:4,2:9 (nTau:level pairs)") from None


def cmd_randaugment(cfg: RunConfig, args, run: RunDir) -> None:
    data = load_dataset(cfg.dataset)
    grid = _parse_grid(args.grid) if args.grid else cfg.randaugment_grid
    best, points = run_selfrandaugment(data, grid, cfg.moco, cfg.probe, cfg.seed, cfg.randaugment_ops,
                                       BasePipeline(), log=_log)
    reports = [p.report for p in points if p.report is not None]
    emit_report(reports, run.path / "reports.csv", "csv")
    run.register("reports.csv")
    run.write("best.json", _canonjson.dumps({"nTau": best.n_tau, "level": best.level,
                                             "ops": [o.value for o in best.ops]}) + "\n")
    _log(f"best RandAugment point: nTau={best.n_tau}, level={best.level}")


COMMANDS = {
    "find-base": cmd_find_base,
    "search": cmd_search,
    "pretrain": cmd_pretrain,
    "probe": cmd_probe,
    "correlate": cmd_correlate,
    "randaugment": cmd_randaugment,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--profile", default="desk", help="bundled profile: desk or paper")
    common.add_argument("--config", help="TOML file layered over the profile")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value (repeatable)")
    common.add_argument("--output-dir", help="run directory (default: run.output_dir)")
    common.add_argument("--seed", type=int, help="run seed (SELFAUG_SEED takes precedence)")
    common.add_argument("--workers", type=int, help="parallel fold workers")

    parser = _Parser(prog="selfaugment", description="Augmentation policy search for contrastive pretraining.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.add_parser("find-base", parents=[common], help="pick the base policy from single-transform runs")
    p = sub.add_parser("search", parents=[common], help="run the full policy search")
    p.add_argument("--base-policy", help="fixed base policy JSON (skips the single-transform sweep)")
    p.add_argument("--loss", choices=["minRot", "minInfo", "maxInfo", "minimax", "weightedMinimax"])
    p = sub.add_parser("pretrain", parents=[common], help="train a MoCo encoder with a policy")
    p.add_argument("--policy", help="policy JSON path, 'none', 'single:<op>' or 'randaugment:<nTau>,<level>'")
    p = sub.add_parser("probe", parents=[common], help="linear probes on a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--task", choices=["rotation", "jigsaw", "supervised", "all"], default="rotation")
    p.add_argument("--policy-name", default="unknown")
    p = sub.add_parser("correlate", parents=[common], help="correlation study over a list of models")
    p.add_argument("--study", required=True, help="JSON list of {policy, epochs}")
    p = sub.add_parser("randaugment", parents=[common], help="RandAugment grid scored by rotation prediction")
    p.add_argument("--grid", help="nTau:level pairs, e.g. 1:4,2:9")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    torch.set_num_threads(1)
    overrides = list(args.set)
    if args.output_dir:
        overrides.append(f"run.output_dir={json.dumps(args.output_dir)}")
    if args.seed is not None:
        overrides.append(f"run.seed={args.seed}")
    if args.workers is not None:
        overrides.append(f"run.workers={args.workers}")
    try:
        cfg = load_config(args.profile, args.config, overrides)
        run = RunDir(cfg, args.command, argv)
        COMMANDS[args.command](cfg, args, run)
        run.finish()
    except ConfigError as exc:
        print(f"selfaugment: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, CheckpointError, PolicyFormatError, TrainingDivergedError, SearchAbortedError,
            OSError, ValueError, RuntimeError) as exc:
        print(f"selfaugment: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
