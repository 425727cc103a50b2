"""Run configuration: layered TOML documents resolved into module config objects.

Layers, later wins: the bundled desk profile, an optional named profile, an
optional user file, then ``section.key=value`` overrides.
"""

from __future__ import annotations

import copy
import os
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Any, Mapping, Sequence

import tomli
import tomli_w

from .contrastive import MocoConfig
from .dataio import Dataset, gen_synthetic, load_cifar10
from .imageops import SEARCHABLE_OPS, as_op
from .nn import EncoderConfig, SgdConfig
from .policy import Policy, deserialize_policy
from .search import LossSpec, SearchConfig
from .sseval import ProbeConfig

PROFILES = ("desk", "paper")
SEED_ENV = "SELFAUG_SEED"


class ConfigError(ValueError):
    pass


def _read_profile(name: str) -> dict[str, Any]:
    if name not in PROFILES:
        raise ConfigError(f"unknown profile {name!r} (choose from {', '.join(PROFILES)})")
    text = resources.files("selfaugment.profiles").joinpath(f"{name}.toml").read_text()
    return tomli.loads(text)


def merge(base: dict[str, Any], over: Mapping[str, Any]) -> dict[str, Any]:
    out = copy.deepcopy(base)
    for key, value in over.items():
        if isinstance(value, Mapping) and isinstance(out.get(key), dict):
            out[key] = merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def parse_override(text: str) -> tuple[list[str], Any]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form section.key=value")
    path, raw = text.split("=", 1)
    keys = path.strip().split(".")
    if len(keys) < 2 or not all(keys):
        raise ConfigError(f"override key {path!r} needs a section and a key")
    try:
        value = tomli.loads(f"v = {raw.strip()}")["v"]
    except tomli.TOMLDecodeError:
        value = raw.strip()  # bare words are strings
    return keys, value


def resolve_document(profile: str = "desk", path: str | os.PathLike | None = None,
                     overrides: Sequence[str] = ()) -> dict[str, Any]:
    doc = _read_profile("desk")
    if profile != "desk":
        doc = merge(doc, _read_profile(profile))
    if path is not None:
        try:
            user = tomli.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        doc = merge(doc, user)
    for text in overrides:
        keys, value = parse_override(text)
        node = doc
        for k in keys[:-1]:
            node = node.setdefault(k, {})
        node[keys[-1]] = value
    env_seed = os.environ.get(SEED_ENV)
    if env_seed is not None:
        try:
            doc["run"]["seed"] = int(env_seed)
        except ValueError:
            raise ConfigError(f"{SEED_ENV}={env_seed!r} is not an integer") from None
    _check_keys(doc)
    return doc


def _check_keys(doc: Mapping[str, Any]) -> None:
    known = _read_profile("desk")
    for section, body in doc.items():
        if section not in known:
            raise ConfigError(f"unknown config section [{section}]")
        for key in body:
            if key not in known[section]:
                raise ConfigError(f"unknown config key {section}.{key}")


def dump_document(doc: Mapping[str, Any]) -> str:
    return tomli_w.dumps(doc)


# -- typed view ------------------------------------------------------------------------


@dataclass(frozen=True)
class RunConfig:
    seed: int
    output_dir: Path
    workers: int
    dataset: dict[str, Any]
    moco: MocoConfig
    search: SearchConfig
    probe: ProbeConfig
    randaugment_grid: tuple[tuple[int, int], ...]
    randaugment_ops: tuple
    document: dict[str, Any]


def _schedule(raw) -> tuple[tuple[int, float], ...]:
    return tuple((int(e), float(m)) for e, m in raw)


def build(doc: Mapping[str, Any]) -> RunConfig:
    try:
        run, ds, enc, mo, se, pr, ra = (doc[k] for k in
                                        ("run", "dataset", "encoder", "moco", "search", "probe", "randaugment"))
        encoder = EncoderConfig(widths=tuple(enc["widths"]), norm=enc["norm"], proj_dim=int(enc["proj_dim"]),
                                mlp_head=bool(enc["mlp_head"]))
        moco = MocoConfig(
            queue_size=int(mo["queue_size"]), momentum=float(mo["momentum"]), temperature=float(mo["temperature"]),
            epochs=int(mo["epochs"]), batch_size=int(mo["batch_size"]),
            sgd=SgdConfig(float(mo["lr"]), float(mo["sgd_momentum"]), float(mo["weight_decay"]),
                          _schedule(mo["schedule"])),
            encoder=encoder,
        )
        probe = ProbeConfig(
            sgd=SgdConfig(float(pr["lr"]), float(pr["momentum"]), float(pr["weight_decay"]),
                          _schedule(pr["schedule"])),
            epochs=int(pr["epochs"]), batch_size=int(pr["batch_size"]), standardize=bool(pr["standardize"]),
            holdout=float(pr["holdout"]), jigsaw_copies=int(pr["jigsaw_copies"]),
        )
        base_policy = load_policy(se["base_policy"]) if se["base_policy"] else None
        search = SearchConfig(
            k_folds=int(se["k_folds"]), iterations=int(se["iterations"]), trials=int(se["trials"]),
            top_p=int(se["top_p"]), n_tau=int(se["n_tau"]),
            loss=LossSpec(se["loss"], float(se["lambda_rot"]), float(se["lambda_nce"])),
            base_policy=base_policy, base_epoch_fraction=float(se["base_epoch_fraction"]),
            search_ops=bool(se["search_ops"]), fixed_ops=tuple(se["fixed_ops"]),
            gamma=float(se["gamma"]), n_candidates=int(se["n_candidates"]), n_startup=int(se["n_startup"]),
            probe=probe, workers=int(run["workers"]),
        )
        grid = tuple((int(a), int(b)) for a, b in ra["grid"])
        ops = tuple(as_op(o) for o in ra["ops"]) or SEARCHABLE_OPS
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid configuration: {exc}") from None
    return RunConfig(int(run["seed"]), Path(run["output_dir"]), int(run["workers"]), dict(ds), moco, search, probe,
                     grid, ops, dict(doc))


def load_config(profile: str = "desk", path: str | os.PathLike | None = None,
                overrides: Sequence[str] = ()) -> RunConfig:
    return build(resolve_document(profile, path, overrides))


def load_policy(path: str | os.PathLike) -> Policy:
    try:
        return deserialize_policy(Path(path).read_bytes())
    except FileNotFoundError:
        raise ConfigError(f"policy file {path} not found") from None


def load_dataset(ds: Mapping[str, Any]) -> Dataset:
    source = ds["source"]
    if source == "synthetic":
        data = gen_synthetic(int(ds["classes"]), int(ds["per_class"]), (int(ds["height"]), int(ds["width"])),
                             int(ds["seed"]), noise=float(ds["noise"]))
    elif source == "cifar10":
        if not ds["path"]:
            raise ConfigError("dataset.path is required for cifar10")
        data = load_cifar10(ds["path"])
    else:
        raise ConfigError(f"unknown dataset source {source!r}")
    n = int(ds["subsample"])
    return data.subsample(n, int(ds["seed"])) if n > 0 else data
