"""Augmentation policies: transforms with probability and magnitude, grouped into sub-policies.

A :class:`Policy` picks one sub-policy uniformly per image and runs its transforms
in order, each gated by an independent Bernoulli(p) draw.  A
:class:`RandAugmentPolicy` samples its sub-policy lazily from a shared magnitude.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Mapping, Protocol, Sequence

import numpy as np

from . import _canonjson
from .imageops import (
    SEARCHABLE_OPS,
    Op,
    as_op,
    apply_op,
    check_image,
    horizontal_flip,
    random_resize_crop,
    randaugment_level_to_unit,
)


class PolicyFormatError(ValueError):
    """A policy document could not be parsed."""


@dataclass(frozen=True)
class TransformSpec:
    op: Op
    p: float
    magnitude: float

    def __post_init__(self):
        op = as_op(self.op)
        if op is Op.HORIZONTAL_FLIP:
            raise ValueError("horizontalFlip belongs to the base pipeline, not to policies")
        object.__setattr__(self, "op", op)
        object.__setattr__(self, "p", float(self.p))
        object.__setattr__(self, "magnitude", float(self.magnitude))
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"p must lie in [0, 1], got {self.p!r}")
        if not 0.0 <= self.magnitude <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {self.magnitude!r}")


SubPolicy = tuple[TransformSpec, ...]


def apply_subpolicy(
    sub: Sequence[TransformSpec],
    img: np.ndarray,
    rng: np.random.Generator,
    random_magnitude: bool = False,
) -> np.ndarray:
    for spec in sub:
        if rng.random() < spec.p:
            lam = rng.random() if random_magnitude else spec.magnitude
            img = apply_op(img, spec.op, lam, rng)
    return img


class Augmenter(Protocol):
    name: str

    def apply(self, img: np.ndarray, rng: np.random.Generator) -> np.ndarray: ...


@dataclass(frozen=True, eq=True)
class Policy:
    """A collection of sub-policies.

    With ``random_magnitude`` set, every fired transform draws a fresh
    magnitude uniformly from [0, 1] instead of using its stored one; the
    single-transform candidates of base-policy selection work this way.
    """

    sub_policies: tuple[SubPolicy, ...]
    name: str = "policy"
    provenance: Mapping[str, Any] = field(default_factory=dict, hash=False)
    random_magnitude: bool = False

    def __post_init__(self):
        subs = tuple(tuple(s) for s in self.sub_policies)
        if not subs:
            raise ValueError("a policy needs at least one sub-policy")
        for s in subs:
            if not s:
                raise ValueError("sub-policies must contain at least one transform")
            for spec in s:
                if not isinstance(spec, TransformSpec):
                    raise TypeError(f"expected TransformSpec, got {type(spec).__name__}")
        object.__setattr__(self, "sub_policies", subs)
        object.__setattr__(self, "provenance", dict(self.provenance))

    def __len__(self) -> int:
        return len(self.sub_policies)

    def apply(self, img: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        sub = self.sub_policies[int(rng.integers(len(self.sub_policies)))]
        return apply_subpolicy(sub, img, rng, self.random_magnitude)

    def specs(self) -> list[TransformSpec]:
        return [spec for sub in self.sub_policies for spec in sub]


def apply_policy(policy: Augmenter, img: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    check_image(img)
    return policy.apply(img, rng)


def single_transform_policy(op: Op | str, p: float = 1.0, magnitude: float = 0.5,
                            random_magnitude: bool = True) -> Policy:
    op = as_op(op)
    return Policy(((TransformSpec(op, p, magnitude),),), name=f"single-{op.value}",
                  random_magnitude=random_magnitude)


# -- RandAugment ---------------------------------------------------------------


@dataclass(frozen=True)
class RandAugmentConfig:
    n_tau: int
    level: int
    ops: tuple[Op, ...] = SEARCHABLE_OPS

    def __post_init__(self):
        object.__setattr__(self, "ops", tuple(as_op(o) for o in self.ops))
        if self.n_tau < 1:
            raise ValueError("n_tau must be >= 1")
        randaugment_level_to_unit(self.level)
        if not self.ops:
            raise ValueError("RandAugment needs a non-empty op subset")


class RandAugmentPolicy:
    """Draws ``n_tau`` ops uniformly per call, all at one magnitude and gated at p = 1/K."""

    def __init__(self, config: RandAugmentConfig, name: str | None = None):
        self.config = config
        self.magnitude = randaugment_level_to_unit(config.level)
        self.p = 1.0 / len(config.ops)
        self.name = name or f"randaugment-n{config.n_tau}-l{config.level}-k{len(config.ops)}"

    def sample_subpolicy(self, rng: np.random.Generator) -> SubPolicy:
        idx = rng.integers(len(self.config.ops), size=self.config.n_tau)
        return tuple(TransformSpec(self.config.ops[i], self.p, self.magnitude) for i in idx)

    def apply(self, img: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        return apply_subpolicy(self.sample_subpolicy(rng), img, rng)

    def __repr__(self) -> str:
        return f"RandAugmentPolicy({self.config!r})"


def make_randaugment_policy(config: RandAugmentConfig) -> RandAugmentPolicy:
    return RandAugmentPolicy(config)


# -- base pipeline -------------------------------------------------------------


@dataclass(frozen=True)
class BasePipeline:
    """Flip and optional random-resize-crop, run before any policy."""

    flip_p: float = 0.5
    crop_scale: tuple[float, float] | None = (0.2, 1.0)

    def __call__(self, img: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        if rng.random() < self.flip_p:
            img = horizontal_flip(img)
        if self.crop_scale is not None:
            img = random_resize_crop(img, rng, tuple(self.crop_scale))
        return img


FLIP_ONLY = BasePipeline(flip_p=0.5, crop_scale=None)


def augment(img: np.ndarray, policy: Augmenter | None, rng: np.random.Generator,
            pipeline: BasePipeline | None = None) -> np.ndarray:
    """One view: base pipeline first, then the policy (``None`` means identity)."""
    if pipeline is not None:
        img = pipeline(img, rng)
    if policy is not None:
        img = policy.apply(img, rng)
    return img


def augment_batch(images: np.ndarray, policy: Augmenter | None, rng: np.random.Generator,
                  pipeline: BasePipeline | None = None) -> np.ndarray:
    return np.stack([augment(img, policy, rng, pipeline) for img in images])


# -- strength summaries --------------------------------------------------------

_SYMMETRIC = {Op.SHEAR_X, Op.SHEAR_Y, Op.TRANSLATE_X, Op.TRANSLATE_Y, Op.ROTATE,
              Op.CONTRAST, Op.COLOR, Op.BRIGHTNESS, Op.SHARPNESS}
_DESCENDING = {Op.SOLARIZE, Op.POSTERIZE, Op.RANDOM_RESIZE_CROP}
_CONSTANT = {Op.AUTO_CONTRAST, Op.INVERT, Op.EQUALIZE, Op.HORIZONTAL_FLIP}


def effective_magnitude(op: Op | str, lam: float) -> float:
    """Distortion implied by a unit magnitude: 0 at the identity parameter, 1 at the table's extreme.

    Signed and enhance ops are identity at lam = 0.5, solarize/posterize are
    identity at lam = 1, cutout at lam = 0; invert, autoContrast and equalize
    have no magnitude and always count as full strength.
    """
    op = as_op(op)
    if op in _SYMMETRIC:
        return abs(2.0 * lam - 1.0)
    if op in _DESCENDING:
        return 1.0 - lam
    if op in _CONSTANT:
        return 1.0
    return lam


def expected_strength(policy: Policy) -> float:
    """Mean of effective magnitude times probability over every transform in the policy."""
    specs = policy.specs()
    return float(np.mean([effective_magnitude(s.op, s.magnitude) * s.p for s in specs]))


def mean_lambda_p(policy: Policy) -> float:
    specs = policy.specs()
    return float(np.mean([s.magnitude * s.p for s in specs]))


# -- serialization -------------------------------------------------------------


def policy_to_dict(policy: Policy) -> dict[str, Any]:
    doc: dict[str, Any] = {
        "name": policy.name,
        "subPolicies": [
            [{"op": s.op.value, "p": s.p, "lambda": s.magnitude} for s in sub]
            for sub in policy.sub_policies
        ],
        "provenance": dict(policy.provenance),
    }
    if policy.random_magnitude:
        doc["randomMagnitude"] = True
    return doc


def serialize_policy(policy: Policy) -> bytes:
    return (_canonjson.dumps(policy_to_dict(policy)) + "\n").encode("utf-8")


def _number(value: Any, where: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise PolicyFormatError(f"{where}: expected a number, got {value!r}")
    value = float(value)
    if not 0.0 <= value <= 1.0:
        raise PolicyFormatError(f"{where}: value {value!r} out of range [0, 1]")
    return value


def policy_from_dict(doc: Any) -> Policy:
    if not isinstance(doc, dict):
        raise PolicyFormatError("policy document must be a JSON object")
    unknown = set(doc) - {"name", "subPolicies", "provenance", "randomMagnitude"}
    if unknown:
        raise PolicyFormatError(f"unknown top-level field(s): {sorted(unknown)}")
    name = doc.get("name", "policy")
    if not isinstance(name, str):
        raise PolicyFormatError("name: expected a string")
    provenance = doc.get("provenance", {})
    if not isinstance(provenance, dict):
        raise PolicyFormatError("provenance: expected an object")
    random_magnitude = doc.get("randomMagnitude", False)
    if not isinstance(random_magnitude, bool):
        raise PolicyFormatError("randomMagnitude: expected a boolean")
    subs_doc = doc.get("subPolicies")
    if not isinstance(subs_doc, list) or not subs_doc:
        raise PolicyFormatError("subPolicies: expected a non-empty list")

    subs = []
    for i, sub_doc in enumerate(subs_doc):
        if not isinstance(sub_doc, list) or not sub_doc:
            raise PolicyFormatError(f"subPolicies[{i}]: expected a non-empty list")
        specs = []
        for j, t in enumerate(sub_doc):
            where = f"subPolicies[{i}][{j}]"
            if not isinstance(t, dict):
                raise PolicyFormatError(f"{where}: expected an object")
            missing = {"op", "p", "lambda"} - set(t)
            if missing:
                raise PolicyFormatError(f"{where}: missing field(s) {sorted(missing)}")
            extra = set(t) - {"op", "p", "lambda"}
            if extra:
                raise PolicyFormatError(f"{where}: unknown field(s) {sorted(extra)}")
            try:
                op = as_op(t["op"])
            except ValueError:
                raise PolicyFormatError(f"{where}.op: unknown op {t['op']!r}") from None
            if op is Op.HORIZONTAL_FLIP:
                raise PolicyFormatError(f"{where}.op: horizontalFlip is not a policy op")
            specs.append(TransformSpec(op, _number(t["p"], f"{where}.p"),
                                       _number(t["lambda"], f"{where}.lambda")))
        subs.append(tuple(specs))
    return Policy(tuple(subs), name=name, provenance=provenance, random_magnitude=random_magnitude)


def deserialize_policy(data: bytes | str) -> Policy:
    if isinstance(data, bytes):
        try:
            data = data.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise PolicyFormatError(f"policy document is not UTF-8: {exc}") from None
    try:
        doc = json.loads(data)
    except json.JSONDecodeError as exc:
        raise PolicyFormatError(f"malformed policy JSON: {exc}") from None
    return policy_from_dict(doc)
