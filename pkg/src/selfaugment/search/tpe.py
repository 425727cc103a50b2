"""Tree-structured Parzen estimator over categorical and unit-interval dimensions.

Observations are split at the gamma quantile of their scores (lower is
better). Each dimension gets an independent density for the good set, l(x),
and for the rest, g(x); candidates drawn from l are ranked by l(x)/g(x), the
ratio that orders expected improvement under this model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from statistics import NormalDist
from typing import Any, Mapping, Sequence, Union

import numpy as np

DEFAULT_GAMMA = 0.25
DEFAULT_CANDIDATES = 24
DEFAULT_STARTUP = 10
PRIOR_WEIGHT = 1.0
MIN_BANDWIDTH = 1e-3
_STD_NORMAL = NormalDist()


@dataclass(frozen=True)
class Categorical:
    name: str
    choices: tuple[Any, ...]

    def __post_init__(self):
        object.__setattr__(self, "choices", tuple(self.choices))
        if not self.choices:
            raise ValueError(f"categorical dimension {self.name!r} has no choices")


@dataclass(frozen=True)
class Uniform:
    """A real dimension on [0, 1]."""

    name: str


Dimension = Union[Categorical, Uniform]


def sample_uniform(space: Sequence[Dimension], rng: np.random.Generator) -> dict[str, Any]:
    out = {}
    for dim in space:
        if isinstance(dim, Categorical):
            out[dim.name] = dim.choices[int(rng.integers(len(dim.choices)))]
        else:
            out[dim.name] = float(rng.random())
    return out


# -- 1-D estimators ----------------------------------------------------------------


class _CategoricalDensity:
    def __init__(self, dim: Categorical, observed: Sequence[Any]):
        counts = np.full(len(dim.choices), PRIOR_WEIGHT)
        index = {c: i for i, c in enumerate(dim.choices)}
        for v in observed:
            counts[index[v]] += 1.0
        self.choices = dim.choices
        self.index = index
        self.probs = counts / counts.sum()

    def sample(self, rng: np.random.Generator) -> Any:
        return self.choices[int(rng.choice(len(self.choices), p=self.probs))]

    def log_pdf(self, v: Any) -> float:
        return math.log(self.probs[self.index[v]])


class _TruncatedParzen:
    """Mixture of Gaussians truncated to [0, 1], one per observation, plus a flat prior component."""

    def __init__(self, observed: Sequence[float]):
        mus = np.asarray(observed, dtype=np.float64)
        n = len(mus)
        if n >= 2 and mus.std(ddof=1) > 0:
            sigma = 1.059 * mus.std(ddof=1) * n ** (-0.2)
        else:
            sigma = 1.059 * math.sqrt(1.0 / 12.0) * max(n, 1) ** (-0.2)
        # a floor shrinking like 1/n keeps a collapsed good set from freezing the search
        floor = max(MIN_BANDWIDTH, 1.0 / min(100, n + 1))
        self.sigma = float(np.clip(sigma, floor, 1.0))
        self.mus = mus
        weights = np.concatenate([np.ones(n), [PRIOR_WEIGHT]])
        self.weights = weights / weights.sum()
        lo = np.array([_STD_NORMAL.cdf((0.0 - m) / self.sigma) for m in mus])
        hi = np.array([_STD_NORMAL.cdf((1.0 - m) / self.sigma) for m in mus])
        self.lo, self.mass = lo, np.maximum(hi - lo, 1e-300)

    def sample(self, rng: np.random.Generator) -> float:
        k = int(rng.choice(len(self.weights), p=self.weights))
        u = float(rng.random())
        if k == len(self.mus):
            return u
        p = self.lo[k] + u * self.mass[k]
        p = min(max(p, 1e-15), 1.0 - 1e-15)
        x = self.mus[k] + self.sigma * _STD_NORMAL.inv_cdf(p)
        return float(min(max(x, 0.0), 1.0))

    def log_pdf(self, x: float) -> float:
        if len(self.mus):
            z = (x - self.mus) / self.sigma
            comp = np.exp(-0.5 * z * z) / (self.sigma * math.sqrt(2 * math.pi) * self.mass)
        else:
            comp = np.empty(0)
        dens = float(np.dot(self.weights[:-1], comp) + self.weights[-1] * 1.0)
        return math.log(max(dens, 1e-300))


def _density(dim: Dimension, observed: Sequence[Any]):
    if isinstance(dim, Categorical):
        return _CategoricalDensity(dim, observed)
    return _TruncatedParzen(observed)


# -- suggestion --------------------------------------------------------------------


def tpe_suggest(
    history: Sequence[tuple[Mapping[str, Any], float]],
    space: Sequence[Dimension],
    rng: np.random.Generator,
    gamma: float = DEFAULT_GAMMA,
    n_candidates: int = DEFAULT_CANDIDATES,
    n_startup: int = DEFAULT_STARTUP,
) -> dict[str, Any]:
    """Propose the next point given ``(params, score)`` history; lower scores are better."""
    if not space:
        raise ValueError("empty search space")
    if not 0.0 < gamma < 1.0:
        raise ValueError("gamma must lie in (0, 1)")
    if n_candidates < 1:
        raise ValueError("n_candidates must be >= 1")
    if len(history) < max(n_startup, 2):
        return sample_uniform(space, rng)

    scores = np.array([s for _, s in history], dtype=np.float64)
    order = np.argsort(scores, kind="stable")
    n_good = max(1, int(math.ceil(gamma * len(history))))
    good = [history[i][0] for i in order[:n_good]]
    bad = [history[i][0] for i in order[n_good:]]

    l_dens = {d.name: _density(d, [x[d.name] for x in good]) for d in space}
    g_dens = {d.name: _density(d, [x[d.name] for x in bad]) for d in space}

    best, best_score = None, -math.inf
    for _ in range(n_candidates):
        cand = {d.name: l_dens[d.name].sample(rng) for d in space}
        ratio = sum(l_dens[d.name].log_pdf(cand[d.name]) - g_dens[d.name].log_pdf(cand[d.name]) for d in space)
        if ratio > best_score:
            best, best_score = cand, ratio
    return best


def minimize(objective, space: Sequence[Dimension], n_trials: int, seed: int, **tpe_kwargs
             ) -> list[tuple[dict[str, Any], float]]:
    """Sequential TPE loop; returns the full history in evaluation order."""
    rng = np.random.default_rng(seed)
    history: list[tuple[dict[str, Any], float]] = []
    for _ in range(n_trials):
        x = tpe_suggest(history, space, rng, **tpe_kwargs)
        history.append((x, float(objective(x))))
    return history


def random_search(objective, space: Sequence[Dimension], n_trials: int, seed: int
                  ) -> list[tuple[dict[str, Any], float]]:
    rng = np.random.default_rng(seed)
    history = []
    for _ in range(n_trials):
        x = sample_uniform(space, rng)
        history.append((x, float(objective(x))))
    return history
