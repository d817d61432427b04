"""Synthetic Gaussian embeddings whose new classes are mixtures of base classes.

Base class means are drawn i.i.d. Gaussian and rejection-checked for a minimum
pairwise distance.  Each new class mean is a positively weighted convex
combination of ``mixture_support`` base means plus an isotropic perturbation,
so a base-informed prototype estimate has a known target.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import TEST, TRAIN, Dataset, PrototypeRegistry

MAX_SEPARATION_TRIES = 1000


@dataclass(frozen=True)
class SynthSpec:
    base_classes: int = 10
    new_classes: int = 5
    sessions_after_base: int = 1
    dim: int = 16
    base_train_per_class: int = 200
    shots: int = 5
    test_per_class: int = 50
    mixture_support: int = 2
    mixture_noise: float = 0.2
    within_class_sigma: float = 1.0
    base_mean_scale: float = 2.0
    min_separation: float = 4.0
    seed: int = 0

    def __post_init__(self):
        counts = {
            "base_classes": self.base_classes,
            "new_classes": self.new_classes,
            "sessions_after_base": self.sessions_after_base,
            "dim": self.dim,
            "base_train_per_class": self.base_train_per_class,
            "shots": self.shots,
            "test_per_class": self.test_per_class,
            "mixture_support": self.mixture_support,
        }
        for name, value in counts.items():
            if value < 1:
                raise ValueError(f"{name} must be >= 1, got {value}")
        if self.new_classes % self.sessions_after_base:
            raise ValueError(
                f"new_classes={self.new_classes} is not divisible by "
                f"sessions_after_base={self.sessions_after_base}"
            )
        if self.mixture_support > self.base_classes:
            raise ValueError("mixture_support cannot exceed base_classes")
        if not self.within_class_sigma > 0:
            raise ValueError("within_class_sigma must be positive")
        if self.mixture_noise < 0 or self.base_mean_scale <= 0 or self.min_separation < 0:
            raise ValueError("mixture_noise, base_mean_scale and min_separation must be non-negative")

    @property
    def n_ways(self) -> int:
        return self.new_classes // self.sessions_after_base


@dataclass(frozen=True, eq=False)
class GroundTruth:
    means: dict[int, np.ndarray]
    parents: dict[int, tuple[int, ...]] = field(default_factory=dict)
    weights: dict[int, tuple[float, ...]] = field(default_factory=dict)

    def to_json(self) -> str:
        payload = {
            "means": {str(c): m.tolist() for c, m in sorted(self.means.items())},
            "mixtures": {
                str(c): {"parents": list(self.parents[c]), "weights": list(self.weights[c])}
                for c in sorted(self.parents)
            },
        }
        return json.dumps(payload, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "GroundTruth":
        payload = json.loads(text)
        mixtures = payload.get("mixtures", {})
        return cls(
            means={int(c): np.asarray(m, dtype=np.float64) for c, m in payload["means"].items()},
            parents={int(c): tuple(v["parents"]) for c, v in mixtures.items()},
            weights={int(c): tuple(v["weights"]) for c, v in mixtures.items()},
        )


def _min_pairwise_distance(points: np.ndarray) -> float:
    diff = points[:, None, :] - points[None, :, :]
    dist = np.sqrt((diff ** 2).sum(-1))
    dist[np.diag_indices_from(dist)] = np.inf
    return float(dist.min())


def _base_means(spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    floor = spec.min_separation * spec.within_class_sigma
    for _ in range(MAX_SEPARATION_TRIES):
        means = rng.normal(0.0, spec.base_mean_scale, size=(spec.base_classes, spec.dim))
        if spec.base_classes == 1 or _min_pairwise_distance(means) >= floor:
            return means
    raise ValueError(
        f"could not place {spec.base_classes} base means {floor:g} apart after "
        f"{MAX_SEPARATION_TRIES} draws; use a larger dim or base_mean_scale, or a smaller sigma"
    )


def gen_synthetic(spec: SynthSpec) -> tuple[Dataset, GroundTruth]:
    rng = np.random.default_rng(spec.seed & 0xFFFFFFFFFFFFFFFF)
    sigma = spec.within_class_sigma
    base_means = _base_means(spec, rng)

    means = {b: base_means[b] for b in range(spec.base_classes)}
    parents, weights = {}, {}
    for j in range(spec.new_classes):
        cid = spec.base_classes + j
        picked = np.sort(rng.choice(spec.base_classes, size=spec.mixture_support, replace=False))
        w = rng.dirichlet(np.ones(spec.mixture_support))
        mean = w @ base_means[picked]
        if spec.mixture_noise > 0:
            mean = mean + rng.normal(0.0, spec.mixture_noise, size=spec.dim)
        means[cid] = mean
        parents[cid] = tuple(int(p) for p in picked)
        weights[cid] = tuple(float(x) for x in w)

    splits, sessions, labels, rows = [], [], [], []

    def emit(split: str, session: int, cid: int, n: int) -> None:
        rows.append(means[cid] + rng.normal(0.0, sigma, size=(n, spec.dim)))
        splits.extend([split] * n)
        sessions.extend([session] * n)
        labels.extend([cid] * n)

    for cid in range(spec.base_classes):
        emit(TRAIN, 0, cid, spec.base_train_per_class)
    for cid in range(spec.base_classes):
        emit(TEST, 0, cid, spec.test_per_class)
    for s in range(1, spec.sessions_after_base + 1):
        first = spec.base_classes + (s - 1) * spec.n_ways
        session_classes = range(first, first + spec.n_ways)
        for cid in session_classes:
            emit(TRAIN, s, cid, spec.shots)
        for cid in session_classes:
            emit(TEST, s, cid, spec.test_per_class)

    dataset = Dataset.from_arrays(splits, sessions, labels, np.concatenate(rows))
    return dataset, GroundTruth(means, parents, weights)


def write_ground_truth(truth: GroundTruth, path) -> None:
    Path(path).write_text(truth.to_json(), encoding="utf-8")


def load_ground_truth(path) -> GroundTruth:
    return GroundTruth.from_json(Path(path).read_text(encoding="utf-8"))


def prototype_error(registry: PrototypeRegistry, truth: GroundTruth) -> dict[int, float]:
    """Euclidean distance of every registry prototype to its true class mean."""
    unknown = [c for c in registry.class_ids if c not in truth.means]
    if unknown:
        raise KeyError(f"no ground truth for classes {unknown}")
    return {
        c: float(np.linalg.norm(registry[c] - truth.means[c])) for c in registry.class_ids
    }
