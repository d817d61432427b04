"""Multi-session FSCIL evaluation and episodic FSL evaluation."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import classify
from .calib import CalibParams, calibrate_registry
from .core import TRAIN, Dataset, PrototypeRegistry, Provenance, compute_prototype, empirical_prototypes
from .metrics import MetricBundle, confidence_interval, session_metrics

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class SessionResult:
    session: int
    predictions: np.ndarray
    true_labels: np.ndarray
    test_indices: np.ndarray
    registry: PrototypeRegistry
    metrics: MetricBundle


def run_fscil(
    dataset: Dataset,
    params: CalibParams,
    threads: int | None = None,
    m_new_similar: int = 10,
    base_fraction: float = 0.2,
) -> list[SessionResult]:
    """Evaluate every session in order, growing the prototype registry as classes arrive.

    New-class prototypes are always calibrated against the session-0
    empirical base prototypes, never against earlier calibrated ones.  TBR/TNR
    similar sets come from the empirical prototypes of all seen classes, so
    the similarity reference does not depend on the strategy.
    """
    layout = dataset.layout
    base_ids = sorted(layout.base_classes)
    if params.strategy == "simteen" and params.simteen_k > len(base_ids):
        raise ValueError(f"simteen_k={params.simteen_k} exceeds {len(base_ids)} base classes")

    running = empirical_prototypes(dataset, 0)
    empirical = running
    results = []
    for session in range(layout.n_sessions):
        if session > 0:
            fresh = empirical_prototypes(dataset, session)
            empirical = empirical.merge(fresh)
            running = calibrate_registry(
                running.merge(fresh), base_ids, layout.label_spaces[session], params
            )
        test_idx = np.flatnonzero(dataset.test_mask(session))
        if test_idx.size == 0:
            raise ValueError(f"session {session} has no test records")
        labels = dataset.labels[test_idx]
        preds = np.asarray(
            classify.predict_batch(dataset.features[test_idx], running, threads), dtype=np.int64
        )
        metrics = session_metrics(preds, labels, base_ids, empirical, m_new_similar, base_fraction)
        log.info("session %d: %d test samples, avg acc %.2f", session, labels.size, metrics.avg_acc)
        results.append(SessionResult(session, preds, labels, test_idx, running, metrics))
    return results


@dataclass(frozen=True)
class EpisodeSpec:
    ways: int = 5
    shots: int = 5
    queries: int = 15
    episodes: int = 600
    seed: int = 0

    def __post_init__(self):
        if self.ways < 2:
            raise ValueError("ways must be >= 2")
        if self.shots < 1 or self.queries < 1 or self.episodes < 1:
            raise ValueError("shots, queries and episodes must be >= 1")


@dataclass(frozen=True, eq=False)
class Episode:
    """Support/query row indices into the dataset plus the sampled classes."""

    class_ids: tuple[int, ...]
    support: np.ndarray
    query: np.ndarray

    def __eq__(self, other):
        if not isinstance(other, Episode):
            return NotImplemented
        return (
            self.class_ids == other.class_ids
            and np.array_equal(self.support, other.support)
            and np.array_equal(self.query, other.query)
        )


def novel_pool(dataset: Dataset) -> dict[int, np.ndarray]:
    """Row indices (train and test) of every non-base class, keyed by class id."""
    base = np.fromiter(dataset.layout.base_classes, dtype=np.int64)
    novel = np.flatnonzero(~np.isin(dataset.labels, base))
    pool: dict[int, list[int]] = {}
    for i in novel.tolist():
        pool.setdefault(int(dataset.labels[i]), []).append(i)
    return {c: np.asarray(pool[c], dtype=np.int64) for c in sorted(pool)}


def episode_rng(seed: int, episode_index: int) -> np.random.Generator:
    # SeedSequence hashes the (seed, index) pair; masking keeps negative seeds valid.
    return np.random.default_rng([seed & 0xFFFFFFFFFFFFFFFF, episode_index])


def sample_episode(
    dataset: Dataset, spec: EpisodeSpec, episode_index: int,
    pool: dict[int, np.ndarray] | None = None,
) -> Episode:
    pool = novel_pool(dataset) if pool is None else pool
    need = spec.shots + spec.queries
    eligible = [c for c, rows in pool.items() if rows.size >= need]
    if len(eligible) < spec.ways:
        raise ValueError(
            f"novel pool has {len(eligible)} classes with >= {need} records, "
            f"{spec.ways} required (short by {spec.ways - len(eligible)})"
        )
    rng = episode_rng(spec.seed, episode_index)
    classes = rng.choice(np.asarray(eligible), size=spec.ways, replace=False)
    support, query = [], []
    for c in classes.tolist():
        rows = rng.choice(pool[c], size=need, replace=False)
        support.append(rows[: spec.shots])
        query.append(rows[spec.shots:])
    return Episode(
        tuple(int(c) for c in classes), np.concatenate(support), np.concatenate(query)
    )


def base_reference(dataset: Dataset) -> PrototypeRegistry:
    """Empirical prototypes of the base classes from their train records."""
    return empirical_prototypes(dataset, 0)


@dataclass(frozen=True)
class FSLResult:
    accuracies: tuple[float, ...]
    mean: float
    half_width: float | None


def run_episode(
    dataset: Dataset, episode: Episode, params: CalibParams, base: PrototypeRegistry
) -> float:
    """Calibrate the episode's support prototypes and return query accuracy in [0, 1]."""
    feats, labels = dataset.features, dataset.labels
    support = PrototypeRegistry.from_entries(
        {
            c: (compute_prototype(feats[episode.support[labels[episode.support] == c]]),
                Provenance.EMPIRICAL)
            for c in episode.class_ids
        },
        dim=dataset.layout.dim,
    )
    calibrated = calibrate_registry(
        base.merge(support), base.class_ids, episode.class_ids, params
    ).subset(episode.class_ids)
    preds = np.asarray(classify.predict_batch(feats[episode.query], calibrated, threads=1))
    return float(np.mean(preds == labels[episode.query]))


def run_fsl(
    dataset: Dataset, spec: EpisodeSpec, params: CalibParams, threads: int | None = None
) -> FSLResult:
    if not any(dataset.splits[dataset.sessions == 0] == TRAIN):
        raise ValueError("FSL evaluation needs base-session train records")
    base = base_reference(dataset)
    if params.strategy == "simteen" and params.simteen_k > len(base):
        raise ValueError(f"simteen_k={params.simteen_k} exceeds {len(base)} base classes")
    pool = novel_pool(dataset)

    def one(index: int) -> float:
        return run_episode(dataset, sample_episode(dataset, spec, index, pool), params, base)

    n_workers = min(classify.worker_count(threads), spec.episodes)
    if n_workers <= 1:
        accs = [one(i) for i in range(spec.episodes)]
    else:
        with ThreadPoolExecutor(max_workers=n_workers) as executor:
            accs = list(executor.map(one, range(spec.episodes)))
    if len(accs) >= 2:
        mean, half = confidence_interval(accs)
    else:
        mean, half = accs[0], None
    return FSLResult(tuple(accs), mean, half)
