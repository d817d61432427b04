"""Nearest-prototype classification under cosine similarity."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .core import PrototypeRegistry, as_feature

THREADS_ENV = "PROTO_CALIB_THREADS"
_CHUNK = 512


def worker_count(threads: int | None = None) -> int:
    """Resolve the worker cap: explicit value, else the env var, else CPU count."""
    if threads is None:
        raw = os.environ.get(THREADS_ENV, "").strip()
        threads = int(raw) if raw else 0
    if threads < 0:
        raise ValueError(f"thread count must be >= 0, got {threads}")
    return threads or (os.cpu_count() or 1)


def _unit_prototypes(registry: PrototypeRegistry) -> np.ndarray:
    if len(registry) == 0:
        raise ValueError("registry is empty")
    norms = np.linalg.norm(registry.vectors, axis=1)
    zero = np.flatnonzero(norms == 0)
    if zero.size:
        raise ValueError(f"zero prototype for class {registry.class_ids[zero[0]]}")
    return registry.vectors / norms[:, None]


def _scores(features: np.ndarray, unit_protos: np.ndarray, offset: int = 0) -> np.ndarray:
    norms = np.linalg.norm(features, axis=1)
    zero = np.flatnonzero(norms == 0)
    if zero.size:
        raise ValueError(f"zero feature at index {offset + int(zero[0])}")
    # einsum (not BLAS matmul) so each score is computed by the same loop
    # regardless of batch size: batch and single-sample paths agree bitwise.
    return np.einsum("nd,kd->nk", features / norms[:, None], unit_protos)


def logits(feature, registry: PrototypeRegistry) -> dict[int, float]:
    """Cosine similarity of ``feature`` to every prototype, keyed by class id."""
    feat = as_feature(feature, registry.dim if len(registry) else None)
    scores = _scores(feat[None, :], _unit_prototypes(registry))[0]
    return dict(zip(registry.class_ids, scores.tolist()))


def predict(feature, registry: PrototypeRegistry) -> int:
    feat = as_feature(feature, registry.dim if len(registry) else None)
    scores = _scores(feat[None, :], _unit_prototypes(registry))[0]
    # argmax returns the first maximum; ids are sorted, so ties go to the lowest id
    return registry.class_ids[int(np.argmax(scores))]


def predict_batch(features, registry: PrototypeRegistry, threads: int | None = None) -> list[int]:
    """Predict every row of ``features``; output order matches input order."""
    feats = np.asarray(features, dtype=np.float64)
    if feats.size == 0:
        return []
    if feats.ndim != 2:
        raise ValueError(f"features must be 2-D, got shape {feats.shape}")
    if len(registry) and feats.shape[1] != registry.dim:
        raise ValueError(f"dimension mismatch: expected {registry.dim}, got {feats.shape[1]}")
    bad = np.flatnonzero(~np.all(np.isfinite(feats), axis=1))
    if bad.size:
        raise ValueError(f"non-finite feature at index {int(bad[0])}")
    unit = _unit_prototypes(registry)
    ids = np.asarray(registry.class_ids, dtype=np.int64)

    def run(start: int) -> np.ndarray:
        return ids[np.argmax(_scores(feats[start:start + _CHUNK], unit, start), axis=1)]

    starts = range(0, feats.shape[0], _CHUNK)
    n_workers = min(worker_count(threads), len(starts))
    if n_workers <= 1:
        parts = [run(s) for s in starts]
    else:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            # map yields in submission order; an exception surfaces for the
            # earliest failing chunk, which holds the first failing index.
            parts = list(pool.map(run, starts))
    return np.concatenate(parts).tolist()
