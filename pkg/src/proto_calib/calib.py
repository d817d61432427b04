"""Training-free calibration of few-shot prototypes against base prototypes.

A new-class prototype is fused with a similarity-weighted combination of the
base prototypes::

    calibrated = alpha * new + (1 - alpha) * sum_b softmax(tau * cos(base_b, new))_b * base_b

``simteen`` replaces the softmax weighting by a plain sum (or mean) of the
``k`` most cosine-similar base prototypes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .core import PrototypeRegistry, Provenance, as_feature

STRATEGIES = ("protonet", "teen", "simteen")


@dataclass(frozen=True)
class CalibParams:
    strategy: str = "teen"
    alpha: float = 0.5
    tau: float = 16.0
    simteen_k: int = 1
    simteen_mean: bool = False

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; choose from {STRATEGIES}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not (self.tau > 0 and np.isfinite(self.tau)):
            raise ValueError(f"tau must be a positive finite number, got {self.tau}")
        if self.simteen_k < 1:
            raise ValueError(f"simteen_k must be >= 1, got {self.simteen_k}")


def _unit_rows(matrix: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(matrix, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("undefined cosine for zero vector")
    return matrix / norms


def _base_matrix(base_protos, dim: int) -> np.ndarray:
    base = np.asarray(base_protos, dtype=np.float64)
    if base.ndim != 2 or base.shape[0] == 0:
        raise ValueError("at least one base prototype is required")
    if base.shape[1] != dim:
        raise ValueError(f"dimension mismatch: base prototypes have {base.shape[1]}, new has {dim}")
    return base


def cosine_to_bases(new_proto, base_protos) -> np.ndarray:
    """Cosine similarity between ``new_proto`` and every row of ``base_protos``."""
    new = as_feature(new_proto)
    base = _base_matrix(base_protos, new.shape[0])
    return _unit_rows(base) @ _unit_rows(new)


def scaled_cosine(a, b, tau: float) -> float:
    a = as_feature(a)
    b = as_feature(b, a.shape[0])
    if tau <= 0:
        raise ValueError("tau must be positive")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("undefined cosine for zero vector")
    cos = float(np.clip(a @ b / (na * nb), -1.0, 1.0))
    return cos * tau


def softmax_weights(new_proto, base_protos, tau: float) -> np.ndarray:
    """Softmax over base classes of the tau-scaled cosine similarities."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    scores = tau * np.clip(cosine_to_bases(new_proto, base_protos), -1.0, 1.0)
    scores -= scores.max()
    weights = np.exp(scores)
    return weights / weights.sum()


def calibration_item(new_proto, base_protos, tau: float) -> np.ndarray:
    weights = softmax_weights(new_proto, base_protos, tau)
    return weights @ np.asarray(base_protos, dtype=np.float64)


def calibrate_teen(new_proto, base_protos, alpha: float, tau: float) -> np.ndarray:
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    new = as_feature(new_proto)
    delta = calibration_item(new, base_protos, tau)
    if alpha == 1.0:
        return new.copy()
    if alpha == 0.0:
        return delta
    return alpha * new + (1.0 - alpha) * delta


def most_similar(reference, candidates, k: int, candidate_ids: Sequence[int] | None = None) -> list[int]:
    """Row indices of the ``k`` candidates most cosine-similar to ``reference``.

    Ties go to the lower class id (``candidate_ids`` if given, else row index).
    """
    sims = cosine_to_bases(reference, candidates)
    ids = np.arange(sims.shape[0]) if candidate_ids is None else np.asarray(candidate_ids)
    order = np.lexsort((ids, -sims))
    return order[:k].tolist()


def calibrate_simteen(
    new_proto, base_protos, alpha: float, k: int, mean: bool = False,
    base_ids: Sequence[int] | None = None,
) -> np.ndarray:
    """Fuse with the unweighted sum (or mean) of the ``k`` nearest base prototypes."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    new = as_feature(new_proto)
    base = _base_matrix(base_protos, new.shape[0])
    if not 1 <= k <= base.shape[0]:
        raise ValueError(f"k={k} must lie in [1, {base.shape[0]}] (number of base classes)")
    picked = base[most_similar(new, base, k, base_ids)]
    delta = picked.mean(axis=0) if mean else picked.sum(axis=0)
    if alpha == 1.0:
        return new.copy()
    return alpha * new + (1.0 - alpha) * delta


def calibrate_registry(
    registry: PrototypeRegistry,
    base_ids: Iterable[int],
    new_ids: Iterable[int],
    params: CalibParams,
) -> PrototypeRegistry:
    """Calibrate the ``new_ids`` entries against the ``base_ids`` entries.

    Base rows are copied untouched; with ``protonet`` the input is returned as is.
    """
    base_ids = sorted(set(base_ids))
    new_ids = sorted(set(new_ids))
    for cid in (*base_ids, *new_ids):
        if cid not in registry:
            raise KeyError(f"unknown class id {cid}")
    if set(base_ids) & set(new_ids):
        raise ValueError("base and new class sets must be disjoint")
    if params.strategy == "protonet" or not new_ids:
        return registry
    if not base_ids:
        raise ValueError("calibration needs at least one base class")

    base = np.stack([registry[c] for c in base_ids])
    updates = {}
    for cid in new_ids:
        if params.strategy == "teen":
            updates[cid] = calibrate_teen(registry[cid], base, params.alpha, params.tau)
        else:
            updates[cid] = calibrate_simteen(
                registry[cid], base, params.alpha, params.simteen_k,
                mean=params.simteen_mean, base_ids=base_ids,
            )
    return registry.replace(updates, Provenance.CALIBRATED)
