"""Accuracy decompositions and the base/new diagnostic measures.

All rates are percentages.  A rate whose denominator is empty is ``None``
(reported as NA), never 0 or 100.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np

from .calib import most_similar
from .core import PrototypeRegistry

CATEGORIES = ("UC", "WR", "RW", "WW")


def _as_ids(values, name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=np.int64)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be a 1-D sequence of class ids")
    return arr


def _pair(preds, labels) -> tuple[np.ndarray, np.ndarray]:
    p, y = _as_ids(preds, "preds"), _as_ids(labels, "labels")
    if p.shape != y.shape:
        raise ValueError(f"length mismatch: {p.shape[0]} predictions vs {y.shape[0]} labels")
    return p, y


def _is_base(ids: np.ndarray, base_ids: Iterable[int]) -> np.ndarray:
    return np.isin(ids, np.fromiter(set(base_ids), dtype=np.int64))


def _pct(num: int, den: int) -> float | None:
    return 100.0 * num / den if den else None


def accuracy_decomposition(preds, labels, base_ids) -> tuple[float, float | None, float | None]:
    """(avg, base, new) accuracy, grouping samples by their true label."""
    p, y = _pair(preds, labels)
    if y.size == 0:
        raise ValueError("accuracy of an empty sample set is undefined")
    correct = p == y
    base = _is_base(y, base_ids)
    return (
        _pct(int(correct.sum()), y.size),
        _pct(int(correct[base].sum()), int(base.sum())),
        _pct(int(correct[~base].sum()), int((~base).sum())),
    )


def harmonic_mean(base_acc: float, new_acc: float) -> float:
    if base_acc < 0 or new_acc < 0:
        raise ValueError("accuracies must be non-negative")
    if base_acc == 0 or new_acc == 0:
        return 0.0
    return 2.0 * base_acc * new_acc / (base_acc + new_acc)


def performance_drop(acc_sequence: Sequence[float]) -> float:
    """First-session accuracy minus last-session accuracy."""
    if len(acc_sequence) == 0:
        raise ValueError("performance drop needs at least one session")
    return float(acc_sequence[0]) - float(acc_sequence[-1])


def confusion_counts(preds, labels, base_ids) -> dict[str, int]:
    """Base-vs-new binary confusion counts with base as the positive class."""
    p, y = _pair(preds, labels)
    true_base, pred_base = _is_base(y, base_ids), _is_base(p, base_ids)
    return {
        "tp": int(np.sum(true_base & pred_base)),
        "fn": int(np.sum(true_base & ~pred_base)),
        "fp": int(np.sum(~true_base & pred_base)),
        "tn": int(np.sum(~true_base & ~pred_base)),
    }


def fnr_fpr(preds, labels, base_ids) -> tuple[float | None, float | None]:
    c = confusion_counts(preds, labels, base_ids)
    return _pct(c["fn"], c["tp"] + c["fn"]), _pct(c["fp"], c["fp"] + c["tn"])


def similar_set_size(fraction: float, n_classes: int) -> int:
    """floor(fraction * n_classes), evaluated exactly on the decimal fraction."""
    return math.floor(Fraction(str(fraction)) * n_classes)


def similar_sets(
    registry: PrototypeRegistry, sources: Sequence[int], targets: Sequence[int], size: int
) -> dict[int, frozenset[int]]:
    """For each source class, the ``size`` target classes with most similar prototypes."""
    targets = sorted(targets)
    size = min(size, len(targets))
    if size <= 0 or not targets:
        return {s: frozenset() for s in sources}
    target_protos = np.stack([registry[t] for t in targets])
    return {
        s: frozenset(targets[i] for i in most_similar(registry[s], target_protos, size, targets))
        for s in sources
    }


def tbr_tnr(
    preds, labels, registry: PrototypeRegistry, base_ids,
    m_new_similar: int = 10, base_fraction: float = 0.2,
) -> tuple[float | None, float | None]:
    """Share of misclassified new (base) samples landing in their most similar base (new) classes.

    Each new class looks at its ``m_new_similar`` most similar base classes;
    each base class looks at its floor(``base_fraction`` x #new classes) most
    similar new classes.  Similar-set sizes are clamped to what is available.
    """
    if m_new_similar < 1:
        raise ValueError("m_new_similar must be >= 1")
    if not 0.0 < base_fraction <= 1.0:
        raise ValueError("base_fraction must lie in (0, 1]")
    p, y = _pair(preds, labels)
    base_set = set(base_ids)
    missing = set(y.tolist()) - set(registry.class_ids)
    if missing:
        raise KeyError(f"registry lacks classes {sorted(missing)}")
    base_cls = [c for c in registry.class_ids if c in base_set]
    new_cls = [c for c in registry.class_ids if c not in base_set]

    near_base = similar_sets(registry, new_cls, base_cls, m_new_similar)
    near_new = similar_sets(registry, base_cls, new_cls, similar_set_size(base_fraction, len(new_cls)))

    wrong = p != y
    true_base = _is_base(y, base_set)
    mis_new = np.flatnonzero(wrong & ~true_base)
    mis_base = np.flatnonzero(wrong & true_base)
    hits_new = sum(int(p[i]) in near_base[int(y[i])] for i in mis_new)
    hits_base = sum(int(p[i]) in near_new[int(y[i])] for i in mis_base)
    return _pct(hits_new, mis_new.size), _pct(hits_base, mis_base.size)


@dataclass(frozen=True)
class CategoryStats:
    count: int
    n_base: int
    n_new: int

    @property
    def base_pct(self) -> float | None:
        return _pct(self.n_base, self.count)

    @property
    def new_pct(self) -> float | None:
        return _pct(self.n_new, self.count)


@dataclass(frozen=True)
class ChangeAnalysis:
    """Unchanged / wrong->right / right->wrong / wrong->other-wrong breakdown."""

    UC: CategoryStats
    WR: CategoryStats
    RW: CategoryStats
    WW: CategoryStats

    @property
    def total(self) -> int:
        return sum(getattr(self, c).count for c in CATEGORIES)

    def collapsed(self) -> "ChangeAnalysis":
        """Fold WW into UC: the sample was wrong before and after."""
        uc, ww = self.UC, self.WW
        merged = CategoryStats(uc.count + ww.count, uc.n_base + ww.n_base, uc.n_new + ww.n_new)
        return ChangeAnalysis(merged, self.WR, self.RW, CategoryStats(0, 0, 0))

    def rows(self, collapse_ww: bool = False) -> list[dict]:
        src = self.collapsed() if collapse_ww else self
        cats = CATEGORIES[:3] if collapse_ww else CATEGORIES
        return [
            {
                "category": c,
                "count": getattr(src, c).count,
                "base_pct": getattr(src, c).base_pct,
                "new_pct": getattr(src, c).new_pct,
            }
            for c in cats
        ]


def change_category(before: int, after: int, label: int) -> str:
    if before == after:
        return "UC"
    if after == label:
        return "WR"
    if before == label:
        return "RW"
    return "WW"


def prediction_change(preds_before, preds_after, labels, base_ids) -> ChangeAnalysis:
    b, y = _pair(preds_before, labels)
    a, _ = _pair(preds_after, labels)
    true_base = _is_base(y, base_ids)
    changed = a != b
    masks = {
        "UC": ~changed,
        "WR": changed & (a == y),
        "RW": changed & (b == y),
        "WW": changed & (a != y) & (b != y),
    }
    return ChangeAnalysis(**{
        c: CategoryStats(int(m.sum()), int((m & true_base).sum()), int((m & ~true_base).sum()))
        for c, m in masks.items()
    })


def confidence_interval(values: Sequence[float]) -> tuple[float, float]:
    """Mean and 95% half-width (1.96 x standard error, sample stdev)."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size < 2:
        raise ValueError("confidence interval needs at least two values")
    mean = math.fsum(arr.tolist()) / arr.size
    return mean, 1.96 * float(np.std(arr, ddof=1)) / math.sqrt(arr.size)


@dataclass(frozen=True)
class MetricBundle:
    avg_acc: float
    base_acc: float | None
    new_acc: float | None
    hmean: float | None = None
    fnr: float | None = None
    fpr: float | None = None
    tbr: float | None = None
    tnr: float | None = None

    def as_dict(self) -> dict:
        return asdict(self)


def session_metrics(
    preds, labels, base_ids, similarity_registry: PrototypeRegistry | None = None,
    m_new_similar: int = 10, base_fraction: float = 0.2,
) -> MetricBundle:
    """Full metric suite for one session.

    FNR/FPR are reported whenever their denominators are non-empty; HMean and
    TBR/TNR need new-class samples. ``similarity_registry`` supplies the
    prototypes from which TBR/TNR similar sets are built; TBR/TNR are skipped
    when it is omitted.
    """
    avg, base, new = accuracy_decomposition(preds, labels, base_ids)
    fnr, fpr = fnr_fpr(preds, labels, base_ids)
    if new is None:
        return MetricBundle(avg, base, None, fnr=fnr, fpr=fpr)
    hmean = harmonic_mean(base, new) if base is not None else None
    tbr = tnr = None
    if similarity_registry is not None:
        tbr, tnr = tbr_tnr(preds, labels, similarity_registry, base_ids, m_new_similar, base_fraction)
    return MetricBundle(avg, base, new, hmean, fnr, fpr, tbr, tnr)
