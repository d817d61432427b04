"""Data model, embedding CSV ingestion, layout validation and empirical prototypes.

Features are held column-wise in a :class:`Dataset` (one float64 matrix plus
split/session/label arrays) so that per-class means and batch classification
stay vectorised.  Every array handed out by these containers is read-only.
"""

from __future__ import annotations

import csv
import enum
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

TRAIN = "train"
TEST = "test"
SPLITS = (TRAIN, TEST)
META_COLUMNS = ("split", "session", "label")


class DataError(ValueError):
    """Input data is malformed or violates the session protocol."""


class ParseError(DataError):
    pass


class LayoutError(DataError):
    pass


class Provenance(str, enum.Enum):
    EMPIRICAL = "empirical"
    CALIBRATED = "calibrated"


def _readonly(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


def as_feature(values, dim: int | None = None) -> np.ndarray:
    """Coerce ``values`` into a finite 1-D float64 vector."""
    vec = np.asarray(values, dtype=np.float64)
    if vec.ndim != 1 or vec.size == 0:
        raise ValueError(f"feature must be a non-empty 1-D vector, got shape {vec.shape}")
    if dim is not None and vec.shape[0] != dim:
        raise ValueError(f"dimension mismatch: expected {dim}, got {vec.shape[0]}")
    if not np.all(np.isfinite(vec)):
        raise ValueError("feature contains non-finite values")
    return vec


@dataclass(frozen=True, eq=False)
class EmbeddingRecord:
    split: str
    session: int
    label: int
    feature: np.ndarray

    def __eq__(self, other):
        if not isinstance(other, EmbeddingRecord):
            return NotImplemented
        return (
            (self.split, self.session, self.label) == (other.split, other.session, other.label)
            and np.array_equal(self.feature, other.feature)
        )


@dataclass(frozen=True)
class SessionLayout:
    """Session structure: disjoint label spaces plus per-session way/shot counts.

    ``shots`` and ``ways`` are indexed by incremental session, so ``shots[0]``
    belongs to session 1.
    """

    n_sessions: int
    dim: int
    label_spaces: tuple[frozenset[int], ...]
    shots: tuple[int, ...]
    ways: tuple[int, ...]

    def __post_init__(self):
        if self.n_sessions < 1:
            raise LayoutError("layout needs at least one session")
        if self.dim < 1:
            raise LayoutError("feature dimension must be positive")
        if len(self.label_spaces) != self.n_sessions:
            raise LayoutError(
                f"{len(self.label_spaces)} label spaces declared for {self.n_sessions} sessions"
            )
        if len(self.shots) != self.n_sessions - 1 or len(self.ways) != self.n_sessions - 1:
            raise LayoutError("shots/ways must have one entry per incremental session")
        seen: dict[int, int] = {}
        for session, space in enumerate(self.label_spaces):
            if not space:
                raise LayoutError(f"session {session} has an empty label space")
            for label in sorted(space):
                if label in seen:
                    raise LayoutError(
                        f"label space overlap: class {label} appears in sessions "
                        f"{seen[label]} and {session}"
                    )
                seen[label] = session
        for i, (n_way, k_shot) in enumerate(zip(self.ways, self.shots), start=1):
            if n_way != len(self.label_spaces[i]):
                raise LayoutError(
                    f"session {i} declares {n_way} ways but has {len(self.label_spaces[i])} classes"
                )
            if k_shot < 1:
                raise LayoutError(f"session {i} declares {k_shot} shots")

    @property
    def base_classes(self) -> frozenset[int]:
        return self.label_spaces[0]

    def session_of(self, label: int) -> int:
        for session, space in enumerate(self.label_spaces):
            if label in space:
                return session
        raise KeyError(label)

    def cumulative_classes(self, session: int) -> frozenset[int]:
        """Test label space of ``session``: the union of all label spaces up to it."""
        if not 0 <= session < self.n_sessions:
            raise ValueError(f"session {session} out of range [0, {self.n_sessions})")
        return frozenset().union(*self.label_spaces[: session + 1])


def infer_layout(
    splits: np.ndarray, sessions: np.ndarray, labels: np.ndarray, dim: int
) -> SessionLayout:
    """Derive the session layout from record metadata, raising on any violation."""
    if sessions.size == 0:
        raise LayoutError("dataset has no records")
    n_sessions = int(sessions.max()) + 1
    present = set(np.unique(sessions).tolist())
    for session in range(n_sessions):
        if session not in present:
            raise LayoutError(f"session {session} has no records")

    owner: dict[int, int] = {}
    for session, label in sorted(set(zip(sessions.tolist(), labels.tolist()))):
        if label in owner and owner[label] != session:
            raise LayoutError(
                f"label space overlap: class {label} appears in sessions "
                f"{owner[label]} and {session}"
            )
        owner[label] = session

    spaces = [set() for _ in range(n_sessions)]
    for label, session in owner.items():
        spaces[session].add(label)

    is_train = splits == TRAIN
    train_counts = Counter(labels[is_train].tolist())
    for label in sorted(spaces[0]):
        if train_counts[label] == 0:
            raise LayoutError(f"class {label} in session 0 has no train records")

    shots, ways = [], []
    for session in range(1, n_sessions):
        counts = {label: train_counts[label] for label in sorted(spaces[session])}
        # The expected K is the most common count; ties go to the larger K so a
        # class that lost a shot is the one reported.
        tally = Counter(counts.values())
        k_shot = max(tally, key=lambda k: (tally[k], k))
        for label, n in counts.items():
            if n != k_shot:
                raise LayoutError(
                    f"shot-count mismatch in session {session}: class {label} has "
                    f"{n} train records, expected {k_shot}"
                )
        shots.append(k_shot)
        ways.append(len(counts))

    return SessionLayout(
        n_sessions=n_sessions,
        dim=dim,
        label_spaces=tuple(frozenset(s) for s in spaces),
        shots=tuple(shots),
        ways=tuple(ways),
    )


@dataclass(frozen=True, eq=False)
class Dataset:
    """All embedding records of a run plus their validated session layout."""

    layout: SessionLayout
    splits: np.ndarray
    sessions: np.ndarray
    labels: np.ndarray
    features: np.ndarray

    def __post_init__(self):
        splits = np.asarray(self.splits, dtype=object)
        sessions = np.asarray(self.sessions, dtype=np.int64)
        labels = np.asarray(self.labels, dtype=np.int64)
        features = np.array(self.features, dtype=np.float64, copy=True)
        n = splits.shape[0]
        if features.ndim != 2 or features.shape[0] != n:
            raise DataError(f"features must have shape ({n}, d), got {features.shape}")
        if sessions.shape != (n,) or labels.shape != (n,):
            raise DataError("splits, sessions and labels must have equal length")
        bad = [s for s in set(splits.tolist()) if s not in SPLITS]
        if bad:
            raise DataError(f"unknown split value(s): {sorted(map(str, bad))}")
        if np.any(sessions < 0) or np.any(labels < 0):
            raise DataError("session and label ids must be non-negative")
        if not np.all(np.isfinite(features)):
            raise DataError("features contain non-finite values")
        if features.shape[1] != self.layout.dim:
            raise LayoutError(
                f"records have dimension {features.shape[1]}, layout declares {self.layout.dim}"
            )
        inferred = infer_layout(splits, sessions, labels, features.shape[1])
        if inferred != self.layout:
            raise LayoutError("declared layout does not match the records")
        object.__setattr__(self, "splits", _readonly(splits))
        object.__setattr__(self, "sessions", _readonly(sessions))
        object.__setattr__(self, "labels", _readonly(labels))
        object.__setattr__(self, "features", _readonly(features))

    @classmethod
    def from_arrays(cls, splits, sessions, labels, features) -> "Dataset":
        features = np.asarray(features, dtype=np.float64)
        splits = np.asarray(splits, dtype=object)
        if features.ndim != 2:
            raise DataError(f"features must be 2-D, got shape {features.shape}")
        layout = infer_layout(
            splits, np.asarray(sessions, dtype=np.int64), np.asarray(labels, dtype=np.int64),
            features.shape[1],
        )
        return cls(layout, splits, sessions, labels, features)

    @classmethod
    def from_records(cls, records: Sequence[EmbeddingRecord]) -> "Dataset":
        if not records:
            raise LayoutError("dataset has no records")
        dim = len(records[0].feature)
        for i, r in enumerate(records):
            if len(r.feature) != dim:
                raise DataError(f"record {i} has dimension {len(r.feature)}, expected {dim}")
        return cls.from_arrays(
            [r.split for r in records],
            [r.session for r in records],
            [r.label for r in records],
            np.stack([np.asarray(r.feature, dtype=np.float64) for r in records]),
        )

    def __len__(self) -> int:
        return self.labels.shape[0]

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.layout == other.layout
            and np.array_equal(self.splits, other.splits)
            and np.array_equal(self.sessions, other.sessions)
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.features, other.features)
        )

    @property
    def records(self) -> list[EmbeddingRecord]:
        return [self.record(i) for i in range(len(self))]

    def record(self, index: int) -> EmbeddingRecord:
        return EmbeddingRecord(
            str(self.splits[index]), int(self.sessions[index]), int(self.labels[index]),
            self.features[index],
        )

    def train_mask(self, session: int | None = None) -> np.ndarray:
        mask = self.splits == TRAIN
        if session is not None:
            mask &= self.sessions == session
        return mask

    def test_mask(self, session: int) -> np.ndarray:
        """Test records whose label lies in the cumulative label space of ``session``."""
        seen = np.fromiter(self.layout.cumulative_classes(session), dtype=np.int64)
        return (self.splits == TEST) & np.isin(self.labels, seen)


@dataclass(frozen=True, eq=False)
class PrototypeRegistry:
    """Per-class prototype vectors, sorted by class id, with provenance tags."""

    class_ids: tuple[int, ...]
    vectors: np.ndarray
    provenance: tuple[Provenance, ...]

    def __post_init__(self):
        ids = tuple(int(c) for c in self.class_ids)
        vectors = np.array(self.vectors, dtype=np.float64, copy=True)
        if vectors.ndim != 2 or vectors.shape[0] != len(ids):
            raise ValueError(f"expected {len(ids)} prototype rows, got shape {vectors.shape}")
        if len(self.provenance) != len(ids):
            raise ValueError("one provenance tag per class is required")
        if list(ids) != sorted(set(ids)):
            raise ValueError("class ids must be unique and sorted ascending")
        if not np.all(np.isfinite(vectors)):
            raise ValueError("prototypes contain non-finite values")
        object.__setattr__(self, "class_ids", ids)
        object.__setattr__(self, "vectors", _readonly(vectors))
        object.__setattr__(self, "provenance", tuple(Provenance(p) for p in self.provenance))
        object.__setattr__(self, "_index", {c: i for i, c in enumerate(ids)})

    @classmethod
    def from_entries(
        cls, entries: Mapping[int, tuple[np.ndarray, Provenance | str]], dim: int | None = None
    ) -> "PrototypeRegistry":
        ids = sorted(entries)
        if not ids:
            if dim is None:
                raise ValueError("dimension is required for an empty registry")
            return cls((), np.empty((0, dim)), ())
        vectors = np.stack([as_feature(entries[c][0], dim) for c in ids])
        return cls(tuple(ids), vectors, tuple(entries[c][1] for c in ids))

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return len(self.class_ids)

    def __contains__(self, class_id) -> bool:
        return class_id in self._index

    def __getitem__(self, class_id: int) -> np.ndarray:
        try:
            return self.vectors[self._index[class_id]]
        except KeyError:
            raise KeyError(f"unknown class id {class_id}") from None

    def provenance_of(self, class_id: int) -> Provenance:
        return self.provenance[self._index[class_id]]

    def index_of(self, class_id: int) -> int:
        return self._index[class_id]

    def entries(self) -> dict[int, tuple[np.ndarray, Provenance]]:
        return {c: (self.vectors[i], self.provenance[i]) for i, c in enumerate(self.class_ids)}

    def subset(self, class_ids: Iterable[int]) -> "PrototypeRegistry":
        rows = sorted(self._index[c] for c in set(class_ids))
        return PrototypeRegistry(
            tuple(self.class_ids[r] for r in rows),
            self.vectors[rows],
            tuple(self.provenance[r] for r in rows),
        )

    def merge(self, other: "PrototypeRegistry") -> "PrototypeRegistry":
        overlap = set(self.class_ids) & set(other.class_ids)
        if overlap:
            raise ValueError(f"registries overlap on classes {sorted(overlap)}")
        if len(self) and len(other) and self.dim != other.dim:
            raise ValueError(f"dimension mismatch: {self.dim} vs {other.dim}")
        merged = {**self.entries(), **other.entries()}
        return PrototypeRegistry.from_entries(merged, dim=self.dim if len(self) else other.dim)

    def replace(
        self, updates: Mapping[int, np.ndarray], provenance: Provenance
    ) -> "PrototypeRegistry":
        """Copy with the rows of ``updates`` swapped in; other rows are copied verbatim."""
        vectors = self.vectors.copy()
        tags = list(self.provenance)
        for class_id, vec in updates.items():
            if class_id not in self._index:
                raise KeyError(f"unknown class id {class_id}")
            i = self._index[class_id]
            vectors[i] = as_feature(vec, self.dim)
            tags[i] = Provenance(provenance)
        return PrototypeRegistry(self.class_ids, vectors, tuple(tags))

    def __eq__(self, other):
        if not isinstance(other, PrototypeRegistry):
            return NotImplemented
        return (
            self.class_ids == other.class_ids
            and self.provenance == other.provenance
            and np.array_equal(self.vectors, other.vectors)
        )


def compute_prototype(features) -> np.ndarray:
    """Element-wise mean of a non-empty set of same-dimension feature vectors."""
    if len(features) == 0:
        raise ValueError("no samples for class")
    try:
        stacked = np.asarray(features, dtype=np.float64)
    except ValueError as exc:
        raise ValueError(f"dimension mismatch among features: {exc}") from None
    if stacked.ndim != 2:
        raise ValueError(f"dimension mismatch among features (shape {stacked.shape})")
    if not np.all(np.isfinite(stacked)):
        raise ValueError("features contain non-finite values")
    return stacked.mean(axis=0)


def empirical_prototypes(dataset: Dataset, session: int) -> PrototypeRegistry:
    if not 0 <= session < dataset.layout.n_sessions:
        raise ValueError(f"session {session} out of range [0, {dataset.layout.n_sessions})")
    train = dataset.splits == TRAIN
    entries = {}
    for label in sorted(dataset.layout.label_spaces[session]):
        rows = dataset.features[train & (dataset.labels == label)]
        if rows.shape[0] == 0:
            raise ValueError(f"class {label} in session {session} has no train records")
        entries[label] = (compute_prototype(rows), Provenance.EMPIRICAL)
    return PrototypeRegistry.from_entries(entries, dim=dataset.layout.dim)


# -- embedding CSV ---------------------------------------------------------


def _parse_id(text: str, what: str, line: int) -> int:
    try:
        value = int(text)
    except ValueError:
        raise ParseError(f"line {line}: {what} {text!r} is not an integer") from None
    if value < 0:
        raise ParseError(f"line {line}: {what} {value} is negative")
    return value


def load_dataset(path) -> Dataset:
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"line 1: {path} is empty") from None
        if tuple(header[:3]) != META_COLUMNS:
            raise ParseError(f"line 1: header must start with {','.join(META_COLUMNS)}")
        dim = len(header) - 3
        if dim < 1:
            raise ParseError("line 1: header declares no feature columns")
        expected = [f"f{i}" for i in range(dim)]
        if header[3:] != expected:
            raise ParseError(f"line 1: feature columns must be named f0..f{dim - 1}")

        splits, sessions, labels, rows = [], [], [], []
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != dim + 3:
                raise ParseError(f"line {line}: expected {dim + 3} columns, got {len(row)}")
            if row[0] not in SPLITS:
                raise ParseError(f"line {line}: split must be train or test, got {row[0]!r}")
            splits.append(row[0])
            sessions.append(_parse_id(row[1], "session", line))
            labels.append(_parse_id(row[2], "label", line))
            try:
                values = [float(v) for v in row[3:]]
            except ValueError:
                raise ParseError(f"line {line}: non-numeric feature value") from None
            if not all(np.isfinite(values)):
                raise ParseError(f"line {line}: non-finite feature value")
            rows.append(values)

    if not rows:
        raise LayoutError(f"{path} contains no records")
    return Dataset.from_arrays(splits, sessions, labels, np.array(rows, dtype=np.float64))


def write_dataset(dataset: Dataset, path) -> None:
    """Write ``dataset`` as embedding CSV; floats use shortest round-trip repr."""
    dim = dataset.layout.dim
    header = ",".join(META_COLUMNS + tuple(f"f{i}" for i in range(dim)))
    lines = [header]
    for split, session, label, feat in zip(
        dataset.splits, dataset.sessions.tolist(), dataset.labels.tolist(), dataset.features.tolist()
    ):
        lines.append(f"{split},{session},{label}," + ",".join(map(repr, feat)))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
