import math

import numpy as np
import pytest

from proto_calib.core import Dataset
from proto_calib.synth import SynthSpec, gen_synthetic


def cosine_oracle(a, b) -> float:
    """Pure-Python cosine; deliberately shares no code with the library."""
    dot = math.fsum(x * y for x, y in zip(a, b))
    na = math.sqrt(math.fsum(x * x for x in a))
    nb = math.sqrt(math.fsum(y * y for y in b))
    return dot / (na * nb)


def max_scan_oracle(feature, class_ids, prototypes) -> int:
    """Exhaustive scan; strict '>' keeps the first (lowest-id) maximum."""
    best_id, best = None, -math.inf
    for cid, proto in sorted(zip(class_ids, prototypes), key=lambda t: t[0]):
        s = cosine_oracle(feature, proto)
        if s > best:
            best_id, best = cid, s
    return best_id


def build_dataset(spaces, shots, base_train=3, test_per_class=2, dim=4, seed=0, scale=5.0):
    """Random dataset with the given label spaces: class c has mean scale*e_(c mod dim)-ish."""
    rng = np.random.default_rng(seed)
    splits, sessions, labels, rows = [], [], [], []
    for s, space in enumerate(spaces):
        for c in sorted(space):
            n_train = base_train if s == 0 else shots[s - 1]
            mean = rng.normal(0, scale, size=dim)
            for split, n in (("train", n_train), ("test", test_per_class)):
                rows.append(mean + rng.normal(size=(n, dim)))
                splits += [split] * n
                sessions += [s] * n
                labels += [c] * n
    return Dataset.from_arrays(splits, sessions, labels, np.concatenate(rows))


@pytest.fixture(scope="session")
def small_synth():
    return gen_synthetic(SynthSpec(base_classes=10, new_classes=5, sessions_after_base=1,
                                   shots=5, test_per_class=50, dim=16, seed=3))


@pytest.fixture(scope="session")
def multi_session_synth():
    return gen_synthetic(SynthSpec(base_classes=12, new_classes=12, sessions_after_base=4,
                                   shots=5, test_per_class=20, dim=16, seed=11))


# Verdict lines recorded by the acceptance suite, echoed after the run.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
