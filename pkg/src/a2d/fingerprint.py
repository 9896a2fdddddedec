"""Attack-cost fingerprints.

A fingerprint is the vector of iteration counts that a fixed, ordered list of
defense attacks needs to flip an input's predicted label. Attacks that fail
within their cap are censored at ``max_iter``.
"""
from __future__ import annotations

import csv
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import attacks as A

BENIGN = "benign"
CHUNK = 64  # examples per work unit; fixed so results do not depend on workers


def adv_origin(attack_name: str) -> str:
    return f"adv:{attack_name}"


def is_adversarial_origin(origin: str) -> bool:
    return origin != BENIGN


@dataclass(frozen=True)
class Fingerprint:
    costs: tuple
    example_id: int
    origin: str = BENIGN
    queries: int = 0

    def __post_init__(self):
        object.__setattr__(self, "costs", tuple(int(c) for c in self.costs))
        if any(c < 0 for c in self.costs):
            raise ValueError("costs must be nonnegative")

    @property
    def adversarial(self) -> bool:
        return is_adversarial_origin(self.origin)


@dataclass
class FingerprintBatch:
    fingerprints: list
    total_queries: int
    query_matrix: np.ndarray = field(default_factory=lambda: np.zeros((0, 0), dtype=np.int64))  # per defense
    seconds: float = field(default=0.0, compare=False)  # advisory only

    def __len__(self):
        return len(self.fingerprints)

    def costs(self) -> np.ndarray:
        return cost_matrix(self.fingerprints)


def _check_defenses(defenses: Sequence[A.AttackConfig]):
    if not defenses:
        raise ValueError("at least one defense attack is required")
    for cfg in defenses:
        if not cfg.is_iterative:
            raise ValueError(f"{cfg.kind} is not iterative and cannot serve as a defense attack")


def censored_cost(outcome: A.AttackOutcome, cfg: A.AttackConfig) -> int:
    return outcome.iterations if outcome.success else cfg.max_iter


def _costs_for_chunk(model, x, defenses, pool):
    """(n, len(defenses)) costs and queries for one chunk."""
    costs = np.zeros((len(x), len(defenses)), dtype=np.int64)
    queries = np.zeros((len(x), len(defenses)), dtype=np.int64)
    for j, cfg in enumerate(defenses):
        outcomes = A.run_attack(model, x, cfg, pool=pool)
        costs[:, j] = [censored_cost(o, cfg) for o in outcomes]
        queries[:, j] = [o.queries for o in outcomes]
    return costs, queries


def fingerprint_one(model, x, defenses: Sequence[A.AttackConfig], example_id: int = 0,
                    origin: str = BENIGN, pool=None) -> Fingerprint:
    _check_defenses(defenses)
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    costs, queries = _costs_for_chunk(model, x, defenses, pool)
    return Fingerprint(tuple(costs[0]), example_id, origin, int(queries[0].sum()))


def fingerprint_batch(model, images, defenses: Sequence[A.AttackConfig], workers: int = 1,
                      origin=BENIGN, example_ids=None, pool=None) -> FingerprintBatch:
    """Fingerprint every row of `images` (an array or a Dataset).

    Work is cut into fixed chunks of CHUNK examples and spread over a
    thread pool; output order always follows the input order.
    `origin` is one string for all rows or one per row.
    """
    _check_defenses(defenses)
    x = np.asarray(getattr(images, "images", images), dtype=np.float64)
    n = len(x)
    if n == 0:
        return FingerprintBatch([], 0, np.zeros((0, len(defenses)), dtype=np.int64))
    if x.ndim != 2:
        raise ValueError("images must be a 2-D array of examples")
    ids = np.arange(n) if example_ids is None else np.asarray(example_ids)
    origins = [origin] * n if isinstance(origin, str) else list(origin)
    if len(ids) != n or len(origins) != n:
        raise ValueError("example_ids/origin length must match the number of images")

    start = time.perf_counter()
    chunks = [x[i:i + CHUNK] for i in range(0, n, CHUNK)]
    work = lambda chunk: _costs_for_chunk(model, chunk, defenses, pool)  # noqa: E731
    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(work, chunks))
    else:
        parts = [work(c) for c in chunks]
    costs = np.concatenate([p[0] for p in parts])
    queries = np.concatenate([p[1] for p in parts])
    per_example = queries.sum(axis=1)
    fps = [Fingerprint(tuple(costs[i]), int(ids[i]), origins[i], int(per_example[i])) for i in range(n)]
    return FingerprintBatch(fps, int(queries.sum()), queries, time.perf_counter() - start)


def cost_matrix(fingerprints: Sequence[Fingerprint]) -> np.ndarray:
    if not fingerprints:
        return np.zeros((0, 0))
    return np.array([fp.costs for fp in fingerprints], dtype=np.float64)


def set_distance_matrix(groups: Mapping[str, Sequence[Fingerprint]], seed: int = 0) -> tuple:
    """Pairwise distances between groups of fingerprints.

    Off-diagonal entries are Euclidean distances between the group mean cost
    vectors. A diagonal entry is the distance between the means of two halves
    of a seeded random split of that group (0 for a singleton).

    Returns (names, matrix).
    """
    names = list(groups)
    if len(names) < 2:
        raise ValueError("need at least two groups")
    mats = []
    for name in names:
        if len(groups[name]) == 0:
            raise ValueError(f"group {name!r} is empty")
        mats.append(cost_matrix(groups[name]))
    if len({m.shape[1] for m in mats}) != 1:
        raise ValueError("all fingerprints must have the same number of costs")
    means = np.array([m.mean(axis=0) for m in mats])
    out = np.linalg.norm(means[:, None, :] - means[None, :, :], axis=2)
    rng = np.random.default_rng(seed)
    for i, m in enumerate(mats):
        half = len(m) // 2
        if half == 0:
            out[i, i] = 0.0
            continue
        order = rng.permutation(len(m))
        a, b = m[order[:half]], m[order[half:]]
        out[i, i] = float(np.linalg.norm(a.mean(axis=0) - b.mean(axis=0)))
    return names, out


# ---------------------------------------------------------------- CSV

def save_csv(fingerprints: Sequence[Fingerprint], path) -> None:
    width = len(fingerprints[0].costs) if fingerprints else 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["example_id", "origin"] + [f"cost_{j + 1}" for j in range(width)] + ["queries"])
        for fp in fingerprints:
            if len(fp.costs) != width:
                raise ValueError("fingerprints have inconsistent lengths")
            w.writerow([fp.example_id, fp.origin, *fp.costs, fp.queries])


def load_csv(path) -> list:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty fingerprint file")
    header = rows[0]
    if header[:2] != ["example_id", "origin"] or header[-1] != "queries":
        raise ValueError(f"{path}: unexpected header {header}")
    width = len(header) - 3
    out = []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != width + 3:
            raise ValueError(f"{path}:{lineno}: expected {width + 3} fields, got {len(row)}")
        out.append(Fingerprint(tuple(int(v) for v in row[2:-1]), int(row[0]), row[1], int(row[-1])))
    return out
