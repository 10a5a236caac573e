"""Quadruple datasets: parsing, timestamp densification, inverse edges,
per-timestamp snapshots, history windows and a synthetic periodic generator."""

from __future__ import annotations

import functools
import hashlib
import os
from dataclasses import dataclass, field
from typing import Iterator, NamedTuple, Sequence

import numpy as np


class DataError(ValueError):
    """Malformed dataset input."""


class ContractViolation(ValueError):
    """A documented precondition on dataset operations was violated."""


class Quadruple(NamedTuple):
    subject: int
    relation: int
    object: int
    time: int


@dataclass(frozen=True)
class SnapshotGraph:
    time_index: int
    edges: tuple[tuple[int, int, int], ...]

    def __len__(self) -> int:
        return len(self.edges)

    def arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Subject, relation and object id columns."""
        return self._columns

    @functools.cached_property
    def _columns(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        if not self.edges:
            empty = np.zeros(0, dtype=np.int64)
            return empty, empty, empty
        e = np.asarray(self.edges, dtype=np.int64)
        return e[:, 0].copy(), e[:, 1].copy(), e[:, 2].copy()

    def in_degree(self, n: int) -> np.ndarray:
        cache = self._degrees
        if n not in cache:
            cache[n] = np.bincount(self._columns[2], minlength=n)
        return cache[n]

    @functools.cached_property
    def _degrees(self) -> dict[int, np.ndarray]:
        return {}


@dataclass(frozen=True)
class HistoryWindow:
    history: tuple[SnapshotGraph, ...]
    query_time: int
    queries: tuple[tuple[int, int, int], ...]


@dataclass(frozen=True)
class TkgDataset:
    num_entities: int
    num_raw_relations: int
    snapshots: tuple[SnapshotGraph, ...]
    split_boundaries: tuple[int, int]
    name: str = "dataset"
    fingerprint: str = field(default="", compare=False)

    @property
    def num_relations(self) -> int:
        """Size of the relation table including inverse relations."""
        return 2 * self.num_raw_relations

    @property
    def num_timestamps(self) -> int:
        return len(self.snapshots)

    def split_times(self, split: str) -> range:
        train_end, valid_end = self.split_boundaries
        if split == "train":
            return range(0, train_end)
        if split == "valid":
            return range(train_end, valid_end)
        if split == "test":
            return range(valid_end, self.num_timestamps)
        raise ValueError(f"unknown split {split!r}")

    def true_objects(self, t: int) -> dict[tuple[int, int], set[int]]:
        """All objects o with (s, r, o) true at timestamp t, keyed by (s, r)."""
        table: dict[tuple[int, int], set[int]] = {}
        for s, r, o in self.snapshots[t].edges:
            table.setdefault((s, r), set()).add(o)
        return table


def parse_quadruple_file(path: str | os.PathLike) -> list[tuple[int, int, int, int]]:
    """Read ``s<TAB>r<TAB>o<TAB>t`` lines; a fifth column is ignored."""
    quads = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            cols = line.split("\t")
            if len(cols) < 4:
                raise DataError(f"{path}: line {lineno}: expected 4 tab-separated columns, got {len(cols)}")
            try:
                s, r, o, t = (int(c) for c in cols[:4])
            except ValueError:
                raise DataError(f"{path}: line {lineno}: non-integer field in {line!r}") from None
            if min(s, r, o, t) < 0:
                raise DataError(f"{path}: line {lineno}: negative id in {line!r}")
            quads.append((s, r, o, t))
    return quads


def normalize_timestamps(raw: Sequence[tuple[int, int, int, int]]) -> tuple[list[Quadruple], int]:
    if not raw:
        raise ContractViolation("normalize_timestamps needs at least one quadruple")
    distinct = sorted({q[3] for q in raw})
    rank = {t: i for i, t in enumerate(distinct)}
    return [Quadruple(s, r, o, rank[t]) for s, r, o, t in raw], len(distinct)


def augment_inverse(quads: Sequence[Quadruple], num_raw_relations: int) -> list[Quadruple]:
    for q in quads:
        if q.relation >= num_raw_relations:
            raise ContractViolation(f"relation {q.relation} >= num_raw_relations {num_raw_relations}")
    out = [Quadruple(*q) for q in quads]
    out.extend(Quadruple(q.object, q.relation + num_raw_relations, q.subject, q.time) for q in quads)
    return out


def inverse_triple(triple: tuple[int, int, int], num_raw_relations: int) -> tuple[int, int, int]:
    s, r, o = triple
    r2 = r + num_raw_relations if r < num_raw_relations else r - num_raw_relations
    return o, r2, s


def build_snapshots(quads: Sequence[Quadruple], T: int) -> list[SnapshotGraph]:
    buckets: list[list[tuple[int, int, int]]] = [[] for _ in range(T)]
    for q in quads:
        if not 0 <= q.time < T:
            raise ContractViolation(f"time index {q.time} outside [0, {T})")
        buckets[q.time].append((q.subject, q.relation, q.object))
    return [SnapshotGraph(t, tuple(b)) for t, b in enumerate(buckets)]


def history_indices(t: int, m: int) -> list[int]:
    return list(range(max(0, t - m), t))


def history_windows(dataset: TkgDataset, m: int, split: str) -> Iterator[HistoryWindow]:
    """One window per timestamp of ``split``; timestamps without history are skipped.

    History always draws on ground-truth snapshots, whichever split they fall in.
    """
    if m < 1:
        raise ContractViolation("history length m must be >= 1")
    for t in dataset.split_times(split):
        idx = history_indices(t, m)
        if not idx:
            continue
        yield HistoryWindow(
            history=tuple(dataset.snapshots[i] for i in idx),
            query_time=t,
            queries=dataset.snapshots[t].edges,
        )


def _finish(
    quads_by_split: dict[str, list[tuple[int, int, int, int]]],
    num_entities: int | None,
    num_raw_relations: int | None,
    name: str,
    fingerprint: str,
) -> TkgDataset:
    all_raw = quads_by_split["train"] + quads_by_split["valid"] + quads_by_split["test"]
    quads, T = normalize_timestamps(all_raw)
    if num_entities is None:
        num_entities = 1 + max(max(q.subject, q.object) for q in quads)
    if num_raw_relations is None:
        num_raw_relations = 1 + max(q.relation for q in quads)
    n_train, n_valid = len(quads_by_split["train"]), len(quads_by_split["valid"])
    train_times = {q.time for q in quads[:n_train]}
    valid_times = {q.time for q in quads[n_train:n_train + n_valid]}
    test_times = {q.time for q in quads[n_train + n_valid:]}
    train_end = max(train_times) + 1 if train_times else 0
    valid_end = max(valid_times) + 1 if valid_times else train_end
    if (valid_times and min(valid_times) < train_end) or (test_times and min(test_times) < valid_end):
        raise DataError("splits must satisfy train timestamps < valid timestamps < test timestamps")
    snapshots = build_snapshots(augment_inverse(quads, num_raw_relations), T)
    return TkgDataset(num_entities, num_raw_relations, tuple(snapshots), (train_end, valid_end), name, fingerprint)


def load_dataset(directory: str | os.PathLike) -> TkgDataset:
    """Load ``train.txt``/``valid.txt``/``test.txt`` from a dataset directory.

    Entity and relation counts come from ``stat.txt`` (first two integers)
    when present, otherwise from the largest ids seen.
    """
    directory = os.fspath(directory)
    digest = hashlib.sha256()
    splits = {}
    for split in ("train", "valid", "test"):
        path = os.path.join(directory, f"{split}.txt")
        if not os.path.exists(path):
            raise DataError(f"missing {path}")
        with open(path, "rb") as fh:
            digest.update(fh.read())
        splits[split] = parse_quadruple_file(path)
    num_entities = num_relations = None
    stat = os.path.join(directory, "stat.txt")
    if os.path.exists(stat):
        with open(stat, encoding="utf-8") as fh:
            fields = fh.read().split()
        num_entities, num_relations = int(fields[0]), int(fields[1])
    if not splits["train"]:
        raise DataError(f"{directory}: empty training split")
    return _finish(splits, num_entities, num_relations, os.path.basename(directory.rstrip("/")), digest.hexdigest())


def gen_synthetic_tkg(num_entities: int, num_relations: int, period: int, T: int, seed: int) -> TkgDataset:
    """Periodic TKG: phase ``t mod period`` always carries the same fact set."""
    if period < 1:
        raise ContractViolation("period must be >= 1")
    if T < 3 * period:
        raise ContractViolation("T must be at least 3 * period")
    if num_entities < 2 or num_relations < 1:
        raise ContractViolation("need at least 2 entities and 1 relation")
    rng = np.random.default_rng(seed)
    phases = []
    for _ in range(period):
        # every entity is the subject of one fact per phase
        facts = set()
        for s in range(num_entities):
            r = int(rng.integers(num_relations))
            o = int(rng.integers(num_entities - 1))
            o += o >= s  # no self facts
            facts.add((s, r, o))
        phases.append(sorted(facts))
    raw = [(s, r, o, t) for t in range(T) for s, r, o in phases[t % period]]
    train_end = int(round(0.8 * T))
    valid_end = int(round(0.9 * T))
    splits = {
        "train": [q for q in raw if q[3] < train_end],
        "valid": [q for q in raw if train_end <= q[3] < valid_end],
        "test": [q for q in raw if q[3] >= valid_end],
    }
    digest = hashlib.sha256(repr((num_entities, num_relations, period, T, seed)).encode()).hexdigest()
    return _finish(splits, num_entities, num_relations, "synth", digest)


def write_dataset(dataset: TkgDataset, directory: str | os.PathLike) -> None:
    """Write raw (non-inverse) edges as train/valid/test TSVs plus ``stat.txt``."""
    os.makedirs(directory, exist_ok=True)
    nr = dataset.num_raw_relations
    for split in ("train", "valid", "test"):
        with open(os.path.join(directory, f"{split}.txt"), "w", encoding="utf-8", newline="\n") as fh:
            for t in dataset.split_times(split):
                for s, r, o in dataset.snapshots[t].edges:
                    if r < nr:
                        fh.write(f"{s}\t{r}\t{o}\t{t}\n")
    with open(os.path.join(directory, "stat.txt"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"{dataset.num_entities}\t{dataset.num_raw_relations}\t{dataset.num_timestamps}\n")
