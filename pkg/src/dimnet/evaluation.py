"""Time-aware filtered ranking and MRR / Hits@k."""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .autodiff import no_grad
from .data import TkgDataset, history_windows
from .model import forward_window, query_pairs
from .params import Ablation, ModelState, Runtime

HITS_LEVELS = (1, 3, 10)


class EvaluationError(ValueError):
    """Ranking precondition violated."""


@dataclass(frozen=True)
class RankRecord:
    subject: int
    relation: int
    time: int
    gold: int
    raw_rank: float
    filtered_rank: float


@dataclass
class MetricsReport:
    mrr: float
    hits: dict[int, float]
    num_queries: int
    per_timestamp: list[dict] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "mrr": self.mrr,
            "hits": {str(k): v for k, v in self.hits.items()},
            "num_queries": self.num_queries,
            "per_timestamp": self.per_timestamp,
        }

    def write_json(self, path: str | os.PathLike) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def write_csv(self, path: str | os.PathLike) -> None:
        cols = ["time_index", "num_queries", "mrr"] + [f"hits{k}" for k in HITS_LEVELS]
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=cols)
            writer.writeheader()
            for row in self.per_timestamp:
                writer.writerow({c: row[c] for c in cols})


def time_aware_filter(scores: np.ndarray, gold: int, true_objects: Iterable[int]) -> np.ndarray:
    """Mask (with NaN) every other object that is true for the same (s, r) at the query timestamp."""
    true_objects = set(true_objects)
    if gold not in true_objects:
        raise EvaluationError(f"gold object {gold} is not among the true facts at the query timestamp")
    masked = np.array(scores, dtype=np.float64, copy=True)
    others = [o for o in true_objects if o != gold]
    if others:
        masked[others] = np.nan
    return masked


def rank_of_gold(masked_scores: np.ndarray, gold: int) -> float:
    """Average-tie rank of ``gold`` among unmasked (non-NaN) candidates."""
    target = masked_scores[gold]
    if np.isnan(target):
        raise EvaluationError("gold candidate is masked")
    alive = masked_scores[~np.isnan(masked_scores)]
    greater = np.count_nonzero(alive > target)
    ties = np.count_nonzero(alive == target) - 1
    return 1.0 + greater + ties / 2.0


def oracle_rank(scores: Sequence[float], gold: int, true_objects: Iterable[int]) -> float:
    """Filtered rank by exhaustive pairwise comparison (independent of :func:`rank_of_gold`)."""
    excluded = set(true_objects)
    if gold not in excluded:
        raise EvaluationError("gold missing from true facts")
    excluded.discard(gold)
    target = float(scores[gold])
    rank = 1.0
    for cand in range(len(scores)):
        if cand == gold or cand in excluded:
            continue
        other = float(scores[cand])
        if other > target:
            rank += 1.0
        elif other == target:
            rank += 0.5
    return rank


def compute_metrics(records: Sequence[RankRecord]) -> MetricsReport:
    if not records:
        raise EvaluationError("no rank records to aggregate")
    ranks = np.asarray([r.filtered_rank for r in records])
    report = MetricsReport(
        mrr=float(np.mean(1.0 / ranks)),
        hits={k: float(np.mean(ranks <= k)) for k in HITS_LEVELS},
        num_queries=len(records),
    )
    by_time: dict[int, list[float]] = {}
    for r in records:
        by_time.setdefault(r.time, []).append(r.filtered_rank)
    for t in sorted(by_time):
        rk = np.asarray(by_time[t])
        row = {"time_index": t, "num_queries": len(rk), "mrr": float(np.mean(1.0 / rk))}
        row.update({f"hits{k}": float(np.mean(rk <= k)) for k in HITS_LEVELS})
        report.per_timestamp.append(row)
    return report


def static_true_objects(dataset: TkgDataset) -> dict[tuple[int, int], set[int]]:
    """Objects of (s, r) across every timestamp, for the non-time-aware filter."""
    table: dict[tuple[int, int], set[int]] = {}
    for snap in dataset.snapshots:
        for s, r, o in snap.edges:
            table.setdefault((s, r), set()).add(o)
    return table


def rank_window(
    scores: np.ndarray, window_queries, t: int, true_at_t: dict, filter_table: dict | None = None
) -> list[RankRecord]:
    records = []
    for row, (s, r, o) in zip(scores, window_queries):
        truth = (filter_table or true_at_t)[(s, r)]
        raw = rank_of_gold(np.asarray(row, dtype=np.float64), o)
        filt = rank_of_gold(time_aware_filter(row, o, truth), o)
        records.append(RankRecord(s, r, t, o, raw, filt))
    return records


def evaluate_split(
    model: ModelState,
    dataset: TkgDataset,
    split: str,
    m: int,
    k: int,
    ablation: Ablation = Ablation(),
    time_aware: bool = True,
) -> MetricsReport:
    """Rank every (forward and inverse) query of ``split`` with eval-mode inference."""
    rt = Runtime("eval")
    static = None if time_aware else static_true_objects(dataset)
    records: list[RankRecord] = []
    with no_grad():
        for window in history_windows(dataset, m, split):
            if not window.queries:
                continue
            out = forward_window(model, window, k, rt, ablation, queries=query_pairs(window))
            truth = dataset.true_objects(window.query_time)
            records.extend(rank_window(out.scores.data, window.queries, window.query_time, truth, static))
    return compute_metrics(records)
