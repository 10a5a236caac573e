"""ConvTransE scoring, top-k virtual-subgraph sampling and the second scoring pass."""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import SnapshotGraph, inverse_triple
from .encoder import evolve_snapshot
from .params import Ablation, EvolutionState, Factors, ModelState, Runtime


def convtranse_project(model: ModelState, subjects: Tensor, relations: Tensor, rt: Runtime) -> Tensor:
    """Map stacked (subject, relation) rows [Q x d] each to a d-dim query vector."""
    q, d = subjects.shape
    w = model["dec.kernel"].shape[0] // 2
    c = model["dec.kernel"].shape[1]
    if relations.shape != (q, d):
        raise ad.ShapeError(f"subject rows {subjects.shape} vs relation rows {relations.shape}")
    pad = (w - 1) // 2
    signal = ad.concat([subjects.reshape(q, 1, d), relations.reshape(q, 1, d)], axis=1)
    zeros = ad.Tensor(np.zeros((q, 2, pad)))
    padded = ad.concat([zeros, signal, zeros], axis=2)
    # im2col: patch for output position i covers padded[:, :, i:i+w] on both rows
    rows = np.arange(2).reshape(1, 2, 1)
    cols = (np.arange(d).reshape(-1, 1) + np.arange(w).reshape(1, -1)).reshape(d, 1, w)
    patches = padded[:, rows, cols].reshape(q * d, 2 * w)
    conv = rt.act(patches @ model["dec.kernel"] + model["dec.conv_bias"])
    return conv.reshape(q, d * c) @ model["dec.proj"] + model["dec.proj_bias"]


def convtranse_score(
    model: ModelState, subject_vec: Tensor, relation_vec: Tensor, all_objects: Tensor, rt: Runtime
) -> Tensor:
    """Probabilities [|V|] for a single (subject, relation) pair."""
    d = subject_vec.shape[-1]
    if all_objects.ndim != 2 or all_objects.shape[1] != d:
        raise ad.ShapeError(f"candidate table {all_objects.shape} does not match d={d}")
    proj = convtranse_project(model, subject_vec.reshape(1, d), relation_vec.reshape(1, d), rt)
    return ad.sigmoid(proj @ all_objects.T).reshape(-1)


def score_all_queries(model: ModelState, h_final: Tensor, queries: np.ndarray, rt: Runtime) -> Tensor:
    """Score matrix [Q x |V|] for query rows ``(subject, relation)``."""
    queries = np.asarray(queries, dtype=np.int64).reshape(-1, 2)
    if len(queries) == 0:
        raise ad.ContractError("score_all_queries needs at least one query")
    pairs, inverse = np.unique(queries, axis=0, return_inverse=True)
    proj = convtranse_project(model, h_final[pairs[:, 0]], model["relation"][pairs[:, 1]], rt)
    scores = ad.sigmoid(proj @ h_final.T)
    return scores if len(pairs) == len(queries) and (pairs == queries).all() else scores[inverse.reshape(-1)]


@dataclass(frozen=True)
class VirtualGraph:
    edges: tuple[tuple[int, int, int], ...]
    query_time: int

    def as_snapshot(self) -> SnapshotGraph:
        return self._snapshot

    @functools.cached_property
    def _snapshot(self) -> SnapshotGraph:
        return SnapshotGraph(self.query_time, self.edges)


def top_k(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest scores, ties broken toward lower ids."""
    k = min(k, len(scores))
    order = np.lexsort((np.arange(len(scores)), -scores))
    return order[:k]


def sample_virtual_graph(
    scores: np.ndarray, queries: np.ndarray, k: int, num_raw_relations: int, query_time: int = -1
) -> VirtualGraph:
    """Union of top-k candidate edges over all queries, plus inverse copies."""
    if k < 1:
        raise ad.ContractError("sampling count k must be >= 1")
    scores = np.asarray(scores)
    forward = set()
    for (s, r), row in zip(np.asarray(queries).reshape(-1, 2), scores):
        for o in top_k(row, k):
            forward.add((int(s), int(r), int(o)))
    edges = set(forward)
    edges.update(inverse_triple(e, num_raw_relations) for e in forward)
    return VirtualGraph(tuple(sorted(edges)), query_time)


def rescore_with_virtual(
    model: ModelState,
    state_at_t: EvolutionState,
    virtual: VirtualGraph,
    factors_at_t: Factors,
    queries: np.ndarray,
    rt: Runtime,
    ablation: Ablation = Ablation(),
) -> Tensor:
    """One more evolution step over the virtual snapshot, then score again."""
    state = evolve_snapshot(model, virtual.as_snapshot(), state_at_t, factors_at_t, rt, ablation)
    return score_all_queries(model, state.final, queries, rt)
