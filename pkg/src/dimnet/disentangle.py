"""Cross-time disentanglement into active and stable factors.

For every node ``o`` the previous-timestamp in-neighbours (plus a self-loop
slot) are scored against ``o``'s current features. A softmax over the scores
weights the values into the active factor input, a softmax over the negated
scores into the stable factor; the active factor is carried through a GRU.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import SnapshotGraph
from .params import Factors, ModelState


@dataclass
class AttentionTrace:
    """Per-slot scores and both normalizations, one entry per head."""

    targets: np.ndarray | None = None
    scores: list[np.ndarray] = field(default_factory=list)
    active: list[np.ndarray] = field(default_factory=list)
    stable: list[np.ndarray] = field(default_factory=list)


def neighbor_slots(prev_snapshot: SnapshotGraph, n: int, self_loop_id: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(neighbour, relation, centre) columns of every attention slot, self-loops last."""
    src, rel, dst = prev_snapshot.arrays()
    loops = np.arange(n)
    return (
        np.concatenate([src, loops]),
        np.concatenate([rel, np.full(n, self_loop_id)]),
        np.concatenate([dst, loops]),
    )


def neighbor_set(prev_snapshot: SnapshotGraph, o: int, self_loop_id: int) -> list[tuple[int, int]]:
    slots = [(s, r) for s, r, obj in prev_snapshot.edges if obj == o]
    slots.append((o, self_loop_id))
    return slots


def attention_scores(q_in: Tensor, k_in: Tensor, w_q: Tensor, w_k: Tensor) -> Tensor:
    """Scaled dot product between projected (feature || relation) rows, per slot."""
    q = q_in @ w_q
    k = k_in @ w_k
    return (q * k).sum(axis=1) * (1.0 / math.sqrt(w_q.shape[1]))


def exclusive_softmax(scores: Tensor, targets: np.ndarray, n: int) -> tuple[Tensor, Tensor]:
    return ad.segment_softmax(scores, targets, n), ad.segment_softmax(-scores, targets, n)


def pool_factors(
    eta: Tensor, eta_bar: Tensor, values: Tensor, targets: np.ndarray, n: int
) -> tuple[Tensor, Tensor]:
    """Mean over slots of score-weighted values: (active-factor input, stable factor)."""
    active_in = ad.segment_mean(eta.reshape(-1, 1) * values, targets, n)
    stable = ad.segment_mean(eta_bar.reshape(-1, 1) * values, targets, n)
    return active_in, stable


def disentangle_step(
    model: ModelState,
    h_cur: Tensor,
    h_prev: Tensor,
    prev_snapshot: SnapshotGraph,
    active_prev: Tensor,
    trace: AttentionTrace | None = None,
) -> Factors:
    dims = model.dims
    n, dh = dims.num_entities, dims.head_dim
    src, rel, dst = neighbor_slots(prev_snapshot, n, dims.num_relations)
    rel_table = ad.concat([model["relation"], model["dis.self_loop"].reshape(1, -1)], axis=0)
    centre = h_cur[dst]
    neighbour = h_prev[src]
    relation = rel_table[rel]
    if trace is not None:
        trace.targets = dst
    active_parts, stable_parts = [], []
    for h in range(dims.heads):
        cols = slice(h * dh, (h + 1) * dh)
        p = f"dis.head{h}."
        r_h = relation[:, cols]
        nb_h = neighbour[:, cols]
        scores = attention_scores(
            ad.concat([centre[:, cols], r_h]), ad.concat([nb_h, r_h]), model[p + "W_q"], model[p + "W_k"]
        )
        eta, eta_bar = exclusive_softmax(scores, dst, n)
        a_in, stable = pool_factors(eta, eta_bar, nb_h @ model[p + "W_v"], dst, n)
        active_parts.append(a_in)
        stable_parts.append(stable)
        if trace is not None:
            trace.scores.append(scores.data.copy())
            trace.active.append(eta.data.copy())
            trace.stable.append(eta_bar.data.copy())
    active_in = active_parts[0] if dims.heads == 1 else ad.concat(active_parts)
    stable = stable_parts[0] if dims.heads == 1 else ad.concat(stable_parts)
    active = ad.gru_cell(active_prev, active_in, model.gru_params())
    return Factors(active, stable)
