"""End-to-end forward pass for one history window."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .data import HistoryWindow
from .decoder import VirtualGraph, rescore_with_virtual, sample_virtual_graph, score_all_queries
from .encoder import evolve_window
from .params import Ablation, Factors, ModelState, Runtime


@dataclass
class WindowOutput:
    first_pass: Tensor
    scores: Tensor
    stables: list[Tensor]
    factors: Factors
    virtual: VirtualGraph | None


def query_pairs(window: HistoryWindow) -> np.ndarray:
    return np.asarray([(s, r) for s, r, _ in window.queries], dtype=np.int64).reshape(-1, 2)


def forward_window(
    model: ModelState,
    window: HistoryWindow,
    k: int,
    rt: Runtime,
    ablation: Ablation = Ablation(),
    virtual: VirtualGraph | None = None,
    queries: np.ndarray | None = None,
) -> WindowOutput:
    """Evolve the history, score the queries, and (unless ablated) rescore over
    the sampled virtual graph.

    Passing ``virtual`` holds the top-k selection fixed, which gradient checks
    need because the selection is a discrete choice.
    """
    if queries is None:
        queries = query_pairs(window)
    state, factors, stables = evolve_window(model, window.history, rt, ablation)
    first = score_all_queries(model, state.final, queries, rt)
    if not ablation.virtual_graph:
        return WindowOutput(first, first, stables, factors, None)
    if virtual is None:
        virtual = sample_virtual_graph(first.data, queries, k, model.dims.num_raw_relations, window.query_time)
    second = rescore_with_virtual(model, state, virtual, factors, queries, rt, ablation)
    return WindowOutput(first, second, stables, factors, virtual)
