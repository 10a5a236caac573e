"""Multi-span evolution over a window of snapshots.

Each timestamp runs ``layers`` rounds of message passing. Layer ``l`` reads the
current layer ``l-1`` output plus a transformed copy of the previous
timestamp's layer ``l`` output, aggregates neighbour and self-loop messages
with four statistics (mean/max/min/std), and blends the result with the
previous timestamp's layer ``l`` output through a gate driven by the active
factor. Layer 0 blends the static entity table with the previous final layer
through a gate driven by the stable factor.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tensor
from .data import SnapshotGraph
from .params import Ablation, EvolutionState, Factors, ModelState, Runtime


def relation_layer_embed(model: ModelState, l: int) -> Tensor:
    if not 1 <= l <= model.dims.layers:
        raise ContractError(f"layer index {l} outside 1..{model.dims.layers}")
    return model["relation"] @ model.layer(l, "W_rel") + model.layer(l, "b_rel")


def pna_aggregate(messages: Tensor, targets: np.ndarray, n: int, counts: np.ndarray | None = None) -> Tensor:
    """Concatenate mean, max, min and population std of each node's message multiset."""
    if counts is None:
        counts = np.bincount(targets, minlength=n)
    mu = ad.segment_mean(messages, targets, n, counts)
    dev = messages - mu[targets]
    std = ad.sqrt(ad.segment_mean(dev * dev, targets, n, counts))
    return ad.concat([mu, ad.segment_max(messages, targets, n), ad.segment_min(messages, targets, n), std], axis=-1)


def aggregate_messages(
    model: ModelState,
    snapshot: SnapshotGraph,
    ddot_h: Tensor,
    rel_l: Tensor,
    l: int,
    rt: Runtime,
) -> Tensor:
    n = model.dims.num_entities
    if ddot_h.shape[0] != n:
        raise ad.ShapeError(f"node features have {ddot_h.shape[0]} rows, expected {n}")
    src, rel, dst = snapshot.arrays()
    neighbour = (ddot_h[src] + rel_l[rel]) @ model.layer(l, "W_nbr")
    self_loop = ddot_h @ model.layer(l, "W_sf")
    messages = ad.concat([neighbour, self_loop], axis=0)
    targets = np.concatenate([dst, np.arange(n)])
    projected = pna_aggregate(messages, targets, n, snapshot.in_degree(n) + 1) @ model.layer(l, "pna_proj")
    normed = ad.layer_norm(projected, model.layer(l, "ln_gain"), model.layer(l, "ln_bias"))
    return ddot_h + rt.act(normed)


def cross_time_input(model: ModelState, h_cur_lower: Tensor, h_prev_same: Tensor, l: int) -> Tensor:
    return h_cur_lower + h_prev_same @ model.layer(l, "W_ce")


def update_gate(model: ModelState, active: Tensor, l: int) -> Tensor:
    return ad.sigmoid(active @ model.layer(l, "W_ug") + model.layer(l, "b_ug"))


def gated_update(model: ModelState, h_agg: Tensor, h_prev_same: Tensor, active: Tensor, l: int) -> Tensor:
    gate = update_gate(model, active, l)
    return gate * h_agg + (1.0 - gate) * h_prev_same


def pooled_relations(model: ModelState, snapshot: SnapshotGraph) -> Tensor:
    """Mean relation embedding over each node's in-edges; in-degree-0 nodes get the null relation."""
    n = model.dims.num_entities
    _, rel, dst = snapshot.arrays()
    degree = snapshot.in_degree(n)
    pooled = ad.segment_mean(model["relation"][rel], dst, n, degree)
    empty = (degree == 0).astype(np.float64).reshape(-1, 1)
    return pooled + empty * model["null_relation"]


def init_gate(model: ModelState, stable: Tensor) -> Tensor:
    return ad.sigmoid(stable @ model["init.W_ig"] + model["init.b_ig"])


def init_layer0(
    model: ModelState,
    snapshot: SnapshotGraph,
    prev_final: Tensor | None,
    stable: Tensor,
    is_window_start: bool,
    rt: Runtime,
) -> tuple[Tensor, Tensor | None]:
    """Layer-0 features and the initialization gate (``None`` at window start)."""
    entity = model["entity"]
    if is_window_start:
        base, gate = entity, None
    else:
        gate = init_gate(model, stable)
        base = gate * entity + (1.0 - gate) * prev_final
    x = ad.concat([base, pooled_relations(model, snapshot)], axis=-1)
    hidden = rt.act(x @ model["init.g.W1"] + model["init.g.b1"])
    return hidden @ model["init.g.W2"] + model["init.g.b2"], gate


def evolve_snapshot(
    model: ModelState,
    snapshot: SnapshotGraph,
    prev: EvolutionState | None,
    factors: Factors,
    rt: Runtime,
    ablation: Ablation = Ablation(),
) -> EvolutionState:
    """One timestamp of evolution. ``prev is None`` marks the window start."""
    start = prev is None
    h0, igate = init_layer0(model, snapshot, None if start else prev.final, factors.stable, start, rt)
    prev_layers = [h0] * (model.dims.layers + 1) if start else prev.layers
    state = EvolutionState(layers=[h0], init_gate=igate)
    for l in range(1, model.dims.layers + 1):
        lower = state.layers[l - 1]
        ddot = cross_time_input(model, lower, prev_layers[l], l) if ablation.multi_span else lower
        h_agg = aggregate_messages(model, snapshot, ddot, relation_layer_embed(model, l), l, rt)
        state.aggregated.append(h_agg)
        if ablation.multi_span:
            gate = update_gate(model, factors.active, l)
            state.gates.append(gate)
            state.layers.append(gate * h_agg + (1.0 - gate) * prev_layers[l])
        else:
            state.layers.append(h_agg)
    return state


def evolve_window(
    model: ModelState,
    history: Sequence[SnapshotGraph],
    rt: Runtime,
    ablation: Ablation = Ablation(),
    disentangler=None,
) -> tuple[EvolutionState, Factors, list[Tensor]]:
    """Evolve through ``history`` in order.

    Returns the final state, the factors produced after the last timestamp and
    the stable factors computed along the way (one per timestamp after the
    first). ``disentangler`` defaults to :func:`dimnet.disentangle.disentangle_step`.
    """
    if not history:
        raise ContractError("evolve_window needs a non-empty history")
    if disentangler is None:
        from .disentangle import disentangle_step as disentangler
    n, d = model.dims.num_entities, model.dims.d
    factors = Factors.zeros(n, d)
    stables: list[Tensor] = []
    state: EvolutionState | None = None
    for i, snapshot in enumerate(history):
        new = evolve_snapshot(model, snapshot, state, factors, rt, ablation)
        if i >= 1 and ablation.disentangle:
            factors = disentangler(model, new.final, state.final, history[i - 1], factors.active)
            stables.append(factors.stable)
        state = new
    return state, factors, stables
