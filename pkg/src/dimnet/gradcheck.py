"""Finite-difference verification of the full training objective on a tiny instance."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .config import TrainConfig
from .data import Quadruple, TkgDataset, augment_inverse, build_snapshots, history_windows
from .model import forward_window, query_pairs
from .params import ModelState, Runtime
from .training import window_loss

COMPONENTS = {
    "embeddings": ("entity", "relation", "null_relation"),
    "layer0-init": ("init.",),
    "multi-span": ("layer",),
    "disentangle": ("dis.",),
    "decoder": ("dec.",),
}


def component_of(name: str) -> str:
    for comp, prefixes in COMPONENTS.items():
        if any(name == p or name.startswith(p) for p in prefixes):
            return comp
    return "other"


def tiny_dataset(num_entities: int = 12, num_raw_relations: int = 4, timestamps: int = 4,
                 facts: int = 10, seed: int = 0) -> TkgDataset:
    """Random TKG without duplicate triples, every timestamp in the training split."""
    rng = np.random.default_rng(seed)
    quads = []
    for t in range(timestamps):
        seen = set()
        while len(seen) < facts:
            s, o = rng.choice(num_entities, 2, replace=False)
            seen.add((int(s), int(rng.integers(num_raw_relations)), int(o)))
        quads += [Quadruple(s, r, o, t) for s, r, o in sorted(seen)]
    snaps = build_snapshots(augment_inverse(quads, num_raw_relations), timestamps)
    return TkgDataset(num_entities, num_raw_relations, tuple(snaps), (timestamps, timestamps), "tiny")


@dataclass
class GradcheckReport:
    per_tensor: dict[str, float]
    seconds: float
    tolerance: float

    @property
    def per_component(self) -> dict[str, float]:
        out: dict[str, float] = {}
        for name, err in self.per_tensor.items():
            comp = component_of(name)
            out[comp] = max(out.get(comp, 0.0), err)
        return out

    @property
    def max_error(self) -> float:
        return max(self.per_tensor.values(), default=0.0)

    @property
    def failing(self) -> list[str]:
        return [c for c, e in self.per_component.items() if not e < self.tolerance]

    @property
    def ok(self) -> bool:
        return not self.failing


def full_model_gradcheck(
    eps: float = 1e-5,
    tolerance: float = 1e-3,
    d: int = 8,
    layers: int = 2,
    m: int = 3,
    heads: int = 1,
    k: int = 3,
    channels: int = 8,
    seed: int = 0,
) -> GradcheckReport:
    """Central differences of the total loss over every parameter tensor.

    Activations run in eval mode and the top-k virtual graph is sampled once and
    then held fixed, so the objective is a deterministic function of the parameters.
    """
    dataset = tiny_dataset(seed=seed)
    config = TrainConfig(d=d, layers=layers, heads=heads, m=m, k=k, channels=channels).validate()
    model = ModelState.initialize(config.dims(dataset.num_entities, dataset.num_raw_relations), seed=seed + 1)
    window = list(history_windows(dataset, m, "train"))[-1]
    rt = Runtime("eval")
    with ad.no_grad():
        virtual = forward_window(model, window, k, rt, config.ablation, queries=query_pairs(window)).virtual
    truth = dataset.true_objects(window.query_time)

    def objective():
        return window_loss(model, window, truth, config, rt, virtual=virtual).total

    started = time.perf_counter()
    errors = ad.gradient_errors(objective, model.params, eps)
    return GradcheckReport(errors, time.perf_counter() - started, tolerance)
