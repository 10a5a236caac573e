"""Losses, Adam, and the epoch loop."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import TrainConfig
from .data import HistoryWindow, TkgDataset, history_windows
from .evaluation import evaluate_split
from .model import forward_window, query_pairs
from .params import ModelState, Runtime

log = logging.getLogger(__name__)

PROB_CLIP = 1e-12
COSINE_GUARD = 1e-12


def label_matrix(queries: Sequence[tuple[int, int, int]], true_objects: dict, n: int) -> np.ndarray:
    """Row q has a 1 for every true object of query q's (s, r) at its timestamp."""
    labels = np.zeros((len(queries), n))
    for i, (s, r, o) in enumerate(queries):
        objs = true_objects.get((s, r), set()) | {o}
        labels[i, list(objs)] = 1.0
    return labels


def prediction_loss(scores: Tensor, labels: np.ndarray) -> Tensor:
    """Multi-label binary cross-entropy, summed over candidates, averaged over queries."""
    if labels.shape != scores.shape:
        raise ad.ShapeError(f"labels {labels.shape} vs scores {scores.shape}")
    p = ad.clip(scores, PROB_CLIP, 1.0 - PROB_CLIP)
    nll = -(labels * ad.log(p) + (1.0 - labels) * ad.log(1.0 - p))
    return nll.sum() * (1.0 / scores.shape[0])


def guarded_cosine(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise cosine similarity; 0 wherever either row has norm below 1e-12."""
    na = ad.sqrt((a * a).sum(axis=1))
    nb = ad.sqrt((b * b).sum(axis=1))
    ok = ((na.data >= COSINE_GUARD) & (nb.data >= COSINE_GUARD)).astype(np.float64)
    denom = na * nb * ok + (1.0 - ok)
    return (a * b).sum(axis=1) / denom * ok


def disentangle_loss(stables: Sequence[Tensor]) -> Tensor:
    """Sum over consecutive stable-factor pairs and nodes of ``1 - cos``."""
    total = Tensor(0.0)
    for prev, cur in zip(stables[:-1], stables[1:]):
        total = total + (1.0 - guarded_cosine(prev, cur)).sum()
    return total


def total_loss(pred: Tensor, dis: Tensor | None) -> Tensor:
    return pred if dis is None else pred + dis


class Adam:
    """Bias-corrected Adam over named tensors, updated in place."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, Tensor]) -> None:
        self.step_count += 1
        bc1 = 1.0 - self.beta1 ** self.step_count
        bc2 = 1.0 - self.beta2 ** self.step_count
        for name, p in params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if name not in self.m:
                self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            m, v = self.m[name], self.v[name]
            if g.shape != m.shape:
                raise ad.ShapeError(f"gradient for {name} has shape {g.shape}, expected {m.shape}")
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


@dataclass
class WindowLoss:
    total: Tensor
    pred: float
    dis: float


def window_loss(
    model: ModelState,
    window: HistoryWindow,
    true_objects: dict,
    config: TrainConfig,
    rt: Runtime,
    virtual=None,
) -> WindowLoss:
    ablation = config.ablation
    out = forward_window(model, window, config.k, rt, ablation, virtual=virtual, queries=query_pairs(window))
    labels = label_matrix(window.queries, true_objects, model.dims.num_entities)
    pred = prediction_loss(out.scores, labels)
    dis = disentangle_loss(out.stables) if ablation.disentangle else None
    total = total_loss(pred, dis)
    return WindowLoss(total, pred.item(), 0.0 if dis is None else dis.item())


@dataclass
class EpochStats:
    epoch: int
    l_pred: float
    l_dis: float
    seconds: float


def train_epoch(
    model: ModelState, dataset: TkgDataset, config: TrainConfig, optimizer: Adam, rng: np.random.Generator, epoch: int = 0
) -> EpochStats:
    """One optimizer step per training window, windows in chronological order.

    ``l_dis`` is reported per node for readability; the optimized quantity is the sum.
    """
    rt = Runtime("train", rng)
    started = time.perf_counter()
    preds, dises = [], []
    n = model.dims.num_entities
    for window in history_windows(dataset, config.m, "train"):
        if not window.queries:
            continue
        model.zero_grad()
        with ad.new_tape() as tape:
            loss = window_loss(model, window, dataset.true_objects(window.query_time), config, rt)
            ad.backward(loss.total, tape)
        optimizer.step(model.params)
        preds.append(loss.pred)
        dises.append(loss.dis / n)
    return EpochStats(
        epoch,
        float(np.mean(preds)) if preds else 0.0,
        float(np.mean(dises)) if dises else 0.0,
        time.perf_counter() - started,
    )


def make_rng(seed: int) -> np.random.Generator:
    """Training-time rng; independent of the parameter-initialization stream."""
    return np.random.default_rng(np.random.SeedSequence(seed).spawn(2)[1])


@dataclass
class TrainState:
    model: ModelState
    optimizer: Adam
    rng: np.random.Generator
    epoch: int = 0
    best_valid: float = -1.0
    bad_epochs: int = 0


def new_train_state(config: TrainConfig, dataset: TkgDataset, init: str = "glorot") -> TrainState:
    dims = config.dims(dataset.num_entities, dataset.num_raw_relations)
    model = ModelState.initialize(dims, seed=config.seed, scheme=init)
    return TrainState(model, Adam(config.learning_rate), make_rng(config.seed))


def fit(
    state: TrainState,
    dataset: TkgDataset,
    config: TrainConfig,
    on_epoch: Callable[[TrainState, dict], None] | None = None,
    validate: bool = True,
) -> list[dict]:
    """Train from ``state.epoch`` up to ``config.max_epochs``; returns the log records."""
    records = []
    has_valid = validate and len(dataset.split_times("valid")) > 0
    while state.epoch < config.max_epochs:
        stats = train_epoch(state.model, dataset, config, state.optimizer, state.rng, state.epoch + 1)
        state.epoch += 1
        record = {"epoch": state.epoch, "l_pred": stats.l_pred, "l_dis": stats.l_dis}
        if has_valid:
            report = evaluate_split(state.model, dataset, "valid", config.m, config.k, config.ablation)
            record["valid_mrr"] = report.mrr
            if report.mrr > state.best_valid:
                state.best_valid, state.bad_epochs = report.mrr, 0
            else:
                state.bad_epochs += 1
        else:
            record["valid_mrr"] = None
        log.info("epoch %d  l_pred %.6f  l_dis %.6f  valid_mrr %s  (%.1fs)",
                 state.epoch, stats.l_pred, stats.l_dis, record["valid_mrr"], stats.seconds)
        records.append(record)
        if on_epoch is not None:
            on_epoch(state, record)
        if config.patience and state.bad_epochs >= config.patience:
            log.info("stopping: no validation improvement for %d epochs", config.patience)
            break
    return records
