"""Training loop: Adam, warm-up + cosine learning-rate schedule, gradient clipping."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autonn as nn
from .datagen import SyntheticSample
from .edgegraph import to_edge_graph
from .model import GraphTensors, LayerStack, collate, prepare
from .ordering import all_orders

log = logging.getLogger(__name__)

TASKS = ("classification", "regression", "ranking")
RANK_THRESHOLD = 1e-3

# named random sub-streams derived from a single seed
STREAMS = {"data": 0, "init": 1, "shuffle": 2, "split": 3, "verify": 4}


def stream(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng([seed, STREAMS[name]])


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 100
    warmup_epochs: int = 10
    base_lr: float = 1e-3
    clip_norm: float = 5.0
    batch_size: int = 32
    seed: int = 0
    task: str = "classification"
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ValueError("warmup_epochs must be in [0, epochs)")
        if self.base_lr < 0:
            raise ValueError("base_lr must be non-negative")
        if self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        self.betas = tuple(self.betas)


def cosine_warmup_lr(epoch: int, cfg: TrainConfig) -> float:
    """Linear ramp from 0 over the warm-up epochs, then half-cosine decay."""
    if not 0 <= epoch < cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs})")
    w = cfg.warmup_epochs
    if epoch < w:
        return cfg.base_lr * epoch / w
    return cfg.base_lr * 0.5 * (1.0 + math.cos(math.pi * (epoch - w) / (cfg.epochs - w)))


# -- optimizer pieces ------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> tuple[dict[str, np.ndarray], AdamState]:
    b1, b2 = betas
    t = state.step + 1
    new_p, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name} {p.shape}")
        if not np.all(np.isfinite(g)):
            raise nn.NonFiniteError(f"non-finite gradient for {name}")
        m = b1 * state.m.get(name, 0.0) + (1 - b1) * g
        v = b2 * state.v.get(name, 0.0) + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        new_p[name] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
        new_m[name], new_v[name] = m, v
    return new_p, AdamState(new_m, new_v, t)


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_grad_norm(grads: Mapping[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    norm = global_norm(grads)
    if norm <= max_norm:
        return dict(grads)
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}


# -- losses and metrics ------------------------------------------------------------


def cross_entropy(logits, label):
    """Softmax cross-entropy; returns a Tensor for Tensor input, else a float."""
    if isinstance(logits, nn.Tensor):
        return nn.softmax_cross_entropy(logits, label)
    tape = nn.Tape()
    return nn.softmax_cross_entropy(tape.constant(logits), label).item()


def l1_loss(pred, target):
    if isinstance(pred, nn.Tensor):
        return nn.l1(pred, target)
    tape = nn.Tape()
    return nn.l1(tape.constant(np.atleast_1d(pred)), target).item()


def ranking_accuracy(pairs: Sequence[tuple[float, float, str]], threshold: float = RANK_THRESHOLD) -> float:
    """Fraction of pairs whose predictions differ by more than ``threshold`` in the labelled direction.

    ``label`` names the member with the smaller target (``"a"`` or ``"b"``).
    """
    if not pairs:
        raise ValueError("no pairs to score")
    if threshold < 0:
        raise ValueError("threshold must be non-negative")
    hits = 0
    for a, b, label in pairs:
        if label not in ("a", "b"):
            raise ValueError(f"pair label must be 'a' or 'b', got {label!r}")
        if abs(a - b) > threshold and ((a < b) == (label == "a")):
            hits += 1
    return hits / len(pairs)


# -- data plumbing ---------------------------------------------------------------------


@dataclass
class Encoded:
    tensors: list[GraphTensors]
    labels: np.ndarray
    pair_ids: np.ndarray


def encode(samples: Sequence[SyntheticSample], k: int, permissive: bool = False) -> Encoded:
    tensors = []
    for s in samples:
        eg = to_edge_graph(s.graph)
        tensors.append(prepare(eg, all_orders(eg, permissive), k))
    return Encoded(
        tensors,
        np.array([s.label for s in samples]),
        np.array([s.meta.get("pair_id", -1) for s in samples]),
    )


def split_dataset(samples: Sequence[SyntheticSample], seed: int, fractions=(0.7, 0.1, 0.2)):
    """Split by enantiomer pair so mirror partners never straddle splits."""
    ids = sorted({s.meta.get("pair_id", i) for i, s in enumerate(samples)})
    perm = stream(seed, "split").permutation(len(ids))
    n_train = int(round(fractions[0] * len(ids)))
    n_valid = int(round(fractions[1] * len(ids)))
    where = {}
    for rank, pos in enumerate(perm):
        where[ids[pos]] = 0 if rank < n_train else 1 if rank < n_train + n_valid else 2
    parts = ([], [], [])
    for i, s in enumerate(samples):
        parts[where[s.meta.get("pair_id", i)]].append(s)
    return {"train": parts[0], "valid": parts[1], "test": parts[2]}


def predict(stack: LayerStack, data: Encoded, batch_size: int = 256) -> np.ndarray:
    outs = []
    for lo in range(0, len(data.tensors), batch_size):
        outs.append(stack.predict(collate(data.tensors[lo : lo + batch_size])))
    return np.concatenate(outs) if outs else np.zeros((0, stack.config.out_dim))


def ranking_pairs_from(preds: np.ndarray, data: Encoded) -> list[tuple[float, float, str]]:
    groups: dict[int, list[int]] = {}
    for i, pid in enumerate(data.pair_ids.tolist()):
        groups.setdefault(pid, []).append(i)
    pairs = []
    for pid in sorted(groups):
        idx = groups[pid]
        if len(idx) != 2:
            continue
        a, b = idx
        label = "a" if data.labels[a] < data.labels[b] else "b"
        pairs.append((float(preds[a]), float(preds[b]), label))
    return pairs


def evaluate(stack: LayerStack, data: Encoded, task: str) -> dict[str, float]:
    out = predict(stack, data)
    if task == "classification":
        labels = data.labels.astype(np.int64)
        return {
            "loss": cross_entropy(out, labels),
            "accuracy": float(np.mean(np.argmax(out, axis=1) == labels)),
        }
    pred = out[:, 0]
    metrics = {"mae": float(np.mean(np.abs(pred - data.labels.astype(np.float64))))}
    if task == "ranking":
        pairs = ranking_pairs_from(pred, data)
        metrics["ranking_accuracy"] = ranking_accuracy(pairs) if pairs else 0.0
    return metrics


def _score(metrics: dict[str, float], task: str) -> tuple:
    """Larger is better."""
    if task == "classification":
        return (metrics["accuracy"], -metrics["loss"])
    if task == "ranking":
        return (metrics["ranking_accuracy"], -metrics["mae"])
    return (-metrics["mae"],)


PRIMARY_METRIC = {"classification": "accuracy", "regression": "mae", "ranking": "ranking_accuracy"}


def valid_metric(metrics: dict[str, float], task: str) -> float:
    return metrics[PRIMARY_METRIC[task]]


def _pair_shuffle(pair_ids: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Shuffled sample order that keeps enantiomer partners adjacent.

    With both partners in one batch the achiral part of their gradients
    cancels, leaving the chirality signal.
    """
    groups: dict[int, list[int]] = {}
    for i, pid in enumerate(pair_ids.tolist()):
        groups.setdefault(pid if pid >= 0 else -1 - i, []).append(i)
    keys = sorted(groups)
    return np.array([i for g in rng.permutation(len(keys)) for i in groups[keys[g]]], dtype=np.int64)


def _loss(stack: LayerStack, P, batch: GraphTensors, labels: np.ndarray, task: str) -> nn.Tensor:
    out = stack.forward(P, batch)
    if task == "classification":
        return nn.softmax_cross_entropy(out, labels.astype(np.int64))
    return nn.l1(nn.reshape(out, (batch.n_graphs,)), labels.astype(np.float64))


def train_model(
    stack: LayerStack,
    dataset: Mapping[str, Sequence[SyntheticSample]],
    cfg: TrainConfig,
    on_epoch: Callable[[dict], None] | None = None,
    permissive: bool = False,
) -> dict:
    """Fit ``stack`` in place; the best-validation parameters are kept.

    Returns the per-epoch history plus metrics of the selected parameters on
    every split.
    """
    k = stack.config.k
    enc = {name: encode(dataset[name], k, permissive) for name in ("train", "valid", "test")}
    train = enc["train"]
    if not train.tensors:
        raise ValueError("empty training split")
    rng = stream(cfg.seed, "shuffle")
    state = AdamState()
    history = []
    best, best_score, best_epoch = None, None, -1
    for epoch in range(cfg.epochs):
        lr = cosine_warmup_lr(epoch, cfg)
        perm = _pair_shuffle(train.pair_ids, rng)
        total, seen = 0.0, 0
        for lo in range(0, len(perm), cfg.batch_size):
            idx = perm[lo : lo + cfg.batch_size]
            batch = collate([train.tensors[i] for i in idx])
            tape = nn.Tape()
            try:
                loss = _loss(stack, tape.params(stack.params), batch, train.labels[idx], cfg.task)
                grads = nn.backward(tape, loss)
            except nn.NonFiniteError as e:
                raise TrainingDiverged(f"epoch {epoch}, batch starting at {lo}: {e}") from e
            grads = clip_grad_norm(grads, cfg.clip_norm)
            stack.params, state = adam_step(stack.params, grads, state, lr, cfg.betas, cfg.eps)
            total += loss.item() * len(idx)
            seen += len(idx)
        train_loss = total / seen
        if not math.isfinite(train_loss):
            raise TrainingDiverged(f"epoch {epoch}: training loss {train_loss}")
        valid = evaluate(stack, enc["valid"], cfg.task) if enc["valid"].tensors else evaluate(stack, train, cfg.task)
        record = {"epoch": epoch, "lr": lr, "train_loss": train_loss, "valid_metric": valid_metric(valid, cfg.task)}
        history.append(record)
        if on_epoch is not None:
            on_epoch(record)
        log.debug("epoch %d lr %.3g loss %.4f valid %.4f", epoch, lr, train_loss, record["valid_metric"])
        score = _score(valid, cfg.task)
        if best_score is None or score > best_score:
            best, best_score, best_epoch = {n: a.copy() for n, a in stack.params.items()}, score, epoch
    stack.params = best
    final = {name: evaluate(stack, e, cfg.task) for name, e in enc.items() if e.tensors}
    return {"history": history, "best_epoch": best_epoch, "final": final}
