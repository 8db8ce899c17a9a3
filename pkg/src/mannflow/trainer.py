"""Plain SGD trainer for the memory network.

Only exists to produce weights with realistic logit distributions for
calibration on parsed bAbI tasks; nothing here is tuned for accuracy.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from types import SimpleNamespace
from typing import Optional, Sequence

import numpy as np

from .errors import DivergenceError, InvalidInputError
from .model import (
    Dimensions,
    ModelWeights,
    address,
    bag_of_words,
    check_sentence,
    controller_step,
    oracle_infer,
    output_logits,
    read_vector,
    softmax,
)

log = logging.getLogger(__name__)

@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    epochs: int = 50
    hops: int = 3
    seed: int = 0
    init_scale: float = 0.1
    anneal: Optional[tuple] = None  # (factor, every_k_epochs)
    clip_norm: float = 40.0
    shared_embeddings: bool = False
    tie_question_embedding: bool = False

    def __post_init__(self):
        if self.learning_rate <= 0 or self.init_scale <= 0:
            raise InvalidInputError("learning_rate and init_scale must be positive")
        if self.epochs < 0 or self.hops < 1:
            raise InvalidInputError("epochs must be >= 0 and hops >= 1")
        if self.anneal is not None:
            factor, every = self.anneal
            if factor <= 0 or every < 1:
                raise InvalidInputError(f"bad anneal schedule {self.anneal}")


@dataclass
class EpochStats:
    epoch: int
    loss: float
    train_accuracy: float


def cross_entropy(z, y: int) -> tuple[float, np.ndarray]:
    """Loss and its gradient with respect to the logits."""
    p = softmax(z)
    loss = -math.log(max(p[y], np.finfo(float).tiny))
    dz = p.copy()
    dz[y] -= 1.0
    return loss, dz


def forward_backward(model: ModelWeights, sample, hops: Optional[int] = None):
    """Softmax cross-entropy loss and gradients for every weight matrix.

    ``sample`` is ``(story, question, label)``; ``model`` is anything with
    ``dims`` and the five weight attributes. Gradients are returned as a
    dict keyed like :meth:`ModelWeights.arrays`, always with separate
    ``W_emb_a`` and ``W_emb_c`` entries; for shared embeddings the caller
    sums them.
    """
    story, q, y = sample
    T = model.dims.hops if hops is None else hops
    V = model.dims.vocab_size
    if not story or len(story) > model.dims.memory_slots:
        raise InvalidInputError(f"story length {len(story)} outside [1, {model.dims.memory_slots}]")
    if not 0 <= y < model.dims.output_dim:
        raise InvalidInputError(f"label {y} out of range")
    for s in story:
        check_sentence(s, V)
    check_sentence(q, V)

    bows = np.stack([bag_of_words(s, V) for s in story])  # n x V
    bq = bag_of_words(q, V)
    M_a = bows @ model.W_emb_a.T
    M_c = bows @ model.W_emb_c.T
    n = len(story)

    keys, attns = [], []
    k = model.W_emb_q @ bq
    h = None
    for _ in range(T):
        a = address(M_a, k, n)
        r = read_vector(M_c, a, n)
        h = controller_step(r, k, model.W_r)
        keys.append(k)
        attns.append(a)
        k = h
    z = output_logits(h, model.W_o)
    loss, dz = cross_entropy(z, y)
    if not math.isfinite(loss):
        raise DivergenceError(f"non-finite loss {loss}")

    g_o = np.outer(dz, h)
    dh = model.W_o.T @ dz
    g_r = np.zeros_like(model.W_r)
    dM_a = np.zeros_like(M_a)
    dM_c = np.zeros_like(M_c)
    for t in reversed(range(T)):
        k, a = keys[t], attns[t]
        g_r += np.outer(dh, k)
        dk = model.W_r.T @ dh
        dM_c += np.outer(a, dh)
        da = M_c @ dh
        dp = a * (da - a @ da)
        dM_a += np.outer(dp, k)
        dk += M_a.T @ dp
        dh = dk
    grads = {
        "W_emb_a": dM_a.T @ bows,
        "W_emb_c": dM_c.T @ bows,
        "W_emb_q": np.outer(dh, bq),
        "W_r": g_r,
        "W_o": g_o,
    }
    return loss, grads


def init_model(dims: Dimensions, cfg: TrainConfig) -> ModelWeights:
    rng = np.random.default_rng(cfg.seed)
    model = ModelWeights.random(dims, rng, cfg.init_scale, cfg.shared_embeddings)
    if cfg.tie_question_embedding:
        model = model.replace(W_emb_q=model.W_emb_a)
    return model


def _combine(grads, cfg: TrainConfig) -> dict:
    g = dict(grads)
    if cfg.shared_embeddings:
        g["W_emb_a"] = g["W_emb_a"] + g.pop("W_emb_c")
    if cfg.tie_question_embedding:
        g["W_emb_a"] = g["W_emb_a"] + g.pop("W_emb_q")
    return g


def train(dataset: Sequence, dims: Dimensions, cfg: TrainConfig = TrainConfig(),
          history: Optional[list] = None) -> ModelWeights:
    """SGD over a seeded per-epoch shuffle of ``(story, question, label)`` triples.

    Per-epoch statistics are appended to ``history`` when given.
    """
    dataset = list(dataset)
    if not dataset:
        raise InvalidInputError("training dataset is empty")
    if dims.hops != cfg.hops:
        dims = Dimensions(dims.vocab_size, dims.embed_dim, dims.output_dim, dims.memory_slots, cfg.hops)
    model = init_model(dims, cfg)
    params = {k: np.array(v) for k, v in model.arrays().items()}
    rng = np.random.default_rng(cfg.seed + 1)
    lr = cfg.learning_rate

    def assemble():
        p = dict(params)
        if cfg.tie_question_embedding:
            p["W_emb_q"] = p["W_emb_a"]
        p.setdefault("W_emb_c", None)
        return ModelWeights(dims, shared_embeddings=cfg.shared_embeddings, **p)

    if cfg.tie_question_embedding:
        params.pop("W_emb_q")

    def view():
        # aliases, not copies: updates to params are visible immediately
        W_a = params["W_emb_a"]
        return SimpleNamespace(
            dims=dims,
            W_emb_a=W_a,
            W_emb_c=W_a if cfg.shared_embeddings else params["W_emb_c"],
            W_emb_q=W_a if cfg.tie_question_embedding else params["W_emb_q"],
            W_r=params["W_r"],
            W_o=params["W_o"],
        )

    current = view()
    for epoch in range(1, cfg.epochs + 1):
        if cfg.anneal is not None and epoch > 1 and (epoch - 1) % cfg.anneal[1] == 0:
            lr *= cfg.anneal[0]
        total = 0.0
        for idx in rng.permutation(len(dataset)):
            try:
                loss, grads = forward_backward(current, dataset[idx])
            except DivergenceError as exc:
                raise DivergenceError(f"epoch {epoch}, sample {idx}: {exc}") from exc
            total += loss
            grads = _combine(grads, cfg)
            norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
            scale = cfg.clip_norm / norm if norm > cfg.clip_norm else 1.0
            for name, g in grads.items():
                params[name] -= lr * scale * g
        mean_loss = total / len(dataset)
        if not math.isfinite(mean_loss):
            raise DivergenceError(f"epoch {epoch}: mean loss is {mean_loss}")
        acc = accuracy(assemble(), dataset)
        log.info("epoch %d loss %.4f acc %.3f", epoch, mean_loss, acc)
        if history is not None:
            history.append(EpochStats(epoch, mean_loss, acc))
    return assemble()


def accuracy(model: ModelWeights, dataset) -> float:
    dataset = list(dataset)
    hits = sum(int(oracle_infer(model, story, q)[0] == y) for story, q, y in dataset)
    return hits / len(dataset) if dataset else 0.0


def write_curve(history: Sequence[EpochStats], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "loss", "train_accuracy"])
        for row in history:
            w.writerow([row.epoch, repr(row.loss), repr(row.train_accuracy)])
