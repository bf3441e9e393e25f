"""Desk-scale training loop for the toy backbone."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, TrainOptions
from .model import ModelConfig, SECViT
from .nn import AdamW, init_linear, linear
from .tensor import DTYPES, Tensor, cross_entropy_logits, no_grad

log = logging.getLogger(__name__)

METRICS_HEADER = "epoch,lr,loss,train_acc"


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class History:
    epochs: list[dict] = field(default_factory=list)
    final_acc: float = float("nan")

    @property
    def losses(self) -> list[float]:
        return [e["loss"] for e in self.epochs]

    def to_csv(self) -> str:
        rows = [METRICS_HEADER]
        rows += [f"{e['epoch']},{e['lr']:.8g},{e['loss']!r},{e['train_acc']:.6f}" for e in self.epochs]
        return "\n".join(rows) + "\n"


def cosine_lr(base: float, step: int, total: int) -> float:
    return 0.5 * base * (1.0 + math.cos(math.pi * step / max(1, total)))


def evaluate(model: SECViT, data: Dataset, batch_size: int = 200) -> float:
    correct = 0
    with no_grad():
        for s in range(0, len(data), batch_size):
            x = Tensor(data.images[s : s + batch_size].astype(model.dtype))
            correct += int((model(x).data.argmax(1) == data.labels[s : s + batch_size]).sum())
    return correct / len(data)


def train(cfg: ModelConfig, data: Dataset, opts: TrainOptions, target_acc: float | None = None) -> tuple[SECViT, History]:
    """Train with AdamW and per-step cosine decay.

    Reported ``train_acc`` per epoch is the running accuracy over that
    epoch's batches; ``History.final_acc`` is a clean pass over the training
    set after the last epoch. With ``target_acc`` set, training stops after
    the first epoch whose running accuracy reaches it.
    """
    dtype = DTYPES[opts.dtype]
    model = SECViT.init(cfg, seed=opts.seed, dtype=dtype)
    params = model.named_parameters()
    opt = AdamW(params, lr=opts.lr, weight_decay=opts.weight_decay)
    rng = np.random.default_rng(opts.seed + 1)
    n = len(data)
    steps_per_epoch = -(-n // opts.batch_size)
    total = steps_per_epoch * opts.epochs
    hist = History()
    step = 0
    for epoch in range(opts.epochs):
        order = rng.permutation(n)
        loss_sum, correct = 0.0, 0
        for s in range(0, n, opts.batch_size):
            batch = order[s : s + opts.batch_size]
            x = Tensor(data.images[batch].astype(dtype))
            y = data.labels[batch]
            opt.lr = cosine_lr(opts.lr, step, total)
            opt.zero_grad()
            try:
                logits = model(x)
                loss = cross_entropy_logits(logits, y)
                loss.backward()
            except FloatingPointError as exc:
                raise TrainingDiverged(f"epoch {epoch}, step {step}: {exc}") from exc
            if not np.isfinite(loss.data):
                raise TrainingDiverged(f"epoch {epoch}, step {step}: loss is {loss.data}")
            with np.errstate(over="ignore", invalid="ignore"):
                opt.step()
            bad = next((k for k, p in params.items() if not np.isfinite(p.data).all()), None)
            if bad is not None:
                raise TrainingDiverged(f"epoch {epoch}, step {step}: non-finite parameter {bad}")
            step += 1
            loss_sum += float(loss.data) * len(batch)
            correct += int((logits.data.argmax(1) == y).sum())
        rec = {"epoch": epoch, "lr": opt.lr, "loss": loss_sum / n, "train_acc": correct / n}
        hist.epochs.append(rec)
        log.info("epoch %d loss %.4f acc %.4f", epoch, rec["loss"], rec["train_acc"])
        if target_acc is not None and rec["train_acc"] >= target_acc:
            break
    hist.final_acc = evaluate(model, data)
    return model, hist


def train_linear_probe(data: Dataset, opts: TrainOptions) -> float:
    """Softmax regression on raw pixels under the same optimizer budget; returns train accuracy."""
    dtype = DTYPES[opts.dtype]
    X = data.images.reshape(len(data), -1).astype(dtype)
    rng = np.random.default_rng(opts.seed)
    p = init_linear(rng, X.shape[1], data.num_classes, dtype)
    opt = AdamW({"w": p.weight, "b": p.bias}, lr=opts.lr, weight_decay=opts.weight_decay)
    n = len(data)
    total = -(-n // opts.batch_size) * opts.epochs
    step = 0
    for _ in range(opts.epochs):
        order = rng.permutation(n)
        for s in range(0, n, opts.batch_size):
            batch = order[s : s + opts.batch_size]
            opt.lr = cosine_lr(opts.lr, step, total)
            opt.zero_grad()
            cross_entropy_logits(linear(Tensor(X[batch]), p), data.labels[batch]).backward()
            opt.step()
            step += 1
    with no_grad():
        return float((linear(Tensor(X), p).data.argmax(1) == data.labels).mean())
