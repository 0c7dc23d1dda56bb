"""Optimizers, the epoch loop, and evaluation metrics.

Training is plain backprop on the replacement objective: forward, cross
entropy, reverse sweep, parameter step. The trainable set is whatever the
builder registered (retained blocks, head, synthesis coefficients and the
computing layers' own BN affines); anchors train only through their own
blocks.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass

import numpy as np

from .builder import Network
from .tensor import Tensor, backward, cross_entropy_loss

log = logging.getLogger(__name__)


@dataclass
class Metrics:
    epoch: int
    split: str
    loss: float
    accuracy: float
    top5: float | None
    wall_seconds: float
    param_count: int
    flops: int

    def to_record(self) -> dict:
        rec = {"epoch": self.epoch, "split": self.split, "loss": self.loss,
               "accuracy": self.accuracy, "wall_seconds": self.wall_seconds,
               "param_count": self.param_count, "flops": self.flops}
        if self.top5 is not None:
            rec["top5"] = self.top5
        return rec


class SGD:
    """Classic momentum SGD with coupled weight decay.

    Decay is skipped for decay-exempt parameters (synthesis coefficients and
    BN/LN affines). Missing gradients are treated as zero with a warning.
    """

    def __init__(self, registry, lr: float, momentum: float = 0.9,
                 weight_decay: float = 0.0):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.registry = registry
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {pid: np.zeros_like(p.data) for pid, p in registry.params.items()}
        self.steps = 0

    def step(self, grads: dict) -> None:
        self.steps += 1
        for pid, p in self.registry.params.items():
            g = grads.get(pid)
            if g is None:
                log.warning("no gradient for %s; treating as zero", pid)
                g = np.zeros_like(p.data)
            if self.weight_decay and not p.decay_exempt:
                g = g + self.weight_decay * p.data
            v = self.momentum * self.velocity[pid] + g
            self.velocity[pid] = v
            p.data = p.data - self.lr * v

    def state_tensors(self) -> dict:
        return {f"opt.v.{pid}": v for pid, v in self.velocity.items()}

    def load_state_tensors(self, tensors: dict) -> None:
        for pid in self.velocity:
            self.velocity[pid] = tensors[f"opt.v.{pid}"]


class AdamW:
    """Decoupled-decay Adam with bias-corrected moments."""

    def __init__(self, registry, lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.registry = registry
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = {pid: np.zeros_like(p.data) for pid, p in registry.params.items()}
        self.v = {pid: np.zeros_like(p.data) for pid, p in registry.params.items()}
        self.steps = 0

    def step(self, grads: dict) -> None:
        self.steps += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1**self.steps
        c2 = 1.0 - b2**self.steps
        for pid, p in self.registry.params.items():
            g = grads.get(pid)
            if g is None:
                log.warning("no gradient for %s; treating as zero", pid)
                g = np.zeros_like(p.data)
            if self.weight_decay and not p.decay_exempt:
                p.data = p.data - self.lr * self.weight_decay * p.data
            self.m[pid] = b1 * self.m[pid] + (1 - b1) * g
            self.v[pid] = b2 * self.v[pid] + (1 - b2) * (g * g)
            m_hat = self.m[pid] / c1
            v_hat = self.v[pid] / c2
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state_tensors(self) -> dict:
        out = {f"opt.m.{pid}": m for pid, m in self.m.items()}
        out.update({f"opt.v.{pid}": v for pid, v in self.v.items()})
        return out

    def load_state_tensors(self, tensors: dict) -> None:
        for pid in self.m:
            self.m[pid] = tensors[f"opt.m.{pid}"]
            self.v[pid] = tensors[f"opt.v.{pid}"]


def sgd_step(registry, grads, state: SGD) -> None:
    state.step(grads)


def adamw_step(registry, grads, state: AdamW) -> None:
    state.step(grads)


def cosine_lr(base_lr: float, epoch: int, total_epochs: int) -> float:
    if total_epochs <= 1:
        return base_lr
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * epoch / (total_epochs - 1)))


def make_optimizer(net: Network, kind: str, lr: float, momentum: float = 0.9,
                   weight_decay: float = 0.0, betas=(0.9, 0.999)):
    if kind == "sgd":
        return SGD(net.registry, lr, momentum, weight_decay)
    if kind == "adamw":
        return AdamW(net.registry, lr, betas=betas, weight_decay=weight_decay)
    raise ValueError(f"unknown optimizer {kind!r}")


def _batch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    # the shuffle is a pure function of (seed, epoch): resumed runs recreate it
    return np.random.default_rng([seed, epoch]).permutation(n)


def _counted_flops(net: Network) -> int:
    from .cost import flop_count

    return flop_count(net, batch=1)["total"]


def train_epoch(net: Network, data, opt, seed: int, epoch: int = 0,
                batch_size: int = 32, grad_workers: int = 1) -> Metrics:
    """One pass of forward / cross-entropy / backward / step over shuffled batches.

    ``grad_workers`` > 1 splits each batch into that many micro-batches whose
    gradients are summed in fixed order (BN then normalizes per micro-batch);
    bitwise determinism is only guaranteed in the single-worker mode.
    """
    x_all, y_all = data
    n = len(y_all)
    if n == 0:
        raise ValueError("train_epoch: empty dataset")
    start = time.perf_counter()
    order = _batch_order(n, seed, epoch)
    total_loss = 0.0
    correct = 0
    for lo in range(0, n, batch_size):
        idx = order[lo : lo + batch_size]
        xb, yb = x_all[idx], y_all[idx]
        if grad_workers <= 1:
            logits = net.forward(Tensor(xb), "train")
            loss = cross_entropy_loss(logits, yb)
            grads = backward(loss, net.registry.params)
            batch_logits = logits.data
            batch_loss = loss.item()
        else:
            grads = None
            batch_logits = np.zeros((len(yb), net.spec.num_classes))
            batch_loss = 0.0
            chunks = np.array_split(np.arange(len(yb)), grad_workers)
            for chunk in chunks:
                if len(chunk) == 0:
                    continue
                logits = net.forward(Tensor(xb[chunk]), "train")
                loss = cross_entropy_loss(logits, yb[chunk])
                share = len(chunk) / len(yb)
                g = backward(loss, net.registry.params)
                if grads is None:
                    grads = {pid: share * gv for pid, gv in g.items()}
                else:
                    for pid in grads:
                        grads[pid] = grads[pid] + share * g[pid]
                batch_logits[chunk] = logits.data
                batch_loss += share * loss.item()
        opt.step(grads)
        total_loss += batch_loss * len(yb)
        correct += int((batch_logits.argmax(axis=1) == yb).sum())
    return Metrics(epoch=epoch, split="train", loss=total_loss / n,
                   accuracy=correct / n, top5=None,
                   wall_seconds=time.perf_counter() - start,
                   param_count=net.registry.trainable_count(),
                   flops=_counted_flops(net))


def evaluate(net: Network, data, batch_size: int = 64, epoch: int = 0) -> Metrics:
    x_all, y_all = data
    n = len(y_all)
    start = time.perf_counter()
    total_loss = 0.0
    correct = 0
    correct5 = 0
    classes = net.spec.num_classes
    for lo in range(0, n, batch_size):
        xb, yb = x_all[lo : lo + batch_size], y_all[lo : lo + batch_size]
        logits = net.forward(Tensor(xb), "eval")
        total_loss += cross_entropy_loss(logits, yb).item() * len(yb)
        correct += int((logits.data.argmax(axis=1) == yb).sum())
        if classes >= 5:
            top5 = np.argsort(logits.data, axis=1)[:, -5:]
            correct5 += int(sum(y in row for y, row in zip(yb, top5)))
    return Metrics(epoch=epoch, split="eval", loss=total_loss / n,
                   accuracy=correct / n,
                   top5=correct5 / n if classes >= 5 else None,
                   wall_seconds=time.perf_counter() - start,
                   param_count=net.registry.trainable_count(),
                   flops=_counted_flops(net))


def fit(net: Network, train_data, opt, epochs: int, seed: int = 0,
        batch_size: int = 32, schedule: str | None = None,
        eval_data=None) -> list[Metrics]:
    """Plain training loop (no checkpointing); the CLI harness adds persistence."""
    base_lr = opt.lr
    history: list[Metrics] = []
    for epoch in range(epochs):
        if schedule == "cosine":
            opt.lr = cosine_lr(base_lr, epoch, epochs)
        history.append(train_epoch(net, train_data, opt, seed, epoch, batch_size))
        if eval_data is not None:
            history.append(evaluate(net, eval_data, epoch=epoch))
    opt.lr = base_lr
    return history
