"""Desk-scale training of masked dense MLPs with hand-written backprop.

Hidden layers are bias-free ReLU, the output layer is linear, so a forward pass
is exactly the sum over active paths of ``pi_p a_p(x) x_i``.
"""
from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .netcore import SparseNet


class TrainingDivergence(RuntimeError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"non-finite training loss {loss} in epoch {epoch}")
        self.epoch = epoch


# Config ------------------------------------------------------------------------

@dataclass(frozen=True)
class SGD:
    lr: float = 0.01
    momentum: float = 0.0

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")


@dataclass(frozen=True)
class Adam:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")


@dataclass(frozen=True)
class ExponentialPerEpoch:
    factor: float = 0.95

    def scale(self, epoch: int) -> float:
        return self.factor ** epoch


@dataclass(frozen=True)
class StepDrop:
    epochs: tuple[int, ...] = ()
    factor: float = 0.1

    def scale(self, epoch: int) -> float:
        return self.factor ** sum(1 for e in self.epochs if epoch >= e)


@dataclass(frozen=True)
class ConstantLR:
    def scale(self, epoch: int) -> float:
        return 1.0


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    optimizer: SGD | Adam = field(default_factory=Adam)
    lr_decay: ExponentialPerEpoch | StepDrop | ConstantLR = field(default_factory=ConstantLR)
    loss: str = "mse"
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}; expected one of {sorted(LOSSES)}")


# Losses --------------------------------------------------------------------------

def _mse(out: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    diff = out - y
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


def _softmax_xent(out: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """``y`` holds one-hot rows or integer class labels."""
    if y.ndim == 1:
        onehot = np.zeros_like(out)
        onehot[np.arange(len(y)), y.astype(int)] = 1.0
        y = onehot
    z = out - out.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = out.shape[0]
    return float(-(y * logp).sum() / n), (np.exp(logp) - y) / n


LOSSES = {"mse": _mse, "xent": _softmax_xent}


# Forward / backward ------------------------------------------------------------

@dataclass
class ForwardCache:
    inputs: list[np.ndarray]     # input to each parametrized layer
    preacts: list[np.ndarray]    # pre-activation of each parametrized layer
    output: np.ndarray


def _check_input(net: SparseNet, x) -> np.ndarray:
    if not net.arch.is_dense:
        raise ValueError("training supports dense layers only")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != net.arch.input_dim:
        raise ValueError(f"expected inputs of shape (n, {net.arch.input_dim}), got {x.shape}")
    return x


def _forward(ws: list[np.ndarray], x: np.ndarray) -> ForwardCache:
    inputs, preacts = [], []
    h = x
    for l, w in enumerate(ws):
        inputs.append(h)
        z = h @ w.T
        preacts.append(z)
        h = np.maximum(z, 0.0) if l < len(ws) - 1 else z
    return ForwardCache(inputs, preacts, h)


def _backward(ws, masks, cache: ForwardCache, grad_out: np.ndarray) -> list[np.ndarray]:
    grads = [None] * len(ws)
    g = grad_out
    for l in reversed(range(len(ws))):
        if l < len(ws) - 1:
            g = g * (cache.preacts[l] > 0)       # ReLU'(0) = 0
        grads[l] = (g.T @ cache.inputs[l]) * masks[l]
        if l:
            g = g @ ws[l]
    return grads


def forward(net: SparseNet, x: np.ndarray) -> ForwardCache:
    return _forward(net.masked_weights, _check_input(net, x))


def backward(net: SparseNet, cache: ForwardCache, grad_out: np.ndarray) -> list[np.ndarray]:
    """Per-layer weight gradients given ``dLoss/doutput``; zero at masked entries."""
    return _backward(net.masked_weights, net.mask, cache, grad_out)


def loss_gradients(net: SparseNet, x, y, loss: str = "mse", scale: float = 1.0
                   ) -> tuple[float, list[np.ndarray]]:
    cache = forward(net, x)
    value, g = LOSSES[loss](cache.output, np.asarray(y, dtype=np.float64))
    grads = backward(net, cache, g * scale)
    return value * scale, grads


def _evaluate_arrays(ws, x, y, loss: str) -> dict:
    out = _forward(ws, np.asarray(x, dtype=np.float64)).output
    value, _ = LOSSES[loss](out, np.asarray(y, dtype=np.float64))
    metrics = {"loss": value}
    if loss == "xent":
        labels = y if np.ndim(y) == 1 else np.argmax(y, axis=1)
        metrics["accuracy"] = float(np.mean(np.argmax(out, axis=1) == labels))
    return metrics


def evaluate(net: SparseNet, x, y, loss: str = "mse") -> dict:
    return _evaluate_arrays(net.masked_weights, _check_input(net, x), y, loss)


# Optimizers (state only over active entries) ------------------------------------

class _Optimizer:
    def __init__(self, net: SparseNet, cfg):
        self.cfg = cfg
        self.idx = [np.flatnonzero(m.ravel()) for m in net.mask]
        self.t = 0
        if isinstance(cfg, Adam):
            self.m = [np.zeros(i.size) for i in self.idx]
            self.v = [np.zeros(i.size) for i in self.idx]
        else:
            self.buf = [np.zeros(i.size) for i in self.idx]

    def step(self, weights: list[np.ndarray], grads: list[np.ndarray], lr: float) -> None:
        self.t += 1
        cfg = self.cfg
        for l, (w, g) in enumerate(zip(weights, grads)):
            idx = self.idx[l]
            ga = g.ravel()[idx]
            flat = w.reshape(-1)
            if isinstance(cfg, Adam):
                self.m[l] = cfg.beta1 * self.m[l] + (1 - cfg.beta1) * ga
                self.v[l] = cfg.beta2 * self.v[l] + (1 - cfg.beta2) * ga * ga
                mhat = self.m[l] / (1 - cfg.beta1 ** self.t)
                vhat = self.v[l] / (1 - cfg.beta2 ** self.t)
                flat[idx] -= lr * mhat / (np.sqrt(vhat) + cfg.eps)
            else:
                self.buf[l] = cfg.momentum * self.buf[l] + ga
                flat[idx] -= lr * self.buf[l]


# Training ------------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    eval_loss: float | None = None
    eval_accuracy: float | None = None
    wall_time: float = field(default=0.0, compare=False)


@dataclass
class TrainReport:
    epochs: list[EpochRecord] = field(default_factory=list)
    final: dict = field(default_factory=dict)
    diverged_epoch: int | None = None

    def to_csv(self) -> str:
        buf = io.StringIO()
        names = ["epoch", "lr", "train_loss", "eval_loss", "eval_accuracy"]
        w = csv.DictWriter(buf, fieldnames=names, lineterminator="\n", extrasaction="ignore")
        w.writeheader()
        for e in self.epochs:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in asdict(e).items()})
        return buf.getvalue()

    def to_dict(self, timings: bool = False) -> dict:
        rows = []
        for e in self.epochs:
            d = asdict(e)
            if not timings:
                d.pop("wall_time")
            rows.append(d)
        return {"epochs": rows, "final": self.final, "diverged_epoch": self.diverged_epoch}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def train(net: SparseNet, dataset, config: TrainConfig, eval_set=None
          ) -> tuple[SparseNet, TrainReport]:
    """Minibatch training with a fixed per-seed shuffle order; the mask never changes."""
    x = _check_input(net, dataset.inputs)
    y = np.asarray(dataset.targets, dtype=np.float64)
    if len(x) == 0:
        raise ValueError("empty training set")
    weights = net.masked_weights
    masks = list(net.mask)
    opt = _Optimizer(net, config.optimizer)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(config.seed)))
    report = TrainReport()
    loss_fn = LOSSES[config.loss]
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        lr = config.optimizer.lr * config.lr_decay.scale(epoch)
        order = rng.permutation(len(x))
        total, seen = 0.0, 0
        for start in range(0, len(x), config.batch_size):
            b = order[start:start + config.batch_size]
            cache = _forward(weights, x[b])
            with np.errstate(over="ignore", invalid="ignore"):   # caught just below
                value, g = loss_fn(cache.output, y[b])
            if not math.isfinite(value):
                report.diverged_epoch = epoch
                raise TrainingDivergence(epoch, value)
            opt.step(weights, _backward(weights, masks, cache, g), lr)
            total += value * len(b)
            seen += len(b)
        rec = EpochRecord(epoch, lr, total / seen)
        if eval_set is not None:
            m = _evaluate_arrays(weights, eval_set.inputs, eval_set.targets, config.loss)
            rec.eval_loss = m["loss"]
            rec.eval_accuracy = m.get("accuracy")
        rec.wall_time = time.perf_counter() - t0
        report.epochs.append(rec)
    # masked-out entries of the store keep their initial values
    trained = net.with_weights([np.where(m, w, w0) for w, w0, m in zip(weights, net.weights, masks)])
    final = {"train_loss": evaluate(trained, x, y, config.loss)["loss"]}
    if eval_set is not None:
        m = evaluate(trained, eval_set.inputs, eval_set.targets, config.loss)
        final["eval_loss"] = m["loss"]
        if "accuracy" in m:
            final["eval_accuracy"] = m["accuracy"]
    report.final = final
    return trained, report
