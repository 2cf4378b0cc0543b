"""Saliency scores and score-based pruning.

Path sums are computed in closed form.  With ``A_l = |masked W_l|**p`` (kernel
entries summed as parallel edges on the channel graph), the forward accumulator
is ``F_l = A_l F_{l-1}`` with ``F_0 = 1`` and the backward one is
``B_{l-1} = A_l^T B_l`` with ``B_L = 1``.  For an edge ``e = (u -> v)``,
``F(u) B(v)`` is the sum over paths through ``e`` of ``|pi_p / theta_e|**p``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.special import logsumexp

from .netcore import SparseNet

OVERFLOW_LIMIT = 1e300


class PathSumOverflow(OverflowError):
    pass


ScoreMap = list[np.ndarray]
Scorer = Callable[[SparseNet], ScoreMap]


def _layer_mats(net: SparseNet, power: int) -> list[np.ndarray]:
    if power not in (1, 2):
        raise ValueError(f"power must be 1 or 2, got {power}")
    mats = []
    for w in net.masked_weights:
        a = np.abs(w) ** power
        if a.ndim == 4:
            a = a.sum(axis=(2, 3))
        mats.append(a)
    return mats


def _check(vec: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(vec)) or (vec.size and vec.max() > OVERFLOW_LIMIT):
        raise PathSumOverflow(
            f"{what} exceeded double range; reduce depth/width or use log_synflow_objective")


def trace_accumulators(net: SparseNet, power: int = 2) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Forward and backward path-sum vectors, one per unit layer."""
    mats = _layer_mats(net, power)
    F = [np.ones(net.arch.input_dim)]
    for a in mats:
        F.append(a @ F[-1])
        _check(F[-1], "forward path sum")
    B = [np.ones(net.arch.output_dim)]
    for a in reversed(mats):
        B.append(a.T @ B[-1])
        _check(B[-1], "backward path sum")
    B.reverse()
    return F, B


def synflow_objective(net: SparseNet, power: int = 2) -> float:
    """Sum over active input-output paths of ``|pi_p|**power``."""
    F, _ = trace_accumulators(net, power)
    return float(F[-1].sum())


def log_synflow_objective(net: SparseNet, power: int = 2) -> float:
    """Natural log of :func:`synflow_objective`, immune to overflow (``-inf`` if no path)."""
    with np.errstate(divide="ignore"):
        logF = np.zeros(net.arch.input_dim)
        for a in _layer_mats(net, power):
            loga = np.log(a)
            logF = logsumexp(loga + logF[None, :], axis=1)
    return float(logsumexp(logF))


def _edge_factor(F: list[np.ndarray], B: list[np.ndarray], net: SparseNet) -> list[np.ndarray]:
    """``F(u) B(v)`` broadcast to the shape of each layer's weights."""
    out = []
    for l, w in enumerate(net.weights):
        fb = np.outer(B[l + 1], F[l])
        if w.ndim == 4:
            fb = fb[:, :, None, None]
        out.append(np.broadcast_to(fb, w.shape))
    return out


def path_kernel_trace(net: SparseNet) -> float:
    """Trace of the path kernel: sum over paths and their edges of ``(pi_p / theta_i)**2``."""
    F, B = trace_accumulators(net, 2)
    total = 0.0
    for l, m in enumerate(net.mask):
        counts = m.reshape(m.shape[0], m.shape[1], -1).sum(axis=2).astype(np.float64)
        total += float(B[l + 1] @ counts @ F[l])
    if not math.isfinite(total):
        raise PathSumOverflow("path kernel trace overflowed")
    return total


def synflow_score(net: SparseNet, power: int = 1) -> ScoreMap:
    """Per-entry ``|theta| F(u) B(v)``; power 1 is SynFlow, power 2 is SynFlow-L2."""
    F, B = trace_accumulators(net, power)
    return [np.abs(w) * fb for w, fb in zip(net.masked_weights, _edge_factor(F, B, net))]


def magnitude_score(net: SparseNet) -> ScoreMap:
    return [np.abs(w) for w in net.masked_weights]


def random_score(net: SparseNet, seed: int = 0) -> ScoreMap:
    """I.i.d. Uniform(0, 1) scores, one stream for the whole network."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    out = []
    for w in net.weights:
        s = rng.random(w.shape)
        s[s == 0.0] = np.nextafter(0.0, 1.0)
        out.append(s)
    return out


def snip_score(net: SparseNet, batches, loss: str = "mse", loss_scale: float = 1.0) -> ScoreMap:
    """``|dL/dtheta * theta|`` summed over batches.

    ``batches`` is a Dataset or an iterable of ``(inputs, targets)`` pairs.
    """
    from .tasks import Dataset
    from .trainer import loss_gradients

    if isinstance(batches, Dataset):
        batches = [(batches.inputs, batches.targets)]
    batches = list(batches)
    if not batches or any(len(x) == 0 for x, _ in batches):
        raise ValueError("SNIP needs a nonempty batch")
    total = [np.zeros(w.shape) for w in net.weights]
    for x, y in batches:
        _, grads = loss_gradients(net, x, y, loss, loss_scale)
        for acc, g in zip(total, grads):
            acc += g
    return [np.abs(g * w) for g, w in zip(total, net.masked_weights)]


def scores_to_json(scores: ScoreMap) -> str:
    """Per-layer shapes and little-endian f64 hex, the layout used for weights."""
    return json.dumps({"shapes": [list(s.shape) for s in scores],
                       "scores": [np.asarray(s, dtype="<f8").tobytes().hex() for s in scores]})


def scores_from_json(text: str) -> ScoreMap:
    d = json.loads(text)
    return [np.frombuffer(bytes.fromhex(h), dtype="<f8").astype(np.float64).reshape(shape)
            for shape, h in zip(d["shapes"], d["scores"])]


# Pruning ----------------------------------------------------------------------

@dataclass(frozen=True)
class PruneSchedule:
    """Exponential density decay: the density after step ``t`` of ``T`` is ``rho**(t/T)``."""

    iterations: int = 100

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("a schedule needs at least one iteration")

    def keep_counts(self, target_density: float, total: int) -> list[int]:
        from .walks import target_param_count

        final = target_param_count(target_density, total)
        T = self.iterations
        counts = [max(final, target_param_count(target_density ** (t / T), total))
                  for t in range(1, T)]
        counts.append(final)
        return counts


ONE_SHOT = PruneSchedule(1)


def _keep_top(scores: ScoreMap, mask: list[np.ndarray], k: int) -> list[np.ndarray]:
    flat_scores = np.concatenate([s.ravel() for s in scores])
    flat_mask = np.concatenate([m.ravel() for m in mask])
    active = np.flatnonzero(flat_mask)
    if k >= active.size:
        return [m.copy() for m in mask]
    # highest score first; ties keep the lower flat index
    order = np.lexsort((active, -flat_scores[active]))
    keep = np.zeros(flat_mask.size, dtype=bool)
    keep[active[order[:k]]] = True
    out, pos = [], 0
    for m in mask:
        out.append(keep[pos:pos + m.size].reshape(m.shape))
        pos += m.size
    return out


def prune_by_score(net: SparseNet, scorer: Scorer, schedule: PruneSchedule,
                   target_density: float) -> SparseNet:
    """Iteratively drop the globally lowest-scoring active entries.

    Scores are recomputed on the current mask at every step of the schedule.
    """
    if not 0 < target_density <= 1:
        raise ValueError(f"target density must be in (0, 1], got {target_density}")
    current = net
    for k in schedule.keep_counts(target_density, net.arch.total_params):
        scores = scorer(current)
        current = current.with_mask(_keep_top(scores, list(current.mask), k))
    return current


def synflow_prune(net: SparseNet, target_density: float, power: int = 1,
                  iterations: int = 100) -> SparseNet:
    return prune_by_score(net, lambda n: synflow_score(n, power), PruneSchedule(iterations),
                          target_density)
