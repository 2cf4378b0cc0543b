"""PHEW: sparse masks built from the union of weight-biased input-output walks."""
from __future__ import annotations

import enum
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .netcore import Architecture, ConvChannel, SparseNet, min_density

log = logging.getLogger(__name__)

INVERSE_EPS = 1e-12


class WalkBias(enum.Enum):
    WEIGHT = "weight"
    UNIFORM = "uniform"
    INVERSE = "inverse"


class DegenerateDistributionError(ValueError):
    pass


class DensityBelowMinimumError(ValueError):
    pass


def transition_probs(weights: np.ndarray, bias: WalkBias) -> np.ndarray:
    """Next-hop distribution over candidate edges with the given magnitudes."""
    a = np.abs(np.asarray(weights, dtype=np.float64)).ravel()
    if a.size == 0:
        raise ValueError("no candidate edges")
    if bias is WalkBias.UNIFORM:
        return np.full(a.size, 1.0 / a.size)
    if not np.any(a > 0):
        raise DegenerateDistributionError("all candidate weights are zero")
    if bias is WalkBias.WEIGHT:
        p = a
    elif bias is WalkBias.INVERSE:
        p = 1.0 / (a + INVERSE_EPS)
    else:
        raise ValueError(f"unknown bias {bias!r}")
    return p / p.sum()


# Trace log -----------------------------------------------------------------

@dataclass(frozen=True)
class Hop:
    layer: int          # parametrized layer, 1-based
    src: int            # unit in layer ``layer - 1``
    dst: int            # unit in layer ``layer``
    entry: int | None = None   # flat kernel-entry index for conv layers

    def to_list(self) -> list:
        return [self.layer, self.src, self.dst, self.entry]


@dataclass(frozen=True)
class WalkRecord:
    direction: str
    start_unit: int
    hops: tuple[Hop, ...]

    def units(self) -> list[int]:
        """Visited unit per unit layer, input to output."""
        ordered = sorted(self.hops, key=lambda h: h.layer)
        return [ordered[0].src] + [h.dst for h in ordered]

    def to_json(self) -> str:
        return json.dumps({"direction": self.direction, "start": self.start_unit,
                           "hops": [h.to_list() for h in self.hops]})

    @classmethod
    def from_json(cls, line: str) -> "WalkRecord":
        d = json.loads(line)
        return cls(d["direction"], d["start"], tuple(Hop(*h) for h in d["hops"]))


@dataclass
class WalkTraceLog:
    walks: list[WalkRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.walks)

    def to_ndjson(self) -> str:
        return "".join(w.to_json() + "\n" for w in self.walks)

    @classmethod
    def from_ndjson(cls, text: str) -> "WalkTraceLog":
        return cls([WalkRecord.from_json(line) for line in text.splitlines() if line.strip()])


@dataclass
class WalkBudget:
    target_density: float
    target_params: int
    achieved_walk_count: int = 0
    achieved_params: int = 0
    total_params: int = 0
    forward_starts: np.ndarray | None = None
    backward_starts: np.ndarray | None = None

    @property
    def achieved_density(self) -> float:
        return self.achieved_params / self.total_params


# Walking -------------------------------------------------------------------

class _HopTable:
    """Cumulative next-hop distributions for one layer and direction.

    Rows are indexed by the current unit; built lazily on first visit.
    """

    def __init__(self, mags: np.ndarray, bias: WalkBias):
        self.mags = mags
        self.bias = bias
        self.rows: dict[int, np.ndarray] = {}

    def cdf(self, unit: int) -> np.ndarray:
        row = self.rows.get(unit)
        if row is None:
            try:
                p = transition_probs(self.mags[unit], self.bias)
            except DegenerateDistributionError:
                log.warning("all-zero weights out of unit %d; falling back to a uniform hop", unit)
                p = transition_probs(self.mags[unit], WalkBias.UNIFORM)
            row = np.cumsum(p)
            row[-1] = 1.0
            self.rows[unit] = row
        return row


def _draw(cdf: np.ndarray, rng: np.random.Generator) -> int:
    return int(min(np.searchsorted(cdf, rng.random(), side="right"), cdf.size - 1))


class Walker:
    """Precomputed hop distributions for walking one network.

    Walks read the full (unmasked) weight store: selection is memoryless, and the
    mask is the union of what was walked.
    """

    def __init__(self, net: SparseNet, bias: WalkBias):
        self.net = net
        self.bias = bias
        self.arch = net.arch
        self._fwd: list[_HopTable] = []
        self._bwd: list[_HopTable] = []
        self._entry: dict[tuple[int, int, int], np.ndarray] = {}
        for l, w in enumerate(net.weights):
            a = np.abs(w)
            if a.ndim == 4:
                a = a.sum(axis=(2, 3))          # kernel L1 norms on the channel graph
            self._fwd.append(_HopTable(a.T, bias))   # row = src unit, over dst units
            self._bwd.append(_HopTable(a, bias))     # row = dst unit, over src units

    def _entry_cdf(self, l: int, dst: int, src: int) -> np.ndarray:
        key = (l, dst, src)
        row = self._entry.get(key)
        if row is None:
            kern = self.net.weights[l][dst, src]
            try:
                p = transition_probs(kern, self.bias)
            except DegenerateDistributionError:
                p = transition_probs(kern, WalkBias.UNIFORM)
            row = np.cumsum(p)
            row[-1] = 1.0
            self._entry[key] = row
        return row

    def _hop(self, l: int, src: int, dst: int, rng: np.random.Generator,
             whole_kernel: bool) -> Hop:
        if isinstance(self.arch.layer_kinds[l], ConvChannel) and not whole_kernel:
            return Hop(l + 1, src, dst, _draw(self._entry_cdf(l, dst, src), rng))
        return Hop(l + 1, src, dst, None)

    def walk(self, direction: str, start_unit: int, rng: np.random.Generator,
             whole_kernel: bool = False) -> WalkRecord:
        L = self.arch.parametrized_layer_count
        hops = []
        if direction == "forward":
            if not 0 <= start_unit < self.arch.input_dim:
                raise ValueError(f"start unit {start_unit} is not an input unit")
            u = start_unit
            for l in range(L):
                v = _draw(self._fwd[l].cdf(u), rng)
                hops.append(self._hop(l, u, v, rng, whole_kernel))
                u = v
        elif direction == "backward":
            if not 0 <= start_unit < self.arch.output_dim:
                raise ValueError(f"start unit {start_unit} is not an output unit")
            v = start_unit
            for l in reversed(range(L)):
                u = _draw(self._bwd[l].cdf(v), rng)
                hops.append(self._hop(l, u, v, rng, whole_kernel))
                v = u
        else:
            raise ValueError(f"direction must be 'forward' or 'backward', got {direction!r}")
        return WalkRecord(direction, start_unit, tuple(hops))


def run_walk(net: SparseNet, direction: str, start_unit: int, bias: WalkBias,
             rng: np.random.Generator, whole_kernel: bool = False) -> WalkRecord:
    return Walker(net, bias).walk(direction, start_unit, rng, whole_kernel)


def target_param_count(target_density: float, total: int) -> int:
    # the small slack absorbs float noise in densities computed as k/M
    return math.ceil(target_density * total - 1e-9)


def below_min_density(target_density: float, arch: Architecture) -> bool:
    """True if the target asks for fewer than one parameter per layer."""
    return target_density * arch.total_params < arch.parametrized_layer_count - 1e-9


def phew_prune(net: SparseNet, target_density: float, bias: WalkBias = WalkBias.WEIGHT,
               seed: int = 0, whole_kernel: bool = False
               ) -> tuple[SparseNet, WalkBudget, WalkTraceLog]:
    """Build a PHEW mask from alternating forward/backward walks.

    Walks start round-robin over input units (forward) and output units
    (backward), beginning with a forward walk, and stop at the first walk after
    which at least ``ceil(target_density * M)`` parameters are active.  The last
    walk is kept whole, so the result may overshoot by up to one walk.
    """
    arch = net.arch
    M = arch.total_params
    L = arch.parametrized_layer_count
    rho_min = min_density(arch)
    if not 0 < target_density <= 1:
        raise ValueError(f"target density must be in (0, 1], got {target_density}")
    m = target_param_count(target_density, M)
    if below_min_density(target_density, arch):
        raise DensityBelowMinimumError(
            f"target density {target_density:.6g} is below the minimum rho_min = L/M = "
            f"{L}/{M} = {rho_min:.6g}")

    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    walker = Walker(net, bias)
    mask = [np.zeros(arch.layer_shape(l), dtype=bool) for l in range(L)]
    fwd_starts = np.zeros(arch.input_dim, dtype=np.int64)
    bwd_starts = np.zeros(arch.output_dim, dtype=np.int64)
    trace = WalkTraceLog()
    active = 0
    n_walks = 0
    while active < m:
        if n_walks % 2 == 0:
            direction, start = "forward", int(n_walks // 2 % arch.input_dim)
            fwd_starts[start] += 1
        else:
            direction, start = "backward", int(n_walks // 2 % arch.output_dim)
            bwd_starts[start] += 1
        rec = walker.walk(direction, start, rng, whole_kernel)
        for h in rec.hops:
            layer_mask = mask[h.layer - 1]
            if layer_mask.ndim == 2:
                if not layer_mask[h.dst, h.src]:
                    layer_mask[h.dst, h.src] = True
                    active += 1
            elif h.entry is None:
                kern = layer_mask[h.dst, h.src]
                active += int(kern.size - kern.sum())
                kern[...] = True
            else:
                kern = layer_mask[h.dst, h.src].reshape(-1)
                if not kern[h.entry]:
                    kern[h.entry] = True
                    active += 1
        trace.walks.append(rec)
        n_walks += 1

    budget = WalkBudget(target_density=target_density, target_params=m,
                        achieved_walk_count=n_walks, achieved_params=active,
                        total_params=M, forward_starts=fwd_starts, backward_starts=bwd_starts)
    return net.with_mask(mask), budget, trace


def mask_from_log(arch: Architecture, trace: WalkTraceLog) -> list[np.ndarray]:
    """Union of the edges (or kernel entries) traversed by the logged walks."""
    mask = [np.zeros(arch.layer_shape(l), dtype=bool) for l in range(arch.parametrized_layer_count)]
    for rec in trace.walks:
        for h in rec.hops:
            m = mask[h.layer - 1]
            if m.ndim == 2:
                m[h.dst, h.src] = True
            elif h.entry is None:
                m[h.dst, h.src] = True
            else:
                m[h.dst, h.src].reshape(-1)[h.entry] = True
    return mask


def walk_unit_histogram(trace: WalkTraceLog | Iterable[WalkRecord], arch: Architecture
                        ) -> list[np.ndarray]:
    """Visit counts per unit, one array per unit layer (inputs through outputs)."""
    walks = trace.walks if isinstance(trace, WalkTraceLog) else list(trace)
    if not walks:
        raise ValueError("empty walk log")
    counts = [np.zeros(n, dtype=np.int64) for n in arch.layer_sizes]
    for rec in walks:
        for layer, unit in enumerate(rec.units()):
            counts[layer][unit] += 1
    return counts
