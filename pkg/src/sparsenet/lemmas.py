"""Numerical checks of the structural lemmas, each returning a table row.

Every check is deterministic given its seed.  ``verify_all`` runs the suite
behind the ``verify-lemmas`` subcommand.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import stats

from .netcore import Architecture, Kaiming, NormalFixed, build_network, min_density
from .pathmetrics import (brute_force_best_mask, detect_layer_collapse, layer_widths,
                          max_paths_width, max_paths_width_search)
from .scores import synflow_prune
from .walks import (DensityBelowMinimumError, WalkBias, Walker, phew_prune,
                    walk_unit_histogram)


@dataclass
class LemmaRow:
    check: str
    expected: str
    measured: str
    passed: bool

    def to_dict(self) -> dict:
        return asdict(self)


def _rng(*key: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(list(key))))


# Narrow hidden layers maximize the trace ----------------------------------------

def narrow_trace_argmax(n: int, seed: int, D: int = 2, N: int = 4) -> bool:
    """Does the trace-maximizing mask with ``m = 2nD`` keep exactly ``n`` hidden
    units, each fully connected?  Weights are i.i.d. standard normal."""
    arch = Architecture.dense(D, N, D)
    net = build_network(arch, NormalFixed(1.0), seed)
    best = brute_force_best_mask(arch, net.weights, 2 * n * D, "trace")
    into, out = best.mask
    used = into.any(axis=1) | out.any(axis=0)
    full = into.all(axis=1) & out.all(axis=0)
    return int(used.sum()) == n and int(full.sum()) == n


def check_narrow_trace(seeds=range(10), ns=(1, 2), required: int = 9) -> list[LemmaRow]:
    seeds = list(seeds)
    rows = []
    for n in ns:
        hits = sum(narrow_trace_argmax(n, s) for s in seeds)
        rows.append(LemmaRow(f"trace argmax keeps n={n} full units (2-4-2)",
                             f">= {required}/{len(seeds)} seeds", f"{hits}/{len(seeds)}",
                             hits >= required))
    return rows


# Path-maximizing widths ----------------------------------------------------------

def check_max_paths() -> list[LemmaRow]:
    rows = []
    arch = Architecture.dense(2, 4, 2)
    best = brute_force_best_mask(arch, build_network(arch).weights, 8, "paths")
    into, out = best.mask
    full = int((into.all(axis=1) & out.all(axis=0)).sum())
    rows.append(LemmaRow("max paths 2-4-2, m=8", "2 full units, P=8",
                         f"{full} full units, P={int(best.value)}",
                         full == 2 and int(best.value) == 8))

    arch = Architecture.dense(2, 4, 4, 2)
    best = brute_force_best_mask(arch, build_network(arch).weights, 12, "paths")
    widths = tuple(layer_widths(build_network(arch).with_mask(best.mask))[1:-1])
    rows.append(LemmaRow("max paths 2-4-4-2, m=12", "widths (2, 2), P=16",
                         f"widths {widths}, P={int(best.value)}",
                         widths == (2, 2) and int(best.value) == 16))

    n1, n2 = max_paths_width(4, 48)
    (s1, s2), _ = max_paths_width_search(4, 48)
    rows.append(LemmaRow("closed-form width D=4, m=48", "4", f"{n1:g} (search {s1}, {s2})",
                         math.isclose(n1, 4.0) and (s1, s2) == (4, 4)))
    return rows


# Walks reach hidden units uniformly ---------------------------------------------

@dataclass
class WalkSpread:
    hidden_counts: np.ndarray
    forward_starts: np.ndarray
    chi2: float
    p_value: float


def walk_spread(sizes=(20, 50, 20), walks: int = 10_000, nets: int = 1000, seed: int = 0
                ) -> WalkSpread:
    """Hidden-unit visit counts of alternating PHEW walks over freshly initialized nets.

    The uniform-arrival property holds in expectation over the initialization,
    so the walks are spread evenly across ``nets`` independent Kaiming draws.
    Start units follow one round-robin counter across all nets.
    """
    if walks % nets:
        raise ValueError("walks must be a multiple of nets")
    arch = Architecture.dense(*sizes)
    per_net = walks // nets
    starts = np.zeros(sizes[0], dtype=np.int64)
    records = []
    k = 0
    for i in range(nets):
        net = build_network(arch, Kaiming(), seed * 1_000_003 + i)
        walker = Walker(net, WalkBias.WEIGHT)
        rng = _rng(seed, i, 3)
        for _ in range(per_net):
            if k % 2 == 0:
                start = k // 2 % arch.input_dim
                starts[start] += 1
                records.append(walker.walk("forward", start, rng))
            else:
                records.append(walker.walk("backward", k // 2 % arch.output_dim, rng))
            k += 1
    counts = walk_unit_histogram(records, arch)[1]
    test = stats.chisquare(counts)
    return WalkSpread(counts, starts, float(test.statistic), float(test.pvalue))


def check_walk_spread(seed: int = 0, alpha: float = 0.01) -> list[LemmaRow]:
    s = walk_spread(seed=seed)
    spread = int(s.forward_starts.max() - s.forward_starts.min())
    return [
        LemmaRow("walk visits uniform over hidden units (20-50-20)", f"p >= {alpha}",
                 f"chi2={s.chi2:.2f}, p={s.p_value:.4f}", s.p_value >= alpha),
        LemmaRow("forward start balance", "max - min <= 1", str(spread), spread <= 1),
    ]


# Weight-biased paths carry more trace ---------------------------------------------

def _sample_path_trace(weights, starts, biased: bool, rng) -> np.ndarray:
    """Per-path trace contribution ``sum_i (pi_p / theta_i)**2`` of forward walks."""
    u = starts
    squares = []
    for w in weights:
        a = np.abs(w[:, u]).T                       # one row per walk, over next units
        p = a / a.sum(axis=1, keepdims=True) if biased else np.full(a.shape, 1 / a.shape[1])
        cdf = np.cumsum(p, axis=1)
        r = rng.random((len(u), 1))
        v = np.minimum((r >= cdf).sum(axis=1), a.shape[1] - 1)
        squares.append(w[v, u] ** 2)
        u = v
    sq = np.stack(squares, axis=1)
    return (sq.prod(axis=1)[:, None] / sq).sum(axis=1)


def biased_trace_ratio(hidden_layers: int, width: int = 100, paths: int = 10_000,
                       seed: int = 0) -> float:
    """Mean per-path trace of weight-biased over uniform walks on a Kaiming MLP."""
    arch = Architecture.dense(*([width] * (hidden_layers + 2)))
    net = build_network(arch, Kaiming(), seed)
    starts = np.arange(paths) % width
    rng = _rng(seed, hidden_layers, 4)
    biased = _sample_path_trace(net.weights, starts, True, rng).mean()
    uniform = _sample_path_trace(net.weights, starts, False, rng).mean()
    return float(biased / uniform)


def check_biased_trace(hidden=(1, 2, 3), seed: int = 0, low: float = 0.75,
                       high: float = 1.25) -> list[LemmaRow]:
    rows = []
    for h in hidden:
        r = biased_trace_ratio(h, seed=seed)
        expected = 2 ** h
        rows.append(LemmaRow(f"biased/uniform path trace, {h} hidden", f"{expected} in "
                             f"[{low * expected:g}, {high * expected:g}]", f"{r:.3f}",
                             low * expected <= r <= high * expected))
    return rows


# Minimum density ----------------------------------------------------------------------

def check_min_density(arch: Architecture | None = None, seed: int = 0) -> list[LemmaRow]:
    arch = arch or Architecture.dense(8, 16, 16, 8)
    L, M = arch.parametrized_layer_count, arch.total_params
    net = build_network(arch, Kaiming(), seed)
    pruned, _, _ = phew_prune(net, min_density(arch), seed=seed)
    counts = pruned.layer_active_counts()
    ok = counts == [1] * L and not detect_layer_collapse(pruned).collapsed
    rows = [LemmaRow("PHEW at L/M", "one edge per layer, no collapse", str(counts), ok)]
    try:
        phew_prune(net, (L - 1) / M, seed=seed)
        rejected = False
    except DensityBelowMinimumError:
        rejected = True
    rows.append(LemmaRow("PHEW at (L-1)/M", "rejected", "rejected" if rejected else "accepted",
                         rejected))
    return rows


def check_synflow_no_collapse(nets: int = 10, eps: float = 1e-6) -> list[LemmaRow]:
    arch = Architecture.dense(8, 16, 16, 8)
    target = min_density(arch) + eps
    collapsed = sum(detect_layer_collapse(synflow_prune(build_network(arch, Kaiming(), s),
                                                       target)).collapsed
                    for s in range(nets))
    return [LemmaRow(f"SynFlow at L/M + {eps:g} (8-16-16-8)", f"0/{nets} collapsed",
                     f"{collapsed}/{nets} collapsed", collapsed == 0)]


def verify_all(seed: int = 0) -> list[LemmaRow]:
    rows = []
    rows += check_narrow_trace(seeds=range(seed, seed + 10))
    rows += check_max_paths()
    rows += check_walk_spread(seed)
    rows += check_biased_trace(seed=seed)
    rows += check_min_density(seed=seed)
    rows += check_synflow_no_collapse()
    return rows
