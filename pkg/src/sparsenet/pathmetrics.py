"""Structural diagnostics: path counts, widths, layer collapse, exhaustive oracles."""
from __future__ import annotations

import csv
import io
import itertools
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .netcore import Architecture, SparseNet, density
from .scores import PathSumOverflow, log_synflow_objective, path_kernel_trace


def channel_adjacency(net: SparseNet) -> list[np.ndarray]:
    """Per-layer boolean ``[dst, src]`` matrix: edge active if any of its entries is."""
    return [m if m.ndim == 2 else m.any(axis=(2, 3)) for m in net.mask]


def count_paths(net: SparseNet) -> int:
    """Exact number of active input-output paths on the channel graph."""
    counts = np.ones(net.arch.input_dim, dtype=object)
    for adj in channel_adjacency(net):
        counts = adj.astype(np.int64).astype(object) @ counts
    return int(sum(counts))


def log10_paths(net: SparseNet) -> float:
    p = count_paths(net)
    return math.log10(p) if p > 0 else float("-inf")


def enumerate_unit_paths(net: SparseNet):
    """Depth-first enumeration of unit sequences along active edges."""
    adj = channel_adjacency(net)
    L = len(adj)

    def dfs(layer, path):
        if layer == L:
            yield tuple(path)
            return
        for v in np.flatnonzero(adj[layer][:, path[-1]]):
            path.append(int(v))
            yield from dfs(layer + 1, path)
            path.pop()

    for u in range(net.arch.input_dim):
        yield from dfs(0, [u])


def enumerate_paths(net: SparseNet):
    """Yield each path as a tuple of active weight values, one per layer.

    On conv layers every active kernel entry is a separate parallel edge.
    """
    for units in enumerate_unit_paths(net):
        choices = []
        for l, (u, v) in enumerate(zip(units[:-1], units[1:])):
            w = net.weights[l][v, u]
            m = net.mask[l][v, u]
            choices.append(np.atleast_1d(w[m]).tolist())
        yield from itertools.product(*choices)


def brute_force_trace(net: SparseNet) -> float:
    total = 0.0
    for weights in enumerate_paths(net):
        sq = [w * w for w in weights]
        for i in range(len(sq)):
            total += math.prod(sq[:i] + sq[i + 1:])
    return total


def brute_force_objective(net: SparseNet, power: int = 2) -> float:
    return float(sum(abs(math.prod(ws)) ** power for ws in enumerate_paths(net)))


# Width and collapse ------------------------------------------------------------

def live_units(net: SparseNet) -> list[np.ndarray]:
    """Per unit layer, which units are connected on both sides (boundary layers: one side)."""
    adj = channel_adjacency(net)
    L = len(adj)
    out = []
    for layer in range(L + 1):
        live = np.ones(net.arch.layer_sizes[layer], dtype=bool)
        if layer > 0:
            live &= adj[layer - 1].any(axis=1)
        if layer < L:
            live &= adj[layer].any(axis=0)
        out.append(live)
    return out


def layer_widths(net: SparseNet) -> list[int]:
    return [int(live.sum()) for live in live_units(net)]


@dataclass(frozen=True)
class CollapseStatus:
    collapsed: bool
    layer: int | None        # first collapsed parametrized layer, 1-based
    empty_network: bool = False


def detect_layer_collapse(net: SparseNet) -> CollapseStatus:
    counts = net.layer_active_counts()
    if not any(counts):
        return CollapseStatus(False, None, empty_network=True)
    for l, c in enumerate(counts):
        if c == 0:
            return CollapseStatus(True, l + 1)
    return CollapseStatus(False, None)


# Path-maximizing widths ----------------------------------------------------------

def max_paths_width(D: int, m: float, hidden_layers: int = 2) -> tuple[float, float]:
    """Real-valued widths ``n1 = n2 = sqrt(D^2 + m) - D`` maximizing ``D^2 n1 n2``."""
    if hidden_layers != 2:
        raise ValueError("closed form is for two hidden layers")
    if D < 1 or m <= 0:
        raise ValueError(f"need D >= 1 and m > 0, got D={D}, m={m}")
    n = math.sqrt(D * D + m) - D
    return n, n


def max_paths_width_search(D: int, m: int) -> tuple[tuple[int, int], int]:
    """Integer search over (n1, n2) with ``D(n1+n2) + n1 n2 <= m`` maximizing ``D^2 n1 n2``."""
    best, best_p = (0, 0), -1
    for n1 in range(1, m + 1):
        for n2 in range(1, m + 1):
            if D * (n1 + n2) + n1 * n2 > m:
                break
            p = D * D * n1 * n2
            if p > best_p:
                best, best_p = (n1, n2), p
    return best, best_p


# Exhaustive mask search ---------------------------------------------------------

class SearchTooLarge(ValueError):
    pass


@dataclass
class BestMask:
    mask: list[np.ndarray]
    value: float
    evaluated: int
    strategy: str


def _split_flat(arch: Architecture, flat: np.ndarray) -> list[np.ndarray]:
    out, pos = [], 0
    for l in range(arch.parametrized_layer_count):
        shape = arch.layer_shape(l)
        size = int(np.prod(shape))
        out.append(flat[pos:pos + size].reshape(shape))
        pos += size
    return out


def _batch_objective(arch, weights, masks: np.ndarray, objective: str) -> np.ndarray:
    """Objective for a batch of flat masks ``(n, M)``; ``-inf`` where constraints fail."""
    n = masks.shape[0]
    mats, pos = [], 0
    for l in range(arch.parametrized_layer_count):
        rows, cols = arch.layer_shape(l)
        size = rows * cols
        m = masks[:, pos:pos + size].reshape(n, rows, cols).astype(np.float64)
        pos += size
        mats.append(m if objective == "paths" else m * (weights[l] ** 2)[None])
    F = [np.ones((n, arch.input_dim))]
    for a in mats:
        F.append(np.einsum("nij,nj->ni", a, F[-1]))
    B = [np.ones((n, arch.output_dim))]
    for a in reversed(mats):
        B.append(np.einsum("nij,ni->nj", a, B[-1]))
    B.reverse()
    if objective == "paths":
        value = F[-1].sum(axis=1)
        ok = (mats[0].sum(axis=1) > 0).all(axis=1) & (mats[-1].sum(axis=2) > 0).all(axis=1)
        return np.where(ok, value, -np.inf)
    value = np.zeros(n)
    pos = 0
    for l in range(arch.parametrized_layer_count):
        rows, cols = arch.layer_shape(l)
        cnt = masks[:, pos:pos + rows * cols].reshape(n, rows, cols).astype(np.float64)
        pos += rows * cols
        value += np.einsum("ni,nij,nj->n", B[l + 1], cnt, F[l])
    return value


def _direct_scan(arch, weights, m, objective, chunk=4096) -> BestMask:
    M = arch.total_params
    best_val, best_idx, evaluated = -np.inf, None, 0
    combos = itertools.combinations(range(M), m)
    while True:
        block = list(itertools.islice(combos, chunk))
        if not block:
            break
        idx = np.array(block, dtype=np.int64).reshape(len(block), m)
        masks = np.zeros((len(block), M), dtype=bool)
        masks[np.arange(len(block))[:, None], idx] = True
        vals = _batch_objective(arch, weights, masks, objective)
        evaluated += len(block)
        i = int(np.argmax(vals))
        if vals[i] > best_val:
            best_val, best_idx = float(vals[i]), idx[i]
    if best_idx is None or best_val == -np.inf:
        raise ValueError(f"no admissible mask with {m} active entries")
    flat = np.zeros(M, dtype=bool)
    flat[best_idx] = True
    return BestMask(_split_flat(arch, flat), best_val, evaluated, "direct")


def _profiles(n_units: int, cap: int, total: int) -> list[tuple[int, ...]]:
    return [p for p in itertools.product(range(cap + 1), repeat=n_units) if sum(p) == total]


def _realize(profile, n_other: int) -> np.ndarray:
    """Boolean ``[unit, boundary]`` incidence with the given per-unit degrees covering every
    boundary unit (cyclic assignment)."""
    inc = np.zeros((len(profile), n_other), dtype=bool)
    ptr = 0
    for k, d in enumerate(profile):
        for _ in range(d):
            inc[k, ptr % n_other] = True
            ptr += 1
    return inc


def _profile_scan(arch: Architecture, m: int, limit: int) -> BestMask:
    """Exact max-paths search that enumerates interior layers exhaustively.

    The path count depends on the first layer only through the in-degree of each
    first-hidden unit, and on the last layer only through the out-degree of each
    last-hidden unit; any such degree profile with sum >= D (resp. K) realizes the
    boundary coverage constraint.
    """
    sizes = arch.layer_sizes
    L = arch.parametrized_layer_count
    D, K = sizes[0], sizes[-1]
    N1, NL = sizes[1], sizes[-2]
    interior = list(range(1, L - 1))
    M_int = sum(arch.layer_param_count(l) for l in interior)
    m1_max, mL_max = N1 * D, NL * K

    n_interior = sum(math.comb(M_int, k) for k in range(0, min(M_int, m) + 1))
    if n_interior > limit:
        raise SearchTooLarge(f"{n_interior} interior masks exceed the search limit {limit}")

    best = (-1, None)
    evaluated = 0
    for m1 in range(D, min(m1_max, m) + 1):
        R = np.array(_profiles(N1, D, m1), dtype=np.float64)
        for mL in range(K, min(mL_max, m - m1) + 1):
            mid = m - m1 - mL
            if mid > M_int:
                continue
            S = np.array(_profiles(NL, K, mL), dtype=np.float64)
            if L == 2:
                # one hidden layer: both profiles live on the same units
                if mid != 0:
                    continue
                vals = S @ R.T
                evaluated += vals.size
                i, j = np.unravel_index(int(np.argmax(vals)), vals.shape)
                if vals[i, j] > best[0]:
                    best = (float(vals[i, j]), (R[j], None, S[i]))
                continue
            pairs = np.einsum("sa,rb->srab", S, R).reshape(len(S) * len(R), NL * N1)
            for combo_block in _chunks(itertools.combinations(range(M_int), mid), 2048):
                flat = np.zeros((len(combo_block), M_int), dtype=bool)
                if mid:
                    idx = np.array(combo_block, dtype=np.int64)
                    flat[np.arange(len(combo_block))[:, None], idx] = True
                T = _interior_product(arch, interior, flat)          # (n, NL, N1)
                vals = T.reshape(len(combo_block), -1) @ pairs.T      # (n, |S||R|)
                evaluated += vals.size
                i, j = np.unravel_index(int(np.argmax(vals)), vals.shape)
                if vals[i, j] > best[0]:
                    s_i, r_i = divmod(int(j), len(R))
                    best = (float(vals[i, j]), (R[r_i], flat[i].copy(), S[s_i]))
    if best[1] is None:
        raise ValueError(f"no admissible mask with {m} active entries")
    r, inner, s = best[1]
    mask = [np.zeros(arch.layer_shape(l), dtype=bool) for l in range(L)]
    mask[0] = _realize(r.astype(int), D)
    mask[-1] = _realize(s.astype(int), K).T
    if inner is not None:
        pos = 0
        for l in interior:
            size = arch.layer_param_count(l)
            mask[l] = inner[pos:pos + size].reshape(arch.layer_shape(l))
            pos += size
    return BestMask(mask, best[0], evaluated, "degree-profile")


def _chunks(it, n):
    while True:
        block = list(itertools.islice(it, n))
        if not block:
            return
        yield block


def _interior_product(arch, interior, flat: np.ndarray) -> np.ndarray:
    n = flat.shape[0]
    T = None
    pos = 0
    for l in interior:
        rows, cols = arch.layer_shape(l)
        a = flat[:, pos:pos + rows * cols].reshape(n, rows, cols).astype(np.float64)
        pos += rows * cols
        T = a if T is None else np.einsum("nij,njk->nik", a, T)
    return T


def brute_force_best_mask(arch: Architecture, weights, m: int, objective: str = "paths",
                          limit: int = 10 ** 6) -> BestMask:
    """Exhaustive argmax over masks with exactly ``m`` active entries.

    ``objective`` is ``"paths"`` (every input needs an out-edge and every output an
    in-edge) or ``"trace"``.  Masks are scanned in lexicographic order of their
    active flat indices, first maximum wins.  When the direct scan exceeds
    ``limit`` masks, the paths objective falls back to an exact degree-profile
    search whose enumeration is bounded by the same limit.
    """
    if not arch.is_dense:
        raise ValueError("exhaustive search supports dense architectures only")
    if objective not in ("paths", "trace"):
        raise ValueError(f"objective must be 'paths' or 'trace', got {objective!r}")
    M = arch.total_params
    if not 0 < m <= M:
        raise ValueError(f"m must be in [1, {M}], got {m}")
    if math.comb(M, m) <= limit:
        return _direct_scan(arch, weights, m, objective)
    if objective == "paths" and arch.parametrized_layer_count >= 2:
        return _profile_scan(arch, m, limit)
    raise SearchTooLarge(f"C({M}, {m}) = {math.comb(M, m)} masks exceed the search limit {limit}")


# Structure report -----------------------------------------------------------------

@dataclass
class LayerRow:
    layer: int
    units: int
    width: int
    active_params: int
    total_params: int
    density: float
    width_group_density: float | None = None


@dataclass
class StructureReport:
    layers: list[LayerRow]
    input_width: int
    input_units: int
    paths: int
    log10_paths: float
    trace: float | None
    log_objective: float
    density: float
    collapsed: bool
    collapsed_layer: int | None
    empty_network: bool
    hidden_layer_count: int
    parametrized_layer_count: int
    notes: list[str] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        names = list(LayerRow.__dataclass_fields__)
        w = csv.DictWriter(buf, fieldnames=names, lineterminator="\n")
        w.writeheader()
        for row in self.layers:
            d = asdict(row)
            d["density"] = repr(row.density)
            if row.width_group_density is not None:
                d["width_group_density"] = repr(row.width_group_density)
            w.writerow(d)
        return buf.getvalue()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["paths"] = str(self.paths)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, allow_nan=True)


def structure_report(net: SparseNet) -> StructureReport:
    arch = net.arch
    widths = layer_widths(net)
    counts = net.layer_active_counts()
    rows = []
    for l in range(arch.parametrized_layer_count):
        total = arch.layer_param_count(l)
        rows.append(LayerRow(l + 1, arch.layer_sizes[l + 1], widths[l + 1], counts[l], total,
                             counts[l] / total))
    # hidden layers sharing an unpruned width: mean density of the group
    hidden = [r for r in rows[:-1]]
    for r in hidden:
        group = [g.density for g in hidden if g.units == r.units]
        r.width_group_density = float(np.mean(group))
    notes = []
    try:
        trace = path_kernel_trace(net)
    except PathSumOverflow:
        trace = None
        notes.append("trace unavailable: path sums overflow double range")
    status = detect_layer_collapse(net)
    return StructureReport(
        layers=rows, input_width=widths[0], input_units=arch.input_dim,
        paths=count_paths(net), log10_paths=log10_paths(net), trace=trace,
        log_objective=log_synflow_objective(net, 2), density=density(net),
        collapsed=status.collapsed, collapsed_layer=status.layer,
        empty_network=status.empty_network,
        hidden_layer_count=arch.hidden_layer_count,
        parametrized_layer_count=arch.parametrized_layer_count, notes=notes)
