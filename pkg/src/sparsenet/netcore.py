"""Masked layered networks: architecture, weight stores, masks and initialization.

A network is a chain of unit layers ``N_0 .. N_L`` joined by ``L`` parametrized
layers.  Dense layers hold one weight per (destination, source) pair; channel
convolution layers hold a full ``kh x kw`` kernel per pair.  Weight arrays are
indexed ``[dst, src]`` (dense) or ``[dst, src, kh, kw]`` (conv), so the flat
parameter order of a layer is row-major over that shape.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

FORMAT_VERSION = "sparsenet/1"


class ArchitectureError(ValueError):
    pass


@dataclass(frozen=True)
class Dense:
    @property
    def area(self) -> int:
        return 1

    def to_dict(self) -> dict:
        return {"kind": "dense"}


@dataclass(frozen=True)
class ConvChannel:
    kernel_h: int
    kernel_w: int

    def __post_init__(self):
        if self.kernel_h < 1 or self.kernel_w < 1:
            raise ArchitectureError(
                f"kernel dimensions must be positive, got {self.kernel_h}x{self.kernel_w}")

    @property
    def area(self) -> int:
        return self.kernel_h * self.kernel_w

    def to_dict(self) -> dict:
        return {"kind": "conv", "kernel_h": self.kernel_h, "kernel_w": self.kernel_w}


LayerKind = Dense | ConvChannel


def kind_from_dict(d: dict) -> LayerKind:
    kind = d.get("kind")
    if kind == "dense":
        return Dense()
    if kind == "conv":
        return ConvChannel(int(d["kernel_h"]), int(d["kernel_w"]))
    raise ArchitectureError(f"unknown layer kind {kind!r}")


@dataclass(frozen=True)
class Architecture:
    """Unit-layer sizes plus the kind of each parametrized layer."""

    layer_sizes: tuple[int, ...]
    layer_kinds: tuple[LayerKind, ...] = ()

    def __post_init__(self):
        sizes = tuple(int(n) for n in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 2:
            raise ArchitectureError("an architecture needs at least an input and an output layer")
        if any(n < 1 for n in sizes):
            raise ArchitectureError(f"all layer sizes must be >= 1, got {list(sizes)}")
        kinds = tuple(self.layer_kinds) or tuple(Dense() for _ in range(len(sizes) - 1))
        if len(kinds) != len(sizes) - 1:
            raise ArchitectureError(
                f"expected {len(sizes) - 1} layer kinds, got {len(kinds)}")
        object.__setattr__(self, "layer_kinds", kinds)

    @classmethod
    def dense(cls, *sizes: int) -> "Architecture":
        if len(sizes) == 1 and isinstance(sizes[0], (list, tuple)):
            sizes = tuple(sizes[0])
        return cls(tuple(sizes))

    @property
    def parametrized_layer_count(self) -> int:
        return len(self.layer_sizes) - 1

    @property
    def hidden_layer_count(self) -> int:
        return len(self.layer_sizes) - 2

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def output_dim(self) -> int:
        return self.layer_sizes[-1]

    @property
    def is_dense(self) -> bool:
        return all(isinstance(k, Dense) for k in self.layer_kinds)

    def layer_shape(self, l: int) -> tuple[int, ...]:
        """Weight-array shape of parametrized layer ``l`` (0-based)."""
        kind = self.layer_kinds[l]
        base = (self.layer_sizes[l + 1], self.layer_sizes[l])
        if isinstance(kind, ConvChannel):
            return base + (kind.kernel_h, kind.kernel_w)
        return base

    def layer_param_count(self, l: int) -> int:
        return self.layer_sizes[l] * self.layer_sizes[l + 1] * self.layer_kinds[l].area

    @property
    def total_params(self) -> int:
        return sum(self.layer_param_count(l) for l in range(self.parametrized_layer_count))

    def to_dict(self) -> dict:
        return {"layer_sizes": list(self.layer_sizes),
                "layer_kinds": [k.to_dict() for k in self.layer_kinds]}

    @classmethod
    def from_dict(cls, d: dict) -> "Architecture":
        kinds = tuple(kind_from_dict(k) for k in d.get("layer_kinds", []))
        return cls(tuple(d["layer_sizes"]), kinds)


# Initialization schemes ------------------------------------------------------

@dataclass(frozen=True)
class Kaiming:
    """Zero-mean normal with variance 2/N_l, N_l the width of the destination layer."""

    def std(self, arch: Architecture, l: int) -> float:
        fan = arch.layer_sizes[l + 1] * arch.layer_kinds[l].area
        return math.sqrt(2.0 / fan)

    def to_dict(self) -> dict:
        return {"scheme": "kaiming"}


@dataclass(frozen=True)
class NormalFixed:
    std_dev: float = 0.1

    def __post_init__(self):
        if not self.std_dev > 0:
            raise ValueError("NormalFixed std must be positive")

    def std(self, arch: Architecture, l: int) -> float:
        return self.std_dev

    def to_dict(self) -> dict:
        return {"scheme": "normal", "std": self.std_dev}


@dataclass(frozen=True)
class XavierUniform:
    def bound(self, arch: Architecture, l: int) -> float:
        area = arch.layer_kinds[l].area
        fan_in = arch.layer_sizes[l] * area
        fan_out = arch.layer_sizes[l + 1] * area
        return math.sqrt(6.0 / (fan_in + fan_out))

    def std(self, arch: Architecture, l: int) -> float:
        return self.bound(arch, l) / math.sqrt(3.0)

    def to_dict(self) -> dict:
        return {"scheme": "xavier_uniform"}


InitSpec = Kaiming | NormalFixed | XavierUniform


def init_from_dict(d: dict) -> InitSpec:
    scheme = d.get("scheme", "kaiming")
    if scheme == "kaiming":
        return Kaiming()
    if scheme == "normal":
        return NormalFixed(float(d.get("std", 0.1)))
    if scheme == "xavier_uniform":
        return XavierUniform()
    raise ValueError(f"unknown init scheme {scheme!r}")


def layer_variance(init: InitSpec, arch: Architecture, l: int) -> float:
    return init.std(arch, l) ** 2


def _layer_streams(seed: int, n: int) -> list[np.random.Generator]:
    ss = np.random.SeedSequence(seed)
    return [np.random.Generator(np.random.PCG64(s)) for s in ss.spawn(n)]


def _sample_layer(init: InitSpec, arch: Architecture, l: int, rng: np.random.Generator) -> np.ndarray:
    shape = arch.layer_shape(l)
    if isinstance(init, XavierUniform):
        b = init.bound(arch, l)
        return rng.uniform(-b, b, size=shape)
    return rng.normal(0.0, init.std(arch, l), size=shape)


# Networks --------------------------------------------------------------------

def _frozen(a: np.ndarray, dtype) -> np.ndarray:
    a = np.array(a, dtype=dtype, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class SparseNet:
    """Architecture + full weight store + binary mask.  Never mutated in place."""

    arch: Architecture
    weights: tuple[np.ndarray, ...]
    mask: tuple[np.ndarray, ...]
    rng_seed: int = 0
    init: InitSpec = field(default_factory=Kaiming)

    def __post_init__(self):
        L = self.arch.parametrized_layer_count
        if len(self.weights) != L or len(self.mask) != L:
            raise ArchitectureError(f"expected {L} weight and mask arrays")
        ws, ms = [], []
        for l, (w, m) in enumerate(zip(self.weights, self.mask)):
            shape = self.arch.layer_shape(l)
            if tuple(np.shape(w)) != shape or tuple(np.shape(m)) != shape:
                raise ArchitectureError(
                    f"layer {l + 1}: expected shape {shape}, got weights {np.shape(w)}, mask {np.shape(m)}")
            ws.append(_frozen(w, np.float64))
            ms.append(_frozen(m, bool))
        object.__setattr__(self, "weights", tuple(ws))
        object.__setattr__(self, "mask", tuple(ms))

    @property
    def masked_weights(self) -> list[np.ndarray]:
        return [w * m for w, m in zip(self.weights, self.mask)]

    @property
    def active_params(self) -> int:
        return int(sum(int(m.sum()) for m in self.mask))

    def layer_active_counts(self) -> list[int]:
        return [int(m.sum()) for m in self.mask]

    def with_mask(self, mask: Sequence[np.ndarray]) -> "SparseNet":
        return SparseNet(self.arch, self.weights, tuple(mask), self.rng_seed, self.init)

    def with_weights(self, weights: Sequence[np.ndarray]) -> "SparseNet":
        return SparseNet(self.arch, tuple(weights), self.mask, self.rng_seed, self.init)

    def same_as(self, other: "SparseNet") -> bool:
        """Bitwise equality of architecture, weights and mask."""
        return (self.arch == other.arch
                and all(np.array_equal(a.view(np.uint64), b.view(np.uint64))
                        for a, b in zip(self.weights, other.weights))
                and all(np.array_equal(a, b) for a, b in zip(self.mask, other.mask)))


def build_network(arch: Architecture, init: InitSpec | None = None, seed: int = 0) -> SparseNet:
    init = init or Kaiming()
    streams = _layer_streams(seed, arch.parametrized_layer_count)
    weights = [_sample_layer(init, arch, l, rng) for l, rng in enumerate(streams)]
    mask = [np.ones(arch.layer_shape(l), dtype=bool) for l in range(arch.parametrized_layer_count)]
    return SparseNet(arch, tuple(weights), tuple(mask), seed, init)


def density(net: SparseNet) -> float:
    return net.active_params / net.arch.total_params


def min_density(arch: Architecture) -> float:
    """Smallest density that keeps one conserved input-output path."""
    return arch.parametrized_layer_count / arch.total_params


def apply_mask(net: SparseNet) -> SparseNet:
    return net.with_weights(net.masked_weights)


# Reinitialization --------------------------------------------------------------

@dataclass(frozen=True)
class DenseReinit:
    pass


@dataclass(frozen=True)
class LayerwiseSparseReinit:
    pass


@dataclass(frozen=True)
class NeuronwiseSparseReinit:
    pass


ReinitScheme = DenseReinit | LayerwiseSparseReinit | NeuronwiseSparseReinit


def reinitialize(net: SparseNet, scheme: ReinitScheme, seed: int) -> SparseNet:
    """Resample weights under a fixed mask.

    Dense reinit reuses the network's own init scheme.  The sparse variants draw
    from N(0, 2/d): ``d`` is the mean active fan-in of the layer (layer-wise) or
    the active fan-in of each destination unit (neuron-wise).  A unit with no
    active fan-in gets zero weights.
    """
    arch = net.arch
    if isinstance(scheme, DenseReinit):
        fresh = build_network(arch, net.init, seed)
        return SparseNet(arch, fresh.weights, net.mask, seed, net.init)

    streams = _layer_streams(seed, arch.parametrized_layer_count)
    new_weights = []
    for l, (m, rng) in enumerate(zip(net.mask, streams)):
        shape = arch.layer_shape(l)
        z = rng.standard_normal(shape)
        n_dst = shape[0]
        per_unit = m.reshape(n_dst, -1).sum(axis=1).astype(np.float64)
        if isinstance(scheme, LayerwiseSparseReinit):
            fan = per_unit.sum() / n_dst
            std = np.full(n_dst, math.sqrt(2.0 / fan) if fan > 0 else 0.0)
        elif isinstance(scheme, NeuronwiseSparseReinit):
            std = np.zeros(n_dst)
            nz = per_unit > 0
            std[nz] = np.sqrt(2.0 / per_unit[nz])
        else:
            raise TypeError(f"unknown reinit scheme {scheme!r}")
        std = std.reshape((n_dst,) + (1,) * (len(shape) - 1))
        new_weights.append(z * std)
    return SparseNet(arch, tuple(new_weights), net.mask, seed, net.init)


# Serialization -----------------------------------------------------------------

def rle_encode(bits: np.ndarray) -> dict:
    """Run-length encode a flat bit stream as ``{"first": b, "runs": [...]}``."""
    flat = np.asarray(bits, dtype=bool).ravel()
    if flat.size == 0:
        return {"first": 0, "runs": []}
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate(([0], change, [flat.size]))
    return {"first": int(flat[0]), "runs": np.diff(bounds).tolist()}


def rle_decode(enc: dict, size: int) -> np.ndarray:
    out = np.empty(size, dtype=bool)
    pos, bit = 0, bool(enc["first"])
    for run in enc["runs"]:
        out[pos:pos + run] = bit
        pos += run
        bit = not bit
    if pos != size:
        raise ValueError(f"run lengths cover {pos} entries, expected {size}")
    return out


def net_to_dict(net: SparseNet) -> dict:
    return {
        "format": FORMAT_VERSION,
        **net.arch.to_dict(),
        "init": net.init.to_dict(),
        "seed": int(net.rng_seed),
        "mask": [rle_encode(m) for m in net.mask],
        "weights": [w.astype("<f8").tobytes().hex() for w in net.weights],
    }


def net_from_dict(d: dict) -> SparseNet:
    if d.get("format") != FORMAT_VERSION:
        raise ValueError(f"unsupported network document format {d.get('format')!r}")
    arch = Architecture.from_dict(d)
    weights, mask = [], []
    for l in range(arch.parametrized_layer_count):
        shape = arch.layer_shape(l)
        size = int(np.prod(shape))
        w = np.frombuffer(bytes.fromhex(d["weights"][l]), dtype="<f8")
        if w.size != size:
            raise ValueError(f"layer {l + 1}: weight stream has {w.size} values, expected {size}")
        weights.append(w.astype(np.float64).reshape(shape))
        mask.append(rle_decode(d["mask"][l], size).reshape(shape))
    return SparseNet(arch, tuple(weights), tuple(mask), int(d["seed"]), init_from_dict(d["init"]))


def dumps_net(net: SparseNet) -> str:
    return json.dumps(net_to_dict(net), sort_keys=True)


def loads_net(text: str) -> SparseNet:
    return net_from_dict(json.loads(text))
