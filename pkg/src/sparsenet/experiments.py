"""Experiment grid: config loading, per-cell pruning/training, reports and manifests.

A cell is one (method, target density, seed) triple.  Initial weights depend
only on the seed, so every method prunes the same network and comparisons
across methods are paired.  Each cell's pruning stream is derived from
(seed, method, density), never from the rest of the config.
"""
from __future__ import annotations

import csv
import functools
import hashlib
import io
import json
import os
import platform
import re
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import jsonschema
import numpy as np
import scipy
import yaml

from . import __version__
from .netcore import (Architecture, InitSpec, SparseNet, build_network, init_from_dict,
                      kind_from_dict, min_density, rle_decode, rle_encode)
from .pathmetrics import live_units, structure_report
from .scores import (ONE_SHOT, magnitude_score, prune_by_score, random_score, snip_score,
                     synflow_prune)
from .tasks import Dataset, TransformTask, generate_transform_task
from .trainer import (SGD, Adam, ConstantLR, ExponentialPerEpoch, StepDrop, TrainConfig,
                      TrainingDivergence, train)
from .walks import DensityBelowMinimumError, WalkBias, below_min_density, phew_prune

METHODS = ("phew", "phew-uniform", "phew-inverse", "phew-kernel", "synflow", "synflow-l2",
           "snip", "magnitude", "random")
# Not calibrated against any trained-then-pruned baseline; fixed defaults.
DEFAULT_DENSITIES = (0.05, 0.1, 0.2, 0.5)
DEFAULT_SEEDS = (0, 1, 2)

MASK_FORMAT = "sparsenet-mask/1"


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None, column: int | None = None,
                 source: str | None = None):
        self.line, self.column, self.source = line, column, source
        where = source or "<config>"
        if line is not None:
            where += f":{line}:{column}"
        super().__init__(f"{where}: {message}")


# Config ---------------------------------------------------------------------------

_NUM = {"type": "number"}
_POS_INT = {"type": "integer", "minimum": 1}

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["architecture"],
    "properties": {
        "architecture": {
            "type": "object",
            "additionalProperties": False,
            "required": ["layers"],
            "properties": {
                "layers": {"type": "array", "minItems": 2, "items": _POS_INT},
                "kinds": {"type": "array", "items": {
                    "type": "object",
                    "required": ["kind"],
                    "additionalProperties": False,
                    "properties": {"kind": {"enum": ["dense", "conv"]},
                                   "kernel_h": _POS_INT, "kernel_w": _POS_INT}}},
            },
        },
        "init": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"scheme": {"enum": ["kaiming", "normal", "xavier_uniform"]},
                           "std": {"type": "number", "exclusiveMinimum": 0}},
        },
        "methods": {"type": "array", "minItems": 1, "uniqueItems": True,
                    "items": {"enum": list(METHODS)}},
        "densities": {"type": "array", "minItems": 1, "uniqueItems": True,
                      "items": {"type": "number", "exclusiveMinimum": 0, "maximum": 1}},
        "seeds": {"type": "array", "minItems": 1, "uniqueItems": True,
                  "items": {"type": "integer", "minimum": 0}},
        "task": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"image_side": {"type": "integer", "minimum": 4},
                           "classes": _POS_INT, "train_per_class": _POS_INT,
                           "test_per_class": _POS_INT, "angle_step": _NUM,
                           "max_shear": {"type": "number", "minimum": 0},
                           "jitter": {"type": "number", "minimum": 0},
                           "seed": {"type": "integer", "minimum": 0}},
        },
        "train": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "epochs": {"type": "integer", "minimum": 0},
                "batch_size": _POS_INT,
                "loss": {"enum": ["mse", "xent"]},
                "optimizer": {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["name"],
                    "properties": {"name": {"enum": ["adam", "sgd"]},
                                   "lr": {"type": "number", "exclusiveMinimum": 0},
                                   "momentum": {"type": "number", "minimum": 0,
                                                "exclusiveMaximum": 1},
                                   "beta1": _NUM, "beta2": _NUM,
                                   "eps": {"type": "number", "exclusiveMinimum": 0}},
                },
                "lr_decay": {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["kind"],
                    "properties": {"kind": {"enum": ["constant", "exponential", "step"]},
                                   "factor": {"type": "number", "exclusiveMinimum": 0},
                                   "epochs": {"type": "array", "items": _POS_INT}},
                },
            },
        },
        "synflow_iterations": _POS_INT,
        "snip_examples_per_class": _POS_INT,
        "width_factor": {"type": "number", "minimum": 0, "maximum": 1},
        "workers": _POS_INT,
        "out": {"type": "string", "minLength": 1},
    },
}


@dataclass(frozen=True)
class ExperimentConfig:
    architecture: Architecture
    init: InitSpec
    methods: tuple[str, ...] = METHODS
    densities: tuple[float, ...] = DEFAULT_DENSITIES
    seeds: tuple[int, ...] = DEFAULT_SEEDS
    task: TransformTask = field(default_factory=TransformTask)
    data_seed: int = 0
    train: TrainConfig = field(default_factory=lambda: TrainConfig(
        epochs=10, batch_size=32, optimizer=Adam(1e-3), lr_decay=ExponentialPerEpoch(0.95)))
    synflow_iterations: int = 100
    snip_examples_per_class: int = 10
    width_factor: float = 1.0
    workers: int = 1
    out: str = "runs"

    def cells(self) -> list[tuple[str, float, int]]:
        return [(m, d, s) for m in self.methods for d in self.densities for s in self.seeds]

    def to_dict(self) -> dict:
        """Canonical plain-data form; ``out`` and ``workers`` do not affect results."""
        t = self.train
        opt = {"name": "adam" if isinstance(t.optimizer, Adam) else "sgd", **asdict(t.optimizer)}
        if isinstance(t.lr_decay, ExponentialPerEpoch):
            decay = {"kind": "exponential", "factor": t.lr_decay.factor}
        elif isinstance(t.lr_decay, StepDrop):
            decay = {"kind": "step", "epochs": list(t.lr_decay.epochs), "factor": t.lr_decay.factor}
        else:
            decay = {"kind": "constant"}
        return {
            "architecture": self.architecture.to_dict(),
            "init": self.init.to_dict(),
            "methods": list(self.methods),
            "densities": list(self.densities),
            "seeds": list(self.seeds),
            "task": {**asdict(self.task), "seed": self.data_seed},
            "train": {"epochs": t.epochs, "batch_size": t.batch_size, "loss": t.loss,
                      "optimizer": opt, "lr_decay": decay},
            "synflow_iterations": self.synflow_iterations,
            "snip_examples_per_class": self.snip_examples_per_class,
            "width_factor": self.width_factor,
        }

    def config_hash(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()


class _Loader(yaml.SafeLoader):
    pass


# PyYAML follows YAML 1.1, which reads "1e-3" as a string; accept it as a float.
_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"""^(?:[-+]?(?:[0-9][0-9_]*)\.[0-9_]*(?:[eE][-+]?[0-9]+)?
        |[-+]?(?:[0-9][0-9_]*)(?:[eE][-+]?[0-9]+)
        |\.[0-9_]+(?:[eE][-+]?[0-9]+)?
        |[-+]?\.(?:inf|Inf|INF)
        |\.(?:nan|NaN|NAN))$""", re.X),
    list("-+0123456789."))


def _node_at(node, path) -> yaml.Node:
    """Deepest YAML node reachable along a JSON-schema error path."""
    for key in path:
        if isinstance(node, yaml.MappingNode):
            nxt = next((v for k, v in node.value if k.value == key), None)
        elif isinstance(node, yaml.SequenceNode) and isinstance(key, int) and key < len(node.value):
            nxt = node.value[key]
        else:
            nxt = None
        if nxt is None:
            break
        node = nxt
    return node


def _error_at(root, path, message: str, source: str | None) -> ConfigError:
    if root is None:
        return ConfigError(message, source=source)
    mark = _node_at(root, path).start_mark
    return ConfigError(message, mark.line + 1, mark.column + 1, source)


def parse_config(text: str, source: str | None = None, overrides: dict | None = None
                 ) -> ExperimentConfig:
    """Parse and validate YAML config text; ``overrides`` replace top-level keys."""
    try:
        root = yaml.compose(text, Loader=_Loader)
        data = yaml.load(text, Loader=_Loader)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        if mark is None:
            raise ConfigError(f"YAML syntax error: {e}", source=source) from None
        raise ConfigError(f"YAML syntax error: {getattr(e, 'problem', e)}",
                          mark.line + 1, mark.column + 1, source) from None
    data = {} if data is None else data
    if not isinstance(data, dict):
        raise _error_at(root, [], "config must be a mapping", source)
    for key, value in (overrides or {}).items():
        if value is not None:
            data[key] = value

    validator = jsonschema.Draft202012Validator(CONFIG_SCHEMA)
    err = jsonschema.exceptions.best_match(validator.iter_errors(data))
    if err is not None:
        where = "/".join(str(p) for p in err.absolute_path) or "<root>"
        raise _error_at(root, list(err.absolute_path), f"{where}: {err.message}", source)

    try:
        return _build_config(data)
    except (ValueError, KeyError) as e:
        raise _error_at(root, ["architecture"], str(e), source) from None


def _build_config(data: dict) -> ExperimentConfig:
    a = data["architecture"]
    kinds = tuple(kind_from_dict(k) for k in a.get("kinds", []))
    arch = Architecture(tuple(a["layers"]), kinds)
    init = init_from_dict(data.get("init", {}))
    task_d = dict(data.get("task", {}))
    data_seed = task_d.pop("seed", 0)
    task = TransformTask(**task_d)
    base = ExperimentConfig(arch, init)
    t = data.get("train", {})
    opt_d = dict(t.get("optimizer", {"name": "adam", "lr": 1e-3}))
    name = opt_d.pop("name")
    optimizer = Adam(**opt_d) if name == "adam" else SGD(**opt_d)
    decay_d = t.get("lr_decay", {"kind": "exponential", "factor": 0.95})
    if decay_d["kind"] == "exponential":
        decay = ExponentialPerEpoch(decay_d.get("factor", 0.95))
    elif decay_d["kind"] == "step":
        decay = StepDrop(tuple(decay_d.get("epochs", ())), decay_d.get("factor", 0.1))
    else:
        decay = ConstantLR()
    train_cfg = TrainConfig(epochs=t.get("epochs", base.train.epochs),
                            batch_size=t.get("batch_size", base.train.batch_size),
                            optimizer=optimizer, lr_decay=decay, loss=t.get("loss", "mse"))
    return ExperimentConfig(
        architecture=arch, init=init,
        methods=tuple(data.get("methods", METHODS)),
        densities=tuple(float(d) for d in data.get("densities", DEFAULT_DENSITIES)),
        seeds=tuple(data.get("seeds", DEFAULT_SEEDS)),
        task=task, data_seed=data_seed, train=train_cfg,
        synflow_iterations=data.get("synflow_iterations", 100),
        snip_examples_per_class=data.get("snip_examples_per_class", 10),
        width_factor=float(data.get("width_factor", 1.0)),
        workers=data.get("workers", 1),
        out=data.get("out", "runs"))


def load_config(path, overrides: dict | None = None) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config: {e.strerror}", source=str(path)) from None
    return parse_config(text, str(path), overrides)


# Files ------------------------------------------------------------------------------

def write_atomic(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", newline="") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        os.unlink(tmp)
        raise


def cell_name(method: str, density: float, seed: int) -> str:
    return f"{method}_d{density:g}_s{seed}"


def mask_to_json(net: SparseNet, method: str = "", density: float | None = None) -> str:
    """The mask plus what is needed to regenerate the initial weights."""
    doc = {"format": MASK_FORMAT, **net.arch.to_dict(), "init": net.init.to_dict(),
           "seed": int(net.rng_seed), "method": method, "target_density": density,
           "mask": [rle_encode(m) for m in net.mask]}
    return json.dumps(doc, sort_keys=True)


def mask_from_json(text: str) -> tuple[SparseNet, dict]:
    doc = json.loads(text)
    if doc.get("format") != MASK_FORMAT:
        raise ValueError(f"unsupported mask document format {doc.get('format')!r}")
    arch = Architecture.from_dict(doc)
    net = build_network(arch, init_from_dict(doc["init"]), int(doc["seed"]))
    mask = [rle_decode(enc, int(np.prod(arch.layer_shape(l)))).reshape(arch.layer_shape(l))
            for l, enc in enumerate(doc["mask"])]
    return net.with_mask(mask), doc


def manifest(cfg: ExperimentConfig, command: str, extra: dict | None = None) -> dict:
    return {
        "command": command,
        "config": cfg.to_dict(),
        "config_hash": cfg.config_hash(),
        "seeds": list(cfg.seeds),
        "versions": {"sparsenet": __version__, "numpy": np.__version__,
                     "scipy": scipy.__version__, "python": platform.python_version()},
        **(extra or {}),
    }


# Pruning ----------------------------------------------------------------------------

_METHOD_CODES = {m: i for i, m in enumerate(METHODS)}


def cell_seed(seed: int, method: str, density: float) -> int:
    """Pruning seed for one cell, a function of the cell's coordinates only."""
    ss = np.random.SeedSequence([seed, _METHOD_CODES[method], round(density * 10 ** 9)])
    return int(ss.generate_state(1, np.uint64)[0])


@functools.lru_cache(maxsize=4)
def task_data(task: TransformTask, data_seed: int) -> tuple[Dataset, Dataset]:
    return generate_transform_task(task, data_seed)


def snip_batch(train_set: Dataset, per_class: int) -> Dataset:
    """The first ``per_class`` examples of each class, in dataset order."""
    idx = np.concatenate([np.flatnonzero(train_set.labels == k)[:per_class]
                          for k in np.unique(train_set.labels)])
    return train_set.subset(np.sort(idx))


def prune(net: SparseNet, method: str, density: float, seed: int,
          cfg: ExperimentConfig) -> SparseNet:
    arch = net.arch
    if below_min_density(density, arch):
        raise DensityBelowMinimumError(
            f"target density {density:g} is below rho_min = {min_density(arch):.6g}")
    s = cell_seed(seed, method, density)
    if method.startswith("phew"):
        bias = {"phew": WalkBias.WEIGHT, "phew-kernel": WalkBias.WEIGHT,
                "phew-uniform": WalkBias.UNIFORM, "phew-inverse": WalkBias.INVERSE}[method]
        return phew_prune(net, density, bias, s, whole_kernel=method == "phew-kernel")[0]
    if method == "synflow":
        return synflow_prune(net, density, 1, cfg.synflow_iterations)
    if method == "synflow-l2":
        return synflow_prune(net, density, 2, cfg.synflow_iterations)
    if method == "magnitude":
        return prune_by_score(net, magnitude_score, ONE_SHOT, density)
    if method == "random":
        return prune_by_score(net, lambda n: random_score(n, s), ONE_SHOT, density)
    if method == "snip":
        batch = snip_batch(task_data(cfg.task, cfg.data_seed)[0], cfg.snip_examples_per_class)
        return prune_by_score(net, lambda n: snip_score(n, batch, cfg.train.loss), ONE_SHOT,
                              density)
    raise ValueError(f"unknown method {method!r}")


# Reports ------------------------------------------------------------------------------

@dataclass
class CellRow:
    method: str
    density: float
    seed: int
    status: str = "ok"
    reason: str = ""
    achieved_density: float | None = None
    active_params: int | None = None
    trace: float | None = None
    log_objective: float | None = None
    paths: str = ""
    log10_paths: float | None = None
    widths: str = ""
    layer_densities: str = ""
    collapsed: bool | None = None
    collapsed_layer: int | None = None
    train_loss: float | None = None
    test_loss: float | None = None


def _fill_structure(row: CellRow, net: SparseNet) -> None:
    rep = structure_report(net)
    row.achieved_density = rep.density
    row.active_params = net.active_params
    row.trace = rep.trace
    row.log_objective = rep.log_objective
    row.paths = str(rep.paths)
    row.log10_paths = rep.log10_paths
    row.widths = ";".join(str(w) for w in [rep.input_width] + [r.width for r in rep.layers])
    row.layer_densities = ";".join(repr(r.density) for r in rep.layers)
    row.collapsed = rep.collapsed
    row.collapsed_layer = rep.collapsed_layer


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def rows_to_csv(rows: list) -> str:
    if not rows:
        return ""
    names = [f.name for f in fields(rows[0])]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(names)
    for r in rows:
        w.writerow([_fmt(getattr(r, n)) for n in names])
    return buf.getvalue()


def rows_to_json(rows: list) -> str:
    return json.dumps([asdict(r) for r in rows], sort_keys=True, indent=1)


@dataclass
class AggregateRow:
    method: str
    density: float
    completed: int
    failed: int
    achieved_density_mean: float | None = None
    achieved_density_std: float | None = None
    trace_mean: float | None = None
    trace_std: float | None = None
    log10_paths_mean: float | None = None
    log10_paths_std: float | None = None
    widths_mean: str = ""
    train_loss_mean: float | None = None
    train_loss_std: float | None = None
    test_loss_mean: float | None = None
    test_loss_std: float | None = None


def _mean_std(values) -> tuple[float | None, float | None]:
    vals = [v for v in values if v is not None]
    if not vals:
        return None, None
    return float(np.mean(vals)), float(np.std(vals))


def aggregate(rows: list[CellRow], cfg: ExperimentConfig) -> list[AggregateRow]:
    """Mean and population std (ddof 0) across seeds per (method, density)."""
    out = []
    for m in cfg.methods:
        for d in cfg.densities:
            group = [r for r in rows if r.method == m and r.density == d]
            ok = [r for r in group if r.status == "ok"]
            agg = AggregateRow(m, d, len(ok), len(group) - len(ok))
            agg.achieved_density_mean, agg.achieved_density_std = _mean_std(
                r.achieved_density for r in ok)
            agg.trace_mean, agg.trace_std = _mean_std(r.trace for r in ok)
            agg.log10_paths_mean, agg.log10_paths_std = _mean_std(r.log10_paths for r in ok)
            agg.train_loss_mean, agg.train_loss_std = _mean_std(r.train_loss for r in ok)
            agg.test_loss_mean, agg.test_loss_std = _mean_std(r.test_loss for r in ok)
            if ok:
                w = np.mean([[int(x) for x in r.widths.split(";")] for r in ok], axis=0)
                agg.widths_mean = ";".join(repr(float(x)) for x in w)
            out.append(agg)
    return out


@dataclass
class ExperimentReport:
    rows: list[CellRow]
    aggregates: list[AggregateRow]
    timings: dict[str, float] = field(default_factory=dict)

    @property
    def failed(self) -> list[CellRow]:
        return [r for r in self.rows if r.status != "ok"]


# Cells --------------------------------------------------------------------------------

def _failure(row: CellRow, exc: BaseException) -> CellRow:
    row.status = "failed"
    row.reason = f"{type(exc).__name__}: {exc}"
    return row


def _prune_and_write(cfg: ExperimentConfig, method: str, density: float, seed: int,
                     out: Path) -> tuple[CellRow, SparseNet | None]:
    row = CellRow(method, density, seed)
    name = cell_name(method, density, seed)
    try:
        net = prune(build_network(cfg.architecture, cfg.init, seed), method, density, seed, cfg)
        _fill_structure(row, net)
        write_atomic(out / "masks" / f"{name}.json", mask_to_json(net, method, density))
        rep = structure_report(net)
        write_atomic(out / "structure" / f"{name}.csv", rep.to_csv())
        write_atomic(out / "structure" / f"{name}.json", rep.to_json())
    except Exception as e:     # a failed cell must not abort its siblings
        return _failure(row, e), None
    return row, net


def _prune_cell(cfg: ExperimentConfig, method: str, density: float, seed: int,
                out: Path) -> CellRow:
    return _prune_and_write(cfg, method, density, seed, out)[0]


def _train_net(cfg: ExperimentConfig, net: SparseNet, seed: int, row: CellRow,
               log_path: Path) -> None:
    train_set, test_set = task_data(cfg.task, cfg.data_seed)
    if net.arch.input_dim != train_set.inputs.shape[1] or \
            net.arch.output_dim != train_set.targets.shape[1]:
        raise ValueError(f"architecture {list(net.arch.layer_sizes)} does not match task "
                         f"dimensions {train_set.inputs.shape[1]} -> {train_set.targets.shape[1]}")
    _, rep = train(net, train_set, replace(cfg.train, seed=seed), test_set)
    row.train_loss = rep.final["train_loss"]
    row.test_loss = rep.final["eval_loss"]
    write_atomic(log_path, rep.to_csv())


def _compare_cell(cfg: ExperimentConfig, method: str, density: float, seed: int,
                  out: Path) -> CellRow:
    row, net = _prune_and_write(cfg, method, density, seed, out)
    if net is None:
        return row
    try:
        _train_net(cfg, net, seed, row, out / "train" / f"{cell_name(method, density, seed)}.csv")
    except TrainingDivergence as e:
        row.status, row.reason = "failed", f"diverged in epoch {e.epoch}"
    except Exception as e:
        return _failure(row, e)
    return row


def _train_cell(cfg: ExperimentConfig, method: str, density: float, seed: int, out: Path,
                masks: Path) -> CellRow:
    row = CellRow(method, density, seed)
    name = cell_name(method, density, seed)
    try:
        net, _ = mask_from_json((masks / f"{name}.json").read_text())
        if net.arch != cfg.architecture:
            raise ValueError("mask architecture differs from the config architecture")
        _fill_structure(row, net)
        _train_net(cfg, net, seed, row, out / "train" / f"{name}.csv")
    except TrainingDivergence as e:
        row.status, row.reason = "failed", f"diverged in epoch {e.epoch}"
    except Exception as e:
        return _failure(row, e)
    return row


def _timed(fn, *args):
    t0 = time.perf_counter()
    try:
        row = fn(*args)
    except Exception as e:          # defensive: cell functions already trap errors
        row = _failure(CellRow(*args[1:4]), e)
    return row, time.perf_counter() - t0


def run_cells(fn, cfg: ExperimentConfig, extra_args: tuple, workers: int = 1
              ) -> tuple[list[CellRow], dict[str, float]]:
    """Run ``fn(cfg, method, density, seed, *extra_args)`` over the grid, in grid order."""
    jobs = [(fn, cfg, m, d, s, *extra_args) for m, d, s in cfg.cells()]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_timed, *zip(*jobs)))
    else:
        results = [_timed(*job) for job in jobs]
    rows = [r for r, _ in results]
    timings = {cell_name(r.method, r.density, r.seed): t for r, (_, t) in zip(rows, results)}
    return rows, timings


def _timings_csv(timings: dict[str, float]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["cell", "wall_time"])
    for k, v in timings.items():
        w.writerow([k, f"{v:.6f}"])
    return buf.getvalue()


def write_report(out: Path, report: ExperimentReport, stem: str = "report") -> None:
    write_atomic(out / f"{stem}.csv", rows_to_csv(report.rows))
    write_atomic(out / f"{stem}.json", rows_to_json(report.rows))
    write_atomic(out / "aggregate.csv", rows_to_csv(report.aggregates))
    write_atomic(out / "aggregate.json", rows_to_json(report.aggregates))
    # wall times vary run to run, so they live apart from the reproducible reports
    write_atomic(out / "timings.csv", _timings_csv(report.timings))


def _write_manifest(out: Path, cfg: ExperimentConfig, command: str, extra=None) -> None:
    write_atomic(out / "manifest.json",
                 json.dumps(manifest(cfg, command, extra), sort_keys=True, indent=1) + "\n")


def cmd_prune(cfg: ExperimentConfig, out, workers: int = 1) -> ExperimentReport:
    out = Path(out)
    _write_manifest(out, cfg, "prune")
    rows, timings = run_cells(_prune_cell, cfg, (out,), workers)
    report = ExperimentReport(rows, aggregate(rows, cfg), timings)
    write_report(out, report)
    return report


def cmd_compare(cfg: ExperimentConfig, out, workers: int = 1) -> ExperimentReport:
    out = Path(out)
    _write_manifest(out, cfg, "compare")
    rows, timings = run_cells(_compare_cell, cfg, (out,), workers)
    report = ExperimentReport(rows, aggregate(rows, cfg), timings)
    write_report(out, report)
    return report


def cmd_train(cfg: ExperimentConfig, out, masks=None, workers: int = 1) -> ExperimentReport:
    """Train the masks a previous ``prune`` (or ``shuffle-width``) run wrote."""
    out = Path(out)
    masks = Path(masks) if masks is not None else out / "masks"
    _write_manifest(out, cfg, "train", {"masks": str(masks)})
    rows, timings = run_cells(_train_cell, cfg, (out, masks), workers)
    report = ExperimentReport(rows, aggregate(rows, cfg), timings)
    write_report(out, report, "train_report")
    return report


@dataclass
class TraceRow:
    method: str
    density: float
    seed: int
    status: str = "ok"
    reason: str = ""
    achieved_density: float | None = None
    trace: float | None = None
    log_objective: float | None = None
    log10_paths: float | None = None


def _trace_cell(cfg: ExperimentConfig, method: str, density: float, seed: int) -> TraceRow:
    row = TraceRow(method, density, seed)
    try:
        net = prune(build_network(cfg.architecture, cfg.init, seed), method, density, seed, cfg)
        rep = structure_report(net)
        row.achieved_density, row.trace = rep.density, rep.trace
        row.log_objective, row.log10_paths = rep.log_objective, rep.log10_paths
    except Exception as e:
        row.status, row.reason = "failed", f"{type(e).__name__}: {e}"
    return row


def cmd_trace(cfg: ExperimentConfig, out, workers: int = 1) -> list[TraceRow]:
    """Path kernel trace per cell without writing masks or training."""
    out = Path(out)
    _write_manifest(out, cfg, "trace")
    rows, timings = run_cells(_trace_cell, cfg, (), workers)
    write_atomic(out / "trace.csv", rows_to_csv(rows))
    write_atomic(out / "trace.json", rows_to_json(rows))
    write_atomic(out / "timings.csv", _timings_csv(timings))
    return rows


# Width shuffle ----------------------------------------------------------------------------

@dataclass
class ShuffleResult:
    net: SparseNet
    widths_before: list[int]
    target_widths: list[int]
    widths_after: list[int]
    notes: list[str]


def _cover(rows_idx: np.ndarray, cols_idx: np.ndarray, count: int, shape,
           rng: np.random.Generator) -> np.ndarray:
    """A mask with exactly ``count`` entries touching every listed row and column.

    ``max(len(rows), len(cols))`` entries pair them up cyclically; the rest go
    uniformly at random inside the rows x cols block, then anywhere in the layer.
    """
    mask = np.zeros(shape, dtype=bool)
    r, c = rng.permutation(rows_idx), rng.permutation(cols_idx)
    n = max(len(r), len(c))
    k = np.arange(n)
    mask[r[k % len(r)], c[k % len(c)]] = True
    left = count - n
    block = np.zeros(shape, dtype=bool)
    block[np.ix_(rows_idx, cols_idx)] = True
    for region in (block & ~mask, ~block & ~mask):
        free = np.flatnonzero(region)
        take = min(left, free.size)
        mask.ravel()[rng.choice(free, size=take, replace=False)] = True
        left -= take
    return mask


def shuffle_width(net: SparseNet, x: float, seed: int = 0) -> ShuffleResult:
    """Reshuffle each layer's mask so unit layer ``j`` reaches width
    ``round(w + x (W - w))``, keeping every layer's active count fixed.

    The active set of each unit layer is its current live units plus random
    extras.  Width is capped by the active counts of the adjacent layers; a
    capped layer gets the best width available and a note.  A parametrized
    layer whose two active sets are unchanged keeps its mask, so ``x = 0``
    returns the mask untouched.
    """
    if not 0 <= x <= 1:
        raise ValueError(f"width factor must be in [0, 1], got {x}")
    arch = net.arch
    if not arch.is_dense:
        raise ValueError("width shuffling supports dense layers only")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 5])))
    live = live_units(net)
    counts = net.layer_active_counts()
    L = arch.parametrized_layer_count
    before = [int(v.sum()) for v in live]
    targets, notes, sets = [], [], []
    for j, (units, w) in enumerate(zip(arch.layer_sizes, before)):
        want = round(w + x * (units - w))
        cap = min(counts[l] for l in (j - 1, j) if 0 <= l < L)
        if want > cap:
            notes.append(f"unit layer {j}: width {want} needs more than the {cap} entries "
                         f"available; using {cap}")
            want = cap
        targets.append(want)
        current = np.flatnonzero(live[j])
        extra = rng.permutation(np.flatnonzero(~live[j]))[:max(0, want - current.size)]
        sets.append(np.sort(np.concatenate([current, extra])))
    new_mask = []
    for l in range(L):
        src, dst = sets[l], sets[l + 1]
        if src.size == before[l] and dst.size == before[l + 1]:
            new_mask.append(net.mask[l].copy())
            continue
        new_mask.append(_cover(dst, src, counts[l], arch.layer_shape(l), rng))
    shuffled = net.with_mask(new_mask)
    if shuffled.layer_active_counts() != counts:
        raise AssertionError("width shuffle changed a layer's active count")
    after = [int(v.sum()) for v in live_units(shuffled)]
    return ShuffleResult(shuffled, before, targets, after, notes)


@dataclass
class ShuffleRow:
    method: str
    density: float
    seed: int
    status: str = "ok"
    reason: str = ""
    width_factor: float | None = None
    widths_before: str = ""
    target_widths: str = ""
    widths_after: str = ""
    layer_counts: str = ""
    notes: str = ""


def _shuffle_cell(cfg: ExperimentConfig, method: str, density: float, seed: int, out: Path,
                  masks: Path) -> ShuffleRow:
    row = ShuffleRow(method, density, seed, width_factor=cfg.width_factor)
    name = cell_name(method, density, seed)
    try:
        net, doc = mask_from_json((masks / f"{name}.json").read_text())
        res = shuffle_width(net, cfg.width_factor, cell_seed(seed, method, density))
        join = lambda xs: ";".join(str(v) for v in xs)
        row.widths_before, row.target_widths = join(res.widths_before), join(res.target_widths)
        row.widths_after = join(res.widths_after)
        row.layer_counts = join(res.net.layer_active_counts())
        row.notes = " | ".join(res.notes)
        write_atomic(out / "shuffled" / f"{name}.json",
                     mask_to_json(res.net, doc.get("method", method), doc.get("target_density")))
        write_atomic(out / "structure" / f"{name}_before.csv", structure_report(net).to_csv())
        write_atomic(out / "structure" / f"{name}_after.csv", structure_report(res.net).to_csv())
    except Exception as e:
        row.status, row.reason = "failed", f"{type(e).__name__}: {e}"
    return row


def cmd_shuffle_width(cfg: ExperimentConfig, out, masks=None, workers: int = 1
                      ) -> list[ShuffleRow]:
    out = Path(out)
    masks = Path(masks) if masks is not None else out / "masks"
    _write_manifest(out, cfg, "shuffle-width", {"masks": str(masks)})
    rows, timings = run_cells(_shuffle_cell, cfg, (out, masks), workers)
    write_atomic(out / "shuffle.csv", rows_to_csv(rows))
    write_atomic(out / "shuffle.json", rows_to_json(rows))
    write_atomic(out / "timings.csv", _timings_csv(timings))
    return rows
