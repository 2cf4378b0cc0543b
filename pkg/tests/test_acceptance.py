"""The acceptance criteria, one test each, at their stated tolerances.

Every test records a PASS or FAIL line that is printed in the terminal summary.
"""
import itertools
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE, dense_net, explicit_net, random_masked
from sparsenet.cli import main
from sparsenet.experiments import (cell_name, cmd_compare, cmd_shuffle_width, cmd_train,
                                   mask_from_json, parse_config, prune)
from sparsenet.lemmas import (biased_trace_ratio, check_max_paths, check_min_density,
                              check_synflow_no_collapse, walk_spread)
from sparsenet.netcore import Architecture, NormalFixed, min_density
from sparsenet.pathmetrics import (brute_force_objective, brute_force_trace, count_paths,
                                   detect_layer_collapse, layer_widths)
from sparsenet.scores import path_kernel_trace, synflow_objective
from sparsenet.trainer import evaluate, forward, loss_gradients
from sparsenet.walks import DensityBelowMinimumError, phew_prune


def record(number: int, passed: bool, detail: str) -> None:
    verdict = "PASS" if passed else "FAIL"
    ACCEPTANCE.append((number, verdict, detail))
    print(f"{verdict} criterion {number}: {detail}")
    assert passed, detail


def small_nets(count=10, seed=0):
    """Random masked Dense nets no larger than 3-4-4-3."""
    rng = np.random.default_rng(seed)
    nets = []
    while len(nets) < count:
        depth = int(rng.integers(1, 4))
        sizes = [int(rng.integers(1, 4))] + [int(rng.integers(1, 5)) for _ in range(depth - 1)] \
            + [int(rng.integers(1, 4))]
        net = dense_net(*sizes, seed=len(nets), init=NormalFixed(1.0))
        net = random_masked(net, 0.75, len(nets))
        if 0 < count_paths(net) <= 200:
            nets.append(net)
    return nets


def rel_err(a, b):
    return abs(a - b) / max(abs(b), 1e-300)


def test_1_trace_oracle():
    nets = small_nets()
    t0 = time.perf_counter()
    worst = max(rel_err(path_kernel_trace(n), brute_force_trace(n)) for n in nets)
    elapsed = time.perf_counter() - t0
    record(1, worst <= 1e-9 and elapsed < 1.0,
           f"max relative error {worst:.2e} over 10 nets in {elapsed:.3f}s")


def test_2_objective_identity():
    worst = max(rel_err(synflow_objective(n, 2), brute_force_objective(n, 2))
                for n in small_nets())
    hand = synflow_objective(explicit_net([[2.0], [1.0]], [[3.0, 1.0]]), 2)
    record(2, worst <= 1e-9 and hand == 37,
           f"max relative error {worst:.2e}; 1-2-1 example gives {hand:g}")


def test_3_biased_trace_ratio():
    t0 = time.perf_counter()
    ratios = {h: biased_trace_ratio(h) for h in (1, 2, 3)}
    elapsed = time.perf_counter() - t0
    ok = all(0.75 * 2 ** h <= r <= 1.25 * 2 ** h for h, r in ratios.items())
    shown = ", ".join(f"L_h={h}: {r:.3f} (target {2 ** h})" for h, r in ratios.items())
    record(3, ok and elapsed < 30, f"{shown}; {elapsed:.1f}s")


def test_4_walk_distribution():
    s = walk_spread()
    spread = int(s.forward_starts.max() - s.forward_starts.min())
    record(4, s.p_value >= 0.01 and spread <= 1,
           f"chi2={s.chi2:.1f}, p={s.p_value:.4f}, forward start spread {spread}")


def test_5_min_density_boundary():
    arch = Architecture.dense(8, 16, 16, 8)
    phew_rows = check_min_density(arch)
    net = dense_net(*arch.layer_sizes)
    rho = min_density(arch)
    rejected = 0
    smaller = [rho * (1 - 1e-6), (arch.parametrized_layer_count - 1) / arch.total_params,
               rho / 2, 1e-9]
    for target in smaller:
        try:
            phew_prune(net, target)
        except DensityBelowMinimumError:
            rejected += 1
    sf = check_synflow_no_collapse(nets=10, eps=1e-6)[0]
    ok = all(r.passed for r in phew_rows) and rejected == len(smaller) and sf.passed
    record(5, ok, f"PHEW at L/M: {phew_rows[0].measured}; {rejected}/{len(smaller)} smaller "
                  f"targets rejected; SynFlow: {sf.measured}")


def test_6_brute_force_widths():
    t0 = time.perf_counter()
    rows = check_max_paths()
    elapsed = time.perf_counter() - t0
    record(6, all(r.passed for r in rows) and elapsed < 60,
           "; ".join(f"{r.check}: {r.measured}" for r in rows) + f"; {elapsed:.1f}s")


WIDE = """\
architecture: {layers: [16, 64, 64, 64, 16]}
task: {image_side: 4}
"""


@pytest.fixture(scope="module")
def wide_masks():
    cfg = parse_config(WIDE)
    masks = {}
    for method in ("phew", "phew-uniform", "synflow-l2", "random"):
        masks[method] = [prune(dense_net(16, 64, 64, 64, 16, seed=s), method, 0.1, s, cfg)
                         for s in range(5)]
    return masks


def test_7_width_contrast(wide_masks):
    phew = np.mean([layer_widths(n)[1:-1] for n in wide_masks["phew"]], axis=0)
    sf2 = np.mean([layer_widths(n)[1:-1] for n in wide_masks["synflow-l2"]], axis=0)
    ok = bool(np.all(phew >= 0.95 * 64) and np.all(sf2 < phew))
    record(7, ok, f"mean hidden widths PHEW {phew.tolist()}, SynFlow-L2 {sf2.tolist()}")


def test_8_trace_ordering(wide_masks):
    order = ("synflow-l2", "phew", "phew-uniform", "random")
    means = [np.mean([path_kernel_trace(n) for n in wide_masks[m]]) for m in order]
    ok = all(a >= b for a, b in zip(means, means[1:]))
    record(8, ok, " >= ".join(f"{m} {v:.4g}" for m, v in zip(order, means)))


def test_9_gradient_oracle():
    net = random_masked(dense_net(5, 8, 6, 3, seed=9), 0.6, 9)
    rng = np.random.default_rng(9)
    x, y = rng.normal(size=(10, 5)), rng.normal(size=(10, 3))
    _, grads = loss_gradients(net, x, y)
    active = [(l, idx) for l, m in enumerate(net.mask) for idx in zip(*np.nonzero(m))]
    h, worst = 1e-6, 0.0
    for k in rng.choice(len(active), 20, replace=False):
        l, idx = active[k]
        w = [a.copy() for a in net.weights]
        w[l][idx] += h
        up = evaluate(net.with_weights(w), x, y)["loss"]
        w[l][idx] -= 2 * h
        down = evaluate(net.with_weights(w), x, y)["loss"]
        fd = (up - down) / (2 * h)
        worst = max(worst, abs(grads[l][idx] - fd) / max(abs(fd), 1e-8))

    small = dense_net(2, 3, 2, seed=4)
    xs = rng.normal(size=(5, 2))
    out = forward(small, xs).output
    w1, w2 = small.masked_weights
    path_err = 0.0
    for n, xv in enumerate(xs):
        hidden_on = (w1 @ xv) > 0
        for o in range(2):
            total = sum(w2[o, j] * w1[j, i] * xv[i] * hidden_on[j]
                        for i, j in itertools.product(range(2), range(3)))
            path_err = max(path_err, rel_err(out[n, o], total))
    record(9, worst <= 1e-5 and path_err <= 1e-9,
           f"gradient max relative error {worst:.2e}; path-sum forward {path_err:.2e}")


TRANSFORM = """\
architecture: {layers: [144, 100, 100, 144]}
densities: [0.1]
seeds: [0, 1, 2]
task: {image_side: 12}
train:
  epochs: 10
  batch_size: 32
  optimizer: {name: adam, lr: 1e-3}
  lr_decay: {kind: exponential, factor: 0.95}
"""


@pytest.mark.slow
def test_10_transform_task(tmp_path):
    cfg = parse_config(TRANSFORM, overrides={"methods": ["phew", "random", "synflow-l2"]})
    t0 = time.perf_counter()
    rep = cmd_compare(cfg, tmp_path)
    elapsed = time.perf_counter() - t0
    mse = {a.method: a.test_loss_mean for a in rep.aggregates}
    ok = (not rep.failed and mse["phew"] < mse["random"]
          and mse["phew"] <= 1.1 * mse["synflow-l2"] and elapsed < 300)
    record(10, ok, f"test MSE PHEW {mse['phew']:.6f}, random {mse['random']:.6f}, "
                   f"SynFlow-L2 {mse['synflow-l2']:.6f}; {elapsed:.0f}s")


@pytest.mark.slow
def test_11_width_shuffle(tmp_path):
    cfg = parse_config(TRANSFORM, overrides={"methods": ["synflow-l2"], "width_factor": 1.0})
    base = cmd_compare(cfg, tmp_path)
    shuffled = cmd_shuffle_width(cfg, tmp_path)
    retrained = cmd_train(cfg, tmp_path / "retrained", masks=tmp_path / "shuffled")
    counts_kept = True
    for r in base.rows:
        name = cell_name(r.method, r.density, r.seed)
        old, _ = mask_from_json((tmp_path / "masks" / f"{name}.json").read_text())
        new, _ = mask_from_json((tmp_path / "shuffled" / f"{name}.json").read_text())
        counts_kept &= old.layer_active_counts() == new.layer_active_counts()
    before = [r.test_loss for r in base.rows]
    after = [r.test_loss for r in retrained.rows]
    not_worse = sum(a <= b for a, b in zip(after, before))
    pairs = ", ".join(f"s{r.seed}: {b:.6f} -> {a:.6f}"
                      for r, b, a in zip(base.rows, before, after))
    record(11, counts_kept and not_worse >= 2 and not retrained.failed,
           f"not worse in {not_worse}/3 seeds ({pairs}); layer counts kept: {counts_kept}; "
           f"widths {shuffled[0].widths_before} -> {shuffled[0].widths_after}")


RERUN = """architecture: {layers: [16, 32, 32, 16]}
methods: [phew, synflow-l2, snip, random]
densities: [0.1, 0.3]
seeds: [0, 1]
task: {image_side: 4, classes: 4, train_per_class: 20, test_per_class: 5}
train: {epochs: 2, batch_size: 8}
synflow_iterations: 20
width_factor: 0.5
"""


def _snapshot(out):
    # wall times are the one output that legitimately differs between runs
    return {p.relative_to(out).as_posix(): p.read_bytes() for p in sorted(out.rglob("*"))
            if p.is_file() and p.name != "timings.csv"}


@pytest.mark.slow
def test_12_determinism(tmp_path):
    config = tmp_path / "run.yaml"
    config.write_text(RERUN)
    out = tmp_path / "out"
    runs = [("prune", []), ("compare", []), ("shuffle-width", []), ("trace", []),
            ("train", ["--masks", str(out / "shuffled")]), ("verify-lemmas", [])]
    differing = []
    for command, extra in runs:
        args = [command, "--out", str(out), *extra]
        if command != "verify-lemmas":
            args += ["--config", str(config)]
        snapshots = []
        for _ in range(2):
            assert main(args) == 0
            snapshots.append(_snapshot(out))
        if snapshots[0] != snapshots[1]:
            differing.append(command)
    files = len(_snapshot(out))
    record(12, not differing,
           f"{len(runs)} subcommands rerun, {files} files compared; differing: "
           f"{differing or 'none'}")
