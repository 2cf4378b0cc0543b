import numpy as np
import pytest

from sparsenet.netcore import Architecture, Kaiming, NormalFixed, SparseNet, build_network


def dense_net(*sizes, seed=0, init=None) -> SparseNet:
    return build_network(Architecture.dense(*sizes), init or Kaiming(), seed)


def explicit_net(*weights) -> SparseNet:
    """Dense net from weight arrays given as [dst, src]; full mask."""
    weights = [np.asarray(w, dtype=np.float64) for w in weights]
    sizes = [weights[0].shape[1]] + [w.shape[0] for w in weights]
    mask = [np.ones(w.shape, dtype=bool) for w in weights]
    return SparseNet(Architecture.dense(*sizes), tuple(weights), tuple(mask))


def random_masked(net: SparseNet, keep: float, seed: int) -> SparseNet:
    rng = np.random.default_rng(seed)
    return net.with_mask([rng.random(m.shape) < keep for m in net.mask])


@pytest.fixture
def normal_net():
    return lambda *sizes, seed=0: dense_net(*sizes, seed=seed, init=NormalFixed(1.0))


# (criterion number, PASS/FAIL, detail) rows appended by test_acceptance.py
ACCEPTANCE: list[tuple[int, str, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, verdict, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"{verdict} criterion {number:>2}: {detail}")
