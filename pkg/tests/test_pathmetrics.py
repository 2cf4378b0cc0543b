import json
import math

import numpy as np
import pytest

from sparsenet.netcore import Architecture, ConvChannel, Dense, Kaiming, NormalFixed, build_network
from sparsenet.pathmetrics import (SearchTooLarge, _direct_scan, _profile_scan,
                                   brute_force_best_mask, count_paths, detect_layer_collapse,
                                   enumerate_unit_paths, layer_widths, live_units, max_paths_width,
                                   max_paths_width_search, structure_report)
from sparsenet.scores import path_kernel_trace, synflow_prune
from sparsenet.walks import phew_prune

from conftest import dense_net, random_masked


def single_path(net):
    mask = [np.zeros(m.shape, bool) for m in net.mask]
    for m in mask:
        m[0, 0] = True
    return net.with_mask(mask)


class TestCountPaths:
    def test_full(self):
        assert count_paths(dense_net(2, 3, 2)) == 12

    def test_single_path(self):
        assert count_paths(single_path(dense_net(3, 4, 4, 3))) == 1

    @pytest.mark.parametrize("seed", range(8))
    def test_matches_dfs(self, seed):
        net = random_masked(dense_net(3, 4, 4, 3, seed=seed), 0.5, seed)
        assert count_paths(net) == sum(1 for _ in enumerate_unit_paths(net))

    def test_arbitrary_precision(self):
        net = dense_net(*[64] * 13, seed=0)
        assert count_paths(net) == 64 ** 13
        assert count_paths(net) > 2 ** 64

    def test_conv_counts_channel_edges(self):
        arch = Architecture((2, 3, 2), (ConvChannel(2, 2), Dense()))
        assert count_paths(build_network(arch)) == 12


class TestWidths:
    def test_full(self):
        net = dense_net(3, 5, 4, 2)
        assert layer_widths(net) == [3, 5, 4, 2]

    def test_single_path(self):
        assert layer_widths(single_path(dense_net(3, 5, 4, 2))) == [1, 1, 1, 1]

    def test_dead_end_not_counted(self):
        net = dense_net(1, 2, 1)
        mask = [np.array([[True], [True]]), np.array([[True, False]])]
        live = live_units(net.with_mask(mask))
        assert live[1].tolist() == [True, False]
        assert layer_widths(net.with_mask(mask)) == [1, 1, 1]


class TestCollapse:
    def test_phew_never_collapses(self):
        net = dense_net(4, 8, 8, 4, seed=1)
        for d in (3 / net.arch.total_params, 0.05, 0.2):
            assert not detect_layer_collapse(phew_prune(net, d)[0]).collapsed

    def test_emptied_layer_two(self):
        net = dense_net(2, 3, 3, 2)
        mask = [m.copy() for m in net.mask]
        mask[1][:] = False
        status = detect_layer_collapse(net.with_mask(mask))
        assert status.collapsed and status.layer == 2

    def test_empty_network(self):
        net = dense_net(2, 3, 2)
        status = detect_layer_collapse(net.with_mask([np.zeros_like(m) for m in net.mask]))
        assert not status.collapsed and status.empty_network

    @pytest.mark.parametrize("seed", range(10))
    def test_paths_imply_no_collapse(self, seed):
        net = random_masked(dense_net(3, 4, 4, 3, seed=seed), 0.3, seed)
        if count_paths(net) >= 1:
            assert not detect_layer_collapse(net).collapsed


class TestMaxPathsWidth:
    def test_closed_form(self):
        n1, n2 = max_paths_width(4, 48)
        assert n1 == n2 == 4
        assert 4 * (n1 + n2) + n1 * n2 == 48

    def test_small(self):
        n1, n2 = max_paths_width(1, 3)
        assert n1 == 1 and 1 * n1 * n2 == 1

    def test_search(self):
        assert max_paths_width_search(4, 48) == ((4, 4), 256)

    @pytest.mark.parametrize("D, m", [(0, 4), (2, 0), (2, -3)])
    def test_errors(self, D, m):
        with pytest.raises(ValueError):
            max_paths_width(D, m)


class TestBruteForce:
    def test_two_full_units(self):
        arch = Architecture.dense(2, 4, 2)
        best = brute_force_best_mask(arch, build_network(arch).weights, 8, "paths")
        into, out = best.mask
        assert best.value == 8 and best.evaluated == math.comb(16, 8)
        assert int((into.all(axis=1) & out.all(axis=0)).sum()) == 2
        assert int((into.any(axis=1) | out.any(axis=0)).sum()) == 2

    def test_full_mask_unique_at_m_equals_M(self):
        arch = Architecture.dense(2, 3, 2)
        best = brute_force_best_mask(arch, build_network(arch).weights, 12, "paths")
        assert all(m.all() for m in best.mask) and best.value == 12

    def test_two_hidden_layer_widths(self):
        arch = Architecture.dense(2, 4, 4, 2)
        best = brute_force_best_mask(arch, build_network(arch).weights, 12, "paths")
        net = build_network(arch).with_mask(best.mask)
        assert layer_widths(net)[1:3] == [2, 2]
        assert count_paths(net) == 16 == best.value
        assert best.strategy == "degree-profile"

    @pytest.mark.parametrize("sizes, ms", [((2, 2, 2, 2), range(6, 13)),
                                           ((2, 3, 3, 2), range(6, 10)),
                                           ((2, 4, 2), range(4, 11))])
    def test_profile_reduction_matches_direct_scan(self, sizes, ms):
        arch = Architecture.dense(*sizes)
        w = build_network(arch).weights
        for m in ms:
            direct = _direct_scan(arch, w, m, "paths")
            reduced = _profile_scan(arch, m, 10 ** 7)
            assert reduced.value == direct.value, m
            net = build_network(arch).with_mask(reduced.mask)
            assert net.active_params == m
            assert count_paths(net) == reduced.value
            assert layer_widths(net)[0] == arch.input_dim
            assert layer_widths(net)[-1] == arch.output_dim

    def test_trace_argmax_beats_pruners(self):
        arch = Architecture.dense(2, 3, 2)
        net = build_network(arch, NormalFixed(1.0), 3)
        m = 5
        best = brute_force_best_mask(arch, net.weights, m, "trace")
        assert best.value == pytest.approx(path_kernel_trace(net.with_mask(best.mask)), rel=1e-12)
        for other in (phew_prune(net, m / 12)[0], synflow_prune(net, m / 12, power=2)):
            if other.active_params == m:
                assert best.value >= path_kernel_trace(other) * (1 - 1e-12)

    def test_first_maximum_wins(self):
        # all masks tie on paths at m = M - ... use equal weights and check order
        arch = Architecture.dense(1, 2, 1)
        best = brute_force_best_mask(arch, build_network(arch).weights, 2, "paths")
        assert best.mask[0].ravel().tolist() == [True, False]
        assert best.mask[1].ravel().tolist() == [True, False]

    def test_guard(self):
        arch = Architecture.dense(4, 6, 4)
        with pytest.raises(SearchTooLarge):
            brute_force_best_mask(arch, build_network(arch).weights, 20, "trace", limit=1000)

    def test_rejects_conv_and_bad_args(self):
        arch = Architecture((1, 1), (ConvChannel(2, 2),))
        with pytest.raises(ValueError):
            brute_force_best_mask(arch, build_network(arch).weights, 2)
        dense = Architecture.dense(2, 2)
        with pytest.raises(ValueError):
            brute_force_best_mask(dense, build_network(dense).weights, 5)
        with pytest.raises(ValueError):
            brute_force_best_mask(dense, build_network(dense).weights, 2, "volume")


class TestStructureReport:
    def test_fields(self):
        net = phew_prune(dense_net(4, 8, 8, 4, seed=0), 0.3)[0]
        rep = structure_report(net)
        assert [r.units for r in rep.layers] == [8, 8, 4]
        assert all(0 <= r.density <= 1 for r in rep.layers)
        assert sum(r.active_params for r in rep.layers) == net.active_params
        assert rep.paths == count_paths(net)
        assert rep.trace == pytest.approx(path_kernel_trace(net))
        assert rep.hidden_layer_count == 2 and rep.parametrized_layer_count == 3
        assert not rep.collapsed

    def test_width_group_density(self):
        net = random_masked(dense_net(4, 8, 8, 4, seed=0), 0.4, 1)
        rep = structure_report(net)
        hidden = rep.layers[:2]
        expected = (hidden[0].density + hidden[1].density) / 2
        assert all(r.width_group_density == pytest.approx(expected) for r in hidden)
        assert rep.layers[-1].width_group_density is None

    def test_csv_and_json(self):
        rep = structure_report(dense_net(3, 4, 2))
        lines = rep.to_csv().splitlines()
        assert lines[0].startswith("layer,units,width")
        assert len(lines) == 3
        doc = json.loads(rep.to_json())
        assert doc["paths"] == "24"

    def test_overflow_reported_not_raised(self):
        net = build_network(Architecture.dense(*[50] * 80), NormalFixed(100.0), 0)
        rep = structure_report(net)
        assert rep.trace is None and rep.notes
        assert np.isfinite(rep.log_objective)
