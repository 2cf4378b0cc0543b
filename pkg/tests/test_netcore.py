import json
from fractions import Fraction

import numpy as np
import pytest

from sparsenet.netcore import (Architecture, ArchitectureError, ConvChannel, Dense, DenseReinit,
                               Kaiming, LayerwiseSparseReinit, NeuronwiseSparseReinit, NormalFixed,
                               SparseNet, XavierUniform, apply_mask, build_network, density,
                               dumps_net, layer_variance, loads_net, min_density, reinitialize,
                               rle_decode, rle_encode)

from conftest import dense_net


class TestArchitecture:
    def test_counts(self):
        arch = Architecture.dense(4, 8, 8, 4)
        assert arch.parametrized_layer_count == 3
        assert arch.hidden_layer_count == 2
        assert arch.total_params == 32 + 64 + 32

    def test_conv_param_count(self):
        arch = Architecture((3, 4, 2), (ConvChannel(3, 3), Dense()))
        assert arch.layer_shape(0) == (4, 3, 3, 3)
        assert arch.total_params == 3 * 4 * 9 + 8

    @pytest.mark.parametrize("sizes", [(3,), (), (2, 0, 2), (2, -1)])
    def test_rejects_invalid_sizes(self, sizes):
        with pytest.raises(ArchitectureError):
            Architecture(sizes)

    def test_rejects_wrong_kind_count(self):
        with pytest.raises(ArchitectureError):
            Architecture((2, 3, 2), (Dense(),))

    def test_rejects_bad_kernel(self):
        with pytest.raises(ArchitectureError):
            ConvChannel(0, 3)

    def test_dict_round_trip(self):
        arch = Architecture((3, 4, 2), (ConvChannel(2, 3), Dense()))
        assert Architecture.from_dict(arch.to_dict()) == arch


class TestBuildNetwork:
    def test_full_mask(self):
        net = dense_net(3, 5, 2)
        assert all(m.all() for m in net.mask)
        assert density(net) == 1.0

    def test_kaiming_variance_uses_destination_width(self):
        arch = Architecture.dense(10, 50)
        assert layer_variance(Kaiming(), arch, 0) == pytest.approx(2 / 50)

    def test_kaiming_empirical_variance(self):
        net = build_network(Architecture.dense(2000, 50), Kaiming(), seed=3)
        assert net.weights[0].size == 10 ** 5
        assert 0.036 <= net.weights[0].var() <= 0.044

    def test_conv_kaiming_includes_kernel_area(self):
        arch = Architecture((3, 4), (ConvChannel(3, 3),))
        assert layer_variance(Kaiming(), arch, 0) == pytest.approx(2 / (4 * 9))

    def test_deterministic(self):
        a, b = dense_net(4, 6, 3, seed=11), dense_net(4, 6, 3, seed=11)
        assert a.same_as(b)
        assert not a.same_as(dense_net(4, 6, 3, seed=12))

    def test_normal_fixed_and_xavier(self):
        arch = Architecture.dense(300, 300)
        assert build_network(arch, NormalFixed(0.5), 0).weights[0].std() == pytest.approx(0.5, rel=0.02)
        xav = build_network(arch, XavierUniform(), 0).weights[0]
        assert np.abs(xav).max() <= XavierUniform().bound(arch, 0)

    def test_weights_are_read_only(self):
        net = dense_net(2, 2)
        with pytest.raises(ValueError):
            net.weights[0][0, 0] = 1.0

    def test_shape_mismatch_rejected(self):
        arch = Architecture.dense(2, 3)
        with pytest.raises(ArchitectureError):
            SparseNet(arch, (np.zeros((2, 3)),), (np.ones((2, 3), bool),))


class TestDensity:
    def test_full_and_empty(self):
        net = dense_net(2, 4, 2)
        assert density(net) == 1.0
        assert density(net.with_mask([np.zeros_like(m) for m in net.mask])) == 0.0

    def test_half(self):
        net = dense_net(2, 4, 2)
        mask = [np.zeros(m.shape, bool) for m in net.mask]
        mask[0][:, :] = True
        assert net.active_params == 16
        assert density(net.with_mask(mask)) == 0.5

    def test_exact_ratio(self):
        net = dense_net(3, 7, 5)
        rng = np.random.default_rng(0)
        masked = net.with_mask([rng.random(m.shape) < 0.3 for m in net.mask])
        assert Fraction(density(masked)).limit_denominator(10 ** 6) == \
            Fraction(masked.active_params, net.arch.total_params)


class TestApplyMask:
    def test_full_mask_keeps_weights(self):
        net = dense_net(3, 4, 2)
        assert apply_mask(net).same_as(net)

    def test_empty_mask_zeroes(self):
        net = dense_net(3, 4, 2)
        empty = net.with_mask([np.zeros_like(m) for m in net.mask])
        assert all((w == 0).all() for w in apply_mask(empty).weights)

    def test_idempotent(self):
        net = dense_net(3, 4, 2)
        rng = np.random.default_rng(1)
        net = net.with_mask([rng.random(m.shape) < 0.5 for m in net.mask])
        once = apply_mask(net)
        assert apply_mask(once).same_as(once)


class TestMinDensity:
    @pytest.mark.parametrize("sizes, expected", [
        ((2, 4, 2), 0.125),
        ((1, 1, 1), 1.0),
        ((4, 8, 8, 4), 3 / 128),
    ])
    def test_values(self, sizes, expected):
        assert min_density(Architecture.dense(*sizes)) == expected


class TestReinitialize:
    def _masked(self):
        net = dense_net(6, 5, 4, seed=2)
        rng = np.random.default_rng(0)
        return net.with_mask([rng.random(m.shape) < 0.5 for m in net.mask])

    @pytest.mark.parametrize("scheme", [DenseReinit(), LayerwiseSparseReinit(),
                                        NeuronwiseSparseReinit()])
    def test_mask_unchanged(self, scheme):
        net = self._masked()
        out = reinitialize(net, scheme, seed=9)
        assert all(np.array_equal(a, b) for a, b in zip(net.mask, out.mask))

    def test_dense_reinit_on_full_mask_is_build(self):
        net = dense_net(3, 4, 2, seed=0)
        assert reinitialize(net, DenseReinit(), 5).same_as(dense_net(3, 4, 2, seed=5))

    def test_neuronwise_variance(self):
        arch = Architecture.dense(8, 2)
        mask = np.zeros((2, 8), bool)
        mask[0, :2] = True      # fan-in 2
        mask[1, :5] = True      # fan-in 5
        net = build_network(arch).with_mask([mask])
        samples0, samples1 = [], []
        for seed in range(2500):
            w = reinitialize(net, NeuronwiseSparseReinit(), seed).weights[0]
            samples0.extend(w[0, :2])
            samples1.extend(w[1, :5])
        assert len(samples0) >= 5000 and len(samples1) >= 10 ** 4
        assert np.var(samples0) == pytest.approx(2 / 2, rel=0.06)
        assert np.var(samples1) == pytest.approx(2 / 5, rel=0.06)

    def test_zero_fan_in_gives_zero_weights(self):
        arch = Architecture.dense(3, 2)
        mask = np.array([[True, True, False], [False, False, False]])
        out = reinitialize(build_network(arch).with_mask([mask]), NeuronwiseSparseReinit(), 0)
        assert (out.weights[0][1] == 0).all()
        assert np.isfinite(out.weights[0]).all()

    def test_layerwise_uses_mean_fan_in(self):
        arch = Architecture.dense(400, 400)
        rng = np.random.default_rng(0)
        mask = rng.random((400, 400)) < 0.1
        out = reinitialize(build_network(arch).with_mask([mask]), LayerwiseSparseReinit(), 1)
        d = mask.sum() / 400
        assert out.weights[0].var() == pytest.approx(2 / d, rel=0.03)

    def test_commutes_with_apply_mask(self):
        net = self._masked()
        a = apply_mask(reinitialize(net, LayerwiseSparseReinit(), 3))
        b = apply_mask(reinitialize(apply_mask(net), LayerwiseSparseReinit(), 3))
        assert a.same_as(b)


class TestSerialization:
    def test_round_trip_bit_exact(self):
        net = dense_net(5, 7, 3, seed=4)
        rng = np.random.default_rng(2)
        net = net.with_mask([rng.random(m.shape) < 0.4 for m in net.mask])
        assert loads_net(dumps_net(net)).same_as(net)

    def test_conv_round_trip(self):
        arch = Architecture((2, 3, 2), (ConvChannel(2, 2), Dense()))
        net = build_network(arch, Kaiming(), 1)
        back = loads_net(dumps_net(net))
        assert back.same_as(net) and back.arch == arch

    def test_document_fields(self):
        doc = json.loads(dumps_net(dense_net(2, 2, seed=7)))
        assert {"format", "layer_sizes", "layer_kinds", "seed", "mask", "weights"} <= set(doc)
        assert doc["seed"] == 7

    def test_rejects_unknown_format(self):
        doc = json.loads(dumps_net(dense_net(2, 2)))
        doc["format"] = "other/9"
        with pytest.raises(ValueError):
            loads_net(json.dumps(doc))

    def test_rle(self):
        bits = np.array([0, 0, 1, 1, 1, 0, 1], bool)
        enc = rle_encode(bits)
        assert enc == {"first": 0, "runs": [2, 3, 1, 1]}
        assert np.array_equal(rle_decode(enc, 7), bits)
        with pytest.raises(ValueError):
            rle_decode(enc, 8)
