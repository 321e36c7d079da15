"""Paired ANN/SNN networks over shared weights."""

import numpy as np
import pytest

from jointsnn import autodiff as ad
from jointsnn.autodiff import Tape, Tensor
from jointsnn.errors import ConfigError, DimensionError
from jointsnn.lif import LifConfig
from jointsnn.losses import cross_entropy
from jointsnn.network import StageSpec, build_mini_resnet, build_mini_vgg, default_stages
from jointsnn.svd import param_count

SMALL = [StageSpec(1, 4, False), StageSpec(1, 6, True), StageSpec(1, 6, True), StageSpec(1, 8, True)]


@pytest.fixture
def net():
    return build_mini_resnet(SMALL, classes=3, T=2, input_shape=(1, 8, 8), seed=3)


@pytest.fixture
def images(rng):
    return Tensor(rng.standard_normal((4, 1, 8, 8)))


def analytic_count(channels, classes, c_in=1, downsample=None):
    """Stored parameters of a 1-block-per-stage WFT mini-resnet, counted from the architecture alone."""
    def conv(ci, co, k):
        return k * k * param_count(ci, co, thin=True)[0]

    def fc(ci, co):
        return param_count(ci, co, thin=True)[0] + 2 * co

    def bn(c):
        return 4 * c

    total = conv(c_in, channels[0], 3) + bn(channels[0])
    prev = channels[0]
    downsample = downsample or [i > 0 for i in range(len(channels))]
    for c, down in zip(channels, downsample):
        total += conv(prev, c, 3) + bn(c) + conv(c, c, 3) + bn(c)
        if down or prev != c:
            total += conv(prev, c, 1) + bn(c)
        prev = c
    return total + sum(fc(c, classes) for c in channels)


class TestBuild:
    def test_default_parameter_count(self):
        net = build_mini_resnet(default_stages(), classes=10, input_shape=(1, 28, 28))
        assert net.parameter_count() == analytic_count((16, 32, 64, 128), 10)

    def test_small_parameter_count(self, net):
        assert net.parameter_count() == analytic_count((4, 6, 6, 8), 3)

    def test_four_exits(self, net):
        topo = net.topology()
        assert net.n_branches == 4
        assert [l.name for l in topo.layers if l.kind == "fc"] == ["exit4.fc"]
        assert len(net.exits) == 4

    def test_every_weight_in_one_factorization(self, net):
        names = list(net.parameters())
        assert len(names) == len(set(names))
        assert not any(n.endswith((".w", ".w_ann", ".w_snn")) for n in names)

    @pytest.mark.parametrize("mode,suffixes", [("full", (".w",)), ("none", (".w_ann", ".w_snn"))])
    def test_share_modes(self, mode, suffixes):
        net = build_mini_resnet(SMALL, classes=3, input_shape=(1, 8, 8), share_mode=mode)
        weights = [n for n in net.parameters() if n.endswith((".w", ".w_ann", ".w_snn"))]
        assert weights and all(n.endswith(suffixes) for n in weights)

    def test_invalid(self):
        with pytest.raises(ConfigError):
            build_mini_resnet(SMALL, T=0, input_shape=(1, 8, 8))
        with pytest.raises(ConfigError):
            build_mini_resnet(SMALL, input_shape=(1, 8, 8), share_mode="half")
        with pytest.raises(ConfigError):
            StageSpec(0, 4, False)

    def test_seed_determines_weights(self):
        a = build_mini_resnet(SMALL, classes=3, input_shape=(1, 8, 8), seed=5).parameters()
        b = build_mini_resnet(SMALL, classes=3, input_shape=(1, 8, 8), seed=5).parameters()
        assert all(np.array_equal(a[k].data, b[k].data) for k in a)


class TestForward:
    def test_ann_shapes_and_finite(self, net):
        out = net.forward_ann(Tensor(np.zeros((2, 1, 8, 8))))
        assert len(out.logits) == 4
        assert all(z.shape == (2, 3) and np.all(np.isfinite(z.data)) for z in out.logits)

    def test_identical_rows(self, net, rng):
        x = np.repeat(rng.standard_normal((1, 1, 8, 8)), 2, axis=0)
        net.eval()
        for z in net.forward_ann(Tensor(x)).logits + net.forward_snn(Tensor(x))[0].logits:
            np.testing.assert_array_equal(z.data[0], z.data[1])

    def test_shape_mismatch(self, net):
        with pytest.raises(DimensionError):
            net.forward_ann(Tensor(np.zeros((2, 1, 9, 9))))

    def test_sides_agree_before_divergence(self, net, images):
        """At init both sides compose identical weights; only the activations differ."""
        for layer in net.modules():
            if hasattr(layer, "weight"):
                assert np.array_equal(layer.weight.weight("ann").data, layer.weight.weight("snn").data)

    def test_sigma_isolation(self, net, images):
        net.eval()
        ann0 = [z.data.copy() for z in net.forward_ann(images).logits]
        snn0 = [z.data.copy() for z in net.forward_snn(images)[0].logits]
        for name, p in net.parameters().items():
            if ".sigma_snn" in name:
                p.data = p.data * 1.5
        assert all(np.array_equal(a, z.data) for a, z in zip(ann0, net.forward_ann(images).logits))
        assert not all(np.array_equal(s, z.data) for s, z in zip(snn0, net.forward_snn(images)[0].logits))

    def test_shared_factor_moves_both(self, net, images):
        ann0 = net.forward_ann(images).logits[0].data.copy()
        snn0 = net.forward_snn(images)[0].logits[0].data.copy()
        p = net.parameters()["exit1.fc.u"]
        p.data = p.data * 2.0
        assert not np.array_equal(net.forward_ann(images).logits[0].data, ann0)
        assert not np.array_equal(net.forward_snn(images)[0].logits[0].data, snn0)

    def test_single_step_exit_is_plain_readout(self, images):
        net = build_mini_resnet(SMALL, classes=3, T=1, input_shape=(1, 8, 8), seed=1)
        out, _ = net.forward_snn(images)
        for fc, z, p in zip(net.exits, out.logits, out.pooled):
            expect = p.data @ fc.weight.weight("snn").data + fc.bias["snn"].data
            np.testing.assert_allclose(z.data, expect, rtol=1e-13, atol=1e-13)

    def test_zero_image_no_spikes(self, net):
        out, stats = net.forward_snn(Tensor(np.zeros((2, 1, 8, 8))))
        assert all(stats.total(k) == 0 for k in stats.maps)
        assert all(np.array_equal(z.data, np.zeros_like(z.data)) for z in out.logits)

    def test_spike_stats_recount(self, net, images):
        _, stats = net.forward_snn(images, record_spikes=True)
        for name, m in stats.maps.items():
            s = stats.spikes[name]
            assert np.array_equal(m, s.sum(axis=(1, 2)))
            assert stats.neurons[name] == int(np.prod(s.shape[2:]))
            assert stats.total(name) == int(s.sum())

    def test_branch_depends_on_earlier_stages_only(self, net, images):
        params = net.parameters()
        with Tape() as tape:
            out = net.forward_ann(images)
            loss = cross_entropy(out.logits[0], np.array([0, 1, 2, 0]))
        tape.backward(loss)
        for name, p in params.items():
            if name.startswith(("stage3", "stage4", "stage2")):
                assert p.grad is None or not np.any(p.grad), name
        assert np.any(params["stage1.block1.conv1.u.k0_0"].grad)

    def test_norm_disabled(self, images):
        net = build_mini_resnet(SMALL, classes=3, input_shape=(1, 8, 8), norm_enabled=False)
        assert not net.buffers()
        assert not any(n.endswith(".gamma") for n in net.parameters())
        assert all(np.all(np.isfinite(z.data)) for z in net.forward_snn(images)[0].logits)


class TestVgg:
    def test_exits_and_determinism(self, images):
        net = build_mini_vgg(SMALL, classes=3, input_shape=(1, 8, 8)).eval()
        a = net.forward_ann(images).logits
        b = net.forward_ann(images).logits
        assert len(a) == 4
        assert all(np.array_equal(x.data, y.data) for x, y in zip(a, b))

    def test_no_shortcuts(self):
        net = build_mini_vgg(SMALL, classes=3, input_shape=(1, 8, 8))
        assert not any("shortcut" in n for n in net.parameters())


class TestTopology:
    def test_sides_share_topology(self, net, images):
        topo = net.topology()
        _, stats = net.forward_snn(images)
        acts = {a.name for a in topo.activations}
        assert acts == set(stats.maps)
        for a in topo.activations:
            assert stats.neurons[a.name] == a.size

    def test_macs(self, net):
        first = net.topology().layers[0]
        assert first.macs == 4 * 1 * 9 * 8 * 8
