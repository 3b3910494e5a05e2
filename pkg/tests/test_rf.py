import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from netscope import graph as G
from netscope import rf as RF
from conftest import tiny_model

layer_triples = st.tuples(st.sampled_from([1, 3, 5, 7]), st.integers(1, 3), st.integers(0, 3))


@pytest.fixture(scope="module")
def resnet34():
    return G.build_resnet34(1000)


def conv_chain(spec, dims=(1, 23, 23), seed=0):
    """Linear conv stack (no nonlinearity), so every pixel in the field has influence."""
    b = G.GraphBuilder(dims, seed=seed)
    x = G.INPUT
    for n, (k, s, p) in enumerate(spec):
        x = b.conv(f"c{n}", x, 2, k, s, p)
    return b.build().astype(np.float64)


class TestCompose:
    def test_single_layer(self):
        g = RF.compose(RF.IDENTITY, 7, 2, 3)
        assert (g.size, g.jump, g.offset) == (7, 2, 0.0)

    def test_stem(self):
        g = RF.fold([(7, 2, 3), (3, 2, 1)])
        assert (g.size, g.jump, g.offset) == (11, 4, 0.0)

    def test_unpadded_offset(self):
        g = RF.fold([(3, 1, 0), (3, 1, 0)])
        assert (g.size, g.offset) == (5, 2.0)

    def test_invalid(self):
        with pytest.raises(ValueError):
            RF.compose(RF.IDENTITY, 0, 1, 0)

    @given(st.lists(layer_triples, min_size=3, max_size=6), st.integers(1, 5))
    def test_fold_is_associative(self, layers, cut):
        cut = min(cut, len(layers))
        assert RF.fold(layers) == RF.fold(layers[cut:], RF.fold(layers[:cut]))

    @given(st.lists(layer_triples, min_size=1, max_size=6))
    def test_size_grows_with_depth(self, layers):
        sizes = [RF.fold(layers[:n]).size for n in range(len(layers) + 1)]
        assert sizes == sorted(sizes)


class TestResNet34:
    def test_known_sizes(self, resnet34):
        geo = RF.geometries(resnet34)
        mp = geo["stem.maxpool"]
        assert (mp.size, mp.jump) == (11, 4)
        assert RF.geometry_of(resnet34, "layer3").size == 27
        assert RF.geometry_of(resnet34, "layer7").size == 59

    def test_plain_matches_resnet(self, resnet34):
        plain = G.build_plainnet34(1000)
        rg, pg = RF.geometries(resnet34), RF.geometries(plain)
        for name in pg:
            assert (rg[name].size, rg[name].jump, rg[name].offset) == (pg[name].size, pg[name].jump, pg[name].offset)

    def test_merged_flag_at_adds(self, resnet34):
        geo = RF.geometries(resnet34)
        assert geo["stage1.block1.add"].merged
        assert not geo["stage1.block1.conv1"].merged

    def test_maxpool_neuron_rect(self, resnet34):
        rf = RF.project(resnet34, "stem.maxpool", (28, 28))
        assert (rf.top, rf.left, rf.bottom, rf.right) == (107, 107, 117, 117)
        assert not rf.clipped and rf.height == 11

    def test_corner_is_clipped(self, resnet34):
        rf = RF.project(resnet34, "stem.conv", (0, 0))
        assert rf.clipped
        assert (rf.top, rf.left, rf.bottom, rf.right) == (0, 0, 3, 3)

    def test_adjacent_neurons_shift_by_jump(self, resnet34):
        a = RF.project(resnet34, "layer7", (20, 20))
        b = RF.project(resnet34, "layer7", (20, 21))
        c = RF.project(resnet34, "layer7", (21, 20))
        assert b.left - a.left == 4 and b.top == a.top
        assert c.top - a.top == 4 and c.left == a.left

    def test_out_of_bounds(self, resnet34):
        with pytest.raises(IndexError):
            RF.project(resnet34, "stem.maxpool", (56, 0))

    def test_table(self, resnet34):
        lines = RF.geometry_table(resnet34).splitlines()
        assert lines[0] == "layer\talias\tr\tjump\tc0"
        row = next(l for l in lines if l.startswith("stage1.block3.conv2\t"))
        assert row.split("\t")[1:4] == ["layer7", "59", "4"]


class TestExtract:
    def test_matches_loop_copy(self, rng):
        img = rng.standard_normal((3, 20, 20))
        m = tiny_model(dims=(3, 20, 20))
        for nb in [(0, 0), (2, 3), (4, 4)]:
            rf = RF.project(m, "stage1.block1.conv2", nb)
            ref = np.array([[[img[c, y, x] for x in range(rf.left, rf.right + 1)]
                             for y in range(rf.top, rf.bottom + 1)] for c in range(3)])
            assert np.array_equal(RF.extract_patch(img, rf), ref)

    def test_batched(self, rng):
        img = rng.standard_normal((2, 3, 16, 16))
        rf = RF.project(tiny_model(), "stem.maxpool", (1, 1))
        assert RF.extract_patch(img, rf).shape == (2, 3, rf.height, rf.width)

    def test_disjoint(self):
        rf = RF.ReceptiveField("x", (0, 0), 30, 30, 40, 40, False, 11)
        with pytest.raises(ValueError):
            RF.extract_patch(np.zeros((1, 8, 8)), rf)


class TestInfluence:
    @pytest.mark.parametrize("spec", [
        [(3, 1, 1), (3, 2, 1), (3, 1, 1)],
        [(7, 2, 3), (3, 1, 1)],
        [(5, 1, 2), (1, 2, 0), (3, 2, 1)],
        [(3, 1, 0), (3, 1, 0)],
    ])
    def test_gradient_support_equals_field(self, spec):
        m = conv_chain(spec)
        name = m.layers[-1].name
        _, h, w = m.output_dims()[name]
        x = np.random.default_rng(0).standard_normal((1, 1, 23, 23))
        for nb in [(0, 0), (h // 2, w // 2), (h - 1, 0)]:
            _, g = G.backward_to_input(m, x, name, G.neuron_objective(0, *nb))
            mask = np.zeros((23, 23), bool)
            rf = RF.project(m, name, nb)
            mask[rf.slices()] = True
            assert np.array_equal(g[0, 0] != 0, mask), (spec, nb)

    @given(st.integers(0, 10_000))
    @settings(max_examples=20, deadline=None)
    def test_outside_pixels_have_no_effect(self, seed):
        rng = np.random.default_rng(seed)
        m = tiny_model(dims=(3, 20, 20), seed=seed % 5)
        layer = "stage2.block1.bn2"
        _, h, w = m.output_dims()[layer]
        nb = (int(rng.integers(h)), int(rng.integers(w)))
        rf = RF.project(m, layer, nb)
        x = rng.standard_normal((1, 3, 20, 20)).astype(np.float32)
        base = G.run(m, x)[layer][0, :, nb[0], nb[1]]
        y, xx = int(rng.integers(20)), int(rng.integers(20))
        if rf.top <= y <= rf.bottom and rf.left <= xx <= rf.right:
            return
        x[0, :, y, xx] += 10.0
        assert np.array_equal(G.run(m, x)[layer][0, :, nb[0], nb[1]], base)
