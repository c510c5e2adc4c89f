import numpy as np
import pytest

from cfld.common.errors import ShapeError
from cfld.numkit import ops
from cfld.numkit.nn import Attention, Conv2d, GroupNorm, Linear, Module, ResBlock, TransformerLayer
from cfld.numkit.optim import Adam
from cfld.numkit.rng import Rng
from cfld.numkit.tensor import Tensor, backward, shape_only


class Pair(Module):
    def __init__(self, rng: Rng):
        self.first = Linear(3, 4, rng)
        self.blocks = [Linear(4, 4, rng), Linear(4, 2, rng, bias=False)]

    def forward(self, x):
        x = self.first(x)
        for block in self.blocks:
            x = block(x)
        return x


class TestModule:

    def test_parameter_names_follow_attributes(self):
        names = set(Pair(Rng(0)).parameters())
        assert names == {
            "first.weight",
            "first.bias",
            "blocks.0.weight",
            "blocks.0.bias",
            "blocks.1.weight",
        }

    def test_parameter_count(self):
        assert Pair(Rng(0)).parameter_count() == 3 * 4 + 4 + 4 * 4 + 4 + 4 * 2

    def test_same_rng_same_weights(self):
        a = Pair(Rng(1)).state_dict()
        b = Pair(Rng(1)).state_dict()
        for name in a:
            np.testing.assert_array_equal(a[name], b[name])

    def test_state_dict_round_trip(self):
        source = Pair(Rng(1))
        target = Pair(Rng(2))
        target.load_state_dict(source.state_dict())
        for name, value in source.state_dict().items():
            np.testing.assert_array_equal(target.state_dict()[name], value)

    def test_load_missing_tensor(self):
        state = Pair(Rng(0)).state_dict()
        del state["first.bias"]
        with pytest.raises(KeyError, match="first.bias"):
            Pair(Rng(0)).load_state_dict(state)

    def test_load_wrong_shape(self):
        state = Pair(Rng(0)).state_dict()
        state["first.weight"] = np.zeros((4, 3))
        with pytest.raises(ShapeError):
            Pair(Rng(0)).load_state_dict(state)

    def test_shape_only_allocates_no_storage(self):
        with shape_only():
            model = Pair(Rng(0))
        assert model.parameters()["first.weight"].shape == (3, 4)


class TestLayers:

    def test_zero_linear_outputs_bias(self):
        layer = Linear(5, 2, Rng(0), zero=True)
        out = layer(Tensor(np.ones((3, 5))))
        np.testing.assert_array_equal(out.data, np.zeros((3, 2)))

    def test_conv_keeps_extent_with_default_padding(self):
        conv = Conv2d(2, 3, 3, Rng(0))
        assert conv(Tensor(np.ones((1, 2, 5, 5)))).shape == (1, 3, 5, 5)

    def test_group_norm_rejects_indivisible_channels(self):
        with pytest.raises(ShapeError):
            GroupNorm(3, 8)

    def test_group_norm_normalises_each_group(self):
        x = Tensor(np.random.default_rng(0).normal(3.0, 2.0, size=(2, 4, 4, 4)))
        out = GroupNorm(2, 4)(x).data.reshape(2, 2, -1)
        np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-5)

    def test_attention_keeps_probabilities(self):
        layer = Attention(8, 4, 2, Rng(0))
        layer.keep_attention = True
        layer(Tensor(np.ones((1, 6, 8))), Tensor(np.ones((1, 3, 4))))
        assert layer.last_attention.shape == (1, 2, 6, 3)
        np.testing.assert_allclose(layer.last_attention.sum(axis=-1), 1.0, atol=1e-6)

    def test_attention_rejects_indivisible_heads(self):
        layer = Attention(6, 6, 4, Rng(0))
        with pytest.raises(ShapeError):
            layer(Tensor(np.ones((1, 2, 6))))

    def test_cross_attention_layer_requires_context(self):
        layer = TransformerLayer(8, 2, Rng(0), context_dim=4)
        with pytest.raises(ShapeError):
            layer(Tensor(np.ones((1, 3, 8))))

    def test_res_block_with_zero_time_projection_ignores_time(self):
        block = ResBlock(4, 4, Rng(0), groups=2, time_dim=3)
        x = Tensor(np.random.default_rng(1).normal(size=(2, 4, 4, 4)))
        with_time = block(x, Tensor(np.random.default_rng(2).normal(size=(2, 3))))
        without = block(x)
        np.testing.assert_allclose(with_time.data, without.data, rtol=1e-6, atol=1e-6)

    def test_res_block_skip_projection(self):
        block = ResBlock(4, 8, Rng(0), groups=2)
        assert block(Tensor(np.ones((1, 4, 3, 3)))).shape == (1, 8, 3, 3)


class TestAdam:

    def test_first_step_moves_by_learning_rate(self):
        w = Tensor(np.array([1.0, -1.0]), requires_grad=True)
        optimizer = Adam({"w": w}, lr=0.1)
        backward(ops.sum(w * Tensor(np.array([3.0, -0.5]))))
        optimizer.step()
        np.testing.assert_allclose(w.data, [0.9, -0.9], rtol=1e-5)

    def test_minimises_quadratic(self):
        w = Tensor(np.array([5.0]), requires_grad=True)
        optimizer = Adam({"w": w}, lr=0.1)
        for _ in range(300):
            optimizer.zero_grad()
            backward(ops.sum(w * w))
            optimizer.step()
        assert abs(float(w.data[0])) < 0.1

    def test_parameters_without_gradient_are_untouched(self):
        w = Tensor(np.array([1.0]), requires_grad=True)
        frozen = Tensor(np.array([2.0]), requires_grad=True)
        optimizer = Adam({"w": w, "frozen": frozen}, lr=0.1)
        backward(ops.sum(w * 2.0))
        optimizer.step()
        np.testing.assert_array_equal(frozen.data, [2.0])

    def test_state_round_trip_gives_identical_updates(self):
        def run(optimizer, w, steps):
            for _ in range(steps):
                optimizer.zero_grad()
                backward(ops.sum(w * w * w))
                optimizer.step(0.01)

        w_a = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        a = Adam({"w": w_a})
        run(a, w_a, 6)

        w_b = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        b = Adam({"w": w_b})
        run(b, w_b, 3)
        w_c = Tensor(w_b.data.copy(), requires_grad=True)
        c = Adam({"w": w_c})
        c.load_state_dict(b.state_dict())
        run(c, w_c, 3)

        np.testing.assert_array_equal(w_c.data, w_a.data)
        assert c.t == a.t == 6
