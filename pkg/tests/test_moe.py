import numpy as np
import pytest

from dmoe_seg import tensor as T
from dmoe_seg.moe import (DMoEConfig, DMoELayer, RoutingError, count_expert_load,
                          patchify, unpatchify)
from dmoe_seg.tensor import ConfigError, Tensor


def make_layer(d_model=8, n_experts=4, top_k=2, attrs=("a", "b"), dropout_p=0.0,
               seed=0, d_hidden=8):
    cfg = DMoEConfig(d_model=d_model, d_hidden=d_hidden, n_experts=n_experts,
                     top_k=top_k, dropout_p=dropout_p, attributes=attrs)
    return DMoELayer(cfg, seed=seed)


def randomize_routers(layer, seed=0):
    rng = np.random.default_rng(seed)
    for r in layer.routers.values():
        r.w.data = rng.standard_normal(r.w.data.shape)
        r.w_noise.data = rng.standard_normal(r.w_noise.data.shape) * 0.1


class TestConfig:
    def test_top_k_bounds(self):
        with pytest.raises(ConfigError):
            DMoEConfig(d_model=4, n_experts=2, top_k=3, attributes=("a",))

    def test_empty_attributes(self):
        with pytest.raises(ConfigError):
            DMoEConfig(d_model=4, attributes=())

    def test_duplicate_attributes(self):
        with pytest.raises(ConfigError):
            DMoEConfig(d_model=4, attributes=("a", "a"))


class TestGate:
    def test_full_k_equals_dense_softmax(self):
        layer = make_layer(top_k=4)
        randomize_routers(layer)
        tokens = Tensor(np.random.default_rng(1).standard_normal((6, 8)))
        dense, _ = layer.gate_dense(tokens, "a", training=False)
        expected = T.softmax(tokens @ layer.routers["a"].w, axis=1).data
        assert np.array_equal(dense.data, expected)

    def test_known_row(self):
        # H row [0.5, 2.0, 1.0], k=2: keep {1, 2}, softmax(e^2, e^1)
        layer = make_layer(d_model=3, n_experts=3, top_k=2, attrs=("a",))
        layer.routers["a"].w.data = np.eye(3)
        decision = layer.gate(Tensor([[0.5, 2.0, 1.0]]), "a", training=False)
        assert list(decision.indices[0]) == [1, 2]
        assert decision.weights[0, 0] == pytest.approx(0.731059, abs=1e-6)
        assert decision.weights[0, 1] == pytest.approx(0.268941, abs=1e-6)

    def test_identical_routers_give_identical_decisions(self):
        layer = make_layer()
        randomize_routers(layer)
        layer.routers["b"].w.data = layer.routers["a"].w.data.copy()
        layer.routers["b"].w_noise.data = layer.routers["a"].w_noise.data.copy()
        tokens = Tensor(np.random.default_rng(2).standard_normal((5, 8)))
        da = layer.gate(tokens, "a", training=True, rng=np.random.default_rng(9))
        db = layer.gate(tokens, "b", training=True, rng=np.random.default_rng(9))
        assert np.array_equal(da.indices, db.indices)
        assert np.array_equal(da.weights, db.weights)

    def test_unknown_attr_lists_known(self):
        layer = make_layer()
        with pytest.raises(RoutingError, match="'a'"):
            layer.gate(Tensor(np.zeros((1, 8))), "zzz")

    def test_sparsity_and_normalization(self):
        layer = make_layer(n_experts=8, top_k=3)
        randomize_routers(layer, seed=5)
        tokens = Tensor(np.random.default_rng(6).standard_normal((500, 8)))
        dense, _ = layer.gate_dense(tokens, "a", training=False)
        nonzero = dense.data > 0
        assert np.all(nonzero.sum(axis=1) == 3)
        assert np.all((dense.data == 0).sum(axis=1) == 5)
        assert np.all(np.abs(dense.data.sum(axis=1) - 1.0) <= 1e-9)

    def test_eval_gate_deterministic(self):
        layer = make_layer()
        randomize_routers(layer)
        tokens = Tensor(np.random.default_rng(3).standard_normal((10, 8)))
        d1 = layer.gate(tokens, "a", training=False, rng=np.random.default_rng(1))
        d2 = layer.gate(tokens, "a", training=False, rng=np.random.default_rng(99))
        assert np.array_equal(d1.indices, d2.indices)
        assert np.array_equal(d1.weights, d2.weights)

    def test_training_noise_changes_scores(self):
        layer = make_layer()
        randomize_routers(layer)
        layer.routers["a"].w_noise.data += 1.0
        tokens = Tensor(np.random.default_rng(4).standard_normal((10, 8)))
        d1 = layer.gate(tokens, "a", training=True, rng=np.random.default_rng(1))
        d2 = layer.gate(tokens, "a", training=True, rng=np.random.default_rng(2))
        assert not np.array_equal(d1.weights, d2.weights)

    def test_force_noise_at_eval(self):
        layer = make_layer()
        randomize_routers(layer)
        layer.routers["a"].w_noise.data += 1.0
        tokens = Tensor(np.random.default_rng(4).standard_normal((10, 8)))
        base = layer.gate(tokens, "a", training=False)
        noisy = layer.gate(tokens, "a", training=False,
                           rng=np.random.default_rng(0), force_noise=True)
        assert not np.array_equal(base.weights, noisy.weights)


class TestForward:
    def test_zero_experts_is_residual_identity(self):
        layer = make_layer()
        randomize_routers(layer)
        for e in layer.experts:
            for p in e.parameters().values():
                p.data = np.zeros_like(p.data)
        tokens = Tensor(np.random.default_rng(0).standard_normal((7, 8)))
        out = layer(tokens, "a", training=False)
        assert np.array_equal(out.data, tokens.data)

    def test_k_equals_one_uses_argmax_expert(self):
        layer = make_layer(top_k=1)
        randomize_routers(layer)
        tokens = Tensor(np.random.default_rng(1).standard_normal((5, 8)))
        decision = layer.gate(tokens, "a", training=False)
        assert np.allclose(decision.weights, 1.0)
        out = layer(tokens, "a", training=False)
        expected = tokens.data.copy()
        for t in range(5):
            e = layer.experts[decision.indices[t, 0]]
            expected[t] += e(Tensor(tokens.data[t:t + 1])).data[0]
        assert np.allclose(out.data, expected, atol=1e-12)

    def test_attribute_isolation(self):
        layer = make_layer()
        randomize_routers(layer)
        tokens = Tensor(np.random.default_rng(2).standard_normal((6, 8)))
        base_a = layer(tokens, "a", training=False).data.copy()
        base_b = layer(tokens, "b", training=False).data.copy()
        layer.routers["b"].w.data += 0.5
        assert np.array_equal(layer(tokens, "a", training=False).data, base_a)
        assert not np.array_equal(layer(tokens, "b", training=False).data, base_b)

    def test_shared_experts_affect_every_attribute(self):
        layer = make_layer()
        randomize_routers(layer)
        tokens = Tensor(np.random.default_rng(2).standard_normal((6, 8)))
        base_a = layer(tokens, "a", training=False).data.copy()
        base_b = layer(tokens, "b", training=False).data.copy()
        layer.experts[0].b2.data += 10.0  # bias shifts output wherever expert 0 fires
        moved_a = not np.array_equal(layer(tokens, "a", training=False).data, base_a)
        moved_b = not np.array_equal(layer(tokens, "b", training=False).data, base_b)
        assert moved_a or moved_b

    def test_linear_expert_mixing_identity(self):
        # with purely linear experts, sum_i G_i E_i(x) == (sum_i G_i Theta_i) x
        layer = make_layer(d_model=6, d_hidden=6, n_experts=4, top_k=4, attrs=("a",))
        randomize_routers(layer, seed=3)
        rng = np.random.default_rng(4)
        thetas = []
        for e in layer.experts:
            # identity first layer, zero biases: expert(x) = x @ w2
            e.w1.data = np.eye(6) * 1000.0  # relu stays in its linear region
            e.b1.data = np.zeros(6)
            e.b2.data = np.zeros(6)
            e.w2.data = rng.standard_normal((6, 6)) / 1000.0
            thetas.append(e.w1.data @ e.w2.data)
        tokens_arr = np.abs(rng.standard_normal((5, 6)))  # positive: relu transparent
        tokens = Tensor(tokens_arr)
        dense, _ = layer.gate_dense(tokens, "a", training=False)
        out = layer(tokens, "a", training=False)
        for t in range(5):
            mixed = sum(dense.data[t, i] * thetas[i] for i in range(4))
            expected = tokens_arr[t] + tokens_arr[t] @ mixed
            assert np.max(np.abs(out.data[t] - expected)) < 1e-10

    def test_gradients_flow_through_router_and_experts(self):
        layer = make_layer(seed=11)
        randomize_routers(layer, seed=12)
        tokens = Tensor(np.random.default_rng(13).standard_normal((4, 8)))
        target = np.random.default_rng(14).standard_normal((4, 8))

        def loss_fn():
            rng = np.random.default_rng(15)
            out = layer(tokens, "a", training=True, rng=rng)
            diff = out - Tensor(target)
            return T.reduce_mean(T.mul(diff, diff))

        params = {k: v for k, v in layer.parameters().items() if ".router.b" not in k}
        report = T.grad_check(loss_fn, params, step=1e-5, tolerance=1e-4)
        assert report.passed, report


class TestPatchify:
    def test_2x2_enumeration(self):
        fm = np.arange(8.0).reshape(2, 2, 2)
        tokens = patchify(Tensor(fm))
        assert tokens.shape == (4, 2)
        assert np.array_equal(tokens.data, fm.reshape(4, 2))

    def test_roundtrip_rank4_bit_exact(self):
        fm = np.random.default_rng(0).standard_normal((3, 5, 7, 4))
        tokens = patchify(Tensor(fm))
        back = unpatchify(tokens, (3, 5, 7))
        assert np.array_equal(back.data, fm)

    def test_identity_for_token_input(self):
        tokens = Tensor(np.random.default_rng(1).standard_normal((10, 4)))
        assert patchify(tokens) is tokens

    def test_unpatchify_dim_mismatch(self):
        with pytest.raises(T.ShapeError):
            unpatchify(Tensor(np.zeros((6, 4))), (2, 2))


class TestExpertLoad:
    def test_empty_stream(self):
        assert np.array_equal(count_expert_load([], 4), np.zeros(4))

    def test_single_token_counts_k(self):
        layer = make_layer()
        d = layer.gate(Tensor(np.random.default_rng(0).standard_normal((1, 8))), "a")
        counts = count_expert_load([d], 4)
        assert counts.sum() == 2

    def test_totals_and_rough_uniformity(self):
        layer = make_layer(n_experts=8, top_k=2, attrs=("a",))
        randomize_routers(layer, seed=21)
        tokens = Tensor(np.random.default_rng(22).standard_normal((10000, 8)))
        d = layer.gate(tokens, "a", training=False)
        counts = count_expert_load([d], 8)
        assert counts.sum() == 2 * 10000
        uniform = 2 * 10000 / 8
        assert np.all(counts > uniform / 5)
        assert np.all(counts < uniform * 5)
