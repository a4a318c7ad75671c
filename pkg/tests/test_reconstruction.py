import math

import numpy as np
import pytest

import oracles
from postsparse.allocation import allocate, apply_plan, layer_sparsity
from postsparse.graph import (
    GRAPH_INPUT,
    LayerNode,
    ModelGraph,
    apply_node,
    clone,
    forward,
    graphs_equal,
    partition_units,
    run_unit,
)
from postsparse.reconstruction import (
    EC_EPS,
    ReconConfig,
    correct_weights,
    error_correct_layer,
    reconstruct_unit,
    run_reconstruction,
)
from postsparse.tensor import Tensor


@pytest.fixture
def rng():
    return np.random.default_rng(21)


def sparsify(g, rate, allocator="magnitude"):
    masks, sparse = apply_plan(g, allocate(g, allocator, rate))
    return masks, sparse


def fast(**kw):
    base = dict(iterations=50, batch_size=16, lr=1e-3, seed=0)
    base.update(kw)
    return ReconConfig(**base)


class TestConfig:
    @pytest.mark.parametrize("kw", [dict(iterations=0), dict(lr=0.0), dict(lr=-1.0), dict(momentum=1.0),
                                    dict(momentum=-0.1), dict(granularity="net_wise"), dict(input_mode="mixed"),
                                    dict(batch_size=0)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            ReconConfig(**kw)

    def test_defaults(self):
        cfg = ReconConfig()
        assert (cfg.lr, cfg.momentum, cfg.iterations, cfg.batch_size) == (1e-4, 0.9, 20000, 64)
        assert cfg.granularity == "block_wise" and cfg.input_mode == "sparse"

    def test_aliases(self):
        assert ReconConfig(granularity="layer").granularity == "layer_wise"


class TestErrorCorrection:
    def test_worked_example(self):
        wd = np.array([[2.0, -2.0, 4.0, -4.0]])
        ws = np.array([[0.0, 0.0, 4.0, -4.0]])
        out, scale = correct_weights(wd, ws, per_channel=False)
        assert scale[0] == pytest.approx(math.sqrt(10) / (math.sqrt(8) + EC_EPS), abs=1e-12)
        assert scale[0] == pytest.approx(1.1180, abs=1e-4)
        np.testing.assert_allclose(out.ravel(), [0, 0, 4.4721, -4.4721], atol=1e-4)
        assert out.mean() == pytest.approx(0.0, abs=1e-12)
        assert out.std() == pytest.approx(math.sqrt(10), abs=1e-9)

    @pytest.mark.parametrize("per_channel", [True, False])
    @pytest.mark.parametrize("shape", [(4, 6), (3, 2, 3, 3)])
    def test_moment_matching(self, rng, per_channel, shape):
        for _ in range(20):
            wd = rng.normal(size=shape) * rng.uniform(0.1, 3)
            mask = rng.random(shape) > 0.6
            # keep at least two survivors per channel so std(W_s) > 0
            mask.reshape(shape[0], -1)[:, :2] = True
            ws = wd * mask
            out, _ = correct_weights(wd, ws, per_channel)
            groups = (lambda a: a.reshape(shape[0], -1)) if per_channel else (lambda a: a.reshape(1, -1))
            gd, go = groups(wd), groups(out)
            np.testing.assert_allclose(go.mean(axis=1), gd.mean(axis=1), rtol=0, atol=1e-9)
            np.testing.assert_allclose(go.std(axis=1), gd.std(axis=1), rtol=0, atol=1e-9)

    def test_identity_case(self, rng):
        g = oracles.mlp(rng)
        node = g.nodes["fc1"]
        x = rng.normal(size=(32, 8))
        fixed = error_correct_layer(node, node, np.ones(node.weight.shape, bool), x)
        np.testing.assert_allclose(fixed.params["weight"].data, node.weight.data, atol=1e-6)
        np.testing.assert_allclose(fixed.params["bias"].data, node.params["bias"].data, atol=1e-6)

    @pytest.mark.parametrize("kind", ["dense", "conv2d"])
    @pytest.mark.parametrize("per_channel", [True, False])
    def test_bias_correction_matches_channel_means(self, rng, kind, per_channel):
        if kind == "dense":
            dense = oracles.dense_node("l", 6, 5, rng)
            x = rng.normal(size=(40, 6)) + 0.5
        else:
            dense = oracles.conv_node("l", 2, 3, rng, stride=2)
            x = rng.normal(size=(10, 2, 5, 5)) + 0.5
        mask = rng.random(dense.weight.shape) > 0.5
        sparse = LayerNode("l", kind, [], {"weight": Tensor(dense.weight.data * mask),
                                           "bias": Tensor(dense.params["bias"].data.copy())}, dict(dense.attrs))
        fixed = error_correct_layer(dense, sparse, mask, x, per_channel)
        yd = apply_node(dense, [Tensor(x)]).data
        yc = apply_node(fixed, [Tensor(x)]).data
        axes = tuple(i for i in range(yd.ndim) if i != 1)
        np.testing.assert_allclose(yc.mean(axis=axes), yd.mean(axis=axes), rtol=0, atol=1e-6)
        assert np.all(fixed.params["weight"].data[~mask] == 0.0)

    def test_empty_batch(self, rng):
        node = oracles.dense_node("l", 3, 2, rng)
        with pytest.raises(ValueError):
            error_correct_layer(node, node, np.ones((2, 3), bool), np.zeros((0, 3)))


class TestReconstructUnit:
    def test_rate_zero_identity(self, rng):
        g = oracles.cbr_chain(rng)
        x = rng.normal(size=(32, 2, 5, 5))
        acts = forward(g, x)
        unit = partition_units(g, "layer_wise")[1]
        masks = {lid: np.ones(g.nodes[lid].weight.shape, bool) for lid in g.prunable_ids()}
        before = clone(g)
        res = reconstruct_unit(g, unit, masks, {"a.relu": acts["a.relu"].data}, acts[unit.output].data, fast())
        assert res.initial_loss == 0.0
        assert graphs_equal(before, g)

    def test_least_squares_oracle(self, rng):
        n, d_in, d_out = 256, 10, 4
        x = rng.normal(size=(n, d_in))
        w_true = rng.normal(size=(d_out, d_in))
        y = x @ w_true.T + 0.3 + 0.1 * rng.normal(size=(n, d_out))
        node = LayerNode("fc", "dense", [], {"weight": Tensor(w_true.copy()), "bias": Tensor(np.zeros(d_out))})
        g = ModelGraph({"fc": node}, "fc", "fc", (d_in,))
        mask = rng.random(w_true.shape) < 0.5
        node.weight.data *= mask
        unit = partition_units(g, "single")[0]
        cfg = ReconConfig(iterations=2000, batch_size=n, lr=0.02, momentum=0.9)
        res = reconstruct_unit(g, unit, {"fc": mask}, {GRAPH_INPUT: x}, y, cfg)
        best = oracles.masked_lstsq_loss(x, y, mask)
        assert res.final_loss <= 1.05 * best
        assert np.all(node.weight.data[~mask] == 0.0)

    def test_non_finite_loss_restores_weights(self, rng):
        g = oracles.mlp(rng)
        x = rng.normal(size=(16, 6)) * 100
        dense_out = forward(g, x)
        masks, sparse = sparsify(g, 0.5)
        snap = clone(sparse)
        unit = partition_units(sparse, "single")[0]
        res = reconstruct_unit(sparse, unit, masks, {GRAPH_INPUT: x}, dense_out[unit.output].data,
                               fast(lr=1e6, iterations=200))
        assert res.aborted and "non-finite" in res.diagnostic
        assert graphs_equal(snap, sparse)

    def test_loss_decreases_on_fixtures(self, rng):
        for g in (oracles.mlp(rng), oracles.cbr_chain(rng), oracles.resnet(rng)):
            x = rng.normal(size=(64, *g.input_shape))
            masks, sparse = sparsify(g, 0.6)
            _, rep = run_reconstruction(g, sparse, masks, x, fast(iterations=100, lr=1e-3))
            for u in rep.units:
                assert u.final_loss <= u.initial_loss, u.unit


class TestRunReconstruction:
    def test_iterations_one_on_rate_zero(self, rng):
        g = oracles.resnet(rng)
        masks, sparse = sparsify(g, 0.0)
        out, _ = run_reconstruction(g, sparse, masks, rng.normal(size=(16, 1, 4, 4)), fast(iterations=1))
        assert graphs_equal(out, g)

    def test_rate_zero_units_stay_exact(self, rng):
        g = oracles.mlp(rng, sizes=(6, 40, 30, 3))
        masks, sparse = sparsify(g, 0.0)
        out, rep = run_reconstruction(g, sparse, masks, rng.normal(size=(100, 6)), fast(batch_size=7))
        assert graphs_equal(out, g)
        assert all(u.initial_loss == u.final_loss == 0.0 for u in rep.units)

    @pytest.mark.parametrize("gran", ["single", "layer_wise", "block_wise"])
    @pytest.mark.parametrize("ec", [False, True])
    def test_sparsity_preserved(self, rng, gran, ec):
        g = oracles.resnet(rng)
        masks, sparse = sparsify(g, 0.7)
        before = layer_sparsity(sparse)
        out, _ = run_reconstruction(g, sparse, masks, rng.normal(size=(32, 1, 4, 4)),
                                    fast(granularity=gran, error_correction=ec))
        assert layer_sparsity(out) == before
        for lid, m in masks.items():
            assert np.all(out.nodes[lid].weight.data[~m] == 0.0)

    def test_bn_frozen(self, rng):
        g = oracles.resnet(rng)
        masks, sparse = sparsify(g, 0.5)
        bn_before = {k: {p: t.data.copy() for p, t in n.params.items()}
                     for k, n in sparse.nodes.items() if n.kind == "batchnorm2d"}
        out, _ = run_reconstruction(g, sparse, masks, rng.normal(size=(32, 1, 4, 4)), fast())
        for k, params in bn_before.items():
            for p, v in params.items():
                np.testing.assert_array_equal(out.nodes[k].params[p].data, v)

    def test_one_unit_modes_agree(self, rng):
        node = oracles.dense_node("fc", 6, 3, rng)
        g = ModelGraph({"fc": node}, "fc", "fc", (6,))
        x = rng.normal(size=(48, 6))
        masks, s1 = sparsify(g, 0.5)
        s2 = clone(s1)
        a, _ = run_reconstruction(g, s1, masks, x, fast(input_mode="sparse"))
        b, _ = run_reconstruction(g, s2, masks, x, fast(input_mode="dense"))
        assert graphs_equal(a, b)

    def test_two_unit_activation_diff(self, rng):
        g = oracles.mlp(rng, sizes=(6, 8, 4))
        x = rng.normal(size=(40, 6))
        masks, s_sparse = sparsify(g, 0.5)
        s_dense = clone(s_sparse)
        rs, rep_s = run_reconstruction(g, s_sparse, masks, x, fast(input_mode="sparse"), keep_inputs=True)
        rd, rep_d = run_reconstruction(g, s_dense, masks, x, fast(input_mode="dense"), keep_inputs=True)
        u1, u2 = partition_units(g, "layer_wise")
        dense_acts = forward(g, x)
        first_out = run_unit(rs, u1, {GRAPH_INPUT: Tensor(x)}).data
        residual = first_out - dense_acts[u1.output].data
        key = u2.inputs[0]
        diff = rep_s.unit_inputs[1][key] - rep_d.unit_inputs[1][key]
        np.testing.assert_allclose(diff, residual, rtol=0, atol=1e-12)
        assert np.abs(residual).max() > 0

    def test_dense_mode_concurrent_matches_sequential(self, rng):
        g = oracles.resnet(rng)
        x = rng.normal(size=(32, 1, 4, 4))
        masks, s = sparsify(g, 0.6)
        a, _ = run_reconstruction(g, clone(s), masks, x, fast(input_mode="dense", error_correction=True))
        b, _ = run_reconstruction(g, clone(s), masks, x, fast(input_mode="dense", error_correction=True, workers=3))
        assert graphs_equal(a, b)

    def test_reproducible(self, rng):
        g = oracles.resnet(rng)
        x = rng.normal(size=(40, 1, 4, 4))
        masks, s = sparsify(g, 0.6)
        a, _ = run_reconstruction(g, clone(s), masks, x, fast(seed=5))
        b, _ = run_reconstruction(g, clone(s), masks, x, fast(seed=5))
        assert graphs_equal(a, b)

    def test_reconstruction_reduces_output_error(self, rng):
        g = oracles.resnet(rng)
        x = rng.normal(size=(64, 1, 4, 4))
        masks, s = sparsify(g, 0.7)
        err_before = np.mean((forward(s, x)[g.exit].data - forward(g, x)[g.exit].data) ** 2)
        out, _ = run_reconstruction(g, s, masks, x, fast(iterations=200, lr=5e-3))
        err_after = np.mean((forward(out, x)[g.exit].data - forward(g, x)[g.exit].data) ** 2)
        assert err_after < err_before

    def test_structure_mismatch(self, rng):
        g = oracles.mlp(rng)
        with pytest.raises(ValueError):
            run_reconstruction(g, oracles.cbr_chain(rng), {}, np.zeros((4, 6)), fast())
