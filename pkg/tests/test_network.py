import numpy as np
import pytest

from pulsar_pd import autodiff as ad
from pulsar_pd.autodiff import ShapeError, Tape, Tensor
from pulsar_pd.graph import PartitionedAdjacency
from pulsar_pd.network import (ModelConfig, block_forward, compute_Ck, default_adjacency,
                               init_params, network_forward)

SMALL = dict(frames=12, channels=(4, 6), temporal_kernel=3, embed_channels=2)


def test_ck_zero_embeddings_uniform():
    x = Tensor(np.random.default_rng(0).normal(size=(2, 3, 5, 21)))
    z = Tensor(np.zeros((4, 3)))
    c = compute_Ck(x, z, Tensor(np.zeros(4)), z, Tensor(np.zeros(4))).data
    np.testing.assert_allclose(c, 1 / 21, atol=1e-15)


def test_ck_rows_sum_to_one():
    rng = np.random.default_rng(1)
    x = Tensor(rng.normal(size=(3, 4, 6, 21)))
    tw, pw = Tensor(rng.normal(size=(2, 4))), Tensor(rng.normal(size=(2, 4)))
    c = compute_Ck(x, tw, Tensor(rng.normal(size=2)), pw, Tensor(rng.normal(size=2))).data
    assert c.shape == (3, 21, 21)
    np.testing.assert_allclose(c.sum(axis=2), 1.0, atol=1e-9)


def test_ck_permutation_equivariance():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(1, 3, 4, 3))
    args = [Tensor(rng.normal(size=s)) for s in ((2, 3), (2,), (2, 3), (2,))]
    perm = np.array([2, 0, 1])
    c = compute_Ck(Tensor(x), *args).data[0]
    cp = compute_Ck(Tensor(x[..., perm]), *args).data[0]
    # brute-force oracle: entry (i, j) of the permuted input is entry (perm[i], perm[j])
    for i in range(3):
        for j in range(3):
            assert cp[i, j] == pytest.approx(c[perm[i], perm[j]], abs=1e-12)


def test_adaptive_at_init_is_baseline_plus_uniform_term():
    cfg_a = ModelConfig(**SMALL, adaptive=True)
    net_a = init_params(cfg_a, 0)
    net_b = init_params(ModelConfig(**SMALL, adaptive=False), 0)
    for k in range(3):
        for pre in ("block1", "block2"):
            for part in ("theta", "phi"):
                net_a.params[f"{pre}.gcn.{part}{k}.w"].data[:] = 0
    # copy the shared weights so only the aggregation differs
    for name, t in net_b.params.items():
        if name in net_a.params:
            t.data[:] = net_a.params[name].data
    adj = default_adjacency()
    uniform = PartitionedAdjacency(adj.matrices + 1.0 / 21, "spatial+uniform")
    x = Tensor(np.random.default_rng(3).normal(size=(2, 2, 12, 21)))
    out_a = block_forward(x, net_a.params, "block1", net_a.bn, adj, "adaptive").data
    out_b = block_forward(x, net_b.params, "block1", net_b.bn, uniform, "baseline").data
    np.testing.assert_allclose(out_a, out_b, atol=1e-9)


def test_zero_input_block_is_finite():
    cfg = ModelConfig(**SMALL)
    net = init_params(cfg, 0)
    out = block_forward(Tensor(np.zeros((2, 2, 12, 21))), net.params, "block1", net.bn,
                        default_adjacency(), "adaptive").data
    assert np.all(np.isfinite(out))


def test_block_errors():
    cfg = ModelConfig(**SMALL)
    net = init_params(cfg, 0)
    with pytest.raises(ValueError, match="mode"):
        block_forward(Tensor(np.zeros((1, 2, 12, 21))), net.params, "block1", net.bn,
                      default_adjacency(), "fancy")
    with pytest.raises(ShapeError):
        block_forward(Tensor(np.zeros((1, 3, 12, 21))), net.params, "block1", net.bn,
                      default_adjacency())


@pytest.mark.parametrize("adaptive", [False, True])
def test_network_shapes_and_eval_determinism(adaptive):
    cfg = ModelConfig(adaptive=adaptive)
    net = init_params(cfg, 0)
    x = np.random.default_rng(4).random((3, 2, 80, 21))
    x[2] = x[0]
    out = network_forward(x, net, cfg).data
    assert out.shape == (3, 1)
    # batched BLAS kernels may differ in the last bit between rows
    assert out[0, 0] == pytest.approx(out[2, 0], abs=1e-12)
    np.testing.assert_array_equal(out, network_forward(x, net, cfg).data)
    with pytest.raises(ShapeError):
        network_forward(x[:, :, :79], net, cfg)


def test_init_is_deterministic_and_structured():
    a = init_params(ModelConfig(adaptive=True), 5)
    b = init_params(ModelConfig(adaptive=True), 5)
    assert all(np.array_equal(a.params[k].data, b.params[k].data) for k in a.params)
    assert all(np.all(a.params[f"block1.gcn.B{k}"].data == 0) for k in range(3))
    base = init_params(ModelConfig(adaptive=False), 5)
    assert all(np.all(base.params[f"block2.gcn.M{k}"].data == 1) for k in range(3))
    c = init_params(ModelConfig(adaptive=True), 6)
    assert not np.array_equal(a.params["fc.w"].data, c.params["fc.w"].data)


@pytest.mark.parametrize("adaptive", [False, True])
def test_no_dead_parameters_at_init(adaptive):
    cfg = ModelConfig(**SMALL, adaptive=adaptive, dropout=0.0)
    net = init_params(cfg, 0)
    x = np.random.default_rng(5).random((4, 2, 12, 21))
    with Tape() as tape:
        out = network_forward(x, net, cfg, train=True)
        loss = ad.sum_all(ad.mul(out, Tensor(np.array([[1.0], [-2.0], [0.5], [3.0]]))))
    grads = tape.backward(loss, wrt=list(net.params.values()))
    adj = default_adjacency().matrices
    for name, t in net.params.items():
        g = grads[t]
        if ".gcn.M" in name:
            k = int(name[-1])
            g = g[adj[k] > 0]
        if name.endswith((".gcn.b0", ".gcn.b1", ".gcn.b2", "tcn.b")):
            # biases directly in front of batch norm cancel out
            continue
        assert np.any(g != 0), name


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(channels=(16, 8))
    with pytest.raises(ValueError):
        ModelConfig(temporal_kernel=8)
    with pytest.raises(ValueError):
        ModelConfig(dropout=1.0)
    cfg = ModelConfig()
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
