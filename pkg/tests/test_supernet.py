import math

import numpy as np
import pytest
from helpers import numeric_grad, rel_error

from ctnas.core import functional as F
from ctnas.core.tensor import Tensor, default_dtype
from ctnas.genotype import compile_genotype, derive
from ctnas.search_space import OperatorSpec, SearchSpace, build_operator
from ctnas.supernet import (ArchitectureError, ArchParams, CellTopology, DivergenceError, MetaNet,
                            mixed_edge_forward)

TINY_OPS = ["none", "skip", "maxpool 3x1", "sep 3x1", "dil 3x1"]


def tiny_net(seed=0, n_pairs=1, channels=2, shape=(2, 8), ops=TINY_OPS):
    space = SearchSpace.from_names(ops, channels)
    return MetaNet(space, channels, 3, n_pairs=n_pairs, n_nodes=2, input_shape=shape, seed=seed)


def test_topology_edge_count():
    for n in range(1, 6):
        topo = CellTopology(n)
        assert topo.num_edges == sum(2 + k for k in range(n)) == len(topo.edges)
        assert all(src < dst for src, dst in topo.edges)
    assert CellTopology(2).edges_into(3) == [2, 3, 4]


def test_mixed_edge_skip_none_uniform():
    x = Tensor(np.random.default_rng(0).standard_normal((2, 3, 4, 5)))
    ops = [build_operator(OperatorSpec("skip"), 3), build_operator(OperatorSpec("none"), 3)]
    out = mixed_edge_forward(x, Tensor(np.zeros(2)), ops)
    np.testing.assert_allclose(out.data, 0.5 * x.data, rtol=1e-15)


def test_mixed_edge_saturation():
    x = Tensor(np.random.default_rng(1).standard_normal((2, 3, 4, 5)))
    ops = [build_operator(OperatorSpec("skip"), 3), build_operator(OperatorSpec("none"), 3)]
    out = mixed_edge_forward(x, Tensor(np.array([20.0, 0.0])), ops)
    assert np.max(np.abs(out.data - x.data)) < 1e-6 * np.max(np.abs(x.data))


def test_mixed_edge_direct_evaluation():
    rng = np.random.default_rng(2)
    x = Tensor(rng.standard_normal((2, 3, 4, 9)))
    with default_dtype(np.float64):
        ops = [build_operator(OperatorSpec.parse(n), 3, rng=rng) for n in ("sep 3x1", "dil 3x1", "maxpool 3x3")]
    out = mixed_edge_forward(x, Tensor(np.array([math.log(3), 0.0, 0.0])), ops)
    ref = 0.6 * ops[0](x).data + 0.2 * ops[1](x).data + 0.2 * ops[2](x).data
    np.testing.assert_allclose(out.data, ref, rtol=1e-12, atol=1e-12)


def test_mixed_edge_errors():
    x = Tensor(np.zeros((1, 1, 2, 2)))
    ops = [build_operator(OperatorSpec("skip"), 1), build_operator(OperatorSpec("none"), 1)]
    with pytest.raises(DivergenceError):
        mixed_edge_forward(x, Tensor(np.array([np.nan, 0.0])), ops)
    with pytest.raises(ArchitectureError):
        mixed_edge_forward(x, Tensor(np.zeros(3)), ops)


def test_masking_matches_reduced_space():
    rng = np.random.default_rng(3)
    x = Tensor(rng.standard_normal((2, 3, 4, 9)))
    with default_dtype(np.float64):
        ops = [build_operator(OperatorSpec.parse(n), 3, rng=rng) for n in ("skip", "sep 3x1", "maxpool 3x1")]
    theta = rng.standard_normal(3)
    masked = theta.copy()
    masked[1] = -np.inf
    full = mixed_edge_forward(x, Tensor(masked), ops)
    reduced = mixed_edge_forward(x, Tensor(theta[[0, 2]]), [ops[0], ops[2]])
    np.testing.assert_allclose(full.data, reduced.data, rtol=1e-12, atol=1e-14)


def test_metanet_shape_contract():
    space = SearchSpace.named("desk", 4)
    net = MetaNet(space, 4, 4, n_pairs=1, n_nodes=2, input_shape=(8, 64))
    theta = net.new_arch_params(0)
    x = Tensor(np.random.default_rng(0).standard_normal((2, 4, 8, 64)).astype(np.float32))
    assert net(x, theta).shape == (2, 4)
    with pytest.raises(ArchitectureError, match="expected input"):
        net(Tensor(np.zeros((2, 4, 8, 63), np.float32)), theta)
    with pytest.raises(ArchitectureError):
        MetaNet(space, 4, 4, n_pairs=3, input_shape=(8, 4))


def test_duplicate_rows_identical_logits():
    net = tiny_net()
    theta = ArchParams.from_arrays(np.zeros((5, 5)), np.zeros((5, 5)), dtype=np.float32)
    row = np.random.default_rng(4).standard_normal((1, 2, 2, 8)).astype(np.float32)
    logits = net(Tensor(np.concatenate([row, row, row])), theta).data
    assert np.isfinite(logits).all()
    np.testing.assert_array_equal(logits[0], logits[1])
    np.testing.assert_array_equal(logits[0], logits[2])


def test_probabilities_sum_to_one():
    net = tiny_net()
    theta = net.new_arch_params(5, std=3.0, dtype=np.float64)
    for t in theta.tensors():
        np.testing.assert_allclose(F.softmax(t, axis=-1).data.sum(axis=-1), 1.0, atol=1e-12)


def test_every_live_operator_receives_gradient():
    net = tiny_net()
    theta = net.new_arch_params(0)
    x = Tensor(np.random.default_rng(5).standard_normal((4, 2, 2, 8)).astype(np.float32))
    F.cross_entropy(net(x, theta), np.array([0, 1, 2, 0])).backward()
    for cell in net.cells:
        for edge in cell.edges:
            for op, live in zip(edge.ops, edge.available):
                for p in op.parameters() if live else []:
                    assert p.grad is not None and np.abs(p.grad).max() > 0


def _loss_fn(net, x, labels):
    def loss(normal, reduce):
        return float(F.cross_entropy(net(Tensor(x), ArchParams.from_arrays(normal, reduce)), labels).data)
    return loss


@pytest.mark.parametrize("instance", range(20))
def test_theta_gradient_matches_finite_differences(instance):
    rng = np.random.default_rng(100 + instance)
    with default_dtype(np.float64):
        net = tiny_net(seed=instance)
    x = rng.standard_normal((3, 2, 2, 8))
    labels = rng.integers(0, 3, 3)
    normal, reduce = rng.standard_normal((2, 5, 5))
    theta = ArchParams.from_arrays(normal, reduce)
    F.cross_entropy(net(Tensor(x), theta), labels).backward()
    fn = _loss_fn(net, x, labels)
    assert rel_error(theta.normal.grad, numeric_grad(fn, [normal, reduce], 0)) < 1e-4
    assert rel_error(theta.reduce.grad, numeric_grad(fn, [normal, reduce], 1)) < 1e-4


@pytest.mark.parametrize("instance", range(20))
def test_weight_gradient_matches_finite_differences(instance):
    rng = np.random.default_rng(200 + instance)
    with default_dtype(np.float64):
        net = tiny_net(seed=instance)
    x = Tensor(rng.standard_normal((3, 2, 2, 8)))
    labels = rng.integers(0, 3, 3)
    theta = ArchParams.from_arrays(*rng.standard_normal((2, 5, 5)), requires_grad=False)
    params = net.parameters()
    F.cross_entropy(net(x, theta), labels).backward()
    analytic = np.concatenate([(p.grad if p.grad is not None else np.zeros_like(p.data)).ravel()
                               for p in params])
    base = [p.data.copy() for p in params]

    def loss(flat):
        offset = 0
        for p, b in zip(params, base):
            p.data = flat[offset:offset + b.size].reshape(b.shape)
            offset += b.size
        return float(F.cross_entropy(net(x, theta), labels).data)

    flat = np.concatenate([b.ravel() for b in base])
    coords = np.concatenate([np.argsort(-np.abs(analytic))[:20], rng.choice(flat.size, 20, replace=False)])
    numeric = np.empty(coords.size)
    for i, c in enumerate(coords):
        e = np.zeros_like(flat)
        e[c] = 1e-6
        numeric[i] = (loss(flat + e) - loss(flat - e)) / 2e-6
    assert rel_error(analytic[coords], numeric) < 1e-4
    v = rng.standard_normal(flat.size)
    directional = (loss(flat + 1e-6 * v) - loss(flat - 1e-6 * v)) / 2e-6
    assert abs(directional - analytic @ v) / (abs(analytic @ v) + 1e-8) < 1e-4


def test_supernet_float32_gradients_within_tolerance():
    rng = np.random.default_rng(7)
    net = tiny_net(seed=7)
    x = rng.standard_normal((3, 2, 2, 8))
    labels = np.array([0, 1, 2])
    normal, reduce = rng.standard_normal((2, 5, 5))
    theta = ArchParams.from_arrays(normal, reduce, dtype=np.float32)
    F.cross_entropy(net(Tensor(x.astype(np.float32)), theta), labels).backward()
    with default_dtype(np.float64):
        ref = tiny_net(seed=7)
    fn = _loss_fn(ref, x, labels)
    assert rel_error(theta.normal.grad, numeric_grad(fn, [normal, reduce], 0)) < 1e-3


def copy_supernet_weights(meta, derived, genotype, space):
    """Load the supernet weights of each retained operator into the compiled net."""
    derived.stem_conv.load_state_dict(meta.stem_conv.state_dict())
    derived.stem_bn.load_state_dict(meta.stem_bn.state_dict())
    derived.head.load_state_dict(meta.head.state_dict())
    edges = meta.topology.edges
    for mcell, dcell in zip(meta.cells, derived.cells):
        nodes = genotype.reduce if mcell.reduction else genotype.normal
        i = 0
        for j, node in enumerate(nodes):
            for op_name, src in node:
                e = edges.index((src, j + 2))
                dcell.ops[i].load_state_dict(mcell.edges[e].ops[space.index(op_name)].state_dict())
                i += 1


@pytest.mark.parametrize("seed", range(3))
def test_compiled_genotype_matches_saturated_supernet(seed):
    rng = np.random.default_rng(seed)
    space = SearchSpace.named("desk", 4)
    with default_dtype(np.float64):
        meta = MetaNet(space, 4, 3, n_pairs=2, n_nodes=2, input_shape=(4, 32), seed=seed)
    topo = meta.topology
    arrays = []
    for _ in range(2):
        theta = np.zeros((topo.num_edges, len(space)))
        choice = rng.integers(1, len(space), topo.num_edges)
        theta[np.arange(topo.num_edges), choice] = 20.0
        drop = rng.choice(topo.edges_into(3))
        theta[drop] = 0.0
        theta[drop, space.none_index] = 20.0
        arrays.append(theta)
    theta = ArchParams.from_arrays(*arrays)
    g = derive(theta, space, n_pairs=2, classes=3)
    with default_dtype(np.float64):
        compiled = compile_genotype(g, 4, 3, (4, 32), seed=99)
    copy_supernet_weights(meta, compiled, g, space)
    x = Tensor(rng.standard_normal((3, 4, 4, 32)))
    diff = np.abs(meta(x, theta).data - compiled(x).data).max()
    assert diff < 1e-4
