import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fedsim.errors import ConfigError, DataError, StructuralError
from fedsim.models import (
    Gin,
    GinConfig,
    Graph,
    GraphBatch,
    MlpConfig,
    Task,
    build_model,
    gin_forward,
    mlp_forward,
    readout,
    task_loss,
)
from fedsim.tensor import ParamVector, autodiff, grad_check


def test_mlp_zero_weights_give_zero_logits():
    config = MlpConfig(3, (4,), 2)
    params = build_model(config).init_params(np.random.default_rng(0))
    zeros = params.zeros_like()
    np.testing.assert_array_equal(mlp_forward(config, zeros, np.ones((5, 3))).data, 0.0)


def test_mlp_single_hidden_unit_hand_evaluation():
    config = MlpConfig(2, (1,), 2)
    params = ParamVector(
        {
            "dense0.w": np.array([[0.5], [-1.0]]),
            "dense0.b": np.array([0.25]),
            "dense1.w": np.array([[2.0, -3.0]]),
            "dense1.b": np.array([0.1, 0.2]),
        }
    )
    x = np.array([[2.0, 0.5], [0.0, 1.0]])
    # row 0: hidden = relu(1 - 0.5 + 0.25) = 0.75; row 1: relu(-1 + 0.25) = 0
    expected = [[0.75 * 2 + 0.1, 0.75 * -3 + 0.2], [0.1, 0.2]]
    np.testing.assert_allclose(mlp_forward(config, params, x).data, expected, atol=1e-12)


def test_mlp_gradcheck():
    rng = np.random.default_rng(1)
    model = build_model(MlpConfig(4, (6, 5), 3))
    x, y = rng.normal(size=(10, 4)), rng.integers(0, 3, 10)
    loss = autodiff(lambda p: task_loss(model.forward(p, x), y, Task("cls", 3)))
    assert grad_check(loss, model.init_params(rng)) < 1e-4


def test_mlp_rejects_wrong_width_and_no_hidden_layer():
    model = build_model(MlpConfig(4, (3,), 2))
    with pytest.raises(StructuralError):
        model.forward(model.init_params(np.random.default_rng(0)).leaves(), np.ones((2, 5)))
    with pytest.raises(ConfigError):
        MlpConfig(4, (), 2)


# readout

H = np.array([[1.0, 3.0], [3.0, 5.0]])


@pytest.mark.parametrize(
    "mode,expected",
    [("sum", [4, 8]), ("mean", [2, 4]), ("max", [3, 5]), ("mix", [4, 8, 2, 4, 3, 5])],
)
def test_readout_examples(mode, expected):
    np.testing.assert_array_equal(readout(H, mode).data, expected)


@given(arrays(np.float64, st.integers(1, 5), elements=st.floats(-1e3, 1e3)))
def test_single_node_readouts_coincide(x):
    node = x[None, :]
    s, m, mx = (readout(node, mode).data for mode in ("sum", "mean", "max"))
    assert np.array_equal(s, m) and np.array_equal(m, mx)
    np.testing.assert_array_equal(readout(node, "mix").data, np.concatenate([x, x, x]))


@given(
    arrays(np.float64, st.tuples(st.integers(1, 7), st.integers(1, 4)), elements=st.floats(-100, 100)),
    st.randoms(use_true_random=False),
    st.sampled_from(["sum", "mean", "max", "mix"]),
)
def test_readout_permutation_invariant(h, rnd, mode):
    order = list(range(h.shape[0]))
    rnd.shuffle(order)
    np.testing.assert_allclose(readout(h[order], mode).data, readout(h, mode).data, atol=1e-12, rtol=1e-12)


def test_readout_empty_graph_is_an_error():
    with pytest.raises(DataError):
        readout(np.zeros((0, 3)), "mean")


def test_batched_readout_matches_per_graph():
    rng = np.random.default_rng(2)
    graphs = [Graph(rng.normal(size=(n, 2)), []) for n in (1, 3, 2)]
    batch = GraphBatch.from_graphs(graphs)
    for mode in ("sum", "mean", "max", "mix"):
        out = readout(batch.x, mode, batch).data
        for row, g in zip(out, graphs):
            np.testing.assert_allclose(row, readout(g.node_features, mode).data, atol=1e-14)


# GIN


@pytest.mark.parametrize("mode,factor", [("sum", 1), ("mean", 1), ("max", 1), ("mix", 3)])
def test_head_width_follows_readout(mode, factor):
    config = GinConfig(3, 2, 5, mode, "classification", 2)
    params = Gin(config).init_params(np.random.default_rng(0))
    assert params["head.w1"].shape == (5 * factor, 5)
    assert config.readout_width == 5 * factor


def _identity_gin(readout_mode="sum"):
    config = GinConfig(1, 1, 1, readout_mode, "regression")
    params = Gin(config).init_params(np.random.default_rng(0))
    ones = {name: np.ones_like(arr) if name.endswith(".w1") or name.endswith(".w2") else np.zeros_like(arr) for name, arr in params}
    return Gin(config), ParamVector(ones)


def test_path_graph_message_sums():
    model, params = _identity_gin()
    path = Graph.undirected([[1.0], [2.0], [3.0]], [(0, 1), (1, 2)])
    h = model.node_embeddings(params.leaves(), GraphBatch.from_graphs([path]))
    # h_v <- h_v + sum of neighbours: 1 + 2, 2 + 1 + 3, 3 + 2
    np.testing.assert_array_equal(h.data[:, 0], [3.0, 6.0, 5.0])


def test_no_edges_transforms_nodes_independently():
    rng = np.random.default_rng(3)
    config = GinConfig(2, 1, 4, "mean", "classification", 2)
    model = Gin(config)
    params = model.init_params(rng)
    features = rng.normal(size=(4, 2))
    together = model.node_embeddings(params.leaves(), GraphBatch.from_graphs([Graph(features, [])]))
    for i in range(4):
        alone = model.node_embeddings(params.leaves(), GraphBatch.from_graphs([Graph(features[i : i + 1], [])]))
        np.testing.assert_allclose(together.data[i], alone.data[0], atol=1e-14)
    pooled = readout(together.data, "mean").data
    np.testing.assert_allclose(pooled, together.data.mean(axis=0), atol=1e-14)


@pytest.mark.parametrize("mode", ["sum", "mean", "max", "mix"])
def test_isomorphic_graphs_predict_identically(mode):
    rng = np.random.default_rng(4)
    config = GinConfig(3, 2, 6, mode, "multitask", 2)
    params = Gin(config).init_params(rng)
    features = rng.normal(size=(5, 3))
    pairs = [(0, 1), (1, 2), (2, 3), (3, 4), (4, 0), (1, 3)]
    perm = rng.permutation(5)
    inverse = np.argsort(perm)
    permuted = Graph.undirected(features[perm], [(inverse[u], inverse[v]) for u, v in pairs])
    a = gin_forward(config, params, Graph.undirected(features, pairs)).data
    b = gin_forward(config, params, permuted).data
    np.testing.assert_allclose(a, b, atol=1e-12)
    assert a.shape == (3,)


def test_gin_rejects_feature_width_mismatch():
    config = GinConfig(3, 1, 4)
    with pytest.raises(StructuralError):
        gin_forward(config, Gin(config).init_params(np.random.default_rng(0)), Graph(np.ones((2, 2)), []))


def test_graph_rejects_out_of_range_edges():
    with pytest.raises(StructuralError):
        Graph(np.ones((2, 1)), [(0, 2)])


def test_multitask_task_columns():
    out = np.array([[1.0, 2.0, 3.0]])
    from fedsim.tensor import Tensor

    assert task_loss(Tensor(out), np.array([2.5]), Task("reg", offset=2)).item() == pytest.approx(0.25)
    assert task_loss(Tensor(out), np.array([1]), Task("cls", 2)).item() == pytest.approx(np.log1p(np.exp(-1.0)))
