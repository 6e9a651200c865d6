import numpy as np
import pytest

from gisst.autodiff import ShapeError, Tape, Tensor
from gisst.model import (
    GisstParams,
    Model,
    ModelConfig,
    build_model,
    checkpoint_from_dict,
    checkpoint_to_dict,
    edge_probs,
    feature_probs,
    gcn_forward,
    load_checkpoint,
    save_checkpoint,
    xavier_init,
)

from fixtures import dense_gcn_oracle, make_graph, random_graph
from gradcheck import central_diff, max_rel_err


def vec(values):
    return Tensor(np.asarray(values, dtype=np.float64), requires_grad=True)


# --- feature probabilities ----------------------------------------------------


def test_feature_probs_at_zero():
    params = GisstParams(feat_logits=vec(np.zeros(6)), edge_coef=vec(np.zeros(12)))
    p = feature_probs(Tape(), params)
    np.testing.assert_allclose(p.values, 0.5)


def test_feature_probs_saturate():
    params = GisstParams(feat_logits=vec([20.0, -20.0]), edge_coef=vec(np.zeros(4)))
    p = feature_probs(Tape(), params)
    assert p.values[0] >= 1 - 1e-8
    assert p.values[1] <= 1e-8


def test_feature_probs_gradient_closed_form():
    rng = np.random.default_rng(0)
    m = rng.normal(size=5)
    params = GisstParams(feat_logits=vec(m), edge_coef=vec(np.zeros(10)))
    tape = Tape()
    p = feature_probs(tape, params)
    tape.backward(tape.sum(p))
    s = 1.0 / (1.0 + np.exp(-m))
    np.testing.assert_allclose(params.feat_logits.grad, s * (1 - s), atol=1e-12)


# --- edge probabilities ---------------------------------------------------------


def test_edge_probs_zero_coefficients():
    rng = np.random.default_rng(1)
    x = Tensor(rng.normal(size=(4, 3)))
    params = GisstParams(feat_logits=vec(np.zeros(3)), edge_coef=vec(np.zeros(6)))
    tape = Tape()
    p = edge_probs(tape, params, x, np.array([0, 1, 2]), np.array([1, 2, 3]),
                   feature_probs(tape, params))
    np.testing.assert_allclose(p.values, 0.5)


def test_edge_probs_edge_feature_term():
    x = Tensor(np.zeros((2, 3)))
    params = GisstParams(
        feat_logits=vec(np.zeros(3)), edge_coef=vec(np.zeros(6)), edge_feat_coef=vec([3.0])
    )
    tape = Tape()
    p = edge_probs(tape, params, x, np.array([0]), np.array([1]),
                   feature_probs(tape, params), edge_feats=np.array([[1.0]]))
    assert p.values[0] == pytest.approx(1 / (1 + np.exp(-3.0)), abs=1e-12)


def test_edge_probs_hand_case():
    # saturated feature probs reduce the logit to a plain dot product
    x = Tensor(np.array([[1.0, 0.0], [0.0, 1.0]]))
    params = GisstParams(feat_logits=vec([20.0, 20.0]), edge_coef=vec([1.0, 2.0, 3.0, 4.0]))
    tape = Tape()
    p = edge_probs(tape, params, x, np.array([0]), np.array([1]),
                   feature_probs(tape, params))
    assert p.values[0] == pytest.approx(1 / (1 + np.exp(-5.0)), abs=1e-6)


def test_edge_probs_typed():
    rng = np.random.default_rng(2)
    x = Tensor(rng.normal(size=(5, 3)))
    params = GisstParams(
        feat_logits=vec(np.zeros(3)),
        edge_coef=vec(np.zeros(6)),
        edge_coef_by_type=[vec(rng.normal(size=6)), vec(rng.normal(size=6))],
    )
    src, dst = np.array([0, 1, 2, 3]), np.array([1, 2, 3, 4])
    types = np.array([0, 1, 0, 1])
    tape = Tape()
    p = tape  # silence lint
    feat_p = feature_probs(tape, params)
    out = edge_probs(tape, params, x, src, dst, feat_p, edge_types=types)
    # per-edge result equals the single-type computation with that type's coefficients
    for r in (0, 1):
        single = GisstParams(feat_logits=params.feat_logits,
                             edge_coef=params.edge_coef_by_type[r])
        t2 = Tape()
        ref = edge_probs(t2, single, x, src, dst, feature_probs(t2, single))
        np.testing.assert_allclose(out.values[types == r], ref.values[types == r])


def test_edge_probs_typed_errors():
    x = Tensor(np.zeros((2, 2)))
    params = GisstParams(feat_logits=vec(np.zeros(2)), edge_coef=vec(np.zeros(4)),
                         edge_coef_by_type=[vec(np.zeros(4))])
    tape = Tape()
    feat_p = feature_probs(tape, params)
    with pytest.raises(ValueError, match="unknown edge type"):
        edge_probs(tape, params, x, np.array([0]), np.array([1]), feat_p,
                   edge_types=np.array([3]))
    with pytest.raises(ShapeError):
        edge_probs(tape, params, x, np.array([0]), np.array([1]), feat_p,
                   edge_feats=np.ones((2, 1)))


# --- forward pass -----------------------------------------------------------------


def test_forward_single_node_identity():
    graph = make_graph(1, [], features=np.array([[1.5, -2.0, 0.25]]))
    config = ModelConfig(hidden_units=3, num_layers=1, dropout_rate=0.0)
    model = build_model(config, 3, 3, seed=0, kind="gisst")
    model.weights[0] = Tensor(np.eye(3), requires_grad=True)
    model.params.feat_logits = vec([50.0, 50.0, 50.0])  # probabilities ~ 1
    out = model.forward(Tape(), graph)
    np.testing.assert_allclose(out.logits.values, graph.features, atol=1e-9)


def test_forward_zero_edge_weights_only_self_loops():
    rng = np.random.default_rng(3)
    graph = random_graph(rng, 6, 8, 4, 2)
    config = ModelConfig(hidden_units=5, num_layers=2, dropout_rate=0.0)
    model = build_model(config, 4, 2, seed=1, kind="gcn")
    zeros = Tensor(np.zeros(graph.num_directed))
    out = model.forward(Tape(), graph, edge_weights=zeros)
    isolated = make_graph(6, [], features=graph.features, labels=graph.labels)
    out_isolated = model.forward(Tape(), isolated)
    np.testing.assert_allclose(out.logits.values, out_isolated.logits.values, atol=1e-12)


def test_forward_matches_dense_oracle_on_path():
    rng = np.random.default_rng(4)
    graph = make_graph(4, [(0, 1), (1, 2), (2, 3)], features=rng.normal(size=(4, 3)))
    config = ModelConfig(hidden_units=5, num_layers=3, dropout_rate=0.0)
    model = build_model(config, 3, 2, seed=7, kind="gcn")
    src, dst = graph.directed_edges()
    w = rng.uniform(0.1, 1.0, size=graph.num_directed)
    out = model.forward(Tape(), graph, edge_weights=Tensor(w))
    expected = dense_gcn_oracle([t.values for t in model.weights], graph.features,
                                src, dst, w, 4)
    assert np.max(np.abs(out.logits.values - expected)) <= 1e-10


def test_unit_weights_reduce_to_plain_gcn():
    rng = np.random.default_rng(5)
    graph = random_graph(rng, 8, 12, 4, 3)
    config = ModelConfig(hidden_units=6, num_layers=2, dropout_rate=0.0)
    model = build_model(config, 4, 3, seed=2, kind="gisst")
    # saturate every probability at ~1
    model.params.feat_logits = vec(np.full(4, 60.0))
    model.params.edge_coef = vec(np.zeros(8))
    src, dst = graph.directed_edges()
    forced = model.forward(Tape(), graph)
    np.testing.assert_allclose(forced.edge_probs.values, 0.5)

    # plain GCN on unit weights vs dense oracle with w = 1
    gcn = Model(config, model.weights, None, 4, 3, seed=2)
    out = gcn.forward(Tape(), graph)
    expected = dense_gcn_oracle([t.values for t in model.weights], graph.features,
                                src, dst, np.ones(graph.num_directed), 8)
    assert np.max(np.abs(out.logits.values - expected)) <= 1e-10


def test_probabilities_in_open_interval():
    rng = np.random.default_rng(6)
    graph = random_graph(rng, 10, 15, 5, 2)
    model = build_model(ModelConfig(hidden_units=4, num_layers=2), 5, 2, seed=3)
    fwd = model.forward(Tape(), graph)
    for t in (fwd.edge_probs, fwd.feat_probs):
        assert np.all((t.values > 0.0) & (t.values < 1.0))
    assert fwd.edge_probs.shape == (graph.num_directed,)


def test_eval_forward_deterministic_with_dropout_configured():
    rng = np.random.default_rng(7)
    graph = random_graph(rng, 9, 14, 4, 2)
    model = build_model(ModelConfig(hidden_units=4, num_layers=3, dropout_rate=0.3),
                        4, 2, seed=4)
    a = model.forward(Tape(), graph, training=False).logits.values
    b = model.forward(Tape(), graph, training=False).logits.values
    assert a.tobytes() == b.tobytes()


def test_training_dropout_needs_rng():
    rng = np.random.default_rng(8)
    graph = random_graph(rng, 5, 6, 3, 2)
    model = build_model(ModelConfig(hidden_units=4, num_layers=2, dropout_rate=0.5),
                        3, 2, seed=5)
    with pytest.raises(ValueError, match="rng"):
        model.forward(Tape(), graph, training=True)


def test_gcn_forward_dimension_chain_error():
    graph = make_graph(3, [(0, 1), (1, 2)], features=np.zeros((3, 4)))
    config = ModelConfig(hidden_units=5, num_layers=2, dropout_rate=0.0)
    model = build_model(config, 3, 2, seed=0, kind="gcn")  # expects 3 input features
    with pytest.raises(ShapeError, match="layer 0"):
        model.forward(Tape(), graph)


def test_end_to_end_gradients_match_finite_differences():
    rng = np.random.default_rng(9)
    graph = random_graph(rng, 10, 14, 4, 3)
    config = ModelConfig(hidden_units=5, num_layers=2, dropout_rate=0.0)
    labels = np.eye(3)[graph.labels]
    mask = np.arange(10)

    def loss_for(model):
        tape = Tape()
        fwd = model.forward(tape, graph)
        return tape, tape.softmax_cross_entropy(fwd.logits, labels, mask)

    model = build_model(config, 4, 3, seed=11)
    tape, loss = loss_for(model)
    tape.backward(loss)

    for tensor in [model.params.feat_logits, model.params.edge_coef] + model.weights:
        def f(arr, _t=tensor):
            saved = _t.values
            _t.values = arr
            try:
                return float(loss_for(model)[1].values)
            finally:
                _t.values = saved

        numeric = central_diff(f, [tensor.values.copy()])[0]
        assert max_rel_err(tensor.grad, numeric) <= 1e-3


# --- initialization -----------------------------------------------------------------


def test_xavier_bound_16x16():
    t = xavier_init((16, 16), seed=0)
    bound = np.sqrt(6.0 / 32.0)
    assert bound == pytest.approx(0.4330, abs=5e-5)
    assert np.all(np.abs(t.values) <= bound)
    assert t.requires_grad


def test_xavier_deterministic():
    a = xavier_init((8, 4), seed=123)
    b = xavier_init((8, 4), seed=123)
    assert a.values.tobytes() == b.values.tobytes()


def test_xavier_mean_near_zero():
    t = xavier_init((100, 100), seed=1)
    assert abs(t.values.mean()) <= 0.02


def test_xavier_rejects_non_2d():
    with pytest.raises(ShapeError):
        xavier_init((4,), seed=0)


def test_build_model_layer_dims():
    model = build_model(ModelConfig(hidden_units=7, num_layers=3), 5, 4, seed=0)
    assert [tuple(w.shape) for w in model.weights] == [(5, 7), (7, 7), (7, 4)]
    single = build_model(ModelConfig(hidden_units=7, num_layers=1), 5, 4, seed=0)
    assert [tuple(w.shape) for w in single.weights] == [(5, 4)]


# --- config and checkpoints ------------------------------------------------------------


def test_model_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(dropout_rate=1.0)
    with pytest.raises(ValueError):
        ModelConfig(learning_rate=0.0)
    with pytest.raises(ValueError):
        ModelConfig(l1_edge=-0.1)
    with pytest.raises(ValueError, match="unknown model config keys"):
        ModelConfig.from_dict({"hidden_units": 16, "bogus": 1})


def test_model_config_roundtrip():
    config = ModelConfig(hidden_units=16, num_layers=4, learning_rate=0.001)
    assert ModelConfig.from_dict(config.to_dict()) == config


@pytest.mark.parametrize("kind", ["gisst", "gcn"])
def test_checkpoint_roundtrip_exact(tmp_path, kind):
    model = build_model(ModelConfig(hidden_units=6, num_layers=2), 4, 3, seed=42,
                        kind=kind, edge_feat_dim=2 if kind == "gisst" else None)
    path = tmp_path / "model.json"
    save_checkpoint(model, path)
    loaded = load_checkpoint(path)
    assert loaded.kind == kind
    assert loaded.config == model.config
    for a, b in zip(loaded.parameters(), model.parameters()):
        assert a.values.tobytes() == b.values.tobytes()
    # identical forward output
    rng = np.random.default_rng(0)
    graph = random_graph(rng, 6, 8, 4, 3)
    out_a = model.forward(Tape(), graph).logits.values
    out_b = loaded.forward(Tape(), graph).logits.values
    assert out_a.tobytes() == out_b.tobytes()


def test_checkpoint_typed_params_roundtrip():
    model = build_model(ModelConfig(hidden_units=4, num_layers=2), 3, 2, seed=1,
                        kind="gisst", edge_feat_dim=2, num_edge_types=3)
    doc = checkpoint_to_dict(model)
    again = checkpoint_from_dict(doc)
    assert len(again.params.edge_coef_by_type) == 3
    assert len(again.params.edge_feat_coef_by_type) == 3
    for a, b in zip(again.parameters(), model.parameters()):
        assert a.values.tobytes() == b.values.tobytes()


def test_checkpoint_rejects_unknown_kind():
    model = build_model(ModelConfig(hidden_units=4, num_layers=1), 3, 2, seed=1, kind="gcn")
    doc = checkpoint_to_dict(model)
    doc["kind"] = "mystery"
    with pytest.raises(ValueError, match="unknown checkpoint kind"):
        checkpoint_from_dict(doc)
