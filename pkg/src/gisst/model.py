"""GCN classifier with a learned edge/feature importance layer.

The importance layer holds one logit per feature column (shared across nodes)
and a coefficient vector scoring each directed edge from the concatenated,
importance-weighted endpoint features.  The masked forward pass multiplies
features by the feature probabilities and propagates messages weighted by the
edge probabilities, renormalizing by the weighted degree each pass.

Edge attributes are supported in the importance layer: an optional
coefficient vector for per-edge feature vectors, and optional per-type
parameter sets when edges carry discrete types.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from .autodiff import ShapeError, Tape, Tensor
from .graph import Graph

KIND_GISST = "gisst"
KIND_GCN = "gcn"


@dataclass
class ModelConfig:
    hidden_units: int = 32
    num_layers: int = 3
    dropout_rate: float = 0.1
    learning_rate: float = 0.005
    l2_penalty: float = 0.0005
    l1_edge: float = 0.005
    ent_edge: float = 0.01
    l1_feat: float = 0.0005
    ent_feat: float = 0.001
    epochs: int = 1000

    def __post_init__(self):
        if self.hidden_units < 1 or self.num_layers < 1 or self.epochs < 0:
            raise ValueError("hidden_units/num_layers must be >= 1 and epochs >= 0")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        for name in ("l2_penalty", "l1_edge", "ent_edge", "l1_feat", "ent_feat"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**doc)

    def with_overrides(self, **kwargs) -> "ModelConfig":
        return replace(self, **kwargs)


def xavier_init(shape, seed) -> Tensor:
    """Uniform init on [-b, b] with b = sqrt(6 / (fan_in + fan_out))."""
    if len(shape) != 2:
        raise ShapeError(f"xavier_init expects a 2-D shape, got {list(shape)}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    bound = np.sqrt(6.0 / (shape[0] + shape[1]))
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def _xavier_vector(length: int, rng) -> Tensor:
    return Tensor(xavier_init((1, length), rng).values[0], requires_grad=True)


@dataclass
class GisstParams:
    """Trainable importance parameters.

    ``feat_logits`` (length d) squashes to one probability per feature column;
    ``edge_coef`` (length 2d) scores the concatenated endpoint features of a
    directed edge.  ``edge_feat_coef`` extends the edge logit with a term for
    per-edge feature vectors; the ``*_by_type`` variants hold one parameter
    set per discrete edge type.
    """

    feat_logits: Tensor
    edge_coef: Tensor
    edge_feat_coef: Tensor | None = None
    edge_coef_by_type: list[Tensor] | None = None
    edge_feat_coef_by_type: list[Tensor] | None = None

    def tensors(self) -> list[Tensor]:
        out = [self.feat_logits, self.edge_coef]
        if self.edge_feat_coef is not None:
            out.append(self.edge_feat_coef)
        if self.edge_coef_by_type is not None:
            out.extend(self.edge_coef_by_type)
        if self.edge_feat_coef_by_type is not None:
            out.extend(self.edge_feat_coef_by_type)
        return out


class Model:
    """A stack of graph convolution weights, optionally with importance params."""

    def __init__(self, config: ModelConfig, weights: list[Tensor],
                 params: GisstParams | None, num_features: int, num_classes: int,
                 seed: int):
        self.config = config
        self.weights = weights
        self.params = params
        self.num_features = num_features
        self.num_classes = num_classes
        self.seed = seed

    @property
    def kind(self) -> str:
        return KIND_GISST if self.params is not None else KIND_GCN

    @property
    def num_layers(self) -> int:
        return len(self.weights)

    def parameters(self) -> list[Tensor]:
        out = list(self.weights)
        if self.params is not None:
            out.extend(self.params.tensors())
        return out

    def forward(self, tape: Tape, graph: Graph, training: bool = False,
                rng: np.random.Generator | None = None,
                edge_weights: Tensor | None = None,
                x: Tensor | None = None,
                edge_feats: np.ndarray | None = None,
                edge_types: np.ndarray | None = None) -> "ForwardResult":
        src, dst = graph.directed_edges()
        x = x if x is not None else Tensor(graph.features)
        feat_p = feat_prob_matrix = edge_p = None
        if self.params is not None:
            feat_p = feature_probs(tape, self.params)
            feat_prob_matrix = tape.broadcast_rows(feat_p, graph.num_nodes)
            x0 = tape.hadamard(x, feat_prob_matrix)
            edge_p = edge_probs(tape, self.params, x, src, dst, feat_p,
                                edge_feats=edge_feats, edge_types=edge_types)
            weights_on_edges = edge_p
        else:
            x0 = x
            weights_on_edges = edge_weights if edge_weights is not None else Tensor(
                np.ones(graph.num_directed)
            )
        logits = gcn_forward(
            tape, self.weights, x0, src, dst, graph.num_nodes, weights_on_edges,
            dropout_rate=self.config.dropout_rate, training=training, rng=rng,
        )
        return ForwardResult(logits, edge_p, feat_p, feat_prob_matrix, weights_on_edges, x)


@dataclass
class ForwardResult:
    """Output logits plus references into the tape for gradient readout."""

    logits: Tensor
    edge_probs: Tensor | None
    feat_probs: Tensor | None
    feat_prob_matrix: Tensor | None
    edge_weights: Tensor
    x: Tensor


def build_model(config: ModelConfig, num_features: int, num_classes: int, seed: int,
                kind: str = KIND_GISST, edge_feat_dim: int | None = None,
                num_edge_types: int | None = None) -> Model:
    """Initialize a model; consumes the seed in a fixed order (weights, then
    importance parameters) so training runs are reproducible."""
    if kind not in (KIND_GISST, KIND_GCN):
        raise ValueError(f"unknown model kind: {kind!r}")
    rng = np.random.default_rng(seed)
    dims = [num_features] + [config.hidden_units] * (config.num_layers - 1) + [num_classes]
    weights = [xavier_init((dims[i], dims[i + 1]), rng) for i in range(config.num_layers)]
    params = None
    if kind == KIND_GISST:
        params = GisstParams(
            feat_logits=_xavier_vector(num_features, rng),
            edge_coef=_xavier_vector(2 * num_features, rng),
        )
        if edge_feat_dim is not None and num_edge_types is None:
            params.edge_feat_coef = _xavier_vector(edge_feat_dim, rng)
        if num_edge_types is not None:
            params.edge_coef_by_type = [
                _xavier_vector(2 * num_features, rng) for _ in range(num_edge_types)
            ]
            if edge_feat_dim is not None:
                params.edge_feat_coef_by_type = [
                    _xavier_vector(edge_feat_dim, rng) for _ in range(num_edge_types)
                ]
    return Model(config, weights, params, num_features, num_classes, seed)


def feature_probs(tape: Tape, params: GisstParams) -> Tensor:
    """One inclusion probability per feature column, shared by all nodes."""
    return tape.sigmoid(params.feat_logits)


def edge_probs(tape: Tape, params: GisstParams, x: Tensor, src: np.ndarray,
               dst: np.ndarray, feat_p: Tensor,
               edge_feats: np.ndarray | None = None,
               edge_types: np.ndarray | None = None) -> Tensor:
    """Inclusion probability for each directed edge.

    The logit is a linear score of the importance-weighted source and target
    features, plus an optional edge-feature term; per-type coefficient sets
    are used when ``edge_types`` is given.  Probabilities exist only for the
    listed edges; absent edges are implicitly zero.
    """
    num_edges = len(src)
    s = tape.gather_rows(x, src)
    t = tape.gather_rows(x, dst)
    d = x.shape[1]

    def pair_score(coef: Tensor) -> Tensor:
        # [x_src * p || x_dst * p] . coef, factored as two thin mat-vecs
        src_coef = tape.hadamard(feat_p, tape.slice_vec(coef, 0, d))
        dst_coef = tape.hadamard(feat_p, tape.slice_vec(coef, d, 2 * d))
        return tape.add(tape.matvec(s, src_coef), tape.matvec(t, dst_coef))

    z = None
    if edge_feats is not None:
        edge_feats = np.asarray(edge_feats, dtype=np.float64)
        if edge_feats.ndim != 2 or edge_feats.shape[0] != num_edges:
            raise ShapeError(
                f"edge_feats shape {list(edge_feats.shape)} does not match {num_edges} edges"
            )
        z = Tensor(edge_feats)

    if edge_types is None:
        logit = pair_score(params.edge_coef)
        if z is not None:
            if params.edge_feat_coef is None:
                raise ValueError("edge features given but model has no edge-feature coefficients")
            logit = tape.add(logit, tape.matvec(z, params.edge_feat_coef))
    else:
        edge_types = np.asarray(edge_types, dtype=np.int64)
        if params.edge_coef_by_type is None:
            raise ValueError("edge types given but model has no per-type coefficients")
        num_types = len(params.edge_coef_by_type)
        if edge_types.size and (edge_types.min() < 0 or edge_types.max() >= num_types):
            raise ValueError(f"unknown edge type (model has {num_types} types)")
        logit = None
        for r in range(num_types):
            mask = Tensor((edge_types == r).astype(np.float64))
            term = pair_score(params.edge_coef_by_type[r])
            if z is not None:
                if params.edge_feat_coef_by_type is None:
                    raise ValueError("edge features given but no per-type feature coefficients")
                term = tape.add(term, tape.matvec(z, params.edge_feat_coef_by_type[r]))
            term = tape.hadamard(term, mask)
            logit = term if logit is None else tape.add(logit, term)
    return tape.sigmoid(logit)


def gcn_forward(tape: Tape, weights: list[Tensor], x0: Tensor, src: np.ndarray,
                dst: np.ndarray, num_nodes: int, edge_weights: Tensor,
                dropout_rate: float = 0.0, training: bool = False,
                rng: np.random.Generator | None = None) -> Tensor:
    """Symmetrically degree-normalized convolution stack over weighted edges.

    Self-loops carry fixed weight 1 and the normalization uses the weighted
    degree ``1 + incoming edge weights``, recomputed from the current edge
    weights so it stays differentiable.  ReLU and dropout sit between hidden
    layers; the last layer emits raw logits.
    """
    ones_col = Tensor(np.ones((num_nodes, 1)))
    deg = tape.add(
        tape.reshape(tape.scatter_aggregate(edge_weights, ones_col, src, dst, num_nodes),
                     (num_nodes,)),
        Tensor(np.ones(num_nodes)),
    )
    inv_sqrt = tape.power(deg, -0.5)

    h = x0
    for i, w in enumerate(weights):
        if h.shape[1] != w.shape[0]:
            raise ShapeError(
                f"layer {i}: input width {h.shape[1]} does not match weight shape {list(w.shape)}"
            )
        scaled = tape.scale_rows(h, inv_sqrt)
        agg = tape.add(
            tape.scatter_aggregate(edge_weights, scaled, src, dst, num_nodes), scaled
        )
        h = tape.matmul(tape.scale_rows(agg, inv_sqrt), w)
        if i < len(weights) - 1:
            h = tape.relu(h)
            if training and dropout_rate > 0.0:
                if rng is None:
                    raise ValueError("training with dropout requires an rng")
                h = tape.dropout(h, dropout_rate, rng)
    return h


# --- checkpoints -----------------------------------------------------------------


def _tensor_doc(t: Tensor) -> dict:
    return {"shape": [int(s) for s in t.shape], "data": [float(v) for v in t.values.ravel()]}


def _tensor_from_doc(doc: dict) -> Tensor:
    return Tensor(np.array(doc["data"], dtype=np.float64).reshape(doc["shape"]),
                  requires_grad=True)


def checkpoint_to_dict(model: Model) -> dict:
    doc = {
        "kind": model.kind,
        "config": model.config.to_dict(),
        "num_features": model.num_features,
        "num_classes": model.num_classes,
        "seed": model.seed,
        "weights": [_tensor_doc(w) for w in model.weights],
    }
    p = model.params
    if p is not None:
        doc["feat_logits"] = _tensor_doc(p.feat_logits)
        doc["edge_coef"] = _tensor_doc(p.edge_coef)
        if p.edge_feat_coef is not None:
            doc["edge_feat_coef"] = _tensor_doc(p.edge_feat_coef)
        if p.edge_coef_by_type is not None:
            doc["edge_coef_by_type"] = [_tensor_doc(t) for t in p.edge_coef_by_type]
        if p.edge_feat_coef_by_type is not None:
            doc["edge_feat_coef_by_type"] = [_tensor_doc(t) for t in p.edge_feat_coef_by_type]
    return doc


def checkpoint_from_dict(doc: dict) -> Model:
    config = ModelConfig.from_dict(doc["config"])
    weights = [_tensor_from_doc(w) for w in doc["weights"]]
    params = None
    if doc["kind"] == KIND_GISST:
        params = GisstParams(
            feat_logits=_tensor_from_doc(doc["feat_logits"]),
            edge_coef=_tensor_from_doc(doc["edge_coef"]),
        )
        if "edge_feat_coef" in doc:
            params.edge_feat_coef = _tensor_from_doc(doc["edge_feat_coef"])
        if "edge_coef_by_type" in doc:
            params.edge_coef_by_type = [_tensor_from_doc(t) for t in doc["edge_coef_by_type"]]
        if "edge_feat_coef_by_type" in doc:
            params.edge_feat_coef_by_type = [
                _tensor_from_doc(t) for t in doc["edge_feat_coef_by_type"]
            ]
    elif doc["kind"] != KIND_GCN:
        raise ValueError(f"unknown checkpoint kind: {doc['kind']!r}")
    return Model(config, weights, params, int(doc["num_features"]),
                 int(doc["num_classes"]), int(doc["seed"]))


def save_checkpoint(model: Model, path) -> None:
    Path(path).write_text(json.dumps(checkpoint_to_dict(model), sort_keys=True),
                          encoding="utf-8")


def load_checkpoint(path) -> Model:
    return checkpoint_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
