"""Importance scoring, subgraph extraction, and explanation-precision metrics.

Four scoring methods share one report format:

* ``gisst-grad``   -- gradient of the predicted-class loss w.r.t. the learned
  edge/feature inclusion probabilities (instance level; a node set gets the
  gradient of its average predicted loss).
* ``gisst-global`` -- the learned probabilities themselves.
* ``grad``         -- gradient w.r.t. unit edge weights and raw input
  features of a plain GCN.
* ``mask-opt``     -- post-hoc optimization of sigmoid masks over the
  target's computation subgraph (size + entropy penalized).

Scores are restricted to the target's computation subgraph: the k-hop
neighborhood, k = number of convolution layers, which fully determines the
target's output.  An undirected edge's score is the mean of its two directed
scores.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tape, Tensor
from .graph import Dataset, Graph, Subgraph, k_hop_subgraph, k_hop_union
from .model import KIND_GCN, KIND_GISST, Model, gcn_forward
from .train import Adam, entropy_reg

METHOD_GISST_GRAD = "gisst-grad"
METHOD_GISST_GLOBAL = "gisst-global"
METHOD_GRAD = "grad"
METHOD_MASK_OPT = "mask-opt"

METHODS = (METHOD_GISST_GRAD, METHOD_GISST_GLOBAL, METHOD_GRAD, METHOD_MASK_OPT)

_METHOD_MODEL_KIND = {
    METHOD_GISST_GRAD: KIND_GISST,
    METHOD_GISST_GLOBAL: KIND_GISST,
    METHOD_GRAD: KIND_GCN,
    METHOD_MASK_OPT: KIND_GCN,
}


@dataclass
class Explanation:
    """Edge and feature importance for one target node (or node set)."""

    target: int | tuple
    method: str
    edge_scores: dict  # (u, v) with u < v -> nonnegative float
    feature_scores: np.ndarray  # (d,)

    def subgraph_nodes(self) -> set:
        nodes = {int(n) for pair in self.edge_scores for n in pair}
        if isinstance(self.target, tuple):
            nodes.update(int(t) for t in self.target)
        else:
            nodes.add(int(self.target))
        return nodes


def _check_method_model(method: str, model: Model) -> None:
    if method not in _METHOD_MODEL_KIND:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    expected = _METHOD_MODEL_KIND[method]
    if model.kind != expected:
        raise ValueError(
            f"method {method!r} needs a {expected!r} checkpoint, got {model.kind!r}"
        )


def _as_targets(target) -> np.ndarray:
    return np.atleast_1d(np.asarray(target, dtype=np.int64))


def _target_field(targets: np.ndarray):
    return int(targets[0]) if targets.size == 1 else tuple(int(t) for t in targets)


def _computation_subgraph(graph: Graph, targets: np.ndarray, hops: int) -> Subgraph:
    if targets.size == 1:
        return k_hop_subgraph(graph, int(targets[0]), hops)
    return k_hop_union(graph, targets, hops)


def _undirected_mean(directed: np.ndarray, num_undirected: int) -> np.ndarray:
    return 0.5 * (directed[:num_undirected] + directed[num_undirected:])


def _edge_score_map(undirected_scores: np.ndarray, sub: Subgraph) -> dict:
    return {
        (int(u), int(v)): float(undirected_scores[k])
        for k, (u, v) in zip(sub.edge_idx, sub.edge_pairs)
    }


def _predicted_loss(tape: Tape, logits: Tensor, targets: np.ndarray) -> Tensor:
    """Cross entropy of the model's own predicted classes, averaged over targets."""
    pred = logits.values[targets].argmax(axis=1)
    onehot = np.zeros_like(logits.values)
    onehot[targets, pred] = 1.0
    return tape.softmax_cross_entropy(logits, onehot, targets)


def _grad_or_zeros(t: Tensor | None, shape) -> np.ndarray:
    if t is None or t.grad is None:
        return np.zeros(shape)
    return t.grad


def gisst_scores(model: Model, graph: Graph, target, num_hops: int | None = None) -> Explanation:
    """Gradient of the predicted loss w.r.t. the inclusion probabilities."""
    _check_method_model(METHOD_GISST_GRAD, model)
    targets = _as_targets(target)
    hops = num_hops or model.num_layers
    tape = Tape()
    fwd = model.forward(tape, graph, training=False)
    if not np.all(np.isfinite(fwd.logits.values)):
        raise ValueError("model produced non-finite logits; cannot explain")
    tape.backward(_predicted_loss(tape, fwd.logits, targets))

    edge_grad = np.abs(_grad_or_zeros(fwd.edge_probs, graph.num_directed))
    undirected = _undirected_mean(edge_grad, graph.num_undirected)
    prob_matrix_grad = np.abs(
        _grad_or_zeros(fwd.feat_prob_matrix, (graph.num_nodes, graph.num_features))
    )
    sub = _computation_subgraph(graph, targets, hops)
    return Explanation(
        target=_target_field(targets),
        method=METHOD_GISST_GRAD,
        edge_scores=_edge_score_map(undirected, sub),
        feature_scores=prob_matrix_grad[sub.nodes].sum(axis=0),
    )


def gisst_global_scores(model: Model, graph: Graph, target,
                        num_hops: int | None = None) -> Explanation:
    """The learned probabilities as scores (dataset-level view of importance)."""
    _check_method_model(METHOD_GISST_GLOBAL, model)
    targets = _as_targets(target)
    hops = num_hops or model.num_layers
    fwd = model.forward(Tape(record=False), graph, training=False)
    undirected = _undirected_mean(fwd.edge_probs.values, graph.num_undirected)
    sub = _computation_subgraph(graph, targets, hops)
    return Explanation(
        target=_target_field(targets),
        method=METHOD_GISST_GLOBAL,
        edge_scores=_edge_score_map(undirected, sub),
        feature_scores=fwd.feat_probs.values.copy(),
    )


def grad_baseline(model: Model, graph: Graph, target,
                  num_hops: int | None = None) -> Explanation:
    """Gradients w.r.t. unit edge weights and raw features of a plain GCN."""
    _check_method_model(METHOD_GRAD, model)
    targets = _as_targets(target)
    hops = num_hops or model.num_layers
    tape = Tape()
    weights = Tensor(np.ones(graph.num_directed), requires_grad=True)
    x = Tensor(graph.features, requires_grad=True)
    fwd = model.forward(tape, graph, training=False, edge_weights=weights, x=x)
    if not np.all(np.isfinite(fwd.logits.values)):
        raise ValueError("model produced non-finite logits; cannot explain")
    tape.backward(_predicted_loss(tape, fwd.logits, targets))

    undirected = _undirected_mean(
        np.abs(_grad_or_zeros(weights, graph.num_directed)), graph.num_undirected
    )
    feat_grad = np.abs(_grad_or_zeros(x, graph.features.shape))
    sub = _computation_subgraph(graph, targets, hops)
    return Explanation(
        target=_target_field(targets),
        method=METHOD_GRAD,
        edge_scores=_edge_score_map(undirected, sub),
        feature_scores=feat_grad[sub.nodes].sum(axis=0),
    )


@dataclass
class MaskOptConfig:
    """Fixed, untuned optimization settings for the post-hoc mask baseline."""

    steps: int = 100
    learning_rate: float = 0.01
    size_coef: float = 0.005
    entropy_coef: float = 1.0


def mask_opt_baseline(model: Model, graph: Graph, target,
                      config: MaskOptConfig | None = None,
                      num_hops: int | None = None) -> Explanation:
    """Optimize sigmoid masks over the target's computation subgraph.

    One logit per undirected subgraph edge (applied to both directions) and
    one per feature column, zero-initialized; the objective is the masked
    prediction loss for the model's predicted class plus size (L1) and
    entropy penalties on both masks.
    """
    _check_method_model(METHOD_MASK_OPT, model)
    config = config or MaskOptConfig()
    target = int(target)
    hops = num_hops or model.num_layers
    sub = k_hop_subgraph(graph, target, hops)

    local_of = {int(n): i for i, n in enumerate(sub.nodes)}
    num_local = len(sub.nodes)
    local_pairs = np.array(
        [[local_of[int(u)], local_of[int(v)]] for u, v in sub.edge_pairs], dtype=np.int64
    ).reshape(-1, 2)
    src = np.concatenate([local_pairs[:, 0], local_pairs[:, 1]])
    dst = np.concatenate([local_pairs[:, 1], local_pairs[:, 0]])
    x_local = Tensor(graph.features[sub.nodes])
    target_local = np.array([local_of[target]])

    full = model.forward(Tape(record=False), graph, training=False)
    pred_class = int(full.logits.values[target].argmax())
    onehot = np.zeros((num_local, model.num_classes))
    onehot[target_local[0], pred_class] = 1.0

    frozen = [Tensor(w.values) for w in model.weights]
    edge_logits = Tensor(np.zeros(len(local_pairs)), requires_grad=True)
    feat_logits = Tensor(np.zeros(graph.num_features), requires_grad=True)
    opt = Adam([edge_logits, feat_logits], lr=config.learning_rate)

    for step in range(config.steps):
        tape = Tape()
        edge_mask = tape.sigmoid(edge_logits)
        feat_mask = tape.sigmoid(feat_logits)
        directed = tape.concat(edge_mask, edge_mask) if len(local_pairs) else edge_mask
        x0 = tape.hadamard(x_local, tape.broadcast_rows(feat_mask, num_local))
        logits = gcn_forward(tape, frozen, x0, src, dst, num_local, directed)
        loss = tape.softmax_cross_entropy(logits, onehot, target_local)
        size = tape.add(tape.mean(edge_mask), tape.mean(feat_mask)) if len(local_pairs) \
            else tape.mean(feat_mask)
        ent = tape.add(entropy_reg(tape, edge_mask), entropy_reg(tape, feat_mask)) \
            if len(local_pairs) else entropy_reg(tape, feat_mask)
        loss = tape.add(loss, tape.add(tape.scale(size, config.size_coef),
                                       tape.scale(ent, config.entropy_coef)))
        if not np.isfinite(float(loss.values)):
            raise RuntimeError(f"mask optimization diverged at step {step}")
        opt.zero_grad()
        tape.backward(loss)
        opt.step()

    edge_probs = 1.0 / (1.0 + np.exp(-edge_logits.values))
    feat_probs = 1.0 / (1.0 + np.exp(-feat_logits.values))
    edge_scores = {
        (int(u), int(v)): float(p) for (u, v), p in zip(sub.edge_pairs, edge_probs)
    }
    return Explanation(target=target, method=METHOD_MASK_OPT,
                       edge_scores=edge_scores, feature_scores=feat_probs)


def median_group(explanations: list[Explanation]) -> Explanation:
    """Aggregate per-target explanations by the per-edge/feature median
    (robust to outliers); used for group-level mask-opt summaries."""
    if not explanations:
        raise ValueError("no explanations to aggregate")
    per_edge: dict = {}
    for expl in explanations:
        for pair, score in expl.edge_scores.items():
            per_edge.setdefault(pair, []).append(score)
    edge_scores = {pair: float(np.median(vals)) for pair, vals in per_edge.items()}
    feats = np.median(np.stack([e.feature_scores for e in explanations]), axis=0)
    targets = tuple(sorted({
        t for e in explanations
        for t in (e.target if isinstance(e.target, tuple) else (e.target,))
    }))
    return Explanation(target=targets, method=explanations[0].method,
                       edge_scores=edge_scores, feature_scores=feats)


def explain(model: Model, graph: Graph, target, method: str,
            num_hops: int | None = None,
            mask_opt: MaskOptConfig | None = None) -> Explanation:
    """Dispatch to one scoring method, validating model/method compatibility."""
    _check_method_model(method, model)
    if method == METHOD_GISST_GRAD:
        return gisst_scores(model, graph, target, num_hops)
    if method == METHOD_GISST_GLOBAL:
        return gisst_global_scores(model, graph, target, num_hops)
    if method == METHOD_GRAD:
        return grad_baseline(model, graph, target, num_hops)
    return mask_opt_baseline(model, graph, target, mask_opt, num_hops)


# --- subgraph extraction and metrics ---------------------------------------------


@dataclass
class Extraction:
    threshold: float
    edges: set
    nodes: set


def extract_subgraph(edge_scores: dict, min_nodes: int) -> Extraction | None:
    """Keep edges above the largest threshold whose kept edges span at least
    ``min_nodes`` nodes.  Candidate thresholds are the distinct scores in
    descending order; returns None when even the full edge set is too small.
    """
    if not edge_scores:
        raise ValueError("cannot extract a subgraph from an empty explanation")
    if min_nodes < 2:
        raise ValueError(f"min_nodes must be >= 2, got {min_nodes}")
    for t in sorted({float(s) for s in edge_scores.values()}, reverse=True):
        edges = {pair for pair, s in edge_scores.items() if s >= t}
        nodes = {int(n) for pair in edges for n in pair}
        if len(nodes) >= min_nodes:
            return Extraction(threshold=t, edges=edges, nodes=nodes)
    return None


@dataclass
class Metrics:
    precision: float
    recall: float
    accuracy: float


def edge_metrics(extracted: set, important: frozenset | set, subgraph_edges) -> Metrics | None:
    """Precision/recall/accuracy of extracted edges over the computation
    subgraph's edge universe; None when precision or recall is undefined."""
    universe = {(int(u), int(v)) for u, v in subgraph_edges}
    if not set(extracted) <= universe:
        raise ValueError("extracted edges must lie inside the computation subgraph")
    relevant = set(important) & universe
    if not extracted or not relevant:
        return None
    tp = len(set(extracted) & relevant)
    fp = len(extracted) - tp
    fn = len(relevant) - tp
    tn = len(universe) - tp - fp - fn
    return Metrics(
        precision=tp / len(extracted),
        recall=tp / len(relevant),
        accuracy=(tp + tn) / len(universe),
    )


def minmax_normalize(scores: np.ndarray) -> np.ndarray:
    """Row-wise minmax to [0, 1]; constant rows map to all zeros."""
    scores = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    lo = scores.min(axis=1, keepdims=True)
    hi = scores.max(axis=1, keepdims=True)
    span = hi - lo
    out = np.zeros_like(scores)
    nonconst = span[:, 0] > 0
    out[nonconst] = (scores[nonconst] - lo[nonconst]) / span[nonconst]
    return out


def top_k_features(mean_scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k best scores; ties break toward the lower index."""
    order = np.lexsort((np.arange(mean_scores.size), -mean_scores))
    return order[:k]


def feature_metrics(per_node_scores, important: frozenset | set, k: int = 40) -> Metrics:
    """Normalize each node's scores, average, and judge the top-k set."""
    scores = minmax_normalize(per_node_scores)
    d = scores.shape[1]
    if d < k:
        raise ValueError(f"top-k of {k} features needs at least {k} columns, got {d}")
    top = set(int(i) for i in top_k_features(scores.mean(axis=0), k))
    imp = {int(i) for i in important}
    tp = len(top & imp)
    tn = (d - k) - (len(imp) - tp)
    return Metrics(precision=tp / k, recall=tp / len(imp), accuracy=(tp + tn) / d)


# --- dataset-level evaluation ------------------------------------------------------


@dataclass
class EvalRow:
    dataset: str
    method: str
    metric: str
    mean: float
    n: int


def _model_for(models: dict, method: str) -> Model:
    kind = _METHOD_MODEL_KIND[method]
    model = models.get(kind)
    if model is None:
        raise ValueError(f"method {method!r} needs a {kind!r} model")
    return model


def node_explanations(model: Model, graph: Graph, nodes, method: str,
                      num_hops: int | None = None,
                      mask_opt: MaskOptConfig | None = None) -> dict:
    """One explanation per node, keyed by node id."""
    return {
        int(n): explain(model, graph, int(n), method, num_hops=num_hops,
                        mask_opt=mask_opt)
        for n in nodes
    }


def evaluate_explanations(ds: Dataset, per_method: dict, top_k: int = 40,
                          min_nodes: int | None = None) -> list[EvalRow]:
    """Score precomputed explanations: edge metrics over the motif-node
    targets, feature metrics over every target.

    ``per_method`` maps method name to {node id -> Explanation}.  Targets
    whose extraction cannot span the required node count, or with undefined
    precision, are excluded from the edge means.
    """
    truth = ds.ground_truth
    required = min_nodes if min_nodes is not None else truth.motif_size
    motif_nodes = {int(n) for motif in truth.motif_nodes for n in motif}
    name = ds.spec.kind
    rows: list[EvalRow] = []
    for method, explanations in per_method.items():
        edge_collected = {"precision": [], "recall": [], "accuracy": []}
        feat_rows = []
        for node in sorted(explanations):
            expl = explanations[node]
            feat_rows.append(expl.feature_scores)
            if node not in motif_nodes or not expl.edge_scores:
                continue
            extraction = extract_subgraph(expl.edge_scores, required)
            if extraction is None:
                continue
            metrics = edge_metrics(extraction.edges, truth.important_edges,
                                   expl.edge_scores.keys())
            if metrics is None:
                continue
            edge_collected["precision"].append(metrics.precision)
            edge_collected["recall"].append(metrics.recall)
            edge_collected["accuracy"].append(metrics.accuracy)
        for metric, values in edge_collected.items():
            rows.append(EvalRow(name, method, f"edge_{metric}",
                                float(np.mean(values)) if values else float("nan"),
                                len(values)))
        if not feat_rows:
            raise ValueError(f"no explanations to evaluate for method {method!r}")
        fm = feature_metrics(np.stack(feat_rows), truth.important_features, k=top_k)
        for metric, value in (("precision", fm.precision), ("recall", fm.recall),
                              ("accuracy", fm.accuracy)):
            rows.append(EvalRow(name, method, f"feat_{metric}", value, len(feat_rows)))
    return rows


def evaluate_dataset(models: dict, ds: Dataset, methods: list[str],
                     top_k: int = 40, min_nodes: int | None = None,
                     num_hops: int | None = None,
                     mask_opt: MaskOptConfig | None = None) -> list[EvalRow]:
    """Explain every test node with each method, then score: edge metrics over
    motif nodes in the test set, feature metrics over all test nodes."""
    per_method = {
        method: node_explanations(_model_for(models, method), ds.graph,
                                  ds.graph.test_idx, method, num_hops, mask_opt)
        for method in methods
    }
    return evaluate_explanations(ds, per_method, top_k=top_k, min_nodes=min_nodes)


def eval_rows_csv(rows: list[EvalRow]) -> str:
    lines = ["dataset,method,metric,mean,n"]
    for r in rows:
        lines.append(f"{r.dataset},{r.method},{r.metric},{r.mean!r},{r.n}")
    return "\n".join(lines) + "\n"


# --- serialization ---------------------------------------------------------------------


def explanation_to_dict(expl: Explanation) -> dict:
    target = list(expl.target) if isinstance(expl.target, tuple) else expl.target
    return {
        "target": target,
        "method": expl.method,
        "edge_scores": [
            [int(u), int(v), float(s)] for (u, v), s in sorted(expl.edge_scores.items())
        ],
        "feature_scores": [float(x) for x in expl.feature_scores],
    }


def explanation_from_dict(doc: dict) -> Explanation:
    target = tuple(doc["target"]) if isinstance(doc["target"], list) else int(doc["target"])
    return Explanation(
        target=target,
        method=doc["method"],
        edge_scores={(int(u), int(v)): float(s) for u, v, s in doc["edge_scores"]},
        feature_scores=np.array(doc["feature_scores"], dtype=np.float64),
    )


def save_explanation(expl: Explanation, path) -> None:
    Path(path).write_text(json.dumps(explanation_to_dict(expl), sort_keys=True),
                          encoding="utf-8")


def load_explanation(path) -> Explanation:
    return explanation_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def to_dot(expl: Explanation, extracted: set | None = None,
           important: frozenset | set | None = None) -> str:
    """Render the scored subgraph; extracted edges are bold, ground-truth
    important edges colored."""
    extracted = extracted or set()
    important = important or set()
    targets = expl.target if isinstance(expl.target, tuple) else (expl.target,)
    lines = ["graph explanation {"]
    for n in sorted(expl.subgraph_nodes()):
        style = ' [shape=doublecircle]' if n in targets else ""
        lines.append(f"  n{n}{style};")
    for (u, v), score in sorted(expl.edge_scores.items()):
        attrs = [f"weight={score!r}"]
        if (u, v) in extracted:
            attrs.append("style=bold")
            attrs.append("penwidth=3")
        if (u, v) in important:
            attrs.append('color="firebrick"')
        lines.append(f'  n{u} -- n{v} [{", ".join(attrs)}];')
    lines.append("}")
    return "\n".join(lines) + "\n"
