"""Loss assembly, Adam optimization, the training loop, and grid search.

The optimized objective is the masked classification loss plus four sparsity
penalties: L1 (mean probability) and binary entropy on both the edge and the
feature inclusion probabilities.  Both penalties shrink probabilities toward
zero; the entropy term additionally rewards saturating the surviving ones
near one.  The L2 penalty on the convolution weights enters through the
optimizer as weight decay; the reported loss breakdown includes it so the
decomposition identity holds.
"""

from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import dataclass, field
from itertools import product
from pathlib import Path

import numpy as np

from .autodiff import Tape, Tensor
from .graph import Graph
from .model import KIND_GISST, Model, ModelConfig, build_model

PROB_CLAMP = 1e-7


class TrainingDivergedError(RuntimeError):
    """Raised when the training loss stops being finite."""


@dataclass
class LossBreakdown:
    class_loss: float
    edge_l1: float
    edge_entropy: float
    feat_l1: float
    feat_entropy: float
    l2_weight_penalty: float
    total: float

    def as_dict(self) -> dict:
        return {
            "class_loss": self.class_loss,
            "edge_l1": self.edge_l1,
            "edge_entropy": self.edge_entropy,
            "feat_l1": self.feat_l1,
            "feat_entropy": self.feat_entropy,
            "l2_weight_penalty": self.l2_weight_penalty,
            "total": self.total,
        }


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    return np.eye(num_classes)[np.asarray(labels, dtype=np.int64)]


def classification_loss(tape: Tape, logits: Tensor, labels: np.ndarray,
                        mask: np.ndarray) -> Tensor:
    """Mean cross entropy over the masked nodes."""
    num_classes = logits.shape[1]
    return tape.softmax_cross_entropy(logits, one_hot(labels, num_classes), mask)


def l1_reg(tape: Tape, probs: Tensor) -> Tensor:
    """Mean probability; with entries in [0, 1] this is the normalized L1 mass."""
    if np.any(probs.values < 0.0) or np.any(probs.values > 1.0):
        raise ValueError("l1_reg expects probabilities in [0, 1]")
    return tape.mean(probs)


def entropy_reg(tape: Tape, probs: Tensor) -> Tensor:
    """Mean binary entropy; minimal when probabilities sit at 0 or 1.

    Probabilities are clamped away from {0, 1} before the logarithms.
    """
    q = tape.clamp(probs, PROB_CLAMP, 1.0 - PROB_CLAMP)
    ones = Tensor(np.ones(q.shape))
    q1 = tape.sub(ones, q)
    ent = tape.neg(tape.add(tape.hadamard(q, tape.log(q)),
                            tape.hadamard(q1, tape.log(q1))))
    return tape.mean(ent)


def weight_l2(model: Model) -> float:
    """Half the squared Frobenius mass of the convolution weights, so its
    gradient is exactly the weight-decay term the optimizer applies."""
    return 0.5 * float(sum(np.sum(w.values**2) for w in model.weights))


def total_loss(tape: Tape, model: Model, graph: Graph, training: bool = False,
               rng: np.random.Generator | None = None,
               edge_feats: np.ndarray | None = None,
               edge_types: np.ndarray | None = None):
    """Assemble the training objective.

    Returns the differentiable loss (sparsity terms included, weight decay
    excluded), the full breakdown, and the forward-pass handle.
    """
    cfg = model.config
    fwd = model.forward(tape, graph, training=training, rng=rng,
                        edge_feats=edge_feats, edge_types=edge_types)
    loss = classification_loss(tape, fwd.logits, graph.labels, graph.train_idx)
    terms = {"edge_l1": 0.0, "edge_entropy": 0.0, "feat_l1": 0.0, "feat_entropy": 0.0}
    if model.kind == KIND_GISST:
        e_l1 = l1_reg(tape, fwd.edge_probs)
        e_ent = entropy_reg(tape, fwd.edge_probs)
        f_l1 = l1_reg(tape, fwd.feat_probs)
        f_ent = entropy_reg(tape, fwd.feat_probs)
        reg = tape.add(
            tape.add(tape.scale(e_l1, cfg.l1_edge), tape.scale(e_ent, cfg.ent_edge)),
            tape.add(tape.scale(f_l1, cfg.l1_feat), tape.scale(f_ent, cfg.ent_feat)),
        )
        class_only = loss
        loss = tape.add(loss, reg)
        terms = {
            "edge_l1": float(e_l1.values),
            "edge_entropy": float(e_ent.values),
            "feat_l1": float(f_l1.values),
            "feat_entropy": float(f_ent.values),
        }
        class_value = float(class_only.values)
    else:
        class_value = float(loss.values)
    l2 = weight_l2(model)
    breakdown = LossBreakdown(
        class_loss=class_value,
        l2_weight_penalty=l2,
        total=class_value
        + cfg.l1_edge * terms["edge_l1"]
        + cfg.ent_edge * terms["edge_entropy"]
        + cfg.l1_feat * terms["feat_l1"]
        + cfg.ent_feat * terms["feat_entropy"]
        + cfg.l2_penalty * l2,
        **terms,
    )
    return loss, breakdown, fwd


class Adam:
    """Adam with bias correction; weight decay hits only the listed tensors."""

    def __init__(self, params: list[Tensor], lr: float, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0,
                 decay_params: list[Tensor] | None = None):
        self.params = list(params)
        self.lr = float(lr)
        self.beta1, self.beta2 = betas
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self._decay_ids = {id(t) for t in (decay_params or [])}
        self.step_count = 0
        self._m = [np.zeros_like(p.values) for p in self.params]
        self._v = [np.zeros_like(p.values) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        for i, p in enumerate(self.params):
            g = p.grad if p.grad is not None else np.zeros_like(p.values)
            if g.shape != p.values.shape:
                raise ValueError(
                    f"gradient shape {g.shape} does not match parameter shape {p.values.shape}"
                )
            if self.weight_decay and id(p) in self._decay_ids:
                g = g + self.weight_decay * p.values
            self._m[i] = self.beta1 * self._m[i] + (1.0 - self.beta1) * g
            self._v[i] = self.beta2 * self._v[i] + (1.0 - self.beta2) * g**2
            m_hat = self._m[i] / (1.0 - self.beta1**t)
            v_hat = self._v[i] / (1.0 - self.beta2**t)
            p.values = p.values - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def accuracy(logits: np.ndarray, labels: np.ndarray, mask: np.ndarray) -> float:
    mask = np.asarray(mask, dtype=np.intp)
    if mask.size == 0:
        return float("nan")
    pred = logits[mask].argmax(axis=1)
    return float((pred == labels[mask]).mean())


@dataclass
class EpochRow:
    epoch: int
    loss: LossBreakdown
    train_acc: float
    val_acc: float
    test_acc: float


@dataclass
class TrainReport:
    config: ModelConfig
    seed: int
    kind: str
    rows: list[EpochRow] = field(default_factory=list)
    final_train_acc: float = float("nan")
    final_val_acc: float = float("nan")
    final_test_acc: float = float("nan")
    wall_clock: float = 0.0

    def to_dict(self) -> dict:
        # wall-clock stays in memory only: serialized reports must be
        # byte-identical across reruns with the same seeds
        return {
            "config": self.config.to_dict(),
            "seed": self.seed,
            "kind": self.kind,
            "epochs": [
                {
                    "epoch": r.epoch,
                    **r.loss.as_dict(),
                    "train_acc": r.train_acc,
                    "val_acc": r.val_acc,
                    "test_acc": r.test_acc,
                }
                for r in self.rows
            ],
            "final": {
                "train_acc": self.final_train_acc,
                "val_acc": self.final_val_acc,
                "test_acc": self.final_test_acc,
            },
        }

    def metrics_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow([
            "epoch", "class_loss", "edge_l1", "edge_entropy", "feat_l1",
            "feat_entropy", "total", "train_acc", "val_acc",
        ])
        for r in self.rows:
            writer.writerow([
                r.epoch, repr(r.loss.class_loss), repr(r.loss.edge_l1),
                repr(r.loss.edge_entropy), repr(r.loss.feat_l1),
                repr(r.loss.feat_entropy), repr(r.loss.total),
                repr(r.train_acc), repr(r.val_acc),
            ])
        return buf.getvalue()


def save_report(report: TrainReport, json_path, csv_path=None) -> None:
    Path(json_path).write_text(json.dumps(report.to_dict(), sort_keys=True),
                               encoding="utf-8")
    if csv_path is not None:
        Path(csv_path).write_text(report.metrics_csv(), encoding="utf-8")


def _eval_accuracies(model: Model, graph: Graph, edge_feats=None, edge_types=None):
    fwd = model.forward(Tape(record=False), graph, training=False,
                        edge_feats=edge_feats, edge_types=edge_types)
    logits = fwd.logits.values
    return (
        accuracy(logits, graph.labels, graph.train_idx),
        accuracy(logits, graph.labels, graph.val_idx),
        accuracy(logits, graph.labels, graph.test_idx),
    )


def train(graph: Graph, config: ModelConfig, seed: int, kind: str = KIND_GISST,
          edge_feats: np.ndarray | None = None,
          edge_types: np.ndarray | None = None) -> tuple[Model, TrainReport]:
    """Full-batch training on the train mask for ``config.epochs`` epochs.

    The final model is simply the parameters after the last epoch.  Raises
    :class:`TrainingDivergedError` as soon as the loss stops being finite.
    """
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    num_edge_types = int(np.max(edge_types)) + 1 if edge_types is not None else None
    edge_feat_dim = edge_feats.shape[1] if edge_feats is not None else None
    model = build_model(config, graph.num_features, graph.num_classes, rng, kind=kind,
                        edge_feat_dim=edge_feat_dim, num_edge_types=num_edge_types)
    model.seed = seed
    opt = Adam(model.parameters(), lr=config.learning_rate,
               weight_decay=config.l2_penalty, decay_params=model.weights)
    report = TrainReport(config=config, seed=seed, kind=kind)
    for epoch in range(config.epochs):
        tape = Tape()
        loss, breakdown, _ = total_loss(tape, model, graph, training=True, rng=rng,
                                        edge_feats=edge_feats, edge_types=edge_types)
        if not np.isfinite(breakdown.total):
            raise TrainingDivergedError(
                f"non-finite loss at epoch {epoch}: {breakdown.as_dict()}"
            )
        opt.zero_grad()
        tape.backward(loss)
        opt.step()
        train_acc, val_acc, test_acc = _eval_accuracies(model, graph, edge_feats,
                                                        edge_types)
        report.rows.append(EpochRow(epoch, breakdown, train_acc, val_acc, test_acc))
    final = _eval_accuracies(model, graph, edge_feats, edge_types)
    report.final_train_acc, report.final_val_acc, report.final_test_acc = final
    report.wall_clock = time.perf_counter() - start
    return model, report


@dataclass
class GridResult:
    best_config: ModelConfig
    best_model: Model
    best_report: TrainReport
    reports: list[TrainReport]


def expand_grid(base: ModelConfig, grid: dict[str, list]) -> list[ModelConfig]:
    """All combinations, enumerated with sorted keys so the order (and the
    tie-break below) is deterministic."""
    if not grid:
        raise ValueError("grid must not be empty")
    keys = sorted(grid)
    configs = []
    for combo in product(*(grid[k] for k in keys)):
        configs.append(base.with_overrides(**dict(zip(keys, combo))))
    return configs


def grid_search(graph: Graph, grid: dict[str, list], seed: int,
                base: ModelConfig | None = None, kind: str = KIND_GISST) -> GridResult:
    """Train every grid combination; pick by final validation accuracy, then
    lower final total loss, then enumeration order."""
    base = base or ModelConfig()
    configs = expand_grid(base, grid)
    best = None
    reports = []
    for idx, config in enumerate(configs):
        model, report = train(graph, config, seed, kind=kind)
        reports.append(report)
        final_total = report.rows[-1].loss.total if report.rows else float("inf")
        key = (-report.final_val_acc, final_total, idx)
        if best is None or key < best[0]:
            best = (key, config, model, report)
    _, best_config, best_model, best_report = best
    return GridResult(best_config, best_model, best_report, reports)
