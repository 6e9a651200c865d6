"""Command-line pipelines: generate, train, explain, evaluate.

Every command is deterministic given its flags and seeds, and every run
directory gets a ``manifest.json`` recording the tool version, the effective
configuration, and a sha256 per output file, so two runs with the same seeds
can be compared byte for byte.  ``GISST_OUT_ROOT`` supplies a default root
for relative output paths.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from importlib import metadata
from pathlib import Path

import numpy as np

from .explain import (
    METHOD_MASK_OPT,
    METHODS,
    MaskOptConfig,
    eval_rows_csv,
    evaluate_explanations,
    explanation_from_dict,
    explanation_to_dict,
    extract_subgraph,
    median_group,
    node_explanations,
    save_explanation,
    to_dot,
)
from .graph import (
    DATASET_KINDS,
    Dataset,
    DatasetSpec,
    generate,
    load_dataset,
    save_dataset,
)
from .model import KIND_GCN, KIND_GISST, ModelConfig, load_checkpoint, save_checkpoint
from .train import TrainingDivergedError, save_report, train

ENV_OUT_ROOT = "GISST_OUT_ROOT"

_MODEL_KIND_FOR_METHOD = {
    "gisst-grad": KIND_GISST,
    "gisst-global": KIND_GISST,
    "grad": KIND_GCN,
    "mask-opt": KIND_GCN,
}


def _version() -> str:
    try:
        return metadata.version("gisst")
    except metadata.PackageNotFoundError:
        return "unknown"


def _resolve_out(path: str | Path) -> Path:
    path = Path(path)
    root = os.environ.get(ENV_OUT_ROOT)
    if root and not path.is_absolute():
        return Path(root) / path
    return path


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with path.open("rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir: Path, command: str, config: dict) -> Path:
    """Hash everything in the run directory; no timestamps, so reruns with the
    same seeds produce identical manifests."""
    outputs = {}
    for path in sorted(out_dir.rglob("*")):
        if path.is_dir() or path.name == "manifest.json":
            continue
        rel = path.relative_to(out_dir).as_posix()
        outputs[rel] = {"sha256": _sha256(path), "bytes": path.stat().st_size}
    doc = {
        "tool": {"name": "gisst", "version": _version()},
        "command": command,
        "config": config,
        "outputs": outputs,
    }
    manifest = out_dir / "manifest.json"
    manifest.write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n",
                        encoding="utf-8")
    return manifest


# --- run configuration ------------------------------------------------------------


@dataclass
class RunConfig:
    """One end-to-end reproduction run: data, model, methods, destination."""

    dataset_kind: str
    data_seed: int
    train_seed: int
    model: ModelConfig = field(default_factory=ModelConfig)
    dataset_params: dict = field(default_factory=dict)
    methods: list = field(default_factory=lambda: ["gisst-grad", "grad"])
    out_dir: str = "run"
    min_nodes: int | None = None
    top_k: int = 40

    def __post_init__(self):
        if self.dataset_kind not in DATASET_KINDS:
            raise ValueError(f"unknown dataset kind: {self.dataset_kind!r}")
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ValueError(f"unknown methods: {bad}")

    def to_dict(self) -> dict:
        return {
            "dataset_kind": self.dataset_kind,
            "data_seed": self.data_seed,
            "train_seed": self.train_seed,
            "model": self.model.to_dict(),
            "dataset_params": dict(self.dataset_params),
            "methods": list(self.methods),
            "out_dir": self.out_dir,
            "min_nodes": self.min_nodes,
            "top_k": self.top_k,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        known = {
            "dataset_kind", "data_seed", "train_seed", "model", "dataset_params",
            "methods", "out_dir", "min_nodes", "top_k",
        }
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown run config keys: {sorted(unknown)}")
        doc = dict(doc)
        model = ModelConfig.from_dict(doc.pop("model", {}))
        return cls(model=model, **doc)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        return cls.from_dict(json.loads(text))


# --- subcommands ---------------------------------------------------------------------


def _parse_param(item: str):
    key, _, raw = item.partition("=")
    if not _:
        raise argparse.ArgumentTypeError(f"expected key=value, got {item!r}")
    try:
        value = int(raw)
    except ValueError:
        try:
            value = float(raw)
        except ValueError:
            raise argparse.ArgumentTypeError(f"non-numeric param value: {item!r}")
    return key, value


def cmd_generate(args) -> int:
    spec = DatasetSpec(args.kind, args.seed, dict(args.param or []))
    ds = generate(spec)
    out = _resolve_out(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(ds, out)
    print(f"wrote {out} ({ds.graph.num_nodes} nodes, {ds.graph.num_undirected} edges)")
    return 0


def _config_from_args(args) -> ModelConfig:
    mapping = {
        "hidden_units": args.hidden_units,
        "num_layers": args.num_layers,
        "dropout_rate": args.dropout_rate,
        "learning_rate": args.learning_rate,
        "l2_penalty": args.l2_penalty,
        "l1_edge": args.edge_l1,
        "ent_edge": args.edge_entropy,
        "l1_feat": args.feat_l1,
        "ent_feat": args.feat_entropy,
        "epochs": args.epochs,
    }
    return ModelConfig(**mapping)


def cmd_train(args) -> int:
    ds = load_dataset(args.dataset)
    config = _config_from_args(args)
    out_dir = _resolve_out(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    model, report = train(ds.graph, config, args.seed, kind=args.kind)
    save_checkpoint(model, out_dir / "checkpoint.json")
    save_report(report, out_dir / "report.json", out_dir / "metrics.csv")
    write_manifest(out_dir, "train",
                   {"dataset": str(args.dataset), "seed": args.seed,
                    "kind": args.kind, "model": config.to_dict()})
    print(f"trained {args.kind} for {config.epochs} epochs: "
          f"test accuracy {report.final_test_acc:.3f} -> {out_dir}")
    return 0


def _motif_test_targets(ds: Dataset) -> list[int]:
    motif = {int(n) for m in ds.ground_truth.motif_nodes for n in m}
    return [int(n) for n in ds.graph.test_idx if int(n) in motif]


def cmd_explain(args) -> int:
    ds = load_dataset(args.dataset)
    model = load_checkpoint(args.checkpoint)
    out_dir = _resolve_out(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.all_test_motifs:
        targets = _motif_test_targets(ds)
        if not targets:
            raise ValueError("no motif nodes in the test set")
    else:
        targets = [int(t) for t in args.target]

    from .explain import explain as explain_one

    mask_opt = MaskOptConfig()
    written = []
    if args.group:
        if args.method == METHOD_MASK_OPT:
            parts = [explain_one(model, ds.graph, t, args.method, mask_opt=mask_opt)
                     for t in targets]
            expl = median_group(parts)
        else:
            expl = explain_one(model, ds.graph, targets, args.method)
        written.append((f"{args.method}_group", expl))
    else:
        for t in targets:
            expl = explain_one(model, ds.graph, t, args.method, mask_opt=mask_opt)
            written.append((f"{args.method}_{t}", expl))

    for stem, expl in written:
        save_explanation(expl, out_dir / f"{stem}.json")
        if args.dot:
            extraction = None
            if expl.edge_scores:
                extraction = extract_subgraph(
                    expl.edge_scores,
                    args.min_nodes or ds.ground_truth.motif_size,
                )
            (out_dir / f"{stem}.dot").write_text(
                to_dot(expl,
                       extracted=extraction.edges if extraction else set(),
                       important=ds.ground_truth.important_edges),
                encoding="utf-8",
            )
    write_manifest(out_dir, "explain",
                   {"dataset": str(args.dataset), "checkpoint": str(args.checkpoint),
                    "method": args.method, "targets": targets, "group": args.group})
    print(f"wrote {len(written)} explanation(s) to {out_dir}")
    return 0


def _explain_chunk(checkpoint_doc, dataset_doc, method, nodes, mask_opt_doc):
    """Worker entry for parallel explanation fan-out."""
    from .graph import dataset_from_dict
    from .model import checkpoint_from_dict

    model = checkpoint_from_dict(checkpoint_doc)
    ds = dataset_from_dict(dataset_doc)
    mask_opt = MaskOptConfig(**mask_opt_doc)
    out = node_explanations(model, ds.graph, nodes, method, mask_opt=mask_opt)
    return [(n, explanation_to_dict(e)) for n, e in sorted(out.items())]


def _explanations_for(models, ds, method, nodes, parallel, mask_opt):
    if parallel <= 1 or len(nodes) < 2:
        return node_explanations(models[_MODEL_KIND_FOR_METHOD[method]], ds.graph,
                                 nodes, method, mask_opt=mask_opt)
    from .graph import dataset_to_dict
    from .model import checkpoint_to_dict

    checkpoint_doc = checkpoint_to_dict(models[_MODEL_KIND_FOR_METHOD[method]])
    dataset_doc = dataset_to_dict(ds)
    chunks = [list(map(int, chunk)) for chunk in np.array_split(nodes, parallel)]
    merged = {}
    with ProcessPoolExecutor(max_workers=parallel) as pool:
        futures = [
            pool.submit(_explain_chunk, checkpoint_doc, dataset_doc, method, chunk,
                        mask_opt.__dict__)
            for chunk in chunks if chunk
        ]
        for future in futures:
            for node, doc in future.result():
                merged[int(node)] = explanation_from_dict(doc)
    return merged


def _evaluate_models(ds, models, methods, top_k, min_nodes, parallel):
    mask_opt = MaskOptConfig()
    per_method = {}
    for method in methods:
        kind = _MODEL_KIND_FOR_METHOD[method]
        if models.get(kind) is None:
            raise ValueError(f"method {method!r} needs a {kind!r} checkpoint")
        per_method[method] = _explanations_for(models, ds, method,
                                               [int(n) for n in ds.graph.test_idx],
                                               parallel, mask_opt)
    return evaluate_explanations(ds, per_method, top_k=top_k, min_nodes=min_nodes)


def _evaluate_from_dir(ds, explanations_dir: Path, top_k, min_nodes):
    per_method: dict[str, dict] = {}
    for path in sorted(explanations_dir.glob("*.json")):
        if path.name == "manifest.json":
            continue
        doc = json.loads(path.read_text(encoding="utf-8"))
        expl = explanation_from_dict(doc)
        if isinstance(expl.target, tuple):
            continue  # group summaries have no per-node metrics
        per_method.setdefault(expl.method, {})[int(expl.target)] = expl
    if not per_method:
        raise ValueError(f"no explanation files found in {explanations_dir}")
    return evaluate_explanations(ds, per_method, top_k=top_k, min_nodes=min_nodes)


def _run_pipeline(run: RunConfig, out_dir: Path, parallel: int) -> list:
    out_dir.mkdir(parents=True, exist_ok=True)
    ds = generate(DatasetSpec(run.dataset_kind, run.data_seed, run.dataset_params))
    save_dataset(ds, out_dir / "dataset.json")

    needed = {_MODEL_KIND_FOR_METHOD[m] for m in run.methods}
    models = {}
    for kind in sorted(needed):
        model, report = train(ds.graph, run.model, run.train_seed, kind=kind)
        models[kind] = model
        save_checkpoint(model, out_dir / f"checkpoint_{kind}.json")
        save_report(report, out_dir / f"report_{kind}.json",
                    out_dir / f"metrics_{kind}.csv")
    rows = _evaluate_models(ds, models, run.methods, run.top_k, run.min_nodes,
                            parallel)
    (out_dir / "metrics.csv").write_text(eval_rows_csv(rows), encoding="utf-8")
    return rows


def cmd_evaluate(args) -> int:
    top_k, min_nodes = args.top_k, args.min_nodes
    if args.config:
        run = RunConfig.from_json(Path(args.config).read_text(encoding="utf-8"))
        out_dir = _resolve_out(args.out or run.out_dir)
        rows = _run_pipeline(run, out_dir, args.parallel)
        write_manifest(out_dir, "evaluate", run.to_dict())
    elif args.explanations:
        if not args.dataset:
            raise ValueError("--explanations requires --dataset")
        ds = load_dataset(args.dataset)
        rows = _evaluate_from_dir(ds, Path(args.explanations), top_k, min_nodes)
        out_dir = _resolve_out(args.out or "evaluation")
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "metrics.csv").write_text(eval_rows_csv(rows), encoding="utf-8")
        write_manifest(out_dir, "evaluate",
                       {"explanations": str(args.explanations),
                        "dataset": str(args.dataset)})
    else:
        if not args.dataset or not args.methods:
            raise ValueError("need --config, --explanations, or --dataset with --methods")
        ds = load_dataset(args.dataset)
        models = {}
        if args.gisst_checkpoint:
            models[KIND_GISST] = load_checkpoint(args.gisst_checkpoint)
        if args.gcn_checkpoint:
            models[KIND_GCN] = load_checkpoint(args.gcn_checkpoint)
        methods = args.methods.split(",") if args.methods else []
        rows = _evaluate_models(ds, models, methods, top_k, min_nodes, args.parallel)
        out_dir = _resolve_out(args.out or "evaluation")
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "metrics.csv").write_text(eval_rows_csv(rows), encoding="utf-8")
        write_manifest(out_dir, "evaluate",
                       {"dataset": str(args.dataset), "methods": methods})
    for row in rows:
        print(f"{row.dataset},{row.method},{row.metric},{row.mean:.4f},{row.n}")
    return 0


# --- parser -----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gisst",
        description="Train sparse-interpretability GNNs on motif benchmarks and "
                    "score their explanations.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_gen = sub.add_parser("generate", help="write a synthetic benchmark dataset")
    p_gen.add_argument("--kind", required=True, choices=DATASET_KINDS)
    p_gen.add_argument("--seed", required=True, type=int)
    p_gen.add_argument("-o", "--output", required=True)
    p_gen.add_argument("--param", action="append", type=_parse_param, metavar="KEY=VALUE",
                       help="override a generation parameter (repeatable)")
    p_gen.set_defaults(func=cmd_generate)

    p_train = sub.add_parser("train", help="train a model on a dataset file")
    p_train.add_argument("--dataset", required=True)
    p_train.add_argument("--seed", required=True, type=int)
    p_train.add_argument("--out", required=True)
    p_train.add_argument("--kind", choices=(KIND_GISST, KIND_GCN), default=KIND_GISST)
    p_train.add_argument("--hidden-units", type=int, default=32)
    p_train.add_argument("--num-layers", type=int, default=3)
    p_train.add_argument("--dropout-rate", type=float, default=0.1)
    p_train.add_argument("--learning-rate", type=float, default=0.005)
    p_train.add_argument("--l2-penalty", type=float, default=0.0005)
    p_train.add_argument("--edge-l1", type=float, default=0.005)
    p_train.add_argument("--edge-entropy", type=float, default=0.01)
    p_train.add_argument("--feat-l1", type=float, default=0.0005)
    p_train.add_argument("--feat-entropy", type=float, default=0.001)
    p_train.add_argument("--epochs", type=int, default=1000)
    p_train.set_defaults(func=cmd_train)

    p_exp = sub.add_parser("explain", help="score edges/features for target nodes")
    p_exp.add_argument("--checkpoint", required=True)
    p_exp.add_argument("--dataset", required=True)
    p_exp.add_argument("--method", required=True, choices=METHODS)
    group = p_exp.add_mutually_exclusive_group(required=True)
    group.add_argument("--target", nargs="+", type=int)
    group.add_argument("--all-test-motifs", action="store_true")
    p_exp.add_argument("--group", action="store_true",
                       help="aggregate the targets into one explanation")
    p_exp.add_argument("--out", required=True)
    p_exp.add_argument("--dot", action="store_true", help="also write DOT files")
    p_exp.add_argument("--min-nodes", type=int, default=None)
    p_exp.set_defaults(func=cmd_explain)

    p_eval = sub.add_parser("evaluate", help="compute explanation precision metrics")
    p_eval.add_argument("--config", help="run-config JSON for the end-to-end pipeline")
    p_eval.add_argument("--explanations", help="directory of explanation JSON files")
    p_eval.add_argument("--dataset")
    p_eval.add_argument("--gisst-checkpoint")
    p_eval.add_argument("--gcn-checkpoint")
    p_eval.add_argument("--methods", help="comma-separated method list")
    p_eval.add_argument("--out")
    p_eval.add_argument("--top-k", type=int, default=40)
    p_eval.add_argument("--min-nodes", type=int, default=None)
    p_eval.add_argument("--parallel", type=int, default=1,
                        help="fan explanation targets across N processes")
    p_eval.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError, KeyError, TrainingDivergedError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
