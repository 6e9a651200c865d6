"""Graph data model, noisy synthetic benchmarks, and k-hop subgraph extraction.

Each synthetic dataset plants structural motifs (houses, cycles, grids) on a
noisy base graph and annotates which edges and feature columns are the ground
truth for explanation scoring.  Node features carry the class signal: the
important block is drawn around per-class means spaced one unit apart, the
unimportant block from one shared distribution.

All generators are pure functions of (parameters, seed).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import networkx as nx
import numpy as np

NUM_IMPORTANT_FEATURES = 40
NUM_UNIMPORTANT_FEATURES = 10

KIND_BA_HOUSE = "noisy-ba-house"
KIND_BA_COMMUNITY = "noisy-ba-community"
KIND_TREE_CYCLE = "noisy-tree-cycle"
KIND_TREE_GRID = "noisy-tree-grid"

DATASET_KINDS = (KIND_BA_HOUSE, KIND_BA_COMMUNITY, KIND_TREE_CYCLE, KIND_TREE_GRID)

# house template: node 0 = top (class 1), 1..2 = middle (class 2),
# 3..4 = bottom (class 3); two roof edges plus a 4-cycle.
_HOUSE_EDGES = ((0, 1), (0, 2), (1, 2), (1, 3), (2, 4), (3, 4))
_HOUSE_LABELS = (1, 2, 2, 3, 3)


def _as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def _norm_edge(u: int, v: int) -> tuple[int, int]:
    return (u, v) if u < v else (v, u)


@dataclass(eq=False)
class Graph:
    """Undirected graph stored as sorted (u, v) pairs with u < v.

    The directed edge list used by message passing materializes each pair in
    both orientations: forward block first, reversed block second, so the
    undirected index of directed edge ``i`` is ``i % num_undirected``.
    """

    num_nodes: int
    edge_pairs: np.ndarray  # (U, 2) int64, lexicographically sorted
    features: np.ndarray  # (N, d) float64
    labels: np.ndarray  # (N,) int64
    train_idx: np.ndarray
    val_idx: np.ndarray
    test_idx: np.ndarray
    _adjacency: list[np.ndarray] | None = field(default=None, repr=False)

    @property
    def num_undirected(self) -> int:
        return len(self.edge_pairs)

    @property
    def num_directed(self) -> int:
        return 2 * len(self.edge_pairs)

    @property
    def num_features(self) -> int:
        return self.features.shape[1]

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1

    def directed_edges(self) -> tuple[np.ndarray, np.ndarray]:
        """(src, dst) arrays of length ``2 * num_undirected``."""
        u, v = self.edge_pairs[:, 0], self.edge_pairs[:, 1]
        return np.concatenate([u, v]), np.concatenate([v, u])

    def adjacency(self) -> list[np.ndarray]:
        if self._adjacency is None:
            buckets: list[list[int]] = [[] for _ in range(self.num_nodes)]
            for u, v in self.edge_pairs:
                buckets[u].append(int(v))
                buckets[v].append(int(u))
            self._adjacency = [np.array(sorted(b), dtype=np.int64) for b in buckets]
        return self._adjacency

    def __eq__(self, other) -> bool:
        if not isinstance(other, Graph):
            return NotImplemented
        return (
            self.num_nodes == other.num_nodes
            and np.array_equal(self.edge_pairs, other.edge_pairs)
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.train_idx, other.train_idx)
            and np.array_equal(self.val_idx, other.val_idx)
            and np.array_equal(self.test_idx, other.test_idx)
        )


@dataclass(eq=True, frozen=True)
class GroundTruth:
    """Which edges/features/nodes count as explanation targets."""

    important_edges: frozenset  # of (u, v) tuples, u < v
    important_features: frozenset  # of column indices
    motif_nodes: tuple  # tuple of per-motif node-id tuples
    motif_size: int


@dataclass
class DatasetSpec:
    kind: str
    seed: int
    params: dict = field(default_factory=dict)

    def resolved_params(self) -> dict:
        merged = dict(default_params(self.kind))
        unknown = set(self.params) - set(merged)
        if unknown:
            raise ValueError(f"unknown generation params for {self.kind}: {sorted(unknown)}")
        merged.update(self.params)
        return merged


@dataclass(eq=True)
class Dataset:
    graph: Graph
    ground_truth: GroundTruth
    spec: DatasetSpec


def default_params(kind: str) -> dict:
    base = {
        "num_motifs": 80,
        "perturb_frac": 0.1,
        "num_important": NUM_IMPORTANT_FEATURES,
        "num_unimportant": NUM_UNIMPORTANT_FEATURES,
    }
    if kind == KIND_BA_HOUSE:
        return {**base, "num_base": 300, "ba_m": 5, "sigma": 0.15}
    if kind == KIND_BA_COMMUNITY:
        return {**base, "num_base": 300, "ba_m": 5, "sigma": 0.15, "join_frac": 0.01}
    if kind == KIND_TREE_CYCLE:
        return {**base, "depth": 8, "cycle_size": 6, "sigma": 0.5}
    if kind == KIND_TREE_GRID:
        return {**base, "depth": 8, "grid_side": 3, "sigma": 0.5}
    raise ValueError(f"unknown dataset kind: {kind!r} (expected one of {DATASET_KINDS})")


# --- feature generation and splits -------------------------------------------


def generate_features(labels, num_important=NUM_IMPORTANT_FEATURES,
                      num_unimportant=NUM_UNIMPORTANT_FEATURES, sigma=0.15, seed=0):
    """Per-class Gaussian features: important columns have class mean ``c``
    (unit spacing between classes), unimportant columns share mean 0."""
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    rng = _as_rng(seed)
    labels = np.asarray(labels, dtype=np.int64)
    n = labels.size
    x = np.empty((n, num_important + num_unimportant))
    x[:, :num_important] = labels[:, None] + rng.normal(0.0, sigma, size=(n, num_important))
    x[:, num_important:] = rng.normal(0.0, sigma, size=(n, num_unimportant))
    return x


def split_masks(num_nodes: int, seed=0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """80/10/10 train/val/test partition from a seeded permutation."""
    if num_nodes < 10:
        raise ValueError(f"need at least 10 nodes to split, got {num_nodes}")
    rng = _as_rng(seed)
    perm = rng.permutation(num_nodes)
    n_train = int(0.8 * num_nodes)
    n_val = int(0.1 * num_nodes)
    train = np.sort(perm[:n_train])
    val = np.sort(perm[n_train:n_train + n_val])
    test = np.sort(perm[n_train + n_val:])
    return train, val, test


# --- topology builders --------------------------------------------------------


def _add_motifs(rng, edges, labels, template_edges, motif_labels, num_motifs,
                num_anchor_nodes):
    """Attach ``num_motifs`` copies of a motif template, each by a single edge
    from a random pre-existing node to a random motif node."""
    important = set()
    motif_nodes = []
    next_id = len(labels)
    for _ in range(num_motifs):
        ids = list(range(next_id, next_id + len(motif_labels)))
        next_id += len(motif_labels)
        labels.extend(motif_labels)
        for a, b in template_edges:
            e = _norm_edge(ids[a], ids[b])
            edges.add(e)
            important.add(e)
        anchor = int(rng.integers(num_anchor_nodes))
        attach = ids[int(rng.integers(len(ids)))]
        edges.add(_norm_edge(anchor, attach))
        motif_nodes.append(tuple(ids))
    return important, motif_nodes


def _add_random_edges(rng, edges, num_nodes, count, u_range=None, v_range=None):
    """Add ``count`` fresh random undirected edges (no self-loops, no duplicates)."""
    u_lo, u_hi = u_range or (0, num_nodes)
    v_lo, v_hi = v_range or (0, num_nodes)
    added = 0
    while added < count:
        u = int(rng.integers(u_lo, u_hi))
        v = int(rng.integers(v_lo, v_hi))
        if u == v:
            continue
        e = _norm_edge(u, v)
        if e in edges:
            continue
        edges.add(e)
        added += 1


def _ba_house_topology(rng, num_base, num_motifs, ba_m, perturb_frac):
    base_seed = int(rng.integers(0, 2**32))
    base = nx.barabasi_albert_graph(num_base, ba_m, seed=base_seed)
    edges = {_norm_edge(u, v) for u, v in base.edges()}
    labels = [0] * num_base
    important, motif_nodes = _add_motifs(
        rng, edges, labels, _HOUSE_EDGES, _HOUSE_LABELS, num_motifs, num_base
    )
    n = len(labels)
    _add_random_edges(rng, edges, n, int(perturb_frac * n))
    return n, edges, labels, important, motif_nodes


def _tree_topology(depth):
    n = 2**depth - 1
    edges = set()
    for i in range((n - 1) // 2):
        edges.add((i, 2 * i + 1))
        edges.add((i, 2 * i + 2))
    return n, edges


def _cycle_template(size):
    return tuple((i, (i + 1) % size) for i in range(size))


def _grid_template(side):
    edges = []
    for r in range(side):
        for c in range(side):
            if c + 1 < side:
                edges.append((r * side + c, r * side + c + 1))
            if r + 1 < side:
                edges.append((r * side + c, (r + 1) * side + c))
    return tuple(edges)


def _finish_dataset(rng, n, edges, labels, important, motif_nodes, motif_size,
                    sigma, num_important, num_unimportant):
    labels = np.asarray(labels, dtype=np.int64)
    features = generate_features(labels, num_important, num_unimportant, sigma, rng)
    train, val, test = split_masks(n, rng)
    pairs = np.array(sorted(edges), dtype=np.int64).reshape(-1, 2)
    graph = Graph(n, pairs, features, labels, train, val, test)
    truth = GroundTruth(
        important_edges=frozenset(important),
        important_features=frozenset(range(num_important)),
        motif_nodes=tuple(motif_nodes),
        motif_size=motif_size,
    )
    return graph, truth


def generate_ba_house(seed, num_base=300, num_motifs=80, ba_m=5, perturb_frac=0.1,
                      sigma=0.15, num_important=NUM_IMPORTANT_FEATURES,
                      num_unimportant=NUM_UNIMPORTANT_FEATURES):
    """Preferential-attachment base graph with house motifs; 4 classes."""
    rng = _as_rng(seed)
    n, edges, labels, important, motif_nodes = _ba_house_topology(
        rng, num_base, num_motifs, ba_m, perturb_frac
    )
    return _finish_dataset(rng, n, edges, labels, important, motif_nodes, 5,
                           sigma, num_important, num_unimportant)


def generate_ba_community(seed, num_base=300, num_motifs=80, ba_m=5, perturb_frac=0.1,
                          join_frac=0.01, sigma=0.15,
                          num_important=NUM_IMPORTANT_FEATURES,
                          num_unimportant=NUM_UNIMPORTANT_FEATURES):
    """Two house-motif graphs joined by random edges; 8 classes by membership."""
    rng = _as_rng(seed)
    n1, edges1, labels1, imp1, motifs1 = _ba_house_topology(
        rng, num_base, num_motifs, ba_m, perturb_frac
    )
    n2, edges2, labels2, imp2, motifs2 = _ba_house_topology(
        rng, num_base, num_motifs, ba_m, perturb_frac
    )
    n = n1 + n2
    edges = set(edges1)
    edges.update(_norm_edge(u + n1, v + n1) for u, v in edges2)
    labels = list(labels1) + [c + 4 for c in labels2]
    important = set(imp1)
    important.update(_norm_edge(u + n1, v + n1) for u, v in imp2)
    motif_nodes = list(motifs1) + [tuple(i + n1 for i in m) for m in motifs2]
    _add_random_edges(rng, edges, n, int(join_frac * n),
                      u_range=(0, n1), v_range=(n1, n))
    return _finish_dataset(rng, n, edges, labels, important, motif_nodes, 5,
                           sigma, num_important, num_unimportant)


def generate_tree_cycle(seed, depth=8, num_motifs=80, cycle_size=6, perturb_frac=0.1,
                        sigma=0.5, num_important=NUM_IMPORTANT_FEATURES,
                        num_unimportant=NUM_UNIMPORTANT_FEATURES):
    """Balanced binary tree with attached cycle motifs; binary classes."""
    rng = _as_rng(seed)
    num_tree, edges = _tree_topology(depth)
    labels = [0] * num_tree
    important, motif_nodes = _add_motifs(
        rng, edges, labels, _cycle_template(cycle_size), (1,) * cycle_size,
        num_motifs, num_tree,
    )
    n = len(labels)
    _add_random_edges(rng, edges, n, int(perturb_frac * n))
    return _finish_dataset(rng, n, edges, labels, important, motif_nodes, cycle_size,
                           sigma, num_important, num_unimportant)


def generate_tree_grid(seed, depth=8, num_motifs=80, grid_side=3, perturb_frac=0.1,
                       sigma=0.5, num_important=NUM_IMPORTANT_FEATURES,
                       num_unimportant=NUM_UNIMPORTANT_FEATURES):
    """Balanced binary tree with attached square-grid motifs; binary classes."""
    rng = _as_rng(seed)
    num_tree, edges = _tree_topology(depth)
    labels = [0] * num_tree
    template = _grid_template(grid_side)
    size = grid_side * grid_side
    important, motif_nodes = _add_motifs(
        rng, edges, labels, template, (1,) * size, num_motifs, num_tree
    )
    n = len(labels)
    _add_random_edges(rng, edges, n, int(perturb_frac * n))
    return _finish_dataset(rng, n, edges, labels, important, motif_nodes, size,
                           sigma, num_important, num_unimportant)


_GENERATORS = {
    KIND_BA_HOUSE: generate_ba_house,
    KIND_BA_COMMUNITY: generate_ba_community,
    KIND_TREE_CYCLE: generate_tree_cycle,
    KIND_TREE_GRID: generate_tree_grid,
}


def generate(spec: DatasetSpec) -> Dataset:
    """Build the dataset a spec describes; deterministic in (kind, seed, params)."""
    params = spec.resolved_params()
    graph, truth = _GENERATORS[spec.kind](spec.seed, **params)
    return Dataset(graph, truth, DatasetSpec(spec.kind, spec.seed, params))


# --- k-hop computation subgraphs -----------------------------------------------


@dataclass
class Subgraph:
    """Induced subgraph of everything within ``k`` undirected hops of a target."""

    target: int
    nodes: np.ndarray  # sorted original node ids
    edge_idx: np.ndarray  # indices into the parent graph's edge_pairs
    edge_pairs: np.ndarray  # (m, 2) original node ids

    @property
    def num_nodes(self) -> int:
        return len(self.nodes)

    def pair_set(self) -> set:
        return {(int(u), int(v)) for u, v in self.edge_pairs}


def k_hop_subgraph(graph: Graph, node: int, k: int) -> Subgraph:
    """BFS out to distance ``k`` and keep the induced subgraph."""
    if not 0 <= node < graph.num_nodes:
        raise IndexError(f"node {node} out of range [0, {graph.num_nodes})")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    adj = graph.adjacency()
    seen = {node}
    frontier = [node]
    for _ in range(k):
        nxt = []
        for u in frontier:
            for v in adj[u]:
                v = int(v)
                if v not in seen:
                    seen.add(v)
                    nxt.append(v)
        if not nxt:
            break
        frontier = nxt
    nodes = np.array(sorted(seen), dtype=np.int64)
    inside = np.isin(graph.edge_pairs[:, 0], nodes) & np.isin(graph.edge_pairs[:, 1], nodes)
    edge_idx = np.flatnonzero(inside)
    return Subgraph(node, nodes, edge_idx, graph.edge_pairs[edge_idx])


def k_hop_union(graph: Graph, targets, k: int) -> Subgraph:
    """Union of the k-hop subgraphs of several targets (group explanations)."""
    targets = [int(t) for t in np.atleast_1d(targets)]
    seen: set[int] = set()
    for t in targets:
        seen.update(int(n) for n in k_hop_subgraph(graph, t, k).nodes)
    nodes = np.array(sorted(seen), dtype=np.int64)
    inside = np.isin(graph.edge_pairs[:, 0], nodes) & np.isin(graph.edge_pairs[:, 1], nodes)
    edge_idx = np.flatnonzero(inside)
    return Subgraph(targets[0], nodes, edge_idx, graph.edge_pairs[edge_idx])


# --- serialization --------------------------------------------------------------


def dataset_to_dict(ds: Dataset) -> dict:
    g, t = ds.graph, ds.ground_truth
    return {
        "num_nodes": g.num_nodes,
        "edges": [[int(u), int(v)] for u, v in g.edge_pairs],
        "features": {
            "dims": [int(d) for d in g.features.shape],
            "data": [float(x) for x in g.features.ravel()],
        },
        "labels": [int(c) for c in g.labels],
        "masks": {
            "train": [int(i) for i in g.train_idx],
            "val": [int(i) for i in g.val_idx],
            "test": [int(i) for i in g.test_idx],
        },
        "ground_truth": {
            "important_edges": sorted([int(u), int(v)] for u, v in t.important_edges),
            "important_features": sorted(int(i) for i in t.important_features),
            "motif_nodes": [[int(i) for i in m] for m in t.motif_nodes],
            "motif_size": t.motif_size,
        },
        "spec": {"kind": ds.spec.kind, "seed": ds.spec.seed, "params": ds.spec.params},
    }


def dataset_from_dict(doc: dict) -> Dataset:
    dims = doc["features"]["dims"]
    features = np.array(doc["features"]["data"], dtype=np.float64).reshape(dims)
    graph = Graph(
        num_nodes=int(doc["num_nodes"]),
        edge_pairs=np.array(doc["edges"], dtype=np.int64).reshape(-1, 2),
        features=features,
        labels=np.array(doc["labels"], dtype=np.int64),
        train_idx=np.array(doc["masks"]["train"], dtype=np.int64),
        val_idx=np.array(doc["masks"]["val"], dtype=np.int64),
        test_idx=np.array(doc["masks"]["test"], dtype=np.int64),
    )
    gt = doc["ground_truth"]
    truth = GroundTruth(
        important_edges=frozenset((int(u), int(v)) for u, v in gt["important_edges"]),
        important_features=frozenset(int(i) for i in gt["important_features"]),
        motif_nodes=tuple(tuple(int(i) for i in m) for m in gt["motif_nodes"]),
        motif_size=int(gt["motif_size"]),
    )
    spec = DatasetSpec(doc["spec"]["kind"], int(doc["spec"]["seed"]), dict(doc["spec"]["params"]))
    return Dataset(graph, truth, spec)


def save_dataset(ds: Dataset, path) -> None:
    Path(path).write_text(json.dumps(dataset_to_dict(ds), sort_keys=True), encoding="utf-8")


def load_dataset(path) -> Dataset:
    return dataset_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
