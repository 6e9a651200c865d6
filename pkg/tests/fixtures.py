"""Small hand-built graphs shared across the model/train/explain tests."""

from __future__ import annotations

import numpy as np

from gisst.graph import Graph


def make_graph(num_nodes, pairs, features=None, labels=None, train=None, val=None,
               test=None):
    pairs = np.array(sorted(set(map(tuple, pairs))), dtype=np.int64).reshape(-1, 2)
    if features is None:
        features = np.zeros((num_nodes, 3))
    features = np.asarray(features, dtype=np.float64)
    if labels is None:
        labels = np.zeros(num_nodes, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    train = np.arange(num_nodes) if train is None else np.asarray(train, dtype=np.int64)
    val = np.array([], dtype=np.int64) if val is None else np.asarray(val, dtype=np.int64)
    test = np.array([], dtype=np.int64) if test is None else np.asarray(test, dtype=np.int64)
    return Graph(num_nodes, pairs, features, labels, train, val, test)


def random_graph(rng, num_nodes, num_edges, num_feats, num_classes):
    pairs = set()
    while len(pairs) < num_edges:
        u, v = rng.integers(0, num_nodes, size=2)
        if u != v:
            pairs.add((min(int(u), int(v)), max(int(u), int(v))))
    feats = rng.normal(size=(num_nodes, num_feats))
    labels = rng.integers(0, num_classes, size=num_nodes)
    return make_graph(num_nodes, pairs, feats, labels)


def dense_gcn_oracle(weight_values, x, src, dst, edge_w, num_nodes):
    """Explicit dense normalized propagation: D^{-1/2} (A_w + I) D^{-1/2} H W."""
    a = np.zeros((num_nodes, num_nodes))
    for s, d, w in zip(src, dst, edge_w):
        a[d, s] += w
    a = a + np.eye(num_nodes)
    inv_sqrt = 1.0 / np.sqrt(a.sum(axis=1))
    a_hat = inv_sqrt[:, None] * a * inv_sqrt[None, :]
    h = x
    for i, w in enumerate(weight_values):
        h = a_hat @ h @ w
        if i < len(weight_values) - 1:
            h = np.maximum(h, 0.0)
    return h
