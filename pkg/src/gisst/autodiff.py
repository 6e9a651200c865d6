"""Reverse-mode automatic differentiation on dense float64 arrays.

A :class:`Tape` records every differentiable operation in execution order;
``backward()`` replays the records once, in reverse, accumulating gradients
into every reachable tensor that has ``requires_grad`` set.  The op set is
deliberately small: just enough to express a degree-normalized graph
convolution stack, the edge/feature importance layer, and the losses on top.

Everything is float64 and single-threaded per tape.  Gradients accumulate
additively across fan-out and across repeated backward calls; callers zero
them between optimization steps.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sparse


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class NumericDomainError(ValueError):
    """Input values fall outside an operation's numeric domain."""


class Tensor:
    """A dense float64 array plus an optional gradient buffer."""

    __slots__ = ("values", "grad", "requires_grad")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        return float(self.values)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={list(self.shape)}, requires_grad={self.requires_grad})"


class _Record:
    """One tape entry: output, inputs, and the local backward rule."""

    __slots__ = ("out", "inputs", "backward")

    def __init__(
        self,
        out: Tensor,
        inputs: tuple[Tensor, ...],
        backward: Callable[[np.ndarray], tuple[np.ndarray | None, ...]],
    ):
        self.out = out
        self.inputs = inputs
        self.backward = backward


def _require_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: operand shapes {list(a.shape)} and {list(b.shape)} differ")


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class Tape:
    """Ordered record of operations; replayed in reverse by ``backward``.

    Construct with ``record=False`` for evaluation-only forward passes that
    do not need gradients.
    """

    def __init__(self, record: bool = True):
        self._records: list[_Record] = []
        self._record_enabled = bool(record)
        # weighted-adjacency reuse across the scatter calls of one forward pass
        self._csr_cache: dict = {}

    def __len__(self) -> int:
        return len(self._records)

    def _emit(self, values: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
        out = Tensor(values)
        if self._record_enabled and any(t.requires_grad for t in inputs):
            out.requires_grad = True
            self._records.append(_Record(out, tuple(inputs), backward))
        return out

    # -- linear algebra ----------------------------------------------------

    def matmul(self, a: Tensor, b: Tensor) -> Tensor:
        if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(
                f"matmul: cannot multiply shapes {list(a.shape)} and {list(b.shape)}"
            )
        need_a, need_b = a.requires_grad, b.requires_grad

        def bwd(g):
            return (g @ b.values.T if need_a else None,
                    a.values.T @ g if need_b else None)

        return self._emit(a.values @ b.values, (a, b), bwd)

    def matvec(self, a: Tensor, v: Tensor) -> Tensor:
        if a.values.ndim != 2 or v.values.ndim != 1 or a.shape[1] != v.shape[0]:
            raise ShapeError(
                f"matvec: cannot multiply shapes {list(a.shape)} and {list(v.shape)}"
            )
        need_a, need_v = a.requires_grad, v.requires_grad

        def bwd(g):
            return (np.outer(g, v.values) if need_a else None,
                    a.values.T @ g if need_v else None)

        return self._emit(a.values @ v.values, (a, v), bwd)

    # -- elementwise -------------------------------------------------------

    def add(self, a: Tensor, b: Tensor) -> Tensor:
        _require_same_shape("add", a, b)
        return self._emit(a.values + b.values, (a, b), lambda g: (g, g))

    def sub(self, a: Tensor, b: Tensor) -> Tensor:
        _require_same_shape("sub", a, b)
        return self._emit(a.values - b.values, (a, b), lambda g: (g, -g))

    def hadamard(self, a: Tensor, b: Tensor) -> Tensor:
        _require_same_shape("hadamard", a, b)
        need_a, need_b = a.requires_grad, b.requires_grad

        def bwd(g):
            return (g * b.values if need_a else None,
                    g * a.values if need_b else None)

        return self._emit(a.values * b.values, (a, b), bwd)

    def neg(self, a: Tensor) -> Tensor:
        return self._emit(-a.values, (a,), lambda g: (-g,))

    def scale(self, a: Tensor, c: float) -> Tensor:
        c = float(c)
        return self._emit(c * a.values, (a,), lambda g: (c * g,))

    def sigmoid(self, a: Tensor) -> Tensor:
        s = _stable_sigmoid(a.values)
        return self._emit(s, (a,), lambda g: (g * s * (1.0 - s),))

    def relu(self, a: Tensor) -> Tensor:
        mask = a.values > 0.0
        return self._emit(np.where(mask, a.values, 0.0), (a,), lambda g: (g * mask,))

    def log(self, a: Tensor) -> Tensor:
        if np.any(a.values <= 0.0):
            raise NumericDomainError("log: input has non-positive entries")
        return self._emit(np.log(a.values), (a,), lambda g: (g / a.values,))

    def power(self, a: Tensor, p: float) -> Tensor:
        p = float(p)

        def bwd(g):
            return (g * p * np.power(a.values, p - 1.0),)

        return self._emit(np.power(a.values, p), (a,), bwd)

    def clamp(self, a: Tensor, lo: float, hi: float) -> Tensor:
        mask = (a.values >= lo) & (a.values <= hi)
        return self._emit(np.clip(a.values, lo, hi), (a,), lambda g: (g * mask,))

    # -- shape manipulation ------------------------------------------------

    def concat(self, a: Tensor, b: Tensor) -> Tensor:
        if a.values.ndim != 1 or b.values.ndim != 1:
            raise ShapeError(
                f"concat: expected vectors, got shapes {list(a.shape)} and {list(b.shape)}"
            )
        n = a.shape[0]

        def bwd(g):
            return g[:n], g[n:]

        return self._emit(np.concatenate([a.values, b.values]), (a, b), bwd)

    def concat_cols(self, a: Tensor, b: Tensor) -> Tensor:
        if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[0] != b.shape[0]:
            raise ShapeError(
                f"concat_cols: incompatible shapes {list(a.shape)} and {list(b.shape)}"
            )
        k = a.shape[1]

        def bwd(g):
            return g[:, :k], g[:, k:]

        return self._emit(np.concatenate([a.values, b.values], axis=1), (a, b), bwd)

    def reshape(self, a: Tensor, shape: tuple[int, ...]) -> Tensor:
        old = a.shape

        def bwd(g):
            return (g.reshape(old),)

        return self._emit(a.values.reshape(shape), (a,), bwd)

    def gather_rows(self, a: Tensor, idx: np.ndarray) -> Tensor:
        idx = np.asarray(idx, dtype=np.intp)
        if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
            raise IndexError(f"gather_rows: index out of range for {a.shape[0]} rows")

        def bwd(g):
            buf = np.zeros_like(a.values)
            np.add.at(buf, idx, g)
            return (buf,)

        return self._emit(a.values[idx], (a,), bwd)

    def slice_vec(self, a: Tensor, start: int, stop: int) -> Tensor:
        if a.values.ndim != 1:
            raise ShapeError(f"slice_vec: expected a vector, got shape {list(a.shape)}")

        def bwd(g):
            buf = np.zeros_like(a.values)
            buf[start:stop] = g
            return (buf,)

        return self._emit(a.values[start:stop], (a,), bwd)

    def broadcast_rows(self, v: Tensor, n: int) -> Tensor:
        if v.values.ndim != 1:
            raise ShapeError(f"broadcast_rows: expected a vector, got shape {list(v.shape)}")

        def bwd(g):
            return (g.sum(axis=0),)

        return self._emit(np.tile(v.values, (n, 1)), (v,), bwd)

    def scale_rows(self, a: Tensor, v: Tensor) -> Tensor:
        if a.values.ndim != 2 or v.values.ndim != 1 or a.shape[0] != v.shape[0]:
            raise ShapeError(
                f"scale_rows: incompatible shapes {list(a.shape)} and {list(v.shape)}"
            )
        need_a, need_v = a.requires_grad, v.requires_grad

        def bwd(g):
            return (g * v.values[:, None] if need_a else None,
                    (g * a.values).sum(axis=1) if need_v else None)

        return self._emit(a.values * v.values[:, None], (a, v), bwd)

    # -- reductions ----------------------------------------------------------

    def sum(self, a: Tensor) -> Tensor:
        def bwd(g):
            return (np.full_like(a.values, float(g)),)

        return self._emit(np.asarray(a.values.sum()), (a,), bwd)

    def mean(self, a: Tensor) -> Tensor:
        n = a.size
        if n == 0:
            raise ShapeError("mean: empty tensor")

        def bwd(g):
            return (np.full_like(a.values, float(g) / n),)

        return self._emit(np.asarray(a.values.mean()), (a,), bwd)

    # -- task-specific ops ---------------------------------------------------

    def dropout(self, a: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
        """Inverted dropout; draw one fresh mask per call from ``rng``."""
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        if rate == 0.0:
            return self._emit(a.values.copy(), (a,), lambda g: (g,))
        keep = rng.random(a.shape) >= rate
        factor = keep / (1.0 - rate)
        return self._emit(a.values * factor, (a,), lambda g: (g * factor,))

    def softmax_cross_entropy(self, logits: Tensor, labels: np.ndarray, mask: np.ndarray) -> Tensor:
        """Mean over ``mask`` rows of the cross entropy against one-hot ``labels``.

        Row-max subtraction keeps the log-sum-exp stable for extreme logits.
        """
        labels = np.asarray(labels, dtype=np.float64)
        mask = np.asarray(mask, dtype=np.intp)
        if logits.values.ndim != 2 or labels.shape != logits.shape:
            raise ShapeError(
                f"softmax_cross_entropy: logits {list(logits.shape)} vs labels {list(labels.shape)}"
            )
        if logits.shape[1] < 2:
            raise ValueError("softmax_cross_entropy: need at least 2 classes")
        if mask.size == 0:
            raise ValueError("softmax_cross_entropy: empty node mask")
        y = labels[mask]
        if not np.allclose(y.sum(axis=1), 1.0, atol=1e-8):
            raise ValueError("softmax_cross_entropy: masked label rows must sum to 1")

        z = logits.values[mask]
        z = z - z.max(axis=1, keepdims=True)
        log_norm = np.log(np.exp(z).sum(axis=1, keepdims=True))
        log_probs = z - log_norm
        n = mask.size
        loss = -(y * log_probs).sum() / n
        softmax = np.exp(log_probs)

        def bwd(g):
            buf = np.zeros_like(logits.values)
            buf[mask] = float(g) * (softmax - y) / n
            return (buf,)

        return self._emit(np.asarray(loss), (logits,), bwd)

    def scatter_aggregate(
        self,
        edge_weights: Tensor,
        src_values: Tensor,
        src: np.ndarray,
        dst: np.ndarray,
        num_nodes: int,
    ) -> Tensor:
        """Weighted neighbor sum: ``out[v] = sum over edges (u -> v) of w_e * src_values[u]``."""
        src = np.asarray(src, dtype=np.intp)
        dst = np.asarray(dst, dtype=np.intp)
        if edge_weights.values.ndim != 1 or edge_weights.shape[0] != src.size or src.size != dst.size:
            raise ShapeError(
                f"scatter_aggregate: {list(edge_weights.shape)} weights for {src.size} edges"
            )
        if src_values.values.ndim != 2 or src_values.shape[0] != num_nodes:
            raise ShapeError(
                f"scatter_aggregate: src_values shape {list(src_values.shape)} vs {num_nodes} nodes"
            )
        for name, idx in (("src", src), ("dst", dst)):
            if idx.size and (idx.min() < 0 or idx.max() >= num_nodes):
                raise IndexError(f"scatter_aggregate: {name} index out of range [0, {num_nodes})")

        h = src_values.shape[1]
        if src.size == 0:
            out = np.zeros((num_nodes, h))

            def bwd_empty(g):
                return np.zeros(0), np.zeros((num_nodes, h))

            return self._emit(out, (edge_weights, src_values), bwd_empty)

        cache_key = (id(edge_weights), id(src), id(dst), num_nodes)
        cached = self._csr_cache.get(cache_key)
        if cached is None or cached[0] is not edge_weights.values:
            mat = sparse.csr_matrix(
                (edge_weights.values, (dst, src)), shape=(num_nodes, num_nodes)
            )
            self._csr_cache[cache_key] = (edge_weights.values, mat, mat.T.tocsr())
            cached = self._csr_cache[cache_key]
        _, mat, mat_t = cached
        out = mat @ src_values.values
        need_w, need_src = edge_weights.requires_grad, src_values.requires_grad

        def bwd(g):
            d_w = np.einsum("eh,eh->e", g[dst], src_values.values[src]) if need_w else None
            d_src = mat_t @ g if need_src else None
            return d_w, d_src

        return self._emit(out, (edge_weights, src_values), bwd)

    # -- reverse pass --------------------------------------------------------

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable tensor
        with ``requires_grad``; visits each recorded op exactly once, newest
        first."""
        if loss.values.ndim != 0:
            raise ShapeError(f"backward: loss must be a scalar, got shape {list(loss.shape)}")
        pending: dict[int, np.ndarray] = {id(loss): np.ones(())}
        holders: dict[int, Tensor] = {id(loss): loss}
        for rec in reversed(self._records):
            g = pending.pop(id(rec.out), None)
            if g is None:
                continue
            holders.pop(id(rec.out), None)
            if rec.out.requires_grad:
                self._accumulate(rec.out, g)
            for t, gt in zip(rec.inputs, rec.backward(g)):
                if gt is None:
                    continue
                key = id(t)
                if key in pending:
                    pending[key] = pending[key] + gt
                else:
                    pending[key] = gt
                    holders[key] = t
        # Whatever is still pending belongs to leaf tensors (never an op output).
        for key, g in pending.items():
            t = holders[key]
            if t.requires_grad:
                self._accumulate(t, g)

    @staticmethod
    def _accumulate(t: Tensor, g: np.ndarray) -> None:
        # no copy: gradient buffers are only ever rebound, never mutated in place
        if t.grad is None:
            t.grad = np.asarray(g, dtype=np.float64)
        else:
            t.grad = t.grad + g
