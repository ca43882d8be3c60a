"""Pure-Python tape core.

Reference implementation of the scalar reverse-mode tape and the no-tape
inference kernels. The compiled core in ``_core_cy`` mirrors this module
operation for operation (same arithmetic, same accumulation order) so the
two backends produce bit-identical numbers; this one stays importable
everywhere and is the authority on semantics.
"""

from __future__ import annotations

import math

import numpy as np

from ..errors import DomainError
from .ops import (
    ACT_RELU,
    ACT_TANH,
    OP_ADD,
    OP_ARITY,
    OP_BY_NAME,
    OP_CONST,
    OP_DIV,
    OP_EXP,
    OP_LOG,
    OP_MAX2,
    OP_MUL,
    OP_NAMES,
    OP_NEG,
    OP_RELU,
    OP_SUB,
    OP_TANH,
)

BACKEND = "python"


def _exp(x):
    # Mirror C exp(): overflow saturates to inf instead of raising.
    try:
        return math.exp(x)
    except OverflowError:
        return math.inf


class Tape:
    """Scalar computation tape for reverse-mode differentiation.

    Nodes are appended in topological order (parents always precede
    children) and addressed by integer handles. ``backward(root)`` returns
    the adjoint of every node with respect to the root.
    """

    __slots__ = ("_kind", "_p1", "_p2", "_d1", "_d2", "_val")

    def __init__(self):
        self._kind = []
        self._p1 = []
        self._p2 = []
        self._d1 = []
        self._d2 = []
        self._val = []

    def __len__(self):
        return len(self._kind)

    def reset(self):
        """Drop all nodes; handles from before the reset become invalid."""
        for lst in (self._kind, self._p1, self._p2, self._d1, self._d2, self._val):
            lst.clear()

    # -- construction -----------------------------------------------------

    def lift(self, value: float) -> int:
        """Append a constant (leaf) node and return its handle."""
        self._kind.append(OP_CONST)
        self._p1.append(-1)
        self._p2.append(-1)
        self._d1.append(0.0)
        self._d2.append(0.0)
        self._val.append(float(value))
        return len(self._kind) - 1

    def lift_many(self, values) -> int:
        """Append one constant node per entry; returns the first handle.

        The nodes are contiguous: entry ``i`` lives at ``start + i``.
        """
        start = len(self._kind)
        count = len(values)
        self._kind.extend([OP_CONST] * count)
        self._p1.extend([-1] * count)
        self._p2.extend([-1] * count)
        self._d1.extend([0.0] * count)
        self._d2.extend([0.0] * count)
        self._val.extend(float(v) for v in values)
        return start

    def _check(self, idx: int) -> int:
        if not 0 <= idx < len(self._kind):
            raise ValueError(f"node handle {idx} does not exist (tape has {len(self._kind)} nodes)")
        return idx

    def _emit1(self, code: int, a: int) -> int:
        va = self._val[a]
        if code == OP_EXP:
            v = _exp(va)
            d = v
        elif code == OP_LOG:
            if va <= 0.0:
                raise DomainError(
                    f"log of non-positive value {va!r} at node {len(self._kind)} (parent {a})"
                )
            v = math.log(va)
            d = 1.0 / va
        elif code == OP_NEG:
            v = -va
            d = -1.0
        elif code == OP_RELU:
            if va > 0.0:
                v = va
                d = 1.0
            else:
                v = 0.0
                d = 0.0
        elif code == OP_TANH:
            v = math.tanh(va)
            d = 1.0 - v * v
        else:  # pragma: no cover - guarded by apply()
            raise ValueError(f"bad unary op code {code}")
        self._kind.append(code)
        self._p1.append(a)
        self._p2.append(-1)
        self._d1.append(d)
        self._d2.append(0.0)
        self._val.append(v)
        return len(self._kind) - 1

    def _emit2(self, code: int, a: int, b: int) -> int:
        va = self._val[a]
        vb = self._val[b]
        if code == OP_ADD:
            v = va + vb
            da = 1.0
            db = 1.0
        elif code == OP_SUB:
            v = va - vb
            da = 1.0
            db = -1.0
        elif code == OP_MUL:
            v = va * vb
            da = vb
            db = va
        elif code == OP_DIV:
            if vb == 0.0:
                raise DomainError(
                    f"division by zero at node {len(self._kind)} (parents {a}, {b})"
                )
            v = va / vb
            da = 1.0 / vb
            db = -va / (vb * vb)
        elif code == OP_MAX2:
            # Ties resolve to the first parent; keeps gradients deterministic.
            if va >= vb:
                v = va
                da = 1.0
                db = 0.0
            else:
                v = vb
                da = 0.0
                db = 1.0
        else:  # pragma: no cover - guarded by apply()
            raise ValueError(f"bad binary op code {code}")
        self._kind.append(code)
        self._p1.append(a)
        self._p2.append(b)
        self._d1.append(da)
        self._d2.append(db)
        self._val.append(v)
        return len(self._kind) - 1

    def apply(self, kind: str, *parents: int) -> int:
        """Append an elementary operation node.

        ``kind`` is one of add, sub, mul, div, exp, log, neg, max2, relu,
        tanh. Raises DomainError when a parent value lies outside the
        operation's domain (log needs a strictly positive argument, div a
        nonzero denominator).
        """
        code = OP_BY_NAME.get(kind)
        if code is None or code == OP_CONST:
            raise ValueError(f"unknown op kind {kind!r}")
        arity = OP_ARITY[code]
        if len(parents) != arity:
            raise ValueError(f"op {kind!r} takes {arity} parents, got {len(parents)}")
        for p in parents:
            self._check(p)
        if arity == 1:
            return self._emit1(code, parents[0])
        return self._emit2(code, parents[0], parents[1])

    def add(self, a, b):
        return self._emit2(OP_ADD, self._check(a), self._check(b))

    def sub(self, a, b):
        return self._emit2(OP_SUB, self._check(a), self._check(b))

    def mul(self, a, b):
        return self._emit2(OP_MUL, self._check(a), self._check(b))

    def div(self, a, b):
        return self._emit2(OP_DIV, self._check(a), self._check(b))

    def max2(self, a, b):
        return self._emit2(OP_MAX2, self._check(a), self._check(b))

    def exp(self, a):
        return self._emit1(OP_EXP, self._check(a))

    def log(self, a):
        return self._emit1(OP_LOG, self._check(a))

    def neg(self, a):
        return self._emit1(OP_NEG, self._check(a))

    def relu(self, a):
        return self._emit1(OP_RELU, self._check(a))

    def tanh(self, a):
        return self._emit1(OP_TANH, self._check(a))

    # -- batch emitters (hot path) ----------------------------------------

    def affine(self, w_start: int, b_start: int, x_idx, n_out: int):
        """Emit ``out_j = b_j + sum_i W[j, i] * x_i`` for all outputs.

        ``w_start`` addresses a contiguous row-major block of ``n_out * n_in``
        weight nodes, ``b_start`` a contiguous block of ``n_out`` bias nodes,
        and ``x_idx`` holds the ``n_in`` input handles. Accumulation order is
        ``((b + w0*x0) + w1*x1) + ...``; the inference kernels replicate it.
        """
        x_idx = np.ascontiguousarray(x_idx, dtype=np.int64)
        n_in = x_idx.shape[0]
        self._check(w_start)
        self._check(w_start + n_out * n_in - 1)
        self._check(b_start + n_out - 1)
        for i in range(n_in):
            self._check(int(x_idx[i]))
        out = np.empty(n_out, dtype=np.int64)
        emit2 = self._emit2
        for j in range(n_out):
            acc = b_start + j
            w = w_start + j * n_in
            for i in range(n_in):
                m = emit2(OP_MUL, w + i, int(x_idx[i]))
                acc = emit2(OP_ADD, acc, m)
            out[j] = acc
        return out

    def unary_many(self, kind: str, idx):
        code = OP_BY_NAME.get(kind)
        if code is None or OP_ARITY[code] != 1:
            raise ValueError(f"unary_many needs a unary op kind, got {kind!r}")
        idx = np.ascontiguousarray(idx, dtype=np.int64)
        out = np.empty(idx.shape[0], dtype=np.int64)
        for k in range(idx.shape[0]):
            out[k] = self._emit1(code, self._check(int(idx[k])))
        return out

    def sum_many(self, idx) -> int:
        """Left-fold sum of the given handles."""
        idx = np.ascontiguousarray(idx, dtype=np.int64)
        if idx.shape[0] == 0:
            raise ValueError("sum_many needs at least one handle")
        acc = self._check(int(idx[0]))
        for k in range(1, idx.shape[0]):
            acc = self._emit2(OP_ADD, acc, self._check(int(idx[k])))
        return acc

    def logsumexp(self, idx) -> int:
        """Numerically stable log-sum-exp of the given handles.

        Emitted as ``m + log(sum_k exp(x_k - m))`` with ``m`` a max2 chain,
        which differentiates to the exact softmax weights.
        """
        idx = np.ascontiguousarray(idx, dtype=np.int64)
        if idx.shape[0] == 0:
            raise ValueError("logsumexp needs at least one handle")
        m = self._check(int(idx[0]))
        for k in range(1, idx.shape[0]):
            m = self._emit2(OP_MAX2, m, self._check(int(idx[k])))
        s = self._emit1(OP_EXP, self._emit2(OP_SUB, int(idx[0]), m))
        for k in range(1, idx.shape[0]):
            e = self._emit1(OP_EXP, self._emit2(OP_SUB, int(idx[k]), m))
            s = self._emit2(OP_ADD, s, e)
        return self._emit2(OP_ADD, m, self._emit1(OP_LOG, s))

    # -- inspection --------------------------------------------------------

    def value(self, idx: int) -> float:
        return self._val[self._check(idx)]

    def values(self):
        return np.array(self._val, dtype=np.float64)

    def node(self, idx: int):
        """(kind name, parent handles, local partials, value) for one node."""
        i = self._check(idx)
        kind = self._kind[i]
        if OP_ARITY[kind] == 0:
            return (OP_NAMES[kind], (), (), self._val[i])
        if OP_ARITY[kind] == 1:
            return (OP_NAMES[kind], (self._p1[i],), (self._d1[i],), self._val[i])
        return (
            OP_NAMES[kind],
            (self._p1[i], self._p2[i]),
            (self._d1[i], self._d2[i]),
            self._val[i],
        )

    # -- reverse sweep ------------------------------------------------------

    def backward(self, root: int):
        """Adjoints of every node with respect to ``root``.

        Returns a float64 array ``adj`` with ``adj[root] == 1`` and
        ``adj[h]`` the derivative of the root value with respect to node
        ``h``'s value. Deterministic: re-running on an unchanged tape gives
        bit-identical output.
        """
        self._check(root)
        n = len(self._kind)
        adj = np.zeros(n, dtype=np.float64)
        adj[root] = 1.0
        kind = self._kind
        p1 = self._p1
        p2 = self._p2
        d1 = self._d1
        d2 = self._d2
        buf = adj  # numpy scalar indexing is slow; keep a local name anyway
        for i in range(root, -1, -1):
            a = buf[i]
            if a == 0.0 or kind[i] == OP_CONST:
                continue
            buf[p1[i]] += a * d1[i]
            q = p2[i]
            if q >= 0:
                buf[q] += a * d2[i]
        return adj


# -- no-tape inference kernels ----------------------------------------------
# These replicate the tape's accumulation order exactly so that energies and
# losses measured without a tape agree bit-for-bit with the training path.


def forward_batch(weights, biases, act: int, X):
    """Logits for every row of X through the MLP (no tape).

    ``weights[l]`` is (n_out, n_in) row-major, ``biases[l]`` is (n_out,);
    ``act`` applies to all hidden layers, the last layer is linear.
    """
    X = np.ascontiguousarray(X, dtype=np.float64)
    n = X.shape[0]
    n_layers = len(weights)
    k_out = weights[-1].shape[0]
    out = np.empty((n, k_out), dtype=np.float64)
    tanh = math.tanh
    for s in range(n):
        h = [float(v) for v in X[s]]
        for layer in range(n_layers):
            W = weights[layer]
            b = biases[layer]
            n_out, n_in = W.shape
            nxt = [0.0] * n_out
            for j in range(n_out):
                acc = float(b[j])
                Wj = W[j]
                for i in range(n_in):
                    acc = acc + float(Wj[i]) * h[i]
                if layer < n_layers - 1:
                    if act == ACT_TANH:
                        acc = tanh(acc)
                    elif act == ACT_RELU:
                        acc = acc if acc > 0.0 else 0.0
                nxt[j] = acc
            h = nxt
        out[s] = h
    return out


def energy_batch(logits):
    """Free energy -logsumexp(logits) per row, same op order as the tape."""
    logits = np.ascontiguousarray(logits, dtype=np.float64)
    n, k = logits.shape
    out = np.empty(n, dtype=np.float64)
    for s in range(n):
        row = logits[s]
        m = float(row[0])
        for j in range(1, k):
            vj = float(row[j])
            if not m >= vj:
                m = vj
        acc = _exp(float(row[0]) - m)
        for j in range(1, k):
            acc = acc + _exp(float(row[j]) - m)
        out[s] = -(m + math.log(acc))
    return out


def ce_batch(logits, labels0):
    """Per-row cross-entropy ``logsumexp(logits) - logits[label]``.

    ``labels0`` are 0-based class indices.
    """
    logits = np.ascontiguousarray(logits, dtype=np.float64)
    labels0 = np.ascontiguousarray(labels0, dtype=np.int64)
    n, k = logits.shape
    out = np.empty(n, dtype=np.float64)
    for s in range(n):
        row = logits[s]
        m = float(row[0])
        for j in range(1, k):
            vj = float(row[j])
            if not m >= vj:
                m = vj
        acc = _exp(float(row[0]) - m)
        for j in range(1, k):
            acc = acc + _exp(float(row[j]) - m)
        out[s] = (m + math.log(acc)) - float(row[labels0[s]])
    return out
