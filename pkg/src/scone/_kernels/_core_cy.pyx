# cython: language_level=3
"""Compiled tape core.

Mirror of ``_core_py`` with the hot loops in C. Arithmetic and accumulation
order are identical to the pure-Python core (the extension is compiled with
-ffp-contract=off), so both backends produce bit-identical numbers.
"""

from libc.math cimport exp as c_exp, log as c_log, tanh as c_tanh
from libc.stdlib cimport free, malloc, realloc
from libc.string cimport memcpy

import numpy as np

from ..errors import DomainError
from .ops import OP_ARITY, OP_BY_NAME, OP_NAMES

BACKEND = "ext"

cdef enum:
    CONST = 0
    ADD = 1
    SUB = 2
    MUL = 3
    DIV = 4
    EXP = 5
    LOG = 6
    NEG = 7
    MAX2 = 8
    RELU = 9
    TANH = 10

cdef enum:
    A_TANH = 0
    A_RELU = 1


cdef class Tape:
    """Scalar computation tape for reverse-mode differentiation.

    Same contract as the pure-Python ``Tape``: nodes in topological order,
    integer handles, ``backward(root)`` returning all adjoints.
    """

    cdef signed char* kind
    cdef int* p1
    cdef int* p2
    cdef double* d1
    cdef double* d2
    cdef double* val
    cdef Py_ssize_t n
    cdef Py_ssize_t cap

    def __cinit__(self):
        self.cap = 4096
        self.n = 0
        self.kind = <signed char*>malloc(self.cap * sizeof(signed char))
        self.p1 = <int*>malloc(self.cap * sizeof(int))
        self.p2 = <int*>malloc(self.cap * sizeof(int))
        self.d1 = <double*>malloc(self.cap * sizeof(double))
        self.d2 = <double*>malloc(self.cap * sizeof(double))
        self.val = <double*>malloc(self.cap * sizeof(double))
        if (self.kind == NULL or self.p1 == NULL or self.p2 == NULL
                or self.d1 == NULL or self.d2 == NULL or self.val == NULL):
            raise MemoryError()

    def __dealloc__(self):
        free(self.kind)
        free(self.p1)
        free(self.p2)
        free(self.d1)
        free(self.d2)
        free(self.val)

    cdef int _grow(self) except -1:
        cdef Py_ssize_t newcap = self.cap * 2
        self.kind = <signed char*>realloc(self.kind, newcap * sizeof(signed char))
        self.p1 = <int*>realloc(self.p1, newcap * sizeof(int))
        self.p2 = <int*>realloc(self.p2, newcap * sizeof(int))
        self.d1 = <double*>realloc(self.d1, newcap * sizeof(double))
        self.d2 = <double*>realloc(self.d2, newcap * sizeof(double))
        self.val = <double*>realloc(self.val, newcap * sizeof(double))
        if (self.kind == NULL or self.p1 == NULL or self.p2 == NULL
                or self.d1 == NULL or self.d2 == NULL or self.val == NULL):
            raise MemoryError()
        self.cap = newcap
        return 0

    cdef inline Py_ssize_t _raw(self, int code, Py_ssize_t a, Py_ssize_t b,
                                double da, double db, double v) except -1:
        cdef Py_ssize_t i = self.n
        if i == self.cap:
            self._grow()
        self.kind[i] = <signed char>code
        self.p1[i] = <int>a
        self.p2[i] = <int>b
        self.d1[i] = da
        self.d2[i] = db
        self.val[i] = v
        self.n = i + 1
        return i

    cdef inline Py_ssize_t _check(self, Py_ssize_t idx) except -1:
        if idx < 0 or idx >= self.n:
            raise ValueError(
                f"node handle {idx} does not exist (tape has {self.n} nodes)")
        return idx

    cdef Py_ssize_t _apply1(self, int code, Py_ssize_t a) except -1:
        cdef double va = self.val[a]
        cdef double v, d
        if code == EXP:
            v = c_exp(va)
            d = v
        elif code == LOG:
            if va <= 0.0:
                raise DomainError(
                    f"log of non-positive value {va!r} at node {self.n} (parent {a})")
            v = c_log(va)
            d = 1.0 / va
        elif code == NEG:
            v = -va
            d = -1.0
        elif code == RELU:
            if va > 0.0:
                v = va
                d = 1.0
            else:
                v = 0.0
                d = 0.0
        elif code == TANH:
            v = c_tanh(va)
            d = 1.0 - v * v
        else:
            raise ValueError(f"bad unary op code {code}")
        return self._raw(code, a, -1, d, 0.0, v)

    cdef Py_ssize_t _apply2(self, int code, Py_ssize_t a, Py_ssize_t b) except -1:
        cdef double va = self.val[a]
        cdef double vb = self.val[b]
        cdef double v, da, db
        if code == ADD:
            v = va + vb
            da = 1.0
            db = 1.0
        elif code == SUB:
            v = va - vb
            da = 1.0
            db = -1.0
        elif code == MUL:
            v = va * vb
            da = vb
            db = va
        elif code == DIV:
            if vb == 0.0:
                raise DomainError(
                    f"division by zero at node {self.n} (parents {a}, {b})")
            v = va / vb
            da = 1.0 / vb
            db = -va / (vb * vb)
        elif code == MAX2:
            # Ties resolve to the first parent; keeps gradients deterministic.
            if va >= vb:
                v = va
                da = 1.0
                db = 0.0
            else:
                v = vb
                da = 0.0
                db = 1.0
        else:
            raise ValueError(f"bad binary op code {code}")
        return self._raw(code, a, b, da, db, v)

    # -- python-visible construction API -----------------------------------

    def __len__(self):
        return self.n

    def reset(self):
        """Drop all nodes; handles from before the reset become invalid."""
        self.n = 0

    def lift(self, double value):
        """Append a constant (leaf) node and return its handle."""
        return self._raw(CONST, -1, -1, 0.0, 0.0, value)

    def lift_many(self, values):
        """Append one constant node per entry; returns the first handle."""
        cdef double[::1] v = np.ascontiguousarray(values, dtype=np.float64)
        cdef Py_ssize_t start = self.n
        cdef Py_ssize_t k
        for k in range(v.shape[0]):
            self._raw(CONST, -1, -1, 0.0, 0.0, v[k])
        return start

    def apply(self, kind, *parents):
        """Append an elementary operation node (same contract as _core_py)."""
        code_obj = OP_BY_NAME.get(kind)
        if code_obj is None or code_obj == CONST:
            raise ValueError(f"unknown op kind {kind!r}")
        cdef int code = code_obj
        cdef int arity = OP_ARITY[code]
        if len(parents) != arity:
            raise ValueError(f"op {kind!r} takes {arity} parents, got {len(parents)}")
        cdef Py_ssize_t a = self._check(parents[0])
        if arity == 1:
            return self._apply1(code, a)
        return self._apply2(code, a, self._check(parents[1]))

    def add(self, Py_ssize_t a, Py_ssize_t b):
        return self._apply2(ADD, self._check(a), self._check(b))

    def sub(self, Py_ssize_t a, Py_ssize_t b):
        return self._apply2(SUB, self._check(a), self._check(b))

    def mul(self, Py_ssize_t a, Py_ssize_t b):
        return self._apply2(MUL, self._check(a), self._check(b))

    def div(self, Py_ssize_t a, Py_ssize_t b):
        return self._apply2(DIV, self._check(a), self._check(b))

    def max2(self, Py_ssize_t a, Py_ssize_t b):
        return self._apply2(MAX2, self._check(a), self._check(b))

    def exp(self, Py_ssize_t a):
        return self._apply1(EXP, self._check(a))

    def log(self, Py_ssize_t a):
        return self._apply1(LOG, self._check(a))

    def neg(self, Py_ssize_t a):
        return self._apply1(NEG, self._check(a))

    def relu(self, Py_ssize_t a):
        return self._apply1(RELU, self._check(a))

    def tanh(self, Py_ssize_t a):
        return self._apply1(TANH, self._check(a))

    # -- batch emitters (hot path) ------------------------------------------

    def affine(self, Py_ssize_t w_start, Py_ssize_t b_start, x_idx, Py_ssize_t n_out):
        """Emit ``out_j = b_j + sum_i W[j, i] * x_i``; see _core_py.affine."""
        cdef long long[::1] xv = np.ascontiguousarray(x_idx, dtype=np.int64)
        cdef Py_ssize_t n_in = xv.shape[0]
        self._check(w_start)
        self._check(w_start + n_out * n_in - 1)
        self._check(b_start + n_out - 1)
        cdef Py_ssize_t i, j, acc, m, w, xi
        for i in range(n_in):
            self._check(xv[i])
        out = np.empty(n_out, dtype=np.int64)
        cdef long long[::1] ov = out
        cdef double vm
        for j in range(n_out):
            acc = b_start + j
            w = w_start + j * n_in
            for i in range(n_in):
                xi = xv[i]
                vm = self.val[w + i] * self.val[xi]
                m = self._raw(MUL, w + i, xi, self.val[xi], self.val[w + i], vm)
                acc = self._raw(ADD, acc, m, 1.0, 1.0, self.val[acc] + vm)
            ov[j] = acc
        return out

    def unary_many(self, kind, idx):
        code_obj = OP_BY_NAME.get(kind)
        if code_obj is None or OP_ARITY[code_obj] != 1:
            raise ValueError(f"unary_many needs a unary op kind, got {kind!r}")
        cdef int code = code_obj
        cdef long long[::1] iv = np.ascontiguousarray(idx, dtype=np.int64)
        out = np.empty(iv.shape[0], dtype=np.int64)
        cdef long long[::1] ov = out
        cdef Py_ssize_t k
        for k in range(iv.shape[0]):
            ov[k] = self._apply1(code, self._check(iv[k]))
        return out

    def sum_many(self, idx):
        """Left-fold sum of the given handles."""
        cdef long long[::1] iv = np.ascontiguousarray(idx, dtype=np.int64)
        if iv.shape[0] == 0:
            raise ValueError("sum_many needs at least one handle")
        cdef Py_ssize_t acc = self._check(iv[0])
        cdef Py_ssize_t k
        for k in range(1, iv.shape[0]):
            acc = self._apply2(ADD, acc, self._check(iv[k]))
        return acc

    def logsumexp(self, idx):
        """Stable log-sum-exp, same emission order as _core_py.logsumexp."""
        cdef long long[::1] iv = np.ascontiguousarray(idx, dtype=np.int64)
        if iv.shape[0] == 0:
            raise ValueError("logsumexp needs at least one handle")
        cdef Py_ssize_t m = self._check(iv[0])
        cdef Py_ssize_t k, s, e
        for k in range(1, iv.shape[0]):
            m = self._apply2(MAX2, m, self._check(iv[k]))
        s = self._apply1(EXP, self._apply2(SUB, iv[0], m))
        for k in range(1, iv.shape[0]):
            e = self._apply1(EXP, self._apply2(SUB, iv[k], m))
            s = self._apply2(ADD, s, e)
        return self._apply2(ADD, m, self._apply1(LOG, s))

    # -- inspection -----------------------------------------------------------

    def value(self, Py_ssize_t idx):
        return self.val[self._check(idx)]

    def values(self):
        out = np.empty(self.n, dtype=np.float64)
        cdef double[::1] ov = out
        if self.n > 0:
            memcpy(&ov[0], self.val, self.n * sizeof(double))
        return out

    def node(self, Py_ssize_t idx):
        """(kind name, parent handles, local partials, value) for one node."""
        cdef Py_ssize_t i = self._check(idx)
        cdef int kind = self.kind[i]
        if OP_ARITY[kind] == 0:
            return (OP_NAMES[kind], (), (), self.val[i])
        if OP_ARITY[kind] == 1:
            return (OP_NAMES[kind], (self.p1[i],), (self.d1[i],), self.val[i])
        return (
            OP_NAMES[kind],
            (self.p1[i], self.p2[i]),
            (self.d1[i], self.d2[i]),
            self.val[i],
        )

    # -- reverse sweep ----------------------------------------------------------

    def backward(self, Py_ssize_t root):
        """Adjoints of every node with respect to ``root`` (float64 array)."""
        self._check(root)
        adj = np.zeros(self.n, dtype=np.float64)
        cdef double[::1] a_ = adj
        a_[root] = 1.0
        cdef Py_ssize_t i
        cdef double a
        for i in range(root, -1, -1):
            a = a_[i]
            if a == 0.0 or self.kind[i] == CONST:
                continue
            a_[self.p1[i]] += a * self.d1[i]
            if self.p2[i] >= 0:
                a_[self.p2[i]] += a * self.d2[i]
        return adj


# -- no-tape inference kernels ------------------------------------------------


def forward_batch(weights, biases, int act, X):
    """Logits for every row of X through the MLP; see _core_py.forward_batch."""
    cdef double[:, ::1] Xv = np.ascontiguousarray(X, dtype=np.float64)
    cdef Py_ssize_t n = Xv.shape[0]
    cdef Py_ssize_t n_layers = len(weights)
    cdef Py_ssize_t maxw = Xv.shape[1]
    cdef Py_ssize_t layer
    for layer in range(n_layers):
        if weights[layer].shape[0] > maxw:
            maxw = weights[layer].shape[0]
    cdef Py_ssize_t k_out = weights[n_layers - 1].shape[0]
    out = np.empty((n, k_out), dtype=np.float64)
    cdef double[:, ::1] ov = out
    H = np.ascontiguousarray(X, dtype=np.float64).copy()
    cdef double[:, ::1] hv = H
    cdef double[:, ::1] nv
    cdef double[:, ::1] Wv
    cdef double[::1] bv
    cdef Py_ssize_t s, j, i, n_out, n_in
    cdef double acc
    for layer in range(n_layers):
        Wv = np.ascontiguousarray(weights[layer], dtype=np.float64)
        bv = np.ascontiguousarray(biases[layer], dtype=np.float64)
        n_out = Wv.shape[0]
        n_in = Wv.shape[1]
        nxt = np.empty((n, n_out), dtype=np.float64)
        nv = nxt
        for s in range(n):
            for j in range(n_out):
                acc = bv[j]
                for i in range(n_in):
                    acc = acc + Wv[j, i] * hv[s, i]
                if layer < n_layers - 1:
                    if act == A_TANH:
                        acc = c_tanh(acc)
                    elif act == A_RELU:
                        acc = acc if acc > 0.0 else 0.0
                nv[s, j] = acc
        hv = nv
    for s in range(n):
        for j in range(k_out):
            ov[s, j] = hv[s, j]
    return out


def energy_batch(logits):
    """Free energy -logsumexp(logits) per row, same op order as the tape."""
    cdef double[:, ::1] lv = np.ascontiguousarray(logits, dtype=np.float64)
    cdef Py_ssize_t n = lv.shape[0]
    cdef Py_ssize_t k = lv.shape[1]
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] ov = out
    cdef Py_ssize_t s, j
    cdef double m, acc
    for s in range(n):
        m = lv[s, 0]
        for j in range(1, k):
            if not m >= lv[s, j]:
                m = lv[s, j]
        acc = c_exp(lv[s, 0] - m)
        for j in range(1, k):
            acc = acc + c_exp(lv[s, j] - m)
        ov[s] = -(m + c_log(acc))
    return out


def ce_batch(logits, labels0):
    """Per-row cross-entropy with 0-based labels; mirrors _core_py.ce_batch."""
    cdef double[:, ::1] lv = np.ascontiguousarray(logits, dtype=np.float64)
    cdef long long[::1] yv = np.ascontiguousarray(labels0, dtype=np.int64)
    cdef Py_ssize_t n = lv.shape[0]
    cdef Py_ssize_t k = lv.shape[1]
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] ov = out
    cdef Py_ssize_t s, j
    cdef double m, acc
    for s in range(n):
        m = lv[s, 0]
        for j in range(1, k):
            if not m >= lv[s, j]:
                m = lv[s, j]
        acc = c_exp(lv[s, 0] - m)
        for j in range(1, k):
            acc = acc + c_exp(lv[s, j] - m)
        ov[s] = (m + c_log(acc)) - lv[s, yv[s]]
    return out
