"""Scalar reverse-mode automatic differentiation on an explicit tape.

A ``Tape`` records elementary scalar operations (add, sub, mul, div, exp,
log, neg, max2, relu, tanh) in topological order. Handles are plain
integers indexing nodes on the tape. ``Tape.backward(root)`` performs one
reverse sweep and returns the adjoint of every node, i.e. a gradient map
over all handles.

Conventions, fixed so results are deterministic:

* double precision throughout;
* ``relu`` derivative at exactly 0 is 0;
* ``max2`` resolves value ties to its first parent;
* a tape is built fresh per forward pass and is single-threaded; the
  returned gradient arrays are plain numpy arrays, safe to share.

The heavy loops live in :mod:`scone._kernels` (compiled when available,
pure Python otherwise); this module is the stable public surface.
"""

from ._kernels import BACKEND, Tape
from ._kernels.ops import OP_NAMES
from .errors import DomainError

#: Valid ``kind`` strings for :meth:`Tape.apply`, constants excluded.
OP_KINDS = tuple(name for name in OP_NAMES if name != "const")

VarHandle = int

__all__ = ["Tape", "VarHandle", "DomainError", "OP_KINDS", "BACKEND"]
