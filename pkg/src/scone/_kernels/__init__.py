"""Kernel backend selection.

The hot numerical loops (tape construction, reverse sweep, no-tape
inference) exist twice: a Cython extension (``_core_cy``) and a pure-Python
twin (``_core_py``). The extension is used when importable; set
``SCONE_KERNELS=py`` to force the fallback or ``SCONE_KERNELS=ext`` to
require the extension. Both produce bit-identical numbers; only speed
differs (see benchmarks/bench_tape.py).
"""

import os

from . import _core_py

_requested = os.environ.get("SCONE_KERNELS", "auto").lower()
if _requested not in ("auto", "ext", "py"):
    raise RuntimeError(
        f"SCONE_KERNELS must be one of auto/ext/py, got {_requested!r}"
    )

if _requested == "py":
    core = _core_py
else:
    try:
        from . import _core_cy as core  # type: ignore[no-redef]
    except ImportError:
        if _requested == "ext":
            raise
        core = _core_py

BACKEND = core.BACKEND

Tape = core.Tape
forward_batch = core.forward_batch
energy_batch = core.energy_batch
ce_batch = core.ce_batch
