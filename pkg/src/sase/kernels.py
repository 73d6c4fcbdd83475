"""Kernel backend selection.

The compiled extension is preferred when it imported cleanly; setting
``SASE_PURE_PYTHON=1`` forces the numpy fallback (used by the benchmark
to compare both paths).  Both backends implement the same contract and
agree to floating-point roundoff.
"""

from __future__ import annotations

import os

from . import _kernels_py

if os.environ.get("SASE_PURE_PYTHON") == "1":
    _impl = _kernels_py
else:
    try:
        from . import _filtercy as _impl  # type: ignore[no-redef]
    except ImportError:
        _impl = _kernels_py

BACKEND: str = _impl.BACKEND
filter_interval = _impl.filter_interval
