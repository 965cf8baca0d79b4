"""Kernel backend selection.

Two implementations of the hot loops exist: a compiled extension
(qbound._core) and numpy fallbacks (qbound._core_py).  Set QBOUND_NO_EXT=1
to force the fallback.  Both agree to float64 round-off and every kernel
test runs against each.

When the extension is available, calls are routed by problem size:
benchmarks/bench_kernels.py shows the direct compiled loops win on small
and grouped problems (tight per-call overhead, depthwise locality) while
numpy's BLAS-backed einsum wins once the per-output inner product gets
long, so channel-heavy convolutions go to numpy.
"""

import os

import numpy as np

from . import _core_py

if os.environ.get("QBOUND_NO_EXT") == "1":
    _ext = None
else:
    try:
        from . import _core as _ext  # type: ignore[no-redef]
    except ImportError:
        _ext = None

HAVE_EXT = _ext is not None
BACKEND = "compiled" if HAVE_EXT else "numpy"

# routing thresholds, chosen from benchmarks/bench_kernels.py timings
_CONV_DIRECT_MAX_WORK = 512  # (in_ch/groups * k^2) * (out_ch/groups)
_ROWSUM_DIRECT_MAX_WORK = 1 << 14  # out_ch * out positions * k^2


def conv2d_forward(x, w, stride=1, pad=0, groups=1):
    """Convolve a batch (n, c, h, w) with filters (o, c/groups, p, p)."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    w = np.ascontiguousarray(w, dtype=np.float64)
    o, cg, p, _ = w.shape
    if _ext is not None and cg * p * p * (o // groups) <= _CONV_DIRECT_MAX_WORK:
        return np.asarray(_ext.conv2d_forward(x, w, stride, pad, groups))
    return _core_py.conv2d_forward(x, w, stride, pad, groups)


def conv_rowsum_max(w, in_hw, stride=1, pad=0, groups=1, bias=None):
    """Max absolute row sum of the implicit convolution matrix; `bias`
    adds |b_oc| to every row of channel oc (augmented-matrix norm)."""
    w = np.ascontiguousarray(w, dtype=np.float64)
    h, wd = in_hw
    o, _, p, _ = w.shape
    ho = (h + 2 * pad - p) // stride + 1
    wo = (wd + 2 * pad - p) // stride + 1
    if (
        bias is None
        and _ext is not None
        and o * max(ho, 0) * max(wo, 0) * p * p <= _ROWSUM_DIRECT_MAX_WORK
    ):
        return float(_ext.conv_rowsum_max(w, h, wd, stride, pad, groups))
    return float(_core_py.conv_rowsum_max(w, h, wd, stride, pad, groups, bias))
