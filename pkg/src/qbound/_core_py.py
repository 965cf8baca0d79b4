"""Pure-numpy implementations of the hot kernels.

Used when the compiled extension is unavailable (or disabled with
QBOUND_NO_EXT=1).  Both implementations must agree to float64 rounding;
the test suite runs every kernel test against each backend.
"""

import numpy as np


def conv2d_forward(x, w, stride, pad, groups):
    """Direct 2-D convolution (cross-correlation) on a batch.

    x: (batch, in_ch, h, w), w: (out_ch, in_ch/groups, p, p), zero padding.
    Returns (batch, out_ch, h_out, w_out).
    """
    b, c, h, wd = x.shape
    o, cg, p, _ = w.shape
    ho = (h + 2 * pad - p) // stride + 1
    wo = (wd + 2 * pad - p) // stride + 1
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    sb, sc, sh, sw = x.strides
    win = np.lib.stride_tricks.as_strided(
        x,
        shape=(b, c, ho, wo, p, p),
        strides=(sb, sc, sh * stride, sw * stride, sh, sw),
        writeable=False,
    )
    out = np.empty((b, o, ho, wo), dtype=np.float64)
    og = o // groups
    for g in range(groups):
        cols = win[:, g * cg : (g + 1) * cg]  # (b, cg, ho, wo, p, p)
        wg = w[g * og : (g + 1) * og]  # (og, cg, p, p)
        out[:, g * og : (g + 1) * og] = np.einsum(
            "bcyxkl,ockl->boyx", cols, wg, optimize=True
        )
    return out


def conv_rowsum_max(w, h, wd, stride, pad, groups, bias=None):
    """Largest absolute row sum of the implicit convolution matrix.

    Scans every output position; boundary rows see fewer in-bounds taps,
    so the result is exact even when no interior row exists.  A bias adds
    |b_oc| to every row of output channel oc (the augmented-matrix view).
    """
    o, cg, p, _ = w.shape
    ho = (h + 2 * pad - p) // stride + 1
    wo = (wd + 2 * pad - p) // stride + 1
    if ho <= 0 or wo <= 0:
        return 0.0
    a = np.abs(w).sum(axis=1)  # (o, p, p): per-tap weight mass
    iy = stride * np.arange(ho)[:, None] - pad + np.arange(p)[None, :]
    ix = stride * np.arange(wo)[:, None] - pad + np.arange(p)[None, :]
    my = ((iy >= 0) & (iy < h)).astype(np.float64)
    mx = ((ix >= 0) & (ix < wd)).astype(np.float64)
    sums = np.einsum("okl,yk,xl->oyx", a, my, mx, optimize=True)
    if bias is not None:
        sums = sums + np.abs(bias)[:, None, None]
    return float(sums.max())
