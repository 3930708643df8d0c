"""Pure-numpy convolution kernels (fallback backend).

im2col is a strided view materialized by reshape; col2im accumulates with
k*k vectorized adds, so no np.add.at scatter is needed. The GEMM itself is
done by the caller through numpy/BLAS in both backends.
"""

import numpy as np
from numpy.lib.stride_tricks import as_strided

NAME = "numpy"


def im2col(xp, k, stride, out_h, out_w):
    """Lower a padded image batch [B,C,Hp,Wp] to columns [B, C*k*k, out_h*out_w]."""
    b, c, _, _ = xp.shape
    sb, sc, sh, sw = xp.strides
    view = as_strided(
        xp,
        shape=(b, c, k, k, out_h, out_w),
        strides=(sb, sc, sh, sw, sh * stride, sw * stride),
        writeable=False,
    )
    return np.ascontiguousarray(view).reshape(b, c * k * k, out_h * out_w)


def col2im(cols, c, k, stride, hp, wp, out_h, out_w):
    """Adjoint of im2col: scatter-add columns back to a padded image batch."""
    b = cols.shape[0]
    six = cols.reshape(b, c, k, k, out_h, out_w)
    xp = np.zeros((b, c, hp, wp), dtype=cols.dtype)
    for ki in range(k):
        for kj in range(k):
            xp[:, :, ki : ki + stride * out_h : stride, kj : kj + stride * out_w : stride] += six[
                :, :, ki, kj, :, :
            ]
    return xp
