"""Pure-numpy reference versions of the hot convolution/pooling kernels.

Layouts match the compiled module exactly so either can back ``tensor.conv2d``:

* ``im2col3x3(x)`` maps ``x[N, C, H, W]`` to ``cols[N*H*W, C*9]`` with zero
  padding 1; row ``(n*H + i)*W + j``, column ``c*9 + di*3 + dj``.
* ``col2im3x3`` is its adjoint (scatter-add back into ``[N, C, H, W]``).
* ``avgpool2x2`` / ``avgpool2x2_backward`` average non-overlapping 2x2 windows.
"""

import numpy as np


def im2col3x3(x):
    n, c, h, w = x.shape
    padded = np.zeros((n, c, h + 2, w + 2), dtype=np.float64)
    padded[:, :, 1:-1, 1:-1] = x
    cols = np.empty((n, h, w, c, 3, 3), dtype=np.float64)
    for di in range(3):
        for dj in range(3):
            cols[:, :, :, :, di, dj] = padded[:, :, di:di + h, dj:dj + w].transpose(0, 2, 3, 1)
    return cols.reshape(n * h * w, c * 9)


def col2im3x3(cols, n, c, h, w):
    blocks = cols.reshape(n, h, w, c, 3, 3)
    padded = np.zeros((n, c, h + 2, w + 2), dtype=np.float64)
    for di in range(3):
        for dj in range(3):
            padded[:, :, di:di + h, dj:dj + w] += blocks[:, :, :, :, di, dj].transpose(0, 3, 1, 2)
    return np.ascontiguousarray(padded[:, :, 1:-1, 1:-1])


def avgpool2x2(x):
    n, c, h, w = x.shape
    return x.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))


def avgpool2x2_backward(g, h, w):
    n, c = g.shape[:2]
    out = np.empty((n, c, h, w), dtype=np.float64)
    q = 0.25 * g
    out[:, :, 0::2, 0::2] = q
    out[:, :, 0::2, 1::2] = q
    out[:, :, 1::2, 0::2] = q
    out[:, :, 1::2, 1::2] = q
    return out
