"""Pure numpy convolution kernels (fallback backend).

Stride-1 cross-correlation with zero padding, expressed as im2col windows
contracted with tensordot so the heavy lifting lands in BLAS.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def conv2d_forward(x: np.ndarray, w: np.ndarray, pad: int) -> np.ndarray:
    """x: (N, Cin, H, W), w: (Cout, Cin, kh, kw) -> (N, Cout, Ho, Wo)."""
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    windows = sliding_window_view(x, (w.shape[2], w.shape[3]), axis=(2, 3))
    # windows: (N, Cin, Ho, Wo, kh, kw)
    y = np.tensordot(windows, w, axes=([1, 4, 5], [1, 2, 3]))
    return np.ascontiguousarray(np.moveaxis(y, 3, 1))


def conv2d_backward_weight(gy: np.ndarray, x: np.ndarray, pad: int) -> np.ndarray:
    """gy: (N, Cout, Ho, Wo), x: (N, Cin, H, W) -> (Cout, Cin, kh, kw)."""
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho, wo = gy.shape[2], gy.shape[3]
    windows = sliding_window_view(x, (ho, wo), axis=(2, 3))
    # windows: (N, Cin, kh, kw, Ho, Wo)
    return np.ascontiguousarray(np.tensordot(gy, windows, axes=([0, 2, 3], [0, 4, 5])))
