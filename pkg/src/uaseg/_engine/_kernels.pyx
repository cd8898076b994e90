# Compiled convolution kernels: stride-1 cross-correlation with zero padding.
# Shift-and-accumulate loop structure keeps the innermost loop contiguous.

import numpy as np

cimport cython
cimport numpy as cnp

cnp.import_array()

ctypedef fused floating:
    float
    double


@cython.boundscheck(False)
@cython.wraparound(False)
def conv2d_forward(floating[:, :, :, ::1] x, floating[:, :, :, ::1] w, int pad):
    """x: (N, Cin, H, W), w: (Cout, Cin, kh, kw) -> (N, Cout, Ho, Wo)."""
    cdef Py_ssize_t N = x.shape[0], Cin = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t Cout = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t Ho = H + 2 * pad - kh + 1
    cdef Py_ssize_t Wo = W + 2 * pad - kw + 1
    if floating is float:
        y_arr = np.zeros((N, Cout, Ho, Wo), dtype=np.float32)
    else:
        y_arr = np.zeros((N, Cout, Ho, Wo), dtype=np.float64)
    cdef floating[:, :, :, ::1] y = y_arr
    cdef Py_ssize_t n, o, c, u, v, i, j, ii, jj, i0, i1, j0, j1
    cdef floating wv
    with nogil:
        for n in range(N):
            for o in range(Cout):
                for c in range(Cin):
                    for u in range(kh):
                        # rows where ii = i + u - pad stays inside [0, H)
                        i0 = pad - u if pad - u > 0 else 0
                        i1 = H + pad - u if H + pad - u < Ho else Ho
                        for v in range(kw):
                            wv = w[o, c, u, v]
                            if wv == 0:
                                continue
                            j0 = pad - v if pad - v > 0 else 0
                            j1 = W + pad - v if W + pad - v < Wo else Wo
                            for i in range(i0, i1):
                                ii = i + u - pad
                                for j in range(j0, j1):
                                    y[n, o, i, j] += wv * x[n, c, ii, j + v - pad]
    return y_arr


@cython.boundscheck(False)
@cython.wraparound(False)
def conv2d_backward_weight(floating[:, :, :, ::1] gy, floating[:, :, :, ::1] x, int pad):
    """gy: (N, Cout, Ho, Wo), x: (N, Cin, H, W) -> (Cout, Cin, kh, kw).

    Row partials accumulate in the storage dtype (rows are short), then sum
    across rows and images in double, so the cross-image reduction order
    cannot swamp small contributions.
    """
    cdef Py_ssize_t N = x.shape[0], Cin = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t Cout = gy.shape[1], Ho = gy.shape[2], Wo = gy.shape[3]
    cdef Py_ssize_t kh = H + 2 * pad - Ho + 1
    cdef Py_ssize_t kw = W + 2 * pad - Wo + 1
    gw64_arr = np.zeros((Cout, Cin, kh, kw), dtype=np.float64)
    cdef double[:, :, :, ::1] gw64 = gw64_arr
    cdef Py_ssize_t n, o, c, u, v, i, j, ii, jo, i0, i1, j0, j1
    cdef double acc
    cdef floating racc
    with nogil:
        for n in range(N):
            for o in range(Cout):
                for c in range(Cin):
                    for u in range(kh):
                        i0 = pad - u if pad - u > 0 else 0
                        i1 = H + pad - u if H + pad - u < Ho else Ho
                        for v in range(kw):
                            j0 = pad - v if pad - v > 0 else 0
                            j1 = W + pad - v if W + pad - v < Wo else Wo
                            jo = v - pad
                            acc = 0.0
                            for i in range(i0, i1):
                                ii = i + u - pad
                                racc = 0
                                for j in range(j0, j1):
                                    racc = racc + gy[n, o, i, j] * x[n, c, ii, j + jo]
                                acc += <double> racc
                            gw64[o, c, u, v] += acc
    if floating is float:
        return gw64_arr.astype(np.float32)
    return gw64_arr
