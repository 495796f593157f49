import numba as nb
import numpy as np


@nb.njit(cache=True, nogil=True)
def matmul_strict(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n), dtype=np.float64)
    # i-p-j order: every out[i, j] accumulates p ascending, one product at a time.
    # Four rows share each load of b[p, :]; the per-element order is unchanged.
    i = 0
    while i + 4 <= m:
        for p in range(k):
            a0 = a[i, p]
            a1 = a[i + 1, p]
            a2 = a[i + 2, p]
            a3 = a[i + 3, p]
            for j in range(n):
                bv = b[p, j]
                out[i, j] += a0 * bv
                out[i + 1, j] += a1 * bv
                out[i + 2, j] += a2 * bv
                out[i + 3, j] += a3 * bv
        i += 4
    for r in range(i, m):
        for p in range(k):
            av = a[r, p]
            for j in range(n):
                out[r, j] += av * b[p, j]
    return out


@nb.njit(cache=True, nogil=True)
def channel_l2_norms(w):
    d_out, d_in = w.shape
    acc = np.zeros(d_in, dtype=np.float64)
    for i in range(d_out):
        for j in range(d_in):
            acc[j] += w[i, j] * w[i, j]
    return np.sqrt(acc)


@nb.njit(cache=True, nogil=True)
def quantize_codes(x, scale, zero_point, q_min, q_max):
    # x, scale, zero_point pre-broadcast to the same 2-D shape
    m, n = x.shape
    out = np.empty((m, n), dtype=np.int64)
    for i in range(m):
        for j in range(n):
            q = np.rint(x[i, j] / scale[i, j]) + zero_point[i, j]
            if q < q_min:
                q = q_min
            elif q > q_max:
                q = q_max
            out[i, j] = np.int64(q)
    return out


@nb.njit(cache=True, nogil=True)
def int_gemm_groups(xq, wq, split):
    """acc[g, i, n] = sum over group-g columns of xq[i, :] * wq[n, :]."""
    m, k = xq.shape
    n_out = wq.shape[0]
    acc = np.zeros((2, m, n_out), dtype=np.int64)
    for i in range(m):
        for n in range(n_out):
            s0 = np.int64(0)
            for p in range(split):
                s0 += np.int64(xq[i, p]) * np.int64(wq[n, p])
            s1 = np.int64(0)
            for p in range(split, k):
                s1 += np.int64(xq[i, p]) * np.int64(wq[n, p])
            acc[0, i, n] = s0
            acc[1, i, n] = s1
    return acc
