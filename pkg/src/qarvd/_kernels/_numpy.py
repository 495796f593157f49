import numpy as np


def matmul_strict(a, b):
    m, k = a.shape
    out = np.zeros((m, b.shape[1]), dtype=np.float64)
    # rank-1 updates in p order keep the per-element summation order of the naive loop
    for p in range(k):
        out += a[:, p, None] * b[p]
    return out


def channel_l2_norms(w):
    acc = np.zeros(w.shape[1], dtype=np.float64)
    for i in range(w.shape[0]):
        acc += w[i] * w[i]
    return np.sqrt(acc)


def quantize_codes(x, scale, zero_point, q_min, q_max):
    q = np.rint(x / scale) + zero_point
    return np.clip(q, q_min, q_max).astype(np.int64)


def int_gemm_groups(xq, wq, split):
    xq = xq.astype(np.int64)
    wq = wq.astype(np.int64)
    acc = np.empty((2, xq.shape[0], wq.shape[0]), dtype=np.int64)
    acc[0] = xq[:, :split] @ wq[:, :split].T
    acc[1] = xq[:, split:] @ wq[:, split:].T
    return acc
