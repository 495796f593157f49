"""Shared builders for the engine tests."""

import numpy as np

from qarvd.dual_scale import build_plan
from qarvd.engine import QuantizedLayer
from qarvd.quant import QuantParams, init_scale_minmax


def random_layer(rng, name="l"):
    """Random quantized layer: bitwidths, shape, outlier split and activation range all vary."""
    w_bits = int(rng.choice([4, 6, 8]))
    a_bits = int(rng.choice([6, 8]))
    d_out = int(rng.integers(1, 17))
    d_in = int(rng.integers(2, 97))
    w = rng.standard_normal((d_out, d_in))
    k = 0 if rng.random() < 0.3 else int(rng.integers(1, d_in))  # 0 disables dual-scale
    idx = np.sort(rng.choice(d_in, k, replace=False))
    w[:, idx] *= rng.uniform(2, 12)
    plan = build_plan(w, idx, w_bits, name)
    x = rng.standard_normal((int(rng.integers(1, 6)), d_in)) * rng.uniform(0.1, 5)
    act = init_scale_minmax(x, a_bits, symmetric=bool(rng.integers(0, 2)))
    if rng.random() < 0.3:
        # tighter than the data so some inputs clip
        act = act.with_scale(act.scale * 0.5)
    return QuantizedLayer.from_weight(name, w, plan, act, w_bits), x


def oracle_linear(layer, x):
    """Scale times exact integer dot, written with Python integers."""
    p = layer.act
    xq = np.clip(np.rint(x / p.scale) + p.zero_point, p.q_min, p.q_max).astype(np.int64)
    perm = layer.plan.permutation
    split = layer.split
    codes = layer.codes.data.astype(np.int64)
    s_w = layer.group_scales()
    out = np.zeros((x.shape[0], layer.d_out))
    for i in range(x.shape[0]):
        xi = [int(v) - int(p.zero_point) for v in xq[i, perm]]
        for n in range(layer.d_out):
            dots = [0, 0]
            for j in range(layer.d_in):
                dots[0 if j < split else 1] += xi[j] * int(codes[n, j])
            acc = 0.0
            if split:
                acc += (float(p.scale) * s_w[0, n]) * float(dots[0])
            acc += (float(p.scale) * s_w[1, n]) * float(dots[1])
            out[i, n] = acc
    return out


def per_tensor_act(x, bits=8):
    return init_scale_minmax(x, bits)


__all__ = ["QuantParams", "oracle_linear", "per_tensor_act", "random_layer"]
