"""Dual-scale weight quantization: outlier and normal input channels get independent scales."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .outliers import OutlierReport
from .quant import QuantParams, fake_quant, init_scale_minmax
from .tensor_core import DimensionError, as_tensor


@dataclass(frozen=True)
class DualScalePlan:
    layer_name: str
    d_in: int
    outlier_indices: np.ndarray
    normal_indices: np.ndarray
    permutation: np.ndarray
    params_normal: QuantParams
    params_outlier: QuantParams | None = None

    @property
    def enabled(self):
        return self.outlier_indices.size > 0

    @property
    def n_outlier(self):
        return int(self.outlier_indices.size)

    @property
    def inverse_permutation(self):
        return inverse_permutation(self.permutation)


def inverse_permutation(perm):
    inv = np.empty_like(perm)
    inv[perm] = np.arange(perm.size, dtype=perm.dtype)
    return inv


def single_scale_params(w, bits):
    """Baseline quantizer: symmetric MinMax, one scale per output channel."""
    return init_scale_minmax(w, bits, axis=0)


def build_plan(w, report, bits, layer_name=None):
    """Split ``w`` by the report's aligned outliers and fit a scale per group and row.

    ``report`` may be an :class:`OutlierReport` or a plain index array.
    """
    w = as_tensor(w)
    if w.ndim != 2:
        raise DimensionError(f"weight must be 2-D, got {w.shape}")
    d_in = w.shape[1]
    if isinstance(report, OutlierReport):
        if report.d_in != d_in:
            raise DimensionError(f"report covers {report.d_in} channels, weight has {d_in}")
        idx = report.aligned_outliers
        layer_name = layer_name or report.layer_name
    else:
        idx = report
    idx = np.unique(np.asarray(idx, dtype=np.int64))
    if idx.size and (idx[0] < 0 or idx[-1] >= d_in):
        raise IndexError(f"outlier index out of range for d_in={d_in}")
    if idx.size == d_in:
        raise ValueError("dual-scale split needs a non-empty normal group")
    mask = np.zeros(d_in, dtype=bool)
    mask[idx] = True
    normal = np.flatnonzero(~mask)
    if idx.size == 0:
        return DualScalePlan(layer_name or "", d_in, idx, normal, np.arange(d_in),
                             single_scale_params(w, bits))
    return DualScalePlan(
        layer_name or "",
        d_in,
        idx,
        normal,
        np.concatenate([idx, normal]),
        init_scale_minmax(w[:, normal], bits, axis=0),
        init_scale_minmax(w[:, idx], bits, axis=0),
    )


def fake_quant_dual(w, plan):
    """Fake-quantize each column group with its own quantizer, original column order."""
    w = as_tensor(w)
    if w.ndim != 2 or w.shape[1] != plan.d_in:
        raise DimensionError(f"plan expects {plan.d_in} input channels, weight is {w.shape}")
    if not plan.enabled:
        return fake_quant(w, plan.params_normal)
    out = np.empty_like(w)
    out[:, plan.normal_indices] = fake_quant(w[:, plan.normal_indices], plan.params_normal)
    out[:, plan.outlier_indices] = fake_quant(w[:, plan.outlier_indices], plan.params_outlier)
    return out


def group_scale_matrix(plan, d_out):
    """Per-element weight scale ``[d_out, d_in]`` in original column order."""
    s = np.empty((d_out, plan.d_in))
    s[:, plan.normal_indices] = plan.params_normal.scale[:, None]
    if plan.enabled:
        s[:, plan.outlier_indices] = plan.params_outlier.scale[:, None]
    return s
