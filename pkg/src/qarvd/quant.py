"""Uniform affine quantizers, scale initialization and the rounding-error model."""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .tensor_core import SUPPORTED_BITS, IntTensor, as_tensor, qrange

PERCENTILE_CANDIDATES = (0.999, 0.9999, 0.99999)
TINY_SCALE = np.finfo(np.float64).tiny


class QuantParamError(ValueError):
    """Invalid quantization parameters."""


class QuantInputError(ValueError):
    """Input tensor cannot be quantized (e.g. non-finite values)."""


@dataclass(frozen=True)
class QuantParams:
    """Scale, zero-point and integer range of a uniform quantizer.

    ``axis`` is ``None`` for a per-tensor quantizer; otherwise it is the
    axis of the quantized tensor that ``scale`` runs along (``axis=0`` on a
    ``[d_out, d_in]`` weight gives one scale per output channel).
    """

    bits: int
    scale: np.ndarray
    zero_point: np.ndarray
    q_min: int
    q_max: int
    symmetric: bool = True
    axis: int | None = None

    def __post_init__(self):
        if self.bits not in SUPPORTED_BITS:
            raise QuantParamError(f"bits must be one of {SUPPORTED_BITS}, got {self.bits}")
        scale = np.array(self.scale, dtype=np.float64)
        zp = np.array(self.zero_point, dtype=np.int64)
        if self.axis is None and scale.ndim != 0:
            raise QuantParamError("per-tensor params need a scalar scale")
        if self.axis is not None and scale.ndim != 1:
            raise QuantParamError("per-channel params need a 1-D scale vector")
        if not np.all(np.isfinite(scale)) or np.any(scale <= 0):
            raise QuantParamError("scale must be positive and finite")
        zp = np.broadcast_to(zp, scale.shape).copy()
        if self.symmetric:
            lo, hi = qrange(self.bits, symmetric=True)
            if np.any(zp != 0):
                raise QuantParamError("symmetric quantizer requires zero_point == 0")
            if (self.q_min, self.q_max) != (lo, hi):
                raise QuantParamError(f"symmetric {self.bits}-bit range must be [{lo}, {hi}]")
        if self.q_min >= self.q_max:
            raise QuantParamError("q_min must be below q_max")
        scale.setflags(write=False)
        zp.setflags(write=False)
        object.__setattr__(self, "scale", scale)
        object.__setattr__(self, "zero_point", zp)

    @classmethod
    def symmetric_from_scale(cls, scale, bits, axis=None):
        lo, hi = qrange(bits, symmetric=True)
        scale = np.asarray(scale, dtype=np.float64)
        return cls(bits, scale, np.zeros(scale.shape, dtype=np.int64), lo, hi, True, axis)

    @property
    def per_channel(self):
        return self.axis is not None

    def with_scale(self, scale):
        return QuantParams(self.bits, scale, self.zero_point, self.q_min, self.q_max,
                           self.symmetric, self.axis)

    def _broadcast(self, arr, shape):
        if self.axis is None:
            return np.broadcast_to(arr, shape)
        ndim = len(shape)
        axis = self.axis % ndim
        if shape[axis] != arr.shape[0]:
            raise QuantParamError(
                f"per-channel length {arr.shape[0]} does not match axis {axis} of shape {shape}")
        view = [1] * ndim
        view[axis] = arr.shape[0]
        return np.broadcast_to(arr.reshape(view), shape)

    def broadcast_scale(self, shape):
        return self._broadcast(self.scale, shape)

    def broadcast_zero_point(self, shape):
        return self._broadcast(self.zero_point, shape)


@dataclass(frozen=True)
class BitwidthScheme:
    """Weight/activation bit-widths, e.g. W4A8.

    ``weight_bits=None`` and ``activation_bits=None`` denote the lossless
    scheme used to check that the quantized code paths are exact when
    no precision is removed.
    """

    weight_bits: int | None
    activation_bits: int | None

    def __post_init__(self):
        for b in (self.weight_bits, self.activation_bits):
            if b is not None and b not in SUPPORTED_BITS:
                raise QuantParamError(f"bit-width must be one of {SUPPORTED_BITS}, got {b}")
        if (self.weight_bits is None) != (self.activation_bits is None):
            raise QuantParamError("lossless scheme needs both bit-widths unset")

    @property
    def lossless(self):
        return self.weight_bits is None

    @property
    def name(self):
        if self.lossless:
            return "FP"
        return f"W{self.weight_bits}A{self.activation_bits}"

    @classmethod
    def parse(cls, text):
        t = text.strip().upper()
        if t in ("FP", "LOSSLESS"):
            return cls(None, None)
        m = re.fullmatch(r"W(\d+)A(\d+)", t)
        if not m:
            raise QuantParamError(f"cannot parse bit-width scheme {text!r}")
        return cls(int(m.group(1)), int(m.group(2)))

    def __str__(self):
        return self.name


def _codes(x, p):
    x = as_tensor(x)
    if not np.all(np.isfinite(x)):
        raise QuantInputError("cannot quantize non-finite values")
    shape = x.shape
    x2 = x.reshape(1, -1) if x.ndim <= 1 else x.reshape(-1, shape[-1])
    s = p.broadcast_scale(shape).reshape(x2.shape)
    z = p.broadcast_zero_point(shape).reshape(x2.shape).astype(np.float64)
    return _kernels.quantize_codes(x2, s, z, float(p.q_min), float(p.q_max)).reshape(shape)


def quantize(x, p):
    """clip(round_half_even(x / s) + z, q_min, q_max) as an :class:`IntTensor`."""
    return IntTensor(_codes(x, p), p.bits, p.q_min, p.q_max)


def dequantize(q, p):
    """(q - z) * s, elementwise."""
    if isinstance(q, IntTensor):
        if q.bits != p.bits:
            raise QuantParamError(f"bit-width mismatch: codes {q.bits}, params {p.bits}")
        codes = q.data
    else:
        codes = np.asarray(q)
    codes = codes.astype(np.int64)
    z = p.broadcast_zero_point(codes.shape)
    s = p.broadcast_scale(codes.shape)
    return (codes - z).astype(np.float64) * s


def fake_quant(x, p):
    """Quantize then dequantize."""
    codes = _codes(x, p)
    return (codes - p.broadcast_zero_point(codes.shape)).astype(np.float64) * p.broadcast_scale(
        codes.shape)


def _reduce_axes(ndim, axis):
    axis = axis % ndim
    return tuple(i for i in range(ndim) if i != axis)


def init_scale_minmax(x, bits, axis=None, symmetric=True):
    """MinMax scale: s = max|x| / (2^(b-1) - 1) per tensor or per channel.

    All-zero slices get the smallest positive normal float as their scale so
    quantization stays total and zeros stay exact.
    """
    x = as_tensor(x)
    if symmetric:
        amax = np.max(np.abs(x)) if axis is None else np.max(np.abs(x), axis=_reduce_axes(x.ndim, axis))
        lo, hi = qrange(bits, symmetric=True)
        scale = np.where(amax > 0, amax / hi, TINY_SCALE)
        return QuantParams(bits, scale, np.zeros(scale.shape, np.int64), lo, hi, True, axis)
    if axis is None:
        xmin, xmax = np.min(x), np.max(x)
    else:
        red = _reduce_axes(x.ndim, axis)
        xmin, xmax = np.min(x, axis=red), np.max(x, axis=red)
    return _asymmetric_params(xmin, xmax, bits, axis)


def _asymmetric_params(xmin, xmax, bits, axis):
    lo, hi = qrange(bits, symmetric=False)
    # the range always covers 0 so that zero is exactly representable
    xmin = np.minimum(np.asarray(xmin, dtype=np.float64), 0.0)
    xmax = np.maximum(np.asarray(xmax, dtype=np.float64), 0.0)
    span = xmax - xmin
    scale = np.where(span > 0, span / (hi - lo), TINY_SCALE)
    zp = np.clip(np.rint(lo - xmin / scale), lo, hi).astype(np.int64)
    return QuantParams(bits, scale, zp, lo, hi, False, axis)


def _mean_mse(samples, p):
    return float(np.mean([np.mean((fake_quant(s, p) - s) ** 2) for s in samples]))


def init_scale_percentile_search(samples, bits, symmetric=True, candidates=PERCENTILE_CANDIDATES):
    """Per-tensor scale from the best clipping percentile.

    For every candidate percentile the clip threshold is that quantile of
    the pooled absolute values (linear interpolation between order
    statistics). The candidate with the lowest mean fake-quant MSE over the
    samples wins; ties go to the larger percentile.

    Returns:
        (QuantParams, chosen percentile, {percentile: mse})
    """
    samples = [as_tensor(s) for s in samples]
    if not samples:
        raise ValueError("percentile search needs at least one calibration sample")
    pooled = np.concatenate([s.ravel() for s in samples])
    if not np.all(np.isfinite(pooled)):
        raise QuantInputError("calibration samples contain non-finite values")
    lo, hi = qrange(bits, symmetric=symmetric)
    absvals = np.abs(pooled)
    best = None
    errors = {}
    for pct in sorted(candidates, reverse=True):
        if symmetric:
            thr = float(np.quantile(absvals, pct))
            p = QuantParams(bits, thr / hi if thr > 0 else TINY_SCALE, 0, lo, hi, True, None)
        else:
            p = _asymmetric_params(np.quantile(pooled, 1.0 - pct), np.quantile(pooled, pct), bits, None)
        err = _mean_mse(samples, p)
        errors[pct] = err
        if best is None or err < best[2]:
            best = (p, pct, err)
    return best[0], best[1], errors


def expected_rounding_error(p):
    """Model value of E|x_hat - x| for uniformly distributed rounding error: s / 4."""
    return p.scale / 4.0
