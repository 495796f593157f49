"""Simulated integer deployment path.

Two kernels mirror a real W{x}A8 deployment: kernel A turns float
activations into integer codes with the layer's static per-tensor
quantizer, kernel B runs an exact integer GEMM per column group and folds
the group scales (and the activation zero-point correction) into the
float result. Outlier columns are moved to the front offline, so the
activations are permuted the same way before kernel A.

Scales are kept at float32 precision throughout, which is what the file
stores; a loaded model therefore computes exactly what the saved one did.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import ml_dtypes
import numpy as np

from . import _kernels
from .dual_scale import DualScalePlan, build_plan
from .quant import BitwidthScheme, QuantParams, fake_quant, quantize
from .tensor_core import DimensionError, IntTensor, TensorFormatError, as_tensor, matmul, \
    packed_nbytes, qrange
from .toy_model import DEFAULT_KEEP_LIST, ToyModel, ToyModelConfig, is_kept

QMODEL_MAGIC = b"QARQ"
QMODEL_VERSION = 1
PREFIX = struct.Struct("<4sHI")
MAX_K = 2 ** 15
ACC_LIMIT = 2 ** 31 - 1


class EngineError(ValueError):
    """Layer/plan/activation mismatch in the integer path."""


def to_f32(a):
    """Round to float32 precision, returned as float64."""
    return np.asarray(a, dtype=np.float64).astype(np.float32).astype(np.float64)


def to_bf16(a):
    return np.asarray(a, dtype=np.float64).astype(ml_dtypes.bfloat16).astype(np.float64)


@dataclass(frozen=True)
class QuantizedLayer:
    """One linear layer in deployable form.

    ``codes`` are ``[d_out, d_in]`` integer weights whose columns follow
    ``plan.permutation`` (outlier group first). Preserved layers carry only
    ``weight`` (bf16 values) and have no integer path.
    """

    name: str
    d_out: int
    d_in: int
    preserved: bool = False
    codes: IntTensor | None = None
    plan: DualScalePlan | None = None
    act: QuantParams | None = None
    weight: np.ndarray | None = None
    colsums: np.ndarray = field(init=False, repr=False, default=None)

    def __post_init__(self):
        if self.preserved:
            if self.weight is None or self.weight.shape != (self.d_out, self.d_in):
                raise EngineError(f"{self.name}: preserved layer needs a [{self.d_out}, {self.d_in}] weight")
            object.__setattr__(self, "weight", to_bf16(self.weight))
            return
        if self.codes is None or self.plan is None or self.act is None:
            raise EngineError(f"{self.name}: quantized layer needs codes, plan and activation params")
        if self.codes.shape != (self.d_out, self.d_in) or self.plan.d_in != self.d_in:
            raise EngineError(f"{self.name}: codes {self.codes.shape} / plan d_in {self.plan.d_in} "
                              f"do not match [{self.d_out}, {self.d_in}]")
        if self.act.per_channel:
            raise EngineError(f"{self.name}: activation params must be per-tensor")
        if self.d_in > MAX_K:
            raise EngineError(f"{self.name}: d_in {self.d_in} exceeds the supported {MAX_K}")
        c = self.codes.data.astype(np.int64)
        split = self.split
        object.__setattr__(self, "colsums",
                           np.stack([c[:, :split].sum(axis=1), c[:, split:].sum(axis=1)]))

    @property
    def split(self):
        return 0 if self.plan is None else self.plan.n_outlier

    @property
    def bits(self):
        return self.codes.bits

    def group_scales(self):
        """``[2, d_out]``: row 0 the outlier group (zeros when disabled), row 1 normal."""
        s = np.zeros((2, self.d_out))
        s[1] = self.plan.params_normal.scale
        if self.plan.enabled:
            s[0] = self.plan.params_outlier.scale
        return s

    def dequantized_weight(self):
        """Float weight in original column order."""
        if self.preserved:
            return self.weight
        w = np.empty((self.d_out, self.d_in))
        c = self.codes.data.astype(np.float64)
        s = self.group_scales()
        w[:, self.plan.permutation[:self.split]] = c[:, :self.split] * s[0][:, None]
        w[:, self.plan.permutation[self.split:]] = c[:, self.split:] * s[1][:, None]
        return w

    @classmethod
    def from_weight(cls, name, w, plan, act, bits, codes=None):
        """Quantize ``w`` group-wise with ``plan``'s scales, or take given ``codes``
        (original column order), and freeze scales to float32."""
        w = as_tensor(w)
        d_out, d_in = w.shape
        plan = _f32_plan(plan)
        act = act.with_scale(to_f32(act.scale))
        if codes is None:
            codes = np.empty((d_out, d_in), dtype=np.int64)
            codes[:, plan.normal_indices] = quantize(w[:, plan.normal_indices], plan.params_normal).data
            if plan.enabled:
                codes[:, plan.outlier_indices] = quantize(w[:, plan.outlier_indices],
                                                          plan.params_outlier).data
        lo, hi = qrange(bits)
        packed = IntTensor(np.asarray(codes)[:, plan.permutation], bits, lo, hi)
        return cls(name, d_out, d_in, False, packed, plan, act)

    @classmethod
    def preserve(cls, name, w):
        w = as_tensor(w)
        return cls(name, w.shape[0], w.shape[1], True, weight=w)


def _f32_plan(plan):
    normal = plan.params_normal.with_scale(to_f32(plan.params_normal.scale))
    outlier = plan.params_outlier.with_scale(to_f32(plan.params_outlier.scale)) if plan.enabled else None
    return DualScalePlan(plan.layer_name, plan.d_in, plan.outlier_indices, plan.normal_indices,
                         plan.permutation, normal, outlier)


# --- kernels -------------------------------------------------------------------------------


def kernel_a_quantize_activation(x, p):
    """Float activations to integer codes; same contract as :func:`quant.quantize`."""
    return quantize(x, p)


def permute_activations(x, plan):
    """Reorder activation columns to ``[outlier | normal]``; identity for a disabled plan."""
    x = as_tensor(x)
    if x.shape[-1] != plan.d_in:
        raise DimensionError(f"activation width {x.shape[-1]} != plan d_in {plan.d_in}")
    if not plan.enabled:
        return x
    return x[..., plan.permutation]


def kernel_b_gemm_dequant(xq, layer):
    """Grouped exact integer GEMM and dequantization.

    ``out[:, n] = sum_g (s_x * s_w[g, n]) * (acc_g[:, n] - z_x * colsum_g[n])``
    where the bracket is evaluated in integers.
    """
    if layer.preserved:
        raise EngineError(f"{layer.name}: preserved layers have no integer path")
    data = xq.data if isinstance(xq, IntTensor) else np.asarray(xq)
    if data.ndim != 2 or data.shape[1] != layer.d_in:
        raise EngineError(f"{layer.name}: activation codes {data.shape} vs d_in {layer.d_in}")
    if isinstance(xq, IntTensor) and xq.bits != layer.act.bits:
        raise EngineError(f"{layer.name}: {xq.bits}-bit codes for {layer.act.bits}-bit activations")
    acc = _kernels.int_gemm_groups(np.ascontiguousarray(data), layer.codes.data, layer.split)
    z = int(layer.act.zero_point)
    corr = acc - z * layer.colsums[:, None, :]
    # a 32-bit accumulator must hold every partial result
    assert np.abs(acc).max(initial=0) <= ACC_LIMIT and np.abs(corr).max(initial=0) <= ACC_LIMIT, \
        f"{layer.name}: integer accumulator overflow"
    s_x = float(layer.act.scale)
    scales = layer.group_scales()
    out = np.zeros((data.shape[0], layer.d_out))
    if layer.split:
        out += (s_x * scales[0])[None, :] * corr[0].astype(np.float64)
    out += (s_x * scales[1])[None, :] * corr[1].astype(np.float64)
    return out


def int_linear(layer, x):
    """Full integer path of one layer: permute, kernel A, kernel B."""
    if layer.preserved:
        return matmul(as_tensor(x), np.ascontiguousarray(layer.weight.T))
    xq = kernel_a_quantize_activation(permute_activations(x, layer.plan), layer.act)
    return kernel_b_gemm_dequant(xq, layer)


def fakequant_linear(layer, x, weight_t=None):
    """Float simulation: fake-quantized activations times dequantized weights."""
    if weight_t is None:
        weight_t = np.ascontiguousarray(layer.dequantized_weight().T)
    if layer.preserved:
        return matmul(as_tensor(x), weight_t)
    return matmul(fake_quant(x, layer.act), weight_t)


# --- model ---------------------------------------------------------------------------------


@dataclass
class QuantizedModel:
    config: ToyModelConfig
    scheme: BitwidthScheme
    keep_list: tuple
    layers: dict

    def shell(self):
        """A :class:`ToyModel` with dequantized weights, used for the forward structure."""
        return ToyModel(self.config, {n: l.dequantized_weight() for n, l in self.layers.items()})

    def runner(self, engine="int"):
        if engine == "int":
            return IntEngineRunner(self)
        if engine == "fakequant":
            return FakeQuantRunner(self)
        raise ValueError(f"engine must be 'int' or 'fakequant', got {engine!r}")


class IntEngineRunner:
    def __init__(self, qmodel):
        self.layers = qmodel.layers

    def __call__(self, name, x):
        return int_linear(self.layers[name], x)


class FakeQuantRunner:
    def __init__(self, qmodel):
        self.layers = qmodel.layers
        self._wt = {n: np.ascontiguousarray(l.dequantized_weight().T) for n, l in self.layers.items()}

    def __call__(self, name, x):
        return fakequant_linear(self.layers[name], x, self._wt[name])


def from_calibration(model, result):
    """Freeze a calibrated :class:`pipeline.QuantizedResult` into deployable layers."""
    cfg = result.config
    layers = {}
    for name in model.layer_names:
        st = result.states.get(name)
        if st is None:
            layers[name] = QuantizedLayer.preserve(name, model.weights[name])
            continue
        layers[name] = QuantizedLayer.from_weight(name, model.weights[name], st.frozen_plan(),
                                                  st.act, st.w_bits, codes=st.hard_codes())
    return QuantizedModel(model.config, cfg.scheme, tuple(cfg.keep_list), layers)


def quantize_minmax(model, scheme, act_params, keep_list=DEFAULT_KEEP_LIST, reports=None):
    """Deployable model without reconstruction: MinMax (dual-scale where ``reports``
    name outliers) weights and the given static activation params per layer."""
    layers = {}
    for name in model.layer_names:
        w = model.weights[name]
        if is_kept(name, keep_list):
            layers[name] = QuantizedLayer.preserve(name, w)
            continue
        idx = reports[name] if reports and name in reports else np.empty(0, np.int64)
        plan = build_plan(w, idx, scheme.weight_bits, name)
        layers[name] = QuantizedLayer.from_weight(name, w, plan, act_params[name], scheme.weight_bits)
    return QuantizedModel(model.config, scheme, tuple(keep_list), layers)


# --- serialization -------------------------------------------------------------------------


def _header(qm):
    entries = []
    for name, l in qm.layers.items():
        e = {"name": name, "shape": [l.d_out, l.d_in], "preserved": l.preserved}
        if not l.preserved:
            e.update(w_bits=l.bits, n_outlier=l.split, a_bits=l.act.bits,
                     a_symmetric=bool(l.act.symmetric), a_range=[l.act.q_min, l.act.q_max])
        entries.append(e)
    return {"config": qm.config.to_dict(), "scheme": qm.scheme.name,
            "keep_list": list(qm.keep_list), "layers": entries}


def _layer_bytes(l):
    if l.preserved:
        return l.weight.astype(ml_dtypes.bfloat16).view("<u2").tobytes()
    parts = [l.codes.packed()]
    scales = l.group_scales()[0 if l.plan.enabled else 1:]
    parts.append(scales.astype("<f4").tobytes())
    if l.plan.enabled:
        parts.append(l.plan.permutation.astype("<u4").tobytes())
    parts.append(np.asarray(l.act.scale, dtype="<f4").reshape(1).tobytes())
    parts.append(np.asarray(l.act.zero_point, dtype="<i4").reshape(1).tobytes())
    return b"".join(parts)


def model_to_bytes(qm):
    """``QARQ`` container: prefix, JSON header, then one binary section per layer."""
    blob = json.dumps(_header(qm), sort_keys=True, separators=(",", ":")).encode()
    return PREFIX.pack(QMODEL_MAGIC, QMODEL_VERSION, len(blob)) + blob + \
        b"".join(_layer_bytes(l) for l in qm.layers.values())


def save_quantized(qm, path):
    data = model_to_bytes(qm)
    with open(path, "wb") as fp:
        fp.write(data)
    return len(data)


def header_nbytes(buf):
    """Prefix plus JSON header length of a serialized model."""
    magic, _, hlen = PREFIX.unpack_from(buf)
    if magic != QMODEL_MAGIC:
        raise TensorFormatError(f"not a quantized model (magic {magic!r})")
    return PREFIX.size + hlen


class _Reader:
    def __init__(self, buf, pos):
        self.buf, self.pos = buf, pos

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise TensorFormatError("quantized model file is truncated")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def array(self, dtype, count):
        dt = np.dtype(dtype)
        return np.frombuffer(self.take(dt.itemsize * count), dtype=dt).copy()


def model_from_bytes(buf):
    magic, version, hlen = PREFIX.unpack_from(buf)
    if magic != QMODEL_MAGIC:
        raise TensorFormatError(f"not a quantized model (magic {magic!r})")
    if version != QMODEL_VERSION:
        raise TensorFormatError(f"unsupported quantized model version {version}")
    header = json.loads(buf[PREFIX.size:PREFIX.size + hlen])
    rd = _Reader(buf, PREFIX.size + hlen)
    layers = {}
    for e in header["layers"]:
        name = e["name"]
        d_out, d_in = e["shape"]
        if e["preserved"]:
            bits = rd.array("<u2", d_out * d_in).view(ml_dtypes.bfloat16)
            layers[name] = QuantizedLayer.preserve(name, bits.astype(np.float64).reshape(d_out, d_in))
            continue
        w_bits, split = e["w_bits"], e["n_outlier"]
        codes = IntTensor.from_packed(rd.take(packed_nbytes(d_out * d_in, w_bits)), w_bits,
                                      (d_out, d_in))
        scales = rd.array("<f4", (2 if split else 1) * d_out).astype(np.float64).reshape(-1, d_out)
        perm = rd.array("<u4", d_in).astype(np.int64) if split else np.arange(d_in)
        a_scale = float(rd.array("<f4", 1)[0])
        a_zp = int(rd.array("<i4", 1)[0])
        lo, hi = e["a_range"]
        act = QuantParams(e["a_bits"], a_scale, a_zp, lo, hi, e["a_symmetric"])
        normal = QuantParams.symmetric_from_scale(scales[-1], w_bits, axis=0)
        outlier = QuantParams.symmetric_from_scale(scales[0], w_bits, axis=0) if split else None
        plan = DualScalePlan(name, d_in, np.sort(perm[:split]), np.sort(perm[split:]), perm,
                             normal, outlier)
        wlo, whi = qrange(w_bits)
        layers[name] = QuantizedLayer(name, d_out, d_in, False,
                                      IntTensor(codes.data, w_bits, wlo, whi), plan, act)
    if rd.pos != len(buf):
        raise TensorFormatError(f"{len(buf) - rd.pos} trailing bytes after the last layer")
    return QuantizedModel(ToyModelConfig.from_dict(header["config"]),
                          BitwidthScheme.parse(header["scheme"]), tuple(header["keep_list"]), layers)


def load_quantized(path):
    with open(path, "rb") as fp:
        return model_from_bytes(fp.read())


# --- size accounting -----------------------------------------------------------------------


@dataclass
class LayerSize:
    name: str
    weights: int
    scales: int
    permutation: int
    zero_points: int
    baseline: int

    @property
    def total(self):
        return self.weights + self.scales + self.permutation + self.zero_points


@dataclass
class SizeReport:
    layers: list
    quantized_bytes: int
    baseline_bytes: int

    @property
    def ratio(self):
        return self.baseline_bytes / self.quantized_bytes

    def to_dict(self):
        return {
            "layers": [dict(vars(l), total=l.total) for l in self.layers],
            "quantized_bytes": self.quantized_bytes,
            "baseline_bytes": self.baseline_bytes,
            "ratio": self.ratio,
        }


def size_report(qm):
    """Byte accounting of the layer sections against a 16-bit copy of every weight.

    The JSON header is excluded from both sides.
    """
    rows = []
    for name, l in qm.layers.items():
        n = l.d_out * l.d_in
        if l.preserved:
            rows.append(LayerSize(name, 2 * n, 0, 0, 0, 2 * n))
            continue
        groups = 2 if l.plan.enabled else 1
        rows.append(LayerSize(name, packed_nbytes(n, l.bits), 4 * groups * l.d_out + 4,
                              4 * l.d_in if l.plan.enabled else 0, 4, 2 * n))
    return SizeReport(rows, sum(r.total for r in rows), sum(r.baseline for r in rows))


__all__ = [
    "EngineError", "FakeQuantRunner", "IntEngineRunner", "QuantizedLayer", "QuantizedModel",
    "SizeReport", "fakequant_linear", "from_calibration", "header_nbytes",
    "int_linear", "kernel_a_quantize_activation", "kernel_b_gemm_dequant", "load_quantized",
    "model_from_bytes", "model_to_bytes", "permute_activations", "quantize_minmax",
    "save_quantized", "size_report",
]
