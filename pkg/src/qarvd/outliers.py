"""Per-layer outlier input-channel detection with a Modified Z-score.

A channel is an outlier when its L2 norm exceeds both the robust
z-score cut ``median + tau / 0.6745 * MAD`` and the magnitude floor
``alpha_min * median``. The floor keeps smooth layers (tiny MAD) from
reporting false outliers.
"""

from __future__ import annotations

import math
import re
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .tensor_core import as_tensor, channel_l2_norms

MZ_CONSTANT = 0.6745
DEFAULT_TAU = 3.5
DEFAULT_ALPHA_MIN = 1.2
DEFAULT_ALIGN = 32

LAYER_TYPES = (
    "self_attn.q", "self_attn.k", "self_attn.v", "self_attn.o",
    "cross_attn.q", "cross_attn.k", "cross_attn.v", "cross_attn.o",
    "ffn.0", "ffn.2",
)
_LAYER_RE = re.compile(r"^block(\d+)\.(" + "|".join(re.escape(t) for t in LAYER_TYPES) + r")$")


class LayerNameError(ValueError):
    """Layer names that do not follow ``block{i}.{type}``."""


def median(v):
    """Median; even lengths average the two central order statistics."""
    v = np.sort(as_tensor(v).ravel())
    n = v.size
    if n == 0:
        raise ValueError("median of an empty vector")
    mid = n // 2
    if n % 2:
        return float(v[mid])
    return float((v[mid - 1] + v[mid]) / 2.0)


def mad(v):
    """Return ``(median, median absolute deviation)``."""
    v = as_tensor(v).ravel()
    if v.size == 0:
        raise ValueError("MAD of an empty vector")
    med = median(v)
    return med, median(np.abs(v - med))


def outlier_threshold(med, mad_value, tau=DEFAULT_TAU, alpha_min=DEFAULT_ALPHA_MIN):
    return max(med + (tau / MZ_CONSTANT) * mad_value, alpha_min * med)


def detect_outliers(v, tau=DEFAULT_TAU, alpha_min=DEFAULT_ALPHA_MIN):
    """Sorted indices of channels whose norm exceeds the outlier threshold."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    if alpha_min <= 1:
        raise ValueError("alpha_min must exceed 1")
    v = as_tensor(v).ravel()
    med, m = mad(v)
    thr = outlier_threshold(med, m, tau, alpha_min)
    return np.flatnonzero(v > thr)


def top_channels(norms, count):
    """The ``count`` largest-norm channels (ties to the lower index), sorted by index."""
    norms = as_tensor(norms).ravel()
    order = np.lexsort((np.arange(norms.size), -norms))
    return np.sort(order[:count])


def align_outliers(raw, norms, align=DEFAULT_ALIGN, d_in=None):
    """Pad the outlier set up to a multiple of ``align`` with the next-largest channels.

    The target is capped at ``d_in - align`` so the normal group keeps at
    least one tile; layers narrower than ``2 * align`` are returned as is.
    """
    raw = np.asarray(raw, dtype=np.int64)
    norms = as_tensor(norms).ravel()
    d_in = norms.size if d_in is None else d_in
    if align < 1:
        raise ValueError("align must be >= 1")
    if raw.size == 0:
        return raw
    if align == 1 or d_in < 2 * align:
        return np.sort(raw)
    # raw holds fewer than half the channels (all exceed the median), so the cap never drops one
    target = max(min(math.ceil(raw.size / align) * align, d_in - align), raw.size)
    return top_channels(norms, target)


@dataclass
class OutlierReport:
    layer_name: str
    norms: np.ndarray
    median: float
    mad: float
    threshold: float
    raw_outliers: np.ndarray
    aligned_outliers: np.ndarray
    tau: float = DEFAULT_TAU
    alpha_min: float = DEFAULT_ALPHA_MIN
    align: int = DEFAULT_ALIGN

    @property
    def d_in(self):
        return self.norms.size

    @property
    def has_outliers(self):
        return self.raw_outliers.size > 0

    def to_dict(self):
        return {
            "layer_name": self.layer_name,
            "d_in": int(self.d_in),
            "median": self.median,
            "mad": self.mad,
            "threshold": self.threshold,
            "tau": self.tau,
            "alpha_min": self.alpha_min,
            "align": self.align,
            "raw_outliers": [int(i) for i in self.raw_outliers],
            "aligned_outliers": [int(i) for i in self.aligned_outliers],
            "norms": [float(x) for x in self.norms],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            layer_name=d["layer_name"],
            norms=np.asarray(d["norms"], dtype=np.float64),
            median=d["median"],
            mad=d["mad"],
            threshold=d["threshold"],
            raw_outliers=np.asarray(d["raw_outliers"], dtype=np.int64),
            aligned_outliers=np.asarray(d["aligned_outliers"], dtype=np.int64),
            tau=d["tau"],
            alpha_min=d["alpha_min"],
            align=d["align"],
        )


def analyze_layer(name, w, tau=DEFAULT_TAU, alpha_min=DEFAULT_ALPHA_MIN, align=DEFAULT_ALIGN):
    """Full report for a ``[d_out, d_in]`` weight."""
    norms = channel_l2_norms(w, axis=1)
    med, m = mad(norms)
    thr = outlier_threshold(med, m, tau, alpha_min)
    raw = detect_outliers(norms, tau, alpha_min)
    aligned = align_outliers(raw, norms, align, norms.size)
    return OutlierReport(name, norms, med, m, thr, raw, aligned, tau, alpha_min, align)


def parse_layer_name(name):
    m = _LAYER_RE.match(name)
    if not m:
        raise LayerNameError(f"layer name {name!r} does not match block{{i}}.{{type}}")
    return int(m.group(1)), m.group(2)


@dataclass
class FleetStats:
    by_type: dict = field(default_factory=dict)
    by_block: dict = field(default_factory=dict)
    total: float = 0.0

    def to_dict(self):
        return {"by_type": self.by_type,
                "by_block": {str(k): v for k, v in self.by_block.items()},
                "total": self.total}


def fleet_outlier_stats(reports):
    """Fraction of outlier-containing layers per layer type and per block depth."""
    bad = []
    parsed = []
    for r in reports:
        try:
            parsed.append((parse_layer_name(r.layer_name), r.has_outliers))
        except LayerNameError:
            bad.append(r.layer_name)
    if bad:
        raise LayerNameError(f"unparseable layer names: {', '.join(bad)}")
    per_type = defaultdict(list)
    per_block = defaultdict(list)
    for (block, kind), flag in parsed:
        per_type[kind].append(flag)
        per_block[block].append(flag)
    return FleetStats(
        by_type={k: float(np.mean(v)) for k, v in sorted(per_type.items())},
        by_block={k: float(np.mean(v)) for k, v in sorted(per_block.items())},
        total=float(np.mean([f for _, f in parsed])) if parsed else 0.0,
    )
