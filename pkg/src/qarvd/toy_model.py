"""Desk-scale chunk-wise autoregressive denoiser.

Every chunk starts from seeded noise and is denoised in ``steps`` updates
``z <- z - f(z, context, t) / steps`` with ``f = z - x0_hat``, where
``x0_hat`` comes from a stack of pre-norm transformer blocks whose linear layers carry the ten layer names used throughout the
package (``block{i}.self_attn.q`` ... ``block{i}.ffn.2``). Self-attention
sees the previously generated clean chunks, cross-attention sees a seeded
prompt embedding. ``time_embed`` and ``head`` are the small modules kept in
high precision by default.

Linear layers are evaluated through a *runner* (``runner(name, x)``), which
is how quantized execution, activation capture and the integer engine hook
into an otherwise fixed forward pass.
"""

from __future__ import annotations

import fnmatch
import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .outliers import LAYER_TYPES
from .quant import BitwidthScheme, fake_quant, init_scale_minmax
from .tensor_core import as_tensor, matmul, read_tensor, write_tensor

MODEL_MAGIC = b"QARM"
MODEL_VERSION = 1
DEFAULT_KEEP_LIST = ("time_embed", "head")


class ModelConfigError(ValueError):
    """Invalid toy model configuration."""


@dataclass(frozen=True)
class OutlierInjection:
    """Scale a seeded ``fraction`` of input channels of matching layers by ``factor``."""

    pattern: str
    fraction: float
    factor: float

    def matches(self, name):
        return fnmatch.fnmatchcase(name, self.pattern) or fnmatch.fnmatchcase(name, f"*.{self.pattern}")


DEFAULT_OUTLIERS = (OutlierInjection("ffn.2", 0.03, 8.0),)


@dataclass(frozen=True)
class ToyModelConfig:
    blocks: int = 2
    dim: int = 64
    ffn_mult: int = 4
    tokens_per_chunk: int = 16
    chunks: int = 7
    steps: int = 4
    context_window: int | None = None
    prompt_tokens: int = 4
    time_dim: int = 16
    temporal_bias: float = 3.0
    seed: int = 0
    outliers: tuple = DEFAULT_OUTLIERS

    def __post_init__(self):
        for name in ("blocks", "dim", "ffn_mult", "tokens_per_chunk", "steps", "prompt_tokens",
                     "time_dim"):
            if getattr(self, name) < 1:
                raise ModelConfigError(f"{name} must be positive")
        if self.chunks < 2:
            raise ModelConfigError("chunks must be >= 2")
        if self.context_window is not None and self.context_window < 1:
            raise ModelConfigError("context_window must be positive or None")
        outs = tuple(o if isinstance(o, OutlierInjection) else OutlierInjection(*o)
                     for o in self.outliers)
        for o in outs:
            if not 0 < o.fraction <= 1:
                raise ModelConfigError(f"outlier fraction must be in (0, 1], got {o.fraction}")
            if o.factor <= 0:
                raise ModelConfigError("outlier factor must be positive")
        object.__setattr__(self, "outliers", outs)

    @property
    def ffn_dim(self):
        return self.ffn_mult * self.dim

    def to_dict(self):
        d = asdict(self)
        d["outliers"] = [list(asdict(o).values()) for o in self.outliers]
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["outliers"] = tuple(OutlierInjection(*o) for o in d.get("outliers", ()))
        return cls(**d)


def layer_names(cfg):
    names = ["time_embed"]
    for b in range(cfg.blocks):
        names.extend(f"block{b}.{t}" for t in LAYER_TYPES)
    names.append("head")
    return names


def layer_shape(cfg, name):
    """``(d_out, d_in)`` of a registered layer."""
    d = cfg.dim
    if name == "time_embed":
        return d, cfg.time_dim
    if name == "head":
        return d, d
    if name.endswith("ffn.0"):
        return cfg.ffn_dim, d
    if name.endswith("ffn.2"):
        return d, cfg.ffn_dim
    return d, d


@dataclass
class ToyModel:
    config: ToyModelConfig
    weights: dict
    injected: dict = field(default_factory=dict)

    def __post_init__(self):
        self._wt = {k: np.ascontiguousarray(w.T) for k, w in self.weights.items()}

    @property
    def layer_names(self):
        return list(self.weights)

    def weight_t(self, name):
        return self._wt[name]

    def linear(self, name, x):
        return matmul(x, self._wt[name])

    def prompt_embedding(self, prompt_seed):
        rng = np.random.default_rng([self.config.seed, int(prompt_seed), 1])
        return rng.standard_normal((self.config.prompt_tokens, self.config.dim))

    def chunk_noise(self, prompt_seed, chunk):
        rng = np.random.default_rng([self.config.seed, int(prompt_seed), 2, int(chunk)])
        return rng.standard_normal((self.config.tokens_per_chunk, self.config.dim))

    def time_features(self, step):
        n = self.config.time_dim
        return _sinusoid(float(step) / self.config.steps, n)[None, :]

    def attention_bias(self, n_ctx_chunks):
        """Additive logits: each token favours its own position in the chunk right before it."""
        m = self.config.tokens_per_chunk
        bias = np.zeros((m, (n_ctx_chunks + 1) * m))
        if n_ctx_chunks and self.config.temporal_bias:
            last = (n_ctx_chunks - 1) * m
            bias[np.arange(m), last + np.arange(m)] = self.config.temporal_bias
        return bias

    def denoise_step(self, z, ctx, prompt, step, runner):
        """One network evaluation; returns the update direction ``z - x0_hat``."""
        d = self.config.dim
        n_ctx = ctx.shape[0] // self.config.tokens_per_chunk
        bias = self.attention_bias(n_ctx)
        ctx_n = _rms_norm(ctx) if ctx.size else ctx
        h = z + runner("time_embed", self.time_features(step))
        for b in range(self.config.blocks):
            p = f"block{b}."
            hn = _rms_norm(h)
            kv_in = np.vstack([ctx_n, hn]) if ctx.size else hn
            q = runner(p + "self_attn.q", hn)
            k = runner(p + "self_attn.k", kv_in)
            v = runner(p + "self_attn.v", kv_in)
            h = h + runner(p + "self_attn.o", _attend(q, k, v, d, bias))
            q = runner(p + "cross_attn.q", _rms_norm(h))
            k = runner(p + "cross_attn.k", prompt)
            v = runner(p + "cross_attn.v", prompt)
            h = h + runner(p + "cross_attn.o", _attend(q, k, v, d, None))
            h = h + runner(p + "ffn.2", _gelu(runner(p + "ffn.0", _rms_norm(h))))
        x0_hat = runner("head", _rms_norm(h))
        return z - x0_hat


def _sinusoid(t, n):
    half = n // 2
    freqs = np.exp(-np.log(100.0) * np.arange(half) / max(half, 1))
    out = np.concatenate([np.sin(t * freqs * np.pi), np.cos(t * freqs * np.pi)])
    return np.concatenate([out, np.zeros(n - out.size)])


def _rms_norm(x, eps=1e-6):
    return x / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)


def _softmax(x):
    x = x - x.max(axis=-1, keepdims=True)
    e = np.exp(x)
    return e / e.sum(axis=-1, keepdims=True)


def _attend(q, k, v, d, bias):
    logits = matmul(q, np.ascontiguousarray(k.T)) / np.sqrt(d)
    if bias is not None:
        logits = logits + bias
    return matmul(_softmax(logits), v)


def _gelu(x):
    return 0.5 * x * (1.0 + np.tanh(0.7978845608028654 * (x + 0.044715 * x ** 3)))


def build_model(cfg=None):
    """Seeded Gaussian weights (std 1/sqrt(fan_in)) with optional outlier channels."""
    cfg = cfg or ToyModelConfig()
    names = layer_names(cfg)
    for o in cfg.outliers:
        if not any(o.matches(n) for n in names):
            raise ModelConfigError(f"outlier pattern {o.pattern!r} matches no layer")
    weights = {}
    injected = {}
    for li, name in enumerate(names):
        d_out, d_in = layer_shape(cfg, name)
        rng = np.random.default_rng([cfg.seed, 7, li])
        w = rng.standard_normal((d_out, d_in)) / np.sqrt(d_in)
        for oi, o in enumerate(cfg.outliers):
            if o.matches(name):
                count = max(1, int(round(o.fraction * d_in)))
                pick = np.sort(np.random.default_rng([cfg.seed, 11, li, oi]).choice(
                    d_in, size=count, replace=False))
                w[:, pick] *= o.factor
                injected[name] = np.union1d(injected.get(name, np.empty(0, np.int64)), pick)
        weights[name] = w
    return ToyModel(cfg, weights, injected)


# --- runners -------------------------------------------------------------------------------


class FullPrecisionRunner:
    def __init__(self, model):
        self.model = model

    def __call__(self, name, x):
        return self.model.linear(name, x)


class MinMaxRunner:
    """Un-reconstructed fake quantization: MinMax per-output-channel weights,
    dynamic per-tensor MinMax activations. Keep-list layers stay full precision."""

    def __init__(self, model, scheme, keep_list=DEFAULT_KEEP_LIST, plans=None):
        self.model = model
        self.scheme = scheme
        self.keep = tuple(keep_list)
        self._wq = {}
        if scheme.lossless:
            return
        from .dual_scale import fake_quant_dual

        for name, w in model.weights.items():
            if is_kept(name, self.keep):
                continue
            if plans and name in plans:
                wq = fake_quant_dual(w, plans[name])
            else:
                wq = fake_quant(w, init_scale_minmax(w, scheme.weight_bits, axis=0))
            self._wq[name] = np.ascontiguousarray(wq.T)

    def __call__(self, name, x):
        if self.scheme.lossless or name not in self._wq:
            return self.model.linear(name, x)
        xq = fake_quant(x, init_scale_minmax(x, self.scheme.activation_bits))
        return matmul(xq, self._wq[name])


def is_kept(name, keep_list):
    return any(fnmatch.fnmatchcase(name, pat) or name.startswith(pat + ".") for pat in keep_list)


class CaptureRunner:
    """Wraps another runner and records the inputs of selected layers per chunk."""

    def __init__(self, inner, layers=None):
        self.inner = inner
        self.layers = None if layers is None else set(layers)
        self.chunk = None
        self.store = {}

    def __call__(self, name, x):
        if self.layers is None or name in self.layers:
            self.store.setdefault(name, {}).setdefault(self.chunk, []).append(np.array(x))
        return self.inner(name, x)

    def stacked(self):
        """``{layer: {chunk: rows}}`` with every step of a chunk stacked vertically."""
        return {name: {c: np.vstack(parts) for c, parts in sorted(by_chunk.items())}
                for name, by_chunk in self.store.items()}


# --- rollouts ------------------------------------------------------------------------------


@dataclass(frozen=True)
class QuantMode:
    """Which chunks run quantized: none, all, or only chunk ``chunk`` (1-based)."""

    kind: str = "full_precision"
    scheme: BitwidthScheme | None = None
    chunk: int | None = None

    @classmethod
    def full_precision(cls):
        return cls()

    @classmethod
    def quantize_all(cls, scheme=None):
        return cls("quantize_all", scheme)

    @classmethod
    def quantize_only_chunk(cls, chunk, scheme=None):
        return cls("quantize_only_chunk", scheme, chunk)

    def quantized(self, chunk):
        if self.kind == "full_precision":
            return False
        if self.kind == "quantize_all":
            return True
        if self.kind == "quantize_only_chunk":
            return chunk == self.chunk
        raise ValueError(f"unknown quant mode {self.kind!r}")


@dataclass
class Rollout:
    prompt_seed: int
    prompt: np.ndarray
    latents: np.ndarray
    captures: dict | None = None


def rollout(model, prompt_seed, mode=None, quant_runner=None, capture=False, capture_layers=None):
    """Generate all chunks autoregressively.

    Quantized chunks (per ``mode``) use ``quant_runner`` or, if not given, a
    :class:`MinMaxRunner` for ``mode.scheme``. Later chunks condition on
    whatever earlier chunks produced, so errors propagate forward only.
    """
    cfg = model.config
    mode = mode or QuantMode.full_precision()
    if mode.kind == "quantize_only_chunk" and not (1 <= (mode.chunk or 0) <= cfg.chunks):
        raise ValueError(f"chunk index {mode.chunk} outside [1, {cfg.chunks}]")
    fp = FullPrecisionRunner(model)
    qr = None
    if mode.kind != "full_precision":
        qr = quant_runner
        if qr is None:
            if mode.scheme is None:
                raise ValueError("quantized rollout needs a scheme or a runner")
            qr = MinMaxRunner(model, mode.scheme)
    prompt = model.prompt_embedding(prompt_seed)
    recorder = CaptureRunner(None, capture_layers) if capture else None
    latents = np.empty((cfg.chunks, cfg.tokens_per_chunk, cfg.dim))
    for i in range(1, cfg.chunks + 1):
        runner = qr if mode.quantized(i) else fp
        if recorder is not None:
            recorder.inner, recorder.chunk = runner, i
            runner = recorder
        lo = 0 if cfg.context_window is None else max(0, i - 1 - cfg.context_window)
        ctx = latents[lo:i - 1].reshape(-1, cfg.dim)
        z = model.chunk_noise(prompt_seed, i)
        for t in range(cfg.steps, 0, -1):
            z = z - model.denoise_step(z, ctx, prompt, t, runner) / cfg.steps
        latents[i - 1] = z
    return Rollout(prompt_seed, prompt, latents, recorder.stacked() if recorder else None)


def latent_mse(a, b):
    a = a.latents if isinstance(a, Rollout) else np.asarray(a)
    b = b.latents if isinstance(b, Rollout) else np.asarray(b)
    return float(np.mean((a - b) ** 2))


def chunk_mse(a, b):
    a = a.latents if isinstance(a, Rollout) else np.asarray(a)
    b = b.latents if isinstance(b, Rollout) else np.asarray(b)
    return np.mean((a - b) ** 2, axis=(1, 2))


# --- serialization -------------------------------------------------------------------------


def save_model(model, path):
    """``QARM`` container: magic, u16 version, u32 header length, JSON header, QTNS tensors."""
    header = {
        "config": model.config.to_dict(),
        "layers": [{"name": n, "shape": list(model.weights[n].shape)} for n in model.layer_names],
        "injected": {k: [int(i) for i in v] for k, v in sorted(model.injected.items())},
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fp:
        fp.write(struct.pack("<4sHI", MODEL_MAGIC, MODEL_VERSION, len(blob)))
        fp.write(blob)
        for name in model.layer_names:
            write_tensor(fp, model.weights[name])


def load_model(path):
    with open(path, "rb") as fp:
        magic, version, hlen = struct.unpack("<4sHI", fp.read(10))
        if magic != MODEL_MAGIC:
            raise ValueError(f"{path}: not a model file (magic {magic!r})")
        if version != MODEL_VERSION:
            raise ValueError(f"{path}: unsupported model version {version}")
        header = json.loads(fp.read(hlen))
        cfg = ToyModelConfig.from_dict(header["config"])
        weights = {}
        for entry in header["layers"]:
            w = read_tensor(fp)
            if list(w.shape) != entry["shape"]:
                raise ValueError(f"{path}: layer {entry['name']} has shape {w.shape}")
            weights[entry["name"]] = as_tensor(w)
    injected = {k: np.asarray(v, dtype=np.int64) for k, v in header.get("injected", {}).items()}
    return ToyModel(cfg, weights, injected)
