"""End-to-end quantization of the toy model and latent-space evaluation."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .calibrate import CalibConfig, calibrate_layer, collect_calibration
from .dual_scale import build_plan
from .outliers import DEFAULT_ALIGN, DEFAULT_ALPHA_MIN, DEFAULT_TAU, analyze_layer
from .quant import BitwidthScheme, fake_quant
from .sensitivity import SensitivityProfile, profile as profile_sensitivity, weighting_strategy
from .tensor_core import matmul
from .toy_model import DEFAULT_KEEP_LIST, QuantMode, is_kept, latent_mse, rollout

logger = logging.getLogger(__name__)

CALIB_SEEDS = (100, 101, 102, 103)
PROFILE_SEEDS = tuple(range(16))
EVAL_SEEDS = tuple(range(1000, 1008))


@dataclass(frozen=True)
class PipelineConfig:
    scheme: BitwidthScheme = BitwidthScheme(4, 8)
    dual_scale: bool = True
    weighting: str = "final_quality"
    calib: CalibConfig = CalibConfig()
    calib_seeds: tuple = CALIB_SEEDS
    profile_seeds: tuple = PROFILE_SEEDS
    tau: float = DEFAULT_TAU
    alpha_min: float = DEFAULT_ALPHA_MIN
    align: int = DEFAULT_ALIGN
    keep_list: tuple = DEFAULT_KEEP_LIST


@dataclass
class QuantizedResult:
    """Calibrated quantizer state of every non-kept layer."""

    config: PipelineConfig
    states: dict
    reports: dict
    frame_weights: np.ndarray
    layer_results: dict = field(default_factory=dict)
    profile: SensitivityProfile | None = None

    def runner(self, model):
        return CalibratedRunner(model, self.states)


class CalibratedRunner:
    """Fake-quant forward with learned weights and static per-tensor activations."""

    def __init__(self, model, states):
        self.model = model
        self.states = states
        self._wt = {n: np.ascontiguousarray(s.weight(hard=True).T) for n, s in states.items()}

    def __call__(self, name, x):
        st = self.states.get(name)
        if st is None:
            return self.model.linear(name, x)
        return matmul(fake_quant(x, st.act), self._wt[name])


def frame_weights_for(model, cfg, profile=None):
    n = model.config.chunks
    if cfg.weighting in ("uniform", "heuristic_exp"):
        return weighting_strategy(n, cfg.weighting), profile
    if profile is None:
        profile = profile_sensitivity(model, cfg.scheme, cfg.profile_seeds)
    return weighting_strategy(profile, cfg.weighting), profile


def quantize_model(model, cfg=None, profile=None, samples=None):
    """Detect outliers, build dual-scale plans and calibrate every non-kept layer.

    ``profile`` and ``samples`` may be passed in to share work across runs
    that differ only in weighting or dual-scale settings.
    """
    cfg = cfg or PipelineConfig()
    if cfg.scheme.lossless:
        raise ValueError("the lossless scheme needs no calibration")
    fw, profile = frame_weights_for(model, cfg, profile)
    names = [n for n in model.layer_names if not is_kept(n, cfg.keep_list)]
    if samples is None:
        samples = collect_calibration(model, cfg.calib_seeds, names)
    states, reports, results = {}, {}, {}
    for name in names:
        w = model.weights[name]
        rep = analyze_layer(name, w, cfg.tau, cfg.alpha_min, cfg.align)
        reports[name] = rep
        plan = build_plan(w, rep if cfg.dual_scale else np.empty(0, np.int64),
                          cfg.scheme.weight_bits, name)
        res = calibrate_layer(name, w, samples[name], fw, cfg.scheme, cfg.calib, plan)
        logger.info("%s: loss %.4g -> %.4g", name, res.initial_loss, res.final_loss)
        states[name] = res.state
        results[name] = res
    return QuantizedResult(cfg, states, reports, fw, results, profile)


def evaluate(model, runner, seeds=EVAL_SEEDS):
    """Per-seed latent MSE between full-precision and fully quantized rollouts."""
    mode = QuantMode.quantize_all()
    return np.array([latent_mse(rollout(model, s), rollout(model, s, mode, runner))
                     for s in seeds])


def sign_test_p(diffs):
    """One-sided sign test p-value for ``diffs > 0`` (ties dropped)."""
    from math import comb

    diffs = np.asarray(diffs, dtype=np.float64)
    diffs = diffs[diffs != 0]
    n = diffs.size
    if n == 0:
        return 1.0
    k = int(np.sum(diffs > 0))
    return sum(comb(n, j) for j in range(k, n + 1)) / 2.0 ** n


def weighting_ablation(model, base=None, kinds=("uniform", "final_quality", "reverse"),
                       seeds=EVAL_SEEDS):
    """Per-seed end-to-end MSE for each weighting strategy, other settings fixed."""
    base = base or PipelineConfig()
    prof = profile_sensitivity(model, base.scheme, base.profile_seeds)
    names = [n for n in model.layer_names if not is_kept(n, base.keep_list)]
    samples = collect_calibration(model, base.calib_seeds, names)
    out = {}
    for kind in kinds:
        cfg = _replace(base, weighting=kind)
        q = quantize_model(model, cfg, prof, samples)
        out[kind] = evaluate(model, q.runner(model), seeds)
    return out


def ablation_grid(model, base=None, seeds=EVAL_SEEDS):
    """End-to-end MSE for dual-scale on/off times frame weighting on/off.

    "Weighting off" means uniform frame weights.
    """
    base = base or PipelineConfig()
    prof = profile_sensitivity(model, base.scheme, base.profile_seeds)
    names = [n for n in model.layer_names if not is_kept(n, base.keep_list)]
    samples = collect_calibration(model, base.calib_seeds, names)
    grid = {}
    for dual in (False, True):
        for weighted in (False, True):
            cfg = _replace(base, dual_scale=dual,
                           weighting=base.weighting if weighted else "uniform")
            q = quantize_model(model, cfg, prof, samples)
            grid[(dual, weighted)] = evaluate(model, q.runner(model), seeds)
    return grid


def sweep(model, base, name, values, seeds=EVAL_SEEDS):
    """End-to-end MSE while varying ``tau`` or ``alpha_min``.

    Yields ``(value, per-seed mse, number of layers with outliers)``.
    """
    if name not in ("tau", "alpha_min"):
        raise ValueError(f"can only sweep tau or alpha_min, not {name!r}")
    base = base or PipelineConfig()
    prof = None
    if base.weighting in ("final_quality", "reverse"):
        prof = profile_sensitivity(model, base.scheme, base.profile_seeds)
    names = [n for n in model.layer_names if not is_kept(n, base.keep_list)]
    samples = collect_calibration(model, base.calib_seeds, names)
    for v in values:
        q = quantize_model(model, _replace(base, **{name: float(v)}), prof, samples)
        n_out = sum(r.has_outliers for r in q.reports.values())
        yield float(v), evaluate(model, q.runner(model), seeds), n_out


def _replace(cfg, **kw):
    from dataclasses import replace

    return replace(cfg, **kw)
