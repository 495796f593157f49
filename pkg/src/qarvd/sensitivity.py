"""Chunk-wise quantization sensitivity from selective-chunk quantized rollouts."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .quant import BitwidthScheme
from .toy_model import MinMaxRunner, QuantMode, latent_mse, rollout

WEIGHTINGS = ("uniform", "heuristic_exp", "reverse", "final_quality")


def normalize(alpha):
    """Scale to unit sum; an all-zero profile becomes uniform."""
    alpha = np.asarray(alpha, dtype=np.float64)
    if np.any(alpha < 0):
        raise ValueError("sensitivities must be non-negative")
    total = alpha.sum()
    if total == 0:
        return np.full(alpha.size, 1.0 / alpha.size)
    return alpha / total


@dataclass
class SensitivityProfile:
    scheme: BitwidthScheme
    seeds: list
    alpha_raw: np.ndarray
    alpha_normalized: np.ndarray
    per_seed: dict = field(default_factory=dict)

    @property
    def chunks(self):
        return int(self.alpha_raw.size)

    def to_dict(self):
        return {
            "scheme": self.scheme.name,
            "N": self.chunks,
            "seeds": [int(s) for s in self.seeds],
            "alpha_raw": [float(a) for a in self.alpha_raw],
            "alpha_normalized": [float(a) for a in self.alpha_normalized],
            "per_seed": {str(k): [float(x) for x in v] for k, v in sorted(self.per_seed.items())},
        }

    @classmethod
    def from_dict(cls, d):
        raw = np.asarray(d["alpha_raw"], dtype=np.float64)
        return cls(BitwidthScheme.parse(d["scheme"]), list(d["seeds"]), raw,
                   np.asarray(d["alpha_normalized"], dtype=np.float64),
                   {int(k): np.asarray(v) for k, v in d.get("per_seed", {}).items()})

    def save(self, path):
        with open(path, "w") as fp:
            json.dump(self.to_dict(), fp, indent=2, sort_keys=True)
            fp.write("\n")

    @classmethod
    def load(cls, path):
        with open(path) as fp:
            return cls.from_dict(json.load(fp))


def profile(model, scheme, seeds, runner=None):
    """alpha_i = mean over seeds of the latent MSE between the full-precision rollout
    and the rollout that quantizes only chunk i (un-reconstructed MinMax quantizer)."""
    seeds = list(seeds)
    if not seeds:
        raise ValueError("sensitivity profiling needs at least one seed")
    n = model.config.chunks
    runner = runner or MinMaxRunner(model, scheme)
    per_seed = {}
    for s in sorted(seeds):
        ref = rollout(model, s)
        per_seed[s] = np.array([
            latent_mse(ref, rollout(model, s, QuantMode.quantize_only_chunk(i, scheme), runner))
            for i in range(1, n + 1)])
    alpha = np.mean([per_seed[s] for s in sorted(per_seed)], axis=0)
    return SensitivityProfile(scheme, seeds, alpha, normalize(alpha), per_seed)


def weighting_strategy(profile_or_n, kind):
    """Frame weights (unit sum) for calibration.

    ``profile_or_n`` is a :class:`SensitivityProfile` or, for the kinds that
    do not need one, the number of chunks.
    """
    if kind not in WEIGHTINGS:
        raise ValueError(f"unknown weighting {kind!r}; expected one of {WEIGHTINGS}")
    if isinstance(profile_or_n, SensitivityProfile):
        n = profile_or_n.chunks
        alpha = profile_or_n.alpha_normalized
    else:
        n = int(profile_or_n)
        alpha = None
    if kind == "uniform":
        return np.full(n, 1.0 / n)
    if kind == "heuristic_exp":
        w = 2.0 ** -np.arange(1, n + 1)
        return w / w.sum()
    if alpha is None:
        raise ValueError(f"weighting {kind!r} needs a sensitivity profile")
    if kind == "reverse":
        return alpha[::-1].copy()
    return alpha.copy()
