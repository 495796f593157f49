"""``qarvd`` command line: every step reads and writes files, nothing else."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .calibrate import CalibConfig, CalibrationError
from .engine import from_calibration, load_quantized, model_to_bytes, save_quantized, size_report
from .metrics_ds import POPULATIONS, TableError, UndefinedCVError, ds_report, load_table
from .outliers import DEFAULT_ALIGN, DEFAULT_ALPHA_MIN, DEFAULT_TAU, analyze_layer, \
    fleet_outlier_stats
from .pipeline import EVAL_SEEDS, PipelineConfig, ablation_grid, evaluate, quantize_model, \
    sweep, weighting_ablation
from .quant import BitwidthScheme
from .schemas import validate
from .sensitivity import WEIGHTINGS, SensitivityProfile, profile
from .tensor_core import save_tensor
from .toy_model import DEFAULT_KEEP_LIST, QuantMode, ToyModelConfig, build_model, is_kept, \
    load_model, rollout, save_model

logger = logging.getLogger("qarvd")


class CliError(RuntimeError):
    """User-facing failure; the message names the offending path or field."""


def parse_seeds(text):
    """``"0-15"``, ``"1,4,9"`` or a mix such as ``"0-3,10"``."""
    seeds = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        try:
            if "-" in part[1:]:
                lo, hi = part.split("-", 1) if not part.startswith("-") else (part, part)
                seeds.extend(range(int(lo), int(hi) + 1))
            else:
                seeds.append(int(part))
        except ValueError:
            raise argparse.ArgumentTypeError(f"bad seed list {text!r}") from None
    if not seeds:
        raise argparse.ArgumentTypeError("empty seed list")
    return tuple(seeds)


def parse_scheme(text):
    try:
        return BitwidthScheme.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def parse_patterns(text):
    return tuple(p.strip() for p in text.split(",") if p.strip())


def write_json(path, obj, schema=None):
    if schema:
        validate(obj, schema)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fp:
        json.dump(obj, fp, indent=2, sort_keys=True)
        fp.write("\n")


def write_tsv(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fp:
        w = csv.writer(fp, delimiter="\t", lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _require(path, what):
    if not Path(path).is_file():
        raise CliError(f"{what} not found: {path}")
    return path


def _load_model(path):
    try:
        return load_model(_require(path, "model file"))
    except (ValueError, KeyError) as exc:
        raise CliError(f"{path}: {exc}") from None


def _pipeline_config(args, **kw):
    calib = CalibConfig(iterations=args.iters, batch_size=args.batch_size, seed=args.calib_seed)
    return PipelineConfig(scheme=args.scheme, weighting=args.weighting, calib=calib,
                          tau=args.tau, alpha_min=args.alpha_min, align=args.align,
                          keep_list=args.keep_list, **kw)


# --- commands ------------------------------------------------------------------------------


def cmd_gen_model(args):
    kw = {}
    for field in ("blocks", "dim", "chunks", "steps", "tokens_per_chunk", "seed"):
        val = getattr(args, field)
        if val is not None:
            kw[field] = val
    if args.no_outliers:
        kw["outliers"] = ()
    model = build_model(ToyModelConfig(**kw))
    save_model(model, args.out)
    logger.info("wrote %s (%d layers)", args.out, len(model.layer_names))


def cmd_profile(args):
    model = _load_model(args.model)
    prof = profile(model, args.scheme, args.seeds)
    write_json(args.out, prof.to_dict(), "profile")
    tsv = args.tsv or str(Path(args.out).with_suffix(".tsv"))
    write_tsv(tsv, ["chunk", "alpha_raw", "alpha_normalized"],
              [[i + 1, repr(float(a)), repr(float(b))]
               for i, (a, b) in enumerate(zip(prof.alpha_raw, prof.alpha_normalized))])


def cmd_detect(args):
    model = _load_model(args.model)
    names = [n for n in model.layer_names if n.startswith("block")]
    reports = [analyze_layer(n, model.weights[n], args.tau, args.alpha_min, args.align) for n in names]
    fleet = fleet_outlier_stats(reports)
    write_json(args.out, {"layers": [r.to_dict() for r in reports], "fleet": fleet.to_dict()},
               "outliers")
    tsv = args.norms_tsv or str(Path(args.out).with_suffix(".tsv"))
    rows = []
    for r in reports:
        order = np.lexsort((np.arange(r.d_in), -r.norms))
        outl = set(int(i) for i in r.raw_outliers)
        rows.extend([r.layer_name, rank, int(ch), repr(float(r.norms[ch])), int(ch in outl)]
                    for rank, ch in enumerate(order))
    write_tsv(tsv, ["layer", "rank", "channel", "l2_norm", "outlier"], rows)


def cmd_calibrate(args):
    model = _load_model(args.model)
    prof = None
    if args.profile:
        prof = SensitivityProfile.load(_require(args.profile, "profile"))
        if prof.chunks != model.config.chunks:
            raise CliError(f"{args.profile}: profile has {prof.chunks} chunks, model has "
                           f"{model.config.chunks}")
    cfg = _pipeline_config(args, dual_scale=not args.no_dual_scale, calib_seeds=args.calib_prompts)
    if prof is None and cfg.weighting in ("final_quality", "reverse"):
        cfg = replace(cfg, profile_seeds=args.profile_seeds)
    result = quantize_model(model, cfg, prof)
    qm = from_calibration(model, result)
    save_quantized(qm, args.out)
    log = {
        "scheme": cfg.scheme.name,
        "weighting": cfg.weighting,
        "dual_scale": cfg.dual_scale,
        "iterations": cfg.calib.iterations,
        "frame_weights": [float(w) for w in result.frame_weights],
        "layers": [result.layer_results[n].to_dict() for n in result.states],
    }
    write_json(args.log or str(Path(args.out).with_suffix(".log.json")), log, "calib_log")


def cmd_run(args):
    qm = load_quantized(_require(args.qmodel, "quantized model"))
    shell = qm.shell()
    runner = qm.runner(args.engine)
    lat = np.stack([rollout(shell, s, QuantMode.quantize_all(), runner).latents for s in args.seeds])
    save_tensor(args.out, lat)


def cmd_eval(args):
    model = _load_model(args.model)
    qm = load_quantized(_require(args.qmodel, "quantized model"))
    if qm.config != model.config:
        raise CliError(f"{args.qmodel} was built for a different model config")
    mse = evaluate(model, qm.runner(args.engine), args.seeds)
    sr = size_report(qm)
    out = {"engine": args.engine, "seeds": list(args.seeds),
           "latent_mse": [float(x) for x in mse], "mean_latent_mse": float(mse.mean()),
           "size": sr.to_dict(), "file_bytes": len(model_to_bytes(qm))}
    write_json(args.out, out, "eval")


def cmd_metrics_ds(args):
    try:
        table = load_table(_require(args.table, "table"), _require(args.directions, "directions"))
        report = ds_report(table, args.population)
    except (TableError, UndefinedCVError) as exc:
        raise CliError(f"{args.table}: {exc}") from None
    write_json(args.out, report.to_dict(), "metrics_ds")
    csv_path = args.csv or str(Path(args.out).with_suffix(".csv"))
    Path(csv_path).write_text(report.to_csv())


def cmd_ablate(args):
    model = _load_model(args.model)
    base = _pipeline_config(args, calib_seeds=args.calib_prompts, profile_seeds=args.profile_seeds)
    rows = []
    if args.toggles:
        toggles = parse_patterns(args.toggles)
        if sorted(toggles) != ["dual_scale", "frame_weighting"]:
            raise CliError(f"--toggles must name dual_scale,frame_weighting, got {args.toggles}")
        grid = ablation_grid(model, base, args.seeds)
        for (dual, weighted), mse in grid.items():
            rows.append({"dual_scale": dual, "frame_weighting": weighted,
                         "latent_mse": [float(x) for x in mse], "mean_latent_mse": float(mse.mean())})
    elif args.weightings:
        res = weighting_ablation(model, base, parse_patterns(args.weightings), args.seeds)
        for kind, mse in res.items():
            rows.append({"weighting": kind, "latent_mse": [float(x) for x in mse],
                         "mean_latent_mse": float(mse.mean())})
    elif args.sweep:
        name, _, values = args.sweep.partition("=")
        if name not in ("tau", "alpha_min") or not values:
            raise CliError(f"--sweep expects tau=... or alpha_min=..., got {args.sweep!r}")
        vals = [float(v) for v in values.split(",")]
        for v, mse, n_layers in sweep(model, base, name, vals, args.seeds):
            rows.append({name: v, "outlier_layers": n_layers,
                         "latent_mse": [float(x) for x in mse], "mean_latent_mse": float(mse.mean())})
    else:
        raise CliError("ablate needs one of --toggles, --weightings or --sweep")
    write_json(args.out, {"scheme": base.scheme.name, "seeds": list(args.seeds), "rows": rows},
               "ablate")
    keys = [k for k in rows[0] if k != "latent_mse"]
    write_tsv(str(Path(args.out).with_suffix(".tsv")), keys,
              [[r[k] if not isinstance(r[k], float) else repr(r[k]) for k in keys] for r in rows])


# --- parser --------------------------------------------------------------------------------


def _add_quant_flags(p, scheme="W4A8"):
    p.add_argument("--scheme", type=parse_scheme, default=BitwidthScheme.parse(scheme))
    p.add_argument("--weighting", choices=WEIGHTINGS, default="final_quality")
    p.add_argument("--iters", type=int, default=CalibConfig.iterations)
    p.add_argument("--batch-size", type=int, default=CalibConfig.batch_size)
    p.add_argument("--calib-seed", type=int, default=0, help="calibration RNG seed")
    p.add_argument("--calib-prompts", type=parse_seeds, default=PipelineConfig.calib_seeds)
    p.add_argument("--profile-seeds", type=parse_seeds, default=PipelineConfig.profile_seeds)
    _add_outlier_flags(p)
    p.add_argument("--keep-list", type=parse_patterns, default=DEFAULT_KEEP_LIST,
                   help="comma-separated layer patterns kept in high precision")


def _add_outlier_flags(p):
    p.add_argument("--tau", type=float, default=DEFAULT_TAU)
    p.add_argument("--alpha-min", type=float, default=DEFAULT_ALPHA_MIN)
    p.add_argument("--align", type=int, default=DEFAULT_ALIGN)


def build_parser():
    ap = argparse.ArgumentParser(prog="qarvd", description=__doc__)
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-model", help="write a seeded toy model")
    p.add_argument("--out", required=True)
    for f in ("blocks", "dim", "chunks", "steps", "seed"):
        p.add_argument(f"--{f}", type=int)
    p.add_argument("--tokens-per-chunk", dest="tokens_per_chunk", type=int)
    p.add_argument("--no-outliers", action="store_true", help="skip outlier channel injection")
    p.set_defaults(func=cmd_gen_model)

    p = sub.add_parser("profile-sensitivity", help="per-chunk sensitivity profile")
    p.add_argument("--model", required=True)
    p.add_argument("--scheme", type=parse_scheme, default=BitwidthScheme(4, 8),
                   help="probe bitwidth (default: the W4A8 deployment target)")
    p.add_argument("--seeds", type=parse_seeds, default=PipelineConfig.profile_seeds)
    p.add_argument("--out", required=True)
    p.add_argument("--tsv")
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("detect-outliers", help="outlier channel report and sorted norms")
    p.add_argument("--model", required=True)
    _add_outlier_flags(p)
    p.add_argument("--out", required=True)
    p.add_argument("--norms-tsv")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("calibrate", help="quantize and calibrate, write a quantized model")
    p.add_argument("--model", required=True)
    p.add_argument("--profile", help="sensitivity profile JSON (computed if omitted)")
    p.add_argument("--no-dual-scale", action="store_true")
    _add_quant_flags(p)
    p.add_argument("--out", required=True)
    p.add_argument("--log", help="training log JSON (default: <out>.log.json)")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("run", help="roll out a quantized model")
    p.add_argument("--qmodel", required=True)
    p.add_argument("--engine", choices=("int", "fakequant"), default="int")
    p.add_argument("--seeds", type=parse_seeds, default=EVAL_SEEDS)
    p.add_argument("--out", required=True, help="latents [seeds, chunks, tokens, dim] as a tensor file")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", help="latent MSE against the full-precision model, plus sizes")
    p.add_argument("--model", required=True)
    p.add_argument("--qmodel", required=True)
    p.add_argument("--engine", choices=("int", "fakequant"), default="int")
    p.add_argument("--seeds", type=parse_seeds, default=EVAL_SEEDS)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("metrics-ds", help="CV / BOA / DS over a result table")
    p.add_argument("--table", required=True)
    p.add_argument("--directions", help="sidecar JSON (default: directions.json next to the table)")
    p.add_argument("--population", choices=POPULATIONS, default="pooled")
    p.add_argument("--out", required=True)
    p.add_argument("--csv")
    p.set_defaults(func=cmd_metrics_ds)

    p = sub.add_parser("ablate", help="toggle grid, weighting comparison or tau/alpha sweep")
    p.add_argument("--model", required=True)
    p.add_argument("--toggles", help="dual_scale,frame_weighting")
    p.add_argument("--weightings", help="comma-separated weighting kinds")
    p.add_argument("--sweep", help="tau=2.5,3.0,... or alpha_min=1.1,...")
    p.add_argument("--seeds", type=parse_seeds, default=EVAL_SEEDS)
    _add_quant_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "command", None) == "metrics-ds" and args.directions is None:
        args.directions = str(Path(args.table).with_name("directions.json"))
    try:
        args.func(args)
    except (CliError, CalibrationError, TableError, ValueError, OSError) as exc:
        print(f"qarvd {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
