"""Metric reliability over quantization result tables.

For every metric column: the coefficient of variation over the quantized
cells (how strongly the metric responds), the bitwidth-order agreement
(the fraction of methods whose scores respect
``reference > W8A8 > W4A8 > W4A6``) and their product, the
discriminability score.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from importlib import resources

import numpy as np

DIRECTIONS = ("higher_better", "lower_better")
POPULATIONS = ("pooled", "per_bitwidth")


class TableError(ValueError):
    """Malformed or incomplete result table."""


class UndefinedCVError(ZeroDivisionError):
    """Mean of the population is zero."""


@dataclass(frozen=True)
class ResultTable:
    """Scores per (method, bitwidth, metric); the reference row is shared by all methods.

    ``bitwidths`` lists the quantized settings from mildest to harshest.
    """

    methods: tuple
    bitwidths: tuple
    metrics: tuple
    directions: dict
    cells: dict
    reference: dict
    reference_name: str = "BF16"

    def __post_init__(self):
        for m in self.metrics:
            if self.directions.get(m) not in DIRECTIONS:
                raise TableError(f"metric {m!r} needs a direction in {DIRECTIONS}")
            if m not in self.reference:
                raise TableError(f"reference row lacks metric {m!r}")
        missing = [(me, b, m) for me in self.methods for b in self.bitwidths for m in self.metrics
                   if (me, b, m) not in self.cells]
        if missing:
            raise TableError(f"missing cells, e.g. {missing[0]} ({len(missing)} total)")

    def value(self, method, bitwidth, metric):
        return self.cells[(method, bitwidth, metric)]

    def column(self, metric, bitwidth=None):
        bws = self.bitwidths if bitwidth is None else (bitwidth,)
        return np.array([self.cells[(me, b, metric)] for b in bws for me in self.methods])


def load_table(csv_source, directions_source):
    """Read ``method,bitwidth,<metric>...`` rows plus a directions sidecar.

    The sidecar holds ``directions`` (metric -> higher_better|lower_better),
    ``bitwidth_order`` (reference first) and ``reference`` (the shared row's
    bitwidth label). Either argument may be a path or an open text stream.
    """
    side = _read_json(directions_source)
    try:
        order = list(side["bitwidth_order"])
        ref = side.get("reference", order[0])
        directions = dict(side["directions"])
    except (KeyError, TypeError) as exc:
        raise TableError(f"directions file lacks {exc}") from None
    if order[0] != ref:
        raise TableError("bitwidth_order must start with the reference")
    rows = list(csv.DictReader(_open_text(csv_source)))
    if not rows:
        raise TableError("empty result table")
    header = list(rows[0].keys())
    if header[:2] != ["method", "bitwidth"]:
        raise TableError("CSV header must start with method,bitwidth")
    metrics = tuple(header[2:])
    cells, reference, methods = {}, None, []
    for r in rows:
        try:
            vals = {m: float(r[m]) for m in metrics}
        except (TypeError, ValueError) as exc:
            raise TableError(f"bad value in row {r}: {exc}") from None
        if r["bitwidth"] == ref:
            if reference is not None:
                raise TableError("more than one reference row")
            reference = vals
            continue
        if r["bitwidth"] not in order:
            raise TableError(f"bitwidth {r['bitwidth']!r} not in bitwidth_order")
        if r["method"] not in methods:
            methods.append(r["method"])
        for m, v in vals.items():
            cells[(r["method"], r["bitwidth"], m)] = v
    if reference is None:
        raise TableError(f"no {ref} reference row")
    return ResultTable(tuple(methods), tuple(order[1:]), metrics, directions, cells, reference, ref)


def bundled_table(name="table1"):
    """One of the shipped fixtures: ``table1`` or ``table2``."""
    base = resources.files("qarvd") / "data"
    with (base / f"{name}.csv").open() as t, (base / "directions.json").open() as d:
        return load_table(t, d)


def _open_text(src):
    return open(src, newline="") if isinstance(src, (str, bytes)) or hasattr(src, "__fspath__") \
        else io.StringIO(src.read())


def _read_json(src):
    if isinstance(src, dict):
        return src
    with _open_text(src) as fp:
        return json.load(fp)


def _cv(values):
    mu = float(np.mean(np.abs(values)))
    if mu == 0:
        raise UndefinedCVError("coefficient of variation undefined for zero mean")
    return float(np.std(values)) / mu


def cv(table, metric, population="pooled"):
    """Population std over mean |value| of the quantized cells.

    ``pooled`` takes all quantized cells at once; ``per_bitwidth`` averages
    the per-bitwidth CVs. The reference row is excluded in both.
    """
    if population == "pooled":
        return _cv(table.column(metric))
    if population == "per_bitwidth":
        return float(np.mean([_cv(table.column(metric, b)) for b in table.bitwidths]))
    raise ValueError(f"population must be one of {POPULATIONS}")


def _better(a, b, direction):
    return a > b if direction == "higher_better" else a < b


def boa(table, metric):
    """Fraction of methods whose chain reference > b1 > b2 > ... holds strictly."""
    direction = table.directions[metric]
    hits = 0
    for me in table.methods:
        chain = [table.reference[metric]] + [table.value(me, b, metric) for b in table.bitwidths]
        hits += all(_better(x, y, direction) for x, y in zip(chain, chain[1:]))
    return hits / len(table.methods)


@dataclass(frozen=True)
class MetricScore:
    metric: str
    direction: str
    cv: float
    boa: float

    @property
    def ds(self):
        return self.cv * self.boa


@dataclass(frozen=True)
class DiscriminabilityReport:
    scores: tuple
    population: str = "pooled"

    def by_metric(self):
        return {s.metric: s for s in self.scores}

    def ranking(self):
        return [s.metric for s in self.scores]

    def to_dict(self):
        return {
            "population": self.population,
            "note": "CV over quantized cells only; the shared reference row is excluded",
            "metrics": [{"metric": s.metric, "direction": s.direction, "cv": s.cv,
                         "boa": s.boa, "ds": s.ds} for s in self.scores],
        }

    def to_csv(self):
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["metric", "direction", "cv", "boa", "ds"])
        for s in self.scores:
            w.writerow([s.metric, s.direction, repr(s.cv), repr(s.boa), repr(s.ds)])
        return out.getvalue()


def ds_report(table, population="pooled"):
    """Per-metric CV, BOA and DS, sorted by DS descending (column order breaks ties)."""
    scores = [MetricScore(m, table.directions[m], cv(table, m, population), boa(table, m))
              for m in table.metrics]
    order = sorted(range(len(scores)), key=lambda i: (-scores[i].ds, i))
    return DiscriminabilityReport(tuple(scores[i] for i in order), population)
