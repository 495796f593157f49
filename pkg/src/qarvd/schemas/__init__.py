"""JSON Schemas for every report the command line writes."""

import json
from functools import lru_cache
from importlib import resources

import jsonschema

NAMES = ("profile", "outliers", "calib_log", "eval", "metrics_ds", "ablate")


@lru_cache(maxsize=None)
def load(name):
    if name not in NAMES:
        raise KeyError(f"unknown schema {name!r}")
    return json.loads((resources.files(__name__) / f"{name}.schema.json").read_text())


def validate(obj, name):
    """Raise ``jsonschema.ValidationError`` if ``obj`` does not match schema ``name``."""
    jsonschema.validate(obj, load(name))
