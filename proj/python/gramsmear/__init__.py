import json

from ._gramsmear import (
    DataError,
    NumericalError,
    filter_by_diameter,
    mask_diameter,
    matched_iou,
    relabel,
    roc_auc_ovr,
    segment,
)
from . import _gramsmear

__all__ = [
    "DataError",
    "NumericalError",
    "crossval",
    "default_spec",
    "filter_by_diameter",
    "mask_diameter",
    "matched_iou",
    "relabel",
    "roc_auc_ovr",
    "segment",
    "synth",
]


def default_spec(mode="bacteria"):
    return json.loads(_gramsmear.default_spec_json(mode))


def synth(out, spec=None, seed=None, threads=1):
    """Writes a synthetic dataset; returns the number of images."""
    spec = default_spec() if spec is None else spec
    return _gramsmear.synth(str(out), json.dumps(spec), seed, threads)


def crossval(manifest, seed=0, epochs=None, threads=1, out=None):
    """3-fold patient-stratified cross-validation; returns the report dict."""
    return json.loads(_gramsmear.crossval(str(manifest), seed, epochs, threads, None if out is None else str(out)))
