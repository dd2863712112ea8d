"""Concept bottleneck models over frozen embeddings."""

from ._core import (
    DEFAULT_ALPHA_LOG,
    MANIFEST_FORMAT_VERSION,
    CbmkitError,
    cms_classify,
    compute_scores,
    load_bundle,
    run_cli,
    synth,
    train_cbm,
    write_bundle,
    zero_shot_classify,
)

__all__ = [
    "DEFAULT_ALPHA_LOG",
    "MANIFEST_FORMAT_VERSION",
    "CbmkitError",
    "cms_classify",
    "compute_scores",
    "load_bundle",
    "run_cli",
    "synth",
    "train_cbm",
    "write_bundle",
    "zero_shot_classify",
]
