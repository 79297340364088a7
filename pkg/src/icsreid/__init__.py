"""Camera-agnostic feature learning for intra-camera supervised re-identification.

The package trains retrieval features from datasets whose identity labels
exist only within each camera: per-identity prompt tokens supply semantic
targets, per-camera hybrid memories drive discriminative learning, a
constrained mutual-nearest-neighbor association links ids across cameras,
and a multi-positive adversarial loss suppresses camera-specific cues.
"""

from .config import DEFAULTS, RunConfig, load_config, save_config
from .data import (
    DatasetManifest,
    PKBatch,
    Sample,
    accumulate_global_ids,
    read_manifest,
    sample_pk_batch,
    write_manifest,
)
from .synthetic import SyntheticWorld, TruthTable, WorldSpec, generate_world

__all__ = [
    "DEFAULTS",
    "RunConfig",
    "load_config",
    "save_config",
    "DatasetManifest",
    "PKBatch",
    "Sample",
    "accumulate_global_ids",
    "read_manifest",
    "sample_pk_batch",
    "write_manifest",
    "SyntheticWorld",
    "TruthTable",
    "WorldSpec",
    "generate_world",
]
