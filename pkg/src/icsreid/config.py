"""Flat key-value run configuration.

Every tunable of the pipeline lives in one flat namespace with dotted keys
(``intra.alpha``, ``adv.epsilon`` ...). Config files are plain UTF-8 text,
one ``key = value`` pair per line, ``#`` starts a comment. Types are coerced
from the defaults table; unknown keys are rejected so typos fail loudly.
"""

from __future__ import annotations

from pathlib import Path
from typing import Any, Iterator, Mapping

DEFAULTS: dict[str, Any] = {
    "seed": 0,
    # encoder
    "encoder.kind": "toy",            # toy | pretrained
    "encoder.dim": 32,                # output feature dimension of the toy head
    "encoder.weights_ref": "",        # archive path for the pretrained adapter
    # stage 1: per-ID prompt token learning
    "prompt.tokens": 5,
    "prompt.tau": 0.05,
    "prompt.epochs": 60,
    "prompt.batch_size": 64,
    "prompt.lr": 0.00035,
    "prompt.init_std": 0.02,
    # stages 2-3: main training loop
    "train.total_epochs": 80,
    "train.warmup_epochs": 10,
    "train.e_intra": 5,
    "train.association_period": 1,
    "train.ids_per_batch": 16,        # P
    "train.instances_per_id": 8,      # K
    "train.lr": 0.00035,
    "train.lr_decay": "step",         # step | cosine
    "train.lr_milestones": "40,70",
    "train.lr_gamma": 0.1,
    # per-camera discriminative learning
    "intra.alpha": 0.1,
    "intra.tau": 0.05,
    "intra.lambda": 0.8,
    "intra.label_smoothing": 0.1,
    "intra.text_tau": 1.0,
    # cross-camera association + prototype learning
    "inter.alpha": 0.1,
    "inter.tau": 0.05,
    "inter.threshold": 1.7,
    "inter.distance": "euclidean",    # euclidean | cosine, over unit-norm centroids
    "inter.label_smoothing": 0.1,
    "inter.text_tau": 1.0,
    # global-ID classifier and the multi-positive adversarial loss
    "adv.epsilon": 0.8,
    "adv.tau": 0.05,
    "adv.start_epoch": 40,            # E_adv; first epoch with the adversarial loss active
    "adv.full_softmax": False,        # include non-self positives in each denominator
    # ablation switches
    "ablation.text_alignment": True,
    "ablation.adversarial": True,
    # evaluation
    "eval.filter_same_camera": True,
    "eval.ranks": "1,5,10",
    # debugging / verification
    "debug.verify_partition": False,
}


class RunConfig:
    """Immutable view over DEFAULTS with overrides applied."""

    def __init__(self, overrides: Mapping[str, Any] | None = None):
        values = dict(DEFAULTS)
        for key, raw in (overrides or {}).items():
            if key not in DEFAULTS:
                raise KeyError(f"unknown config key: {key!r}")
            values[key] = _coerce(key, raw)
        self._values = values

    def __getitem__(self, key: str) -> Any:
        return self._values[key]

    def __contains__(self, key: str) -> bool:
        return key in self._values

    def __iter__(self) -> Iterator[str]:
        return iter(self._values)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, RunConfig) and self._values == other._values

    def as_dict(self) -> dict[str, Any]:
        return dict(self._values)

    def with_overrides(self, overrides: Mapping[str, Any]) -> "RunConfig":
        merged = self.as_dict()
        for key, raw in overrides.items():
            if key not in DEFAULTS:
                raise KeyError(f"unknown config key: {key!r}")
            merged[key] = _coerce(key, raw)
        return RunConfig(merged)

    def int_list(self, key: str) -> list[int]:
        text = str(self[key]).strip()
        if not text:
            return []
        return [int(part) for part in text.split(",")]

    def dump(self) -> str:
        lines = [f"{key} = {_format(self._values[key])}" for key in sorted(self._values)]
        return "\n".join(lines) + "\n"


def _coerce(key: str, raw: Any) -> Any:
    default = DEFAULTS[key]
    if isinstance(default, bool):
        if isinstance(raw, bool):
            return raw
        text = str(raw).strip().lower()
        if text in ("true", "1", "yes", "on"):
            return True
        if text in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"config key {key!r} expects a boolean, got {raw!r}")
    if isinstance(default, int) and not isinstance(default, bool):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return str(raw)


def _format(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def parse_config_text(text: str) -> dict[str, Any]:
    """Parse ``key = value`` lines into an override mapping (uncoerced)."""
    overrides: dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ValueError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = stripped.split("=", 1)
        overrides[key.strip()] = value.strip()
    return overrides


def load_config(path: str | Path) -> RunConfig:
    text = Path(path).read_text(encoding="utf-8")
    return RunConfig(parse_config_text(text))


def save_config(config: RunConfig, path: str | Path) -> None:
    Path(path).write_text(config.dump(), encoding="utf-8")
