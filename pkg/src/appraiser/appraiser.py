"""Single-pass resilience assessment with an approximate multiplier.

Instead of injecting faults one at a time, the compromised layer's MACs are
switched to an approximate multiplier and the dataset is run once. Only the
target layer is approximated; downstream layers stay exact, so errors
originate in that layer and propagate.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .analysis import ClassificationTally
from .errors import ConfigError
from .faults import new_accumulators, summarize
from .inference import ALL_EXACT, MultiplierBinding, forward_batch, golden_batch, predict
from .model_io import Dataset, NetworkModel
from .multipliers import MultiplierModel

FUNCTIONAL, ASSESSMENT = "functional", "assessment"


@dataclass(frozen=True)
class AppraiserConfig:
    layer: str
    multiplier: MultiplierModel
    substitution_fraction: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.substitution_fraction <= 1.0:
            raise ConfigError("substitution_fraction must be in [0, 1]")


def set_mode(binding: MultiplierBinding, mode: str, config: AppraiserConfig | None = None) -> MultiplierBinding:
    """Switch between exact units (functional) and the approximate unit (assessment).

    A pure transform: the input binding is left as is.
    """
    if mode == FUNCTIONAL:
        return ALL_EXACT
    if mode == ASSESSMENT:
        if config is None:
            raise ConfigError("assessment mode needs an AppraiserConfig")
        return MultiplierBinding(
            {config.layer: config.multiplier}, {config.layer: config.substitution_fraction}
        )
    raise ConfigError(f"unknown mode {mode!r}")


@dataclass
class AppraiserResult:
    layer: str
    multiplier: dict
    substitution_fraction: float
    layers: list[str]
    model: str
    dataset: str
    images: int
    inference_count: int
    accuracy: float | None
    recall: float | None
    per_class_recall: list
    macro_recall: float | None
    golden: dict
    bitflip_pct: dict
    normalized_error: dict
    duration_s: float = field(default=0.0, compare=False)

    def to_dict(self, timing: bool = False) -> dict:
        d = {
            "format": "appraiser-appraise",
            "version": 1,
            "method": "APPRAISER",
            "layer": self.layer,
            "multiplier": self.multiplier,
            "substitution_fraction": self.substitution_fraction,
            "layers": self.layers,
            "model": self.model,
            "dataset": self.dataset,
            "images": self.images,
            "inference_count": self.inference_count,
            "accuracy": self.accuracy,
            "recall": self.recall,
            "per_class_recall": self.per_class_recall,
            "macro_recall": self.macro_recall,
            "golden": self.golden,
            "bitflip_pct": self.bitflip_pct,
            "normalized_error": self.normalized_error,
        }
        if timing:
            d["duration_s"] = self.duration_s
            d["ms_per_inference"] = 1000.0 * self.duration_s / self.inference_count
        return d

    @property
    def accuracy_drop_pp(self):
        return (self.golden["accuracy"] - self.accuracy) * 100.0


def run_appraiser(model: NetworkModel, data: Dataset, config: AppraiserConfig, bins: int = 101) -> AppraiserResult:
    """One approximate pass over the dataset, measured against golden."""
    if len(data) == 0:
        raise ConfigError("dataset is empty")
    if config.layer not in model.names:
        raise ConfigError(f"unknown layer {config.layer!r}")
    if not model.layer(config.layer).has_weights:
        raise ConfigError(f"layer {config.layer!r} has no multipliers to approximate")
    binding = set_mode(ALL_EXACT, ASSESSMENT, config)
    gold = golden_batch(model, data)
    started = time.perf_counter()
    outs = forward_batch(model, data.stack(), binding)
    duration = time.perf_counter() - started
    accs = new_accumulators(model)
    for name, out, g in zip(model.names, outs, gold.outputs):
        accs[name].add(out, g)
    tally = ClassificationTally(model.num_classes)
    tally.add(predict(outs[-1]), np.asarray(data.labels))
    mult = config.multiplier
    return AppraiserResult(
        layer=config.layer,
        multiplier={"name": mult.name, "kind": mult.kind, "spec": mult.describe()},
        substitution_fraction=config.substitution_fraction,
        inference_count=len(data),
        duration_s=duration,
        **summarize(model, data, tally, accs, bins),
    )
