"""Statistical bitflip fault injection into stored weights (the reference method).

Every (repetition, image) pair gets its own fault, drawn from a random
stream derived from ``(seed, repetition, image)`` alone. Work is split
into fixed repetition chunks and merged with integer sums, so the number
of worker processes never changes a result.
"""

from __future__ import annotations

import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .analysis import ClassificationTally, LayerAccumulator
from .errors import ConfigError
from .inference import forward_batch, golden_batch, predict
from .model_io import Dataset, NetworkModel
from .quant import BitAddress, check_address

SINGLE, DOUBLE = "single", "double"
FAULT_MODELS = {SINGLE: 1, DOUBLE: 2}
# samples per forward batch; fixed so chunking is independent of --jobs
BATCH_SAMPLES = 2048


@dataclass(frozen=True)
class FaultSpec:
    layer: str
    bits: tuple[BitAddress, ...]

    def __post_init__(self):
        object.__setattr__(self, "bits", tuple(self.bits))
        if not 1 <= len(self.bits) <= 2:
            raise ConfigError("a fault flips one or two bits")
        if len(set(self.bits)) != len(self.bits):
            raise ConfigError("fault bit addresses must be distinct")

    def validate(self, model: NetworkModel) -> None:
        layer = model.layer(self.layer)
        if not layer.has_weights:
            raise ConfigError(f"layer {self.layer!r} has no weights")
        for addr in self.bits:
            check_address(layer.weights, addr)

    def to_dict(self):
        return {"layer": self.layer, "bits": [a.to_list() for a in self.bits]}


@dataclass(frozen=True)
class CampaignConfig:
    layer: str
    fault_model: str = SINGLE
    repetitions: int = 1000
    seed: int = 0
    per_image_independent: bool = True

    def __post_init__(self):
        if self.fault_model not in FAULT_MODELS:
            raise ConfigError(f"fault model must be one of {sorted(FAULT_MODELS)}, got {self.fault_model!r}")
        if self.repetitions < 1:
            raise ConfigError("repetitions must be >= 1")


def required_sample_size(population: int, margin: float, confidence_t: float = 1.96, p: float = 0.5) -> int:
    """Number of faults to inject for a given error margin and confidence.

    n = N / (1 + e^2 (N - 1) / (t^2 p (1 - p))), rounded up.
    """
    if population < 1:
        raise ConfigError("population must be positive")
    if not 0 < margin < 1 or not 0 < p < 1 or confidence_t <= 0:
        raise ConfigError("margin and p must lie in (0, 1) and t must be positive")
    n = population / (1 + margin**2 * (population - 1) / (confidence_t**2 * p * (1 - p)))
    # guard against float noise pushing an exact integer up by one
    return min(population, math.ceil(n - 1e-9))


def fault_stream(seed: int, repetition: int, image: int | None) -> np.random.Generator:
    """Deterministic generator for one (repetition, image) task.

    ``image=None`` gives the stream of a batch-shared fault.
    """
    key = [seed & (2**64 - 1), 0 if image is not None else 1, repetition, image or 0]
    return np.random.default_rng(key)


def sample_fault(config: CampaignConfig, model: NetworkModel, rng: np.random.Generator) -> FaultSpec:
    """Draw uniform bit address(es) over all weight bits of the target layer."""
    layer = model.layer(config.layer)
    if not layer.has_weights:
        raise ConfigError(f"layer {config.layer!r} has no weights to fault")
    nbits = 8 * layer.weights.size
    k = FAULT_MODELS[config.fault_model]
    if k > nbits:
        raise ConfigError(f"layer {config.layer!r} has fewer than {k} weight bits")
    picks = rng.choice(nbits, size=k, replace=False) if k > 1 else [rng.integers(nbits)]
    return FaultSpec(config.layer, tuple(BitAddress(int(p) // 8, int(p) % 8) for p in picks))


@dataclass
class FICampaignResult:
    layer: str
    fault_model: str
    repetitions: int
    seed: int
    per_image_independent: bool
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
            "format": "appraiser-fi",
            "version": 1,
            "method": "FI",
            "layer": self.layer,
            "fault_model": self.fault_model,
            "repetitions": self.repetitions,
            "seed": self.seed,
            "per_image_independent": self.per_image_independent,
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


def golden_summary(model, data) -> dict:
    gold = golden_batch(model, data)
    tally = ClassificationTally(model.num_classes)
    tally.add(gold.predicted, data.labels)
    return {
        "accuracy": tally.accuracy,
        "recall": tally.recall(data.positive_class),
        "per_class_recall": tally.per_class_recall(),
        "macro_recall": tally.macro_recall(),
    }


def summarize(model, data, tally, accs, bins=101) -> dict:
    """Metric fields shared by FI and APPRAISER results."""
    return {
        "layers": model.names,
        "model": model.fingerprint(),
        "dataset": data.fingerprint(),
        "images": len(data),
        "accuracy": tally.accuracy,
        "recall": tally.recall(data.positive_class),
        "per_class_recall": tally.per_class_recall(),
        "macro_recall": tally.macro_recall(),
        "golden": golden_summary(model, data),
        "bitflip_pct": {n: accs[n].bitflip_pct() for n in model.names},
        "normalized_error": {n: accs[n].normalized(n, bins).to_dict() for n in model.names},
    }


def new_accumulators(model: NetworkModel) -> dict[str, LayerAccumulator]:
    return {n: LayerAccumulator(int(np.prod(s))) for n, s in zip(model.names, model.output_shapes())}


def _faults_for(config, model, reps, n_images, forced):
    """Fault list for the given repetitions, in (repetition, image) order."""
    faults = []
    for r in reps:
        if forced is not None:
            faults.extend([forced] * n_images)
        elif config.per_image_independent:
            faults.extend(sample_fault(config, model, fault_stream(config.seed, r, i)) for i in range(n_images))
        else:
            shared = sample_fault(config, model, fault_stream(config.seed, r, None))
            faults.extend([shared] * n_images)
    return faults


def _faulty_weight_stack(weights: np.ndarray, faults) -> np.ndarray:
    stack = np.repeat(weights.reshape(1, -1), len(faults), axis=0).view(np.uint8)
    rows, cols, masks = [], [], []
    for i, f in enumerate(faults):
        for a in f.bits:
            rows.append(i)
            cols.append(a.flat_index)
            masks.append(1 << a.bit_pos)
    # .at so two bits of the same weight both apply
    np.bitwise_xor.at(stack, (np.array(rows), np.array(cols)), np.array(masks, dtype=np.uint8))
    return stack.view(np.int8).reshape((len(faults),) + weights.shape)


def _run_chunk(args):
    model, data, config, reps, forced = args
    gold = golden_batch(model, data)
    images = data.stack()
    labels = np.asarray(data.labels)
    n = len(data)
    accs = new_accumulators(model)
    tally = ClassificationTally(model.num_classes)
    weights = model.layer(config.layer).weights.array()
    per_batch = max(1, BATCH_SAMPLES // n)
    for start in range(0, len(reps), per_batch):
        block = reps[start:start + per_batch]
        faults = _faults_for(config, model, block, n, forced)
        stack = _faulty_weight_stack(weights, faults)
        x = np.tile(images, (len(block), 1, 1, 1))
        outs = forward_batch(model, x, weight_override=(config.layer, stack))
        for name, out, g in zip(model.names, outs, gold.outputs):
            accs[name].add(out, np.tile(g, (len(block),) + (1,) * (g.ndim - 1)))
        tally.add(predict(outs[-1]), np.tile(labels, len(block)))
    return accs, tally


def _chunks(repetitions: int, n_images: int) -> list[range]:
    size = max(1, BATCH_SAMPLES // max(1, n_images)) * 4
    return [range(s, min(s + size, repetitions)) for s in range(0, repetitions, size)]


def default_jobs() -> int:
    try:
        return max(1, int(os.environ.get("APPRAISER_JOBS", "1")))
    except ValueError:
        return 1


def run_fi_campaign(
    model: NetworkModel,
    data: Dataset,
    config: CampaignConfig,
    jobs: int | None = None,
    forced_fault: FaultSpec | None = None,
    bins: int = 101,
) -> FICampaignResult:
    """Run ``repetitions`` x ``len(data)`` faulty inferences against golden.

    ``forced_fault`` replaces sampling with one fixed fault (for probing a
    specific weight bit).
    """
    if len(data) == 0:
        raise ConfigError("dataset is empty")
    if config.layer not in model.names:
        raise ConfigError(f"unknown layer {config.layer!r}")
    if not model.layer(config.layer).has_weights:
        raise ConfigError(f"layer {config.layer!r} has no weights to fault")
    if forced_fault is not None:
        if forced_fault.layer != config.layer:
            raise ConfigError("forced fault targets a different layer")
        forced_fault.validate(model)
    jobs = jobs or default_jobs()
    started = time.perf_counter()
    tasks = [(model, data, config, chunk, forced_fault) for chunk in _chunks(config.repetitions, len(data))]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            parts = list(pool.map(_run_chunk, tasks))
    else:
        parts = [_run_chunk(t) for t in tasks]
    accs, tally = parts[0]
    for more_accs, more_tally in parts[1:]:
        for name in accs:
            accs[name].merge(more_accs[name])
        tally.merge(more_tally)
    duration = time.perf_counter() - started
    return FICampaignResult(
        layer=config.layer,
        fault_model=config.fault_model,
        repetitions=config.repetitions,
        seed=config.seed,
        per_image_independent=config.per_image_independent,
        inference_count=config.repetitions * len(data),
        duration_s=duration,
        **summarize(model, data, tally, accs, bins),
    )
