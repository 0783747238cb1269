"""Resilience metrics, method comparison, cost model and report export.

Metrics are measured per layer against a golden (fault-free, all-exact) run:

* normalized error: golden - observed per neuron, divided by the largest
  absolute error seen in that layer over the whole evaluated set
* bitflips: percentage of output bits differing from golden
* accuracy / recall drop, in percentage points

Large campaigns never hold all traces. ``LayerAccumulator`` keeps integer
sufficient statistics (bit counts, an exact histogram of raw integer
errors, per-neuron error sums) that merge by addition, so results do not
depend on evaluation order or parallelism.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .errors import AppraiserError, ComparisonError, ConfigError
from .quant import mismatched_bits

ERR_SPAN = 255  # int8 differences lie in [-255, 255]
DEFAULT_BINS = 101

CSV_COLUMNS = ("kind", "affected_layer", "measured_layer", "method", "fault_model", "value")


# --- accumulation ----------------------------------------------------------


class LayerAccumulator:
    """Mergeable per-layer statistics over (observed, golden) output pairs."""

    def __init__(self, neurons: int):
        self.neurons = neurons
        self.samples = 0
        self.mismatched = 0
        self.total_bits = 0
        self.err_counts = np.zeros(2 * ERR_SPAN + 1, dtype=np.int64)
        self.neuron_sum = np.zeros(neurons, dtype=np.int64)

    def add(self, observed: np.ndarray, golden: np.ndarray) -> None:
        """Add a batch: both arrays are (B, ...) int8 with identical shapes."""
        if observed.shape != golden.shape:
            raise ComparisonError(f"misaligned outputs {observed.shape} vs {golden.shape}")
        b = observed.shape[0]
        self.samples += b
        self.mismatched += mismatched_bits(observed, golden)
        self.total_bits += 8 * observed.size
        err = golden.astype(np.int16) - observed.astype(np.int16)
        err = err.reshape(b, -1)
        self.err_counts += np.bincount((err + ERR_SPAN).ravel(), minlength=2 * ERR_SPAN + 1)
        self.neuron_sum += err.sum(axis=0, dtype=np.int64)

    def merge(self, other: "LayerAccumulator") -> None:
        self.samples += other.samples
        self.mismatched += other.mismatched
        self.total_bits += other.total_bits
        self.err_counts += other.err_counts
        self.neuron_sum += other.neuron_sum

    def bitflip_pct(self) -> float:
        if self.total_bits == 0:
            return 0.0
        return float(Fraction(100 * self.mismatched, self.total_bits))

    def normalized(self, layer: str, bins: int = DEFAULT_BINS) -> "NormalizedErrorStats":
        values = np.arange(-ERR_SPAN, ERR_SPAN + 1)
        nz = values[self.err_counts > 0]
        divisor = int(np.abs(nz).max()) if nz.size else 0
        edges = np.linspace(-1.0, 1.0, bins + 1)
        if divisor == 0:
            normalized_values = np.zeros_like(values, dtype=np.float64)
            neuron_mean = np.zeros(self.neurons)
        else:
            normalized_values = values / divisor
            neuron_mean = self.neuron_sum / (self.samples * divisor)
        counts, _ = np.histogram(normalized_values, bins=edges, weights=self.err_counts)
        return NormalizedErrorStats(
            layer=layer,
            divisor=divisor,
            samples=self.samples,
            neuron_mean=[float(v) for v in neuron_mean],
            bin_edges=[float(e) for e in edges],
            counts=[int(c) for c in counts],
        )


@dataclass
class NormalizedErrorStats:
    layer: str
    divisor: int
    samples: int
    neuron_mean: list[float]
    bin_edges: list[float]
    counts: list[int]

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


# --- trace-level metric API -------------------------------------------------


def _aligned(measured: str, traces, golden):
    if len(traces) != len(golden):
        raise ComparisonError(f"{len(traces)} traces vs {len(golden)} golden traces")
    pairs = []
    for t, g in zip(traces, golden):
        if t.names != g.names:
            raise ComparisonError("traces come from different models")
        if measured not in t.names:
            raise ComparisonError(f"unknown measured layer {measured!r}")
        pairs.append((t.output(measured), g.output(measured)))
    if pairs and len({o.shape for o, _ in pairs} | {g.shape for _, g in pairs}) != 1:
        raise ComparisonError(f"inconsistent output shapes for {measured}")
    return pairs


def _accumulate(measured, traces, golden) -> LayerAccumulator:
    pairs = _aligned(measured, traces, golden)
    neurons = pairs[0][0].size if pairs else 0
    acc = LayerAccumulator(neurons)
    if pairs:
        acc.add(np.stack([o.data for o, _ in pairs]), np.stack([g.data for _, g in pairs]))
    return acc


def normalized_error(measured: str, traces, golden, bins: int = DEFAULT_BINS) -> NormalizedErrorStats:
    """Normalized error of one layer's outputs against aligned golden traces."""
    return _accumulate(measured, traces, golden).normalized(measured, bins)


def bitflip_percentage(measured: str, traces, golden) -> float:
    return _accumulate(measured, traces, golden).bitflip_pct()


def _counts(predicted, labels, num_classes):
    predicted = np.asarray(predicted)
    labels = np.asarray(labels)
    correct = int(np.count_nonzero(predicted == labels))
    tp = [int(np.count_nonzero((predicted == c) & (labels == c))) for c in range(num_classes)]
    actual = [int(np.count_nonzero(labels == c)) for c in range(num_classes)]
    return correct, tp, actual


def accuracy_recall(traces, labels, positive_class: int):
    """``(accuracy, recall)`` as fractions; recall is None without positives."""
    if len(traces) != len(labels):
        raise ComparisonError(f"{len(traces)} traces vs {len(labels)} labels")
    if not labels:
        return None, None
    predicted = [t.predicted for t in traces]
    correct, tp, actual = _counts(predicted, labels, max(max(labels), positive_class, *predicted) + 1)
    recall = tp[positive_class] / actual[positive_class] if actual[positive_class] else None
    return correct / len(labels), recall


@dataclass
class ClassificationTally:
    """Integer confusion counts summed over one or more passes of a dataset."""

    num_classes: int
    total: int = 0
    correct: int = 0
    tp: list[int] = field(default_factory=list)
    actual: list[int] = field(default_factory=list)

    def __post_init__(self):
        self.tp = self.tp or [0] * self.num_classes
        self.actual = self.actual or [0] * self.num_classes

    def add(self, predicted, labels) -> None:
        correct, tp, actual = _counts(predicted, labels, self.num_classes)
        self.total += len(labels)
        self.correct += correct
        self.tp = [a + b for a, b in zip(self.tp, tp)]
        self.actual = [a + b for a, b in zip(self.actual, actual)]

    def merge(self, other: "ClassificationTally") -> None:
        self.total += other.total
        self.correct += other.correct
        self.tp = [a + b for a, b in zip(self.tp, other.tp)]
        self.actual = [a + b for a, b in zip(self.actual, other.actual)]

    @property
    def accuracy(self) -> float | None:
        return float(Fraction(self.correct, self.total)) if self.total else None

    def recall(self, cls: int) -> float | None:
        return float(Fraction(self.tp[cls], self.actual[cls])) if self.actual[cls] else None

    def per_class_recall(self) -> list[float | None]:
        return [self.recall(c) for c in range(self.num_classes)]

    def macro_recall(self) -> float | None:
        defined = [r for r in self.per_class_recall() if r is not None]
        return sum(defined) / len(defined) if defined else None


# Because every pass covers the same labels, the mean of per-pass accuracy
# (or recall) equals the pooled ratio of the summed counts.


# --- comparison ------------------------------------------------------------


def spearman(x, y) -> float | None:
    """Spearman rank correlation with average ranks for ties.

    Identical rank vectors give exactly 1.0 (even when constant); otherwise
    a constant vector leaves the correlation undefined (None).
    """
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ComparisonError("rank agreement needs two equal-length vectors")
    if x.size == 0:
        return None
    rx, ry = rankdata(x), rankdata(y)
    if np.array_equal(rx, ry):
        return 1.0
    dx, dy = rx - rx.mean(), ry - ry.mean()
    denom = math.sqrt(float((dx * dx).sum() * (dy * dy).sum()))
    if denom == 0:
        return None
    return float((dx * dy).sum() / denom)


def _pp(before, after):
    if before is None or after is None:
        return None
    return (before - after) * 100.0


@dataclass
class ComparisonReport:
    bitflips: list[dict] = field(default_factory=list)
    drops: list[dict] = field(default_factory=list)
    agreements: list[dict] = field(default_factory=list)
    histograms: list[dict] = field(default_factory=list)

    def to_dict(self):
        return {
            "format": "appraiser-comparison",
            "version": 1,
            "bitflips": self.bitflips,
            "drops": self.drops,
            "agreements": self.agreements,
            "histograms": self.histograms,
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("format") != "appraiser-comparison":
            raise ComparisonError("not a comparison report")
        return cls(d["bitflips"], d["drops"], d["agreements"], d.get("histograms", []))

    def extend(self, other: "ComparisonReport") -> None:
        self.bitflips += other.bitflips
        self.drops += other.drops
        self.agreements += other.agreements
        self.histograms += other.histograms

    def rank_agreement(self, affected=None, fault_model=None):
        for a in self.agreements:
            if (affected is None or a["affected_layer"] == affected) and (
                fault_model is None or a["fault_model"] == fault_model
            ):
                return a["spearman"]
        return None


def compare(fi, apx, golden_accuracy=None, golden_recall=None) -> ComparisonReport:
    """Side-by-side FI vs APPRAISER rows for one affected layer.

    ``fi`` and ``apx`` are campaign/appraisal results (objects or their
    dicts). Golden metrics default to the ones recorded in ``fi``.
    """
    fi = fi if isinstance(fi, dict) else fi.to_dict()
    apx = apx if isinstance(apx, dict) else apx.to_dict()
    affected = fi["layer"]
    if apx["layer"] != affected:
        raise ConfigError(f"FI targets {affected!r} but APPRAISER targets {apx['layer']!r}")
    if fi["dataset"] != apx["dataset"] or fi["model"] != apx["model"]:
        raise ConfigError("FI and APPRAISER results come from different models or datasets")
    if golden_accuracy is None:
        golden_accuracy = fi["golden"]["accuracy"]
    if golden_recall is None:
        golden_recall = fi["golden"]["recall"]
    fault_model = fi["fault_model"]
    fi_method = "FI"
    apx_method = f"APPRAISER:{apx['multiplier']['name']}"
    names = fi["layers"]
    measured = names[names.index(affected):]
    report = ComparisonReport()
    for method, res in ((fi_method, fi), (apx_method, apx)):
        for m in measured:
            report.bitflips.append(
                {
                    "affected_layer": affected,
                    "measured_layer": m,
                    "method": method,
                    "fault_model": fault_model,
                    "bitflip_pct": res["bitflip_pct"][m],
                }
            )
            stats = res["normalized_error"][m]
            report.histograms.append(
                {
                    "affected_layer": affected,
                    "measured_layer": m,
                    "method": method,
                    "fault_model": fault_model,
                    "divisor": stats["divisor"],
                    "bin_edges": stats["bin_edges"],
                    "counts": stats["counts"],
                }
            )
        report.drops.append(
            {
                "affected_layer": affected,
                "method": method,
                "fault_model": fault_model,
                "accuracy_drop_pp": _pp(golden_accuracy, res["accuracy"]),
                "recall_drop_pp": _pp(golden_recall, res["recall"]),
                "macro_recall_drop_pp": _pp(fi["golden"]["macro_recall"], res["macro_recall"]),
            }
        )
    report.agreements.append(
        {
            "affected_layer": affected,
            "fault_model": fault_model,
            "methods": [fi_method, apx_method],
            "spearman": spearman(
                [fi["bitflip_pct"][m] for m in measured], [apx["bitflip_pct"][m] for m in measured]
            ),
        }
    )
    return report


# --- cost model ------------------------------------------------------------


@dataclass(frozen=True)
class CostModel:
    images: int
    repetitions: int
    t_fi_ms: float
    t_apx_ms: float

    @property
    def fi_total_ms(self) -> float:
        return self.images * self.repetitions * self.t_fi_ms

    @property
    def apx_total_ms(self) -> float:
        return self.images * self.t_apx_ms

    @property
    def speedup(self) -> float:
        return self.fi_total_ms / self.apx_total_ms

    def to_dict(self):
        return {
            "images": self.images,
            "repetitions": self.repetitions,
            "t_fi_ms": self.t_fi_ms,
            "t_apx_ms": self.t_apx_ms,
            "fi_total_ms": self.fi_total_ms,
            "apx_total_ms": self.apx_total_ms,
            "speedup": self.speedup,
        }


def estimate_cost(images: int, repetitions: int, t_fi_ms: float, t_apx_ms: float) -> CostModel:
    if images <= 0 or repetitions <= 0 or t_fi_ms <= 0 or t_apx_ms <= 0:
        raise ConfigError("cost model inputs must be positive")
    return CostModel(int(images), int(repetitions), float(t_fi_ms), float(t_apx_ms))


# --- export ----------------------------------------------------------------


def dumps_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def _csv_value(v):
    return "" if v is None else repr(v)


def report_rows(report: ComparisonReport):
    """Flatten a comparison into ``CSV_COLUMNS`` rows (histograms excluded)."""
    for r in report.bitflips:
        yield ("bitflip_pct", r["affected_layer"], r["measured_layer"], r["method"], r["fault_model"], r["bitflip_pct"])
    for r in report.drops:
        for kind in ("accuracy_drop_pp", "recall_drop_pp", "macro_recall_drop_pp"):
            yield (kind, r["affected_layer"], "", r["method"], r["fault_model"], r[kind])
    for a in report.agreements:
        yield ("rank_agreement", a["affected_layer"], "", "|".join(a["methods"]), a["fault_model"], a["spearman"])


def export_report(report: ComparisonReport, fmt: str, path) -> Path:
    path = Path(path)
    if fmt == "json":
        text = dumps_json(report.to_dict())
    elif fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for row in report_rows(report):
            writer.writerow([_csv_value(v) if i == 5 else v for i, v in enumerate(row)])
        text = buf.getvalue()
    else:
        raise ConfigError(f"unknown export format {fmt!r}")
    try:
        path.write_text(text)
    except OSError as exc:
        raise AppraiserError(f"cannot write {path}: {exc}") from exc
    return path


def load_report(path) -> ComparisonReport:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise AppraiserError(f"cannot read {path}: {exc}") from exc
    if path.suffix == ".csv":
        return _report_from_csv(text)
    return ComparisonReport.from_dict(json.loads(text))


def _parse_value(s):
    if s == "":
        return None
    return float(s)


def _report_from_csv(text: str) -> ComparisonReport:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or tuple(rows[0]) != CSV_COLUMNS:
        raise ComparisonError("CSV header does not match the comparison layout")
    report = ComparisonReport()
    drops: dict[tuple, dict] = {}
    for kind, affected, measured, method, fault_model, value in rows[1:]:
        value = _parse_value(value)
        if kind == "bitflip_pct":
            report.bitflips.append(
                {"affected_layer": affected, "measured_layer": measured, "method": method,
                 "fault_model": fault_model, "bitflip_pct": value}
            )
        elif kind == "rank_agreement":
            report.agreements.append(
                {"affected_layer": affected, "fault_model": fault_model,
                 "methods": method.split("|"), "spearman": value}
            )
        else:
            key = (affected, method, fault_model)
            if key not in drops:
                drops[key] = {"affected_layer": affected, "method": method, "fault_model": fault_model}
                report.drops.append(drops[key])
            drops[key][kind] = value
    return report
