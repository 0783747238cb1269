import bisect
import json

import numpy as np
import pytest

from appraiser.analysis import (
    CSV_COLUMNS,
    ComparisonReport,
    LayerAccumulator,
    accuracy_recall,
    bitflip_percentage,
    compare,
    estimate_cost,
    export_report,
    load_report,
    normalized_error,
    spearman,
)
from appraiser.appraiser import AppraiserConfig, run_appraiser
from appraiser.errors import ComparisonError, ConfigError
from appraiser.faults import SINGLE, CampaignConfig, fault_stream, run_fi_campaign, sample_fault
from appraiser.inference import LayerTrace, apply_fault, golden_run, run_inference
from appraiser.multipliers import EXACT, truncated
from appraiser.quant import QuantTensor
from oracles import popcount_loop


def trace(values, predicted=0):
    t = QuantTensor.from_array(np.asarray(values, np.int8))
    return LayerTrace(("L",), (t,), predicted)


def test_golden_vs_golden_zero(model42, data42):
    gold = golden_run(model42, data42)
    for name in model42.names:
        stats = normalized_error(name, gold, gold)
        assert stats.divisor == 0 and not any(stats.neuron_mean)
        assert sum(stats.counts) == stats.samples * len(stats.neuron_mean)
        assert bitflip_percentage(name, gold, gold) == 0


@pytest.mark.parametrize("delta", [1, -1, 37])
def test_single_perturbed_neuron_maps_to_unit(delta):
    golden = [trace([5, 5, 5]) for _ in range(4)]
    observed = [trace([5, 5, 5]) for _ in range(3)] + [trace([5, 5 - delta, 5])]
    stats = normalized_error("L", observed, golden)
    assert stats.divisor == abs(delta)
    unit_bin = len(stats.counts) - 1 if delta > 0 else 0
    assert stats.counts[unit_bin] == 1
    assert stats.counts[len(stats.counts) // 2] == 11
    assert sum(stats.counts) == 12
    assert stats.neuron_mean == pytest.approx([0, np.sign(delta) / 4, 0])


def test_misaligned_traces_raise():
    with pytest.raises(ComparisonError):
        normalized_error("L", [trace([1])], [trace([1]), trace([2])])
    with pytest.raises(ComparisonError):
        bitflip_percentage("L", [trace([1, 2])], [trace([1])])
    with pytest.raises(ComparisonError):
        bitflip_percentage("missing", [trace([1])], [trace([1])])


def naive_normalized(observed, golden, bins=101):
    """Per-sample Python recomputation of the normalized error statistics."""
    errs = [[int(g) - int(o) for o, g in zip(ob, gb)] for ob, gb in zip(observed, golden)]
    divisor = max((abs(e) for row in errs for e in row), default=0)
    edges = list(np.linspace(-1.0, 1.0, bins + 1))
    counts = [0] * bins
    n_neurons = len(errs[0])
    sums = [0] * n_neurons
    for row in errs:
        for j, e in enumerate(row):
            v = e / divisor if divisor else 0.0
            counts[min(bisect.bisect_right(edges, v) - 1, bins - 1)] += 1
            sums[j] += e
    means = [s / (len(errs) * divisor) if divisor else 0.0 for s in sums]
    return divisor, counts, means


def test_normalized_error_vs_naive(model42, data42):
    cfg = CampaignConfig("Conv1", SINGLE, 2, 9)
    res = run_fi_campaign(model42, data42, cfg, jobs=1)
    # rebuild the same faulty traces per (repetition, image)
    gold = golden_run(model42, data42)
    observed, golden = {n: [] for n in model42.names}, {n: [] for n in model42.names}
    for r in range(2):
        for i, img in enumerate(data42.images):
            t = run_inference(apply_fault(model42, sample_fault(cfg, model42, fault_stream(9, r, i))), img)
            for n in model42.names:
                observed[n].append(t.output(n).data.tolist())
                golden[n].append(gold[i].output(n).data.tolist())
    for n in model42.names:
        divisor, counts, means = naive_normalized(observed[n], golden[n])
        stats = res.normalized_error[n]
        assert stats["divisor"] == divisor
        assert stats["counts"] == counts
        assert stats["neuron_mean"] == pytest.approx(means, abs=1e-12)
        if divisor:
            assert counts[0] + counts[-1] >= 1


def test_bitflip_vs_loop_random_pairs():
    rng = np.random.default_rng(17)
    for _ in range(50):
        n = int(rng.integers(1, 40))
        a = rng.integers(-128, 128, n)
        b = np.where(rng.random(n) < 0.5, a, rng.integers(-128, 128, n))
        m, t = popcount_loop(a.tolist(), b.tolist())
        assert bitflip_percentage("L", [trace(a)], [trace(b)]) == pytest.approx(100 * m / t)


def test_accumulator_merge_equals_single_pass():
    rng = np.random.default_rng(2)
    obs = rng.integers(-128, 128, (10, 6)).astype(np.int8)
    gold = rng.integers(-128, 128, (10, 6)).astype(np.int8)
    whole = LayerAccumulator(6)
    whole.add(obs, gold)
    left, right = LayerAccumulator(6), LayerAccumulator(6)
    left.add(obs[:3], gold[:3])
    right.add(obs[3:], gold[3:])
    left.merge(right)
    assert left.bitflip_pct() == whole.bitflip_pct()
    assert left.normalized("x") == whole.normalized("x")


def test_accuracy_recall_cases():
    traces = [trace([0], p) for p in (1, 0, 1, 1)]
    assert accuracy_recall(traces, [1, 0, 1, 1], 1) == (1.0, 1.0)
    negative = [trace([0], 0) for _ in range(4)]
    assert accuracy_recall(negative, [1, 0, 1, 0], 1) == (0.5, 0.0)
    acc, recall = accuracy_recall(negative, [0, 0, 0, 0], 1)
    assert acc == 1.0 and recall is None
    # hand-counted: TP=2, FN=1, TN=1, FP=1
    mixed = [trace([0], p) for p in (1, 1, 0, 0, 1)]
    assert accuracy_recall(mixed, [1, 1, 1, 0, 0], 1) == (0.6, pytest.approx(2 / 3))
    with pytest.raises(ComparisonError):
        accuracy_recall(mixed, [1], 1)


def test_spearman_cases():
    assert spearman([1, 2, 3], [10, 20, 30]) == 1.0
    assert spearman([1, 2, 3], [3, 2, 1]) == -1.0
    assert spearman([5, 5, 5], [5, 5, 5]) == 1.0
    assert spearman([5, 5, 5], [1, 2, 3]) is None
    assert spearman([1, 2, 3], [1, 3, 2]) == pytest.approx(0.5)


def test_compare_with_exact_apx(model42, data42):
    fi = run_fi_campaign(model42, data42, CampaignConfig("Conv2", SINGLE, 2), jobs=1)
    apx = run_appraiser(model42, data42, AppraiserConfig("Conv2", EXACT))
    report = compare(fi, apx)
    assert [r["measured_layer"] for r in report.bitflips[:3]] == ["Conv2", "Pool2", "FC"]
    for row in report.bitflips:
        if row["method"].startswith("APPRAISER"):
            assert row["bitflip_pct"] == 0 and row["fault_model"] == SINGLE
    apx_drop = next(d for d in report.drops if d["method"] == "APPRAISER:exact")
    assert apx_drop["accuracy_drop_pp"] == 0 and apx_drop["recall_drop_pp"] == 0


def test_compare_identical_and_mismatched(model42, data42):
    fi = run_fi_campaign(model42, data42, CampaignConfig("Conv1", SINGLE, 2), jobs=1).to_dict()
    apx = run_appraiser(model42, data42, AppraiserConfig("Conv1", truncated(4))).to_dict()
    twin = dict(apx, bitflip_pct=fi["bitflip_pct"])
    assert compare(fi, twin).rank_agreement("Conv1") == 1.0
    with pytest.raises(ConfigError):
        compare(fi, dict(apx, layer="Conv2"))
    with pytest.raises(ConfigError):
        compare(fi, dict(apx, dataset="other"))


def test_cost_examples():
    c = estimate_cost(450, 1000, 1.40, 0.29)
    assert c.fi_total_ms == pytest.approx(632_000, rel=0.01)
    assert c.apx_total_ms == pytest.approx(131, rel=0.01)
    assert c.speedup == pytest.approx(4824, rel=0.01)
    assert estimate_cost(10, 1, 2.0, 2.0).speedup == 1.0
    assert estimate_cost(10, 2000, 1.4, 0.29).speedup == pytest.approx(2 * c.speedup)
    with pytest.raises(ConfigError):
        estimate_cost(0, 1, 1, 1)


@pytest.mark.parametrize("fmt", ["json", "csv"])
def test_export_roundtrip(model42, data42, tmp_path, fmt):
    fi = run_fi_campaign(model42, data42, CampaignConfig("Conv1", SINGLE, 2), jobs=1)
    apx = run_appraiser(model42, data42, AppraiserConfig("Conv1", truncated(4)))
    report = compare(fi, apx)
    first = export_report(report, fmt, tmp_path / f"a.{fmt}")
    second = export_report(load_report(first), fmt, tmp_path / f"b.{fmt}")
    assert first.read_bytes() == second.read_bytes()
    if fmt == "json":
        assert json.loads(first.read_text())["format"] == "appraiser-comparison"


def test_export_csv_header_and_empty(tmp_path):
    path = export_report(ComparisonReport(), "csv", tmp_path / "empty.csv")
    assert path.read_text() == ",".join(CSV_COLUMNS) + "\n"
    assert CSV_COLUMNS == ("kind", "affected_layer", "measured_layer", "method", "fault_model", "value")
    assert load_report(path).to_dict() == ComparisonReport().to_dict()
    with pytest.raises(ConfigError):
        export_report(ComparisonReport(), "xml", tmp_path / "x.xml")
