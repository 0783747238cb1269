import numpy as np
import pytest
from scipy.stats import chisquare

from appraiser.errors import AddressError, ConfigError
from appraiser.faults import (
    DOUBLE,
    SINGLE,
    CampaignConfig,
    FaultSpec,
    fault_stream,
    required_sample_size,
    run_fi_campaign,
    sample_fault,
)
from appraiser.inference import apply_fault, golden_run, run_inference
from appraiser.model_io import FC, Dataset, LayerSpec, NetworkModel
from appraiser.quant import BitAddress, QuantTensor, count_bit_mismatches


def test_sample_size_examples():
    assert required_sample_size(10**9, 0.031, 1.96, 0.5) == 1000
    assert required_sample_size(100, 1e-9) == 100
    assert 0 < required_sample_size(1, 0.05) <= 1


def test_sample_size_scaling():
    big = 10**12
    n1 = required_sample_size(big, 0.01, 1.0)
    n2 = required_sample_size(big, 0.01, 2.0)
    assert n2 == pytest.approx(4 * n1, rel=1e-3)
    assert required_sample_size(big, 0.02) == pytest.approx(required_sample_size(big, 0.01) / 4, rel=1e-3)


def test_sample_size_bad_inputs():
    for args in [(0, 0.05), (100, 0), (100, 1.5), (100, 0.05, -1)]:
        with pytest.raises(ConfigError):
            required_sample_size(*args)


def tiny_model(n_weights=1):
    w = QuantTensor.from_array(np.ones((n_weights, 2), np.int8))
    return NetworkModel((n_weights, 1, 1), (LayerSpec("FC", FC, w),))


def test_single_bit_positions_uniform():
    model = tiny_model(1)  # 2 weights, 16 bit positions
    cfg = CampaignConfig("FC", SINGLE)
    draws = 100_000
    counts = np.zeros(16, dtype=int)
    rng = np.random.default_rng(99)
    for _ in range(draws):
        (addr,) = sample_fault(cfg, model, rng).bits
        counts[8 * addr.flat_index + addr.bit_pos] += 1
    per_bit = counts.reshape(2, 8).sum(axis=0)
    assert chisquare(per_bit).pvalue > 0.001
    assert chisquare(counts).pvalue > 0.001


def test_double_bits_distinct(model42):
    cfg = CampaignConfig("Conv1", DOUBLE)
    for r in range(500):
        fault = sample_fault(cfg, model42, fault_stream(3, r, 0))
        assert len(fault.bits) == 2 and fault.bits[0] != fault.bits[1]
        fault.validate(model42)


def test_fault_spec_validation(model42):
    with pytest.raises(ConfigError):
        FaultSpec("Conv1", ())
    with pytest.raises(ConfigError):
        FaultSpec("Conv1", (BitAddress(0, 1),) * 2)
    with pytest.raises(ConfigError):
        FaultSpec("Pool1", (BitAddress(0, 1),)).validate(model42)
    with pytest.raises(AddressError):
        FaultSpec("Conv1", (BitAddress(36, 0),)).validate(model42)


def test_fault_stream_deterministic():
    a = fault_stream(42, 7, 3).integers(1 << 30, size=4)
    b = fault_stream(42, 7, 3).integers(1 << 30, size=4)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, fault_stream(42, 7, 4).integers(1 << 30, size=4))
    assert not np.array_equal(a, fault_stream(43, 7, 3).integers(1 << 30, size=4))


def test_campaign_rejects_bad_inputs(model42, data42):
    with pytest.raises(ConfigError):
        run_fi_campaign(model42, data42, CampaignConfig("Pool1", SINGLE, 2))
    with pytest.raises(ConfigError):
        run_fi_campaign(model42, data42, CampaignConfig("Nope", SINGLE, 2))
    with pytest.raises(ConfigError):
        run_fi_campaign(model42, Dataset((), ()), CampaignConfig("Conv1", SINGLE, 2))
    with pytest.raises(ConfigError):
        CampaignConfig("Conv1", "triple")
    with pytest.raises(ConfigError):
        CampaignConfig("Conv1", SINGLE, 0)


def naive_campaign(model, data, layer, fault_model, reps, seed):
    """Per-inference loop: sample, mutate, infer, compare."""
    cfg = CampaignConfig(layer, fault_model, reps, seed)
    gold = golden_run(model, data)
    correct = 0
    mism = {n: 0 for n in model.names}
    total = {n: 0 for n in model.names}
    for r in range(reps):
        for i, img in enumerate(data.images):
            fault = sample_fault(cfg, model, fault_stream(seed, r, i))
            trace = run_inference(apply_fault(model, fault), img)
            correct += trace.predicted == data.labels[i]
            for n in model.names:
                m, t = count_bit_mismatches(trace.output(n), gold[i].output(n))
                mism[n] += m
                total[n] += t
    return correct / (reps * len(data)), {n: 100.0 * mism[n] / total[n] for n in model.names}


@pytest.mark.parametrize("layer,fault_model", [("Conv1", SINGLE), ("Conv2", DOUBLE)])
def test_campaign_matches_naive_loop(model42, data42, layer, fault_model):
    res = run_fi_campaign(model42, data42, CampaignConfig(layer, fault_model, 3, 5), jobs=1)
    acc, pct = naive_campaign(model42, data42, layer, fault_model, 3, 5)
    assert res.accuracy == pytest.approx(acc, abs=1e-12)
    for n in model42.names:
        assert res.bitflip_pct[n] == pytest.approx(pct[n], abs=1e-9)
    assert res.inference_count == 3 * len(data42)
    if layer == "Conv2":
        assert res.bitflip_pct["Conv1"] == res.bitflip_pct["Pool1"] == 0.0


def test_campaign_deterministic_and_weights_untouched(model42, data42):
    before = model42.weight_checksums()
    cfg = CampaignConfig("Conv2", SINGLE, 5, 11)
    a = run_fi_campaign(model42, data42, cfg, jobs=1)
    b = run_fi_campaign(model42, data42, cfg, jobs=1)
    assert a.to_dict() == b.to_dict()
    assert model42.weight_checksums() == before
    c = run_fi_campaign(model42, data42, CampaignConfig("Conv2", SINGLE, 5, 12), jobs=1)
    assert c.to_dict() != a.to_dict()


def find_masked(model, data, layer, level):
    """Brute force over every weight bit; return the first masked fault.

    ``level="trace"`` needs every layer output unchanged, ``"logits"`` only
    the final layer.
    """
    gold = golden_run(model, data)
    for flat in range(model.layer(layer).weights.size):
        for bit in range(8):
            fault = FaultSpec(layer, (BitAddress(flat, bit),))
            faulty = apply_fault(model, fault)
            for img, g in zip(data.images, gold):
                trace = run_inference(faulty, img)
                if (trace != g) if level == "trace" else (trace.logits != g.logits):
                    break
            else:
                return fault
    return None


@pytest.mark.parametrize("layer,level", [("FC", "trace"), ("Conv2", "logits")])
def test_masked_fault_leaves_accuracy(model42, data42, layer, level):
    masked = find_masked(model42, data42, layer, level)
    assert masked is not None
    res = run_fi_campaign(model42, data42, CampaignConfig(layer, SINGLE, 1), forced_fault=masked)
    assert res.accuracy_drop_pp == 0
    assert res.bitflip_pct["FC"] == 0
    if level == "trace":
        assert all(v == 0 for v in res.bitflip_pct.values())


def test_forced_fault_must_match_layer(model42, data42):
    with pytest.raises(ConfigError):
        run_fi_campaign(
            model42, data42, CampaignConfig("Conv2", SINGLE, 1), forced_fault=FaultSpec("Conv1", (BitAddress(0, 0),))
        )


def test_shared_fault_mode(model42, data42):
    cfg = CampaignConfig("Conv1", SINGLE, 2, 4, per_image_independent=False)
    res = run_fi_campaign(model42, data42, cfg, jobs=1)
    correct = 0
    for r in range(2):
        fault = sample_fault(cfg, model42, fault_stream(4, r, None))
        faulty = apply_fault(model42, fault)
        correct += sum(run_inference(faulty, img).predicted == l for img, l in zip(data42.images, data42.labels))
    assert res.accuracy == pytest.approx(correct / (2 * len(data42)))
    assert res.per_image_independent is False
