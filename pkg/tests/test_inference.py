import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from appraiser.errors import ShapeError
from appraiser.faults import FaultSpec
from appraiser.inference import (
    ALL_EXACT,
    MultiplierBinding,
    approx_terms,
    conv2d_forward,
    fc_forward,
    golden_run,
    maxpool_forward,
    run_inference,
)
from appraiser.model_io import CONV, FC, POOL, LayerSpec, load_model, save_model
from appraiser.multipliers import exact_table, lut, mul, truncated
from appraiser.quant import BitAddress, QuantTensor, flip_bit
from oracles import conv_ref, fc_ref, flatten, pool_ref

# golden accuracy of the seed-42 fixture (62 of 64 images)
FIXTURE42_ACCURACY = 62 / 64


def qt(array):
    return QuantTensor.from_array(np.asarray(array, dtype=np.int8))


def conv_layer(w, shift=0, activation="relu"):
    return LayerSpec("C", CONV, qt(w), requant_shift=shift, activation=activation)


def fc_layer(w, shift=0):
    return LayerSpec("F", FC, qt(w), requant_shift=shift)


def test_conv_identity_kernel():
    for v in (-7, 0, 93):
        out = conv2d_forward(qt([[[v]]]), conv_layer([[[[1]]]]))
        assert out.data.tolist() == [max(v, 0)]


def test_conv_zero_weights():
    rng = np.random.default_rng(0)
    x = qt(rng.integers(-128, 128, (6, 6, 2)))
    out = conv2d_forward(x, conv_layer(np.zeros((3, 3, 2, 3))))
    assert out.shape == (4, 4, 3) and not out.data.any()


def test_conv_seeded_vs_triple_loop():
    rng = np.random.default_rng(11)
    x = rng.integers(-128, 128, (6, 6, 1))
    w = rng.integers(-128, 128, (3, 3, 1, 2))
    out = conv2d_forward(qt(x), conv_layer(w, shift=6))
    assert out.data.tolist() == flatten(conv_ref(x.tolist(), w.tolist(), 6))


@pytest.mark.parametrize("fraction", [0.0, 0.3, 0.5, 1.0])
def test_conv_partial_substitution_vs_loop(fraction):
    rng = np.random.default_rng(3)
    x = rng.integers(-128, 128, (5, 5, 3))
    w = rng.integers(-128, 128, (3, 3, 3, 2))
    m = truncated(3)
    out = conv2d_forward(qt(x), conv_layer(w, shift=7, activation="none"), m, fraction)
    ref = conv_ref(x.tolist(), w.tolist(), 7, "none", lambda a, b: mul(m, a, b), fraction)
    assert out.data.tolist() == flatten(ref)


def test_conv_geometry_error():
    with pytest.raises(ShapeError):
        conv2d_forward(qt(np.zeros((4, 4, 2))), conv_layer(np.zeros((3, 3, 1, 1))))


def test_maxpool_examples():
    layer = LayerSpec("P", POOL, pool=2)
    assert maxpool_forward(qt(np.full((4, 4, 2), 9)), layer) == qt(np.full((2, 2, 2), 9))
    assert maxpool_forward(qt(np.array([1, 2, 3, 4]).reshape(2, 2, 1)), layer).data.tolist() == [4]
    rng = np.random.default_rng(8)
    x = rng.integers(-128, 128, (6, 4, 3))
    assert maxpool_forward(qt(x), layer).data.tolist() == flatten(pool_ref(x.tolist()))
    with pytest.raises(ShapeError):
        maxpool_forward(qt(np.zeros((3, 4, 1))), layer)


def test_fc_examples():
    x = qt(np.arange(-3, 3).reshape(6, 1, 1))
    w = np.zeros((6, 3))
    w[0, 0] = w[2, 1] = w[5, 2] = 1
    assert fc_forward(x, fc_layer(w)).data.tolist() == [-3, -1, 2]
    assert not fc_forward(qt(np.zeros((6, 1, 1))), fc_layer(np.ones((6, 3)))).data.any()
    rng = np.random.default_rng(21)
    xs = rng.integers(-128, 128, 40)
    ws = rng.integers(-128, 128, (40, 4))
    out = fc_forward(qt(xs.reshape(40, 1, 1)), fc_layer(ws, shift=9))
    assert out.data.tolist() == fc_ref(xs.tolist(), ws.tolist(), 9)
    with pytest.raises(ShapeError):
        fc_forward(qt(np.zeros((5, 1, 1))), fc_layer(np.ones((6, 3))))


def test_approx_terms_rule():
    assert approx_terms(0.5, 9) == 5
    assert approx_terms(0.1, 30) == 3
    assert approx_terms(0.0, 9) == 0
    assert approx_terms(1.0, 9) == 9


def test_run_inference_deterministic(model42, data42):
    a = run_inference(model42, data42.images[0])
    b = run_inference(model42, data42.images[0])
    assert a == b
    assert a.names == tuple(model42.names)


def test_run_inference_matches_layer_ops(model42, data42):
    x = data42.images[3]
    trace = run_inference(model42, x)
    for layer, out in zip(model42.layers, trace.outputs):
        if layer.kind == CONV:
            x = conv2d_forward(x, layer)
        elif layer.kind == POOL:
            x = maxpool_forward(x, layer)
        else:
            x = fc_forward(x, layer)
        assert x == out
    logits = trace.logits.data.tolist()
    assert trace.predicted == logits.index(max(logits))


def test_fault_causality(model42, data42):
    golden = run_inference(model42, data42.images[0])
    faulty = run_inference(model42, data42.images[0], fault=FaultSpec("Conv2", (BitAddress(5, 7),)))
    assert faulty.output("Conv1") == golden.output("Conv1")
    assert faulty.output("Pool1") == golden.output("Pool1")
    assert faulty.output("Conv2") != golden.output("Conv2")


def test_fault_equals_mutated_weight_file(model42, data42, tmp_path):
    fault = FaultSpec("Conv1", (BitAddress(4, 6),))
    save_model(model42, tmp_path / "m")
    raw = bytearray((tmp_path / "m" / "Conv1.weights.bin").read_bytes())
    raw[4] ^= 1 << 6
    (tmp_path / "m" / "Conv1.weights.bin").write_bytes(bytes(raw))
    manifest = (tmp_path / "m" / "model.json")
    text = manifest.read_text().replace(model42.layer("Conv1").weights.checksum(), flip_bit(model42.layer("Conv1").weights, fault.bits[0]).checksum())
    manifest.write_text(text)
    mutated = load_model(tmp_path / "m")
    for img in data42.images[:8]:
        assert run_inference(model42, img, fault=fault) == run_inference(mutated, img)
    assert run_inference(model42, data42.images[0], fault=fault) != run_inference(model42, data42.images[0])


def test_exact_lut_changes_nothing(model42, data42):
    binding = MultiplierBinding({"Conv1": lut("exact-lut", exact_table()), "FC": lut("e2", exact_table())})
    for img in data42.images[:10]:
        assert run_inference(model42, img, binding) == run_inference(model42, img)


@given(st.integers(0, 8), st.sampled_from(["Conv1", "Conv2", "FC"]), st.integers(0, 63))
@settings(max_examples=25, deadline=None)
def test_fraction_zero_is_exact(model42, data42, k, layer, i):
    binding = MultiplierBinding({layer: truncated(k)}, {layer: 0.0})
    assert run_inference(model42, data42.images[i], binding) == run_inference(model42, data42.images[i])


def test_golden_run(model42, data42):
    traces = golden_run(model42, data42)
    again = golden_run(model42, data42)
    assert all(a == b for a, b in zip(traces, again))
    predicted = np.array([t.predicted for t in traces])
    accuracy = (predicted == np.array(data42.labels)).mean()
    assert accuracy > 0.9
    assert accuracy == FIXTURE42_ACCURACY
    assert traces[7] == run_inference(model42, data42.images[7], ALL_EXACT)
