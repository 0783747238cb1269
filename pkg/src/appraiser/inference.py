"""Bit-exact int8 forward inference with a pluggable multiplier per layer.

Tensors are HWC. Convolutions are stride 1 without padding, weights are
``[KH, KW, Cin, Cout]`` and MAC terms are ordered kernel row, kernel column,
then input channel. FC weights are ``[In, Out]`` over the row-major
flattened input. Accumulation is 32-bit two's complement; the result is
requantized with a saturating arithmetic right shift, then ReLU if
configured.

Everything runs through ``forward_batch``, which works on a stack of images
and optionally on a stack of per-image weights for one layer (used by fault
campaigns, where every image carries its own corrupted weight copy).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .errors import ConfigError, ShapeError
from .model_io import CONV, FC, POOL, Dataset, LayerSpec, NetworkModel
from .multipliers import EXACT, MultiplierModel
from .quant import QuantTensor, check_address, flip_bits, truncate_requantize

# float64 matmul is exact while every partial sum stays below 2**53
_EXACT_FLOAT_TERMS = 2**53 // 16384


@dataclass(frozen=True)
class MultiplierBinding:
    """Per-layer multiplier assignment; unlisted layers use the exact unit."""

    multipliers: Mapping[str, MultiplierModel] = field(default_factory=dict)
    fractions: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "multipliers", dict(self.multipliers))
        object.__setattr__(self, "fractions", dict(self.fractions))
        for name, f in self.fractions.items():
            if not 0.0 <= f <= 1.0:
                raise ConfigError(f"substitution fraction for {name} must be in [0, 1], got {f}")

    def multiplier(self, layer: str) -> MultiplierModel:
        return self.multipliers.get(layer, EXACT)

    def fraction(self, layer: str) -> float:
        return self.fractions.get(layer, 1.0)

    def check(self, model: NetworkModel) -> None:
        for name in set(self.multipliers) | set(self.fractions):
            if name not in model.names:
                raise ConfigError(f"binding references unknown layer {name!r}")
            if not model.layer(name).has_weights:
                raise ConfigError(f"layer {name!r} has no multipliers to bind")

    @property
    def is_exact(self) -> bool:
        return all(
            m.is_exact or self.fraction(name) == 0.0 for name, m in self.multipliers.items()
        )


ALL_EXACT = MultiplierBinding()


@dataclass(frozen=True)
class LayerTrace:
    names: tuple[str, ...]
    outputs: tuple[QuantTensor, ...]
    predicted: int

    @property
    def logits(self) -> QuantTensor:
        return self.outputs[-1]

    def output(self, name: str) -> QuantTensor:
        return self.outputs[self.names.index(name)]


def approx_terms(fraction: float, k: int) -> int:
    """Number of leading MAC terms (of ``k``) routed to the approximate unit."""
    return min(k, math.ceil(round(fraction * k, 9)))


def _mac(x: np.ndarray, w: np.ndarray, mult: MultiplierModel, fraction: float) -> np.ndarray:
    """Sum of products over the term axis.

    ``x`` is (B, P, K) activations, ``w`` is (K, O) or per-sample (B, K, O)
    weights. Returns (B, P, O) int64 accumulators.
    """
    k = x.shape[-1]
    if k > _EXACT_FLOAT_TERMS:
        raise ShapeError(f"MAC with {k} terms exceeds exact accumulation range")
    m = 0 if mult.is_exact else approx_terms(fraction, k)
    acc = np.zeros(x.shape[:2] + (w.shape[-1],), dtype=np.int64)
    if m < k:
        xe = x[..., m:].astype(np.float64)
        we = w[..., m:, :].astype(np.float64)
        acc += np.rint(np.matmul(xe, we)).astype(np.int64)
    if m:
        xa = x[..., :m, None]
        wa = w[..., :m, :]
        if wa.ndim == 3:
            wa = wa[:, None]
        acc += mult.products(wa, xa).sum(axis=-2, dtype=np.int64)
    return acc


def _finish(acc: np.ndarray, layer: LayerSpec) -> np.ndarray:
    out = truncate_requantize(acc, layer.requant_shift)
    if layer.activation == "relu":
        out = np.maximum(out, 0).astype(np.int8)
    return out


def _patches(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """(B, H, W, C) -> (B, OH*OW, KH*KW*C) with terms in (kh, kw, c) order."""
    b, h, w, c = x.shape
    oh, ow = h - kh + 1, w - kw + 1
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(1, 2))
    # win: (B, OH, OW, C, KH, KW)
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(b, oh * ow, kh * kw * c)


def conv_batch(x, weights, layer: LayerSpec, mult=EXACT, fraction=1.0) -> np.ndarray:
    kh, kw, cin, cout = layer.weights.shape
    if x.ndim != 4 or x.shape[3] != cin or x.shape[1] < kh or x.shape[2] < kw:
        raise ShapeError(f"{layer.name}: input {x.shape[1:]} incompatible with weights {layer.weights.shape}")
    b, h, w, _ = x.shape
    oh, ow = h - kh + 1, w - kw + 1
    wmat = weights.reshape(weights.shape[:-4] + (kh * kw * cin, cout))
    acc = _mac(_patches(x, kh, kw), wmat, mult, fraction)
    return _finish(acc, layer).reshape(b, oh, ow, cout)


def pool_batch(x, layer: LayerSpec) -> np.ndarray:
    b, h, w, c = x.shape
    p = layer.pool
    if h % p or w % p:
        raise ShapeError(f"{layer.name}: spatial dims {h}x{w} not divisible by pool {p}")
    return x.reshape(b, h // p, p, w // p, p, c).max(axis=(2, 4))


def fc_batch(x, weights, layer: LayerSpec, mult=EXACT, fraction=1.0) -> np.ndarray:
    n_in, _ = layer.weights.shape
    flat = x.reshape(x.shape[0], -1)
    if flat.shape[1] != n_in:
        raise ShapeError(f"{layer.name}: expected {n_in} inputs, got {flat.shape[1]}")
    acc = _mac(flat[:, None, :], weights, mult, fraction)[:, 0, :]
    return _finish(acc, layer)


def forward_batch(
    model: NetworkModel,
    images: np.ndarray,
    binding: MultiplierBinding = ALL_EXACT,
    weight_override: tuple[str, np.ndarray] | None = None,
) -> list[np.ndarray]:
    """Run a (B, H, W, C) stack through the network; returns per-layer outputs.

    ``weight_override`` replaces one layer's weights with a per-sample stack
    of shape (B, *weight_shape).
    """
    x = np.asarray(images, dtype=np.int8)
    outputs = []
    for layer in model.layers:
        if layer.kind == POOL:
            x = pool_batch(x, layer)
        else:
            w = layer.weights.array()
            if weight_override is not None and weight_override[0] == layer.name:
                w = weight_override[1]
            mult, frac = binding.multiplier(layer.name), binding.fraction(layer.name)
            if layer.kind == CONV:
                x = conv_batch(x, w, layer, mult, frac)
            else:
                x = fc_batch(x, w, layer, mult, frac)
        outputs.append(x)
    return outputs


def predict(logits: np.ndarray) -> np.ndarray:
    """Argmax over the last axis; ties go to the lowest class index."""
    return np.argmax(logits, axis=-1)


# --- single-tensor API -----------------------------------------------------


def _check_input(x: QuantTensor, layer: LayerSpec):
    try:
        layer.output_shape(x.shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None


def conv2d_forward(x: QuantTensor, layer: LayerSpec, mult: MultiplierModel = EXACT, fraction: float = 1.0) -> QuantTensor:
    if len(x.shape) != 3:
        raise ShapeError(f"{layer.name}: conv input must be HWC, got {x.shape}")
    _check_input(x, layer)
    out = conv_batch(x.array()[None], layer.weights.array(), layer, mult, fraction)[0]
    return QuantTensor.from_array(out)


def maxpool_forward(x: QuantTensor, layer: LayerSpec) -> QuantTensor:
    if len(x.shape) != 3:
        raise ShapeError(f"{layer.name}: pool input must be HWC, got {x.shape}")
    return QuantTensor.from_array(pool_batch(x.array()[None], layer)[0])


def fc_forward(x: QuantTensor, layer: LayerSpec, mult: MultiplierModel = EXACT, fraction: float = 1.0) -> QuantTensor:
    return QuantTensor.from_array(fc_batch(x.array()[None], layer.weights.array(), layer, mult, fraction)[0])


def apply_fault(model: NetworkModel, fault) -> NetworkModel:
    """Return a model whose faulted layer carries the flipped weights."""
    layer = model.layer(fault.layer)
    if not layer.has_weights:
        raise ConfigError(f"layer {fault.layer!r} has no weights to fault")
    for addr in fault.bits:
        check_address(layer.weights, addr)
    faulty = LayerSpec(
        name=layer.name,
        kind=layer.kind,
        weights=flip_bits(layer.weights, fault.bits),
        requant_shift=layer.requant_shift,
        activation=layer.activation,
        stride=layer.stride,
        pool=layer.pool,
    )
    layers = tuple(faulty if l.name == layer.name else l for l in model.layers)
    return NetworkModel(model.input_shape, layers)


def run_inference(
    model: NetworkModel,
    image: QuantTensor,
    binding: MultiplierBinding = ALL_EXACT,
    fault=None,
) -> LayerTrace:
    """One forward pass, optionally with a stored-weight fault active.

    The fault corrupts a private copy of the layer's weights for the whole
    pass; the model itself is never modified.
    """
    binding.check(model)
    if image.shape != model.input_shape:
        raise ShapeError(f"image shape {image.shape} != model input {model.input_shape}")
    active = apply_fault(model, fault) if fault is not None else model
    outs = forward_batch(active, image.array()[None], binding)
    return LayerTrace(
        names=tuple(model.names),
        outputs=tuple(QuantTensor.from_array(o[0]) for o in outs),
        predicted=int(predict(outs[-1][0])),
    )


# --- golden runs -----------------------------------------------------------


@dataclass(frozen=True)
class GoldenRun:
    """Fault-free, all-exact outputs for every image, stacked per layer."""

    names: tuple[str, ...]
    outputs: tuple[np.ndarray, ...]
    predicted: np.ndarray

    def traces(self) -> list[LayerTrace]:
        return [
            LayerTrace(
                self.names,
                tuple(QuantTensor.from_array(o[i]) for o in self.outputs),
                int(self.predicted[i]),
            )
            for i in range(len(self.predicted))
        ]


_GOLDEN_CACHE: dict[tuple[str, str], GoldenRun] = {}


def golden_batch(model: NetworkModel, data: Dataset) -> GoldenRun:
    key = (model.fingerprint(), data.fingerprint())
    hit = _GOLDEN_CACHE.get(key)
    if hit is not None:
        return hit
    outs = forward_batch(model, data.stack())
    for o in outs:
        o.flags.writeable = False
    run = GoldenRun(tuple(model.names), tuple(outs), predict(outs[-1]))
    _GOLDEN_CACHE[key] = run
    return run


def golden_run(model: NetworkModel, data: Dataset) -> list[LayerTrace]:
    """All-exact, fault-free traces for every image (cached per model/dataset)."""
    return golden_batch(model, data).traces()


def clear_golden_cache() -> None:
    _GOLDEN_CACHE.clear()
