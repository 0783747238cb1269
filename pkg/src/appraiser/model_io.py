"""Network/dataset types and their on-disk format.

A model directory holds ``model.json`` (the manifest) and one raw int8 file
per weight tensor. A dataset directory holds ``dataset.json`` and a raw
``images.bin`` with all images back to back (N x H x W x C, row-major).
Manifests are written with sorted keys so serialization is byte-stable.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import LoadError
from .quant import QuantTensor

FORMAT_VERSION = 1
MODEL_MANIFEST = "model.json"
DATASET_MANIFEST = "dataset.json"

CONV, POOL, FC = "conv2d", "maxpool", "fc"
KINDS = (CONV, POOL, FC)


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str
    weights: QuantTensor | None = None
    requant_shift: int = 0
    activation: str = "none"
    stride: int = 1
    pool: int = 2

    @property
    def has_weights(self) -> bool:
        return self.kind in (CONV, FC)

    def output_shape(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        """Output shape for a given input shape; raises ``LoadError`` on mismatch."""
        if self.kind == CONV:
            kh, kw, cin, cout = self.weights.shape
            h, w, c = in_shape
            if c != cin or h < kh or w < kw:
                raise LoadError(
                    f"conv weights {self.weights.shape} incompatible with input {in_shape}", self.name
                )
            return ((h - kh) // self.stride + 1, (w - kw) // self.stride + 1, cout)
        if self.kind == POOL:
            h, w, c = in_shape
            if h % self.pool or w % self.pool:
                raise LoadError(f"input {in_shape} not divisible by pool {self.pool}", self.name)
            return (h // self.pool, w // self.pool, c)
        n_in, n_out = self.weights.shape
        if int(np.prod(in_shape)) != n_in:
            raise LoadError(f"fc expects {n_in} inputs, got shape {in_shape}", self.name)
        return (n_out,)


@dataclass(frozen=True)
class NetworkModel:
    input_shape: tuple[int, ...]
    layers: tuple[LayerSpec, ...]

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        validate_model(self)

    @property
    def names(self) -> list[str]:
        return [layer.name for layer in self.layers]

    @property
    def num_classes(self) -> int:
        return self.layers[-1].weights.shape[1]

    def layer(self, name: str) -> LayerSpec:
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise KeyError(name)

    def index(self, name: str) -> int:
        return self.names.index(name)

    def output_shapes(self) -> list[tuple[int, ...]]:
        shapes, shape = [], self.input_shape
        for layer in self.layers:
            shape = layer.output_shape(shape)
            shapes.append(shape)
        return shapes

    def weight_checksums(self) -> dict[str, str]:
        return {l.name: l.weights.checksum() for l in self.layers if l.has_weights}

    def fingerprint(self) -> str:
        h = hashlib.sha256(_manifest_bytes(self, {}))
        for layer in self.layers:
            if layer.has_weights:
                h.update(layer.weights.data.tobytes())
        return h.hexdigest()


def validate_model(model: NetworkModel) -> None:
    if not model.layers:
        raise LoadError("model has no layers")
    names = [l.name for l in model.layers]
    if len(set(names)) != len(names):
        raise LoadError(f"duplicate layer names in {names}")
    for layer in model.layers:
        if layer.kind not in KINDS:
            raise LoadError(f"unknown layer kind {layer.kind!r}", layer.name)
        if layer.has_weights and layer.weights is None:
            raise LoadError("missing weights", layer.name)
        if not 0 <= layer.requant_shift <= 31:
            raise LoadError("requant_shift must be in [0, 31]", layer.name)
        if layer.activation not in ("relu", "none"):
            raise LoadError(f"unknown activation {layer.activation!r}", layer.name)
        if layer.kind == CONV and len(layer.weights.shape) != 4:
            raise LoadError("conv weights must be [KH, KW, Cin, Cout]", layer.name)
        if layer.kind == FC and len(layer.weights.shape) != 2:
            raise LoadError("fc weights must be [In, Out]", layer.name)
    if model.layers[-1].kind != FC:
        raise LoadError("the final layer must be fully connected (class logits)")
    if any(l.kind == FC for l in model.layers[:-1]):
        raise LoadError("only the final layer may be fully connected")
    model.output_shapes()


@dataclass(frozen=True)
class Dataset:
    images: tuple[QuantTensor, ...]
    labels: tuple[int, ...]
    positive_class: int = 1
    num_classes: int = 2
    _stack: np.ndarray | None = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "images", tuple(self.images))
        object.__setattr__(self, "labels", tuple(int(l) for l in self.labels))
        if len(self.images) != len(self.labels):
            raise LoadError(f"{len(self.images)} images but {len(self.labels)} labels")
        if any(not 0 <= l < self.num_classes for l in self.labels):
            raise LoadError(f"labels must lie in [0, {self.num_classes})")
        if not 0 <= self.positive_class < self.num_classes:
            raise LoadError("positive_class out of range")
        if len({im.shape for im in self.images}) > 1:
            raise LoadError("images have inconsistent shapes")

    def __len__(self):
        return len(self.images)

    @property
    def image_shape(self) -> tuple[int, ...]:
        return self.images[0].shape

    def stack(self) -> np.ndarray:
        """All images as one read-only (N, H, W, C) int8 array."""
        if self._stack is None:
            arr = np.stack([im.array() for im in self.images]) if self.images else np.zeros((0,), np.int8)
            arr.flags.writeable = False
            object.__setattr__(self, "_stack", arr)
        return self._stack

    def fingerprint(self) -> str:
        h = hashlib.sha256(self.stack().tobytes())
        h.update(json.dumps([list(self.labels), self.positive_class, self.num_classes]).encode())
        return h.hexdigest()


# --- serialization ---------------------------------------------------------


def _sha256(raw: bytes) -> str:
    return hashlib.sha256(raw).hexdigest()


def _dumps(obj) -> bytes:
    return (json.dumps(obj, sort_keys=True, indent=2) + "\n").encode()


def _layer_entry(layer: LayerSpec, files: dict[str, str]) -> dict:
    entry = {
        "name": layer.name,
        "kind": layer.kind,
        "activation": layer.activation,
        "requant_shift": layer.requant_shift,
        "bias": None,
    }
    if layer.kind == POOL:
        entry["pool"] = layer.pool
        entry["stride"] = layer.pool
    else:
        entry["stride"] = layer.stride
        w = layer.weights
        entry["weights"] = {
            "file": files.get(layer.name, f"{layer.name}.weights.bin"),
            "shape": list(w.shape),
            "scale_shift": w.scale_shift,
            "sha256": w.checksum(),
        }
    return entry


def _manifest_bytes(model: NetworkModel, files: dict[str, str]) -> bytes:
    doc = {
        "format": "appraiser-model",
        "version": FORMAT_VERSION,
        "input_shape": list(model.input_shape),
        "layers": [_layer_entry(l, files) for l in model.layers],
    }
    return _dumps(doc)


def save_model(model: NetworkModel, path) -> Path:
    """Write ``model`` into directory ``path`` (or beside manifest file ``path``)."""
    path = Path(path)
    if path.suffix == ".json":
        directory, manifest = path.parent, path
    else:
        directory, manifest = path, path / MODEL_MANIFEST
    directory.mkdir(parents=True, exist_ok=True)
    for layer in model.layers:
        if layer.has_weights:
            (directory / f"{layer.name}.weights.bin").write_bytes(layer.weights.data.tobytes())
    manifest.write_bytes(_manifest_bytes(model, {}))
    return manifest


def _require(entry: dict, key: str, where: str):
    if key not in entry:
        raise LoadError(f"manifest entry missing {key!r}", where)
    return entry[key]


def load_model(manifest_path) -> NetworkModel:
    """Load a model from its manifest (or the directory containing it)."""
    path = Path(manifest_path)
    if path.is_dir():
        path = path / MODEL_MANIFEST
    if not path.is_file():
        raise LoadError("manifest not found", str(path))
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise LoadError(f"invalid JSON: {exc}", str(path)) from exc
    if doc.get("format") != "appraiser-model":
        raise LoadError("not an appraiser model manifest", str(path))
    if doc.get("version") != FORMAT_VERSION:
        raise LoadError(f"unsupported manifest version {doc.get('version')!r}", str(path))
    layers = []
    for entry in _require(doc, "layers", str(path)):
        name = _require(entry, "name", str(path))
        kind = _require(entry, "kind", name)
        weights = None
        if kind in (CONV, FC):
            weights = _load_tensor(path.parent, _require(entry, "weights", name), name)
        layers.append(
            LayerSpec(
                name=name,
                kind=kind,
                weights=weights,
                requant_shift=int(entry.get("requant_shift", 0)),
                activation=entry.get("activation", "none"),
                stride=int(entry.get("stride", 1)) if kind != POOL else 1,
                pool=int(entry.get("pool", 2)),
            )
        )
        if kind == CONV and layers[-1].stride != 1:
            raise LoadError("only stride 1 convolutions are supported", name)
    return NetworkModel(tuple(_require(doc, "input_shape", str(path))), tuple(layers))


def _load_tensor(directory: Path, spec: dict, name: str) -> QuantTensor:
    file = directory / _require(spec, "file", name)
    shape = tuple(int(d) for d in _require(spec, "shape", name))
    if not file.is_file():
        raise LoadError(f"weight file {file} not found", name)
    raw = file.read_bytes()
    expected = int(np.prod(shape))
    if len(raw) != expected:
        raise LoadError(f"shape {list(shape)} needs {expected} bytes, file has {len(raw)}", name)
    checksum = spec.get("sha256")
    if checksum is not None and checksum != _sha256(raw):
        raise LoadError("checksum mismatch", name)
    return QuantTensor(shape, np.frombuffer(raw, dtype=np.int8), int(spec.get("scale_shift", 0)))


def save_dataset(data: Dataset, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    raw = data.stack().tobytes()
    (directory / "images.bin").write_bytes(raw)
    doc = {
        "format": "appraiser-dataset",
        "version": FORMAT_VERSION,
        "image_shape": list(data.image_shape),
        "count": len(data),
        "labels": list(data.labels),
        "positive_class": data.positive_class,
        "num_classes": data.num_classes,
        "images": {"file": "images.bin", "sha256": _sha256(raw)},
    }
    manifest = directory / DATASET_MANIFEST
    manifest.write_bytes(_dumps(doc))
    return manifest


def load_dataset(path) -> Dataset:
    path = Path(path)
    if path.is_dir():
        path = path / DATASET_MANIFEST
    if not path.is_file():
        raise LoadError("dataset manifest not found", str(path))
    doc = json.loads(path.read_text())
    if doc.get("format") != "appraiser-dataset":
        raise LoadError("not an appraiser dataset manifest", str(path))
    shape = tuple(doc["image_shape"])
    count = int(doc["count"])
    file = path.parent / doc["images"]["file"]
    if not file.is_file():
        raise LoadError(f"image file {file} not found", "images")
    raw = file.read_bytes()
    per = int(np.prod(shape))
    if len(raw) != per * count:
        raise LoadError(f"expected {per * count} bytes for {count} images, got {len(raw)}", "images")
    if doc["images"].get("sha256") not in (None, _sha256(raw)):
        raise LoadError("checksum mismatch", "images")
    arr = np.frombuffer(raw, dtype=np.int8).reshape((count,) + shape)
    return Dataset(
        images=tuple(QuantTensor(shape, a) for a in arr),
        labels=tuple(doc["labels"]),
        positive_class=int(doc.get("positive_class", 1)),
        num_classes=int(doc.get("num_classes", 2)),
    )
