"""Sequential VGG-style network: layer specs, weight files, forward pass.

The architecture grammar is deliberately narrow: 3x3 convolutions with
stride 1 and pad 1, 2x2 max pooling with stride 2, rectification, one
flatten, and fully-connected layers.  Convolution is implemented as
cross-correlation (no kernel flip), the convention of every public
pretrained-VGG weight release.

Inner products accumulate in float64 and are stored back as float32, so
activations stay reproducible without doubling memory across a deep net.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .container import read_tensors, write_tensors
from .dataset import ImageTensor

WEIGHT_MAGIC = b"VGGW"

LAYER_KINDS = ("conv", "relu", "maxpool", "fc", "flatten")


class CnnError(Exception):
    pass


class NetworkSpecError(CnnError):
    pass


class ChannelMismatchError(CnnError):
    pass


class OddSpatialDimError(CnnError):
    pass


class DimMismatchError(CnnError):
    pass


class UnknownTapError(CnnError):
    pass


class NotSpatialError(CnnError):
    pass


class ShapeMismatchError(CnnError):
    def __init__(self, layer: str, expected, got):
        super().__init__(f"layer {layer!r}: expected shape {expected}, got {got}")
        self.layer = layer


class MissingLayerError(CnnError):
    def __init__(self, layer: str):
        super().__init__(f"weight file has no tensors for layer {layer!r}")
        self.layer = layer


class UnexpectedTensorError(CnnError):
    def __init__(self, name: str):
        super().__init__(f"weight file has unexpected tensor {name!r}")
        self.name = name


@dataclass(frozen=True)
class LayerSpec:
    """One layer. conv is fixed to 3x3/stride 1/pad 1, maxpool to 2x2/stride 2."""

    name: str
    kind: str
    out_channels: int | None = None  # conv only
    out_features: int | None = None  # fc only

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise NetworkSpecError(f"unknown layer kind {self.kind!r}")
        if self.kind == "conv" and (self.out_channels is None or self.out_channels < 1):
            raise NetworkSpecError(f"conv layer {self.name!r} needs out_channels >= 1")
        if self.kind == "fc" and (self.out_features is None or self.out_features < 1):
            raise NetworkSpecError(f"fc layer {self.name!r} needs out_features >= 1")


@dataclass(frozen=True)
class NetworkSpec:
    layers: tuple
    input_shape: tuple  # (H, W, C)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        names = [l.name for l in self.layers]
        if len(names) != len(set(names)):
            raise NetworkSpecError("layer names must be unique")
        kinds = [l.kind for l in self.layers]
        if "fc" in kinds:
            first_fc = kinds.index("fc")
            if kinds[:first_fc].count("flatten") != 1:
                raise NetworkSpecError("exactly one flatten must precede the first fc")
        if kinds.count("flatten") > 1:
            raise NetworkSpecError("at most one flatten layer is allowed")
        self.shapes()  # validates propagation (even dims at every pool, ...)

    def shapes(self) -> dict:
        """Output shape of every layer, propagated from input_shape."""
        shape = self.input_shape
        out = {}
        for layer in self.layers:
            if layer.kind == "conv":
                if len(shape) != 3:
                    raise NetworkSpecError(f"conv {layer.name!r} needs spatial input")
                shape = (shape[0], shape[1], layer.out_channels)
            elif layer.kind == "relu":
                pass
            elif layer.kind == "maxpool":
                if len(shape) != 3:
                    raise NetworkSpecError(f"maxpool {layer.name!r} needs spatial input")
                if shape[0] % 2 or shape[1] % 2:
                    raise NetworkSpecError(
                        f"maxpool {layer.name!r} needs even dims, got {shape[:2]}"
                    )
                shape = (shape[0] // 2, shape[1] // 2, shape[2])
            elif layer.kind == "flatten":
                if len(shape) != 3:
                    raise NetworkSpecError(f"flatten {layer.name!r} needs spatial input")
                shape = (shape[0] * shape[1] * shape[2],)
            elif layer.kind == "fc":
                if len(shape) != 1:
                    raise NetworkSpecError(f"fc {layer.name!r} needs flat input")
                shape = (layer.out_features,)
            out[layer.name] = shape
        return out

    def layer_index(self, name: str) -> int:
        for i, layer in enumerate(self.layers):
            if layer.name == name:
                return i
        raise UnknownTapError(f"no layer named {name!r}")


def expected_weight_shapes(spec: NetworkSpec) -> dict:
    """Per parameterized layer: ((weight shape), (bias shape))."""
    shapes = {}
    current = spec.input_shape
    for layer in spec.layers:
        if layer.kind == "conv":
            shapes[layer.name] = ((layer.out_channels, current[2], 3, 3), (layer.out_channels,))
        elif layer.kind == "fc":
            shapes[layer.name] = ((layer.out_features, current[0]), (layer.out_features,))
        current = spec.shapes()[layer.name]
    return shapes


def parameter_count(spec: NetworkSpec) -> int:
    total = 0
    for wshape, bshape in expected_weight_shapes(spec).values():
        total += int(np.prod(wshape)) + int(np.prod(bshape))
    return total


@dataclass(frozen=True)
class WeightStore:
    """Per layer name: (kernel-or-weight f32 tensor, bias f32 vector)."""

    tensors: dict

    def weight(self, name: str) -> np.ndarray:
        return self.tensors[name][0]

    def bias(self, name: str) -> np.ndarray:
        return self.tensors[name][1]


def save_weights(path, spec: NetworkSpec, store: WeightStore) -> None:
    """Write the store in spec layer order to the VGGW binary format."""
    entries = []
    for layer in spec.layers:
        if layer.name in store.tensors:
            w, b = store.tensors[layer.name]
            entries.append((f"{layer.name}.weight", w))
            entries.append((f"{layer.name}.bias", b))
    write_tensors(path, WEIGHT_MAGIC, entries)


def load_weights(path, spec: NetworkSpec) -> WeightStore:
    """Strictly load weights for ``spec``; extra or missing tensors are errors."""
    expected = expected_weight_shapes(spec)
    loaded: dict = {}
    for name, arr in read_tensors(path, WEIGHT_MAGIC):
        layer, _, part = name.rpartition(".")
        if part not in ("weight", "bias") or layer not in expected:
            raise UnexpectedTensorError(name)
        if name in loaded:
            raise UnexpectedTensorError(f"{name} (duplicate)")
        want = expected[layer][0 if part == "weight" else 1]
        if arr.shape != want:
            raise ShapeMismatchError(layer, want, arr.shape)
        loaded[name] = arr
    tensors = {}
    for layer in expected:
        wkey, bkey = f"{layer}.weight", f"{layer}.bias"
        if wkey not in loaded or bkey not in loaded:
            raise MissingLayerError(layer)
        tensors[layer] = (loaded[wkey], loaded[bkey])
    return WeightStore(tensors)


def conv2d(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """3x3 cross-correlation with stride 1 and zero pad 1.

    x is (H, W, C_in), kernel is (C_out, C_in, 3, 3), bias is (C_out,).
    Output is (H, W, C_out) float32; accumulation runs in float64 as a
    direct sum over the nine kernel taps.
    """
    x = np.asarray(x)
    kernel = np.asarray(kernel)
    bias = np.asarray(bias)
    if x.ndim != 3 or kernel.ndim != 4 or kernel.shape[2:] != (3, 3):
        raise DimMismatchError(
            f"conv2d needs (H,W,C) input and (O,C,3,3) kernel, got {x.shape} / {kernel.shape}"
        )
    if x.shape[2] != kernel.shape[1]:
        raise ChannelMismatchError(
            f"input has {x.shape[2]} channels, kernel expects {kernel.shape[1]}"
        )
    if bias.shape != (kernel.shape[0],):
        raise DimMismatchError(f"bias shape {bias.shape} != ({kernel.shape[0]},)")
    h, w, _ = x.shape
    padded = np.zeros((h + 2, w + 2, x.shape[2]), dtype=np.float64)
    padded[1:-1, 1:-1, :] = x
    k64 = kernel.astype(np.float64)
    out = np.broadcast_to(bias.astype(np.float64), (h, w, kernel.shape[0])).copy()
    for dy in range(3):
        for dx in range(3):
            out += padded[dy : dy + h, dx : dx + w, :] @ k64[:, :, dy, dx].T
    return out.astype(np.float32)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def maxpool2d(x: np.ndarray) -> np.ndarray:
    """Disjoint 2x2 window max with stride 2; both spatial dims must be even."""
    x = np.asarray(x)
    if x.ndim != 3:
        raise DimMismatchError(f"maxpool2d needs (H,W,C) input, got shape {x.shape}")
    h, w, c = x.shape
    if h % 2 or w % 2:
        raise OddSpatialDimError(f"maxpool2d needs even dims, got {h}x{w}")
    return x.reshape(h // 2, 2, w // 2, 2, c).max(axis=(1, 3))


def fully_connected(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """y = Wx + b with float64 accumulation, stored back as float32."""
    x = np.asarray(x)
    weight = np.asarray(weight)
    bias = np.asarray(bias)
    if x.ndim != 1 or weight.ndim != 2 or x.shape[0] != weight.shape[1]:
        raise DimMismatchError(
            f"fc needs x (D_in,) and W (D_out, D_in); got {x.shape} / {weight.shape}"
        )
    if bias.shape != (weight.shape[0],):
        raise DimMismatchError(f"bias shape {bias.shape} != ({weight.shape[0]},)")
    y = weight.astype(np.float64) @ x.astype(np.float64) + bias.astype(np.float64)
    return y.astype(np.float32)


@dataclass(frozen=True)
class Activation:
    """A tapped layer output: (H, W, C) for spatial layers, (D,) for fc."""

    layer_name: str
    data: np.ndarray


@dataclass(frozen=True)
class FeatureVector:
    values: np.ndarray
    source_layer: str
    subject_id: str | None = None

    @property
    def dim(self) -> int:
        return int(self.values.shape[0])


def spatial_average(a: Activation) -> FeatureVector:
    """Collapse each feature map to its mean: (H, W, C) -> dim-C vector.

    Flat (D,) activations pass through unchanged as dim-D vectors.
    """
    # A fixed memory layout pins the reduction order, so permuting the
    # channels permutes the result bitwise.
    data = np.ascontiguousarray(a.data, dtype=np.float64)
    if data.ndim == 1:
        values = data
    elif data.ndim == 3:
        values = data.mean(axis=(0, 1))
    else:
        raise NotSpatialError(f"activation rank {data.ndim} is neither spatial nor flat")
    return FeatureVector(values=values, source_layer=a.layer_name)


def forward(
    spec: NetworkSpec,
    weights: WeightStore,
    image: ImageTensor,
    taps,
    pre_relu: bool = False,
) -> dict:
    """Run the network and return {tap name: Activation}.

    A tap naming a conv layer returns the activation after the relu that
    immediately follows it (the rectified filter outputs), unless
    ``pre_relu`` is set.  Taps on any other layer return that layer's own
    output.  Computation stops after the deepest layer any tap needs.
    """
    shape = (image.height, image.width, image.channels)
    if shape != spec.input_shape:
        raise ShapeMismatchError("<input>", spec.input_shape, shape)
    taps = set(taps)
    record_at: dict = {}
    for tap in taps:
        idx = spec.layer_index(tap)
        layer = spec.layers[idx]
        if (
            layer.kind == "conv"
            and not pre_relu
            and idx + 1 < len(spec.layers)
            and spec.layers[idx + 1].kind == "relu"
        ):
            idx += 1
        record_at.setdefault(idx, []).append(tap)
    if not record_at:
        return {}
    stop = max(record_at)

    out: dict = {}
    current = image.data
    for i, layer in enumerate(spec.layers[: stop + 1]):
        if layer.kind == "conv":
            current = conv2d(current, weights.weight(layer.name), weights.bias(layer.name))
        elif layer.kind == "relu":
            current = relu(current)
        elif layer.kind == "maxpool":
            current = maxpool2d(current)
        elif layer.kind == "flatten":
            current = np.ascontiguousarray(current).reshape(-1)
        elif layer.kind == "fc":
            current = fully_connected(
                current, weights.weight(layer.name), weights.bias(layer.name)
            )
        for tap in record_at.get(i, ()):
            snapshot = current.copy()
            snapshot.setflags(write=False)
            out[tap] = Activation(layer_name=tap, data=snapshot)
    return out


def vgg16() -> NetworkSpec:
    """The canonical 16-layer spec: 13 convs in 5 blocks, then fc6/fc7/fc8.

    Layer numbering used by the layer sweep counts conv/fc layers in
    order, so conv1_1 is layer 1, conv4_3 is layer 10, and fc8 is 16.
    """
    blocks = ((1, 2, 64), (2, 2, 128), (3, 3, 256), (4, 3, 512), (5, 3, 512))
    layers = []
    for block, n_convs, channels in blocks:
        for k in range(1, n_convs + 1):
            layers.append(LayerSpec(f"conv{block}_{k}", "conv", out_channels=channels))
            layers.append(LayerSpec(f"relu{block}_{k}", "relu"))
        layers.append(LayerSpec(f"pool{block}", "maxpool"))
    layers.append(LayerSpec("flatten", "flatten"))
    layers.append(LayerSpec("fc6", "fc", out_features=4096))
    layers.append(LayerSpec("relu6", "relu"))
    layers.append(LayerSpec("fc7", "fc", out_features=4096))
    layers.append(LayerSpec("relu7", "relu"))
    layers.append(LayerSpec("fc8", "fc", out_features=1000))
    return NetworkSpec(layers=tuple(layers), input_shape=(224, 224, 3))


def network_spec_to_json(spec: NetworkSpec) -> dict:
    layers = []
    for layer in spec.layers:
        entry: dict = {"name": layer.name, "kind": layer.kind}
        if layer.out_channels is not None:
            entry["out_channels"] = layer.out_channels
        if layer.out_features is not None:
            entry["out_features"] = layer.out_features
        layers.append(entry)
    return {"input_shape": list(spec.input_shape), "layers": layers}


def network_spec_from_json(doc: dict) -> NetworkSpec:
    known_layer_keys = {"name", "kind", "out_channels", "out_features"}
    if set(doc) != {"input_shape", "layers"}:
        raise NetworkSpecError(
            f"network spec must have exactly input_shape and layers, got {sorted(doc)}"
        )
    layers = []
    for entry in doc["layers"]:
        extra = set(entry) - known_layer_keys
        if extra:
            raise NetworkSpecError(f"unknown layer keys {sorted(extra)}")
        layers.append(
            LayerSpec(
                name=entry["name"],
                kind=entry["kind"],
                out_channels=entry.get("out_channels"),
                out_features=entry.get("out_features"),
            )
        )
    return NetworkSpec(layers=tuple(layers), input_shape=tuple(doc["input_shape"]))


def load_network_spec(name_or_path) -> NetworkSpec:
    """Resolve the bundled "vgg16" name or a network-spec JSON file."""
    if str(name_or_path) == "vgg16":
        return vgg16()
    doc = json.loads(Path(name_or_path).read_text())
    return network_spec_from_json(doc)
