"""The three compact CNN architectures and their explicit reverse-mode pass.

Every network is a fixed feed-forward stack described by a ModelSpec; there
is no general autodiff tape. Layer kinds: conv2d, conv3d, maxpool2d,
maxpool3d, relu, flatten, batchnorm, dense. All convolutions are stride-1
valid; pooling is non-overlapping.

Architectures (input -> two logits):

* frame2d:  [1,72,128]  conv(8,5x5)/pool2x2 x3 -> flatten 960 -> bn -> dense 64 -> relu -> dense 2
* seq2d:    [8,72,128]  same stack, the 8 frames enter as input channels
* seq3d:    [1,8,72,128] conv3d(2x5x5) x3 with pools (1,2,2),(1,2,2),(2,2,2)
            -> flatten 1920 -> bn -> dense 64 -> relu -> dense 2

ReLU follows every convolution and the 64-unit dense layer. Spatial chain:
72 -> 68 -> 34 -> 30 -> 15 -> 11 -> 5 and 128 -> 124 -> 62 -> 58 -> 29 -> 25
-> 12, so the 2D nets flatten 16*5*12 = 960 features and the 3D net
16*2*5*12 = 1920 (temporal chain 8 -> 7 -> 7 -> 6 -> 6 -> 5 -> 2).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import BinaryIO

import numpy as np

from . import layers
from .errors import ConfigError, PixelAffectError, ShapeError
from .tensors import FLOAT, Rng, read_tensor, write_tensor

MODEL_2D_FRAME = "2DFrameCNN"
MODEL_2D_SEQ = "2DSeqCNN"
MODEL_3D_SEQ = "3DSeqCNN"

# Ids are part of the checkpoint format.
MODEL_IDS = {MODEL_2D_FRAME: 0, MODEL_2D_SEQ: 1, MODEL_3D_SEQ: 2}
MODEL_ALIASES = {
    "2dframe": MODEL_2D_FRAME, "2dframecnn": MODEL_2D_FRAME,
    "2dseq": MODEL_2D_SEQ, "2dseqcnn": MODEL_2D_SEQ,
    "3dseq": MODEL_3D_SEQ, "3dseqcnn": MODEL_3D_SEQ,
}

CHECKPOINT_MAGIC = b"AFM1"
CHECKPOINT_VERSION = 1


@dataclass
class LayerSpec:
    """One layer of a fixed feed-forward stack.

    Fields besides ``kind`` are kind-specific: ``filters``/``kernel`` for
    convolutions, ``pool`` for pooling, ``units`` for dense layers.
    """

    kind: str
    filters: int = 0
    kernel: tuple[int, ...] = ()
    pool: tuple[int, ...] = ()
    units: int = 0

    def __post_init__(self):
        if any(k < 1 for k in self.kernel) or any(p < 1 for p in self.pool):
            raise ShapeError(f"kernel/pool extents must be >= 1: {self}")


@dataclass
class ModelSpec:
    name: str
    layers: list[LayerSpec]
    input_shape: tuple[int, ...]
    num_classes: int = 2


@dataclass
class ModelParams:
    """Per-layer parameter dicts, aligned with ModelSpec.layers.

    Conv layers hold ``w``/``b``; dense layers ``w``/``b``; batchnorm holds
    trainable ``gamma``/``beta`` plus non-trainable ``running_mean`` and
    ``running_var``. Layers without parameters hold an empty dict.
    """

    layers: list[dict] = field(default_factory=list)

    def copy(self) -> "ModelParams":
        return ModelParams([{k: v.copy() for k, v in d.items()} for d in self.layers])


# Trainable keys per layer kind, in serialization order.
_TRAINABLE = {"conv2d": ("w", "b"), "conv3d": ("w", "b"),
              "batchnorm": ("gamma", "beta"), "dense": ("w", "b")}
_SAVED = dict(_TRAINABLE)
_SAVED["batchnorm"] = ("gamma", "beta", "running_mean", "running_var")


def build_architecture(name: str) -> ModelSpec:
    """ModelSpec for one of the three architectures (aliases accepted)."""
    canonical = MODEL_ALIASES.get(name.lower())
    if canonical is None:
        raise ConfigError(f"unknown model {name!r}; expected one of "
                          f"{sorted(set(MODEL_ALIASES.values()))}")
    if canonical in (MODEL_2D_FRAME, MODEL_2D_SEQ):
        in_channels = 1 if canonical == MODEL_2D_FRAME else 8
        stack = []
        for filters in (8, 12, 16):
            stack.append(LayerSpec("conv2d", filters=filters, kernel=(5, 5)))
            stack.append(LayerSpec("relu"))
            stack.append(LayerSpec("maxpool2d", pool=(2, 2)))
        stack += [
            LayerSpec("flatten"),
            LayerSpec("batchnorm"),
            LayerSpec("dense", units=64),
            LayerSpec("relu"),
            LayerSpec("dense", units=2),
        ]
        return ModelSpec(canonical, stack, (in_channels, 72, 128))
    stack = []
    for filters, pool in ((8, (1, 2, 2)), (12, (1, 2, 2)), (16, (2, 2, 2))):
        stack.append(LayerSpec("conv3d", filters=filters, kernel=(2, 5, 5)))
        stack.append(LayerSpec("relu"))
        stack.append(LayerSpec("maxpool3d", pool=pool))
    stack += [
        LayerSpec("flatten"),
        LayerSpec("batchnorm"),
        LayerSpec("dense", units=64),
        LayerSpec("relu"),
        LayerSpec("dense", units=2),
    ]
    return ModelSpec(MODEL_3D_SEQ, stack, (1, 8, 72, 128))


def infer_shapes(spec: ModelSpec) -> list[tuple[int, ...]]:
    """Per-layer output shapes (sample shapes, no batch axis).

    Raises ShapeError if the stack does not chain.
    """
    shape = tuple(spec.input_shape)
    out = []
    for layer in spec.layers:
        if layer.kind == "conv2d":
            c, h, w = shape
            kh, kw = layer.kernel
            if kh > h or kw > w:
                raise ShapeError(f"conv2d kernel {layer.kernel} exceeds input {shape}")
            shape = (layer.filters, h - kh + 1, w - kw + 1)
        elif layer.kind == "conv3d":
            c, t, h, w = shape
            kt, kh, kw = layer.kernel
            if kt > t or kh > h or kw > w:
                raise ShapeError(f"conv3d kernel {layer.kernel} exceeds input {shape}")
            shape = (layer.filters, t - kt + 1, h - kh + 1, w - kw + 1)
        elif layer.kind == "maxpool2d":
            c, h, w = shape
            ph, pw = layer.pool
            if ph > h or pw > w:
                raise ShapeError(f"pool {layer.pool} exceeds input {shape}")
            shape = (c, h // ph, w // pw)
        elif layer.kind == "maxpool3d":
            c, t, h, w = shape
            pt, ph, pw = layer.pool
            if pt > t or ph > h or pw > w:
                raise ShapeError(f"pool {layer.pool} exceeds input {shape}")
            shape = (c, t // pt, h // ph, w // pw)
        elif layer.kind == "relu":
            pass
        elif layer.kind == "flatten":
            shape = (int(np.prod(shape)),)
        elif layer.kind == "batchnorm":
            if len(shape) != 1:
                raise ShapeError(f"batchnorm needs flattened input, got {shape}")
        elif layer.kind == "dense":
            if len(shape) != 1:
                raise ShapeError(f"dense needs flattened input, got {shape}")
            shape = (layer.units,)
        else:
            raise ConfigError(f"unknown layer kind {layer.kind!r}")
        out.append(shape)
    if out[-1] != (spec.num_classes,):
        raise ShapeError(f"stack ends at {out[-1]}, expected ({spec.num_classes},)")
    return out


def flatten_width(spec: ModelSpec) -> int:
    """Width of the feature vector entering the first dense layer."""
    shapes = infer_shapes(spec)
    for layer, shape in zip(spec.layers, shapes):
        if layer.kind == "flatten":
            return shape[0]
    raise ConfigError("spec has no flatten layer")


def count_parameters(spec: ModelSpec, include_batchnorm: bool = False) -> int:
    """Closed-form trainable parameter count.

    Batch-norm scale/shift pairs are excluded by default, which reproduces
    the published per-architecture figures (69,070 / 70,470 for the 2D nets,
    both matching their rounded counts; the 3D net's closed form is 137,910
    while the published rounding is ~14.5e4, an unexplained ~5% gap that
    persists whether or not batch-norm is included).
    """
    shapes = [tuple(spec.input_shape)] + infer_shapes(spec)
    total = 0
    for layer, in_shape in zip(spec.layers, shapes[:-1]):
        if layer.kind in ("conv2d", "conv3d"):
            c = in_shape[0]
            total += layer.filters * (c * int(np.prod(layer.kernel)) + 1)
        elif layer.kind == "dense":
            total += in_shape[0] * layer.units + layer.units
        elif layer.kind == "batchnorm" and include_batchnorm:
            total += 2 * in_shape[0]
    return total


def init_params(spec: ModelSpec, rng: Rng) -> ModelParams:
    """Glorot-uniform weights (bound sqrt(6/(fan_in+fan_out))), zero biases.

    Batch-norm starts at identity: gamma 1, beta 0, running mean 0, var 1.
    """
    shapes = [tuple(spec.input_shape)] + infer_shapes(spec)
    out = []
    for layer, in_shape in zip(spec.layers, shapes[:-1]):
        if layer.kind in ("conv2d", "conv3d"):
            c = in_shape[0]
            ksz = int(np.prod(layer.kernel))
            fan_in, fan_out = c * ksz, layer.filters * ksz
            bound = float(np.sqrt(6.0 / (fan_in + fan_out)))
            w = rng.uniform((layer.filters, c) + layer.kernel, -bound, bound)
            out.append({"w": w, "b": np.zeros(layer.filters, dtype=FLOAT)})
        elif layer.kind == "dense":
            n = in_shape[0]
            bound = float(np.sqrt(6.0 / (n + layer.units)))
            w = rng.uniform((n, layer.units), -bound, bound)
            out.append({"w": w, "b": np.zeros(layer.units, dtype=FLOAT)})
        elif layer.kind == "batchnorm":
            f = in_shape[0]
            out.append({
                "gamma": np.ones(f, dtype=FLOAT),
                "beta": np.zeros(f, dtype=FLOAT),
                "running_mean": np.zeros(f, dtype=FLOAT),
                "running_var": np.ones(f, dtype=FLOAT),
            })
        else:
            out.append({})
    params = ModelParams(out)
    expected = count_parameters(spec, include_batchnorm=True)
    actual = sum(p.size for d, l in zip(out, spec.layers)
                 for k, p in d.items() if k in _TRAINABLE.get(l.kind, ()))
    if actual != expected:
        raise PixelAffectError(f"parameter count mismatch: {actual} != {expected}")
    return params


@dataclass
class ForwardCache:
    """Saved per-layer state for the backward pass; one entry per layer."""

    inputs: list
    aux: list
    batched: bool


def forward(spec: ModelSpec, params: ModelParams, x: np.ndarray,
            train: bool = False, want_cache: bool = False):
    """Run the stack on ``x`` ([*sample_shape] or [B,*sample_shape]).

    Train mode uses batch statistics in batchnorm and updates the running
    statistics stored in ``params`` in place. Returns logits, or
    (logits, cache) when ``want_cache``.
    """
    if len(params.layers) != len(spec.layers):
        raise PixelAffectError("params do not match spec layer count")
    sample_rank = len(spec.input_shape)
    batched = x.ndim == sample_rank + 1
    if not batched:
        if x.ndim != sample_rank:
            raise ShapeError(f"input rank {x.ndim} does not fit {spec.input_shape}")
        x = x[None]
    if tuple(x.shape[1:]) != tuple(spec.input_shape):
        raise ShapeError(f"input shape {x.shape[1:]} != expected {spec.input_shape}")
    inputs, aux = [], []
    for layer, p in zip(spec.layers, params.layers):
        inputs.append(x if want_cache else None)
        a = None
        if layer.kind == "conv2d":
            sink = [] if want_cache else None
            x = layers.conv2d_forward(x, p["w"], p["b"], ctx_out=sink)
            a = sink[0] if want_cache else None
        elif layer.kind == "conv3d":
            sink = [] if want_cache else None
            x = layers.conv3d_forward(x, p["w"], p["b"], ctx_out=sink)
            a = sink[0] if want_cache else None
        elif layer.kind == "maxpool2d":
            x, a = layers.maxpool2d_forward(x, layer.pool)
        elif layer.kind == "maxpool3d":
            x, a = layers.maxpool3d_forward(x, layer.pool)
        elif layer.kind == "relu":
            x = layers.relu_forward(x)
        elif layer.kind == "flatten":
            x = x.reshape(x.shape[0], -1)
        elif layer.kind == "batchnorm":
            x, a, rm, rv = layers.batchnorm_forward(
                x, p["gamma"], p["beta"], p["running_mean"], p["running_var"], train)
            if train:
                p["running_mean"], p["running_var"] = rm, rv
        elif layer.kind == "dense":
            x = layers.dense_forward(x, p["w"], p["b"])
        aux.append(a if want_cache else None)
    logits = x if batched else x[0]
    if want_cache:
        return logits, ForwardCache(inputs, aux, batched)
    return logits


def backward(spec: ModelSpec, params: ModelParams, cache: ForwardCache,
             dlogits: np.ndarray, stop_at_layer: int | None = None,
             need_dinput: bool = False):
    """Reverse-mode pass from upstream logit gradients.

    Returns (grads, dinput) where grads mirrors ModelParams (empty dicts for
    untrainable layers) and dinput is the gradient at the model input, or at
    the *output* of layer ``stop_at_layer`` when given (layers at and below
    it are skipped, their grads left empty). Unless ``need_dinput`` is set,
    the input gradient of the bottom layer is not computed and dinput is
    None; parameter gradients are always complete.
    """
    if len(cache.inputs) != len(spec.layers):
        raise PixelAffectError("cache does not match spec layer count")
    dy = dlogits if cache.batched else dlogits[None]
    grads = [dict() for _ in spec.layers]
    lower_bound = -1 if stop_at_layer is None else stop_at_layer
    for i in range(len(spec.layers) - 1, lower_bound, -1):
        layer, p, x, a = spec.layers[i], params.layers[i], cache.inputs[i], cache.aux[i]
        if x is None:
            raise PixelAffectError("backward needs a cache from forward(want_cache=True)")
        need_dx = need_dinput or i > lower_bound + 1
        if layer.kind == "conv2d":
            dy, dw, db = layers.conv2d_backward(dy, x, p["w"], ctx=a, need_dx=need_dx)
            grads[i] = {"w": dw, "b": db}
        elif layer.kind == "conv3d":
            dy, dw, db = layers.conv3d_backward(dy, x, p["w"], ctx=a, need_dx=need_dx)
            grads[i] = {"w": dw, "b": db}
        elif layer.kind == "maxpool2d":
            dy = layers.maxpool2d_backward(dy, a, x.shape, layer.pool)
        elif layer.kind == "maxpool3d":
            dy = layers.maxpool3d_backward(dy, a, x.shape, layer.pool)
        elif layer.kind == "relu":
            dy = layers.relu_backward(dy, x)
        elif layer.kind == "flatten":
            dy = dy.reshape(x.shape)
        elif layer.kind == "batchnorm":
            dy, dgamma, dbeta = layers.batchnorm_backward(dy, a)
            grads[i] = {"gamma": dgamma, "beta": dbeta}
        elif layer.kind == "dense":
            dy, dw, db = layers.dense_backward(dy, x, p["w"])
            grads[i] = {"w": dw, "b": db}
    if not need_dinput:
        return grads, None
    return grads, (dy if cache.batched else dy[0])


# ---------------------------------------------------------------------------
# Flat-vector views of the trainable parameters (optimizer, gradient checks)
# ---------------------------------------------------------------------------

def trainable_entries(spec: ModelSpec, params_or_grads) -> list[tuple[int, str, np.ndarray]]:
    """(layer index, key, array) for every trainable tensor, in stack order."""
    source = params_or_grads.layers if isinstance(params_or_grads, ModelParams) else params_or_grads
    out = []
    for i, (layer, d) in enumerate(zip(spec.layers, source)):
        for key in _TRAINABLE.get(layer.kind, ()):
            if key in d:
                out.append((i, key, d[key]))
    return out


def params_to_vector(spec: ModelSpec, params: ModelParams) -> np.ndarray:
    return np.concatenate([a.ravel() for _, _, a in trainable_entries(spec, params)])


def vector_to_params(spec: ModelSpec, params: ModelParams, vec: np.ndarray) -> ModelParams:
    """New ModelParams with trainables taken from ``vec`` (dtype follows vec)."""
    out = params.copy()
    entries = trainable_entries(spec, out)
    needed = sum(a.size for _, _, a in entries)
    if needed != vec.size:
        raise ShapeError(f"vector has {vec.size} entries, model needs {needed}")
    pos = 0
    for i, key, a in entries:
        out.layers[i][key] = vec[pos:pos + a.size].reshape(a.shape)
        pos += a.size
    return out


def grads_to_vector(spec: ModelSpec, grads: list[dict]) -> np.ndarray:
    return np.concatenate([a.ravel() for _, _, a in trainable_entries(spec, grads)])


# ---------------------------------------------------------------------------
# Checkpoints: magic AFM1, u32 version, u32 model id, u64 seed, then every
# parameter tensor (including batch-norm running stats) as tensor blobs in
# architecture order.
# ---------------------------------------------------------------------------

def save_checkpoint(fh: BinaryIO, spec: ModelSpec, params: ModelParams, seed: int) -> None:
    fh.write(CHECKPOINT_MAGIC)
    fh.write(struct.pack("<II", CHECKPOINT_VERSION, MODEL_IDS[spec.name]))
    fh.write(struct.pack("<Q", seed & (2 ** 64 - 1)))
    for layer, d in zip(spec.layers, params.layers):
        for key in _SAVED.get(layer.kind, ()):
            write_tensor(fh, d[key])


def load_checkpoint(fh: BinaryIO) -> tuple[ModelSpec, ModelParams, int]:
    magic = fh.read(4)
    if magic != CHECKPOINT_MAGIC:
        raise ConfigError(f"bad checkpoint magic {magic!r}")
    version, model_id = struct.unpack("<II", fh.read(8))
    if version != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {version}")
    by_id = {v: k for k, v in MODEL_IDS.items()}
    if model_id not in by_id:
        raise ConfigError(f"unknown model id {model_id}")
    (seed,) = struct.unpack("<Q", fh.read(8))
    spec = build_architecture(by_id[model_id])
    shapes = [tuple(spec.input_shape)] + infer_shapes(spec)
    layers_out = []
    for layer, in_shape in zip(spec.layers, shapes[:-1]):
        d = {}
        for key in _SAVED.get(layer.kind, ()):
            d[key] = read_tensor(fh)
        layers_out.append(d)
    params = ModelParams(layers_out)
    # Shape sanity: reconcile against a freshly initialized structure.
    reference = init_params(spec, Rng(0))
    for got, want in zip(params.layers, reference.layers):
        for key, arr in want.items():
            if got.get(key) is None or got[key].shape != arr.shape:
                raise ConfigError(f"checkpoint tensor {key!r} has wrong shape")
    return spec, params, seed
