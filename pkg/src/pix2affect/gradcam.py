"""Gradient-based class activation maps.

For a chosen output class and convolutional layer, the map is built from
the gradient of that class's logit with respect to the layer's activations:
activations are multiplied elementwise by their gradients, averaged over
the channel axis (and the temporal axis for 3D layers), clamped to be
non-negative, normalized by the maximum, and upsampled bilinearly to the
72x128 input plane. The ``pooled`` variant weights each channel by its
spatially averaged gradient instead (the widely used formulation); the
default multiplies gradient and activation pointwise.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import models
from .errors import ConfigError, ShapeError
from .models import ForwardCache, ModelParams, ModelSpec
from .tensors import FLOAT
from .video import FRAME_HEIGHT, FRAME_WIDTH, write_pgm

log = logging.getLogger("pix2affect.gradcam")


@dataclass
class Heatmap:
    """Spatial saliency in [0,1]; max is 1 unless the map is all zero."""

    values: np.ndarray
    target_class: int
    layer_index: int


def conv_layer_indices(spec: ModelSpec) -> list[int]:
    return [i for i, l in enumerate(spec.layers) if l.kind in ("conv2d", "conv3d")]


def _spatial_geometry(spec: ModelSpec, layer_index: int) -> tuple[float, float, float, float]:
    """(stride_y, stride_x, center_y, center_x) of the layer's feature grid.

    Valid (padding-free) convolutions anchor each feature at its receptive
    field's top-left corner, so feature (i, j) summarizes input pixels
    centered at (center_y + i*stride_y, center_x + j*stride_x). The map must
    be projected back through that grid or it lands shifted up and left by
    half a receptive field.
    """
    sy = sx = 1.0
    rf_y = rf_x = 1.0
    for layer in spec.layers[:layer_index + 1]:
        if layer.kind in ("conv2d", "conv3d"):
            kh, kw = layer.kernel[-2], layer.kernel[-1]
            rf_y += (kh - 1) * sy
            rf_x += (kw - 1) * sx
        elif layer.kind in ("maxpool2d", "maxpool3d"):
            ph, pw = layer.pool[-2], layer.pool[-1]
            rf_y += (ph - 1) * sy
            rf_x += (pw - 1) * sx
            sy *= ph
            sx *= pw
    return sy, sx, (rf_y - 1) / 2.0, (rf_x - 1) / 2.0


def _project_to_frame(raw: np.ndarray, spec: ModelSpec, layer_index: int) -> np.ndarray:
    """Bilinear upsample of a feature-grid map onto the 72x128 input plane,
    sampling along the receptive-field-centered grid (edge-clamped)."""
    sy, sx, cy, cx = _spatial_geometry(spec, layer_index)
    h, w = raw.shape
    fy = np.clip((np.arange(FRAME_HEIGHT) - cy) / sy, 0.0, h - 1.0)
    fx = np.clip((np.arange(FRAME_WIDTH) - cx) / sx, 0.0, w - 1.0)
    y0 = np.minimum(fy.astype(np.int64), h - 2) if h > 1 else np.zeros(FRAME_HEIGHT, np.int64)
    x0 = np.minimum(fx.astype(np.int64), w - 2) if w > 1 else np.zeros(FRAME_WIDTH, np.int64)
    wy = (fy - y0)[:, None] if h > 1 else np.zeros((FRAME_HEIGHT, 1))
    wx = (fx - x0)[None, :] if w > 1 else np.zeros((1, FRAME_WIDTH))
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    out = (raw[np.ix_(y0, x0)] * (1 - wy) * (1 - wx)
           + raw[np.ix_(y0, x1)] * (1 - wy) * wx
           + raw[np.ix_(y1, x0)] * wy * (1 - wx)
           + raw[np.ix_(y1, x1)] * wy * wx)
    return out.astype(FLOAT)


def gradcam(spec: ModelSpec, params: ModelParams, x: np.ndarray, target_class: int,
            layer_index: int | None = None, method: str = "gradxact") -> Heatmap:
    """Class activation heatmap for one input (no batch axis).

    ``layer_index`` addresses a convolutional layer (default: the last one).
    ``method``: ``gradxact`` multiplies activations and gradients pointwise;
    ``pooled`` weights channels by their mean gradient. An identically zero
    pre-normalization map is returned as all zeros (with a warning) rather
    than normalized.
    """
    conv_layers = conv_layer_indices(spec)
    if layer_index is None:
        layer_index = conv_layers[-1]
    if layer_index not in conv_layers:
        raise ConfigError(f"layer {layer_index} is not convolutional; "
                          f"valid conv layers: {conv_layers}")
    if not 0 <= target_class < spec.num_classes:
        raise ConfigError(f"target class {target_class} outside [0, {spec.num_classes})")
    if method not in ("gradxact", "pooled"):
        raise ConfigError(f"unknown method {method!r}")
    if x.ndim != len(spec.input_shape):
        raise ShapeError(f"expected a single input of rank {len(spec.input_shape)}")
    logits, cache = models.forward(spec, params, x, train=False, want_cache=True)
    dlogits = np.zeros_like(logits)
    dlogits[target_class] = 1.0
    _, dact = models.backward(spec, params, cache, dlogits,
                              stop_at_layer=layer_index, need_dinput=True)
    # activations of the chosen conv layer = input cached by the next layer
    act = cache.inputs[layer_index + 1][0]
    dact = dact  # same shape as act: [K,h,w] or [K,t,h,w]
    if method == "pooled":
        axes = tuple(range(1, act.ndim))
        weights = dact.mean(axis=axes, keepdims=True)
        raw = (weights * act).sum(axis=0)
    else:
        raw = (act * dact).mean(axis=0)
    if raw.ndim == 3:  # 3D layer: average the temporal axis as well
        raw = raw.mean(axis=0)
    raw = np.maximum(raw, 0.0)
    peak = float(raw.max())
    if peak <= 0.0:
        log.warning("activation map is identically zero (class %d, layer %d)",
                    target_class, layer_index)
        values = np.zeros((FRAME_HEIGHT, FRAME_WIDTH), dtype=FLOAT)
    else:
        values = _project_to_frame((raw / peak).astype(FLOAT), spec, layer_index)
        values = np.clip(values, 0.0, 1.0)
        peak2 = float(values.max())
        if peak2 > 0:
            values = (values / peak2).astype(FLOAT)
    return Heatmap(values, target_class, layer_index)


def render_heatmap(heatmap: Heatmap, underlay: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """8-bit images: the map alone and a 50/50 blend over ``underlay``.

    ``underlay`` is a [72,128] frame in [0,1].
    """
    if underlay.shape != heatmap.values.shape:
        raise ShapeError(f"underlay {underlay.shape} does not match "
                         f"heatmap {heatmap.values.shape}")
    heat_img = np.round(heatmap.values * 255.0).astype(np.uint8)
    blend = 0.5 * underlay + 0.5 * heatmap.values
    overlay_img = np.round(np.clip(blend, 0.0, 1.0) * 255.0).astype(np.uint8)
    return heat_img, overlay_img


def save_heatmap(heatmap: Heatmap, underlay: np.ndarray, heat_path: str,
                 overlay_path: str) -> None:
    heat_img, overlay_img = render_heatmap(heatmap, underlay)
    write_pgm(heat_path, heat_img)
    write_pgm(overlay_path, overlay_img)
