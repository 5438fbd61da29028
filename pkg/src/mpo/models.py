"""Reference architectures and ModelSpec JSON (de)serialization.

JSON schema
-----------
``{"input_shape": [C, H, W], "num_classes": K, "layers": [...]}`` where each
layer entry is one of::

    {"type": "conv2d", "in_ch", "out_ch", "kernel", "stride", "padding", "bias"}
    {"type": "dense", "in_features", "out_features", "bias"}
    {"type": "relu"}
    {"type": "adaptive_avg_pool", "out_h", "out_w"}
    {"type": "batch_norm", "channels"}
    {"type": "flatten"}
"""

from __future__ import annotations

import hashlib
import json

from .errors import ConfigError
from .nn import (AdaptiveAvgPool, BatchNorm, Conv2D, Dense, Flatten, ModelSpec,
                 ReLU)


def mlp(input_shape, num_classes, hidden=(128,)) -> ModelSpec:
    """Flatten followed by ReLU-separated dense layers."""
    c, h, w = input_shape
    layers = [Flatten()]
    prev = c * h * w
    for units in hidden:
        layers += [Dense(prev, units), ReLU()]
        prev = units
    layers.append(Dense(prev, num_classes))
    return ModelSpec(tuple(layers), tuple(input_shape), num_classes)


def conv_classifier(input_shape, num_classes, channels=(8, 32, 64),
                    batch_norm=False, pool_every=2, pool_to=(4, 4),
                    hidden=128) -> ModelSpec:
    """Stack of 3x3 stride-1 shape-preserving convolutions with ReLU, an
    adaptive average pool down to `pool_to`, then a one-hidden-layer MLP.

    With `batch_norm` each convolution is followed by batch norm before its
    ReLU, and a 2x2 average pool (realized as an adaptive pool to half the
    spatial size) follows every `pool_every`-th block to keep activations
    small.  Without batch norm there is no pooling between convolutions.
    """
    c, h, w = input_shape
    layers: list = []
    prev = c
    for i, ch in enumerate(channels, start=1):
        # bias is redundant when batch norm renormalizes the channel
        layers.append(Conv2D(prev, ch, kernel=3, stride=1, padding=1,
                             bias=not batch_norm))
        if batch_norm:
            layers.append(BatchNorm(ch))
        layers.append(ReLU())
        if batch_norm and i % pool_every == 0 and min(h, w) // 2 >= max(pool_to):
            h, w = h // 2, w // 2
            layers.append(AdaptiveAvgPool(h, w))
        prev = ch
    layers += [AdaptiveAvgPool(*pool_to), Flatten(),
               Dense(prev * pool_to[0] * pool_to[1], hidden), ReLU(),
               Dense(hidden, num_classes)]
    return ModelSpec(tuple(layers), tuple(input_shape), num_classes)


def tiny_conv(input_shape, num_classes, batch_norm=False) -> ModelSpec:
    """Desk-scale two-convolution classifier used by the batch-norm study."""
    return conv_classifier(input_shape, num_classes, channels=(4, 8),
                           batch_norm=batch_norm, pool_every=2,
                           pool_to=(2, 2), hidden=16)


PRESETS = {
    "mlp": mlp,
    "conv": conv_classifier,
    "tiny_conv": tiny_conv,
}


def build_preset(name: str, input_shape, num_classes, **kwargs) -> ModelSpec:
    if name not in PRESETS:
        raise ConfigError(f"unknown model preset {name!r}; "
                          f"available: {sorted(PRESETS)}")
    try:
        return PRESETS[name](tuple(input_shape), num_classes, **kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad arguments for preset {name!r}: {exc}") from exc


_LAYER_TO_JSON = {
    Conv2D: lambda l: {"type": "conv2d", "in_ch": l.in_ch, "out_ch": l.out_ch,
                       "kernel": l.kernel, "stride": l.stride,
                       "padding": l.padding, "bias": l.bias},
    Dense: lambda l: {"type": "dense", "in_features": l.in_features,
                      "out_features": l.out_features, "bias": l.bias},
    ReLU: lambda l: {"type": "relu"},
    AdaptiveAvgPool: lambda l: {"type": "adaptive_avg_pool",
                                "out_h": l.out_h, "out_w": l.out_w},
    BatchNorm: lambda l: {"type": "batch_norm", "channels": l.channels},
    Flatten: lambda l: {"type": "flatten"},
}


def _layer_from_json(obj: dict):
    kind = obj.get("type")
    try:
        if kind == "conv2d":
            return Conv2D(obj["in_ch"], obj["out_ch"], obj["kernel"],
                          obj.get("stride", 1), obj.get("padding", 0),
                          obj.get("bias", True))
        if kind == "dense":
            return Dense(obj["in_features"], obj["out_features"],
                         obj.get("bias", True))
        if kind == "relu":
            return ReLU()
        if kind == "adaptive_avg_pool":
            return AdaptiveAvgPool(obj["out_h"], obj["out_w"])
        if kind == "batch_norm":
            return BatchNorm(obj["channels"])
        if kind == "flatten":
            return Flatten()
    except KeyError as exc:
        raise ConfigError(f"layer {obj!r} is missing field {exc}") from exc
    raise ConfigError(f"unknown layer type {kind!r}")


def spec_to_dict(spec: ModelSpec) -> dict:
    return {
        "input_shape": list(spec.input_shape),
        "num_classes": spec.num_classes,
        "layers": [_LAYER_TO_JSON[type(l)](l) for l in spec.layers],
    }


def spec_from_dict(obj: dict) -> ModelSpec:
    try:
        layers = tuple(_layer_from_json(l) for l in obj["layers"])
        return ModelSpec(layers, tuple(obj["input_shape"]), obj["num_classes"])
    except KeyError as exc:
        raise ConfigError(f"model JSON missing field {exc}") from exc


def spec_to_json(spec: ModelSpec) -> str:
    return json.dumps(spec_to_dict(spec), indent=2, sort_keys=True)


def spec_from_json(text: str) -> ModelSpec:
    return spec_from_dict(json.loads(text))


def spec_hash(spec: ModelSpec) -> str:
    """Stable hex digest of the canonical JSON form."""
    canon = json.dumps(spec_to_dict(spec), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()
