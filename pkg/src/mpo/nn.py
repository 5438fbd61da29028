"""Flat-vector neural-network engine: forward pass and exact reverse-mode
gradients for a small family of layers, with every parameter of a model
stored in one contiguous float64 vector.

Flat layout
-----------
Parameters are packed in layer order.  Within a layer the order is weights
then bias; for batch-norm it is stored-scale then shift.  Each parameter
tensor is raveled in C order.  The layout is a pure function of the
``ModelSpec`` and is what makes a weight vector interchangeable between a
standalone model and a point on the weight-space plane.

Stacked evaluation
------------------
Every operation in this module broadcasts over an optional leading "stack"
axis of independent weight vectors: ``w`` may be ``(n,)`` or ``(S, n)``,
in which case activations carry shape ``(S, B, ...)``.  Evaluating the S
weight vectors of a plane region this way turns the per-cell loop into
batched matrix multiplies, which is where all the speed comes from.

Batch norm stores its scale parameter shifted by -0.5 so the stored value
is zero-mean at initialization; the forward pass adds the 0.5 back.  This
keeps inner products between independently initialized parameter vectors
near zero, which the plane orthogonalization relies on.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import InputError, ShapeError

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
BN_SCALE_OFFSET = 0.5


# ---------------------------------------------------------------------------
# Layer descriptors
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Conv2D:
    in_ch: int
    out_ch: int
    kernel: int
    stride: int = 1
    padding: int = 0
    bias: bool = True


@dataclass(frozen=True)
class Dense:
    in_features: int
    out_features: int
    bias: bool = True


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class AdaptiveAvgPool:
    out_h: int
    out_w: int


@dataclass(frozen=True)
class BatchNorm:
    channels: int


@dataclass(frozen=True)
class Flatten:
    pass


Layer = Conv2D | Dense | ReLU | AdaptiveAvgPool | BatchNorm | Flatten


def _layer_param_shapes(layer: Layer) -> list[tuple[int, ...]]:
    """Parameter tensor shapes of one layer, in flat-layout order."""
    if isinstance(layer, Conv2D):
        shapes = [(layer.out_ch, layer.in_ch, layer.kernel, layer.kernel)]
        if layer.bias:
            shapes.append((layer.out_ch,))
        return shapes
    if isinstance(layer, Dense):
        shapes = [(layer.in_features, layer.out_features)]
        if layer.bias:
            shapes.append((layer.out_features,))
        return shapes
    if isinstance(layer, BatchNorm):
        return [(layer.channels,), (layer.channels,)]
    return []


def _layer_out_shape(layer: Layer, shape: tuple[int, ...]) -> tuple[int, ...]:
    """Shape of one sample after `layer`, or raise ShapeError."""
    if isinstance(layer, Conv2D):
        if len(shape) != 3 or shape[0] != layer.in_ch:
            raise ShapeError(f"Conv2D expects ({layer.in_ch}, H, W) input, got {shape}")
        oh = (shape[1] + 2 * layer.padding - layer.kernel) // layer.stride + 1
        ow = (shape[2] + 2 * layer.padding - layer.kernel) // layer.stride + 1
        if oh < 1 or ow < 1:
            raise ShapeError(f"Conv2D output collapses on input {shape}")
        return (layer.out_ch, oh, ow)
    if isinstance(layer, Dense):
        if shape != (layer.in_features,):
            raise ShapeError(f"Dense expects ({layer.in_features},) input, got {shape}")
        return (layer.out_features,)
    if isinstance(layer, AdaptiveAvgPool):
        if len(shape) != 3:
            raise ShapeError(f"AdaptiveAvgPool expects (C, H, W) input, got {shape}")
        if layer.out_h > shape[1] or layer.out_w > shape[2]:
            raise ShapeError(f"AdaptiveAvgPool cannot upsample {shape} to "
                             f"({layer.out_h}, {layer.out_w})")
        return (shape[0], layer.out_h, layer.out_w)
    if isinstance(layer, BatchNorm):
        if shape[0] != layer.channels or len(shape) not in (1, 3):
            raise ShapeError(f"BatchNorm({layer.channels}) cannot follow shape {shape}")
        return shape
    if isinstance(layer, Flatten):
        return (int(np.prod(shape)),)
    if isinstance(layer, ReLU):
        return shape
    raise ShapeError(f"unknown layer {layer!r}")


# ---------------------------------------------------------------------------
# Model specification
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ModelSpec:
    """Declarative architecture; validates layer compatibility on construction."""

    layers: tuple[Layer, ...]
    input_shape: tuple[int, int, int]
    num_classes: int

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        if len(self.input_shape) != 3 or any(d < 1 for d in self.input_shape):
            raise ShapeError(f"input_shape must be (C, H, W), got {self.input_shape}")
        if self.num_classes < 1:
            raise ShapeError("num_classes must be positive")
        shape = self.input_shape
        for layer in self.layers:
            shape = _layer_out_shape(layer, shape)
        if shape != (self.num_classes,):
            raise ShapeError(f"model output shape {shape} does not match "
                             f"({self.num_classes},) classes")

    @cached_property
    def activation_shapes(self) -> list[tuple[int, ...]]:
        """Per-sample shape after each layer (index 0 = input shape)."""
        shapes = [self.input_shape]
        for layer in self.layers:
            shapes.append(_layer_out_shape(layer, shapes[-1]))
        return shapes

    @cached_property
    def param_table(self) -> list[list[tuple[int, int, tuple[int, ...]]]]:
        """Per layer: list of (offset, size, shape) for its parameters."""
        table = []
        offset = 0
        for layer in self.layers:
            entries = []
            for shape in _layer_param_shapes(layer):
                size = int(np.prod(shape))
                entries.append((offset, size, shape))
                offset += size
            table.append(entries)
        return table

    @property
    def num_params(self) -> int:
        return param_count(self)

    def param_views(self, w: np.ndarray) -> list[list[np.ndarray]]:
        """Per-layer parameter views into flat `w` of shape (S, n)."""
        return [[w[:, off:off + size].reshape(w.shape[0], *shape)
                 for off, size, shape in entries]
                for entries in self.param_table]


def param_count(spec: ModelSpec) -> int:
    """Total number of scalar parameters in the flat layout."""
    return sum(size for entries in spec.param_table for _, size, _ in entries)


def init_weights(spec: ModelSpec, seed: int) -> np.ndarray:
    """Draw a flat weight vector: Xavier-uniform conv/dense weights
    (bound sqrt(6/(fan_in+fan_out))), zero biases, batch-norm stored-scale
    uniform in [-0.5, 0.5] and zero shift.  Deterministic per seed."""
    rng = np.random.default_rng(seed)
    w = np.zeros(param_count(spec))
    for layer, entries in zip(spec.layers, spec.param_table):
        if isinstance(layer, Conv2D):
            fan_in = layer.in_ch * layer.kernel * layer.kernel
            fan_out = layer.out_ch * layer.kernel * layer.kernel
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            off, size, _ = entries[0]
            w[off:off + size] = rng.uniform(-bound, bound, size)
        elif isinstance(layer, Dense):
            bound = np.sqrt(6.0 / (layer.in_features + layer.out_features))
            off, size, _ = entries[0]
            w[off:off + size] = rng.uniform(-bound, bound, size)
        elif isinstance(layer, BatchNorm):
            off, size, _ = entries[0]
            w[off:off + size] = rng.uniform(-BN_SCALE_OFFSET, BN_SCALE_OFFSET, size)
    return w


def pack_params(spec: ModelSpec, per_layer: list[list[np.ndarray]]) -> np.ndarray:
    """Pack per-layer parameter tensors into one flat vector."""
    w = np.empty(param_count(spec))
    for entries, tensors in zip(spec.param_table, per_layer):
        if len(entries) != len(tensors):
            raise InputError("parameter group count mismatch")
        for (off, size, shape), t in zip(entries, tensors):
            t = np.asarray(t, dtype=np.float64)
            if t.shape != shape:
                raise InputError(f"expected shape {shape}, got {t.shape}")
            w[off:off + size] = t.ravel()
    return w


def unpack_params(spec: ModelSpec, w: np.ndarray) -> list[list[np.ndarray]]:
    """Inverse of pack_params; returns copies shaped per parameter."""
    w = np.asarray(w, dtype=np.float64)
    return [[w[off:off + size].reshape(shape).copy()
             for off, size, shape in entries]
            for entries in spec.param_table]


# ---------------------------------------------------------------------------
# Data batches and batch-norm running state
# ---------------------------------------------------------------------------

@dataclass
class Batch:
    """A minibatch: float inputs (B, C, H, W) and integer labels (B,)."""

    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 4:
            raise InputError(f"batch inputs must be (B, C, H, W), got {self.inputs.shape}")
        if self.labels.shape != (self.inputs.shape[0],):
            raise InputError("labels must be one integer per input")
        if self.inputs.shape[0] < 1:
            raise InputError("batch must contain at least one example")
        if self.labels.size and self.labels.min() < 0:
            raise InputError("negative label")

    def __len__(self) -> int:
        return self.inputs.shape[0]


@dataclass
class BNState:
    """Running mean/variance per batch-norm layer, for eval-mode forward."""

    means: list[np.ndarray]
    vars: list[np.ndarray]

    @classmethod
    def for_spec(cls, spec: ModelSpec) -> "BNState":
        means, vars_ = [], []
        for layer in spec.layers:
            if isinstance(layer, BatchNorm):
                means.append(np.zeros(layer.channels))
                vars_.append(np.ones(layer.channels))
        return cls(means, vars_)


# ---------------------------------------------------------------------------
# Layer forward/backward kernels (all stack-aware)
# ---------------------------------------------------------------------------

def _conv_forward(layer: Conv2D, x, params):
    # x: (T, B, C, H, W) with T in {1, S}
    k, st, p = layer.kernel, layer.stride, layer.padding
    T, B = x.shape[:2]
    if p:
        x = np.pad(x, ((0, 0), (0, 0), (0, 0), (p, p), (p, p)))
    H, W = x.shape[3], x.shape[4]
    oh = (H - k) // st + 1
    ow = (W - k) // st + 1
    cols = np.empty((T, B, oh, ow, layer.in_ch, k, k))
    for ki in range(k):
        for kj in range(k):
            cols[..., ki, kj] = x[:, :, :, ki:ki + st * oh:st, kj:kj + st * ow:st] \
                .transpose(0, 1, 3, 4, 2)
    colsm = cols.reshape(T, B * oh * ow, layer.in_ch * k * k)
    wmat = params[0].reshape(-1, layer.out_ch, layer.in_ch * k * k).transpose(0, 2, 1)
    y = np.matmul(colsm, wmat)                      # (S, B*oh*ow, out_ch)
    if layer.bias:
        y += params[1][:, None, :]
    S = y.shape[0]
    y = y.reshape(S, B, oh, ow, layer.out_ch).transpose(0, 1, 4, 2, 3)
    return y, (colsm, wmat, x.shape, (oh, ow))


def _conv_backward(layer: Conv2D, dy, cache, gout):
    colsm, wmat, xp_shape, (oh, ow) = cache
    k, st, p = layer.kernel, layer.stride, layer.padding
    S, B = dy.shape[:2]
    dym = dy.transpose(0, 1, 3, 4, 2).reshape(S, B * oh * ow, layer.out_ch)
    dwmat = np.matmul(colsm.transpose(0, 2, 1), dym)        # (S, Ckk, out_ch)
    gout[0][...] = dwmat.transpose(0, 2, 1).reshape(S, layer.out_ch,
                                                    layer.in_ch, k, k)
    if layer.bias:
        gout[1][...] = dym.sum(axis=1)
    dcols = np.matmul(dym, wmat.transpose(0, 2, 1))         # (S, B*oh*ow, Ckk)
    dcols = dcols.reshape(S, B, oh, ow, layer.in_ch, k, k)
    dxp = np.zeros((S,) + xp_shape[1:])
    for ki in range(k):
        for kj in range(k):
            dxp[:, :, :, ki:ki + st * oh:st, kj:kj + st * ow:st] += \
                dcols[..., ki, kj].transpose(0, 1, 4, 2, 3)
    if p:
        return dxp[:, :, :, p:-p, p:-p]
    return dxp


def _dense_forward(layer: Dense, x, params):
    y = np.matmul(x, params[0])
    if layer.bias:
        y = y + params[1][:, None, :]
    return y, (x, params[0])


def _dense_backward(layer: Dense, dy, cache, gout):
    x, w = cache
    gout[0][...] = np.matmul(x.transpose(0, 2, 1), dy)
    if layer.bias:
        gout[1][...] = dy.sum(axis=1)
    return np.matmul(dy, w.transpose(0, 2, 1))


def _pool_regions(size_in: int, size_out: int) -> list[tuple[int, int]]:
    # adaptive pooling regions: start floor(i*n/m), end ceil((i+1)*n/m)
    return [(i * size_in // size_out, -((-(i + 1) * size_in) // size_out))
            for i in range(size_out)]


def _pool_forward(layer: AdaptiveAvgPool, x, params):
    T, B, C, H, W = x.shape
    oh, ow = layer.out_h, layer.out_w
    if H % oh == 0 and W % ow == 0:
        y = x.reshape(T, B, C, oh, H // oh, ow, W // ow).mean(axis=(4, 6))
        return y, (x.shape, None)
    rows, cols = _pool_regions(H, oh), _pool_regions(W, ow)
    y = np.empty((T, B, C, oh, ow))
    for i, (r0, r1) in enumerate(rows):
        for j, (c0, c1) in enumerate(cols):
            y[..., i, j] = x[..., r0:r1, c0:c1].mean(axis=(-2, -1))
    return y, (x.shape, (rows, cols))


def _pool_backward(layer: AdaptiveAvgPool, dy, cache, gout):
    x_shape, regions = cache
    T, B, C, H, W = x_shape
    S = dy.shape[0]
    oh, ow = layer.out_h, layer.out_w
    if regions is None:
        kh, kw = H // oh, W // ow
        dxr = np.broadcast_to((dy / (kh * kw))[:, :, :, :, None, :, None],
                              (S, B, C, oh, kh, ow, kw))
        return dxr.reshape(S, B, C, H, W)
    rows, cols = regions
    dx = np.zeros((S, B, C, H, W))
    for i, (r0, r1) in enumerate(rows):
        for j, (c0, c1) in enumerate(cols):
            area = (r1 - r0) * (c1 - c0)
            dx[..., r0:r1, c0:c1] += dy[..., i, j, None, None] / area
    return dx


def _bn_axes(x):
    # reduce over everything except the stack and channel axes
    return (1, 3, 4) if x.ndim == 5 else (1,)


def _bn_param_shape(x):
    return (-1, 1, x.shape[2], 1, 1) if x.ndim == 5 else (-1, 1, x.shape[2])


def _bn_forward(layer: BatchNorm, x, params, mode, state_slot):
    axes = _bn_axes(x)
    pshape = _bn_param_shape(x)
    m = int(np.prod([x.shape[a] for a in axes]))
    if mode == "train":
        mean = x.mean(axis=axes, keepdims=True)
        var = x.var(axis=axes, keepdims=True)
        if state_slot is not None:
            r_mean, r_var = state_slot
            batch_mean = mean.reshape(mean.shape[0], -1).mean(axis=0)
            batch_var = var.reshape(var.shape[0], -1).mean(axis=0)
            if m > 1:
                batch_var = batch_var * m / (m - 1)
            r_mean *= 1.0 - BN_MOMENTUM
            r_mean += BN_MOMENTUM * batch_mean
            r_var *= 1.0 - BN_MOMENTUM
            r_var += BN_MOMENTUM * batch_var
    else:
        if state_slot is None:
            mean = np.zeros(layer.channels)
            var = np.ones(layer.channels)
        else:
            mean, var = state_slot
        mean = mean.reshape((1,) + pshape[1:])
        var = var.reshape((1,) + pshape[1:])
    inv = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x - mean) * inv
    scale = (params[0] + BN_SCALE_OFFSET).reshape(pshape)
    shift = params[1].reshape(pshape)
    y = scale * xhat + shift
    return y, (xhat, inv, scale, axes, m, mode)


def _bn_backward(layer: BatchNorm, dy, cache, gout):
    xhat, inv, scale, axes, m, mode = cache
    gout[0][...] = (dy * xhat).sum(axis=axes)
    gout[1][...] = dy.sum(axis=axes)
    dxhat = dy * scale
    if mode != "train":
        return dxhat * inv
    term = m * dxhat - dxhat.sum(axis=axes, keepdims=True) \
        - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True)
    return inv / m * term


# ---------------------------------------------------------------------------
# Whole-model forward / loss / gradient
# ---------------------------------------------------------------------------

def _check_batch(spec: ModelSpec, batch: Batch):
    if tuple(batch.inputs.shape[1:]) != spec.input_shape:
        raise InputError(f"batch shape {batch.inputs.shape[1:]} does not match "
                         f"model input {spec.input_shape}")
    if batch.labels.max(initial=0) >= spec.num_classes:
        raise InputError("label outside class range")


def _as_stack(w: np.ndarray) -> np.ndarray:
    w = np.ascontiguousarray(w, dtype=np.float64)
    if w.ndim == 1:
        return w[None, :]
    if w.ndim == 2:
        return w
    raise InputError(f"weights must be (n,) or (S, n), got shape {w.shape}")


def _forward_stack(spec, W, inputs, mode, bn_state, keep_caches):
    views = spec.param_views(W)
    x = inputs[None]  # (1, B, C, H, W); stack axis broadcasts in matmuls
    caches = [] if keep_caches else None
    bn_idx = 0
    for layer, params in zip(spec.layers, views):
        if isinstance(layer, Conv2D):
            x, cache = _conv_forward(layer, x, params)
        elif isinstance(layer, Dense):
            x, cache = _dense_forward(layer, x, params)
        elif isinstance(layer, ReLU):
            cache = x > 0
            x = np.maximum(x, 0.0)
        elif isinstance(layer, AdaptiveAvgPool):
            x, cache = _pool_forward(layer, x, params)
        elif isinstance(layer, Flatten):
            cache = x.shape
            x = x.reshape(x.shape[0], x.shape[1], -1)
        elif isinstance(layer, BatchNorm):
            slot = None
            if bn_state is not None:
                slot = (bn_state.means[bn_idx], bn_state.vars[bn_idx])
            x, cache = _bn_forward(layer, x, params, mode, slot)
            bn_idx += 1
        else:
            raise ShapeError(f"unknown layer {layer!r}")
        if keep_caches:
            caches.append(cache)
    return x, views, caches


def _backward_stack(spec, views, caches, dy, grads):
    gviews = spec.param_views(grads)
    for layer, params, cache, gout in zip(reversed(spec.layers), reversed(views),
                                          reversed(caches), reversed(gviews)):
        if isinstance(layer, Conv2D):
            dy = _conv_backward(layer, dy, cache, gout)
        elif isinstance(layer, Dense):
            dy = _dense_backward(layer, dy, cache, gout)
        elif isinstance(layer, ReLU):
            dy = dy * cache
        elif isinstance(layer, AdaptiveAvgPool):
            dy = _pool_backward(layer, dy, cache, gout)
        elif isinstance(layer, Flatten):
            dy = dy.reshape((dy.shape[0],) + cache[1:])
        elif isinstance(layer, BatchNorm):
            dy = _bn_backward(layer, dy, cache, gout)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-stochastic softmax along the last axis (log-sum-exp stabilized)."""
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def forward(spec: ModelSpec, w: np.ndarray, batch: Batch, mode: str = "train",
            bn_state: BNState | None = None) -> np.ndarray:
    """Logits for one weight vector (B, K) or a stack of them (S, B, K)."""
    _check_batch(spec, batch)
    W = _as_stack(w)
    logits, _, _ = _forward_stack(spec, W, batch.inputs, mode, bn_state, False)
    logits = np.broadcast_to(logits, (W.shape[0],) + logits.shape[1:])
    return logits[0] if np.ndim(w) == 1 else logits


def loss_and_grad_many(spec: ModelSpec, W: np.ndarray, batch: Batch,
                       mode: str = "train", bn_state: BNState | None = None,
                       ) -> tuple[np.ndarray, np.ndarray]:
    """Mean cross-entropy and its exact gradient for a stack of weight
    vectors W (S, n): returns losses (S,) and gradients (S, n)."""
    _check_batch(spec, batch)
    W = _as_stack(W)
    S = W.shape[0]
    B = len(batch)
    logits, views, caches = _forward_stack(spec, W, batch.inputs, mode,
                                           bn_state, True)
    logp = _log_softmax(logits)
    rows = np.arange(B)
    losses = -logp[:, rows, batch.labels].mean(axis=-1)
    losses = np.broadcast_to(losses, (S,)).copy()
    dlogits = np.exp(logp)
    dlogits[:, rows, batch.labels] -= 1.0
    dlogits /= B
    dlogits = np.broadcast_to(dlogits, (S,) + dlogits.shape[1:]).copy()
    grads = np.zeros_like(W)
    _backward_stack(spec, views, caches, dlogits, grads)
    return losses, grads


def loss_and_grad(spec: ModelSpec, w: np.ndarray, batch: Batch,
                  mode: str = "train", bn_state: BNState | None = None,
                  ) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its gradient w.r.t. flat w."""
    losses, grads = loss_and_grad_many(spec, np.asarray(w)[None, :], batch,
                                       mode, bn_state)
    return float(losses[0]), grads[0]


def evaluate_many(spec: ModelSpec, W: np.ndarray, batch: Batch,
                  mode: str = "train", bn_state: BNState | None = None,
                  ) -> tuple[np.ndarray, np.ndarray]:
    """Forward-only mean cross-entropy and accuracy per stacked weight
    vector: (losses (S,), accuracies (S,))."""
    _check_batch(spec, batch)
    W = _as_stack(W)
    S = W.shape[0]
    logits, _, _ = _forward_stack(spec, W, batch.inputs, mode, bn_state, False)
    logp = _log_softmax(logits)
    rows = np.arange(len(batch))
    losses = -logp[:, rows, batch.labels].mean(axis=-1)
    accs = (logits.argmax(axis=-1) == batch.labels).mean(axis=-1)
    out = np.broadcast_to
    return out(losses, (S,)).copy(), out(accs, (S,)).astype(np.float64).copy()


def batchnorm_forward(stored_scale: np.ndarray, shift: np.ndarray, x: np.ndarray,
                      mode: str = "train", running: tuple | None = None,
                      ) -> np.ndarray:
    """Standalone batch-norm: normalize per channel by batch statistics
    (train) or by `running` = (mean, var) arrays (eval), then apply the
    effective scale (stored_scale + 0.5) and shift.  In train mode the
    running arrays, when given, are updated in place."""
    stored_scale = np.asarray(stored_scale, dtype=np.float64)
    shift = np.asarray(shift, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim not in (2, 4):
        raise InputError(f"expected (B, C) or (B, C, H, W) input, got {x.shape}")
    if x.shape[1] != stored_scale.shape[0] or shift.shape != stored_scale.shape:
        raise InputError("channel dimensions do not match")
    layer = BatchNorm(channels=x.shape[1])
    params = [stored_scale[None], shift[None]]
    y, _ = _bn_forward(layer, x[None], params, mode, running)
    return y[0]
