"""A small numpy neural-network engine.

Layers operate on a single image ``(C, H, W)`` or, after region pooling, on a
stack of per-region rows.  ``forward`` returns ``(output, cache)`` and
``backward(grad_out, cache)`` returns the input gradient while accumulating
parameter gradients into :class:`Param` objects.  Keeping activations in an
explicit cache (instead of on the layer) lets the two Siamese streams run
through one set of layers before either is back-propagated.
"""
import math
import struct
from dataclasses import dataclass, field

import numba
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64
L2_EPS = 1e-12


class ShapeError(ValueError):
    pass


class DegenerateRoiError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class Param:
    name: str
    value: np.ndarray
    grad: np.ndarray = None

    def __post_init__(self):
        self.value = np.ascontiguousarray(self.value, dtype=DTYPE)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)

    def zero_grad(self):
        self.grad[...] = 0.0


def _require_cache(layer, cache):
    if cache is None:
        raise RuntimeError(f"{layer.kind}: backward called before forward on this input")


class Layer:
    kind = "layer"

    def params(self):
        return []

    def config_ints(self):
        return []

    def output_shape(self, in_shape):
        return tuple(in_shape)

    def __repr__(self):
        args = ", ".join(str(i) for i in self.config_ints())
        return f"{type(self).__name__}({args})"


class Conv2d(Layer):
    """Cross-correlation with stride and symmetric zero padding.

    ``padding="same"`` pads by ``(kernel - 1) // 2`` so a stride-1 odd
    kernel keeps the spatial size.
    """

    kind = "conv"

    def __init__(self, in_channels, out_channels, kernel_size=3, stride=1, padding="same"):
        if min(in_channels, out_channels, kernel_size, stride) < 1:
            raise ValueError("conv: channels, kernel size and stride must be >= 1")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = (kernel_size - 1) // 2 if padding == "same" else int(padding)
        shape = (out_channels, in_channels, kernel_size, kernel_size)
        self.weight = Param("weight", np.zeros(shape))
        self.bias = Param("bias", np.zeros(out_channels))

    def params(self):
        return [self.weight, self.bias]

    def config_ints(self):
        return [self.in_channels, self.out_channels, self.kernel_size, self.stride, self.padding]

    def output_shape(self, in_shape):
        c, h, w = in_shape
        k, s, p = self.kernel_size, self.stride, self.padding
        return (self.out_channels, (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1)

    def forward(self, x, rois=None):
        if x.ndim != 3 or x.shape[0] != self.in_channels:
            raise ShapeError(f"conv: expected input (C={self.in_channels}, H, W), got {x.shape}")
        k, s, p = self.kernel_size, self.stride, self.padding
        c = x.shape[0]
        _, ho, wo = self.output_shape(x.shape)
        if ho < 1 or wo < 1:
            raise ShapeError(f"conv: input {x.shape} too small for kernel {k}")
        xp = np.pad(x, ((0, 0), (p, p), (p, p)))
        win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::s, ::s][:, :ho, :wo]
        cols = win.transpose(0, 3, 4, 1, 2).reshape(c * k * k, ho * wo)
        wmat = self.weight.value.reshape(self.out_channels, -1)
        out = (wmat @ cols + self.bias.value[:, None]).reshape(self.out_channels, ho, wo)
        return out, (x.shape, cols)

    def backward(self, grad_out, cache):
        _require_cache(self, cache)
        in_shape, cols = cache
        c, h, w = in_shape
        k, s, p = self.kernel_size, self.stride, self.padding
        _, ho, wo = self.output_shape(in_shape)
        if grad_out.shape != (self.out_channels, ho, wo):
            raise ShapeError(f"conv: output grad {grad_out.shape} != {(self.out_channels, ho, wo)}")
        g = grad_out.reshape(self.out_channels, -1)
        self.weight.grad += (g @ cols.T).reshape(self.weight.value.shape)
        self.bias.grad += g.sum(axis=1)
        dcols = (self.weight.value.reshape(self.out_channels, -1).T @ g).reshape(c, k, k, ho, wo)
        dxp = np.zeros((c, h + 2 * p, w + 2 * p), dtype=DTYPE)
        for i in range(k):
            for j in range(k):
                dxp[:, i:i + s * ho:s, j:j + s * wo:s] += dcols[:, i, j]
        return dxp[:, p:p + h, p:p + w]


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, rois=None):
        mask = x > 0
        return np.where(mask, x, 0.0), mask

    def backward(self, grad_out, cache):
        _require_cache(self, cache)
        if grad_out.shape != cache.shape:
            raise ShapeError(f"relu: output grad {grad_out.shape} != {cache.shape}")
        return np.where(cache, grad_out, 0.0)


class MaxPool2d(Layer):
    """Max over ``kernel x kernel`` windows; no padding, floor output size.

    Ties resolve to the lowest linear index inside the window.
    """

    kind = "maxpool"

    def __init__(self, kernel_size=2, stride=2):
        if kernel_size < 1 or stride < 1:
            raise ValueError("maxpool: kernel size and stride must be >= 1")
        self.kernel_size = kernel_size
        self.stride = stride

    def config_ints(self):
        return [self.kernel_size, self.stride]

    def output_shape(self, in_shape):
        c, h, w = in_shape
        k, s = self.kernel_size, self.stride
        return (c, (h - k) // s + 1, (w - k) // s + 1)

    def forward(self, x, rois=None):
        if x.ndim != 3:
            raise ShapeError(f"maxpool: expected input (C, H, W), got {x.shape}")
        k, s = self.kernel_size, self.stride
        c, ho, wo = self.output_shape(x.shape)
        if ho < 1 or wo < 1:
            raise ShapeError(f"maxpool: input {x.shape} smaller than kernel {k}")
        win = sliding_window_view(x, (k, k), axis=(1, 2))[:, ::s, ::s][:, :ho, :wo]
        win = win.reshape(c, ho, wo, k * k)
        arg = win.argmax(axis=-1)
        out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
        rows = np.arange(ho)[:, None] * s + arg // k
        cols = np.arange(wo)[None, :] * s + arg % k
        return out, (x.shape, rows, cols)

    def backward(self, grad_out, cache):
        _require_cache(self, cache)
        in_shape, rows, cols = cache
        if grad_out.shape != rows.shape:
            raise ShapeError(f"maxpool: output grad {grad_out.shape} != {rows.shape}")
        dx = np.zeros(in_shape, dtype=DTYPE)
        chan = np.broadcast_to(np.arange(in_shape[0])[:, None, None], rows.shape)
        np.add.at(dx, (chan, rows, cols), grad_out)
        return dx


class Linear(Layer):
    """Affine map on rows; any trailing dimensions are flattened first."""

    kind = "fc"

    def __init__(self, in_features, out_features):
        if in_features < 1 or out_features < 1:
            raise ValueError("fc: feature counts must be >= 1")
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Param("weight", np.zeros((out_features, in_features)))
        self.bias = Param("bias", np.zeros(out_features))

    def params(self):
        return [self.weight, self.bias]

    def config_ints(self):
        return [self.in_features, self.out_features]

    def output_shape(self, in_shape):
        return (in_shape[0], self.out_features)

    def forward(self, x, rois=None):
        flat = x.reshape(x.shape[0], -1)
        if flat.shape[1] != self.in_features:
            raise ShapeError(f"fc: expected {self.in_features} input features, got {x.shape}")
        return flat @ self.weight.value.T + self.bias.value, (x.shape, flat)

    def backward(self, grad_out, cache):
        _require_cache(self, cache)
        in_shape, flat = cache
        if grad_out.shape != (flat.shape[0], self.out_features):
            raise ShapeError(f"fc: output grad {grad_out.shape} != {(flat.shape[0], self.out_features)}")
        self.weight.grad += grad_out.T @ flat
        self.bias.grad += grad_out.sum(axis=0)
        return (grad_out @ self.weight.value).reshape(in_shape)


@numba.njit(cache=True)
def _roi_pool_kernel(x, regions, gh, gw):
    c, h, w = x.shape
    n = regions.shape[0]
    out = np.empty((n, c, gh, gw))
    arg = np.empty((n, c, gh, gw), dtype=np.int64)
    for r in range(n):
        y0, y1, x0, x1 = regions[r, 0], regions[r, 1], regions[r, 2], regions[r, 3]
        rh, rw = y1 - y0, x1 - x0
        for i in range(gh):
            ys = y0 + (i * rh) // gh
            ye = y0 + -((-(i + 1) * rh) // gh)
            for j in range(gw):
                xs = x0 + (j * rw) // gw
                xe = x0 + -((-(j + 1) * rw) // gw)
                for ch in range(c):
                    best = x[ch, ys, xs]
                    best_idx = ys * w + xs
                    for yy in range(ys, ye):
                        for xx in range(xs, xe):
                            v = x[ch, yy, xx]
                            if v > best:
                                best = v
                                best_idx = yy * w + xx
                    out[r, ch, i, j] = best
                    arg[r, ch, i, j] = best_idx
    return out, arg


@numba.njit(cache=True)
def _roi_pool_backward_kernel(grad_out, arg, c, hw):
    dx = np.zeros((c, hw))
    n, _, gh, gw = grad_out.shape
    for r in range(n):
        for ch in range(c):
            for i in range(gh):
                for j in range(gw):
                    dx[ch, arg[r, ch, i, j]] += grad_out[r, ch, i, j]
    return dx


def project_roi(box, spatial_scale, feature_hw):
    """Feature-map region ``(y0, y1, x0, x1)`` for an image-space box.

    Edges round outward and are clipped to the map; an empty result raises
    :class:`DegenerateRoiError`.
    """
    if not 0 < spatial_scale <= 1:
        raise ValueError(f"spatial scale must lie in (0, 1], got {spatial_scale}")
    fh, fw = feature_hw
    cx, cy, bw, bh = box
    x0 = max(0, math.floor((cx - bw / 2.0) * spatial_scale))
    x1 = min(fw, math.ceil((cx + bw / 2.0) * spatial_scale))
    y0 = max(0, math.floor((cy - bh / 2.0) * spatial_scale))
    y1 = min(fh, math.ceil((cy + bh / 2.0) * spatial_scale))
    if x1 - x0 < 1 or y1 - y0 < 1:
        raise DegenerateRoiError(f"roipool: box {tuple(box)} projects to an empty region")
    return y0, y1, x0, x1


class RoiPool(Layer):
    """Region-of-interest max pooling to a fixed ``grid`` per box.

    Takes the feature map ``(C, H, W)`` plus ``rois`` as center boxes in
    image pixels and returns ``(N, C, gh, gw)``.
    """

    kind = "roipool"

    def __init__(self, grid=(3, 3), spatial_scale=1.0):
        gh, gw = (grid, grid) if np.isscalar(grid) else grid
        if gh < 1 or gw < 1:
            raise ValueError("roipool: output grid must be >= 1")
        self.grid = (int(gh), int(gw))
        self.spatial_scale = float(spatial_scale)

    def config_ints(self):
        return [self.grid[0], self.grid[1]]

    def output_shape(self, in_shape, n_rois=1):
        return (n_rois, in_shape[0]) + self.grid

    def regions(self, rois, feature_hw):
        return np.array([project_roi(b, self.spatial_scale, feature_hw)
                         for b in np.asarray(rois, dtype=DTYPE).reshape(-1, 4)],
                        dtype=np.int64).reshape(-1, 4)

    def forward(self, x, rois=None):
        if rois is None:
            raise ShapeError("roipool: rois are required")
        if x.ndim != 3:
            raise ShapeError(f"roipool: expected feature map (C, H, W), got {x.shape}")
        regions = self.regions(rois, x.shape[1:])
        out, arg = _roi_pool_kernel(np.ascontiguousarray(x, dtype=DTYPE), regions, *self.grid)
        return out, (x.shape, arg)

    def backward(self, grad_out, cache):
        _require_cache(self, cache)
        in_shape, arg = cache
        if grad_out.shape != arg.shape:
            raise ShapeError(f"roipool: output grad {grad_out.shape} != {arg.shape}")
        c, h, w = in_shape
        dx = _roi_pool_backward_kernel(np.ascontiguousarray(grad_out, dtype=DTYPE), arg, c, h * w)
        return dx.reshape(in_shape)


class L2Norm(Layer):
    """Row-wise ``x / (||x|| + 1e-12)`` over flattened trailing dimensions."""

    kind = "l2norm"

    def forward(self, x, rois=None):
        flat = x.reshape(x.shape[0], -1)
        norm = np.sqrt(np.einsum("ij,ij->i", flat, flat))[:, None]
        return (flat / (norm + L2_EPS)).reshape(x.shape), (flat, norm, x.shape)

    def backward(self, grad_out, cache):
        _require_cache(self, cache)
        flat, norm, shape = cache
        if grad_out.shape != shape:
            raise ShapeError(f"l2norm: output grad {grad_out.shape} != {shape}")
        g = grad_out.reshape(flat.shape)
        denom = norm + L2_EPS
        proj = np.einsum("ij,ij->i", flat, g)[:, None]
        safe = np.where(norm > 0, norm, 1.0)
        dx = g / denom - flat * proj / (safe * denom ** 2)
        return dx.reshape(shape)


LAYER_KINDS = {cls.kind: cls for cls in (Conv2d, ReLU, MaxPool2d, Linear, RoiPool, L2Norm)}


def glorot_init(layers, rng):
    """Uniform ``[-s, s]`` weights with ``s = sqrt(6 / (fan_in + fan_out))``; zero biases."""
    for layer in layers:
        if isinstance(layer, Conv2d):
            k2 = layer.kernel_size ** 2
            fan_in, fan_out = layer.in_channels * k2, layer.out_channels * k2
        elif isinstance(layer, Linear):
            fan_in, fan_out = layer.in_features, layer.out_features
        else:
            continue
        s = math.sqrt(6.0 / (fan_in + fan_out))
        layer.weight.value[...] = rng.uniform(-s, s, size=layer.weight.value.shape)
        layer.bias.value[...] = 0.0


# ---------------------------------------------------------------------------
# optimisation

@dataclass
class SgdConfig:
    learning_rate: float = 0.001
    weight_decay: float = 0.001
    lr_decay_factor: float = 10.0
    lr_decay_every: int = 2

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight decay must be non-negative")
        if self.lr_decay_factor < 1:
            raise ValueError("lr decay factor must be >= 1")
        if self.lr_decay_every < 1:
            raise ValueError("lr decay interval must be >= 1 epoch")

    def lr_at(self, epoch):
        return self.learning_rate / self.lr_decay_factor ** (epoch // self.lr_decay_every)


def sgd_step(params, config, epoch):
    """``p -= lr(epoch) * (grad + weight_decay * p)``, then zero the gradients.

    Raises ``FloatingPointError`` before touching any parameter if a
    gradient is not finite.
    """
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            bad = np.count_nonzero(~np.isfinite(p.grad))
            raise FloatingPointError(f"non-finite gradient in {p.name} ({bad} entries); step aborted")
    lr = config.lr_at(epoch)
    for p in params:
        p.value -= lr * (p.grad + config.weight_decay * p.value)
        p.zero_grad()
    return params


# ---------------------------------------------------------------------------
# checkpoints
#
# "SINTNET1" | u32 layer count | per layer: 8-byte kind tag, u32 n_ints,
# i64 ints, u32 n_tensors, per tensor: u32 ndim, i64 dims, f64 data (LE)
# | u32 metadata length | metadata bytes

MAGIC = b"SINTNET1"


def save_checkpoint(path, layers, metadata=b""):
    chunks = [MAGIC, struct.pack("<I", len(layers))]
    for layer in layers:
        ints = layer.config_ints()
        chunks.append(layer.kind.encode("ascii").ljust(8, b"\0"))
        chunks.append(struct.pack("<I", len(ints)))
        chunks.append(struct.pack(f"<{len(ints)}q", *ints))
        tensors = [p.value for p in layer.params()]
        chunks.append(struct.pack("<I", len(tensors)))
        for t in tensors:
            chunks.append(struct.pack("<I", t.ndim))
            chunks.append(struct.pack(f"<{t.ndim}q", *t.shape))
            chunks.append(np.ascontiguousarray(t, dtype="<f8").tobytes())
    if isinstance(metadata, str):
        metadata = metadata.encode("utf-8")
    chunks.append(struct.pack("<I", len(metadata)))
    chunks.append(metadata)
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def _build_layer(kind, ints):
    if kind == "conv":
        cin, cout, k, s, p = ints
        return Conv2d(cin, cout, k, s, p)
    if kind == "maxpool":
        return MaxPool2d(*ints)
    if kind == "fc":
        return Linear(*ints)
    if kind == "roipool":
        return RoiPool(tuple(ints))
    if kind in ("relu", "l2norm"):
        return LAYER_KINDS[kind]()
    raise CheckpointError(f"unknown layer kind {kind!r}")


def load_checkpoint(path):
    """Return ``(layers, metadata_bytes)``; raises :class:`CheckpointError` on corruption."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {buf[:8]!r}")
    pos = 8

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(buf):
            raise CheckpointError(f"{path}: truncated checkpoint")
        vals = struct.unpack_from(fmt, buf, pos)
        pos += size
        return vals

    (n_layers,) = take("<I")
    layers = []
    for _ in range(n_layers):
        kind = take("8s")[0].rstrip(b"\0").decode("ascii")
        (n_ints,) = take("<I")
        ints = list(take(f"<{n_ints}q"))
        layer = _build_layer(kind, ints)
        (n_tensors,) = take("<I")
        params = layer.params()
        if n_tensors != len(params):
            raise CheckpointError(f"{path}: {kind} expects {len(params)} tensors, found {n_tensors}")
        for p in params:
            (ndim,) = take("<I")
            shape = take(f"<{ndim}q")
            if tuple(shape) != p.value.shape:
                raise CheckpointError(f"{path}: {kind} tensor shape {shape} != {p.value.shape}")
            count = int(np.prod(shape))
            if pos + 8 * count > len(buf):
                raise CheckpointError(f"{path}: truncated checkpoint")
            p.value[...] = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).reshape(shape)
            pos += 8 * count
        layers.append(layer)
    (n_meta,) = take("<I")
    metadata = buf[pos:pos + n_meta]
    if len(metadata) != n_meta:
        raise CheckpointError(f"{path}: truncated metadata")
    return layers, metadata
