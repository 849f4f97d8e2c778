"""Two-stream tied-weight matching network.

Both streams are the *same* :class:`SiameseModel` object, so weight tying is
structural: the query patch and every search candidate go through one set of
parameters.  A box is described by ROI-pooling several tapped layers, L2
normalising each pooled block and concatenating the blocks; two boxes match
by the inner product of those vectors.
"""
from dataclasses import dataclass, field

import numpy as np

from . import nnet
from .boxes import as_boxes, intersects_image


class BoxOutsideImageError(ValueError):
    pass


class LayoutMismatchError(ValueError):
    pass


# ---------------------------------------------------------------------------
# architecture description

@dataclass(frozen=True)
class LayerSpec:
    kind: str
    kernel_size: int = 0
    out_channels: int = 0
    stride: int = 1
    out_units: int = 0

    @classmethod
    def parse(cls, text):
        parts = text.strip().split(":")
        kind, nums = parts[0], [int(p) for p in parts[1:]]
        if kind == "conv":
            k, c, s = (nums + [1])[:3] if len(nums) == 2 else nums
            spec = cls("conv", kernel_size=k, out_channels=c, stride=s)
        elif kind == "maxpool":
            k, s = nums if len(nums) == 2 else (nums[0], nums[0])
            spec = cls("maxpool", kernel_size=k, stride=s)
        elif kind == "fc":
            (u,) = nums
            spec = cls("fc", out_units=u)
        elif kind == "relu" and not nums:
            spec = cls("relu")
        else:
            raise ValueError(f"cannot parse layer spec {text!r}")
        spec.validate()
        return spec

    def validate(self):
        if self.kind == "conv" and min(self.kernel_size, self.out_channels, self.stride) < 1:
            raise ValueError(f"conv needs kernel, channels and stride >= 1: {self}")
        if self.kind == "maxpool" and min(self.kernel_size, self.stride) < 1:
            raise ValueError(f"maxpool needs kernel and stride >= 1: {self}")
        if self.kind == "fc" and self.out_units < 1:
            raise ValueError(f"fc needs at least one output unit: {self}")

    def __str__(self):
        if self.kind == "conv":
            return f"conv:{self.kernel_size}:{self.out_channels}:{self.stride}"
        if self.kind == "maxpool":
            return f"maxpool:{self.kernel_size}:{self.stride}"
        if self.kind == "fc":
            return f"fc:{self.out_units}"
        return self.kind


@dataclass(frozen=True)
class Architecture:
    layers: tuple
    taps: tuple
    roi_grid: int = 3
    in_channels: int = 3

    def __post_init__(self):
        layers = tuple(LayerSpec.parse(l) if isinstance(l, str) else l for l in self.layers)
        object.__setattr__(self, "layers", layers)
        object.__setattr__(self, "taps", tuple(self.taps))
        if not self.taps:
            raise ValueError("at least one feature tap is required")
        kinds = [l.kind for l in layers]
        if "fc" in kinds and kinds.index("fc") != len(kinds) - 1:
            raise ValueError("fc must be the last layer")
        if self.roi_grid < 1:
            raise ValueError("roi grid must be >= 1")
        n_conv = kinds.count("conv")
        for tap in self.taps:
            if tap == "fc":
                if "fc" not in kinds:
                    raise ValueError("tap 'fc' requested but the stack has no fc layer")
            elif not (tap.startswith("conv") and tap[4:].isdigit() and 1 <= int(tap[4:]) <= n_conv):
                raise ValueError(f"unknown tap {tap!r}")

    def to_text(self):
        return "\n".join([
            "layers=" + ",".join(str(l) for l in self.layers),
            "taps=" + ",".join(self.taps),
            f"roi_grid={self.roi_grid}",
            f"in_channels={self.in_channels}",
        ]) + "\n"

    @classmethod
    def from_text(cls, text):
        kv = {}
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if line:
                key, _, value = line.partition("=")
                kv[key.strip()] = value.strip()
        return cls(layers=tuple(kv["layers"].split(",")),
                   taps=tuple(kv["taps"].split(",")),
                   roi_grid=int(kv.get("roi_grid", 3)),
                   in_channels=int(kv.get("in_channels", 3)))

    def replace(self, **changes):
        fields = dict(layers=self.layers, taps=self.taps, roi_grid=self.roi_grid,
                      in_channels=self.in_channels)
        fields.update(changes)
        return Architecture(**fields)


_CONV_STACK = ("conv:3:8:1", "relu", "conv:3:16:1", "relu",
               "conv:3:16:1", "relu", "conv:3:32:1", "relu", "fc:64")

# no max pooling, conv3 + conv4 + fc taps
DEFAULT_ARCH = Architecture(layers=_CONV_STACK, taps=("conv3", "conv4", "fc"))
# single fc tap, with and without early max pooling (ablation axes)
FC_ONLY_ARCH = DEFAULT_ARCH.replace(taps=("fc",))
MAXPOOL_FC_ARCH = Architecture(
    layers=("conv:3:8:1", "relu", "maxpool:2:2", "conv:3:16:1", "relu", "maxpool:2:2",
            "conv:3:16:1", "relu", "conv:3:32:1", "relu", "fc:64"),
    taps=("fc",))


# ---------------------------------------------------------------------------
# feature containers

@dataclass(frozen=True)
class FeatureVector:
    values: np.ndarray
    offsets: tuple

    @property
    def n_blocks(self):
        return len(self.offsets) - 1

    def blocks(self):
        return [self.values[a:b] for a, b in zip(self.offsets[:-1], self.offsets[1:])]


@dataclass
class FeatureSet:
    """Features for a batch of boxes; rows of invalid boxes are NaN."""

    values: np.ndarray
    offsets: tuple
    valid: np.ndarray = None

    def __post_init__(self):
        if self.valid is None:
            self.valid = np.ones(len(self.values), dtype=bool)

    def __len__(self):
        return len(self.values)

    def __getitem__(self, i):
        if not self.valid[i]:
            raise BoxOutsideImageError(f"box {i} lies entirely outside the image")
        return FeatureVector(self.values[i], self.offsets)

    @property
    def n_blocks(self):
        return len(self.offsets) - 1


def _layout(v):
    if isinstance(v, (FeatureVector, FeatureSet)):
        return v.values, tuple(v.offsets)
    arr = np.asarray(v, dtype=np.float64)
    return arr, (0, arr.shape[-1])


def match(a, b):
    """Inner-product matching score ``f(a) . f(b)``.

    Either argument may be a :class:`FeatureSet`, in which case an array of
    scores is returned.
    """
    va, la = _layout(a)
    vb, lb = _layout(b)
    if la != lb:
        raise LayoutMismatchError(f"feature layouts differ: {la} vs {lb}")
    out = va @ vb.T if va.ndim == 2 and vb.ndim == 2 else (
        va @ vb if vb.ndim == 1 else vb @ va)
    return float(out) if np.ndim(out) == 0 else out


def pair_distance(a, b):
    va, la = _layout(a)
    vb, lb = _layout(b)
    if la != lb:
        raise LayoutMismatchError(f"feature layouts differ: {la} vs {lb}")
    d = np.linalg.norm(va - vb, axis=-1)
    return float(d) if np.ndim(d) == 0 else d


# ---------------------------------------------------------------------------
# model

def to_tensor(frame, in_channels=3):
    """``(H, W[, C])`` 8-bit-range image to a centred ``(C, H, W)`` float tensor."""
    img = np.asarray(frame, dtype=np.float64)
    if img.ndim == 2:
        img = img[..., None]
    if img.shape[-1] == 1 and in_channels == 3:
        img = np.repeat(img, 3, axis=-1)
    elif img.shape[-1] == 3 and in_channels == 1:
        img = img.mean(axis=-1, keepdims=True)
    return np.ascontiguousarray(img.transpose(2, 0, 1) / 255.0 - 0.5)


class SiameseModel:
    """Shared-parameter network mapping (image, boxes) to matching features."""

    def __init__(self, arch=DEFAULT_ARCH):
        self.arch = arch
        self.trunk = []
        self.fc = None
        names = {}
        channels, scale, n_conv = arch.in_channels, 1.0, 0
        self._scales = []
        for spec in arch.layers:
            if spec.kind == "conv":
                layer = nnet.Conv2d(channels, spec.out_channels, spec.kernel_size, spec.stride)
                channels = spec.out_channels
                scale /= spec.stride
                n_conv += 1
                names[f"conv{n_conv}"] = len(self.trunk)
            elif spec.kind == "relu":
                layer = nnet.ReLU()
                if self.trunk and self.trunk[-1].kind == "conv":
                    names[f"conv{n_conv}"] = len(self.trunk)
            elif spec.kind == "maxpool":
                layer = nnet.MaxPool2d(spec.kernel_size, spec.stride)
                scale /= spec.stride
            else:
                self.fc = nnet.Linear(channels * arch.roi_grid ** 2, spec.out_units)
                continue
            self.trunk.append(layer)
            self._scales.append(scale)
        self.out_channels = channels
        self.tap_index = {t: (len(self.trunk) - 1 if t == "fc" else names[t]) for t in arch.taps}
        self.pools = {t: nnet.RoiPool(arch.roi_grid, self._scales[i]) for t, i in self.tap_index.items()}
        self.l2 = nnet.L2Norm()
        sizes = []
        for t in arch.taps:
            if t == "fc":
                sizes.append(self.fc.out_features)
            else:
                sizes.append(self._channels_at(self.tap_index[t]) * arch.roi_grid ** 2)
        self.offsets = tuple(int(o) for o in np.concatenate([[0], np.cumsum(sizes)]))

    def _channels_at(self, index):
        channels = self.arch.in_channels
        for layer in self.trunk[:index + 1]:
            if layer.kind == "conv":
                channels = layer.out_channels
        return channels

    @property
    def n_blocks(self):
        return len(self.arch.taps)

    @property
    def dim(self):
        return self.offsets[-1]

    def layers(self):
        return self.trunk + ([self.fc] if self.fc is not None else [])

    def params(self):
        return [p for layer in self.layers() for p in layer.params()]

    def zero_grad(self):
        for p in self.params():
            p.zero_grad()

    def spatial_scale(self, tap):
        return self.pools[tap].spatial_scale

    def feature_map_shape(self, image_hw, upto=None):
        shape = (self.arch.in_channels,) + tuple(image_hw)
        upto = len(self.trunk) - 1 if upto is None else upto
        for layer in self.trunk[:upto + 1]:
            shape = layer.output_shape(shape)
        return shape

    # -- differentiable path -------------------------------------------------

    def forward(self, x, boxes):
        """Features for ``boxes`` on tensor ``x``; returns ``(features, cache)``."""
        boxes = as_boxes(boxes).reshape(-1, 4)
        deepest = max(self.tap_index.values())
        outputs, caches = [], []
        h = x
        for layer in self.trunk[:deepest + 1]:
            h, c = layer.forward(h)
            outputs.append(h)
            caches.append(c)
        blocks, tap_caches, pooled_cache = [], [], {}
        for tap in self.arch.taps:
            idx = self.tap_index[tap]
            if idx not in pooled_cache:
                pooled_cache[idx] = self.pools[tap].forward(outputs[idx], boxes)
            pooled, _ = pooled_cache[idx]
            if tap == "fc":
                raw, fc_cache = self.fc.forward(pooled)
            else:
                raw, fc_cache = pooled.reshape(len(boxes), -1), None
            normed, l2_cache = self.l2.forward(raw)
            blocks.append(normed)
            tap_caches.append((tap, idx, fc_cache, l2_cache))
        feats = np.concatenate(blocks, axis=1)
        return feats, (caches, tap_caches, pooled_cache, outputs)

    def backward(self, grad_feats, cache):
        """Accumulate parameter gradients for ``d loss / d features``."""
        caches, tap_caches, pooled_cache, outputs = cache
        grad_pooled = {}
        for (tap, idx, fc_cache, l2_cache), (a, b) in zip(tap_caches, zip(self.offsets[:-1], self.offsets[1:])):
            g = self.l2.backward(grad_feats[:, a:b], l2_cache)
            if tap == "fc":
                g = self.fc.backward(g, fc_cache)
            pooled, _ = pooled_cache[idx]
            g = g.reshape(pooled.shape)
            grad_pooled[idx] = grad_pooled.get(idx, 0.0) + g
        inject = {idx: self.pools[self._tap_for(idx)].backward(g, pooled_cache[idx][1])
                  for idx, g in grad_pooled.items()}
        g = None
        for i in range(len(caches) - 1, -1, -1):
            if i in inject:
                g = inject[i] if g is None else g + inject[i]
            if g is None:
                continue
            g = self.trunk[i].backward(g, caches[i])
        return g

    def _tap_for(self, idx):
        return next(t for t, i in self.tap_index.items() if i == idx)

    # -- inference -------------------------------------------------------------

    def features(self, frame, boxes):
        return extract_features(self, frame, boxes)


def extract_features(model, frame, boxes):
    """One whole-image pass, then per-box pooled, normalised features.

    Boxes entirely outside the image become invalid (NaN) rows of the
    returned :class:`FeatureSet`.
    """
    boxes = as_boxes(boxes).reshape(-1, 4)
    x = to_tensor(frame, model.arch.in_channels)
    inside = intersects_image(boxes, (x.shape[2], x.shape[1])) & (boxes[:, 2] > 0) & (boxes[:, 3] > 0)
    values = np.full((len(boxes), model.dim), np.nan)
    if inside.any():
        feats, _ = model.forward(x, boxes[inside])
        values[inside] = feats
    return FeatureSet(values, model.offsets, inside)


def build_model(arch=DEFAULT_ARCH, seed=0):
    model = SiameseModel(arch)
    nnet.glorot_init(model.layers(), np.random.default_rng(seed))
    return model


def copy_model(model):
    clone = SiameseModel(model.arch)
    for dst, src in zip(clone.params(), model.params()):
        dst.value[...] = src.value
    return clone


def save_model(path, model):
    nnet.save_checkpoint(path, model.layers(), model.arch.to_text())


def load_model(path):
    layers, meta = nnet.load_checkpoint(path)
    try:
        arch = Architecture.from_text(meta.decode("utf-8"))
    except (KeyError, ValueError, UnicodeDecodeError) as exc:
        raise nnet.CheckpointError(f"{path}: unreadable architecture metadata ({exc})") from exc
    model = SiameseModel(arch)
    if [l.kind for l in layers] != [l.kind for l in model.layers()]:
        raise nnet.CheckpointError(f"{path}: layer stack does not match its architecture")
    for dst, src in zip(model.params(), (p for l in layers for p in l.params())):
        if dst.value.shape != src.value.shape:
            raise nnet.CheckpointError(f"{path}: parameter shape mismatch")
        dst.value[...] = src.value
    return model
