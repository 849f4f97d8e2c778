"""Synthetic annotated video and training-pair sampling.

Each sequence is a textured shape moving over a static, cluttered textured
background.  The ground truth is the analytic bounding box of the rendered
shape, so it is exact at any scale or rotation.  Sequences can be written to
and read from an OTB-style directory (numbered images plus
``groundtruth_rect.txt``).
"""
import math
import re
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .boxes import center_to_xywh, clip_to_image, intersects_image, iou, xywh_to_center

ATTRIBUTES = ("scale-change", "illumination", "occlusion", "rotation", "blur", "fast-motion")


class IncompleteSampleWarning(UserWarning):
    pass


@dataclass
class Sequence:
    frames: list
    groundtruth: np.ndarray
    attributes: frozenset = frozenset()
    name: str = ""

    def __post_init__(self):
        self.groundtruth = np.asarray(self.groundtruth, dtype=np.float64).reshape(-1, 4)
        if len(self.frames) != len(self.groundtruth):
            raise ValueError(f"{len(self.frames)} frames but {len(self.groundtruth)} boxes")
        self.attributes = frozenset(self.attributes)

    def __len__(self):
        return len(self.frames)

    @property
    def image_size(self):
        h, w = self.frames[0].shape[:2]
        return (w, h)


# ---------------------------------------------------------------------------
# rendering

@dataclass
class RenderParams:
    """Knobs of the renderer; defaults give a 64x64 desk-scale sequence."""

    base_size: tuple = (12.0, 20.0)
    speed: tuple = (0.3, 1.2)
    fast_speed: tuple = (3.0, 3.5)
    scale_ramp: float = 2.0
    gain_ramp: float = 0.55
    rotation_ramp: float = 60.0
    max_blur: float = 1.6
    n_clutter: int = 4


def _texture(rng, grid=4):
    colors = rng.uniform(20, 235, size=(grid, grid, 3))
    freq = rng.uniform(2.0, 5.0, size=2)
    phase = rng.uniform(0, 2 * np.pi)
    amp = rng.uniform(15, 40)
    return colors, freq, phase, amp


def _shade(tex, u, v):
    colors, freq, phase, amp = tex
    n = colors.shape[0]
    gu = (np.clip(u, -1, 1) + 1) * 0.5 * (n - 1)
    gv = (np.clip(v, -1, 1) + 1) * 0.5 * (n - 1)
    out = np.stack([ndimage.map_coordinates(colors[..., c], [gv, gu], order=1, mode="nearest")
                    for c in range(3)], axis=-1)
    stripes = amp * np.sin(np.pi * (freq[0] * u + freq[1] * v) + phase)
    return out + stripes[..., None]


def _background(rng, width, height, n_clutter):
    coarse = rng.uniform(30, 225, size=(6, 6, 3))
    ys, xs = np.mgrid[0:height, 0:width]
    gy = (ys + 0.5) / height * 5
    gx = (xs + 0.5) / width * 5
    bg = np.stack([ndimage.map_coordinates(coarse[..., c], [gy, gx], order=1, mode="nearest")
                   for c in range(3)], axis=-1)
    bg += rng.normal(0, 8, size=bg.shape)
    for _ in range(n_clutter):
        cw, ch = rng.uniform(5, 16, size=2)
        ccx, ccy = rng.uniform(0, width), rng.uniform(0, height)
        _paint(bg, _texture(rng), rng.integers(2), ccx, ccy, cw, ch, 0.0)
    return bg


def _local_coords(width, height, cx, cy, w, h, angle, ss=2):
    """Object-frame coordinates of ``ss x ss`` subsamples per pixel."""
    offs = (np.arange(ss) + 0.5) / ss
    ys = (np.arange(height)[:, None] + offs[None, :]).reshape(-1)
    xs = (np.arange(width)[:, None] + offs[None, :]).reshape(-1)
    py, px = np.meshgrid(ys, xs, indexing="ij")
    ca, sa = math.cos(angle), math.sin(angle)
    dx, dy = px - cx, py - cy
    u = (ca * dx + sa * dy) / (w / 2.0)
    v = (-sa * dx + ca * dy) / (h / 2.0)
    return u.reshape(height, ss, width, ss), v.reshape(height, ss, width, ss)


def _paint(canvas, tex, shape, cx, cy, w, h, angle, ss=2):
    height, width = canvas.shape[:2]
    u, v = _local_coords(width, height, cx, cy, w, h, angle, ss)
    inside = (u ** 2 + v ** 2 <= 1.0) if shape == 0 else ((np.abs(u) <= 1) & (np.abs(v) <= 1))
    alpha = inside.mean(axis=(1, 3))
    if not alpha.any():
        return canvas
    color = _shade(tex, u[:, ss // 2, :, ss // 2], v[:, ss // 2, :, ss // 2])
    canvas *= 1 - alpha[..., None]
    canvas += alpha[..., None] * color
    return canvas


def _shape_box(shape, cx, cy, w, h, angle):
    a, b = w / 2.0, h / 2.0
    c, s = abs(math.cos(angle)), abs(math.sin(angle))
    if shape == 0:
        hw = math.sqrt((a * c) ** 2 + (b * s) ** 2)
        hh = math.sqrt((a * s) ** 2 + (b * c) ** 2)
    else:
        hw, hh = a * c + b * s, a * s + b * c
    return (cx, cy, 2 * hw, 2 * hh)


def _trajectory(rng, length, margin_x, margin_y, width, height, params, fast):
    lo = np.array([margin_x, margin_y])
    hi = np.array([width - margin_x, height - margin_y])
    if np.any(hi <= lo):
        raise ValueError("object too large for the frame")
    start = rng.uniform(lo, hi)
    if not fast:
        for _ in range(100):
            speed = rng.uniform(*params.speed)
            heading = rng.uniform(0, 2 * np.pi)
            vel = speed * np.array([math.cos(heading), math.sin(heading)])
            end = start + vel * (length - 1)
            if np.all(end >= lo) and np.all(end <= hi):
                return start + vel * np.arange(length)[:, None]
        return np.repeat(start[None], length, axis=0)
    pos = [start]
    heading = rng.uniform(0, 2 * np.pi)
    for _ in range(length - 1):
        heading += rng.uniform(-np.pi / 4, np.pi / 4)
        step = rng.uniform(*params.fast_speed) * np.array([math.cos(heading), math.sin(heading)])
        p = pos[-1] + step
        for k in range(2):
            if p[k] < lo[k] or p[k] > hi[k]:
                step[k] = -step[k]
                heading = math.atan2(step[1], step[0])
        p = np.clip(pos[-1] + step, lo, hi)
        pos.append(p)
    return np.array(pos)


def generate_sequence(seed, length=40, distortions=(), image_size=(64, 64), params=None):
    """Render a deterministic synthetic sequence.

    ``distortions`` is a subset of :data:`ATTRIBUTES`; with none, the object
    translates at constant velocity.  Raises ``ValueError`` if the object
    would leave the frame entirely.
    """
    if length < 2:
        raise ValueError("a sequence needs at least two frames")
    distortions = frozenset(distortions)
    unknown = distortions - set(ATTRIBUTES)
    if unknown:
        raise ValueError(f"unknown distortions {sorted(unknown)}")
    params = params or RenderParams()
    width, height = image_size
    rng = np.random.default_rng(seed)

    shape = int(rng.integers(2))
    tex = _texture(rng)
    base_lo, base_hi = params.base_size
    if "scale-change" in distortions:
        base_hi = min(base_hi, min(width, height) / (2.0 * params.scale_ramp))
        base_lo = min(base_lo, base_hi * 0.8)
    w0, h0 = rng.uniform(base_lo, base_hi, size=2)
    bg = _background(rng, width, height, params.n_clutter)

    t = np.linspace(0.0, 1.0, length)
    scale = 1 + (params.scale_ramp - 1) * t if "scale-change" in distortions else np.ones(length)
    spin = rng.choice([-1.0, 1.0]) * np.deg2rad(params.rotation_ramp)
    angle = spin * t if "rotation" in distortions else np.zeros(length)
    gain = 1 - (1 - params.gain_ramp) * t if "illumination" in distortions else np.ones(length)
    blur = params.max_blur * t if "blur" in distortions else np.zeros(length)

    reach = max(w0, h0) * scale.max() / 2.0
    if "rotation" in distortions:
        reach = math.hypot(w0, h0) * scale.max() / 2.0
        margin_x = margin_y = reach
    else:
        margin_x = w0 * scale.max() / 2.0
        margin_y = h0 * scale.max() / 2.0
    centers = _trajectory(rng, length, margin_x + 1, margin_y + 1, width, height,
                          params, "fast-motion" in distortions)

    occluder = None
    if "occlusion" in distortions:
        ow = rng.uniform(0.5, 0.8) * w0
        oh = 2.5 * h0
        mid = length // 2
        sweep = np.linspace(-1.5, 1.5, max(2, length // 2))
        occluder = (mid - len(sweep) // 2, sweep, ow, oh, _texture(rng))

    frames, gts = [], []
    for i in range(length):
        cx, cy = centers[i]
        w, h = w0 * scale[i], h0 * scale[i]
        canvas = bg.copy()
        _paint(canvas, tex, shape, cx, cy, w, h, angle[i])
        if occluder is not None:
            first, sweep, ow, oh, otex = occluder
            k = i - first
            if 0 <= k < len(sweep):
                _paint(canvas, otex, 1, cx + sweep[k] * w, cy, ow, oh, 0.0)
        if blur[i] > 0:
            canvas = ndimage.gaussian_filter(canvas, sigma=(blur[i], blur[i], 0))
        canvas = canvas * gain[i]
        frames.append(np.clip(np.rint(canvas), 0, 255).astype(np.uint8))
        gts.append(_shape_box(shape, cx, cy, w, h, angle[i]))

    gt = np.array(gts)
    if not np.all(intersects_image(gt, image_size)):
        raise ValueError(f"seed {seed}: object leaves the frame; regenerate with smaller motion")
    name = f"synth{seed:06d}"
    return Sequence(frames, gt, distortions, name)


# ---------------------------------------------------------------------------
# disk format (OTB-compatible)

def save_sequence(seq, directory):
    directory = Path(directory)
    (directory / "img").mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(seq.frames):
        mode = "L" if frame.ndim == 2 else "RGB"
        ext = "pgm" if mode == "L" else "ppm"
        Image.fromarray(frame, mode=mode).save(directory / "img" / f"{i + 1:04d}.{ext}")
    lines = [",".join(format(v, ".10g") for v in row) for row in center_to_xywh(seq.groundtruth)]
    (directory / "groundtruth_rect.txt").write_text("\n".join(lines) + "\n")
    if seq.attributes:
        (directory / "attributes.txt").write_text(",".join(sorted(seq.attributes)) + "\n")
    return directory


def read_groundtruth(path):
    rows = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if line:
            rows.append([float(v) for v in re.split(r"[,\s]+", line)[:4]])
    return xywh_to_center(np.array(rows).reshape(-1, 4))


_IMAGE_EXT = {".pgm", ".ppm", ".pnm", ".jpg", ".jpeg", ".png", ".bmp"}


def load_sequence(directory):
    directory = Path(directory)
    img_dir = directory / "img" if (directory / "img").is_dir() else directory
    files = sorted((p for p in img_dir.iterdir() if p.suffix.lower() in _IMAGE_EXT),
                   key=lambda p: int(re.sub(r"\D", "", p.stem) or 0))
    if not files:
        raise FileNotFoundError(f"no image frames under {img_dir}")
    frames = [np.asarray(Image.open(p)) for p in files]
    gt = read_groundtruth(directory / "groundtruth_rect.txt")
    attr_file = directory / "attributes.txt"
    attrs = frozenset()
    if attr_file.exists():
        attrs = frozenset(a.strip() for a in attr_file.read_text().split(",") if a.strip())
    n = min(len(frames), len(gt))
    return Sequence(frames[:n], gt[:n], attrs, directory.name)


# ---------------------------------------------------------------------------
# pair sampling

@dataclass(frozen=True)
class PairSamplerConfig:
    rho_plus: float = 0.7
    rho_minus: float = 0.5
    pairs_per_frame_pair: int = 128
    positive_fraction: float = 0.25
    min_side: float = 4.0
    max_rounds: int = 40

    def __post_init__(self):
        if not 0 <= self.rho_minus < self.rho_plus <= 1:
            raise ValueError("need 0 <= rho_minus < rho_plus <= 1")
        if self.pairs_per_frame_pair < 1:
            raise ValueError("pairs_per_frame_pair must be >= 1")
        if not 0 <= self.positive_fraction <= 1:
            raise ValueError("positive_fraction must lie in [0, 1]")


@dataclass(frozen=True)
class TrainingPair:
    query_frame: int
    query_box: tuple
    search_frame: int
    search_box: tuple
    label: int


@dataclass
class PairSet:
    """All box pairs drawn from one (query frame, search frame) pair."""

    query_index: int
    search_index: int
    query_image: np.ndarray
    search_image: np.ndarray
    query_box: np.ndarray
    search_boxes: np.ndarray
    labels: np.ndarray
    overlaps: np.ndarray
    incomplete: bool = False

    def __len__(self):
        return len(self.labels)

    def pairs(self):
        q = tuple(self.query_box)
        return [TrainingPair(self.query_index, q, self.search_index, tuple(b), int(y))
                for b, y in zip(self.search_boxes, self.labels)]


def _draw(rng, gt, image_size, n, center_jitter, log_scale, min_side, uniform=False):
    width, height = image_size
    if uniform:
        centers = rng.uniform([0, 0], [width, height], size=(n, 2))
    else:
        centers = gt[:2] + rng.uniform(-center_jitter, center_jitter, size=(n, 2)) * gt[2:]
    sizes = gt[2:] * np.exp(rng.uniform(log_scale[0], log_scale[1], size=(n, 2)))
    boxes = clip_to_image(np.hstack([centers, sizes]), image_size)
    return boxes[(boxes[:, 2] >= min_side) & (boxes[:, 3] >= min_side)]


def _collect(want, draw, keep, rounds):
    got = []
    count = 0
    for _ in range(rounds if want > 0 else 0):
        cand = draw()
        cand = cand[keep(cand)]
        got.append(cand)
        count += len(cand)
        if count >= want:
            break
    out = np.concatenate(got) if got else np.zeros((0, 4))
    return out[:want]


def sample_pairs(sequence, query_index, search_index, config=PairSamplerConfig(), seed=0):
    """Draw labelled box pairs for one frame pair.

    The query element is the ground-truth box of ``query_index``.  Search
    boxes are jittered around the search frame's ground truth (positives
    and near negatives) or drawn uniformly (background negatives).  Every
    label is re-derived from the clipped box's IoU, and boxes in the band
    ``(rho_minus, rho_plus)`` are discarded.
    """
    rng = np.random.default_rng(seed)
    size = sequence.image_size
    gt = sequence.groundtruth[search_index]
    n_pos = int(round(config.pairs_per_frame_pair * config.positive_fraction))
    n_neg = config.pairs_per_frame_pair - n_pos
    n_near = n_neg // 2
    log_pos = (math.log(0.85), math.log(1.18))
    batch = max(64, 4 * n_pos)

    def is_pos(b):
        return iou(b, gt) >= config.rho_plus

    def is_neg(b):
        return iou(b, gt) <= config.rho_minus

    pos = _collect(n_pos, lambda: _draw(rng, gt, size, batch, 0.15, log_pos, config.min_side), is_pos,
                   config.max_rounds)
    near = _collect(n_near, lambda: _draw(rng, gt, size, batch, 0.6, (math.log(0.6), math.log(1.6)),
                                               config.min_side), is_neg, config.max_rounds)
    far = _collect(n_neg - len(near),
                   lambda: _draw(rng, gt, size, batch, 0, (math.log(0.6), math.log(1.6)),
                                 config.min_side, uniform=True), is_neg, config.max_rounds)
    boxes = np.concatenate([pos, near, far]).reshape(-1, 4)
    overlaps = iou(boxes, gt) if len(boxes) else np.zeros(0)
    labels = (overlaps >= config.rho_plus).astype(np.int64)
    incomplete = len(boxes) < config.pairs_per_frame_pair or len(pos) < n_pos
    if incomplete:
        warnings.warn(f"{sequence.name}: only {len(pos)}/{n_pos} positives and "
                      f"{len(boxes) - len(pos)}/{n_neg} negatives for frames "
                      f"({query_index}, {search_index})", IncompleteSampleWarning)
    order = rng.permutation(len(boxes))
    return PairSet(query_index, search_index, sequence.frames[query_index], sequence.frames[search_index],
                   sequence.groundtruth[query_index].copy(), boxes[order], labels[order], overlaps[order],
                   incomplete)


def draw_frame_pairs(length, count, rng):
    """Uniformly drawn ordered frame pairs ``(a, b)`` with ``a != b``."""
    a = rng.integers(0, length, size=count)
    b = (a + rng.integers(1, length, size=count)) % length
    return list(zip(a.tolist(), b.tolist()))


def build_pair_dataset(sequences, frame_pairs_per_sequence, config=PairSamplerConfig(), seed=0):
    rng = np.random.default_rng(seed)
    out = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", IncompleteSampleWarning)
        for seq in sequences:
            for a, b in draw_frame_pairs(len(seq), frame_pairs_per_sequence, rng):
                out.append(sample_pairs(seq, a, b, config, seed=int(rng.integers(2 ** 31))))
    return out


def random_distortions(rng, max_count=1):
    """Zero or more distinct attributes, for mixed training suites."""
    k = int(rng.integers(0, max_count + 1))
    return frozenset(rng.choice(ATTRIBUTES, size=k, replace=False).tolist()) if k else frozenset()


def generate_suite(count, seed_offset=0, length=40, image_size=(64, 64), max_distortions=1, params=None):
    """``count`` sequences from consecutive seeds starting at ``seed_offset``."""
    seqs = []
    for i in range(count):
        seed = seed_offset + i
        rng = np.random.default_rng([seed, 7])
        seqs.append(generate_sequence(seed, length, random_distortions(rng, max_distortions),
                                      image_size, params))
    return seqs


# ---------------------------------------------------------------------------
# multi-shot video for re-identification

@dataclass
class ShotVideo:
    """Frames cut into shots; the target is visible only where ``present`` is set.

    ``boxes`` holds the target box for present frames and NaN elsewhere.
    """

    frames: list
    boxes: np.ndarray
    present: np.ndarray
    shot_of_frame: np.ndarray

    @property
    def query_box(self):
        return self.boxes[0]


def generate_shot_video(seed, n_shots=6, shot_length=12, image_size=(64, 64), params=None):
    """Shots alternate between showing the target and showing other objects.

    Every shot has its own background and camera position, so consecutive
    shots share nothing but (in even shots) the target's appearance.  Odd
    shots show a different textured object of similar size instead.
    """
    params = params or RenderParams()
    width, height = image_size
    rng = np.random.default_rng(seed)
    shape = int(rng.integers(2))
    tex = _texture(rng)
    w0, h0 = rng.uniform(*params.base_size, size=2)
    frames, boxes, present, shots = [], [], [], []
    for k in range(n_shots):
        visible = k % 2 == 0
        bg = _background(rng, width, height, params.n_clutter)
        if visible:
            obj_shape, obj_tex = shape, tex
            s = 1.0 if k == 0 else rng.uniform(0.9, 1.1)
            w, h = w0 * s, h0 * s
        else:
            obj_shape, obj_tex = int(rng.integers(2)), _texture(rng)
            w, h = rng.uniform(*params.base_size, size=2)
        centers = _trajectory(rng, shot_length, w / 2 + 1, h / 2 + 1, width, height, params, False)
        for cx, cy in centers:
            canvas = _paint(bg.copy(), obj_tex, obj_shape, cx, cy, w, h, 0.0)
            frames.append(np.clip(np.rint(canvas), 0, 255).astype(np.uint8))
            boxes.append(_shape_box(obj_shape, cx, cy, w, h, 0.0) if visible else (np.nan,) * 4)
            present.append(visible)
            shots.append(k)
    return ShotVideo(frames, np.array(boxes), np.array(present), np.array(shots))
