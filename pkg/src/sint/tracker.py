"""Online tracking by matching against the first frame.

Every frame: sample candidate boxes on circles around the previous
prediction, score them against the first-frame target feature, keep the
best, and optionally nudge it with per-video ridge regressors fitted on the
first frame.  Nothing learned is ever updated after frame 0.
"""
import math
import time
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .boxes import as_boxes, clip_to_image, iou, to_corners
from .flow import FlowConfig, estimate_flow
from .siamese import extract_features, match

SQRT2 = math.sqrt(2.0)
DEFAULT_SCALES = (SQRT2 / 2, 1.0, SQRT2)
MIN_SIDE = 4.0


class RefinementWarning(UserWarning):
    pass


@dataclass
class SamplerConfig:
    radial_divisions: int = 10
    angular_divisions: int = 10
    scales: tuple = DEFAULT_SCALES
    radius: float = None
    adaptive: bool = False
    adaptive_coefficient: float = 30.0

    def __post_init__(self):
        self.scales = tuple(float(s) for s in self.scales)
        if self.radial_divisions < 1 or self.angular_divisions < 1:
            raise ValueError("radial and angular divisions must be >= 1")
        if not self.scales or min(self.scales) <= 0:
            raise ValueError("scales must be positive")

    def search_radius(self, init_box, image_width):
        """Sampling range: explicit, resolution-adaptive, or the initial box's longer side."""
        if self.adaptive:
            return self.adaptive_coefficient / 512.0 * image_width
        if self.radius is not None:
            return float(self.radius)
        return float(max(init_box[2], init_box[3]))


def candidate_count(config):
    return (config.radial_divisions * config.angular_divisions + 1) * len(config.scales)


def sample_candidates(prev, image_size, config=SamplerConfig(), radius=None, clip=True):
    """Radius-sampled candidate boxes around ``prev``.

    Centres sit at ``radius * k / R`` (k = 1..R) and angles ``2 pi j / A``,
    plus the unmoved centre; each centre carries one box per scale of
    ``prev``'s size.  With ``clip`` the boxes are cut to the image and any
    side shorter than 4 px drops the box.
    """
    prev = as_boxes(prev)
    if radius is None:
        radius = config.radius if config.radius is not None else max(prev[2], prev[3])
    R, A = config.radial_divisions, config.angular_divisions
    k = np.arange(1, R + 1)
    ang = 2 * np.pi * np.arange(A) / A
    rad = radius * k / R
    offsets = np.concatenate([[[0.0, 0.0]],
                              np.stack([np.outer(rad, np.cos(ang)).ravel(),
                                        np.outer(rad, np.sin(ang)).ravel()], axis=1)])
    scales = np.asarray(config.scales)
    centers = np.repeat(prev[:2] + offsets, len(scales), axis=0)
    sizes = np.tile(prev[2:] * scales[:, None], (len(offsets), 1))
    boxes = np.hstack([centers, sizes])
    if clip:
        boxes = clip_to_image(boxes, image_size)
        boxes = boxes[(boxes[:, 2] >= MIN_SIDE) & (boxes[:, 3] >= MIN_SIDE)]
    return boxes


# ---------------------------------------------------------------------------
# box refinement

def box_targets(proposals, gt):
    p, g = as_boxes(proposals), as_boxes(gt)
    return np.stack([(g[..., 0] - p[..., 0]) / p[..., 2], (g[..., 1] - p[..., 1]) / p[..., 3],
                     np.log(g[..., 2] / p[..., 2]), np.log(g[..., 3] / p[..., 3])], axis=-1)


def apply_targets(proposals, t):
    p, t = as_boxes(proposals), np.asarray(t, dtype=np.float64)
    return np.stack([p[..., 0] + p[..., 2] * t[..., 0], p[..., 1] + p[..., 3] * t[..., 1],
                     p[..., 2] * np.exp(t[..., 2]), p[..., 3] * np.exp(t[..., 3])], axis=-1)


def ridge_fit(x, t, lam):
    """Ridge regression with an unpenalised intercept; returns ``(W, b)``.

    Solves ``(Xc^T Xc + lam I) W = Xc^T Tc`` on centred data.
    """
    if lam <= 0:
        raise ValueError("ridge lambda must be positive")
    x = np.asarray(x, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    xm, tm = x.mean(axis=0), t.mean(axis=0)
    xc, tc = x - xm, t - tm
    gram = xc.T @ xc + lam * np.eye(x.shape[1])
    w = np.linalg.solve(gram, xc.T @ tc)
    return w, tm - xm @ w


@dataclass(frozen=True)
class BoxRegressors:
    """Four ridge models (x, y, log w, log h) over the matching feature."""

    weights: np.ndarray
    bias: np.ndarray
    ridge_lambda: float

    def predict(self, features):
        return np.asarray(features) @ self.weights + self.bias


def jitter_boxes(target, n, rng, min_iou=0.6, image_size=None, max_shift=0.3, max_log_scale=0.35):
    """``n`` boxes around ``target`` with IoU >= ``min_iou`` (rejection sampled)."""
    target = as_boxes(target)
    out, have = [], 0
    for _ in range(100):
        m = 4 * n
        c = target[:2] + rng.uniform(-max_shift, max_shift, size=(m, 2)) * target[2:]
        s = target[2:] * np.exp(rng.uniform(-max_log_scale, max_log_scale, size=(m, 2)))
        boxes = np.hstack([c, s])
        if image_size is not None:
            boxes = clip_to_image(boxes, image_size)
        boxes = boxes[(boxes[:, 2] >= MIN_SIDE) & (boxes[:, 3] >= MIN_SIDE)]
        boxes = boxes[iou(boxes, target) >= min_iou]
        out.append(boxes)
        have += len(boxes)
        if have >= n:
            break
    return np.concatenate(out)[:n]


def fit_regressors(frame, target, model, ridge_lambda=1.0, n_samples=256, min_iou=0.6, seed=0):
    """Fit the refinement regressors on jittered copies of the first-frame target."""
    if ridge_lambda <= 0:
        raise ValueError("ridge lambda must be positive (lambda = 0 is rejected)")
    rng = np.random.default_rng(seed)
    h, w = frame.shape[:2]
    target = as_boxes(target)
    samples = np.vstack([target[None], jitter_boxes(target, n_samples - 1, rng, min_iou, (w, h))])
    feats = extract_features(model, frame, samples).values
    weights, bias = ridge_fit(feats, box_targets(samples, target), ridge_lambda)
    return BoxRegressors(weights, bias, ridge_lambda)


def refine_box(box, feature, regressors, image_size=None):
    """Apply the regressors to ``box``; returns ``(refined, ok)``.

    A degenerate prediction returns the input box with ``ok=False``.
    """
    box = as_boxes(box)
    values = feature.values if hasattr(feature, "values") else feature
    out = apply_targets(box, regressors.predict(values))
    if image_size is not None:
        out = clip_to_image(out, image_size)
    if not np.all(np.isfinite(out)) or out[2] < MIN_SIDE or out[3] < MIN_SIDE:
        warnings.warn(f"refinement of {tuple(box)} degenerated to {tuple(out)}", RefinementWarning)
        return box.copy(), False
    return out, True


# ---------------------------------------------------------------------------
# optical-flow filter

def flow_retention(prev, flow, candidates):
    """Fraction of ``prev``'s pixels, moved by ``flow``, inside each candidate."""
    h, w = flow.shape[:2]
    x0, y0, x1, y1 = to_corners(prev)
    cols = np.arange(max(0, math.floor(x0)), min(w, math.ceil(x1)))
    rows = np.arange(max(0, math.floor(y0)), min(h, math.ceil(y1)))
    cx, cy = cols + 0.5, rows + 0.5
    cols, rows = cols[(cx >= x0) & (cx < x1)], rows[(cy >= y0) & (cy < y1)]
    if len(cols) == 0 or len(rows) == 0:
        return np.ones(len(candidates))
    yy, xx = np.meshgrid(rows, cols, indexing="ij")
    px = (xx + 0.5 + flow[yy, xx, 0]).ravel()
    py = (yy + 0.5 + flow[yy, xx, 1]).ravel()
    c = to_corners(candidates).reshape(-1, 4)
    inside = ((px[None] >= c[:, 0:1]) & (px[None] < c[:, 2:3]) &
              (py[None] >= c[:, 1:2]) & (py[None] < c[:, 3:4]))
    return inside.mean(axis=1)


def flow_filter(prev, flow, candidates, retention_threshold=0.25):
    """Candidates holding at least ``retention_threshold`` of the flowed pixels.

    An empty flow field disables the filter.
    """
    candidates = as_boxes(candidates).reshape(-1, 4)
    if flow is None or np.size(flow) == 0:
        return candidates
    keep = flow_retention(prev, flow, candidates) >= retention_threshold
    return candidates[keep]


# ---------------------------------------------------------------------------
# tracking

@dataclass
class TrackerConfig:
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    sint_plus: bool = False
    flow_threshold: float = 0.25
    refine: bool = True
    refine_gate: float = 0.3
    ridge_lambda: float = 1.0
    regressor_samples: int = 256
    regressor_min_iou: float = 0.6
    flow: FlowConfig = field(default_factory=FlowConfig)
    seed: int = 0


@dataclass
class FrameResult:
    chosen: np.ndarray
    refined: np.ndarray
    score: float
    n_candidates: int
    n_flow_kept: int
    lost: bool = False


@dataclass
class TrackResult:
    frames: list = field(default_factory=list)
    seconds: float = 0.0

    def __len__(self):
        return len(self.frames)

    @property
    def boxes(self):
        return np.array([f.refined for f in self.frames])

    @property
    def chosen(self):
        return np.array([f.chosen for f in self.frames])

    @property
    def scores(self):
        return np.array([f.score for f in self.frames])

    @property
    def fps(self):
        return len(self.frames) / self.seconds if self.seconds > 0 else float("inf")


def select_best(scores, candidates, prev):
    """Argmax of ``scores``; exact ties go to the candidate nearest ``prev``, then the lowest index."""
    scores = np.asarray(scores)
    top = np.flatnonzero(scores == scores.max())
    if len(top) == 1:
        return int(top[0])
    d = np.hypot(candidates[top, 0] - prev[0], candidates[top, 1] - prev[1])
    return int(top[np.argmin(d)])


def track_frame(model, query_feature, frame, prev, config, radius, regressors=None, flow=None):
    """Pick and refine the best-matching candidate in ``frame``."""
    h, w = frame.shape[:2]
    prev = as_boxes(prev)
    r, lost = radius, False
    cands = sample_candidates(prev, (w, h), config.sampler, r)
    for _ in range(4):
        if len(cands):
            break
        lost = True
        r *= 2
        cands = sample_candidates(prev, (w, h), config.sampler, r)
    if not len(cands):
        return FrameResult(prev.copy(), prev.copy(), float("nan"), 0, 0, True)
    n_all = len(cands)
    if flow is not None:
        kept = flow_filter(prev, flow, cands, config.flow_threshold)
        if len(kept):
            cands = kept
    feats = extract_features(model, frame, cands)
    scores = match(feats, query_feature)
    best = select_best(scores, cands, prev)
    chosen = cands[best]
    refined = chosen.copy()
    n_taps = query_feature.n_blocks
    if (config.refine and regressors is not None
            and scores[best] > config.refine_gate * n_taps):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RefinementWarning)
            refined, _ = refine_box(chosen, feats.values[best], regressors, (w, h))
    return FrameResult(chosen, refined, float(scores[best]), n_all, len(cands), lost)


class SINTTracker:
    """Tracker bound to one model and configuration; reusable across videos."""

    def __init__(self, model, config=None):
        self.model = model
        config = config or TrackerConfig()
        if config.sint_plus and not config.sampler.adaptive:
            config = replace(config, sampler=replace(config.sampler, adaptive=True))
        self.config = config

    def init(self, frame, box):
        box = as_boxes(box).astype(np.float64)
        h, w = frame.shape[:2]
        self.query = extract_features(self.model, frame, box[None])[0]
        self.radius = self.config.sampler.search_radius(box, w)
        self.regressors = None
        if self.config.refine:
            self.regressors = fit_regressors(frame, box, self.model, self.config.ridge_lambda,
                                             self.config.regressor_samples, self.config.regressor_min_iou,
                                             self.config.seed)
        self.prev = box
        self.prev_frame = frame
        return FrameResult(box.copy(), box.copy(), float(match(self.query, self.query)), 1, 1)

    def update(self, frame):
        flow = None
        if self.config.sint_plus:
            flow = estimate_flow(self.prev_frame, frame, self.config.flow)
        res = track_frame(self.model, self.query, frame, self.prev, self.config, self.radius,
                          self.regressors, flow)
        self.prev = res.refined
        self.prev_frame = frame
        return res

    def track(self, frames, init_box):
        start = time.perf_counter()
        result = TrackResult([self.init(frames[0], init_box)])
        for frame in frames[1:]:
            result.frames.append(self.update(frame))
        result.seconds = time.perf_counter() - start
        return result

    def __call__(self, frames, init_box):
        return self.track(frames, init_box).boxes


def write_result_log(path, result, start_index=0):
    """``frame_index,x,y,w,h,score`` per frame (refined box, top-left corner)."""
    lines = []
    for i, fr in enumerate(result.frames):
        cx, cy, bw, bh = fr.refined
        vals = (cx - bw / 2.0, cy - bh / 2.0, bw, bh, fr.score)
        lines.append(f"{start_index + i}," + ",".join(format(float(v), ".6f") for v in vals))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_result_log(path):
    """Returns ``(frame_indices, center_boxes, scores)``."""
    rows = np.loadtxt(path, delimiter=",", ndmin=2)
    idx = rows[:, 0].astype(int)
    xywh = rows[:, 1:5]
    boxes = np.stack([xywh[:, 0] + xywh[:, 2] / 2, xywh[:, 1] + xywh[:, 3] / 2, xywh[:, 2], xywh[:, 3]], axis=1)
    scores = rows[:, 5] if rows.shape[1] > 5 else np.full(len(rows), np.nan)
    return idx, boxes, scores


# ---------------------------------------------------------------------------
# re-identification

@dataclass
class WindowConfig:
    scales: tuple = DEFAULT_SCALES
    stride_fraction: float = 0.25


def sliding_windows(image_size, base_box, config=WindowConfig()):
    width, height = image_size
    out = []
    for s in config.scales:
        ww, wh = base_box[2] * s, base_box[3] * s
        if ww > width or wh > height:
            continue
        sx, sy = config.stride_fraction * ww, config.stride_fraction * wh
        xs = np.arange(0, width - ww + 1e-9, sx)
        ys = np.arange(0, height - wh + 1e-9, sy)
        gx, gy = np.meshgrid(xs + ww / 2, ys + wh / 2)
        out.append(np.stack([gx.ravel(), gy.ravel(), np.full(gx.size, ww), np.full(gx.size, wh)], axis=1))
    if not out:
        return np.array([[width / 2.0, height / 2.0, float(width), float(height)]])
    return np.concatenate(out)


def reid_scan(model, query_feature, frame, base_box, config=WindowConfig()):
    """Best-matching sliding window over the whole frame: ``(box, score)``."""
    h, w = frame.shape[:2]
    windows = sliding_windows((w, h), as_boxes(base_box), config)
    scores = match(extract_features(model, frame, windows), query_feature)
    best = int(np.argmax(scores))
    return windows[best], float(scores[best])


def presence_accuracy(scores, present):
    """Best per-frame presence accuracy over all score thresholds: ``(accuracy, threshold)``."""
    scores = np.asarray(scores, dtype=np.float64)
    present = np.asarray(present, dtype=bool)
    cuts = np.unique(scores)
    cuts = np.concatenate([[cuts[0] - 1.0], (cuts[:-1] + cuts[1:]) / 2, [cuts[-1] + 1.0]])
    acc = np.array([np.mean((scores > c) == present) for c in cuts])
    best = int(np.argmax(acc))
    return float(acc[best]), float(cuts[best])
