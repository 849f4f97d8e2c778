"""OTB-protocol metrics: success and precision plots, robustness runs, attribute breakdowns.

Success counts a frame when IoU is strictly above the threshold; precision
counts it when the centre error is at most the threshold (in pixels).
"""
import csv
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .boxes import as_boxes, center_distance, iou

SUCCESS_THRESHOLDS = np.linspace(0.0, 1.0, 21)
PRECISION_THRESHOLDS = np.arange(0, 51, dtype=np.float64)
PRECISION_REFERENCE = 20.0


@dataclass
class EvalCurve:
    kind: str
    thresholds: np.ndarray
    values: np.ndarray
    summary: float

    def value_at(self, threshold):
        idx = np.flatnonzero(np.isclose(self.thresholds, threshold))
        if len(idx) == 0:
            raise KeyError(f"threshold {threshold} not on the curve")
        return float(self.values[idx[0]])

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["threshold", "value"])
            for t, v in zip(self.thresholds, self.values):
                writer.writerow([format(t, ".6g"), repr(float(v))])


def _check(pred, gt):
    pred, gt = as_boxes(pred).reshape(-1, 4), as_boxes(gt).reshape(-1, 4)
    if len(pred) != len(gt):
        raise ValueError(f"{len(pred)} predictions for {len(gt)} ground-truth boxes")
    return pred, gt


def overlaps(pred, gt):
    pred, gt = _check(pred, gt)
    return np.atleast_1d(iou(pred, gt))


def success_curve(pred, gt, thresholds=SUCCESS_THRESHOLDS):
    """Fraction of frames with IoU > threshold; summary is the mean over thresholds (AUC)."""
    ov = overlaps(pred, gt)
    thresholds = np.asarray(thresholds, dtype=np.float64)
    values = (ov[None, :] > thresholds[:, None]).mean(axis=1)
    return EvalCurve("success", thresholds, values, float(values.mean()))


def precision_curve(pred, gt, thresholds=PRECISION_THRESHOLDS, reference=PRECISION_REFERENCE):
    """Fraction of frames with centre error <= threshold; summary is the value at ``reference``."""
    pred, gt = _check(pred, gt)
    dist = np.atleast_1d(center_distance(pred, gt))
    thresholds = np.asarray(thresholds, dtype=np.float64)
    values = (dist[None, :] <= thresholds[:, None]).mean(axis=1)
    return EvalCurve("precision", thresholds, values, float(np.mean(dist <= reference)))


def success_rate(pred, gt, threshold):
    return float(np.mean(overlaps(pred, gt) > threshold))


# ---------------------------------------------------------------------------
# robustness protocols

@dataclass
class Variant:
    name: str
    start: int
    init_box: np.ndarray
    success: EvalCurve = None
    precision: EvalCurve = None


@dataclass
class RobustnessRun:
    mode: str
    variants: list = field(default_factory=list)
    notes: list = field(default_factory=list)

    @property
    def auc(self):
        return float(np.mean([v.success.summary for v in self.variants]))

    @property
    def prec20(self):
        return float(np.mean([v.precision.summary for v in self.variants]))


TRE_SEGMENTS = 20
MIN_SEGMENT = 10
SRE_SHIFT = 0.1
SRE_SCALES = (0.8, 0.9, 1.1, 1.2)


def tre_starts(n_frames, segments=TRE_SEGMENTS):
    return sorted({(i * n_frames) // segments for i in range(segments)})


def sre_boxes(box):
    """Eight +-10% shifts and four rescalings of ``box`` (12 variants)."""
    cx, cy, w, h = as_boxes(box)
    out = []
    for dx, dy, name in [(-1, 0, "left"), (1, 0, "right"), (0, -1, "up"), (0, 1, "down"),
                         (-1, -1, "up-left"), (1, -1, "up-right"), (-1, 1, "down-left"), (1, 1, "down-right")]:
        out.append((f"shift-{name}", np.array([cx + dx * SRE_SHIFT * w, cy + dy * SRE_SHIFT * h, w, h])))
    for s in SRE_SCALES:
        out.append((f"scale-{s:g}", np.array([cx, cy, w * s, h * s])))
    return out


def run_robustness(track_fn, frames, groundtruth, mode="ope"):
    """Run ``track_fn(frames, init_box) -> boxes`` under OPE, TRE or SRE.

    TRE restarts at 20 evenly spaced frames from that frame's ground truth
    (segments shorter than 10 frames are skipped with a note); SRE starts
    at frame 0 from 12 perturbed boxes.  Every variant is scored against
    the ground truth of the frames it tracked.
    """
    mode = mode.lower()
    gt = as_boxes(groundtruth).reshape(-1, 4)
    n = len(frames)
    if len(gt) != n:
        raise ValueError(f"{n} frames but {len(gt)} ground-truth boxes")
    if mode == "ope":
        plan = [("ope", 0, gt[0])]
    elif mode == "tre":
        plan = [(f"start-{s}", s, gt[s]) for s in tre_starts(n)]
    elif mode == "sre":
        plan = [(name, 0, box) for name, box in sre_boxes(gt[0])]
    else:
        raise ValueError(f"unknown robustness mode {mode!r}")
    run = RobustnessRun(mode)
    for name, start, box in plan:
        if n - start < MIN_SEGMENT and mode == "tre":
            run.notes.append(f"{name}: segment of {n - start} frames skipped")
            continue
        pred = np.asarray(track_fn(frames[start:], box)).reshape(-1, 4)
        v = Variant(name, start, np.asarray(box, dtype=np.float64))
        v.success = success_curve(pred, gt[start:])
        v.precision = precision_curve(pred, gt[start:])
        run.variants.append(v)
    return run


def oracle_tracker(groundtruth):
    """A tracker that returns the ground truth of whatever suffix it is asked to track."""
    gt = as_boxes(groundtruth).reshape(-1, 4)

    def track(frames, init_box):
        return gt[len(gt) - len(frames):]

    return track


# ---------------------------------------------------------------------------
# attribute breakdown

def attribute_report(aucs, attributes):
    """Mean AUC and count per attribute tag.

    ``aucs`` maps sequence name to AUC and ``attributes`` maps sequence name
    to its tags.  Tags without sequences are left out.
    """
    groups = defaultdict(list)
    for name, auc in aucs.items():
        for tag in attributes.get(name, ()):
            groups[tag].append(auc)
    return {tag: (float(np.mean(v)), len(v)) for tag, v in sorted(groups.items()) if v}


# ---------------------------------------------------------------------------
# output files

def write_summary(path, rows):
    """``sequence,mode,auc,prec20`` rows."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sequence", "mode", "auc", "prec20"])
        for seq, mode, auc, prec in rows:
            writer.writerow([seq, mode, repr(float(auc)), repr(float(prec))])


def write_attribute_report(path, report):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["attribute", "mean_auc", "count"])
        for tag, (mean, count) in report.items():
            writer.writerow([tag, repr(float(mean)), count])


def plot_curves(path, curves, title=""):
    """Write success/precision curves to a vector image (SVG or PDF by suffix).

    ``curves`` maps a legend label to an :class:`EvalCurve`.
    """
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 4))
    kind = None
    for label, curve in curves.items():
        kind = curve.kind
        tag = "AUC" if curve.kind == "success" else "Prec@20"
        ax.plot(curve.thresholds, curve.values, label=f"{label} [{tag} {curve.summary:.3f}]")
    if kind == "success":
        ax.set_xlabel("overlap threshold")
        ax.set_ylabel("success rate")
    else:
        ax.set_xlabel("location error threshold (px)")
        ax.set_ylabel("precision")
    ax.set_ylim(0, 1.02)
    ax.set_title(title)
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, metadata={"Date": None} if str(path).endswith(".svg") else None)
    plt.close(fig)
