"""Coarse-to-fine block-matching optical flow.

Matching compares image *gradients* rather than intensities, so a global
brightness offset does not move the field.  Displacements are integer at
every pyramid level; candidates are scanned in order of increasing length so
that ties (e.g. flat regions, identical frames) resolve to the shortest
displacement, which makes the flow of a frame onto itself exactly zero.
"""
import struct
from dataclasses import dataclass

import numpy as np
from scipy import ndimage


@dataclass(frozen=True)
class FlowConfig:
    block_size: int = 8
    search_radius: int = 8
    levels: int = 3


def _gray(frame):
    img = np.asarray(frame, dtype=np.float64)
    return img.mean(axis=-1) if img.ndim == 3 else img


def _downsample(img):
    h, w = img.shape[0] // 2 * 2, img.shape[1] // 2 * 2
    img = img[:h, :w]
    return 0.25 * (img[0::2, 0::2] + img[1::2, 0::2] + img[0::2, 1::2] + img[1::2, 1::2])


def _gradients(img):
    return np.stack([ndimage.sobel(img, axis=1, mode="nearest"),
                     ndimage.sobel(img, axis=0, mode="nearest")])


def _offsets(radius):
    r = np.arange(-radius, radius + 1)
    dy, dx = np.meshgrid(r, r, indexing="ij")
    d = np.stack([dx.ravel(), dy.ravel()], axis=1)
    order = np.lexsort((d[:, 0], d[:, 1], np.abs(d).sum(axis=1), (d ** 2).sum(axis=1)))
    return d[order]


def _match_level(ga, gb, init, block, radius):
    _, h, w = ga.shape
    ys, xs = np.mgrid[0:h, 0:w]
    best_cost = np.full((h, w), np.inf)
    best = np.zeros((h, w, 2), dtype=np.int64)
    for dx, dy in _offsets(radius):
        tx = np.clip(xs + init[..., 0] + dx, 0, w - 1)
        ty = np.clip(ys + init[..., 1] + dy, 0, h - 1)
        diff = ga - gb[:, ty, tx]
        cost = ndimage.uniform_filter(np.einsum("chw,chw->hw", diff, diff), size=block, mode="nearest")
        better = cost < best_cost
        best_cost = np.where(better, cost, best_cost)
        best[better] = (dx, dy)
    return init + best, best_cost


def estimate_flow(frame_a, frame_b, config=FlowConfig()):
    """Per-pixel ``(dx, dy)`` moving ``frame_a`` onto ``frame_b``; shape ``(H, W, 2)``."""
    a, b = _gray(frame_a), _gray(frame_b)
    if a.shape != b.shape:
        raise ValueError(f"frames differ in size: {a.shape} vs {b.shape}")
    pyr_a, pyr_b = [a], [b]
    for _ in range(config.levels - 1):
        if min(pyr_a[-1].shape) < 2 * config.block_size:
            break
        pyr_a.append(_downsample(pyr_a[-1]))
        pyr_b.append(_downsample(pyr_b[-1]))
    flow = np.zeros(pyr_a[-1].shape + (2,), dtype=np.int64)
    for level in range(len(pyr_a) - 1, -1, -1):
        la, lb = pyr_a[level], pyr_b[level]
        if flow.shape[:2] != la.shape:
            up = np.repeat(np.repeat(flow, 2, axis=0), 2, axis=1) * 2
            pad = ((0, la.shape[0] - up.shape[0]), (0, la.shape[1] - up.shape[1]), (0, 0))
            flow = np.pad(up, pad, mode="edge")
        ga, gb = _gradients(la), _gradients(lb)
        local, local_cost = _match_level(ga, gb, np.zeros_like(flow), config.block_size, config.search_radius)
        if level < len(pyr_a) - 1:
            guided, guided_cost = _match_level(ga, gb, flow, config.block_size, config.search_radius)
            flow = np.where((guided_cost < local_cost)[..., None], guided, local)
        else:
            flow = local
        if level > 0:
            flow = np.stack([ndimage.median_filter(flow[..., k], size=3, mode="nearest") for k in range(2)], axis=-1)
    return flow.astype(np.float64)


# Middlebury .flo layout: float32 tag 202021.25, int32 width, int32 height,
# then interleaved (dx, dy) float32 rows.
_FLO_TAG = 202021.25


def write_flo(path, flow):
    h, w, _ = flow.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack("<fii", _FLO_TAG, w, h))
        fh.write(np.asarray(flow, dtype="<f4").tobytes())


def read_flo(path):
    with open(path, "rb") as fh:
        tag, w, h = struct.unpack("<fii", fh.read(12))
        if tag != _FLO_TAG:
            raise ValueError(f"{path}: not a .flo file")
        return np.frombuffer(fh.read(), dtype="<f4").reshape(h, w, 2).astype(np.float64)
