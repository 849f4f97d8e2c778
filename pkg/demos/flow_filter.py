"""How the optical-flow filter prunes candidates in SINT+.

    python3 demos/flow_filter.py

The previous box's pixels are pushed through the estimated flow; any
candidate that captures fewer than a quarter of them is dropped before
matching.
"""
import numpy as np

from sint.datagen import generate_sequence
from sint.flow import estimate_flow
from sint.tracker import SamplerConfig, flow_filter, flow_retention, sample_candidates

seq = generate_sequence(31, length=6, distortions=("fast-motion",))
a, b = seq.frames[2], seq.frames[3]
prev, truth = seq.groundtruth[2], seq.groundtruth[3]
print(f"target moved by {np.round(truth[:2] - prev[:2], 2)} px")

flow = estimate_flow(a, b)
x0, y0 = int(prev[0] - prev[2] / 2), int(prev[1] - prev[3] / 2)
inside = flow[max(y0, 0):int(y0 + prev[3]), max(x0, 0):int(x0 + prev[2])]
print(f"median flow inside the previous box: {np.median(inside.reshape(-1, 2), axis=0)}")

# the search radius is the longer side of the box, so many candidates sit on background
cands = sample_candidates(prev, seq.image_size, SamplerConfig())
kept = flow_filter(prev, flow, cands, 0.25)
print(f"{len(cands)} candidates, {len(kept)} consistent with the flow")
print(f"retention of the true box: {flow_retention(prev, flow, truth[None])[0]:.2f}")

# a uniform 10 px shift: the shifted box keeps everything, the old one half
uniform = np.zeros((64, 64, 2))
uniform[..., 0] = 10
box = np.array([30.0, 30.0, 20.0, 20.0])
print("uniform shift retention (moved box, old box):",
      flow_retention(box, uniform, np.stack([box + [10, 0, 0, 0], box])))
