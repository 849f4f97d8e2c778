"""Train a small matching network on synthetic video, then track an unseen sequence.

Run from the repository root:

    python3 demos/train_and_track.py

Takes a few minutes on one core.  The trained network is written to
``demo_model.sint`` and the success plot to ``demo_success.svg``.
"""
import numpy as np

from sint.datagen import PairSamplerConfig, build_pair_dataset, generate_sequence, generate_suite
from sint.evaluation import plot_curves, precision_curve, success_curve
from sint.nnet import SgdConfig
from sint.siamese import DEFAULT_ARCH, build_model, save_model
from sint.tracker import SINTTracker
from sint.training import TrainingConfig, train

# Sixty short training videos and a disjoint validation set.  Each frame pair
# yields 128 box pairs: a quarter overlap the target by IoU >= 0.7, the rest
# by at most 0.5.
train_seqs = generate_suite(60, seed_offset=0, length=30)
val_seqs = generate_suite(12, seed_offset=100000, length=30)
pairs = PairSamplerConfig()
train_pairs = build_pair_dataset(train_seqs, 4, pairs, seed=0)
val_pairs = build_pair_dataset(val_seqs, 4, pairs, seed=1)
print(f"{len(train_pairs)} training frame pairs, {len(val_pairs)} validation frame pairs")

# Three conv stages feed the feature vector (conv3, conv4 and the fc layer),
# each ROI-pooled on a 3x3 grid and L2-normalised, so a perfect match scores 3.
model = build_model(DEFAULT_ARCH, seed=0)
config = TrainingConfig(sgd=SgdConfig(learning_rate=0.05, lr_decay_every=100), max_epochs=3)
model, report = train(model, train_pairs, val_pairs, config,
                      progress=lambda r: print(f"  epoch {r.epoch}: val loss {r.val_loss:.4f}"))
print(f"validation loss {report.records[0].val_loss:.4f} -> {report.best_val_loss:.4f}")
save_model("demo_model.sint", model)

# Track an unseen sequence that both moves and grows.  Only the first frame's
# annotation is used; every later box comes from matching against it.
seq = generate_sequence(424242, length=40, distortions=("scale-change",))
result = SINTTracker(model).track(seq.frames, seq.groundtruth[0])
success = success_curve(result.boxes, seq.groundtruth)
precision = precision_curve(result.boxes, seq.groundtruth)
print(f"AUC {success.summary:.3f}, Prec@20 {precision.summary:.3f}, {result.fps:.1f} frames/s")
print(f"final box {np.round(result.boxes[-1], 1)} vs truth {np.round(seq.groundtruth[-1], 1)}")
plot_curves("demo_success.svg", {"SINT": success}, "scale-change sequence")
