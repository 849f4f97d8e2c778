"""Re-find a target after it leaves the scene, using whole-frame window search.

    python3 demos/reidentification.py [model.sint]

Without a checkpoint argument a short training run is done first (about a
minute).  The score timeline is written to ``demo_reid.csv``.
"""
import sys

import numpy as np

from sint.datagen import build_pair_dataset, generate_shot_video, generate_suite
from sint.nnet import SgdConfig
from sint.siamese import build_model, extract_features, load_model
from sint.tracker import presence_accuracy, reid_scan
from sint.training import TrainingConfig, train

if len(sys.argv) > 1:
    model = load_model(sys.argv[1])
else:
    pairs = build_pair_dataset(generate_suite(30, 0, length=20), 3, seed=0)
    val = build_pair_dataset(generate_suite(6, 100000, length=20), 3, seed=1)
    model, _ = train(build_model(seed=0), pairs, val,
                     TrainingConfig(sgd=SgdConfig(learning_rate=0.05, lr_decay_every=100), max_epochs=2))

# six shots; the target is on screen in shots 0, 2 and 4 and absent in between
video = generate_shot_video(5, n_shots=6, shot_length=10)
query = extract_features(model, video.frames[0], video.query_box[None])[0]
scores = np.array([reid_scan(model, query, frame, video.query_box)[1] for frame in video.frames])

for shot in range(6):
    s = scores[video.shot_of_frame == shot]
    state = "present" if video.present[video.shot_of_frame == shot][0] else "absent "
    print(f"shot {shot} ({state}): best window score {s.mean():.3f} +- {s.std():.3f}")
acc, thr = presence_accuracy(scores[1:], video.present[1:])
print(f"a threshold of {thr:.3f} classifies presence with {100 * acc:.0f}% accuracy")

with open("demo_reid.csv", "w") as fh:
    fh.write("frame,score,present\n")
    for i, (s, p) in enumerate(zip(scores, video.present)):
        fh.write(f"{i},{s:.6f},{int(p)}\n")
