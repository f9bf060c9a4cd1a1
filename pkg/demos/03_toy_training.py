"""
Training on a synthetic paired dataset
======================================

Writes a small synthetic H&E/IHC dataset, trains a desk-scale model for a
few epochs and compares translations before and after training.
"""

import tempfile
from pathlib import Path

import numpy as np

from stainmix.dataset import list_images, load_image, make_toy_dataset, oracle_recolor
from stainmix.trainer import TrainConfig, evaluate, init_state, read_trace, save_state, train, translate

work = Path(tempfile.mkdtemp())
make_toy_dataset(work / "data", n=8, size=64, rng=0)
he_dir, ihc_dir = work / "data" / "train" / "HE", work / "data" / "train" / "IHC"

###############################################################################
# The IHC side of the toy data is a fixed color remap of the H&E side, so
# the quality of a translation can also be measured against that remap.

cfg = TrainConfig.desk(epochs=10, decay_start=8)
untrained = save_state(init_state(cfg), work / "untrained.pt", cfg)
result = train(cfg, work / "data", work / "run")

rows = read_trace(result.trace_path)
print(f"{len(rows)} steps, total_g {rows[0]['total_g']:.1f} -> {rows[-1]['total_g']:.1f}")

###############################################################################
# Translate the H&E images with both checkpoints and score them.

for name, ckpt in (("before", untrained), ("after", result.checkpoint)):
    out = work / name
    translate(ckpt, he_dir, out)
    err = np.mean([np.abs(load_image(out / p.name) - oracle_recolor(load_image(p))).mean()
                   for p in list_images(he_dir).values()])
    print(f"{name:6s} pixel error {err:.3f}  {evaluate(out, ihc_dir).summary()}")
