"""Train a small classifier on synthetic two-hand gestures.

The model is scaled down from the library defaults so the run takes
well under a minute. The checkpoint is written to demos/out/ for the
segmentation demo.

Run: python3 demos/03_train_classifier.py
"""

import logging
from pathlib import Path

import numpy as np

from handseg import data_io, trainer
from handseg import model as mdl

logging.basicConfig(level=logging.INFO, format="%(message)s")
OUT = Path(__file__).parent / "out"

# %% data: 6 classes, 20 clips each, 40 to 60 frames
data = data_io.generate_synthetic(6, 20, (40, 60), seed=1, noise=0.05)
print(f"{len(data)} clips, lengths {min(s.n_frames for s in data)}..{max(s.n_frames for s in data)}")

# %% a reduced model; everything else keeps the training defaults
mc = mdl.ModelConfig(n_classes=6, topology="anatomical", gcn_widths=(8, 8), hidden=24, depth=2,
                     fc_widths=(32, 16))
tc = trainer.TrainConfig(bilstm_depth=2, batch_size=20, max_epochs=40, early_stop_patience=8, seed=1)
params, report = trainer.train(data, mc, tc)
print(f"\n{params.n_parameters()} parameters, best epoch {report.best_epoch}, "
      f"test accuracy {report.test_accuracy:.3f}")

# %% confusion matrix on the held-out clips (native length, normalized only)
test = [data_io.normalize_sequence(data[i]) for i in report.test_indices]
acc, confusion = trainer.evaluate(params, test)
print(confusion)

# %% where does attention look? weights over time for one test clip
_, cache = mdl.forward(params, test[0].keypoints[None])
weights = cache[-1][0]
print("attention peak at frame", int(np.argmax(weights)), "of", len(weights),
      f"(max weight {weights.max():.3f})")

trainer.save_checkpoint(OUT / "demo.ckpt", params, tc)
data_io.save_dataset([data[i] for i in report.test_indices], OUT / "demo_test.jsonl")
print("saved", OUT / "demo.ckpt")
