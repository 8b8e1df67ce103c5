"""Cut a continuous stream of gestures into segments.

Uses the checkpoint from 03_train_classifier.py. Held-out clips are
played back to back, a window slides over the stream, and runs of
windows that agree on a class become segments.

Run: python3 demos/04_segment_stream.py
"""

from pathlib import Path

from handseg import data_io, trainer
from handseg import segmenter as sg

OUT = Path(__file__).parent / "out"
params, _ = trainer.load_checkpoint(OUT / "demo.ckpt")
test = [data_io.normalize_sequence(s) for s in data_io.load_dataset(OUT / "demo_test.jsonl")]

stream = data_io.build_streams(test, 1, 6, seed=0)[0]
print("ground truth:", [(c, a, b) for c, a, b in stream.ground_truth])

# %% a shorter window than the 50 training frames fits inside single gestures
cfg = sg.SegmenterConfig(window_len=30, stride=5, min_consecutive=3)
trace = sg.trace_stream(stream, params, cfg)
print(f"\n{len(trace)} windows; top class per window:")
print(" ".join(str(c) for c in trace.top_class))

# %% merge runs, then score against the ground-truth order
segments = sg.segment_trace(trace, cfg)
print("\nstart  end  class  conf  accepted")
for s in segments:
    print(f"{s.start:5d} {s.end:4d} {s.label:6d}  {s.confidence:.2f}  {s.accepted}")
score = sg.score_segments(segments, stream.labels)
print(f"\nfalse recognitions {score.false_recognitions}, "
      f"average recognized softmax {score.avg_recognized_softmax:.3f}")

# %% the acceptance threshold only changes which segments count as recognized
strict = sg.segment_trace(trace, sg.SegmenterConfig(30, 5, 0.99, 3))
print("accepted at threshold 0.99:", sum(s.accepted for s in strict), "of", len(strict))
