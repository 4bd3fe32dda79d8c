"""
Training, decoding and ensembling
=================================

This demo generates a small synthetic dataset whose query text is planted
into the video frames of a random span. It then trains two models that
differ only in their seed, decodes top-5 candidate spans and merges the
two prediction lists.
"""

from momentloc import (GeneratorConfig, ModelConfig, TrainConfig, ensemble_merge, generate_dataset,
                       metric_grid, random_baseline, train)
from momentloc.evaluation import format_metric_table, predict_clips

data = generate_dataset(GeneratorConfig(n_train=120, n_val=40))
model = ModelConfig(num_layers=1)
print(f"{len(data['train'])} training clips, {len(data['val'])} validation clips")

###############################################################################
# Training
# --------
# Each step runs one batched forward pass over augmented clips, sums the five
# loss terms and applies one Adam update. ``train`` is a pure function of its
# inputs and seed.

runs = [train(data["train"], [], model, TrainConfig(epochs=10, seed=s)) for s in (0, 1)]
last = [r for r in runs[0].log if "total" in r][-1]
print("last step of seed 0:", {k: round(v, 3) for k, v in last.items()})

###############################################################################
# Decoding
# --------
# Start and end logits become probabilities. Candidates are every
# ``(s, e)`` with ``s <= e`` and at most ``max_span_len_frames`` frames,
# scored by ``p_start[s] * p_end[e]``.

truths = [c.span for c in data["val"]]
preds = [predict_clips(r.weights, model, data["val"]) for r in runs]
for seed, p in enumerate(preds):
    print(f"seed {seed}\n{format_metric_table(metric_grid(p, truths))}")
first = preds[0][0]
print("top-5 for", first.clip_id, [(s, e, f"{p:.2e}") for s, e, p in first.candidates],
      "truth", (truths[0].start, truths[0].end))

###############################################################################
# Ensembling
# ----------
# The two top-5 lists are pooled and the five highest-scoring entries kept.

merged = [ensemble_merge(a, b, 5) for a, b in zip(*preds)]
print(f"ensemble\n{format_metric_table(metric_grid(merged, truths))}")
print(f"random spans reach R@1 IoU=0.3 of {random_baseline(data['val']):.3f}")
