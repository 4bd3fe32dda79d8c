"""
Sliding windows and video splicing
==================================

Two augmentations change where a moment sits in its clip without touching
the moment itself. Sliding-window sampling crops a random fraction of the
clip that still covers the span. Splicing then wraps the result inside an
unrelated background clip.
"""

import numpy as np

from momentloc import AugmentConfig, GeneratorConfig, combined_augment, generate_dataset
from momentloc import sliding_window_sample, video_splice

clips = generate_dataset(GeneratorConfig(n_train=2, n_val=0))["train"]
clip, background = clips
print(f"source: {clip.num_frames} frames, span {clip.span.start}..{clip.span.end}")
print(f"background: {background.num_frames} frames")

###############################################################################
# Sliding-window sampling
# -----------------------
# The window covers ``round(r * L)`` frames for a ratio ``r`` drawn from the
# configured interval, and never fewer frames than the span itself.

cfg = AugmentConfig()
for seed in range(3):
    out = sliding_window_sample(clip, cfg, np.random.default_rng(seed))
    print(f"window ratio {out.meta['window_ratio']:.2f}: {out.num_frames} frames, "
          f"span {out.span.start}..{out.span.end}")

###############################################################################
# Splicing
# --------
# With probability ``splice_probability`` the clip is inserted at a random
# cut of the background, which shifts the span by the cut position.

always = AugmentConfig(splice_probability=1.0)
out = video_splice(clip, background, always, np.random.default_rng(1))
print(f"cut at {out.meta['splice_cut']}: {out.num_frames} frames, span {out.span.start}..{out.span.end}")

###############################################################################
# Both together
# -------------
# The span rows of every augmented clip are bitwise copies of the source rows.

for seed in range(5):
    out = combined_augment(clip, background, cfg, np.random.default_rng(seed))
    s, e = out.span.start, out.span.end
    same = np.array_equal(out.video_features[s:e + 1], clip.video_features[clip.span.start:clip.span.end + 1])
    print(f"seed {seed}: {out.num_frames:4d} frames, span {s:3d}..{e:3d}, "
          f"spliced={'splice_cut' in out.meta}, rows preserved={same}")
