"""Training-time clip augmentation on feature sequences.

Sliding-window sampling crops a window of random relative length that still
covers the whole labelled moment. Splicing wraps the (possibly cropped) clip
between the head and tail of an unrelated background clip. All indexing is
in feature frames.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .types import ClipSample, MomentSpan


@dataclass(frozen=True)
class AugmentConfig:
    ratio_interval: tuple[float, float] = (0.4, 0.8)
    splice_probability: float = 0.5
    sliding_window: bool = True
    splice: bool = True

    def __post_init__(self):
        rs, re_ = self.ratio_interval
        if not 0.0 < rs <= re_ <= 1.0:
            raise ValueError(f"ratio interval must satisfy 0 < r_s <= r_e <= 1, got {self.ratio_interval}")
        if not 0.0 <= self.splice_probability <= 1.0:
            raise ValueError(f"splice probability must lie in [0, 1], got {self.splice_probability}")


def window_length(ratio: float, length: int, span_length: int) -> int:
    w = int(np.floor(ratio * length + 0.5))
    return min(max(w, span_length, 1), length)


def sliding_window_sample(clip: ClipSample, cfg: AugmentConfig, rng: np.random.Generator) -> ClipSample:
    n = clip.num_frames
    s, e = clip.span.start, clip.span.end
    ratio = rng.uniform(*cfg.ratio_interval)
    w = window_length(ratio, n, clip.span.length)
    # window [a, a + w) must cover [s, e] and stay inside [0, n)
    lo, hi = max(0, e - w + 1), min(s, n - w)
    a = int(rng.integers(lo, hi + 1))
    meta = dict(clip.meta, window_start=a, window_ratio=float(ratio))
    return replace(
        clip,
        video_features=clip.video_features[a:a + w],
        span=MomentSpan(s - a, e - a),
        meta=meta,
    )


def video_splice(v1: ClipSample, v2: ClipSample, cfg: AugmentConfig, rng: np.random.Generator) -> ClipSample:
    """Insert ``v1`` into ``v2`` at a random cut with probability ``splice_probability``."""
    if rng.random() >= cfg.splice_probability:
        return v1
    l2 = v2.num_frames
    c = int(rng.integers(0, l2 + 1))
    bg = v2.video_features.astype(v1.video_features.dtype, copy=False)
    feats = np.concatenate([bg[:c], v1.video_features, bg[c:]], axis=0)
    meta = dict(v1.meta, splice_cut=c, splice_source=v2.clip_id)
    return replace(
        v1,
        video_features=feats,
        span=MomentSpan(v1.span.start + c, v1.span.end + c),
        meta=meta,
    )


def combined_augment(v1: ClipSample, v2: ClipSample, cfg: AugmentConfig, rng: np.random.Generator) -> ClipSample:
    out = v1
    if cfg.sliding_window:
        out = sliding_window_sample(out, cfg, rng)
    if cfg.splice:
        out = video_splice(out, v2, cfg, rng)
    return out
