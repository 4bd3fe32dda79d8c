"""Records shared across the pipeline."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class MomentSpan:
    """Inclusive frame interval ``[start, end]``."""

    start: int
    end: int

    def __post_init__(self):
        if self.start < 0 or self.end < self.start:
            raise ValueError(f"invalid span [{self.start}, {self.end}]")

    @property
    def length(self) -> int:
        return self.end - self.start + 1

    def check_within(self, length: int) -> None:
        if self.end >= length:
            raise ValueError(f"span [{self.start}, {self.end}] outside clip of length {length}")


@dataclass
class ClipSample:
    clip_id: str
    video_features: np.ndarray  # [l_v, d_v]
    text_features: np.ndarray  # [L_t, d_t]
    span: MomentSpan
    fps_feature: float = 2.0
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.video_features.ndim != 2 or self.video_features.shape[0] < 1:
            raise ValueError(f"{self.clip_id}: video features must be a non-empty matrix")
        if self.text_features.ndim != 2 or self.text_features.shape[0] < 1:
            raise ValueError(f"{self.clip_id}: text features must be a non-empty matrix")
        self.span.check_within(self.video_features.shape[0])

    @property
    def num_frames(self) -> int:
        return self.video_features.shape[0]
