"""Span decoding, temporal IoU, recall@k and two-model ensembling."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .types import ClipSample, MomentSpan

METRIC_GRID = (("r1_03", 1, 0.3), ("r1_05", 1, 0.5), ("r5_03", 5, 0.3), ("r5_05", 5, 0.5))

Candidate = tuple  # (start_frame, end_frame, score)


def candidate_key(c: Candidate):
    """Score descending, then earlier start, then shorter span."""
    return (-c[2], c[0], c[1] - c[0])


@dataclass
class PredictionSet:
    clip_id: str
    candidates: list = field(default_factory=list)
    query_idx: int = 0

    def sorted(self) -> "PredictionSet":
        return PredictionSet(self.clip_id, sorted(self.candidates, key=candidate_key), self.query_idx)

    def top(self, k: int) -> list:
        return self.candidates[:k]


def _softmax(x: np.ndarray) -> np.ndarray:
    z = np.asarray(x, dtype=np.float64)
    e = np.exp(z - z.max())
    return e / e.sum()


def decode_from_probs(p_start: np.ndarray, p_end: np.ndarray, k: int, max_len: int,
                      clip_id: str = "") -> PredictionSet:
    if k < 1 or max_len < 1:
        raise ValueError("k and max_len must be at least 1")
    n = len(p_start)
    s_idx, e_idx = np.triu_indices(n)
    keep = e_idx - s_idx < max_len
    s_idx, e_idx = s_idx[keep], e_idx[keep]
    scores = p_start[s_idx] * p_end[e_idx]
    order = np.lexsort((e_idx - s_idx, s_idx, -scores))[:k]
    cands = [(int(s_idx[i]), int(e_idx[i]), float(scores[i])) for i in order]
    return PredictionSet(clip_id, cands)


def decode_topk(start_logits, end_logits, k: int = 5, max_len: int = 32, clip_id: str = "") -> PredictionSet:
    """Top-``k`` spans by ``p_start[s] * p_end[e]`` with ``s <= e < s + max_len``."""
    return decode_from_probs(_softmax(start_logits), _softmax(end_logits), k, max_len, clip_id)


def temporal_iou(a: MomentSpan, b: MomentSpan) -> float:
    inter = min(a.end, b.end) - max(a.start, b.start) + 1
    if inter <= 0:
        return 0.0
    union = a.length + b.length - inter
    return inter / union


def hit(pred: PredictionSet, truth: MomentSpan, k: int, iou_threshold: float) -> bool:
    return any(temporal_iou(MomentSpan(s, e), truth) >= iou_threshold for s, e, _ in pred.top(k))


def recall_at_k(predictions: Sequence[PredictionSet], truths: Sequence[MomentSpan], k: int,
                iou_threshold: float) -> float:
    if len(predictions) != len(truths):
        raise ValueError("one ground-truth span is needed per prediction set")
    if not predictions:
        return 0.0
    return sum(hit(p, t, k, iou_threshold) for p, t in zip(predictions, truths)) / len(predictions)


def metric_grid(predictions: Sequence[PredictionSet], truths: Sequence[MomentSpan]) -> dict[str, float]:
    return {name: recall_at_k(predictions, truths, k, thr) for name, k, thr in METRIC_GRID}


def format_metric_table(metrics: dict[str, float]) -> str:
    rows = [
        "         IoU=0.3   IoU=0.5",
        f"R@1     {100 * metrics['r1_03']:7.2f}   {100 * metrics['r1_05']:7.2f}",
        f"R@5     {100 * metrics['r5_03']:7.2f}   {100 * metrics['r5_05']:7.2f}",
    ]
    return "\n".join(rows)


def ensemble_merge(a: PredictionSet, b: PredictionSet, k: int = 5) -> PredictionSet:
    """Pool both candidate lists, sort by score and keep the best ``k``.

    Overlapping or duplicate candidates are kept as they are.
    """
    if a.clip_id != b.clip_id:
        raise ValueError(f"cannot merge predictions for {a.clip_id!r} and {b.clip_id!r}")
    pooled = sorted(list(a.candidates) + list(b.candidates), key=candidate_key)
    return PredictionSet(a.clip_id, pooled[:k], a.query_idx)


def random_baseline(clips: Sequence[ClipSample], k: int = 1, iou_threshold: float = 0.3,
                    n_trials: int = 10_000, rng: np.random.Generator | None = None) -> float:
    """Monte Carlo recall of uniformly placed random spans.

    Each trial picks a query, draws ``k`` span lengths from the empirical
    ground-truth length distribution, and places each span uniformly inside
    the clip.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    lengths = np.array([c.span.length for c in clips])
    hits = 0
    for _ in range(n_trials):
        c = clips[int(rng.integers(len(clips)))]
        n = c.num_frames
        for _ in range(k):
            w = min(int(lengths[rng.integers(len(lengths))]), n)
            s = int(rng.integers(0, n - w + 1))
            if temporal_iou(MomentSpan(s, s + w - 1), c.span) >= iou_threshold:
                hits += 1
                break
    return hits / n_trials


# --------------------------------------------------------------------------
# prediction files


def to_seconds(start: int, end: int, fps: float) -> tuple[float, float]:
    return start / fps, (end + 1) / fps


def to_frames(start_s: float, end_s: float, fps: float) -> tuple[int, int]:
    s = int(round(start_s * fps))
    return s, max(s, int(round(end_s * fps)) - 1)


def write_predictions(path, predictions: Iterable[PredictionSet], fps_by_clip: dict[str, float]) -> None:
    lines = []
    for p in predictions:
        fps = fps_by_clip[p.clip_id]
        cands = [[*to_seconds(s, e, fps), score] for s, e, score in p.candidates]
        lines.append(json.dumps({"clip_id": p.clip_id, "query_idx": p.query_idx, "candidates": cands},
                                sort_keys=True))
    Path(path).write_text("".join(line + "\n" for line in lines))


def read_predictions(path, fps_by_clip: dict[str, float] | None = None) -> list[PredictionSet]:
    """Load a prediction file; with ``fps_by_clip`` candidates are converted to frames."""
    out = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        cands = []
        for start_s, end_s, score in rec["candidates"]:
            if fps_by_clip is None:
                cands.append((start_s, end_s, float(score)))
            else:
                s, e = to_frames(start_s, end_s, fps_by_clip[rec["clip_id"]])
                cands.append((s, e, float(score)))
        out.append(PredictionSet(rec["clip_id"], cands, rec.get("query_idx", 0)))
    return out


def merge_prediction_files(a: Sequence[PredictionSet], b: Sequence[PredictionSet], k: int = 5) -> list[PredictionSet]:
    by_key = {(p.clip_id, p.query_idx): p for p in b}
    merged = []
    for p in a:
        q = by_key.get((p.clip_id, p.query_idx), PredictionSet(p.clip_id, [], p.query_idx))
        merged.append(ensemble_merge(p, q, k))
    return merged


def predict_clips(weights, config, clips: Sequence[ClipSample], k: int = 5,
                  max_len: int | None = None) -> list[PredictionSet]:
    """Eval-mode forward and top-``k`` decoding for every clip."""
    from .model import forward_clip

    max_len = config.max_span_len_frames if max_len is None else max_len
    preds = []
    for c in clips:
        out = forward_clip(c.video_features, c.text_features, weights, config, train_mode=False)
        n = c.num_frames
        preds.append(decode_topk(out.start_logits.data[:n], out.end_logits.data[:n], k, max_len, c.clip_id))
    return preds
