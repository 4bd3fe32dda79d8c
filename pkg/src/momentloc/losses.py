"""Training objectives.

The frame-level contrastive term scores every frame against the whole query
(mean over text tokens of temperature-scaled dot products) and contrasts
each in-span frame against all out-of-span frames. The other four terms are
boundary cross-entropy, extended-span highlighting BCE, segment-overlap BCE
for the nil scores, and a sampled margin ranking loss on saliency.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .tensor import ContractError, Tensor
from .types import MomentSpan

BCE_CLIP = 1e-7


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


@dataclass(frozen=True)
class FrameLabelSet:
    span: MomentSpan
    length: int
    valid_len: int
    positives: np.ndarray
    negatives: np.ndarray
    extended_span: tuple[int, int]

    @property
    def valid(self) -> np.ndarray:
        return np.arange(self.length) < self.valid_len


def frame_labels(span: MomentSpan, length: int, alpha: float = 0.75,
                 valid_len: int | None = None) -> FrameLabelSet:
    """Positive/negative frame sets and the widened highlight window.

    Rows at or beyond ``valid_len`` are padding and belong to neither set.
    """
    valid_len = length if valid_len is None else valid_len
    if not 0 <= span.start <= span.end < valid_len <= length:
        raise ContractError(f"span [{span.start}, {span.end}] outside valid range [0, {valid_len})")
    idx = np.arange(valid_len)
    pos = idx[(idx >= span.start) & (idx <= span.end)]
    neg = idx[(idx < span.start) | (idx > span.end)]
    ext = _round_half_up(alpha * span.length)
    extended = (max(0, span.start - ext), min(valid_len - 1, span.end + ext))
    return FrameLabelSet(span, length, valid_len, pos, neg, extended)


@dataclass
class LossBreakdown:
    span_loss: float
    qgh_loss: float
    npm_loss: float
    saliency_loss: float
    nce_loss: float
    total: float

    def as_dict(self) -> dict[str, float]:
        return {
            "span_loss": self.span_loss,
            "qgh_loss": self.qgh_loss,
            "npm_loss": self.npm_loss,
            "saliency_loss": self.saliency_loss,
            "nce_loss": self.nce_loss,
            "total": self.total,
        }


def total_loss(parts: LossBreakdown) -> float:
    return parts.span_loss + parts.qgh_loss + parts.npm_loss + parts.saliency_loss + parts.nce_loss


# --------------------------------------------------------------------------
# contrastive


def frame_similarities(projected_video, projected_text, tau: float) -> Tensor:
    """Similarity of every frame to the query: ``mean_j(v . t_j) / tau``."""
    v = tn.as_tensor(projected_video)
    t = tn.as_tensor(projected_text)
    if t.shape[0] == 0:
        raise ContractError("similarity needs at least one text token")
    if tau <= 0:
        raise ContractError("temperature must be positive")
    dots = tn.matmul(v, tn.transpose(t))
    return tn.scale(tn.sum(dots, axis=1), 1.0 / (tau * t.shape[0]))


def frame_text_similarity(v, text, tau: float = 0.07) -> Tensor:
    v = tn.as_tensor(v)
    return tn.reshape(frame_similarities(tn.reshape(v, (1, v.shape[-1])), text, tau), ())


def frame_nce_loss(projected_video, projected_text, labels: FrameLabelSet,
                   tau: float = 0.07) -> Tensor:
    """Per-sample contrastive loss, averaged over positive frames."""
    if labels.positives.size == 0:
        raise ContractError("contrastive loss needs at least one positive frame")
    sims = frame_similarities(projected_video, projected_text, tau)
    if labels.negatives.size == 0:
        return Tensor(np.zeros((), dtype=sims.dtype))
    n_pos = labels.positives.size
    pos = tn.take(sims, labels.positives)
    neg_lse = tn.reshape(tn.logsumexp(tn.take(sims, labels.negatives)), (1,))
    neg_col = tn.reshape(tn.take(neg_lse, np.zeros(n_pos, dtype=np.int64)), (n_pos, 1))
    denom = tn.logsumexp(tn.concat([tn.reshape(pos, (n_pos, 1)), neg_col], axis=1))
    return tn.mean(tn.sub(denom, pos))


# --------------------------------------------------------------------------
# supervised heads


def span_loss(start_logits, end_logits, span: MomentSpan) -> Tensor:
    s = tn.as_tensor(start_logits)
    e = tn.as_tensor(end_logits)
    n = s.shape[0]
    if not 0 <= span.start <= span.end < n:
        raise ContractError(f"span [{span.start}, {span.end}] outside logits of length {n}")
    ls = tn.take(tn.log_softmax(s), [span.start])
    le = tn.take(tn.log_softmax(e), [span.end])
    return tn.scale(tn.sum(tn.add(ls, le)), -0.5)


def _bce(probs: Tensor, targets: np.ndarray) -> Tensor:
    p = tn.clip(probs, BCE_CLIP, 1.0 - BCE_CLIP)
    y = Tensor(targets.astype(p.dtype))
    one_minus_y = Tensor((1.0 - targets).astype(p.dtype))
    log_p = tn.log(p)
    log_q = tn.log(tn.add_scalar(tn.scale(p, -1.0), 1.0))
    ll = tn.add(tn.mul(y, log_p), tn.mul(one_minus_y, log_q))
    return tn.scale(tn.mean(ll), -1.0)


def qgh_loss(highlight_scores, labels: FrameLabelSet) -> Tensor:
    """BCE against the indicator of the extended span, over non-pad frames."""
    h = tn.as_tensor(highlight_scores)
    lo, hi = labels.extended_span
    idx = np.arange(labels.valid_len)
    target = ((idx >= lo) & (idx <= hi)).astype(np.float64)
    if labels.valid_len < h.shape[0]:
        h = tn.take(h, idx)
    return _bce(h, target)


def saliency_loss(saliency_scores, labels: FrameLabelSet, rng: np.random.Generator,
                  margin: float = 0.2, n_pairs: int = 4) -> Tensor:
    """Hinge ranking of sampled (in-span, out-of-span) frame pairs."""
    s = tn.as_tensor(saliency_scores)
    if labels.negatives.size == 0 or labels.positives.size == 0:
        return Tensor(np.zeros((), dtype=s.dtype))
    high = rng.choice(labels.positives, size=n_pairs)
    low = rng.choice(labels.negatives, size=n_pairs)
    gap = tn.sub(tn.take(s, low), tn.take(s, high))
    return tn.mean(tn.relu(tn.add_scalar(gap, margin)))


def segment_overlap_labels(sizes, span: MomentSpan, valid_len: int | None = None) -> np.ndarray:
    """Whether each contiguous segment shares at least one frame with ``span``."""
    out = []
    start = 0
    for size in sizes:
        stop = start + size - 1
        if valid_len is not None:
            stop = min(stop, valid_len - 1)
        out.append(start <= stop and start <= span.end and span.start <= stop)
        start += size
    return np.asarray(out, dtype=bool)


def npm_loss(nil_scores, overlap_labels) -> Tensor:
    return _bce(tn.as_tensor(nil_scores), np.asarray(overlap_labels, dtype=np.float64))


# --------------------------------------------------------------------------


@dataclass(frozen=True)
class LossConfig:
    qgh_extension: float = 0.75
    saliency_margin: float = 0.2
    saliency_pairs: int = 4
    use_nce: bool = True
    nce_reduction: str = "mean"


def compute_losses(out, span: MomentSpan, tau: float, rng: np.random.Generator,
                   cfg: LossConfig = LossConfig(),
                   valid_len: int | None = None) -> tuple[dict[str, Tensor], LossBreakdown]:
    """All five terms for one sample. A disabled contrastive term is reported as 0."""
    length = out.start_logits.shape[0]
    labels = frame_labels(span, length, cfg.qgh_extension, valid_len)
    terms = {
        "span_loss": span_loss(out.start_logits, out.end_logits, span),
        "qgh_loss": qgh_loss(out.highlight_scores, labels),
        "npm_loss": npm_loss(out.nil_scores,
                             segment_overlap_labels(out.segment_sizes, span, labels.valid_len)),
        "saliency_loss": saliency_loss(out.saliency_scores, labels, rng,
                                       cfg.saliency_margin, cfg.saliency_pairs),
    }
    if cfg.use_nce:
        terms["nce_loss"] = frame_nce_loss(out.projected_video_features,
                                           out.projected_text_features, labels, tau)
    values = {k: v.item() for k, v in terms.items()}
    values.setdefault("nce_loss", 0.0)
    parts = LossBreakdown(total=0.0, **values)
    parts.total = total_loss(parts)
    return terms, parts
