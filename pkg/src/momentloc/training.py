"""Deterministic training loop.

Every random draw comes from a named stream of one :class:`RngTree`:
epoch order, per-sample draws (background clip, augmentation, saliency
pairs) and per-step dropout masks. A run is fully determined by its seeds
and config.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as tn
from .augmentation import AugmentConfig, combined_augment
from .evaluation import metric_grid, predict_clips
from .losses import LossConfig, compute_losses
from .model import ModelConfig, ModelWeights, forward_clips, init_weights, save_checkpoint
from .rng import RngTree
from .types import ClipSample

log = logging.getLogger(__name__)

LOSS_TERMS = ("span_loss", "qgh_loss", "npm_loss", "saliency_loss", "nce_loss")


class TrainingDivergedError(RuntimeError):
    def __init__(self, step: int, term: str):
        super().__init__(f"non-finite {term} at step {step}")
        self.step = step
        self.term = term


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 12
    batch_size: int = 4
    learning_rate: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    weight_decay: float = 1e-4
    grad_clip_norm: float = 1.0
    seed: int = 0
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    use_nce: bool = True
    nce_reduction: str = "mean"
    qgh_extension: float = 0.75
    saliency_margin: float = 0.2
    saliency_pairs: int = 4
    eval_every_n_steps: int = 0
    max_steps: int | None = None
    precision: str = "float32"
    checkpoint_dir: str | None = None

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if self.nce_reduction not in ("mean", "sum"):
            raise ValueError(f"nce_reduction must be 'mean' or 'sum', got {self.nce_reduction!r}")
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"precision must be 'float32' or 'float64', got {self.precision!r}")
        if self.grad_clip_norm <= 0:
            raise ValueError("grad_clip_norm must be positive")

    @property
    def dtype(self):
        return np.float32 if self.precision == "float32" else np.float64

    @property
    def loss_config(self) -> LossConfig:
        return LossConfig(self.qgh_extension, self.saliency_margin, self.saliency_pairs,
                          self.use_nce, self.nce_reduction)

    def as_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        d["augment"] = augment_as_dict(self.augment)
        return d

    @classmethod
    def from_dict(cls, d: dict, augment: AugmentConfig | None = None) -> "TrainConfig":
        known = {f.name for f in fields(cls)} - {"augment"}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        d = dict(d)
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d, augment=augment or AugmentConfig())


def augment_as_dict(cfg: AugmentConfig) -> dict:
    d = asdict(cfg)
    d["ratio_interval"] = list(cfg.ratio_interval)
    return d


# --------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def global_grad_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))


def adam_step(params: dict[str, tn.Tensor], grads: dict[str, np.ndarray], state: AdamState,
              lr: float, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0,
              clip_norm: float | None = None) -> float:
    """One Adam update with decoupled weight decay; returns the pre-clip gradient norm."""
    norm = global_grad_norm(grads)
    factor = 1.0
    if clip_norm is not None and norm > clip_norm:
        factor = clip_norm / norm
    state.step += 1
    b1, b2 = betas
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        elif factor != 1.0:
            g = g * p.dtype.type(factor)
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        new = p.data - update.astype(p.dtype)
        if weight_decay:
            new = new - p.dtype.type(lr * weight_decay) * p.data
        p.data = new
    return norm


# --------------------------------------------------------------------------


@dataclass
class TrainResult:
    weights: ModelWeights
    log: list[dict]
    final_metrics: dict[str, float]
    best_metrics: dict[str, float]
    best_step: int


def _pick_background(rng: np.random.Generator, n: int, exclude: int) -> int:
    j = int(rng.integers(n - 1))
    return j + 1 if j >= exclude else j


def _dump(record: dict) -> str:
    return json.dumps(record, sort_keys=True)


def train(train_clips: Sequence[ClipSample], val_clips: Sequence[ClipSample], model_cfg: ModelConfig,
          train_cfg: TrainConfig, out_dir=None) -> TrainResult:
    out = Path(out_dir) if out_dir is not None else (
        Path(train_cfg.checkpoint_dir) if train_cfg.checkpoint_dir else None)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    tree = RngTree(train_cfg.seed)
    dtype = train_cfg.dtype
    weights = init_weights(model_cfg, tree.key("init") & 0xFFFFFFFF, dtype=dtype)
    state = AdamState()
    loss_cfg = train_cfg.loss_config
    aug = train_cfg.augment
    use_aug = aug.sliding_window or aug.splice
    n = len(train_clips)
    bsz = train_cfg.batch_size
    steps_per_epoch = math.ceil(n / bsz)
    total_steps = steps_per_epoch * train_cfg.epochs
    if train_cfg.max_steps is not None:
        total_steps = min(total_steps, train_cfg.max_steps) if train_cfg.epochs else train_cfg.max_steps
    eval_every = train_cfg.eval_every_n_steps or steps_per_epoch

    records: list[dict] = []
    best = {"r1_03": -1.0}
    best_step = 0
    final_metrics: dict[str, float] = {}
    log_file = open(out / "metrics.jsonl", "w") if out is not None else None

    def emit(rec):
        records.append(rec)
        if log_file is not None:
            log_file.write(_dump(rec) + "\n")

    def evaluate(step):
        nonlocal best, best_step
        if not val_clips:
            return {}
        m = metric_grid(predict_clips(weights, model_cfg, val_clips),
                        [c.span for c in val_clips])
        emit({"step": step, **m})
        log.info("step %d  val %s", step, m)
        if m["r1_03"] > best["r1_03"]:
            best, best_step = m, step
            if out is not None:
                save_checkpoint(out / "best.msxt", model_cfg, weights)
        return m

    step = 0
    sample_no = 0
    try:
        if total_steps == 0:
            final_metrics = evaluate(0)
        while step < total_steps:
            epoch = step // steps_per_epoch
            order = tree.stream("epoch", epoch).permutation(n)
            pos = (step % steps_per_epoch) * bsz
            while pos < n and step < total_steps:
                batch = order[pos:pos + bsz]
                pos += bsz
                step += 1
                for p in weights.values():
                    p.grad = None
                sums = dict.fromkeys(LOSS_TERMS, 0.0)
                clips, rngs = [], []
                for idx in batch:
                    rng = tree.stream("sample", sample_no)
                    sample_no += 1
                    clip = train_clips[int(idx)]
                    if use_aug and n > 1:
                        bg = train_clips[_pick_background(rng, n, int(idx))]
                        clip = combined_augment(clip, bg, aug, rng)
                    clips.append(clip)
                    rngs.append(rng)
                fwd = forward_clips([c.video_features for c in clips], [c.text_features for c in clips],
                                    weights, model_cfg, train_mode=True, rng=tree.stream("dropout", step))
                objective_t = None
                for b, (clip, rng) in enumerate(zip(clips, rngs)):
                    valid = clip.num_frames if clip.num_frames < model_cfg.num_segments else None
                    terms, parts = compute_losses(fwd.sample(b), clip.span, model_cfg.contrastive_tau, rng,
                                                  loss_cfg, valid)
                    for name in LOSS_TERMS:
                        value = getattr(parts, name)
                        if not math.isfinite(value):
                            raise TrainingDivergedError(step, name)
                        sums[name] += value
                    for name, t in terms.items():
                        w = 1.0 if (name == "nce_loss" and loss_cfg.nce_reduction == "sum") else 1.0 / len(batch)
                        scaled = tn.scale(t, w)
                        objective_t = scaled if objective_t is None else tn.add(objective_t, scaled)
                objective = objective_t.item()
                objective_t.backward()
                grads = {k: p.grad for k, p in weights.items() if p.grad is not None}
                norm = adam_step(weights, grads, state, train_cfg.learning_rate, train_cfg.betas,
                                 train_cfg.adam_eps, train_cfg.weight_decay, train_cfg.grad_clip_norm)
                rec = {"step": step}
                for name in LOSS_TERMS:
                    rec[name] = sums[name] / len(batch)
                    if name == "nce_loss" and loss_cfg.nce_reduction == "sum":
                        rec[name] = sums[name]
                rec["total"] = objective
                rec["lr"] = train_cfg.learning_rate
                rec["grad_norm"] = norm
                emit(rec)
                if step % eval_every == 0 or step == total_steps:
                    final_metrics = evaluate(step)
    finally:
        if log_file is not None:
            log_file.close()

    if out is not None:
        save_checkpoint(out / "final.msxt", model_cfg, weights)
    return TrainResult(weights, records, final_metrics, best if best_step else final_metrics, best_step)
