"""Multi-scale cross-modal transformer.

The video is cut into contiguous segments; each segment runs through a stack
of cross-attention layers together with the query text, gets a per-segment
confidence from the nil prediction module, is scaled by it, and the scaled
segments are concatenated back into one sequence for the prediction heads.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import tensor as tn
from .tensor import ShapeError, Tensor

ModelWeights = dict  # ordered name -> Tensor, in declaration order


class ConfigError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 3
    num_segments: int = 4
    d_model: int = 32
    num_heads: int = 4
    d_video_in: int = 32
    d_text_in: int = 24
    ffn_mult: int = 4
    dropout_p: float = 0.0
    max_span_len_frames: int = 32
    contrastive_tau: float = 0.07
    span_encoder_layers: int = 2
    ln_eps: float = 1e-5
    null_key: bool = True

    def __post_init__(self):
        for name in ("num_layers", "num_segments", "d_model", "num_heads", "d_video_in",
                     "d_text_in", "ffn_mult", "max_span_len_frames", "span_encoder_layers"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < 1:
                raise ConfigError(f"model.{name} must be a positive integer, got {v!r}")
        if self.d_model % self.num_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by num_heads={self.num_heads}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"dropout_p must lie in [0, 1), got {self.dropout_p}")
        if self.contrastive_tau <= 0 or self.ln_eps <= 0:
            raise ConfigError("contrastive_tau and ln_eps must be positive")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ForwardOutput:
    start_logits: Tensor
    end_logits: Tensor
    highlight_scores: Tensor
    saliency_scores: Tensor
    nil_scores: Tensor
    final_video_features: Tensor
    projected_video_features: Tensor
    projected_text_features: Tensor
    segment_sizes: list[int]


# --------------------------------------------------------------------------
# parameters


def _block_shapes(prefix: str, d: int, ffn: int) -> list[tuple[str, tuple[int, ...]]]:
    shapes = []
    for proj in ("q", "k", "v", "o"):
        shapes += [(f"{prefix}.{proj}.w", (d, d)), (f"{prefix}.{proj}.b", (d,))]
    shapes += [
        (f"{prefix}.ln1.g", (d,)), (f"{prefix}.ln1.b", (d,)),
        (f"{prefix}.ffn1.w", (d, ffn)), (f"{prefix}.ffn1.b", (ffn,)),
        (f"{prefix}.ffn2.w", (ffn, d)), (f"{prefix}.ffn2.b", (d,)),
        (f"{prefix}.ln2.g", (d,)), (f"{prefix}.ln2.b", (d,)),
    ]
    return shapes


def parameter_shapes(config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Every learnable tensor, in the order used for init and checkpoints."""
    d, ffn = config.d_model, config.d_model * config.ffn_mult
    shapes = [
        ("video_proj.w", (config.d_video_in, d)), ("video_proj.b", (d,)),
        ("text_proj.w", (config.d_text_in, d)), ("text_proj.b", (d,)),
    ]
    for i in range(config.num_layers):
        shapes += _block_shapes(f"cross.{i}.video", d, ffn)
        shapes += _block_shapes(f"cross.{i}.text", d, ffn)
    shapes += [("npm.w", (d, 1)), ("npm.b", (1,))]
    for head in ("saliency", "highlight"):
        shapes += [(f"{head}.fc1.w", (d, d)), (f"{head}.fc1.b", (d,)),
                   (f"{head}.fc2.w", (d, 1)), (f"{head}.fc2.b", (1,))]
    for j in range(config.span_encoder_layers):
        shapes += _block_shapes(f"span.enc.{j}", d, ffn)
    shapes += [("span.start.w", (2 * d, 1)), ("span.start.b", (1,)),
               ("span.end.w", (2 * d, 1)), ("span.end.b", (1,))]
    shapes += [("contrast.w", (d, d)), ("contrast.b", (d,))]
    return shapes


def init_weights(config: ModelConfig, seed: int, dtype=np.float64) -> ModelWeights:
    """Glorot-uniform matrices, zero biases, unit layer-norm gains."""
    rng = np.random.default_rng(seed)
    weights: ModelWeights = {}
    for name, shape in parameter_shapes(config):
        kind = name.rsplit(".", 1)[1]
        if kind == "w":
            a = np.sqrt(6.0 / (shape[0] + shape[1]))
            arr = rng.uniform(-a, a, size=shape)
        elif kind == "g":
            arr = np.ones(shape)
        else:
            arr = np.zeros(shape)
        weights[name] = Tensor(arr.astype(dtype), requires_grad=True)
    return weights


def cast_weights(weights: ModelWeights, dtype) -> ModelWeights:
    return {k: Tensor(v.data.astype(dtype), requires_grad=True) for k, v in weights.items()}


_PE_CACHE: dict[tuple[int, int, str], np.ndarray] = {}


def positional_encoding(length: int, d: int, dtype=np.float64) -> np.ndarray:
    """Fixed sinusoidal table of shape ``[length, d]``."""
    key = (length, d, np.dtype(dtype).str)
    table = _PE_CACHE.get(key)
    if table is None:
        pos = np.arange(length)[:, None]
        rate = np.power(10000.0, -(np.arange(0, d, 2) / d))
        table = np.zeros((length, d))
        table[:, 0::2] = np.sin(pos * rate)
        table[:, 1::2] = np.cos(pos * rate[: d // 2])
        table = table.astype(dtype)
        _PE_CACHE[key] = table
    return table


# --------------------------------------------------------------------------
# blocks (batched: activations are [B, L, d])


def _lin(x: Tensor, w: ModelWeights, name: str) -> Tensor:
    return tn.linear(x, w[f"{name}.w"], w[f"{name}.b"])


def _attention(xq: Tensor, xkv: Tensor, w: ModelWeights, prefix: str, heads: int,
               key_valid: np.ndarray | None, null_key: bool = False) -> Tensor:
    """Multi-head attention; ``null_key`` adds an always-present zero key/value slot.

    Without the extra slot, softmax discards any score offset shared by all
    keys, so a query cannot tell "every key matches" from "no key matches".
    """
    b, lq, d = xq.shape
    lk = xkv.shape[1]
    dh = d // heads
    q = tn.permute(tn.reshape(_lin(xq, w, f"{prefix}.q"), (b, lq, heads, dh)), (0, 2, 1, 3))
    k = tn.permute(tn.reshape(_lin(xkv, w, f"{prefix}.k"), (b, lk, heads, dh)), (0, 2, 3, 1))
    v = tn.permute(tn.reshape(_lin(xkv, w, f"{prefix}.v"), (b, lk, heads, dh)), (0, 2, 1, 3))
    scores = tn.scale(tn.matmul(q, k), 1.0 / np.sqrt(dh))
    if key_valid is not None and not key_valid.all():
        bias = np.where(key_valid, 0.0, -1e9).astype(scores.dtype)[:, None, None, :]
        scores = tn.add(scores, Tensor(np.broadcast_to(bias, scores.shape).copy()))
    if null_key:
        zero = Tensor(np.zeros(scores.shape[:-1] + (1,), dtype=scores.dtype))
        attn = tn.slice_axis(tn.softmax(tn.concat([scores, zero], axis=3)), 0, lk, axis=3)
    else:
        attn = tn.softmax(scores)
    ctx = tn.reshape(tn.permute(tn.matmul(attn, v), (0, 2, 1, 3)), (b, lq, d))
    return _lin(ctx, w, f"{prefix}.o")


def _encoder_block(xq: Tensor, xkv: Tensor, w: ModelWeights, prefix: str, config: ModelConfig,
                   key_valid, rng, train: bool, null_key: bool = False) -> Tensor:
    """Post-norm transformer block; self-attention when ``xkv is xq``."""
    p, eps = config.dropout_p, config.ln_eps
    att = _attention(xq, xkv, w, prefix, config.num_heads, key_valid, null_key)
    h = tn.layer_norm(tn.add(xq, tn.dropout(att, p, rng, train)),
                      w[f"{prefix}.ln1.g"], w[f"{prefix}.ln1.b"], eps)
    ff = _lin(tn.gelu(_lin(h, w, f"{prefix}.ffn1")), w, f"{prefix}.ffn2")
    return tn.layer_norm(tn.add(h, tn.dropout(ff, p, rng, train)),
                         w[f"{prefix}.ln2.g"], w[f"{prefix}.ln2.b"], eps)


def _cross_layer(video, text, weights, config, layer, train_mode, rng, video_valid, text_valid):
    nk = config.null_key
    v_out = _encoder_block(video, text, weights, f"cross.{layer}.video", config, text_valid, rng, train_mode, nk)
    t_out = _encoder_block(text, video, weights, f"cross.{layer}.text", config, video_valid, rng, train_mode, nk)
    return v_out, t_out


def _unbatch(x: Tensor) -> Tensor:
    return tn.reshape(x, x.shape[1:])


def _batch1(x) -> Tensor:
    x = tn.as_tensor(x)
    return tn.reshape(x, (1,) + x.shape)


def cross_attention_layer(video: Tensor, text: Tensor, weights: ModelWeights, config: ModelConfig,
                          layer: int = 0, train_mode: bool = False, rng=None) -> tuple[Tensor, Tensor]:
    """One cross-attention layer updating both streams of a single clip.

    The video stream queries the text tokens and the text stream queries the
    video frames; each then goes through the usual residual, norm and
    feed-forward wiring.
    """
    if video.shape[-1] != text.shape[-1]:
        raise ShapeError(f"cross_attention_layer: video {video.shape} and text {text.shape} widths differ")
    v, t = _cross_layer(_batch1(video), _batch1(text), weights, config, layer, train_mode, rng, None, None)
    return _unbatch(v), _unbatch(t)


def _encode_streams(video_seg, text, weights, config, train_mode, rng, video_valid, text_valid):
    v, t = video_seg, text
    for i in range(config.num_layers):
        v, t = _cross_layer(v, t, weights, config, i, train_mode, rng, video_valid, text_valid)
    return v, t


def encode_segment(video_seg: Tensor, text: Tensor, weights: ModelWeights, config: ModelConfig,
                   train_mode: bool = False, rng=None) -> Tensor:
    """Run the layer stack on one segment and return the video stream."""
    if video_seg.shape[0] < 1:
        raise ShapeError("encode_segment: empty segment")
    v, _ = _encode_streams(_batch1(video_seg), _batch1(text), weights, config, train_mode, rng, None, None)
    return _unbatch(v)


def segment_sizes(length: int, k: int) -> list[int]:
    """Near-equal contiguous split; earlier segments take the remainder."""
    if length < k:
        raise ConfigError(f"video length {length} is shorter than num_segments={k}")
    base, extra = divmod(length, k)
    return [base + 1 if i < extra else base for i in range(k)]


def _two_layer_head(x: Tensor, w: ModelWeights, name: str) -> Tensor:
    h = tn.gelu(_lin(x, w, f"{name}.fc1"))
    out = _lin(h, w, f"{name}.fc2")
    return tn.reshape(out, x.shape[:-1])


@dataclass
class BatchForwardOutput:
    """Head outputs for a padded batch; rows past ``lengths[b]`` are padding."""

    start_logits: Tensor  # [B, L]
    end_logits: Tensor
    highlight_scores: Tensor
    saliency_scores: Tensor
    nil_scores: Tensor  # [B, K]
    final_video_features: Tensor  # [B, L, d]
    projected_video_features: Tensor  # [B, L, d]
    projected_text_features: Tensor  # [B, L_t, d]
    lengths: list[int]
    valid_lengths: list[int]
    text_lengths: list[int]
    segment_sizes: list[list[int]]

    def sample(self, b: int) -> ForwardOutput:
        """Differentiable per-clip view, trimmed to that clip's own length."""
        n, lt = self.lengths[b], self.text_lengths[b]
        L = self.start_logits.shape[1]
        rows = b * L + np.arange(n)

        def seq(x):
            return tn.take(tn.reshape(x, (-1,)), rows)

        def feat(x):
            return tn.take(tn.reshape(x, (-1, x.shape[-1])), rows)

        lt_max = self.projected_text_features.shape[1]
        k = self.nil_scores.shape[1]
        ptf = self.projected_text_features
        return ForwardOutput(
            start_logits=seq(self.start_logits),
            end_logits=seq(self.end_logits),
            highlight_scores=seq(self.highlight_scores),
            saliency_scores=seq(self.saliency_scores),
            nil_scores=tn.take(tn.reshape(self.nil_scores, (-1,)), b * k + np.arange(k)),
            final_video_features=feat(self.final_video_features),
            projected_video_features=feat(self.projected_video_features),
            projected_text_features=tn.take(tn.reshape(ptf, (-1, ptf.shape[-1])), b * lt_max + np.arange(lt)),
            segment_sizes=self.segment_sizes[b],
        )


def forward_batch(videos, texts, weights: ModelWeights, config: ModelConfig, train_mode: bool = False,
                  rng: np.random.Generator | None = None, valid_lengths=None,
                  nil_override=None) -> BatchForwardOutput:
    """Forward pass over clips of different lengths.

    Every clip is segmented on its own length. Segment rows of all clips are
    gathered into padded ``[B, S_k, d]`` tensors with masked attention keys,
    so results match clip-by-clip evaluation. ``valid_lengths`` marks trailing
    rows of a clip as padding (masked as keys, excluded from pooling).
    ``nil_override`` replaces the computed segment confidences.
    """
    dt = weights["video_proj.w"].dtype
    d, K = config.d_model, config.num_segments
    bsz = len(videos)
    lengths = [int(v.shape[0]) for v in videos]
    tlens = [int(t.shape[0]) for t in texts]
    for v, t in zip(videos, texts):
        if v.ndim != 2 or t.ndim != 2 or v.shape[1] != config.d_video_in or t.shape[1] != config.d_text_in:
            raise ShapeError(
                f"forward: inputs {v.shape}/{t.shape} do not match "
                f"d_video_in={config.d_video_in}, d_text_in={config.d_text_in}")
    valid_lengths = list(lengths) if valid_lengths is None else list(valid_lengths)
    sizes = [segment_sizes(n, K) for n in lengths]
    L, LT = max(lengths), max(tlens)

    vid = np.zeros((bsz, L, config.d_video_in), dtype=dt)
    txt = np.zeros((bsz, LT, config.d_text_in), dtype=dt)
    for b in range(bsz):
        vid[b, :lengths[b]] = videos[b]
        txt[b, :tlens[b]] = texts[b]
    frame_valid = np.arange(L)[None, :] < np.asarray(valid_lengths)[:, None]
    text_valid = np.arange(LT)[None, :] < np.asarray(tlens)[:, None]
    pe_v = np.broadcast_to(positional_encoding(L, d, dt), (bsz, L, d)).copy()
    pe_t = np.broadcast_to(positional_encoding(LT, d, dt), (bsz, LT, d)).copy()
    v = tn.add(_lin(Tensor(vid), weights, "video_proj"), Tensor(pe_v))
    t = tn.add(_lin(Tensor(txt), weights, "text_proj"), Tensor(pe_t))

    # flat row bsz*L is a zero row used to fill padded gather slots
    zero_row = bsz * L
    v_flat = tn.concat([tn.reshape(v, (bsz * L, d)), Tensor(np.zeros((1, d), dtype=dt))], axis=0)
    offsets = [np.cumsum([0] + s[:-1]) for s in sizes]

    feats, scaled, nils = [], [], []
    text_acc = None
    seg_base = 0
    back_index = np.full(bsz * L, -1, dtype=np.int64)
    for k in range(K):
        S = max(s[k] for s in sizes)
        idx = np.full((bsz, S), zero_row, dtype=np.int64)
        valid = np.zeros((bsz, S), dtype=bool)
        for b in range(bsz):
            n_k, o = sizes[b][k], int(offsets[b][k])
            idx[b, :n_k] = b * L + o + np.arange(n_k)
            valid[b, :n_k] = (o + np.arange(n_k)) < valid_lengths[b]
            back_index[b * L + o: b * L + o + n_k] = seg_base + b * S + np.arange(n_k)
        seg = tn.reshape(tn.take(v_flat, idx.reshape(-1)), (bsz, S, d))
        key_valid = valid | ~valid.any(axis=1, keepdims=True)
        f_k, t_k = _encode_streams(seg, t, weights, config, train_mode, rng, key_valid, text_valid)

        count = valid.sum(axis=1)
        inv = np.where(count > 0, 1.0 / np.maximum(count, 1), 0.0)
        pool_w = (valid * inv[:, None]).astype(dt)
        pooled = tn.sum(tn.mul_rows(f_k, Tensor(pool_w)), axis=1)
        nil = tn.reshape(tn.sigmoid(_lin(pooled, weights, "npm")), (bsz,))
        if nil_override is not None:
            nil = Tensor(np.broadcast_to(np.asarray(nil_override, dtype=dt)[..., k], (bsz,)).copy())
        nils.append(tn.reshape(nil, (bsz, 1)))
        nil_rows = tn.reshape(tn.take(nil, np.repeat(np.arange(bsz), S)), (bsz, S))
        feats.append(tn.reshape(f_k, (bsz * S, d)))
        scaled.append(tn.reshape(tn.mul_rows(f_k, nil_rows), (bsz * S, d)))

        seg_has = valid.any(axis=1)
        t_gate = Tensor(np.broadcast_to(seg_has[:, None], (bsz, LT)).astype(dt))
        contrib = tn.mul_rows(t_k, t_gate)
        text_acc = contrib if text_acc is None else tn.add(text_acc, contrib)
        seg_base += bsz * S

    n_seg = np.array([sum(1 for k in range(K) if (o := int(offsets[b][k])) < valid_lengths[b])
                      for b in range(bsz)], dtype=np.float64)
    back_index[back_index < 0] = seg_base
    zeros = Tensor(np.zeros((1, d), dtype=dt))

    def regroup(parts):
        flat = tn.concat(parts + [zeros], axis=0)
        return tn.reshape(tn.take(flat, back_index), (bsz, L, d))

    final = regroup(scaled)
    unscaled = regroup(feats)
    highlight = tn.sigmoid(_two_layer_head(final, weights, "highlight"))
    saliency = _two_layer_head(final, weights, "saliency")

    # conditioned span predictor: the end branch reads the start branch's output
    gated = tn.mul_rows(final, highlight)
    h, hidden = gated, []
    for j in range(config.span_encoder_layers):
        h = _encoder_block(h, h, weights, f"span.enc.{j}", config, frame_valid, rng, train_mode)
        hidden.append(h)
    h_start, h_end = hidden[0], hidden[-1]
    start_logits = tn.reshape(_lin(tn.concat([h_start, gated], axis=2), weights, "span.start"), (bsz, L))
    end_logits = tn.reshape(_lin(tn.concat([h_end, gated], axis=2), weights, "span.end"), (bsz, L))

    text_mean = tn.mul_rows(text_acc, Tensor(np.broadcast_to((1.0 / n_seg)[:, None], (bsz, LT)).astype(dt)))
    proj_v = tn.l2_normalize(_lin(unscaled, weights, "contrast"))
    proj_t = tn.l2_normalize(_lin(text_mean, weights, "contrast"))

    return BatchForwardOutput(
        start_logits=start_logits,
        end_logits=end_logits,
        highlight_scores=highlight,
        saliency_scores=saliency,
        nil_scores=tn.concat(nils, axis=1),
        final_video_features=final,
        projected_video_features=proj_v,
        projected_text_features=proj_t,
        lengths=lengths,
        valid_lengths=valid_lengths,
        text_lengths=tlens,
        segment_sizes=sizes,
    )


def multi_scale_forward(video, text, weights: ModelWeights, config: ModelConfig,
                        train_mode: bool = False, rng: np.random.Generator | None = None,
                        valid_len: int | None = None, nil_override=None) -> ForwardOutput:
    """Full forward pass for one clip/query pair."""
    dt = weights["video_proj.w"].dtype
    video = np.asarray(tn.as_tensor(video).data, dtype=dt)
    text = np.asarray(tn.as_tensor(text).data, dtype=dt)
    out = forward_batch([video], [text], weights, config, train_mode, rng,
                        None if valid_len is None else [valid_len], nil_override)
    return out.sample(0)


def pad_to_segments(video: np.ndarray, k: int) -> tuple[np.ndarray, int]:
    """Right-pad clips shorter than ``k`` frames with zero rows."""
    n = video.shape[0]
    if n >= k:
        return video, n
    padded = np.zeros((k, video.shape[1]), dtype=video.dtype)
    padded[:n] = video
    return padded, n


def forward_clips(videos, texts, weights: ModelWeights, config: ModelConfig, train_mode: bool = False,
                  rng=None) -> BatchForwardOutput:
    """Batched forward that pads clips shorter than ``num_segments``."""
    dt = weights["video_proj.w"].dtype
    padded = [pad_to_segments(np.asarray(v, dtype=dt), config.num_segments) for v in videos]
    return forward_batch([p for p, _ in padded], [np.asarray(t, dtype=dt) for t in texts], weights,
                         config, train_mode, rng, [n for _, n in padded])


def forward_clip(video: np.ndarray, text: np.ndarray, weights: ModelWeights, config: ModelConfig,
                 train_mode: bool = False, rng=None) -> ForwardOutput:
    return forward_clips([video], [text], weights, config, train_mode, rng).sample(0)


# --------------------------------------------------------------------------
# checkpoints

MAGIC = b"MSXT"
FORMAT_VERSION = 1


def checkpoint_bytes(config: ModelConfig, weights: ModelWeights) -> bytes:
    cfg = config.to_json().encode("utf-8")
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(cfg)), cfg]
    for name, shape in parameter_shapes(config):
        arr = weights[name].data
        if arr.shape != shape:
            raise ShapeError(f"checkpoint: parameter {name} has shape {arr.shape}, expected {shape}")
        parts.append(struct.pack(f"<I{len(shape)}I", len(shape), *shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def save_checkpoint(path, config: ModelConfig, weights: ModelWeights) -> None:
    Path(path).write_bytes(checkpoint_bytes(config, weights))


def load_checkpoint(path, dtype=np.float32) -> tuple[ModelConfig, ModelWeights]:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    try:
        version, n = struct.unpack_from("<II", buf, 4)
        if version != FORMAT_VERSION:
            raise CheckpointError(f"{path}: unsupported format version {version}")
        off = 12
        config = ModelConfig.from_dict(json.loads(buf[off:off + n].decode("utf-8")))
        off += n
        weights: ModelWeights = {}
        for name, shape in parameter_shapes(config):
            (rank,) = struct.unpack_from("<I", buf, off)
            dims = struct.unpack_from(f"<{rank}I", buf, off + 4)
            off += 4 + 4 * rank
            if tuple(dims) != shape:
                raise CheckpointError(f"{path}: parameter {name} stored as {dims}, expected {shape}")
            count = int(np.prod(shape))
            if off + 4 * count > len(buf):
                raise CheckpointError(f"{path}: truncated inside parameter {name}")
            arr = np.frombuffer(buf, dtype="<f4", count=count, offset=off).reshape(shape)
            off += 4 * count
            weights[name] = Tensor(arr.astype(dtype), requires_grad=True)
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated checkpoint") from exc
    if off != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - off} trailing bytes")
    return config, weights
