"""Synthetic clip generation and the on-disk feature format.

Each clip is stored as one ``.clpf`` file::

    b"CLPF" | u32 version | u32 l_v | u32 d_v | u32 L_t | u32 d_t
    | video rows (f32 LE) | text rows (f32 LE)

and a ``manifest.json`` (canonical JSON) indexes all clips by split.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .rng import RngTree
from .types import ClipSample, MomentSpan

CLPF_MAGIC = b"CLPF"
CLPF_VERSION = 1
MANIFEST_VERSION = 1
HEADER = struct.Struct("<4s5I")


class DatasetConfigError(ValueError):
    pass


class DatasetCorruptionError(ValueError):
    def __init__(self, clip_id: str, reason: str):
        super().__init__(f"clip {clip_id}: {reason}")
        self.clip_id = clip_id


@dataclass(frozen=True)
class GeneratorConfig:
    seed: int = 0
    snr: float = 1.0
    d_v: int = 32
    d_t: int = 24
    clip_len_range: tuple[int, int] = (96, 160)
    span_len_range: tuple[int, int] = (8, 24)
    text_len_range: tuple[int, int] = (4, 12)
    n_train: int = 500
    n_val: int = 100
    fps_feature: float = 2.0

    def __post_init__(self):
        for name in ("clip_len_range", "span_len_range", "text_len_range"):
            lo, hi = getattr(self, name)
            if not 1 <= lo <= hi:
                raise DatasetConfigError(f"{name} must satisfy 1 <= lo <= hi, got {(lo, hi)}")
            object.__setattr__(self, name, (int(lo), int(hi)))
        if self.span_len_range[1] > self.clip_len_range[0]:
            raise DatasetConfigError(
                f"span_len_range {self.span_len_range} exceeds clip_len_range {self.clip_len_range}")
        if self.snr < 0:
            raise DatasetConfigError("snr must be non-negative")
        if self.d_v < 1 or self.d_t < 1 or self.n_train < 0 or self.n_val < 0:
            raise DatasetConfigError("feature widths must be positive and split sizes non-negative")
        if self.fps_feature <= 0:
            raise DatasetConfigError("fps_feature must be positive")

    def as_dict(self) -> dict:
        d = asdict(self)
        for k in ("clip_len_range", "span_len_range", "text_len_range"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise DatasetConfigError(f"unknown dataset config keys: {sorted(unknown)}")
        d = dict(d)
        for k in ("clip_len_range", "span_len_range", "text_len_range"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


def mixing_matrix(cfg: GeneratorConfig) -> np.ndarray:
    """Fixed ``d_v x d_t`` map from query signature to the in-span offset."""
    rng = RngTree(cfg.seed).stream("mixing", 0)
    return rng.normal(0.0, math.sqrt(2.0 / cfg.d_t), size=(cfg.d_v, cfg.d_t))


def generate_clip(cfg: GeneratorConfig, rng: np.random.Generator, clip_id: str = "clip",
                  mixing: np.ndarray | None = None) -> ClipSample:
    """Plant a text-dependent direction into the frames of a random span."""
    m = mixing_matrix(cfg) if mixing is None else mixing
    lt = int(rng.integers(cfg.text_len_range[0], cfg.text_len_range[1] + 1))
    text = rng.standard_normal((lt, cfg.d_t))
    q = text.mean(axis=0)
    lv = int(rng.integers(cfg.clip_len_range[0], cfg.clip_len_range[1] + 1))
    span_len = int(rng.integers(cfg.span_len_range[0], min(cfg.span_len_range[1], lv) + 1))
    start = int(rng.integers(0, lv - span_len + 1))
    video = rng.standard_normal((lv, cfg.d_v))
    video[start:start + span_len] += cfg.snr * (m @ q)
    return ClipSample(
        clip_id=clip_id,
        video_features=video.astype(np.float32),
        text_features=text.astype(np.float32),
        span=MomentSpan(start, start + span_len - 1),
        fps_feature=cfg.fps_feature,
    )


def generate_dataset(cfg: GeneratorConfig) -> dict[str, list[ClipSample]]:
    tree = RngTree(cfg.seed)
    m = mixing_matrix(cfg)
    splits: dict[str, list[ClipSample]] = {"train": [], "val": []}
    index = 0
    for split, n in (("train", cfg.n_train), ("val", cfg.n_val)):
        for _ in range(n):
            splits[split].append(
                generate_clip(cfg, tree.stream("clip", index), f"{split}-{index:06d}", m))
            index += 1
    return splits


# --------------------------------------------------------------------------
# binary format


def encode_clip(clip: ClipSample) -> bytes:
    v = np.ascontiguousarray(clip.video_features, dtype="<f4")
    t = np.ascontiguousarray(clip.text_features, dtype="<f4")
    head = HEADER.pack(CLPF_MAGIC, CLPF_VERSION, v.shape[0], v.shape[1], t.shape[0], t.shape[1])
    return head + v.tobytes() + t.tobytes()


def decode_clip(buf: bytes, clip_id: str) -> tuple[np.ndarray, np.ndarray]:
    if len(buf) < HEADER.size:
        raise DatasetCorruptionError(clip_id, "feature file shorter than its header")
    magic, version, lv, dv, lt, dt = HEADER.unpack_from(buf, 0)
    if magic != CLPF_MAGIC:
        raise DatasetCorruptionError(clip_id, "bad magic in feature file")
    if version != CLPF_VERSION:
        raise DatasetCorruptionError(clip_id, f"unsupported feature format version {version}")
    expected = HEADER.size + 4 * (lv * dv + lt * dt)
    if len(buf) != expected:
        raise DatasetCorruptionError(clip_id, f"feature file has {len(buf)} bytes, expected {expected}")
    video = np.frombuffer(buf, "<f4", lv * dv, HEADER.size).reshape(lv, dv).astype(np.float32)
    text = np.frombuffer(buf, "<f4", lt * dt, HEADER.size + 4 * lv * dv).reshape(lt, dt).astype(np.float32)
    return video, text


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def write_dataset(splits: dict[str, list[ClipSample]], path, generator: GeneratorConfig | None = None,
                  extra: dict | None = None) -> dict:
    """Write every clip plus ``manifest.json`` under ``path``; returns the manifest."""
    root = Path(path)
    (root / "features").mkdir(parents=True, exist_ok=True)
    d_v = d_t = None
    seen: set[str] = set()
    manifest_splits: dict[str, list[dict]] = {}
    for split, clips in splits.items():
        records = []
        for clip in clips:
            if clip.clip_id in seen:
                raise ValueError(f"duplicate clip_id {clip.clip_id}")
            seen.add(clip.clip_id)
            lv, dv = clip.video_features.shape
            lt, dt = clip.text_features.shape
            if d_v is None:
                d_v, d_t = dv, dt
            elif (dv, dt) != (d_v, d_t):
                raise ValueError(f"clip {clip.clip_id}: feature widths ({dv}, {dt}) differ from ({d_v}, {d_t})")
            blob = encode_clip(clip)
            rel = f"features/{clip.clip_id}.clpf"
            (root / rel).write_bytes(blob)
            records.append({
                "clip_id": clip.clip_id,
                "file": rel,
                "l_v": lv,
                "L_t": lt,
                "span": [clip.span.start, clip.span.end],
                "fps_feature": clip.fps_feature,
                "video_offset": HEADER.size,
                "text_offset": HEADER.size + 4 * lv * dv,
                "nbytes": len(blob),
                "sha256": hashlib.sha256(blob).hexdigest(),
            })
        manifest_splits[split] = records
    manifest = {
        "version": MANIFEST_VERSION,
        "d_v": d_v if d_v is not None else (generator.d_v if generator else 0),
        "d_t": d_t if d_t is not None else (generator.d_t if generator else 0),
        "splits": manifest_splits,
        "generator": generator.as_dict() if generator else None,
    }
    if extra:
        manifest.update(extra)
    (root / "manifest.json").write_text(canonical_json(manifest) + "\n")
    return manifest


def read_manifest(path) -> dict:
    return json.loads((Path(path) / "manifest.json").read_text())


def read_dataset(path, splits=None) -> dict[str, list[ClipSample]]:
    root = Path(path)
    manifest = read_manifest(root)
    out: dict[str, list[ClipSample]] = {}
    for split, records in manifest["splits"].items():
        if splits is not None and split not in splits:
            continue
        clips = []
        for rec in records:
            cid = rec["clip_id"]
            fpath = root / rec["file"]
            if not fpath.exists():
                raise DatasetCorruptionError(cid, f"missing feature file {rec['file']}")
            blob = fpath.read_bytes()
            if len(blob) != rec["nbytes"] or hashlib.sha256(blob).hexdigest() != rec["sha256"]:
                raise DatasetCorruptionError(cid, "checksum mismatch")
            video, text = decode_clip(blob, cid)
            if video.shape != (rec["l_v"], manifest["d_v"]) or text.shape != (rec["L_t"], manifest["d_t"]):
                raise DatasetCorruptionError(cid, "feature shape does not match manifest")
            clips.append(ClipSample(cid, video, text, MomentSpan(*rec["span"]), rec["fps_feature"]))
        out[split] = clips
    return out


def seconds_to_frames(t_start: float, t_end: float, fps_feature: float,
                      num_frames: int | None = None) -> MomentSpan:
    s = int(math.floor(t_start * fps_feature))
    e = max(s, int(math.ceil(t_end * fps_feature)) - 1)
    if num_frames is not None:
        s = min(max(s, 0), num_frames - 1)
        e = min(max(e, s), num_frames - 1)
    return MomentSpan(max(s, 0), max(e, 0))
