"""Command-line entry point: ``momentloc <command> [flags]``.

Every command reads a JSON run config with the sections ``model``, ``train``,
``augment``, ``dataset`` and ``eval``. Missing sections or keys take their
defaults and unknown keys are rejected before any work starts.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .augmentation import AugmentConfig, combined_augment
from .dataset import (DatasetConfigError, DatasetCorruptionError, GeneratorConfig, canonical_json,
                      generate_dataset, read_dataset, write_dataset)
from .evaluation import (format_metric_table, merge_prediction_files, metric_grid, predict_clips,
                         read_predictions, write_predictions)
from .model import CheckpointError, ConfigError, ModelConfig, load_checkpoint
from .rng import RngTree
from .tensor import ShapeError
from .training import TrainConfig, TrainingDivergedError, augment_as_dict, train

log = logging.getLogger("momentloc")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_MISSING_FILE = 3
EXIT_SCHEMA = 4
EXIT_SHAPE = 5
EXIT_DIVERGED = 6

EXIT_CODES_HELP = """exit codes:
  0  success
  1  unexpected failure
  2  bad command-line usage
  3  missing file (config, dataset, checkpoint or prediction file)
  4  schema violation (malformed or unknown config keys, bad values)
  5  shape mismatch or corrupt data (feature files, checkpoints, widths)
  6  training diverged (non-finite loss)

Errors are written to stderr as one JSON line: {"error": KIND, "message": TEXT}.
Set MOMENT_LOG_LEVEL to error, info or debug to control log output."""


class CliError(Exception):
    def __init__(self, code: int, kind: str, message: str):
        super().__init__(message)
        self.code = code
        self.kind = kind


class SchemaError(CliError):
    def __init__(self, message: str):
        super().__init__(EXIT_SCHEMA, "schema", message)


@dataclass(frozen=True)
class EvalConfig:
    k: int = 5
    split: str = "val"

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("eval.k must be at least 1")


SECTIONS = ("model", "train", "augment", "dataset", "eval")


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    dataset: GeneratorConfig = field(default_factory=GeneratorConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    source: str = "{}"

    def as_dict(self) -> dict:
        train = self.train.as_dict()
        train.pop("augment")
        return {
            "model": asdict(self.model),
            "train": train,
            "augment": augment_as_dict(self.augment),
            "dataset": self.dataset.as_dict(),
            "eval": asdict(self.eval),
        }


def _section(doc: dict, name: str) -> dict:
    sec = doc.get(name, {})
    if not isinstance(sec, dict):
        raise SchemaError(f"section {name!r} must be an object")
    return sec


def _known_keys(section: dict, cls, name: str, skip=()) -> None:
    unknown = set(section) - ({f.name for f in fields(cls)} - set(skip))
    if unknown:
        raise SchemaError(f"unknown keys in section {name!r}: {sorted(unknown)}")


def parse_run_config(doc) -> RunConfig:
    """Validate a decoded JSON document and build the typed config."""
    if not isinstance(doc, dict):
        raise SchemaError("run config must be a JSON object")
    unknown = set(doc) - set(SECTIONS)
    if unknown:
        raise SchemaError(f"unknown top-level keys: {sorted(unknown)}")
    try:
        aug_d = dict(_section(doc, "augment"))
        _known_keys(aug_d, AugmentConfig, "augment")
        if "ratio_interval" in aug_d:
            aug_d["ratio_interval"] = tuple(aug_d["ratio_interval"])
        augment = AugmentConfig(**aug_d)

        model_d = _section(doc, "model")
        _known_keys(model_d, ModelConfig, "model")
        model = ModelConfig.from_dict(model_d)

        train_d = _section(doc, "train")
        _known_keys(train_d, TrainConfig, "train", skip=("augment",))
        train_cfg = TrainConfig.from_dict(train_d, augment=augment)

        data_d = _section(doc, "dataset")
        _known_keys(data_d, GeneratorConfig, "dataset")
        dataset = GeneratorConfig.from_dict(data_d)

        eval_d = _section(doc, "eval")
        _known_keys(eval_d, EvalConfig, "eval")
        ev = EvalConfig(**eval_d)
    except SchemaError:
        raise
    except (TypeError, ValueError) as exc:
        raise SchemaError(str(exc)) from None
    if dataset.d_v != model.d_video_in or dataset.d_t != model.d_text_in:
        raise SchemaError(
            f"dataset widths (d_v={dataset.d_v}, d_t={dataset.d_t}) do not match model inputs "
            f"(d_video_in={model.d_video_in}, d_text_in={model.d_text_in})")
    return RunConfig(model, train_cfg, augment, dataset, ev, canonical_json(doc))


def load_run_config(path) -> RunConfig:
    if path is None:
        return parse_run_config({})
    p = Path(path)
    if not p.is_file():
        raise CliError(EXIT_MISSING_FILE, "missing_file", f"config file not found: {p}")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"config is not valid JSON: {exc}") from None
    return parse_run_config(doc)


def _require_dir(path, what: str) -> Path:
    p = Path(path)
    if not (p / "manifest.json").is_file():
        raise CliError(EXIT_MISSING_FILE, "missing_file", f"{what} has no manifest.json: {p}")
    return p


def _require_file(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise CliError(EXIT_MISSING_FILE, "missing_file", f"{what} not found: {p}")
    return p


def _load_split(data: Path, split: str, model: ModelConfig | None = None):
    clips = read_dataset(data, splits=[split]).get(split)
    if clips is None:
        raise SchemaError(f"dataset has no split {split!r}")
    if model is not None and clips:
        dv, dt = clips[0].video_features.shape[1], clips[0].text_features.shape[1]
        if (dv, dt) != (model.d_video_in, model.d_text_in):
            raise CliError(EXIT_SHAPE, "shape",
                           f"dataset widths ({dv}, {dt}) do not match model inputs "
                           f"({model.d_video_in}, {model.d_text_in})")
    return clips


def _report(metrics: dict, config: str | None, out: Path) -> None:
    print(format_metric_table(metrics))
    record = {"metrics": metrics, "run_config": json.loads(config) if config else None}
    out.write_text(canonical_json(record) + "\n")


# --------------------------------------------------------------------------
# commands


def cmd_generate(args) -> int:
    cfg = load_run_config(args.config)
    splits = generate_dataset(cfg.dataset)
    write_dataset(splits, args.out, cfg.dataset, extra={"run_config": json.loads(cfg.source)})
    log.info("wrote %s", {k: len(v) for k, v in splits.items()})
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    data = _require_dir(args.data, "dataset")
    train_clips = _load_split(data, "train", cfg.model)
    val_clips = _load_split(data, cfg.eval.split, cfg.model) if cfg.eval.split != "train" else []
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "run_config.json").write_text(cfg.source + "\n")
    result = train(train_clips, val_clips, cfg.model, cfg.train, out)
    if result.final_metrics:
        print(format_metric_table(result.final_metrics))
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = load_run_config(args.config)
    ckpt = _require_file(args.checkpoint, "checkpoint")
    data = _require_dir(args.data, "dataset")
    model_cfg, weights = load_checkpoint(ckpt)
    split = args.split or cfg.eval.split
    clips = _load_split(data, split, model_cfg)
    preds = predict_clips(weights, model_cfg, clips, k=cfg.eval.k)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_predictions(out, preds, {c.clip_id: c.fps_feature for c in clips})
    metrics = metric_grid(preds, [c.span for c in clips])
    _report(metrics, cfg.source, out.with_name(out.name + ".report.json"))
    return EXIT_OK


def cmd_ensemble(args) -> int:
    if len(args.pred) != 2:
        raise CliError(EXIT_USAGE, "usage", "ensemble takes exactly two --pred files")
    cfg = load_run_config(args.config)
    paths = [_require_file(p, "prediction file") for p in args.pred]
    clips = None
    fps = None
    if args.data:
        clips = _load_split(_require_dir(args.data, "dataset"), args.split or cfg.eval.split)
        fps = {c.clip_id: c.fps_feature for c in clips}
    try:
        a, b = (read_predictions(p, fps) for p in paths)
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"malformed prediction file: {exc!r}") from None
    merged = merge_prediction_files(a, b, cfg.eval.k)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if fps is None:
        # candidates are still in seconds; write them through unchanged
        lines = [json.dumps({"clip_id": p.clip_id, "query_idx": p.query_idx,
                             "candidates": [list(c) for c in p.candidates]}, sort_keys=True)
                 for p in merged]
        out.write_text("".join(line + "\n" for line in lines))
        return EXIT_OK
    write_predictions(out, merged, fps)
    truth = {c.clip_id: c.span for c in clips}
    missing = [p.clip_id for p in merged if p.clip_id not in truth]
    if missing:
        raise SchemaError(f"predictions reference clips not in the dataset split: {missing[:3]}")
    metrics = metric_grid(merged, [truth[p.clip_id] for p in merged])
    _report(metrics, cfg.source, out.with_name(out.name + ".report.json"))
    return EXIT_OK


def cmd_augment_preview(args) -> int:
    cfg = load_run_config(args.config)
    clips = _load_split(_require_dir(args.data, "dataset"), "train")
    if len(clips) < 2:
        raise SchemaError("augment-preview needs at least two training clips")
    if args.n < 0:
        raise CliError(EXIT_USAGE, "usage", "--n must be non-negative")
    tree = RngTree(cfg.train.seed)
    lines = []
    for i in range(args.n):
        rng = tree.stream("preview", i)
        src = clips[i % len(clips)]
        j = int(rng.integers(len(clips) - 1))
        bg = clips[j + 1 if j >= i % len(clips) else j]
        aug = combined_augment(src, bg, cfg.augment, rng)
        lines.append(json.dumps({
            "clip_id": src.clip_id,
            "background_id": bg.clip_id,
            "before": {"span": [src.span.start, src.span.end], "length": src.num_frames},
            "after": {"span": [aug.span.start, aug.span.end], "length": aug.num_frames},
            "meta": aug.meta,
        }, sort_keys=True))
    text = "".join(line + "\n" for line in lines)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


# --------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    """Report usage errors in the same JSON form as every other failure."""

    def error(self, message):
        sys.exit(_fail(EXIT_USAGE, "usage", f"{self.prog}: {message}"))


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="momentloc",
        description="Multi-scale cross-modal moment localization on frame features.",
        epilog=EXIT_CODES_HELP,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_, description=help_, epilog=EXIT_CODES_HELP,
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        p.set_defaults(func=func)
        return p

    p = add("generate", cmd_generate, "write a synthetic dataset")
    p.add_argument("--config")
    p.add_argument("--out", required=True)

    p = add("train", cmd_train, "train a model and write checkpoints plus metrics.jsonl")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)

    p = add("eval", cmd_eval, "predict spans for a split and print the metric table")
    p.add_argument("--config")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split")
    p.add_argument("--out", required=True)

    p = add("ensemble", cmd_ensemble, "merge two prediction files, keeping the top candidates")
    p.add_argument("--config")
    p.add_argument("--pred", action="append", required=True)
    p.add_argument("--data", help="dataset directory; enables frame conversion and metrics")
    p.add_argument("--split")
    p.add_argument("--out", required=True)

    p = add("augment-preview", cmd_augment_preview, "print spans before and after augmentation")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--n", type=int, default=10)
    p.add_argument("--out")
    return parser


LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


def _fail(code: int, kind: str, message: str) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": " ".join(str(message).split())}) + "\n")
    return code


def main(argv=None) -> int:
    level_name = os.environ.get("MOMENT_LOG_LEVEL", "info").lower()
    if level_name not in LOG_LEVELS:
        return _fail(EXIT_SCHEMA, "schema", f"MOMENT_LOG_LEVEL must be one of {sorted(LOG_LEVELS)}")
    logging.basicConfig(level=LOG_LEVELS[level_name], format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr, force=True)
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        return _fail(exc.code, exc.kind, str(exc))
    except FileNotFoundError as exc:
        return _fail(EXIT_MISSING_FILE, "missing_file", str(exc))
    except (DatasetCorruptionError, CheckpointError, ShapeError) as exc:
        return _fail(EXIT_SHAPE, "shape", str(exc))
    except (ConfigError, DatasetConfigError) as exc:
        return _fail(EXIT_SCHEMA, "schema", str(exc))
    except TrainingDivergedError as exc:
        return _fail(EXIT_DIVERGED, "diverged", str(exc))
    except Exception as exc:  # noqa: BLE001
        log.debug("unexpected failure", exc_info=True)
        return _fail(EXIT_FAILURE, "failure", f"{type(exc).__name__}: {exc}")


if __name__ == "__main__":
    sys.exit(main())
