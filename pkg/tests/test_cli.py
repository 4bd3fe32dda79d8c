import json
import subprocess
import sys

import numpy as np
import pytest

from momentloc.cli import (EXIT_DIVERGED, EXIT_MISSING_FILE, EXIT_OK, EXIT_SCHEMA, EXIT_SHAPE, EXIT_USAGE,
                           SchemaError, main, parse_run_config)
from momentloc.dataset import GeneratorConfig, generate_dataset, write_dataset

SMALL = {
    "dataset": {"seed": 4, "n_train": 6, "n_val": 3, "clip_len_range": [24, 36], "span_len_range": [4, 8]},
    "model": {"num_layers": 1, "d_model": 16, "num_heads": 2, "ffn_mult": 2},
    "train": {"epochs": 1, "batch_size": 3},
}


@pytest.fixture(autouse=True)
def quiet_logs(monkeypatch):
    monkeypatch.setenv("MOMENT_LOG_LEVEL", "error")


def write_config(path, doc):
    path.write_text(json.dumps(doc))
    return str(path)


def one_error_line(capsys):
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1
    doc = json.loads(err[0])
    assert set(doc) == {"error", "message"}
    return doc


@pytest.fixture(scope="module")
def small_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = write_config(root / "cfg.json", SMALL)
    assert main(["generate", "--config", cfg, "--out", str(root / "data")]) == EXIT_OK
    return root, cfg


def test_run_config_defaults_and_unknown_keys():
    cfg = parse_run_config({})
    assert cfg.eval.k == 5 and cfg.model.d_video_in == cfg.dataset.d_v
    for doc in ({"extra": {}}, {"model": {"depth": 3}}, {"train": {"lr": 1}}, {"augment": {"ratio": 1}},
                {"dataset": {"n": 1}}, {"eval": {"topk": 1}}, {"train": {"augment": {}}}, {"model": []}):
        with pytest.raises(SchemaError):
            parse_run_config(doc)


def test_run_config_width_mismatch_is_schema_error():
    with pytest.raises(SchemaError, match="widths"):
        parse_run_config({"dataset": {"d_v": 16}})


def test_help_lists_exit_codes(capsys):
    with pytest.raises(SystemExit) as info:
        main(["--help"])
    assert info.value.code == 0
    out = capsys.readouterr().out
    for code in range(7):
        assert f"\n  {code}  " in out
    with pytest.raises(SystemExit):
        main(["train", "--help"])
    assert "exit codes" in capsys.readouterr().out


def test_usage_error(capsys):
    with pytest.raises(SystemExit) as info:
        main(["train"])
    assert info.value.code == EXIT_USAGE
    assert one_error_line(capsys)["error"] == "usage"


def test_missing_config_file(tmp_path, capsys):
    assert main(["generate", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path / "d")]) == \
        EXIT_MISSING_FILE
    assert one_error_line(capsys)["error"] == "missing_file"


def test_unknown_key_exits_before_work(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", {"train": {"learning_rat": 1e-3}})
    assert main(["generate", "--config", cfg, "--out", str(tmp_path / "d")]) == EXIT_SCHEMA
    assert "learning_rat" in one_error_line(capsys)["message"]
    assert not (tmp_path / "d").exists()


def test_invalid_json_is_schema_error(tmp_path, capsys):
    (tmp_path / "c.json").write_text("{not json")
    assert main(["generate", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path / "d")]) == EXIT_SCHEMA
    one_error_line(capsys)


def test_generate_is_byte_identical(tmp_path, small_data):
    _, cfg = small_data
    for name in ("a", "b"):
        assert main(["generate", "--config", cfg, "--out", str(tmp_path / name)]) == EXIT_OK
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert files
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert manifest["run_config"] == SMALL


def test_missing_dataset(tmp_path, capsys):
    assert main(["train", "--data", str(tmp_path), "--out", str(tmp_path / "o")]) == EXIT_MISSING_FILE
    one_error_line(capsys)


def test_corrupt_dataset_is_shape_error(tmp_path, small_data, capsys):
    root, cfg = small_data
    main(["generate", "--config", cfg, "--out", str(tmp_path / "d")])
    target = next((tmp_path / "d" / "features").glob("train-*.clpf"))
    target.write_bytes(target.read_bytes()[:-4])
    assert main(["train", "--config", cfg, "--data", str(tmp_path / "d"), "--out", str(tmp_path / "o")]) == \
        EXIT_SHAPE
    assert one_error_line(capsys)["error"] == "shape"


def test_width_mismatch_between_checkpoint_and_data(tmp_path, small_data, capsys):
    root, cfg = small_data
    other = dict(SMALL, dataset=dict(SMALL["dataset"], d_v=16), model=dict(SMALL["model"], d_video_in=16))
    cfg16 = write_config(tmp_path / "c16.json", other)
    main(["generate", "--config", cfg16, "--out", str(tmp_path / "d16")])
    assert main(["train", "--config", cfg16, "--data", str(tmp_path / "d16"), "--out", str(tmp_path / "o")]) == 0
    code = main(["eval", "--checkpoint", str(tmp_path / "o" / "final.msxt"), "--data", str(root / "data"),
                 "--out", str(tmp_path / "p.jsonl")])
    assert code == EXIT_SHAPE
    capsys.readouterr()


def test_nonfinite_features_exit_diverged(tmp_path, small_data, capsys):
    splits = generate_dataset(GeneratorConfig.from_dict(SMALL["dataset"]))
    splits["train"][0].video_features[:] = np.inf
    write_dataset(splits, tmp_path / "d")
    _, cfg = small_data
    assert main(["train", "--config", cfg, "--data", str(tmp_path / "d"), "--out", str(tmp_path / "o")]) == \
        EXIT_DIVERGED
    assert one_error_line(capsys)["error"] == "diverged"


@pytest.fixture(scope="module")
def overfit_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("overfit")
    doc = {
        "dataset": {"seed": 8, "n_train": 1, "n_val": 1, "clip_len_range": [30, 40], "span_len_range": [6, 10]},
        "model": {"dropout_p": 0.0},
        "augment": {"sliding_window": False, "splice": False},
        "train": {"epochs": 150, "batch_size": 1, "learning_rate": 2e-3, "eval_every_n_steps": 1000},
        "eval": {"split": "train"},
    }
    cfg = write_config(root / "cfg.json", doc)
    assert main(["generate", "--config", cfg, "--out", str(root / "data")]) == 0
    assert main(["train", "--config", cfg, "--data", str(root / "data"), "--out", str(root / "run")]) == 0
    assert main(["eval", "--config", cfg, "--checkpoint", str(root / "run" / "final.msxt"),
                 "--data", str(root / "data"), "--out", str(root / "pred.jsonl")]) == 0
    return root, cfg


def test_train_writes_config_echo_and_metrics(overfit_run):
    root, cfg = overfit_run
    assert json.loads((root / "run" / "run_config.json").read_text()) == json.loads(open(cfg).read())
    records = [json.loads(x) for x in (root / "run" / "metrics.jsonl").read_text().splitlines()]
    assert [r["step"] for r in records if "total" in r] == list(range(1, 151))


def test_eval_recovers_a_memorized_clip(overfit_run, capsys):
    root, _ = overfit_run
    report = json.loads((root / "pred.jsonl.report.json").read_text())
    assert report["metrics"]["r1_03"] == 1.0 and report["metrics"]["r1_05"] == 1.0
    (line,) = (root / "pred.jsonl").read_text().splitlines()
    rec = json.loads(line)
    assert rec["clip_id"] == "train-000000" and len(rec["candidates"]) == 5
    assert all(isinstance(v, float) for c in rec["candidates"] for v in c)


def test_self_ensemble_keeps_recall(overfit_run, capsys):
    root, cfg = overfit_run
    pred = str(root / "pred.jsonl")
    out = root / "merged.jsonl"
    assert main(["ensemble", "--config", cfg, "--pred", pred, "--pred", pred, "--data", str(root / "data"),
                 "--out", str(out)]) == 0
    report = json.loads((root / "merged.jsonl.report.json").read_text())
    assert report["metrics"]["r1_03"] == 1.0
    assert "R@1" in capsys.readouterr().out
    one = json.loads((root / "pred.jsonl").read_text())["candidates"]
    merged = json.loads(out.read_text())["candidates"]
    assert merged == [one[0], one[0], one[1], one[1], one[2]]


def test_ensemble_without_data_passes_seconds_through(overfit_run, tmp_path):
    root, _ = overfit_run
    pred = str(root / "pred.jsonl")
    assert main(["ensemble", "--pred", pred, "--pred", pred, "--out", str(tmp_path / "m.jsonl")]) == 0
    one = json.loads((root / "pred.jsonl").read_text())["candidates"]
    assert json.loads((tmp_path / "m.jsonl").read_text())["candidates"][0] == one[0]


def test_ensemble_needs_two_files(overfit_run, tmp_path, capsys):
    root, _ = overfit_run
    assert main(["ensemble", "--pred", str(root / "pred.jsonl"), "--out", str(tmp_path / "m")]) == EXIT_USAGE
    assert one_error_line(capsys)["error"] == "usage"


def test_malformed_prediction_file(tmp_path, capsys):
    (tmp_path / "bad.jsonl").write_text('{"clip_id": 1}\n')
    p = str(tmp_path / "bad.jsonl")
    assert main(["ensemble", "--pred", p, "--pred", p, "--out", str(tmp_path / "m")]) == EXIT_SCHEMA
    one_error_line(capsys)


def test_augment_preview(small_data, tmp_path, capsys):
    root, cfg = small_data
    assert main(["augment-preview", "--config", cfg, "--data", str(root / "data"), "--n", "8"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == 8
    for line in lines:
        rec = json.loads(line)
        assert rec["clip_id"] != rec["background_id"]
        s, e = rec["after"]["span"]
        assert 0 <= s <= e < rec["after"]["length"]
        assert e - s == rec["before"]["span"][1] - rec["before"]["span"][0]
    out = tmp_path / "p.jsonl"
    main(["augment-preview", "--config", cfg, "--data", str(root / "data"), "--n", "8", "--out", str(out)])
    assert out.read_text().splitlines() == lines


def test_log_level_env_var(small_data, tmp_path):
    root, cfg = small_data
    base = [sys.executable, "-m", "momentloc.cli", "generate", "--config", cfg]
    bad = subprocess.run(base + ["--out", str(tmp_path / "x")], capture_output=True, text=True,
                         env={"MOMENT_LOG_LEVEL": "loud", "PATH": ""})
    assert bad.returncode == EXIT_SCHEMA
    assert json.loads(bad.stderr)["error"] == "schema"
    quiet = subprocess.run(base + ["--out", str(tmp_path / "y")], capture_output=True, text=True,
                           env={"MOMENT_LOG_LEVEL": "error", "PATH": ""})
    assert quiet.returncode == 0 and quiet.stderr == ""
    loud = subprocess.run(base + ["--out", str(tmp_path / "z")], capture_output=True, text=True,
                          env={"MOMENT_LOG_LEVEL": "debug", "PATH": ""})
    assert loud.returncode == 0 and "wrote" in loud.stderr
