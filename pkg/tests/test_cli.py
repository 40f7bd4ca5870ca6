import json

import pytest
import yaml

from vptoken.cli import build_parser, main, read_dataset, resolve_config, samples_path
from vptoken.data import load_samples
from vptoken.evaluation import read_report_csv

TINY = dict(d_h=32, d_v=32, d_z=24, lm_layers=1, lm_heads=2, enc_layers=1, enc_heads=2)


@pytest.fixture()
def config_file(tmp_path):
    p = tmp_path / "cfg.yaml"
    p.write_text(yaml.safe_dump({"n_train": 6, "n_test": 3, "finetune_epochs": 1, "batch_size": 3, "max_tokens": 8,
                                 "model": TINY}))
    return p


def test_build_data(tmp_path, capsys):
    out = tmp_path / "d.jsonl"
    assert main(["build-data", "--task", "count-glyphs", "--n", "5", "--mode", "forced-reencode", "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert len(lines) == 5
    row = json.loads(lines[0])
    assert {"id", "scene_spec", "question", "answer", "bbox", "task_type", "mode"} <= set(row)
    assert row["mode"] == "forced-reencode"
    settings, records = read_dataset(out)
    assert settings["mode"] == "forced-reencode" and len(records) == 5
    samples, meta = load_samples(samples_path(out), records)
    assert len(samples) == 5 and all(s.record is not None for s in samples)


def test_build_data_mode_mismatch(tmp_path, capsys):
    code = main(["build-data", "--task", "count-glyphs", "--n", "2", "--mode", "forced-region",
                 "--out", str(tmp_path / "x.jsonl")])
    assert code != 0
    assert "error" in capsys.readouterr().err


def test_config_precedence(config_file):
    ap = build_parser()
    args = ap.parse_args(["train", "--config", str(config_file), "--batch-size", "2", "--out", "x"])
    cfg = resolve_config(args, {"batch_size": 7, "k": 4, "n_test": 9})
    assert cfg.batch_size == 2  # flag beats file
    assert cfg.n_test == 3  # file beats base layer
    assert cfg.k == 4  # base layer beats defaults


def test_unknown_config_key(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text(json.dumps({"depth": 3}))
    assert main(["train", "--config", str(p), "--out", str(tmp_path / "m.vpt")]) == 2


def test_missing_file_exit_code(tmp_path):
    assert main(["eval", "--checkpoint", str(tmp_path / "nope.vpt"), "--out", str(tmp_path / "r")]) != 0


def test_train_eval_generate(tmp_path, config_file, capsys):
    data = tmp_path / "train.jsonl"
    assert main(["build-data", "--n", "6", "--out", str(data)]) == 0
    ckpt, metrics = tmp_path / "m.vpt", tmp_path / "metrics.jsonl"
    assert main(["train", "--config", str(config_file), "--data", str(data), "--out", str(ckpt),
                 "--metrics", str(metrics)]) == 0
    entries = [json.loads(l) for l in metrics.read_text().splitlines()]
    assert entries and {"step", "phase", "loss"} <= set(entries[0])

    test_data = tmp_path / "test.jsonl"
    main(["build-data", "--n", "3", "--seed", "1", "--out", str(test_data)])
    rep = tmp_path / "rep"
    traces = tmp_path / "traces.jsonl"
    assert main(["eval", "--checkpoint", str(ckpt), "--data", str(test_data), "--out", str(rep),
                 "--traces", str(traces)]) == 0
    rows = read_report_csv(rep.with_suffix(".csv"))
    assert rows[0]["mode"] == "forced-region" and rows[0]["n"] == 3
    assert len(traces.read_text().splitlines()) == 3

    capsys.readouterr()
    rid = read_dataset(test_data)[1][0].id
    assert main(["generate", "--checkpoint", str(ckpt), "--data", str(test_data), "--record-id", rid]) == 0
    trace = json.loads(capsys.readouterr().out)
    assert trace["id"] == rid and trace["stop_reason"] in ("eos", "token-budget", "perception-budget")
    assert main(["generate", "--checkpoint", str(ckpt), "--data", str(test_data), "--record-id", "missing"]) == 2


def test_sweep(tmp_path, config_file, capsys):
    out = tmp_path / "sw"
    assert main(["sweep", "--config", str(config_file), "--axis", "k", "--values", "4,8", "--out", str(out)]) == 0
    assert len(read_report_csv(out.with_suffix(".csv"))) == 2
    assert "sweep axis: k" in capsys.readouterr().out
