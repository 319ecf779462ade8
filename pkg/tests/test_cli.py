import json

import numpy as np
import pytest

from rmsdepth import cli
from rmsdepth.checkpoint import load_checkpoint

TINY = ["--n-val", "2", "--batch", "4", "--size", "32", "--returns", "6"]


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    assert cli.main(["gen-data", "--out", str(d / "set.bin"), "--n", "6", "--size", "32", "--returns", "6"]) == 0
    return d / "set.bin"


def read_json_stdout(capsys):
    return json.loads(capsys.readouterr().out)


def test_usage_errors_exit_2(capsys):
    assert cli.main([]) == 2
    assert cli.main(["train", "--epochs", "many"]) == 2
    assert cli.main(["frobnicate"]) == 2
    assert cli.main(["gen-data", "--out", "x.bin", "--size", "30"]) == 2
    assert cli.main(["eval", "--ckpt", "/nonexistent/model.ckpt"]) == 2


def test_help_exits_0(capsys):
    assert cli.main(["--help"]) == 0


def test_parity_ok_and_negative_control(capsys):
    assert cli.main(["parity", "--n", "4"]) == 0
    assert read_json_stdout(capsys)["max_abs_diff"] == 0.0
    assert cli.main(["parity", "--n", "2", "--negative-control"]) == 1
    assert read_json_stdout(capsys)["max_abs_diff"] > 0.0


def test_train_writes_run_dir_and_is_repeatable(dataset, tmp_path, capsys):
    args = ["train", "--data", str(dataset), "--epochs", "2", *TINY]
    assert cli.main([*args, "--out", str(tmp_path / "a")]) == 0
    assert cli.main([*args, "--out", str(tmp_path / "b")]) == 0
    a, b = tmp_path / "a", tmp_path / "b"
    for name in ("config.json", "data_seeds.json", "log.jsonl", "summary.json", "best.ckpt", "last.ckpt"):
        assert (a / name).exists(), name
    lines = (a / "log.jsonl").read_text().splitlines()
    assert len(lines) == 2
    assert (a / "log.jsonl").read_bytes() == (b / "log.jsonl").read_bytes()
    assert (a / "last.ckpt").read_bytes() == (b / "last.ckpt").read_bytes()
    cfg = json.loads((a / "config.json").read_text())
    assert cfg["epochs"] == 2 and cfg["data"]["n_val"] == 2


def test_config_file_and_override_switch(dataset, tmp_path, capsys):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps({"epochs": 1, "batch": 2, "data": {"n_val": 2}}))
    args = cli.build_parser().parse_args(["train", "--config", str(cfg_path), "--epochs", "3"])
    assert cli.build_run_config(args).epochs == 3
    assert cli.build_run_config(args).batch == 2
    args = cli.build_parser().parse_args(["train", "--config", str(cfg_path), "--epochs", "3", "--config-wins"])
    assert cli.build_run_config(args).epochs == 1


def test_eval_report_and_render(dataset, tmp_path, capsys):
    run = tmp_path / "run"
    assert cli.main(["train", "--data", str(dataset), "--epochs", "1", *TINY, "--out", str(run)]) == 0
    capsys.readouterr()
    report = tmp_path / "report.json"
    rc = cli.main(["eval", "--ckpt", str(run / "best.ckpt"), "--config", str(run / "config.json"),
                   "--render", str(tmp_path / "png"), "--n-render", "2", "--report", str(report)])
    assert rc == 0
    rep = json.loads(report.read_text())
    for block in rep["ranges"].values():
        assert set(block) == {"MAE", "RMSE", "iMAE", "iRMSE", "n"}
        assert all(np.isfinite(v) for v in block.values())
    assert rep["render"]["count"] == 2
    assert rep["render"]["max_rendered_m"] <= 80.0
    assert len(list((tmp_path / "png").glob("*.png"))) == 2


def test_parity_fallback_on_trained_checkpoint(dataset, tmp_path, capsys):
    run = tmp_path / "run"
    assert cli.main(["train", "--data", str(dataset), "--epochs", "1", *TINY, "--out", str(run)]) == 0
    capsys.readouterr()
    assert cli.main(["parity", "--n", "1", "--ckpt", str(run / "best.ckpt")]) == 0
    assert read_json_stdout(capsys)["fallback"]["max_abs_diff"] == 0.0


def test_bench_small(capsys):
    rc = cli.main(["bench", "--L", "256", "--D", "4", "--N", "2", "--trials", "3", "--ratio-band", "0", "100",
                   "--batch", "1", "--return-counts", "0", "10", "40"])
    rep = read_json_stdout(capsys)
    assert rc == 0
    assert rep["windowed_tokens_vs_returns"]["0"] == 0
    assert rep["windowed_tokens_vs_returns"]["10"] < rep["windowed_tokens_vs_returns"]["40"]
    assert rep["tiers"]["L0"]["tokens"] == 0 and rep["tiers"]["L4"]["tokens"] > 0


def test_ablate_three_arms_share_data(dataset, tmp_path, capsys):
    out = tmp_path / "abl"
    rc = cli.main(["ablate", "--arms", "uniform_film", "readout", "joint", "--data", str(dataset),
                   "--epochs", "1", *TINY, "--out", str(out)])
    assert rc == 0
    table = (out / "ablation.md").read_text()
    assert "Uniform FiLM" in table and "Joint modulation" in table
    seeds = {(out / a / "data_seeds.json").read_text() for a in ("uniform_film", "readout", "joint")}
    assert len(seeds) == 1
    rows = json.loads((out / "ablation.json").read_text())
    assert set(rows) == {"uniform_film", "readout", "joint"}
    _, meta = load_checkpoint(out / "joint" / "best.ckpt")
    assert meta["net"]["mode"] == "joint"


def test_ablate_unknown_arm(capsys):
    assert cli.main(["ablate", "--arms", "telepathy"]) == 2
