import csv
import statistics

import pytest

from conftest import TINY_TEXT
from peftcl.cli import main
from peftcl.runner import METRICS_HEADER, read_metrics_csv


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "exp.cfg"
    cfg.write_text(TINY_TEXT + "sweep.rank = 1, 2, 4\nrun.seeds = 0, 1\n")
    assert main(["pretrain", "--config", str(cfg), "--out", str(root / "out")]) == 0
    return cfg, root / "out"


def run(cfg, out, *argv):
    return main([argv[0], "--config", str(cfg), "--out", str(out), *argv[1:]])


def test_pretrain_writes_checkpoint_per_seed(workspace):
    _, out = workspace
    for seed in (0, 1):
        assert (out / "pretrain" / f"seed{seed}" / "checkpoint" / "manifest").exists()
        assert (out / "pretrain" / f"seed{seed}" / "loss_curve.csv").read_text().startswith(
            "step,split,loss,accuracy\n")


def test_train_eval_and_byte_identical_rerun(workspace):
    cfg, out = workspace
    assert run(cfg, out, "train", "--method", "s_lora", "--seed", "0") == 0
    d = out / "train" / "s_lora-base" / "seed0"
    first = (d / "metrics.csv").read_bytes()
    curve = (d / "loss_curve.csv").read_bytes()
    assert run(cfg, out, "train", "--method", "s_lora", "--seed", "0") == 0
    assert (d / "metrics.csv").read_bytes() == first
    assert (d / "loss_curve.csv").read_bytes() == curve
    assert run(cfg, out, "eval", "--method", "s_lora", "--seed", "0") == 0
    stored = [r for r in read_metrics_csv(d / "metrics.csv") if r["metric"] == "avg_accuracy"][-1]
    again = [r for r in read_metrics_csv(d / "eval_metrics.csv") if r["metric"] == "avg_accuracy"][0]
    assert stored["value"] == again["value"]


@pytest.mark.parametrize("method", ["l2p", "joint_prompt"])
def test_eval_reproduces_other_methods(workspace, method):
    cfg, out = workspace
    assert run(cfg, out, "train", "--method", method, "--seed", "1") == 0
    assert run(cfg, out, "eval", "--method", method, "--seed", "1") == 0
    d = out / "train" / f"{method}-base" / "seed1"
    stored = [r for r in read_metrics_csv(d / "metrics.csv") if r["metric"] == "avg_accuracy"][-1]
    again = read_metrics_csv(d / "eval_metrics.csv")[0]
    assert stored["value"] == again["value"]


def test_sweep_rows_per_cell(workspace):
    cfg, out = workspace
    assert run(cfg, out, "sweep", "--method", "s_lora", "--jobs", "2") == 0
    rows = read_metrics_csv(out / "sweep.csv")
    assert len(rows) == 3 * 2
    assert sorted({r["variant"] for r in rows}) == ["rank=1", "rank=2", "rank=4"]
    serial = out / "serial"
    serial.mkdir()
    (serial / "pretrain").symlink_to(out / "pretrain")
    assert run(cfg, serial, "sweep", "--method", "s_lora") == 0
    assert (serial / "sweep.csv").read_bytes() == (out / "sweep.csv").read_bytes()


def test_sweep_failure_is_reported(workspace, tmp_path, capsys):
    cfg, out = workspace
    empty = tmp_path / "empty"
    assert run(cfg, empty, "sweep", "--method", "s_lora", "--seed", "0") == 1
    assert capsys.readouterr().err.count("sweep cell failed") == 3


def test_bench_schema(workspace):
    cfg, out = workspace
    cfg_text = cfg.read_text() + "bench.batch_size = 4\nbench.trials = 5\nbench.warmup = 1\nbench.batches = 2\n"
    bcfg = cfg.parent / "bench.cfg"
    bcfg.write_text(cfg_text)
    assert run(bcfg, out, "train", "--method", "s_lora", "--seed", "0") == 0
    assert run(bcfg, out, "bench", "--method", "s_lora", "--seed", "0") == 0
    with open(out / "bench.csv", newline="") as fh:
        reader = csv.reader(fh)
        assert tuple(next(reader)) == METRICS_HEADER
        rows = list(reader)
    assert [(r[1], r[4]) for r in rows] == [("best", "throughput_best"), ("average", "throughput_avg")]
    assert all(float(r[5]) > 0 for r in rows)


def test_report_mean_and_sample_std(tmp_path, capsys):
    out = tmp_path / "rep"
    values = [0.5, 0.6, 0.9]
    for seed, v in enumerate(values):
        d = out / "train" / "s_lora-base" / f"seed{seed}"
        d.mkdir(parents=True)
        (d / "metrics.csv").write_text(
            "method,variant,seed,task_index,metric,value\n"
            f"s_lora,base,{seed},4,avg_accuracy,{v}\n")
    assert main(["report", "--out", str(out)]) == 0
    with open(out / "report.csv", newline="") as fh:
        row = list(csv.DictReader(fh))[0]
    # mean 2/3, sample std sqrt(((−1/6)² + (−1/15)² + (7/30)²) / 2)
    assert float(row["mean"]) == pytest.approx(2 / 3, abs=1e-6)
    assert float(row["std"]) == pytest.approx(statistics.stdev(values), abs=1e-6)
    assert float(row["std"]) == pytest.approx(0.208167, abs=1e-6)
    assert "66.67" in capsys.readouterr().out


def test_missing_checkpoint_nonzero_exit(tmp_path, capsys):
    assert main(["train", "--out", str(tmp_path / "nothing"), "--seed", "0"]) != 0
    assert "missing pretrain checkpoint" in capsys.readouterr().err
    assert main(["report", "--out", str(tmp_path / "nothing")]) != 0


def test_bad_config_nonzero_exit(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("l2x.select_count = 11\n")
    assert main(["train", "--config", str(bad), "--out", str(tmp_path)]) == 2
    assert "l2x.select_count" in capsys.readouterr().err


def test_env_var_sets_output(tmp_path, monkeypatch):
    monkeypatch.setenv("PEFTCL_OUT", str(tmp_path / "env"))
    cfg = tmp_path / "c.cfg"
    cfg.write_text(TINY_TEXT + "pretrain.epochs = 1\n")
    assert main(["pretrain", "--config", str(cfg), "--seed", "3"]) == 0
    assert (tmp_path / "env" / "pretrain" / "seed3" / "checkpoint").is_dir()
