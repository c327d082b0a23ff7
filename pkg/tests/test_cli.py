import subprocess
import sys

import pytest

from weatherseg.checkpoint import load_checkpoint, save_checkpoint
from weatherseg.cli import main
from weatherseg.metrics import parse_record
from weatherseg.runner import cmd_eval, read_metrics_log
from weatherseg.unfolding import make_train_state

FAST = ["--width", "8", "--seeds", "0"]


def train(root, out, *extra):
    return main(["train", "--data", str(root), "--out", str(out), *FAST, *extra])


def summary(run_dir):
    return parse_record((run_dir / "summary.txt").read_text())


@pytest.fixture(scope="module")
def trained(tiny_benchmark, tmp_path_factory):
    out = tmp_path_factory.mktemp("trained")
    assert train(tiny_benchmark, out, "--epochs", "20", "--K", "2", "--lr", "3e-3") == 0
    return out / "seed_0"


def test_two_epoch_run_writes_records(tiny_benchmark, tmp_path):
    assert train(tiny_benchmark, tmp_path, "--epochs", "2") == 0
    run = tmp_path / "seed_0"
    records = read_metrics_log(run / "metrics.log")
    assert [r["epoch"] for r in records] == [1, 2]
    assert all("val_mIoU" in r and "loss" in r for r in records)
    for name in ("config.txt", "environment.txt", "checkpoint.pt", "summary.txt", "batch_trace.log"):
        assert (run / name).is_file(), name
    config = (run / "config.txt").read_text()
    assert "run_seed = 0" in config and "epochs = 2" in config


def test_same_seed_gives_identical_metrics(tiny_benchmark, tmp_path):
    for name in ("a", "b"):
        assert train(tiny_benchmark, tmp_path / name, "--epochs", "2", "--K", "2") == 0
    a = (tmp_path / "a" / "seed_0" / "metrics.log").read_text()
    b = (tmp_path / "b" / "seed_0" / "metrics.log").read_text()
    assert a == b
    assert summary(tmp_path / "a" / "seed_0") == summary(tmp_path / "b" / "seed_0")


def _trace(run_dir):
    rows = []
    for line in (run_dir / "batch_trace.log").read_text().splitlines():
        rec = dict(tok.split("=", 1) for tok in line.split())
        rows.append((int(rec["epoch"]), [int(i) for i in rec["indices"].split(",")]))
    return rows


def test_gsm_off_trains_in_sequence_order(tiny_benchmark, tmp_path):
    assert train(tiny_benchmark, tmp_path / "off", "--epochs", "2", "--no-gsm") == 0
    assert train(tiny_benchmark, tmp_path / "on", "--epochs", "2") == 0
    off = _trace(tmp_path / "off" / "seed_0")
    for epoch in (1, 2):
        flat = [i for e, idx in off if e == epoch for i in idx]
        assert flat == list(range(len(flat)))
    on = _trace(tmp_path / "on" / "seed_0")
    flat_on = [i for e, idx in on if e == 1 for i in idx]
    assert sorted(flat_on) == list(range(len(flat_on))) and flat_on != sorted(flat_on)


def test_eval_reproduces_logged_train_metrics(trained, tiny_benchmark):
    logged = summary(trained)
    metrics = cmd_eval(trained / "checkpoint.pt", tiny_benchmark / "train.txt")
    for name, value in metrics.items():
        assert abs(value - logged[f"train_{name}"]) <= 1e-6


def test_eval_cli_prints_a_record(trained, tiny_benchmark, capsys):
    code = main(["eval", "--checkpoint", str(trained / "checkpoint.pt"), "--manifest", str(tiny_benchmark / "val.txt")])
    assert code == 0
    record = parse_record(capsys.readouterr().out.strip())
    assert set(record) == {"mIoU", "mPre", "mRec", "mF1"}


def test_untrained_model_scores_lower(trained, tiny_benchmark, tmp_path):
    state, loss_cfg, optim_cfg, run = load_checkpoint(trained / "checkpoint.pt")
    fresh = make_train_state(state.model.spec, loss_cfg, optim_cfg, seed=0)
    path = save_checkpoint(tmp_path / "fresh.pt", fresh, loss_cfg, optim_cfg, run)
    before = cmd_eval(path, tiny_benchmark / "train.txt")
    after = cmd_eval(trained / "checkpoint.pt", tiny_benchmark / "train.txt")
    assert before["mIoU"] < after["mIoU"]


def test_missing_checkpoint_is_a_runtime_error(tiny_benchmark, tmp_path, capsys):
    code = main(["eval", "--checkpoint", str(tmp_path / "nope.pt"), "--manifest", str(tiny_benchmark / "val.txt")])
    assert code == 2
    assert "nope.pt" in capsys.readouterr().err


def test_corrupt_checkpoint_is_a_version_error(tiny_benchmark, tmp_path, capsys):
    bad = tmp_path / "bad.pt"
    bad.write_bytes(b"not a checkpoint")
    code = main(["eval", "--checkpoint", str(bad), "--manifest", str(tiny_benchmark / "val.txt")])
    assert code == 2
    assert "VersionError" in capsys.readouterr().err


@pytest.mark.parametrize(
    "flags",
    [["--depth", "0"], ["--policy", "XX"], ["--K", "-1"], ["--tau", "0"], ["--lr", "abc"], ["--seeds", ""]],
)
def test_bad_config_is_a_usage_error(tiny_benchmark, tmp_path, flags, capsys):
    assert train(tiny_benchmark, tmp_path, *flags) == 1
    assert capsys.readouterr().err.strip()


def test_config_file_and_flag_override(tiny_benchmark, tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(f"data = {tiny_benchmark}\nepochs = 5\n# comment\nloss = ce\n")
    code = main(["train", "--config", str(cfg), "--epochs", "1", "--out", str(tmp_path / "o"), *FAST])
    assert code == 0
    assert len(read_metrics_log(tmp_path / "o" / "seed_0" / "metrics.log")) == 1


def test_bad_config_file_key(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("bogus = 1\n")
    assert main(["train", "--config", str(cfg)]) == 1


def test_unknown_subcommand_exits_1():
    with pytest.raises(SystemExit) as info:
        main(["fly"])
    assert info.value.code == 1


@pytest.mark.parametrize("suite, rows", [("depth", 4), ("fusion", 2), ("gsm", 2), ("regularizer", 4)])
def test_ablation_suite_tables(tiny_benchmark, tmp_path, suite, rows, capsys):
    code = main(["ablate", "--suite", suite, "--data", str(tiny_benchmark), "--out", str(tmp_path),
                 "--epochs", "1", *FAST])
    assert code == 0
    suite_dir = tmp_path / suite
    table = (suite_dir / "table.md").read_text().splitlines()
    assert table[2] == "| arm | mIoU | mPre | mRec | mF1 |"
    assert len([l for l in table[4:] if l.startswith("|")]) == rows
    assert len((suite_dir / "table.txt").read_text().splitlines()) == rows
    assert (suite_dir / "curves_mIoU.png").stat().st_size > 0
    assert (suite_dir / "curves_mF1.png").stat().st_size > 0
    assert "| arm |" in capsys.readouterr().out
    assert main(["plot", str(suite_dir)]) == 0


def test_generate_subcommand(tmp_path, capsys):
    code = main(["generate", "--root", str(tmp_path), "--set", "n_train=7", "--set", "n_val=4",
                 "--set", "seq_length=4", "--set", "height=16", "--set", "width=16"])
    assert code == 0
    assert capsys.readouterr().out.strip() == str(tmp_path / "manifest.txt")
    assert main(["generate", "--root", str(tmp_path), "--set", "n_train"]) == 1


def test_module_entry_point_help():
    out = subprocess.run([sys.executable, "-m", "weatherseg", "train", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    assert "--gsm" in out.stdout and "default: 3" in out.stdout
