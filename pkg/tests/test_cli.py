import subprocess
import sys

import numpy as np
import pytest

from hyqut.cli import main
from hyqut.config import parse_config
from hyqut.model import Transformer
from hyqut.train import Trainer, load_checkpoint, save_checkpoint

TOY_ARGS = ["--config", "toy.cfg", "--steps", "12", "--log-every", "4"]


def _csv_core(path):
    # tokens_per_sec is wall-clock, everything else must match exactly
    return [",".join(line.split(",")[:3]) for line in path.read_text().splitlines()]


def test_count_params_golden(capsys):
    assert main(["count-params", "--config", "hyqut8m.cfg", "--golden"]) == 0
    out = capsys.readouterr().out
    assert "6,721,913" in out and "golden: match" in out


def test_count_params_mismatch_exit_1(capsys):
    assert main(["count-params", "--config", "classic8m.cfg", "--golden"]) == 1
    assert "MISMATCH" in capsys.readouterr().out


def test_count_params_overrides(capsys):
    assert main(["count-params", "--config", "classic8m.cfg", "--replace", "Wq", "--csv"]) == 0
    assert capsys.readouterr().out.splitlines()[-1] == "Total,-,7246201,27.64"


def test_flops_and_ablate(capsys):
    assert main(["flops", "--config", "classic8m.cfg"]) == 0
    assert "100.00%" in capsys.readouterr().out
    assert main(["ablate", "--config", "classic8m.cfg"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == 8 and lines[2].startswith("Attention: Wq ") and "93.50" in lines[2]


def test_ablate_smoke(tmp_path, capsys):
    assert main(["ablate", "--config", "classic8m.cfg", "--smoke-steps", "6", "--out", str(tmp_path)]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0].endswith("Smoke") and all("converging" in l for l in lines[1:])


def test_gradcheck(capsys):
    assert main(["gradcheck", "--nq", "4", "--seed", "7"]) == 0
    assert "PASS" in capsys.readouterr().out
    assert main(["gradcheck", "--nq", "3", "--tol", "1e-15"]) == 1


def test_train_resume_generate_export(tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["train", *TOY_ARGS, "--out", str(a)]) == 0
    assert main(["train", *TOY_ARGS, "--out", str(b), "--stop-at", "5"]) == 0
    assert load_checkpoint(b / "checkpoint.bin").step == 5
    assert main(["train", *TOY_ARGS, "--out", str(b), "--resume", str(b / "checkpoint.bin")]) == 0
    assert _csv_core(a / "loss.csv") == _csv_core(b / "loss.csv")
    assert len(_csv_core(a / "loss.csv")) == 13
    capsys.readouterr()
    assert main(["generate", "--checkpoint", str(a / "checkpoint.bin"), "--prompt", "the", "--max-new", "5"]) == 0
    assert capsys.readouterr().out.startswith("the")
    assert main(["export-loss", str(a / "loss.csv"), "--every", "4"]) == 0
    table = capsys.readouterr().out.splitlines()
    assert table[0].split() == ["step", "lr", "loss"] and table[-1].split()[0] == "12"


def test_train_fd_mode(tmp_path):
    assert main(["train", "--config", "toy.cfg", "--steps", "12", "--stop-at", "2", "--grad-mode", "fd", "--delta", "5e-4",
                 "--out", str(tmp_path)]) == 0
    assert "fd_delta = 0.0005" in (tmp_path / "config.cfg").read_text()


def test_resume_with_other_seed_is_config_error(tmp_path, capsys):
    assert main(["train", *TOY_ARGS, "--out", str(tmp_path), "--stop-at", "2"]) == 0
    code = main(["train", *TOY_ARGS, "--out", str(tmp_path), "--seed", "9",
                 "--resume", str(tmp_path / "checkpoint.bin")])
    assert code == 2
    assert "train.seed" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [
    ["count-params"],
    ["count-params", "--config", "toy.cfg"],
    ["train", "--config", "toy.cfg", "--grad-mode", "spsa"],
    ["train", "--config", "toy.cfg", "--delta", "0.5"],
    ["count-params", "--config", "hyqut8m.cfg", "--replace", "Wz"],
    ["frobnicate"],
])
def test_usage_errors_exit_2(argv, tmp_path):
    if argv[0] == "train":
        argv = argv + ["--out", str(tmp_path)]
    assert main(argv) == 2


def test_unknown_config_key_exit_2(tmp_path, capsys):
    cfg = tmp_path / "x.cfg"
    cfg.write_text("[model]\nhidden = 3\n")
    assert main(["count-params", "--config", str(cfg)]) == 2
    assert "hidden" in capsys.readouterr().err


def test_io_errors_exit_4(tmp_path):
    assert main(["count-params", "--config", str(tmp_path / "missing.cfg")]) == 4
    assert main(["train", "--config", "toy.cfg", "--corpus", str(tmp_path / "none.txt"),
                 "--out", str(tmp_path)]) == 4
    (tmp_path / "bad.bin").write_bytes(b"garbage")
    assert main(["generate", "--checkpoint", str(tmp_path / "bad.bin")]) == 4
    assert main(["export-loss", str(tmp_path / "none.csv")]) == 4


def test_numerical_failure_exit_3(tmp_path):
    out = tmp_path / "run"
    assert main(["train", *TOY_ARGS, "--out", str(out), "--stop-at", "1"]) == 0
    ck = load_checkpoint(out / "checkpoint.bin")
    run = parse_config(ck.config_text)
    tr = Trainer(Transformer(run.model), run)
    for k, v in ck.params.items():
        tr.params[k][...] = v
    tr.params["model.norm.weight"][0] = np.nan
    save_checkpoint(tr.model, tr, ck.step, out / "nan.bin", config_text=ck.config_text)
    assert main(["train", *TOY_ARGS, "--out", str(out), "--resume", str(out / "nan.bin")]) == 3


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "hyqut.cli", "count-params", "--config", "hyqut8m.cfg"],
                       capture_output=True, text=True)
    assert r.returncode == 0 and "6,721,913" in r.stdout
