import subprocess
import sys

import numpy as np

from rqdia.cli import EXIT_ABORT, EXIT_CONFIG, EXIT_OK, main
from rqdia.envs import read_pgm
from rqdia.harness import read_metrics
from runcfg import SAC_TINY, C51_TINY


def write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def test_train_eval_export(tmp_path, capsys):
    cfg = write(tmp_path, "run.ini", SAC_TINY + "\n")
    out = tmp_path / "r"
    assert main(["train", "--config", cfg, "--seed", "2", "--out", str(out)]) == EXIT_OK
    rows = read_metrics(out / "metrics.csv")
    assert [r["env_step"] for r in rows] == ["20", "40", "60"]

    cfg2 = write(tmp_path, "ck.ini", SAC_TINY.replace("[run]", "[run]\ncheckpoint_every = 60"))
    assert main(["train", "--config", cfg2, "--out", str(tmp_path / "c")]) == EXIT_OK
    capsys.readouterr()
    assert main(["eval", "--checkpoint", str(tmp_path / "c" / "ckpt_60.rqck"), "--episodes", "3"]) == EXIT_OK
    text = capsys.readouterr().out
    assert text.startswith("mean ") and len(text.splitlines()[1].split()) == 4

    dest = tmp_path / "curve.csv"
    assert main(["export-plots", str(out / "metrics.csv"), str(tmp_path / "c" / "metrics.csv"),
                 "--out", str(dest)]) == EXIT_OK
    assert [r["count"] for r in read_metrics(dest)] == ["2", "2", "2"]


def test_config_error_exit_code(tmp_path, capsys):
    bad = write(tmp_path, "bad.ini", "[run]\nagent = nope\n")
    assert main(["train", "--config", bad]) == EXIT_CONFIG
    assert "config error" in capsys.readouterr().err
    assert main(["train", "--config", str(tmp_path / "missing.ini")]) == EXIT_CONFIG


def test_env_override_error(tmp_path, monkeypatch):
    cfg = write(tmp_path, "run.ini", SAC_TINY)
    monkeypatch.setenv("RQDIA_RUN_TOTAL_ENV_STEPS", "lots")
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "o")]) == EXIT_CONFIG


def test_runtime_abort_exit_codes(tmp_path, capsys):
    assert main(["eval", "--checkpoint", str(tmp_path / "none.rqck")]) == EXIT_ABORT
    junk = tmp_path / "junk.rqck"
    junk.write_bytes(b"not a checkpoint")
    assert main(["eval", "--checkpoint", str(junk)]) == EXIT_ABORT
    assert main(["export-plots", "--out", str(tmp_path / "x.csv")]) == EXIT_ABORT


def test_dump_frames(tmp_path):
    cfg = write(tmp_path, "c.ini", C51_TINY)
    out = tmp_path / "frames"
    assert main(["dump-frames", "--config", cfg, "--steps", "5", "--out", str(out)]) == EXIT_OK
    files = sorted(p.name for p in out.iterdir())
    assert files == [f"frame_{i:05d}.pgm" for i in range(6)]
    img = read_pgm(out / "frame_00000.pgm")
    assert img.shape == (16, 16) and img.dtype == np.uint8 and img.max() == 255


def test_module_entry_point(tmp_path):
    cfg = write(tmp_path, "run.ini", SAC_TINY.replace("total_env_steps = 60", "total_env_steps = 0"))
    proc = subprocess.run([sys.executable, "-m", "rqdia", "train", "--config", cfg, "--out", str(tmp_path / "o")],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert (tmp_path / "o" / "metrics.csv").read_text().count("\n") == 1
