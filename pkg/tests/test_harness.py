import csv
import os

import numpy as np
import pytest

from rqdia import harness
from rqdia.harness import (CheckpointError, TrainingAborted, build_checkpoint, decode_checkpoint,
                           encode_checkpoint, evaluate, export_plot_data, load_checkpoint, read_metrics,
                           run_training, save_checkpoint)
from rqdia.sac import SacAgent
from runcfg import tiny

AGENTS = ("sac", "c51")


def read_bytes(path):
    with open(path, "rb") as f:
        return f.read()


def write_metrics(path, steps, values):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["env_step", "eval_return", "status"])
        for s, v in zip(steps, values):
            w.writerow([s, v, "ok"])


def test_zero_steps_header_only(tmp_path):
    cfg = tiny(run={"total_env_steps": 0, "checkpoint_every": 10})
    res = run_training(cfg, output_dir=str(tmp_path))
    assert res.rows == []
    with open(tmp_path / "metrics.csv") as f:
        lines = f.read().splitlines()
    assert lines == [",".join(harness.csv_header("sac"))]
    assert not any(p.suffix == ".rqck" for p in tmp_path.iterdir())


@pytest.mark.parametrize("agent", AGENTS)
def test_runs_are_bit_identical(tmp_path, agent):
    cfg = tiny(agent, run={"checkpoint_every": 30})
    run_training(cfg, output_dir=str(tmp_path / "a"))
    run_training(cfg, output_dir=str(tmp_path / "b"))
    for name in ("metrics.csv", "ckpt_30.rqck", "ckpt_60.rqck"):
        assert read_bytes(tmp_path / "a" / name) == read_bytes(tmp_path / "b" / name)


def test_seed_changes_run(tmp_path):
    run_training(tiny(), output_dir=str(tmp_path / "a"))
    run_training(tiny(run={"seed": 1}), output_dir=str(tmp_path / "b"))
    assert read_bytes(tmp_path / "a" / "metrics.csv") != read_bytes(tmp_path / "b" / "metrics.csv")


@pytest.mark.parametrize("agent", AGENTS)
def test_rows_schedule_and_accounting(tmp_path, agent):
    cfg = tiny(agent, run={"total_env_steps": 50})
    res = run_training(cfg, output_dir=str(tmp_path))
    rows = read_metrics(tmp_path / "metrics.csv")
    steps = [int(r["env_step"]) for r in rows]
    assert steps == [20, 40, 50]
    assert list(rows[0]) == harness.csv_header(agent)
    timing = read_metrics(tmp_path / "timing.csv")
    assert [int(r["env_step"]) for r in timing] == steps
    if agent == "sac":
        # one stored transition per env step, one update per step once min_fill is stored
        assert len(res.replay) == 50
        assert [int(r["updates"]) for r in rows] == [1, 21, 31]
    else:
        assert 50 - (cfg.c51.n_step - 1) <= len(res.replay) <= 50
        assert int(rows[-1]["updates"]) == res.agent.updates > 0


def test_no_update_before_min_fill(tmp_path):
    res = run_training(tiny(replay={"min_fill": 100}), output_dir=str(tmp_path))
    assert res.agent.updates == 0
    assert all(r["critic_loss"] == "" for r in read_metrics(tmp_path / "metrics.csv"))


def test_updates_per_step_ratio(tmp_path):
    res = run_training(tiny(run={"updates_per_step": 3}), output_dir=str(tmp_path))
    assert res.agent.updates == 3 * (60 - 20 + 1)


def test_formatting_nine_significant_digits():
    assert harness.fmt(1 / 3) == "0.333333333"
    assert harness.fmt(7) == "7" and harness.fmt(None) == ""


def test_nan_aborts_with_diagnostic_row(tmp_path, monkeypatch):
    real = SacAgent.train_step

    def poisoned(self, batch, aug, rng):
        m = real(self, batch, aug, rng)
        if self.updates >= 3:
            m["critic_loss"] = float("nan")
        return m

    monkeypatch.setattr(SacAgent, "train_step", poisoned)
    with pytest.raises(TrainingAborted, match="critic_loss"):
        run_training(tiny(), output_dir=str(tmp_path))
    rows = read_metrics(tmp_path / "metrics.csv")
    assert rows[-1]["status"] == "nan_abort"
    assert rows[-1]["critic_loss"] == "nan"
    assert int(rows[-1]["env_step"]) == 22


# ---------------------------------------------------------------- checkpoints


@pytest.mark.parametrize("agent", AGENTS)
def test_save_load_save_byte_identical(tmp_path, agent):
    run_training(tiny(agent, run={"checkpoint_every": 60}), output_dir=str(tmp_path))
    path = tmp_path / "ckpt_60.rqck"
    raw = read_bytes(path)
    ck = load_checkpoint(path)
    save_checkpoint(tmp_path / "again.rqck", ck)
    assert read_bytes(tmp_path / "again.rqck") == raw
    # through a live agent as well
    agent_obj, cfg = harness.agent_from_checkpoint(ck)
    rebuilt = build_checkpoint(agent_obj, cfg, ck.env_step, {}, ck.header["episodes"])
    rebuilt.header["rng"] = ck.header["rng"]
    assert encode_checkpoint(rebuilt) == raw


@pytest.mark.parametrize("agent", AGENTS)
def test_resume_from_step_zero_matches_uninterrupted(tmp_path, agent):
    cfg = tiny(agent, run={"total_env_steps": 100, "checkpoint_every": 100})
    run_training(cfg, output_dir=str(tmp_path / "a"))
    ck = load_checkpoint(tmp_path / "a" / "ckpt_0.rqck")
    save_checkpoint(tmp_path / "copy.rqck", ck)
    run_training(cfg, resume=str(tmp_path / "copy.rqck"), output_dir=str(tmp_path / "b"))
    assert read_bytes(tmp_path / "a" / "metrics.csv") == read_bytes(tmp_path / "b" / "metrics.csv")
    assert read_bytes(tmp_path / "a" / "ckpt_100.rqck") == read_bytes(tmp_path / "b" / "ckpt_100.rqck")


def test_resume_mid_run_continues_counters(tmp_path):
    cfg = tiny(run={"checkpoint_every": 40})
    run_training(cfg, output_dir=str(tmp_path / "a"))
    res = run_training(cfg, resume=str(tmp_path / "a" / "ckpt_40.rqck"), output_dir=str(tmp_path / "b"))
    rows = read_metrics(tmp_path / "b" / "metrics.csv")
    assert [int(r["env_step"]) for r in rows] == [60]
    ck40 = load_checkpoint(tmp_path / "a" / "ckpt_40.rqck")
    # replay restarts empty, so updates resume only after min_fill new transitions
    assert res.agent.updates == ck40.header["updates"] + 1


def test_wrong_agent_kind(tmp_path):
    run_training(tiny("c51", run={"checkpoint_every": 60}), output_dir=str(tmp_path))
    with pytest.raises(CheckpointError, match="c51"):
        run_training(tiny("sac"), resume=str(tmp_path / "ckpt_0.rqck"), output_dir=str(tmp_path / "x"))


def test_corrupt_magic_and_version(tmp_path):
    run_training(tiny(run={"checkpoint_every": 60}), output_dir=str(tmp_path))
    raw = read_bytes(tmp_path / "ckpt_60.rqck")
    with pytest.raises(CheckpointError, match="magic"):
        decode_checkpoint(b"XXXX" + raw[4:])
    bumped = raw[:4] + bytes([9]) + raw[5:]
    with pytest.raises(CheckpointError, match="version 9.*version 1"):
        decode_checkpoint(bumped)
    with pytest.raises(CheckpointError):
        decode_checkpoint(raw[:40])


@pytest.mark.parametrize("agent", AGENTS)
def test_checkpoint_eval_matches_logged_row(tmp_path, agent):
    run_training(tiny(agent, run={"checkpoint_every": 20}), output_dir=str(tmp_path))
    rows = {int(r["env_step"]): r for r in read_metrics(tmp_path / "metrics.csv")}
    for step in (20, 40, 60):
        res = evaluate(str(tmp_path / f"ckpt_{step}.rqck"))
        assert harness.fmt(res.mean) == rows[step]["eval_return"]
        again = evaluate(str(tmp_path / f"ckpt_{step}.rqck"))
        assert np.array_equal(res.returns, again.returns)


def test_untrained_catch_eval_bounded(tmp_path):
    run_training(tiny("c51", run={"checkpoint_every": 60}), output_dir=str(tmp_path))
    res = evaluate(str(tmp_path / "ckpt_0.rqck"), episodes=5)
    assert len(res.returns) == 5
    assert -1.0 <= res.mean <= 1.0
    assert set(res.returns) <= {-1.0, 1.0}


def test_evaluate_rejects_zero_episodes(tmp_path):
    run_training(tiny(run={"checkpoint_every": 60}), output_dir=str(tmp_path))
    with pytest.raises(ValueError):
        evaluate(str(tmp_path / "ckpt_0.rqck"), episodes=0)


# ---------------------------------------------------------------- plot export


def test_export_single_input(tmp_path):
    write_metrics(tmp_path / "a.csv", [10, 20], [1.5, 2.5])
    out = export_plot_data([tmp_path / "a.csv"], tmp_path / "o.csv")
    assert out == [(10, 1.5, 0.0, 1), (20, 2.5, 0.0, 1)]


def test_export_two_point_spread(tmp_path):
    write_metrics(tmp_path / "a.csv", [10], [1.0])
    write_metrics(tmp_path / "b.csv", [10], [3.0])
    out = export_plot_data([tmp_path / "a.csv", tmp_path / "b.csv"], tmp_path / "o.csv")
    assert out == [(10, 2.0, 1.0, 2)]
    rows = read_metrics(tmp_path / "o.csv")
    assert (rows[0]["mean"], rows[0]["std"], rows[0]["count"]) == ("2", "1", "2")


def test_export_errors(tmp_path):
    with pytest.raises(ValueError, match="no metrics"):
        export_plot_data([], tmp_path / "o.csv")
    write_metrics(tmp_path / "a.csv", [10, 20], [1, 2])
    write_metrics(tmp_path / "b.csv", [10, 30], [1, 2])
    with pytest.raises(ValueError, match=r"\[20, 30\]"):
        export_plot_data([tmp_path / "a.csv", tmp_path / "b.csv"], tmp_path / "o.csv")
    write_metrics(tmp_path / "e.csv", [], [])
    with pytest.raises(ValueError, match="no logged"):
        export_plot_data([tmp_path / "e.csv"], tmp_path / "o.csv")
    assert not os.path.exists(tmp_path / "o.csv")


def test_export_real_runs(tmp_path):
    paths = []
    for seed in (0, 1):
        d = tmp_path / f"s{seed}"
        run_training(tiny(run={"seed": seed}), output_dir=str(d))
        paths.append(d / "metrics.csv")
    out = export_plot_data(paths, tmp_path / "curve.csv")
    assert [o[0] for o in out] == [20, 40, 60] and all(o[3] == 2 for o in out)
