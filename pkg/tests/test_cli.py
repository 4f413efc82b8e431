import csv

import numpy as np
import pytest

from modreach import cli
from modreach.checkpoint import load_checkpoint
from modreach.control import ControlTrainer
from modreach.perception import load_dataset
from modreach.render import read_pgm

SMALL_CONTROL = ["--set", "control.eval_every=100", "--set", "control.eval_episodes=5",
                 "--set", "control.replay_capacity=500", "--set", "control.target_sync=50"]


def run(*argv):
    return cli.main([str(a) for a in argv])


def test_render(tmp_path, capsys):
    out = tmp_path / "s.pgm"
    assert run("render", "--scene", "q=0,0,0;target=0.45,0.2", "--style", "A", "--out", out) == 0
    img = read_pgm(out)
    assert img.shape == (84, 84)
    occ = tmp_path / "o.pgm"
    assert run("render", "--scene", "q=0,0,0;target=0.45,0.2", "--out", occ, "--occlude", "10,10,30,30") == 0
    assert not np.array_equal(read_pgm(occ), img)
    assert "sha256=" in capsys.readouterr().out


def test_render_bad_scene(tmp_path):
    assert run("render", "--scene", "q=0,0;tgt=1", "--out", tmp_path / "x.pgm") == 2
    assert run("render", "--scene", "q=0,0,0;target=0,0", "--out", tmp_path / "x.pgm", "--occlude", "1,2") == 2


def test_gen_data_checksums(tmp_path, capsys):
    a, b = tmp_path / "a.mdset", tmp_path / "b.mdset"
    assert run("gen-data", "--style", "A", "--count", 30, "--seed", 7, "--out", a) == 0
    assert run("gen-data", "--style", "A", "--count", 30, "--seed", 7, "--out", b) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0].split("sha256=")[1] == lines[1].split("sha256=")[1]
    assert a.read_bytes() == b.read_bytes()
    assert (tmp_path / cli.CONFIG_ECHO).exists()


def test_gen_data_header(tmp_path):
    out = tmp_path / "sub" / "b.mdset"
    assert run("gen-data", "--style", "B", "--count", 400, "--out", out) == 0
    ds = load_dataset(out)
    assert ds.style == "B" and len(ds) == 400


def test_gen_data_zero_count(tmp_path):
    assert run("gen-data", "--count", 0, "--out", tmp_path / "x.mdset") == 2


def test_usage_errors(tmp_path):
    assert run("eval", "--mode", "bogus") == 2
    assert run("nonsense") == 2
    assert run("gradcheck", "--set", "arm.nope=1") == 2
    assert run("gradcheck", "--set", "novalue") == 2


def test_missing_model_is_data_error(tmp_path):
    assert run("eval", "--mode", "control", "--control", tmp_path / "none.mdqn", "--out", tmp_path / "r.csv") == 3
    bad = tmp_path / "bad.mdqn"
    bad.write_bytes(b"garbage")
    assert run("eval", "--mode", "control", "--control", bad, "--out", tmp_path / "r.csv") == 3


def test_config_env_var(tmp_path, monkeypatch):
    cfg = tmp_path / "c.ini"
    cfg.write_text("[arm]\ndof = 1\n[control]\nsteps = 120\n")
    monkeypatch.setenv("MODREACH_CONFIG", str(cfg))
    out = tmp_path / "run"
    assert run("train-control", "--out-dir", out, *SMALL_CONTROL) == 0
    ck = load_checkpoint(out / "control.mdqn")
    assert ck.step == 120 and ck.output_arity == 3
    assert "dof = 1" in (out / cli.CONFIG_ECHO).read_text()
    cfg.write_text("[arm]\nbogus = 1\n")
    assert run("train-control", "--out-dir", out) == 2


def test_train_control_methods(tmp_path):
    for method in ("kgps", "egreedy"):
        assert run("train-control", "--dof", 1, "--method", method, "--steps", 200, "--seed", 1,
                   "--out-dir", tmp_path, *SMALL_CONTROL) == 0
    a = (tmp_path / "curve_kgps_dof1.csv").read_text()
    b = (tmp_path / "curve_egreedy_dof1.csv").read_text()
    assert a.splitlines()[0] == "step,success_rate,d_med_cm,d_q3_cm,avg_reward,epsilon"
    assert len(a.splitlines()) == 4 and a != b


def test_train_control_resume(tmp_path, monkeypatch):
    args = ["train-control", "--dof", 2, "--steps", 400, "--checkpoint-every", 150, *SMALL_CONTROL]
    assert run(*args, "--out-dir", tmp_path / "full") == 0

    real_save = ControlTrainer.save
    calls = []

    def crash_after_first(self, path, with_replay=True):
        real_save(self, path, with_replay)
        calls.append(self.step)
        raise KeyboardInterrupt

    monkeypatch.setattr(ControlTrainer, "save", crash_after_first)
    with pytest.raises(KeyboardInterrupt):
        run(*args, "--out-dir", tmp_path / "part")
    assert calls == [150]
    monkeypatch.setattr(ControlTrainer, "save", real_save)
    assert run(*args, "--out-dir", tmp_path / "part", "--resume") == 0
    full = (tmp_path / "full" / "control.mdqn").read_bytes()
    assert (tmp_path / "part" / "control.mdqn").read_bytes() == full
    assert (tmp_path / "part" / "curve_kgps_dof2.csv").read_text() == \
        (tmp_path / "full" / "curve_kgps_dof2.csv").read_text()


def test_perception_finetune_eval_pipeline(tmp_path, capsys):
    small = ["--set", "perception.sim_pool=60", "--set", "perception.batch_size=8"]
    b = tmp_path / "b.mdset"
    assert run("gen-data", "--style", "B", "--count", 40, "--seed", 3, "--out", b) == 0
    assert run("train-perception", "--steps", 20, "--out-dir", tmp_path / "p", *small) == 0
    assert (tmp_path / "p" / "perception_loss.csv").exists()
    assert run("train-perception", "--steps", 10, "--p-real", 1.0, "--data-b", b, "--init",
               tmp_path / "p" / "perception.mdqn", "--out-dir", tmp_path / "p100", *small) == 0
    assert run("train-control", "--steps", 200, "--out-dir", tmp_path / "c", *SMALL_CONTROL) == 0

    ft = ["--set", "finetune.task_batch=8", "--set", "finetune.perception_batch=16",
          "--set", "finetune.learn_start=16", "--set", "finetune.replay_capacity=100", *small]
    assert run("finetune", "--perception", tmp_path / "p" / "perception.mdqn", "--control",
               tmp_path / "c" / "control.mdqn", "--data-b", b, "--steps", 30, "--out-dir", tmp_path / "ft", *ft) == 0
    assert run("finetune", "--steps", 30, "--out-dir", tmp_path / "ft2", *ft) == 2

    report = tmp_path / "r" / "report.csv"
    assert run("eval", "--mode", "e2e", "--perception", tmp_path / "ft" / "perception.mdqn", "--control",
               tmp_path / "ft" / "control.mdqn", "--episodes", 3, "--style", "B", "--name", "EE2-FT",
               "--out", report) == 0
    rows = list(csv.DictReader(report.open()))
    assert len(rows) == 1 and rows[0]["net"] == "EE2-FT" and rows[0]["style"] == "B"
    assert run("eval", "--mode", "perception", "--perception", tmp_path / "p" / "perception.mdqn",
               "--data", b, "--out", tmp_path / "pe.csv") == 0
    assert "e_mu" in (tmp_path / "pe.csv").read_text()
    assert run("eval", "--mode", "e2e", "--control", tmp_path / "c" / "control.mdqn", "--out", report) == 2


def test_gradcheck_command(capsys):
    assert run("gradcheck", "--params", 30) == 0
    out = capsys.readouterr().out
    assert "max relative error" in out and "FAIL" not in out


def test_gradcheck_failure_exit_code(monkeypatch):
    from modreach.gradcheck import CheckResult

    monkeypatch.setattr(cli, "run_suite", lambda *a: [CheckResult("fc", 1.0)])
    assert run("gradcheck") == 4
