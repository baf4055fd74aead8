import json
import subprocess
import sys

import numpy as np
import pytest
import yaml

from locoforge import cli
from locoforge import config as C
from locoforge import policy as pol
from locoforge.demo import load_demo


def run(*argv):
    return cli.main([str(a) for a in argv])


def tiny_config(tmp_path, **ppo):
    data = {"seed": 0, "out_dir": str(tmp_path / "run"), "env": {"task": "hopping", "stage": 1},
            "ppo": {"n_envs": 2, "horizon": 16, "minibatch": 16, "updates": 2, "checkpoint_every": 1, **ppo}}
    path = tmp_path / "cfg.yaml"
    path.write_text(yaml.safe_dump(data))
    return path


def test_demo_gen_and_validate(tmp_path, capsys):
    out = tmp_path / "hop.csv"
    assert run("demo-gen", "--task", "hopping", "--apex", 0.36, "--out", out) == 0
    assert len(load_demo(out)) == 51
    assert run("validate", out) == 0
    assert "[PASS]" in capsys.readouterr().out
    assert run("demo-gen", "--task", "bounding", "--amplitude", 0.3, "--out", tmp_path / "b.csv") == 0
    assert load_demo(tmp_path / "b.csv").pitch.max() == pytest.approx(0.3, abs=1e-9)


def test_validate_nan_demo_names_frame_and_column(tmp_path, capsys):
    out = tmp_path / "hop.csv"
    run("demo-gen", "--out", out)
    lines = out.read_text().splitlines()
    cells = lines[7].split(",")
    cells[8] = "nan"
    lines[7] = ",".join(cells)
    out.write_text("\n".join(lines) + "\n")
    assert run("validate", out) == 1
    msg = capsys.readouterr().out
    assert "[FAIL]" in msg and "frame 4" in msg and "vz" in msg


def test_validate_configs(tmp_path, capsys):
    good = tiny_config(tmp_path)
    assert run("validate", good) == 0
    bad = tmp_path / "bad.yaml"
    bad.write_text("rewards:\n  k_tipo: 1.0\n")
    assert run("validate", bad) == 1
    assert "k_tipo" in capsys.readouterr().out


def test_bundled_configs_validate():
    from pathlib import Path
    configs = sorted((Path(__file__).resolve().parents[1] / "configs").glob("*.yaml"))
    assert len(configs) == 6
    for p in configs:
        assert run("validate", p) == 0, p


def test_stage2_without_checkpoint_is_usage_error(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        run("train", "--config", tiny_config(tmp_path), "--stage", 2)
    assert exc.value.code == 2
    assert "--from-checkpoint" in capsys.readouterr().err
    assert not (tmp_path / "run").exists()


def test_train_twice_byte_identical_with_manifest(tmp_path):
    cfg = tiny_config(tmp_path)
    for name in ("a", "b"):
        assert run("train", "--config", cfg, "--out-dir", tmp_path / name, "--workers", 1) == 0
    a, b = tmp_path / "a", tmp_path / "b"
    assert (a / "train_log.csv").read_bytes() == (b / "train_log.csv").read_bytes()
    m = json.loads((a / "manifest.json").read_text())
    for key in ("config_hash", "seed", "build", "command"):
        assert key in m
    again = C.load_config(a / "config.yaml")
    assert C.config_hash(again) == m["config_hash"]
    assert (a / "policy_final.txt").exists() and (a / "adam_0002.txt").exists()
    # stage 2 from the stage-1 checkpoint
    assert run("train", "--config", cfg, "--stage", 2, "--from-checkpoint", a / "policy_final.txt",
               "--out-dir", tmp_path / "s2") == 0
    header = (tmp_path / "s2" / "train_log.csv").read_text().splitlines()[0]
    assert "mean_r_hp" in header


def test_workers_flag_does_not_change_log(tmp_path):
    cfg = tiny_config(tmp_path)
    run("train", "--config", cfg, "--out-dir", tmp_path / "w1", "--workers", 1)
    run("train", "--config", cfg, "--out-dir", tmp_path / "w2", "--workers", 2)
    assert (tmp_path / "w1" / "train_log.csv").read_bytes() == (tmp_path / "w2" / "train_log.csv").read_bytes()


def test_resume_flag(tmp_path):
    cfg = tiny_config(tmp_path, updates=3)
    run("train", "--config", cfg, "--out-dir", tmp_path / "full")
    run("train", "--config", cfg, "--out-dir", tmp_path / "part", "--updates", 3)
    # drop the last update's artifacts to simulate an interruption after update 2
    for f in ("policy_0003.txt", "adam_0003.txt", "trainer_0003.json", "policy_final.txt"):
        (tmp_path / "part" / f).unlink()
    run("train", "--config", cfg, "--out-dir", tmp_path / "part", "--resume")
    assert (tmp_path / "full" / "train_log.csv").read_bytes() == (tmp_path / "part" / "train_log.csv").read_bytes()


def test_seed_resolution(monkeypatch):
    monkeypatch.delenv(C.SEED_ENV_VAR, raising=False)
    assert C.resolve_seed(None, 3) == 3
    monkeypatch.setenv(C.SEED_ENV_VAR, "11")
    assert C.resolve_seed(None, 3) == 11
    assert C.resolve_seed(5, 3) == 5
    monkeypatch.setenv(C.SEED_ENV_VAR, "x")
    with pytest.raises(C.ConfigError):
        C.resolve_seed(None, 3)


def test_env_seed_reaches_manifest(tmp_path, monkeypatch):
    monkeypatch.setenv(C.SEED_ENV_VAR, "7")
    run("train", "--config", tiny_config(tmp_path, updates=1), "--out-dir", tmp_path / "r")
    assert json.loads((tmp_path / "r" / "manifest.json").read_text())["seed"] == 7


def test_config_round_trip(tmp_path):
    cfg = C.load_config(tiny_config(tmp_path))
    p = tmp_path / "again.yaml"
    C.save_config(cfg, p)
    assert C.load_config(p) == cfg
    assert C.config_hash(C.load_config(p)) == C.config_hash(cfg)


def test_config_errors(tmp_path):
    with pytest.raises(C.ConfigError):
        C.from_dict({"bogus": 1})
    with pytest.raises(C.ConfigError):
        C.from_dict({"demo": {"path": "missing.csv"}}, base_dir=tmp_path)
    with pytest.raises(C.ConfigError):
        C.from_dict({"rewards": {"z_base_min": 0.7, "z_base_max": 0.5}})
    with pytest.raises(C.ConfigError):
        C.from_dict({"ppo": {"clip": 2.0}})


def test_eval_replay_and_drop_test(tmp_path, capsys):
    cfg = tiny_config(tmp_path)
    p = pol.init_params(10, np.random.default_rng(0))
    p.set_flat(np.zeros(p.size))
    p["actor_b2"] = C.load_config(cfg).build_demo().mean_posture()
    ck = tmp_path / "hold.txt"
    pol.save_params(p, ck)
    out = tmp_path / "drop"
    assert run("eval", "drop-test", "--config", cfg, "--checkpoint", ck, "--out-dir", out,
               "--heights", 0.4, 0.5, "--horizon", 100) == 0
    assert (out / "summary.csv").exists() and (out / "manifest.json").exists()
    trace = out / "trace_+0.40.csv"
    assert run("eval", "replay", "--trace", trace, "--config", cfg, "--stage", 2) == 0
    assert "PASS" in capsys.readouterr().out
    # a tampered reward column fails the replay
    lines = trace.read_text().splitlines()
    head = lines[0].split(",")
    cells = lines[5].split(",")
    j = head.index("r_hp")
    cells[j] = repr(float(cells[j]) + 1e-6)
    lines[5] = ",".join(cells)
    trace.write_text("\n".join(lines) + "\n")
    assert run("eval", "replay", "--trace", trace, "--config", cfg, "--stage", 2) == 1


def test_eval_rejects_wrong_task_checkpoint(tmp_path, capsys):
    cfg = tiny_config(tmp_path)
    ck = tmp_path / "p12.txt"
    pol.save_params(pol.init_params(12, np.random.default_rng(0)), ck)
    assert run("eval", "drop-test", "--config", cfg, "--checkpoint", ck, "--out-dir", tmp_path / "x") == 2
    assert "obs_dim" in capsys.readouterr().err


def test_console_script_help():
    r = subprocess.run([sys.executable, "-m", "locoforge.cli", "--help"], capture_output=True, text=True)
    assert r.returncode == 0
    for sub in ("demo-gen", "train", "eval", "validate"):
        assert sub in r.stdout
