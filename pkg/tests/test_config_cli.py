import subprocess
import sys

import pytest

from blimprl import config as C
from blimprl.cli import main

SMOKE = ["--preset", "smoke"]


def run(tmp_path, name, *argv):
    out = tmp_path / name
    code = main([*argv, "--out", str(out)])
    return code, out


# ---------------------------------------------------------------- config layer


def test_defaults_cover_every_section():
    tree = C.default_tree()
    assert set(tree) == {"run", "sim", "actuation", "env", "policy", "ppo", "eval", "ablation"}
    C.build_all(tree)


def test_unknown_keys_rejected():
    with pytest.raises(C.ConfigError, match="ppo.gama"):
        C.resolve(overrides=["ppo.gama=0.9"])
    with pytest.raises(C.ConfigError):
        C.merge(C.default_tree(), {"bogus": {}})


def test_type_and_value_errors_surface():
    with pytest.raises(C.ConfigError):
        C.resolve(overrides=["ppo.horizon=fast"])
    with pytest.raises(C.ConfigError):
        C.resolve(overrides=["ppo.gamma=1.5"])
    with pytest.raises(C.ConfigError):
        C.parse_override("ppo.gamma")


def test_override_parsing():
    assert C.parse_override("ppo.gamma=0.99") == {"ppo": {"gamma": 0.99}}
    assert C.parse_override("run.task=blimp") == {"run": {"task": "blimp"}}
    assert C.parse_override("eval.wind_speeds=[0, 2]") == {"eval": {"wind_speeds": [0, 2]}}
    tree = C.resolve(overrides=["ppo.lr_start=1"])
    assert tree["ppo"]["lr_start"] == 1.0 and isinstance(tree["ppo"]["lr_start"], float)


def test_paper_preset_values():
    tree = C.resolve(presets=["paper"])
    ppo = C.ppo_config(tree)
    assert (ppo.gamma, ppo.lam, ppo.horizon, ppo.batch_size, ppo.minibatch_size) == (0.999, 0.9, 800, 22400, 2048)
    assert (ppo.sgd_iterations, ppo.grad_clip, ppo.lr_start, ppo.lr_end) == (32, 1.0, 1e-4, 5e-6)
    env = C.blimp_env_config(tree)
    assert env.reward.weights == (100.0, 0.9, 0.1, 0.1)
    assert env.reward.track == (0.6, 0.2, 0.1, 0.1) and env.reward.act == (0.5, 1.0)
    assert env.reward.epsilon == 5.0 and env.reward.scale == 0.05
    assert env.noise.observation == 0.02 and env.noise.action == 0.05
    assert env.rate.c == (0.4, 0.4, 0.1, 0.05)
    assert env.pid.thrust == (0.7, 0.01, 0.05) and env.pid.alt == (2.0, 0.02, 1.0)
    assert env.sim.arena_size == 200.0 and env.policy_hz == 10.0
    assert env.mixer.alpha == 0.5 and env.mixer.beta == 0.5
    yaw = C.yaw_env_config(tree)
    assert yaw.reward.epsilon == 0.1 and yaw.reward.scale == 0.1 and yaw.reward.success_time == 5.0
    assert yaw.pid == (1.0, 0.0, 0.5) and yaw.rate == 0.1
    r = env.randomization
    assert (r.wind_xy, r.buoyancy, r.freeflop_angle, r.collapse) == ((-1.5, 1.5), (0.9, 1.1), (0.0, 1.5), (0.0, 0.02))
    ev = C.eval_config(tree)
    assert (ev.runs, ev.duration, ev.wind_speeds, ev.buoyancies) == (7, 1800.0, (0.0, 0.5, 1.0), (0.93, 1.07))


def test_dump_round_trip(tmp_path):
    tree = C.resolve(presets=["desk"], overrides=["ppo.gamma=0.99", "actuation.mixer=none"])
    C.dump(tree, tmp_path / "c.toml")
    again = C.resolve(files=[tmp_path / "c.toml"])
    assert again == tree
    assert C.mixer_config(again) is None


def test_unknown_preset_and_task():
    with pytest.raises(C.ConfigError):
        C.load_preset("huge")
    with pytest.raises(C.ConfigError):
        C.resolve(overrides=["run.task=lateral"])


# ---------------------------------------------------------------- cli


def test_missing_config_exits_nonzero(tmp_path, capsys):
    code, _ = run(tmp_path, "x", "train", "--config", str(tmp_path / "nope.toml"))
    assert code != 0
    assert "config file not found" in capsys.readouterr().err


def test_unknown_override_exits_nonzero(tmp_path, capsys):
    code, _ = run(tmp_path, "x", "rollout", "--checkpoint", "pid-only", "ppo.gama=0.9")
    assert code == 2 and "unknown config key" in capsys.readouterr().err


def test_gamma_override_in_resolved_dump(tmp_path):
    code, out = run(tmp_path, "r", "rollout", "--checkpoint", "pid-only", "ppo.gamma=0.999", "env.yaw_horizon=20")
    assert code == 0
    dumped = C.load_file(out / "resolved_config.toml")
    assert dumped["ppo"]["gamma"] == 0.999


def test_seeded_rollouts_are_identical(tmp_path):
    args = ["rollout", "--task", "blimp", "--checkpoint", "pid-only", "--trajectory", "random",
            "--seed", "7", "env.horizon=60"]
    for name in ("a", "b"):
        assert run(tmp_path, name, *args)[0] == 0
    for f in ("rollout.csv", "trajectory.csv", "resolved_config.toml"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    header = (tmp_path / "a" / "rollout.csv").read_text().splitlines()[0].split(",")
    for col in ("a_pid_0", "a_rl_0", "a_joint_0", "r_success", "r_track", "r_act", "r_bonus"):
        assert col in header


def test_rollout_reproducible_from_dump(tmp_path):
    args = ["rollout", "--task", "yaw", "--checkpoint", "pid-only", "--seed", "3", "env.yaw_horizon=40"]
    assert run(tmp_path, "a", *args)[0] == 0
    assert run(tmp_path, "b", "rollout", "--config", str(tmp_path / "a" / "resolved_config.toml"))[0] == 0
    assert (tmp_path / "a" / "rollout.csv").read_bytes() == (tmp_path / "b" / "rollout.csv").read_bytes()


def test_workers_flag_sets_batch(tmp_path):
    code, out = run(tmp_path, "w", "train", *SMOKE, "--workers", "3")
    assert code == 0
    dumped = C.load_file(out / "resolved_config.toml")
    assert dumped["ppo"]["workers"] == 3 and dumped["ppo"]["batch_size"] == 60
    assert run(tmp_path, "w0", "train", *SMOKE, "--workers", "0")[0] == 2


def test_train_then_eval_then_rollout(tmp_path):
    code, train_out = run(tmp_path, "train", "train", *SMOKE, "--task", "blimp", "--seed", "1")
    assert code == 0
    for f in ("curve.csv", "policy.bin", "policy.bin.txt", "checkpoint_00001.bin", "resolved_config.toml"):
        assert (train_out / f).is_file(), f
    ckpt = str(train_out / "policy.bin")
    code, ev = run(tmp_path, "eval", "eval", *SMOKE, "--checkpoint", ckpt, "eval.duration=1.0")
    assert code == 0
    lines = (ev / "report.csv").read_text().splitlines()
    assert lines[0].startswith("# desk preset") and len(lines) == 2 + 16
    assert (ev / "report.txt").is_file()
    code, ro = run(tmp_path, "ro", "rollout", *SMOKE, "--task", "blimp", "--checkpoint", ckpt,
                   "--trajectory", "square", "env.horizon=30")
    assert code == 0
    assert len((ro / "rollout.csv").read_text().splitlines()) == 31


def test_eval_without_checkpoint_fails(tmp_path, capsys):
    assert run(tmp_path, "e", "eval", *SMOKE)[0] == 2
    assert "checkpoint" in capsys.readouterr().err
    code, out = run(tmp_path, "p", "eval", *SMOKE, 'eval.controllers=["pid"]', "eval.duration=1.0")
    assert code == 0 and len((out / "report.csv").read_text().splitlines()) == 2 + 8


def test_checkpoint_task_mismatch(tmp_path, capsys):
    code, out = run(tmp_path, "t", "train", *SMOKE, "--task", "yaw")
    assert code == 0
    code, _ = run(tmp_path, "r", "rollout", "--task", "blimp", "--checkpoint", str(out / "policy.bin"))
    assert code == 2 and "observations" in capsys.readouterr().err


def test_ablate_command(tmp_path):
    code, out = run(tmp_path, "ab", "ablate", *SMOKE)
    assert code == 0
    assert len((out / "ablation.csv").read_text().splitlines()) == 1 + 2


def test_console_script_help():
    res = subprocess.run([sys.executable, "-m", "blimprl.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for cmd in ("train", "eval", "ablate", "rollout"):
        assert cmd in res.stdout
