"""Acceptance suite: one test per criterion, each at its stated scale and tolerance.

Run alone with ``pytest tests/test_acceptance.py``; a pass/fail line per
criterion is printed in the terminal summary.  Criteria 2 and 3 train
yaw-task agents at desk scale and take several minutes in total.
"""
import math
import time
from dataclasses import replace

import numpy as np
import pytest

from blimprl import config as C
from blimprl import policy as pol
from blimprl.actuation import ActuatorRateConfig, mix_raw
from blimprl.cli import main
from blimprl.env import (
    BlimpEnv,
    NoiseConfig,
    RewardConfig,
    YawEnv,
    reward_blimp,
)
from blimprl.evaluation import (
    GOOD_PID,
    POOR_PID,
    REPORT_COLUMNS,
    eval_seeds,
    evaluate_returns,
    gen_coil,
    gen_square,
    max_drop,
    pid_only,
    relative_improvement,
    train_with_eval,
    yaw_config,
)
from blimprl.policy import ActorCritic, PolicyConfig
from blimprl.ppo import compute_gae
from blimprl.sim import BlimpState

criterion = pytest.mark.criterion


def desk_tree():
    return C.resolve(presets=["desk"])


def train_yaw(pid, mixer, seed, tree):
    env_cfg = yaw_config(pid, mixer, C.yaw_env_config(tree))
    ppo = C.ppo_config(tree)
    ppo.seed = seed
    ev = tree["eval"]
    _, initial, curve = train_with_eval("yaw", env_cfg, C.policy_config(tree), ppo,
                                        ev["train_eval_every"], ev["train_eval_episodes"])
    return initial, curve


def pid_baseline(pid, tree):
    env_cfg = pid_only(yaw_config(pid, "hybrid", C.yaw_env_config(tree)))
    return float(evaluate_returns("yaw", env_cfg, None, eval_seeds(tree["eval"]["train_eval_episodes"])).mean())


# ------------------------------------------------------------------------ 1


@criterion(1, "untrained agent matches PID-only on 10 yaw episodes (<1%)")
def test_zero_init_matches_pid(record_property):
    t0 = time.perf_counter()
    quiet = NoiseConfig(0.0, 0.0)
    cfg = replace(yaw_config(GOOD_PID, "relative", C.yaw_env_config(C.resolve())), noise=quiet)
    seeds = eval_seeds(10)
    net = ActorCritic(YawEnv.obs_dim, YawEnv.act_dim, PolicyConfig(), seed=0)
    agent = evaluate_returns("yaw", cfg, net, seeds).mean()
    pid = evaluate_returns("yaw", pid_only(cfg), None, seeds).mean()
    diff = abs(agent - pid) / abs(pid)
    elapsed = time.perf_counter() - t0
    record_property("detail", f"relative mixer, agent {agent:.6f} vs pid {pid:.6f}, "
                              f"diff {diff:.2e}, {elapsed:.1f}s")
    assert diff < 0.01
    assert elapsed < 60


# ------------------------------------------------------------------------ 2


@criterion(2, "desk training improves good PID by >=10% on 3 seeds (hybrid, LSTM)")
def test_learning_beats_good_pid(record_property):
    t0 = time.perf_counter()
    tree = desk_tree()
    base = pid_baseline(GOOD_PID, tree)
    gains = []
    for seed in range(3):
        _, curve = train_yaw(GOOD_PID, "hybrid", seed, tree)
        gains.append(relative_improvement(curve[-1], base))
    elapsed = time.perf_counter() - t0
    record_property("detail", f"pid {base:.3f}, improvement per seed "
                              + ", ".join(f"{g:+.1%}" for g in gains) + f", {elapsed / 60:.1f} min")
    assert all(g >= 0.10 for g in gains)
    assert elapsed <= 2 * 3600


# ------------------------------------------------------------------------ 3


@criterion(3, "relative mixer within 5% of P-only PID; absolute drop >= relative drop")
def test_relative_mixer_stasis(record_property):
    t0 = time.perf_counter()
    tree = desk_tree()
    base = pid_baseline(POOR_PID, tree)
    finals, drops = {}, {"absolute": [], "relative": []}
    for mixer in ("relative", "absolute"):
        for seed in range(3):
            initial, curve = train_yaw(POOR_PID, mixer, seed, tree)
            # drop measured on the deterministic evaluation curve, untrained policy included
            drops[mixer].append(max_drop([initial, *curve], base))
            if mixer == "relative":
                finals[seed] = relative_improvement(curve[-1], base)
    elapsed = time.perf_counter() - t0
    mean_abs, mean_rel = np.mean(drops["absolute"]), np.mean(drops["relative"])
    record_property("detail", f"pid {base:.3f}, relative final "
                              + ", ".join(f"{v:+.2%}" for v in finals.values())
                              + f"; max drop absolute {mean_abs:.4f} vs relative {mean_rel:.4f}"
                              + f", {elapsed / 60:.1f} min")
    assert all(abs(v) <= 0.05 for v in finals.values())
    assert mean_abs >= mean_rel
    assert elapsed <= 3 * 3600


# ------------------------------------------------------------------------ 4


@criterion(4, "mixer identities on 1e6 random tuples (1e-12)")
def test_mixer_algebra(record_property):
    rng = np.random.default_rng(0)
    n = 1_000_000
    x, y = rng.uniform(-1, 1, n), rng.uniform(-1, 1, n)
    a, b = rng.uniform(0, 1, n), rng.uniform(0, 1, n)
    zero, one = np.zeros(n), np.ones(n)
    worst = max(
        np.max(np.abs(mix_raw("absolute", x, y, a, zero) - x)),
        np.max(np.abs(mix_raw("relative", x, y, a, zero) - x)),
        np.max(np.abs(mix_raw("absolute", x, y, a, one) - y)),
        np.max(np.abs(mix_raw("hybrid", x, y, zero, b) - mix_raw("absolute", x, y, a, b))),
        np.max(np.abs(mix_raw("hybrid", x, y, one, b) - mix_raw("relative", x, y, a, b))),
        # zero-residual passthrough: exact for the relative mixer at any beta
        np.max(np.abs(mix_raw("relative", x, zero, a, b) - x)),
        # ... and for every mixer at beta = 0
        *(np.max(np.abs(mix_raw(k, x, zero, a, zero) - x)) for k in ("absolute", "hybrid")),
    )
    # the literal passthrough cannot also hold for absolute/hybrid at beta > 0:
    # it contradicts "absolute with beta = 1 gives y" at y = 0, x != 0
    contradiction = mix_raw("absolute", 0.5, 0.0, 0.0, 1.0)
    record_property("detail", f"max error {worst:.1e}; y=0 passthrough checked for relative (any beta) "
                              f"and all mixers at beta=0, absolute/hybrid at beta>0 scale PID by (1-beta) "
                              f"as the beta=1 identity requires")
    assert worst <= 1e-12
    assert contradiction == 0.0


# ------------------------------------------------------------------------ 5


def brute_gae(r, v, d, gamma, lam, last):
    T = len(r)
    adv = np.zeros(T)
    for t in range(T):
        acc, w = 0.0, 1.0
        for k in range(t, T):
            nxt = v[k + 1] if k + 1 < T else last
            acc += w * (r[k] + gamma * nxt * (1 - d[k]) - v[k])
            if d[k]:
                break
            w *= gamma * lam
        adv[t] = acc
    return adv


@criterion(5, "GAE equals brute force on 1000 sequences (1e-10)")
def test_gae_equivalence(record_property):
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(1000):
        T = int(rng.integers(1, 17))
        r, v = rng.normal(size=T), rng.normal(size=T)
        d = (rng.random(T) < 0.15).astype(float)
        gamma, lam, last = rng.uniform(0, 0.9999), rng.uniform(0, 1), rng.normal()
        adv, ret = compute_gae(r, v, d, gamma, lam, last)
        worst = max(worst, np.max(np.abs(adv - brute_gae(r, v, d, gamma, lam, last))))
        assert np.array_equal(ret, adv + v)
    record_property("detail", f"max error {worst:.1e}")
    assert worst <= 1e-10


# ------------------------------------------------------------------------ 6


@criterion(6, "BPTT gradients match finite differences (width 8, 3 steps, 64-bit)")
def test_gradient_check(record_property):
    cfg = PolicyConfig(hidden=(8, 8), lstm_size=8, out_init=0.5)
    net = ActorCritic(4, 2, cfg, seed=0, dtype=np.float64)
    rng = np.random.default_rng(1)
    net.norm.update(rng.normal(size=(64, net.in_dim)))
    T, B = 3, 2
    x = rng.normal(size=(T, B, net.in_dim))
    resets = np.zeros((T, B))
    resets[1, 1] = 1.0
    cm, cv = rng.normal(size=(T, B, 2)), rng.normal(size=(T, B))

    def loss():
        mean, _, value, _, cache = net.forward(x, net.initial_state(B), resets)
        return float((cm * mean).sum() + (cv * value).sum()), cache

    grads = net.backward(loss()[1], cm, cv)
    h, worst, count = 1e-6, 0.0, 0
    for name, p in net.params.items():
        if name == "log_std":  # enters only the loss, never the network outputs
            continue
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + h
            up = loss()[0]
            p[idx] = old - h
            down = loss()[0]
            p[idx] = old
            fd = (up - down) / (2 * h)
            g = grads[name][idx]
            worst = max(worst, abs(g - fd) / max(abs(g), abs(fd), 1e-6))
            count += 1
    record_property("detail", f"{count} parameters, max relative error {worst:.1e}")
    assert worst <= 1e-4


# ------------------------------------------------------------------------ 7


@criterion(7, "rate limit and observation box over 1e5 random env steps")
def test_rate_limit_and_observation_box(record_property):
    rng = np.random.default_rng(0)
    c_blimp = ActuatorRateConfig().as_array()
    violations, steps = 0, 0
    plan = [(BlimpEnv(), 80_000), (YawEnv(), 20_000)]
    for env, n in plan:
        c = c_blimp if isinstance(env, BlimpEnv) else np.array([0, 0, env.cfg.rate, 0])
        done, episode = True, 0
        for _ in range(n):
            if done:
                env.reset(episode)
                episode += 1
                if isinstance(env, BlimpEnv) and episode % 3 == 0:
                    # push some episodes into far-off states
                    env.state = BlimpState(position=tuple(rng.uniform(-150, 150, 3)),
                                           velocity=(rng.uniform(-8, 8), 0.0, rng.uniform(-3, 3)),
                                           attitude=(0.0, 0.0, rng.uniform(-math.pi, math.pi)),
                                           yaw_rate=rng.uniform(-3, 3))
            before = env.actuators.copy()
            a = rng.uniform(-1.5, 1.5, env.act_dim) if rng.random() < 0.9 else np.sign(rng.normal(size=env.act_dim))
            obs, _, done, _ = env.step(a)
            after = env.actuators
            violations += int(np.any(np.abs(after - before) > c + 1e-12))
            violations += int(np.any(np.abs(after) > 1.0))
            violations += int(np.any(np.abs(obs) > 1.0) or not np.all(np.isfinite(obs)))
            steps += 1
    record_property("detail", f"{steps} steps, {violations} violations")
    assert steps == 100_000 and violations == 0


# ------------------------------------------------------------------------ 8


@criterion(8, "reward arithmetic on 1e4 random inputs (1e-12) and worked examples")
def test_reward_arithmetic(record_property):
    cfg = RewardConfig()
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(10_000):
        z_r, l_r, psi_r, v_r, nxt = rng.uniform(-1, 1, 5)
        act = rng.uniform(-1, 1, 8)
        dist = rng.uniform(0, 150)
        success = float(rng.random() < 0.1)
        obs = dict(z_r=z_r, l_r=l_r, psi_r=psi_r, v_r=v_r, psi_r_next=nxt)
        r, comps = reward_blimp(obs, act, dist, success, cfg)
        # independent evaluation with the published weights written out
        track = -0.6 * abs(z_r) - 0.2 * abs(l_r) - 0.1 * abs(psi_r) - 0.1 * abs(v_r)
        acts = -0.5 * abs(act[0]) - 1.0 * abs(act[1]) - 1.0 * abs(act[2])
        bonus = -1.0 * abs(nxt) / (1.0 + dist)
        expect = 0.05 * (100.0 * success + 0.9 * track + 0.1 * acts + 0.1 * bonus)
        worst = max(worst, abs(r - expect), abs(comps[1] - track), abs(comps[2] - acts), abs(comps[3] - bonus))
        worst = max(worst, abs(r - cfg.scale * sum(w * c for w, c in zip(cfg.weights, comps))))
    zero_obs = dict(z_r=0.0, l_r=0.0, psi_r=0.0, v_r=0.0, psi_r_next=0.0)
    ex1 = reward_blimp({**zero_obs, "z_r": 1.0}, np.zeros(8), 50.0, 0.0, cfg)[1][1]
    ex2 = reward_blimp(zero_obs, np.r_[1.0, 1.0, 1.0, np.zeros(5)], 50.0, 0.0, cfg)[1][2]
    ex3 = reward_blimp({**zero_obs, "psi_r_next": 0.5}, np.zeros(8), 4.0, 0.0, cfg)[1][3]
    record_property("detail", f"max error {worst:.1e}; examples {ex1:g}, {ex2:g}, {ex3:g}")
    assert worst <= 1e-12
    assert abs(ex1 + 0.6) <= 1e-12 and abs(ex2 + 2.5) <= 1e-12 and abs(ex3 + 0.1) <= 1e-12


# ------------------------------------------------------------------------ 9


@criterion(9, "square and coil geometry (1e-9)")
def test_trajectory_geometry(record_property):
    sq = gen_square(80.0).points
    loop = np.vstack([sq, sq[:1]])
    sq_d = np.hypot(*np.diff(loop, axis=0)[:, :2].T)
    coil = gen_coil().points
    co_d = np.hypot(*np.diff(coil, axis=0)[:, :2].T)
    angles = np.diff(np.unwrap(np.arctan2(coil[:, 1], coil[:, 0])))
    errors = [
        np.max(np.abs(sq_d - 80.0)),
        np.max(np.abs(co_d - 2 * 30.0 * math.sin(math.radians(22.5)))),
        np.max(np.abs(np.hypot(coil[:, 0], coil[:, 1]) - 30.0)),
        np.max(np.abs(angles - math.radians(45.0))),
        np.max(np.abs(np.diff(coil[:, 2]) + 2.0)),
    ]
    record_property("detail", f"square 4 pts, coil {len(coil)} pts, planar coil spacing {co_d[0]:.4f} m, "
                              f"max error {max(errors):.1e}")
    assert len(sq) == 4 and len(coil) == 15
    assert max(errors) <= 1e-9


# ------------------------------------------------------------------------ 10


@criterion(10, "rollout --seed 7 twice gives byte-identical CSV")
def test_rollout_determinism(tmp_path, record_property):
    ckpt = tmp_path / "policy.bin"
    pol.save(ActorCritic(BlimpEnv.obs_dim, BlimpEnv.act_dim, PolicyConfig(out_init=0.3), seed=5), ckpt)
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        code = main(["rollout", "--task", "blimp", "--checkpoint", str(ckpt), "--trajectory", "random",
                     "--seed", "7", "--out", str(out)])
        assert code == 0
        outs.append(out)
    files = ("rollout.csv", "trajectory.csv")
    same = all((outs[0] / f).read_bytes() == (outs[1] / f).read_bytes() for f in files)
    n = len((outs[0] / "rollout.csv").read_text().splitlines()) - 1
    record_property("detail", f"{n} logged steps, identical={same}")
    assert same and n > 0


# ------------------------------------------------------------------------ 11


@pytest.fixture(scope="module")
def blimp_checkpoint(tmp_path_factory):
    out = tmp_path_factory.mktemp("blimp_train")
    assert main(["train", "--preset", "smoke", "--task", "blimp", "--seed", "0", "--out", str(out)]) == 0
    return out / "policy.bin"


@criterion(11, "eval over the wind/buoyancy grid emits the table shape with finite values")
def test_eval_grid_shape(tmp_path, blimp_checkpoint, record_property):
    t0 = time.perf_counter()
    out = tmp_path / "eval"
    code = main(["eval", "--preset", "desk", "--checkpoint", str(blimp_checkpoint), "--out", str(out)])
    assert code == 0
    lines = (out / "report.csv").read_text().splitlines()
    header, rows = lines[1].split(","), [ln.split(",") for ln in lines[2:]]
    wind_rows = [r for r in rows if r[2] == "1.0"]
    buoy_rows = [r for r in rows if r[2] != "1.0"]
    finite = all(math.isfinite(float(v)) for r in rows for v in r[4:9])
    elapsed = time.perf_counter() - t0
    record_property("detail", f"{len(wind_rows)} wind rows (2 traj x 3 wind x 2 ctrl), {len(buoy_rows)} buoyancy "
                              f"rows (2 levels x 2 ctrl), finite={finite}, {elapsed:.0f}s")
    assert lines[0].startswith("# desk preset")
    assert header == REPORT_COLUMNS
    assert len(wind_rows) == 12 and len(buoy_rows) == 4
    assert {(r[0], r[1], r[3]) for r in wind_rows} == {
        (t, w, c) for t in ("square", "coil") for w in ("0.0", "0.5", "1.0") for c in ("drrl", "pid")}
    assert {(r[0], r[2], r[3]) for r in buoy_rows} == {
        ("square", b, c) for b in ("0.93", "1.07") for c in ("drrl", "pid")}
    assert finite
    assert elapsed <= 3600
