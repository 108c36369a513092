"""Acceptance suite: one test per criterion, one PASS/FAIL line each.

Run with `pytest tests/test_acceptance.py -v -s`. The heavyweight fixture
(the scaled end-to-end protocol) is shared by the criteria that consume its
artifacts and runs once per session.
"""

import itertools
import math
import time

import numpy as np
import pytest
import torch
from torch import nn

from scooplab.datasets import DemoStore, LengthStats, reduction_percent
from scooplab.env import EnvAction, EnvConfig, GranularEnv
from scooplab.harness import (ExperimentPlan, ObservationLog, encode_log,
                              improvement_percent, run_full_protocol, run_trial)
from scooplab.ood import Monitor, RobustGaussian, fit_mcd, mahalanobis
from scooplab.policy import (NoiseSchedule, TrainConfig, encode_observation,
                             load_policy, noise_prediction_loss,
                             sample_action_chunk, train)
from scooplab.takeover import (ControlMode, TakeoverController, TakeoverEnded,
                               TakeoverStarted)

from conftest import obs_equal, tiny_action, tiny_obs

PROTOCOL_BUDGET_S = 1800.0


def report(criterion: str, ok: bool, detail: str = ""):
    line = f"[ACCEPTANCE] {criterion}: {'PASS' if ok else 'FAIL'}"
    if detail:
        line += f"  ({detail})"
    print("\n" + line)
    assert ok, line


# -- fixture: the scaled takeover protocol (criteria 3, 4, 6) -------------------

@pytest.fixture(scope="session")
def protocol(tmp_path_factory):
    plan = ExperimentPlan(
        initial_count=40,
        subset_sizes=(20, 40),
        takeover_rounds=1,
        takeovers_per_round=20,
        eval_trials=10,
        seed=0,
        train=TrainConfig(epochs=400, batch=64, learning_rate=1e-3),
        ood_initial_subsets=150,
        ood_max_frames=3000,
        trace_trial=3,
    )
    out = tmp_path_factory.mktemp("protocol")
    t0 = time.time()
    result = run_full_protocol(plan, out)
    elapsed = time.time() - t0
    return result, elapsed


# -- criterion 1 ------------------------------------------------------------------

def test_criterion_1_mcd_oracle_equivalence():
    def oracle_min_det(X, h):
        best = np.inf
        for idx in itertools.combinations(range(len(X)), h):
            det = np.linalg.det(np.cov(X[list(idx)], rowvar=False, ddof=1))
            best = min(best, det)
        return best

    t0 = time.time()
    matches = 0
    for seed in range(100):
        rng = np.random.default_rng(1000 + seed)
        X = rng.normal(size=(10, 2))
        g = fit_mcd(X, support_fraction=0.6, n_initial_subsets=500, seed=seed)
        fitted = np.linalg.det(np.cov(X[g.support], rowvar=False, ddof=1))
        if abs(fitted - oracle_min_det(X, 6)) <= 1e-9:
            matches += 1
    elapsed = time.time() - t0
    report("criterion 1 (MCD exhaustive-oracle equivalence)",
           matches >= 95 and elapsed < 5.0,
           f"{matches}/100 matches in {elapsed:.2f}s")


# -- criterion 2 ------------------------------------------------------------------

def test_criterion_2_distance_correctness_and_affine_invariance():
    g = RobustGaussian(mu=np.zeros(2), sigma=np.diag([4.0, 1.0]), ridge_lambda=0.0,
                       support=np.ones(2, bool), support_fraction=1.0)
    hand = mahalanobis(np.array([2.0, 1.0]), g)
    exact = abs(hand - math.sqrt(2.0)) <= 1e-12

    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(50):
        d = int(rng.integers(2, 6))
        X = rng.normal(size=(40, d))
        x = rng.normal(size=d)
        while True:
            T = rng.normal(size=(d, d))
            if abs(np.linalg.det(T)) > 0.3:
                break
        d0 = mahalanobis(x, fit_mcd(X, support_fraction=1.0))
        d1 = mahalanobis(T @ x, fit_mcd(X @ T.T, support_fraction=1.0))
        worst = max(worst, abs(d1 - d0) / max(1.0, abs(d0)))
    report("criterion 2 (Eq.-form correctness + affine invariance)",
           exact and worst <= 1e-6,
           f"hand-oracle |err|={abs(hand - math.sqrt(2.0)):.2e}, "
           f"worst affine drift={worst:.2e}")


# -- criterion 3 ------------------------------------------------------------------

def test_criterion_3_takeover_direction(protocol):
    result, elapsed = protocol
    combo = result.eval.rows["combo_a"].mean
    baseline = result.eval.rows["init40"].mean
    ok = combo >= baseline and elapsed <= PROTOCOL_BUDGET_S
    report("criterion 3 (takeover-trained policy matches/beats 40-demo baseline)",
           ok,
           f"combo_a={combo:.2f}g vs init40={baseline:.2f}g, "
           f"protocol {elapsed:.0f}s <= {PROTOCOL_BUDGET_S:.0f}s")


# -- criterion 4 ------------------------------------------------------------------

def test_criterion_4_takeover_brevity(protocol):
    result, _ = protocol
    initial = DemoStore(result.out_dir / "datasets" / "initial")
    takeover = DemoStore(result.out_dir / "datasets" / "takeover_a")
    init_steps = [len(d.steps) for d in initial]
    tk_steps = [len(d.steps) for d in takeover]
    ok = np.mean(tk_steps) < np.mean(init_steps)
    report("criterion 4 (takeover demos shorter than initial demos)", ok,
           f"mean takeover={np.mean(tk_steps):.1f} steps vs "
           f"initial={np.mean(init_steps):.1f} steps")


# -- criterion 5 ------------------------------------------------------------------

def test_criterion_5_prefix_bit_exactness():
    rng = np.random.default_rng(7)
    violations = 0
    sequences = 10_000
    for _ in range(sequences):
        k_pre = int(rng.integers(0, 7))
        ticks = int(rng.integers(4, 24))
        held = rng.random(ticks) < float(rng.uniform(0.15, 0.6))
        c = TakeoverController(k_pre=k_pre)
        policy_tail = []
        for t in range(ticks):
            obs = tiny_obs(rng, shape=(2, 2))
            r = c.on_tick(t, obs, tiny_action(rng), tiny_action(rng),
                          trigger_held=bool(held[t]))
            for ev in r.events:
                if isinstance(ev, TakeoverStarted):
                    expect = policy_tail[-k_pre:] if k_pre else []
                    got = list(ev.prefix)
                    if len(got) != len(expect):
                        violations += 1
                        continue
                    for (gt, go, ga), (et, eo, ea) in zip(got, expect):
                        if gt != et or not obs_equal(go, eo) or ga != ea:
                            violations += 1
                            break
                elif isinstance(ev, TakeoverEnded):
                    policy_tail = []  # buffer cleared on handback
            if r.mode is ControlMode.POLICY:
                policy_tail.append((t, obs, r.executed))
    report("criterion 5 (ring-buffer prefix bit-exactness)",
           violations == 0, f"{sequences} fuzzed trigger sequences, "
           f"{violations} violations")


# -- criterion 6 ------------------------------------------------------------------

def _stuck_log(env, seed, pin=(10.4, 0.6), tilt=-1.0):
    """Drifts past the target bowl into the corner and jams there."""
    state, obs = env.reset(seed)
    observations = []
    for _ in range(env.config.trial_ticks):
        x, y, tl = state.spoon_pose
        a = EnvAction(0.75 * (pin[0] - x), 0.75 * (pin[1] - y),
                      max(-1.0, min(1.0, tilt - tl))).clamped()
        observations.append(obs)
        state, obs = env.step(state, a)
    return ObservationLog.from_observations(observations)


def test_criterion_6_ood_separation(protocol):
    result, _ = protocol
    env = GranularEnv()
    params = result.policies["combo_a"]
    monitor = Monitor.load(result.out_dir / "monitors" / "combo_a.npz")
    thr = monitor.threshold
    wins = 0
    details = []
    for i in range(10):
        seed = 7000 + i
        nominal = run_trial(env, params, seed, record_observations=True)
        f_nom = float((monitor.distance(encode_log(params, nominal.log)) > thr).mean())
        stuck = _stuck_log(env, seed)
        f_stuck = float((monitor.distance(encode_log(params, stuck)) > thr).mean())
        wins += f_stuck > f_nom
        details.append(f"{f_stuck:.2f}>{f_nom:.2f}")
    report("criterion 6 (stuck rollouts flag above the training p95)",
           wins >= 9, f"{wins}/10 seeds, stuck>nominal fractions: "
           + " ".join(details))


# -- criterion 7 ------------------------------------------------------------------

def test_criterion_7_ddpm_sanity():
    env = GranularEnv()
    _, obs = env.reset(0)
    rng = np.random.default_rng(99)
    from scooplab.takeover import Demonstration, DemoStep, StepSource
    demos = []
    for i in range(50):
        act = EnvAction(*(np.array([0.3, -0.2, 0.1]) + 0.02 * rng.uniform(-1, 1, 3)))
        steps = tuple(DemoStep(t, obs, act, StepSource.EXPERT) for t in range(12))
        demos.append(Demonstration(f"c{i}", "initial", steps, {}))
    params, curve = train(demos, TrainConfig(epochs=40, batch=64, seed=0))
    loss_ok = curve[-1] <= 0.5 * curve[0]

    # micro-network: 10 parameters, float64, analytic vs central differences
    class Micro(nn.Module):
        def __init__(self):
            super().__init__()
            self.lin = nn.Linear(4, 2).double()

        def forward(self, noised, k, emb):
            return self.lin(torch.cat([noised, k[:, None].double() / 4.0, emb], dim=1))

    torch.manual_seed(0)
    net = Micro()
    sched = NoiseSchedule.linear(4, 0.05, 0.3)
    gen = torch.Generator().manual_seed(1)
    chunks = torch.randn(6, 2, generator=gen, dtype=torch.float64)
    embs = torch.randn(6, 1, generator=gen, dtype=torch.float64)
    k = torch.randint(1, 5, (6,), generator=gen)
    eps = torch.randn(6, 2, generator=gen, dtype=torch.float64)
    loss = noise_prediction_loss(net, sched, chunks, embs, k, eps)
    loss.backward()
    h = 1e-6
    worst_rel = 0.0
    for p in net.parameters():
        flat = p.data.view(-1)
        grads = p.grad.view(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + h
            up = noise_prediction_loss(net, sched, chunks, embs, k, eps).item()
            flat[i] = orig - h
            down = noise_prediction_loss(net, sched, chunks, embs, k, eps).item()
            flat[i] = orig
            fd = (up - down) / (2 * h)
            worst_rel = max(worst_rel, abs(grads[i].item() - fd) / max(abs(fd), 1e-8))
    grad_ok = worst_rel <= 1e-4

    emb = encode_observation(params, (obs, obs))
    chunk = sample_action_chunk(params, emb, seed=1)
    shape_ok = chunk.shape == (8, 3) and np.abs(chunk).max() <= 1.0

    report("criterion 7 (DDPM loss drop, gradient check, chunk contract)",
           loss_ok and grad_ok and shape_ok,
           f"loss {curve[0]:.3f}->{curve[-1]:.3f}, worst grad rel err "
           f"{worst_rel:.2e}, chunk {chunk.shape}")


# -- criterion 8 ------------------------------------------------------------------

def test_criterion_8_published_arithmetic():
    a = LengthStats(durations=(), count=20, total=272.0, mean=272.0 / 20)
    b = LengthStats(durations=(), count=60, total=465.6, mean=465.6 / 60)
    checks = [
        a.mean == 13.6,
        round(b.mean, 2) == 7.76,
        round(reduction_percent(
            LengthStats(durations=(), count=40, total=377.8, mean=377.8 / 40),
            LengthStats(durations=(), count=40, total=574.3, mean=574.3 / 40)),
            1) == 34.2,
        round(reduction_percent(
            b, LengthStats(durations=(), count=60, total=869.0, mean=869.0 / 60)),
            1) == 46.4,
        round(improvement_percent(35.4, 19.8)) == 79,
        round(improvement_percent(49.2, 41.0)) == 20,
    ]
    report("criterion 8 (published-number fixtures)", all(checks),
           f"{sum(checks)}/6 fixtures exact")


# -- criterion 9 ------------------------------------------------------------------

def _operator_schedule():
    # press at trial tick 10, drive for 15 ticks, release at tick 25
    actions = {}
    for t in range(10, 25):
        actions[t] = EnvAction(0.2 + 0.01 * (t - 10), -0.15, 0.05)
    return 10, 25, actions


def _drive_direct(env, policy_path, seed, ticks):
    """The same inputs fed straight to the takeover state machine."""
    from scooplab.policy import RecedingController
    press, release, actions = _operator_schedule()
    params = load_policy(policy_path)
    state, obs = env.reset(seed)
    controller = RecedingController(params, seed=seed)
    takeover = TakeoverController(6, demo_id_fn=lambda: "direct-1")
    demos = []
    for t in range(ticks):
        held = press <= t < release
        if t == release:
            controller.reset()
        if held:
            controller.observe_only(obs)
            policy_action = None
        else:
            policy_action = controller.act(obs)
        r = takeover.on_tick(t, obs, policy_action, actions.get(t),
                             trigger_held=held)
        state, obs = env.step(state, r.executed)
        for ev in r.events:
            if isinstance(ev, TakeoverEnded) and ev.demonstration is not None:
                demos.append(ev.demonstration)
    return demos


def _drive_wire(tmp_path, env_cfg, seed, ticks):
    import json as _json

    from websockets.sync.client import connect

    from scooplab.gateway import Gateway, GatewayConfig

    press, release, actions = _operator_schedule()
    cfg = GatewayConfig(port=0, tick_hz=10, store_root=str(tmp_path / "stores"),
                        policy_dir=str(tmp_path / "policies"), env=env_cfg)
    demos = []
    with Gateway(cfg) as gw:
        with connect(f"ws://127.0.0.1:{gw.port}", max_size=None) as ws:
            ws.send(_json.dumps({"type": "start_trial", "policy_id": "pilot",
                                 "seed": seed}))
            trial_tick = -1
            ended = None
            deadline = time.time() + 60
            while time.time() < deadline:
                msg = _json.loads(ws.recv(timeout=30))
                if msg["type"] == "state":
                    trial_tick += 1
                    upcoming = trial_tick + 1
                    if upcoming == press:
                        ws.send(_json.dumps({"type": "trigger", "held": True}))
                    if upcoming == release:
                        ws.send(_json.dumps({"type": "trigger", "held": False}))
                    if upcoming in actions:
                        a = actions[upcoming]
                        ws.send(_json.dumps({"type": "operator_action",
                                             "vx": a.vx, "vy": a.vy,
                                             "tilt_rate": a.tilt_rate}))
                elif msg["type"] == "takeover_ended":
                    ended = msg
                    break
            assert ended is not None and ended["demo_id"], "no takeover recorded"
            store = DemoStore(tmp_path / "stores" / "live")
            demos.append(store.load(ended["demo_id"]))
    return demos


def test_criterion_9_headless_wire_equivalence(tmp_path):
    env_cfg = EnvConfig(trial_ticks=40)
    env = GranularEnv(env_cfg)
    store = DemoStore(tmp_path / "stores" / "seed-demos", dataset_id="seed-demos")
    from scooplab.harness import collect_initial
    collect_initial(env, 2, 0, store)
    params, _ = train(store.view(), TrainConfig(epochs=1, seed=0))
    from scooplab.policy import save_policy
    policy_path = save_policy(params, tmp_path / "policies" / "pilot")

    direct = _drive_direct(env, policy_path, seed=5, ticks=40)
    wire = _drive_wire(tmp_path, env_cfg, seed=5, ticks=40)

    ok = len(direct) == 1 and len(wire) == 1
    detail = f"direct demos={len(direct)}, wire demos={len(wire)}"
    if ok:
        a, b = direct[0], wire[0]
        ok = (a.kind == b.kind and len(a.steps) == len(b.steps))
        mismatches = 0
        if ok:
            for sa, sb in zip(a.steps, b.steps):
                if (sa.tick != sb.tick or sa.source != sb.source
                        or sa.action != sb.action
                        or not obs_equal(sa.observation, sb.observation)):
                    mismatches += 1
            ok = mismatches == 0
        detail += f", steps={len(a.steps)}/{len(b.steps)}, mismatched={mismatches}"
    report("criterion 9 (scripted wire client equals direct driving)", ok, detail)
