"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Budgets and tolerances are pinned here; the heavy end-to-end criteria share
session fixtures (demos, the stage-1 readout) to stay inside their runtime
limits on a single CPU core.
"""
import itertools
import time
from dataclasses import replace

import numpy as np
import pytest

from rlt import rltoken, simenv, vlastub
from rlt.chunkrl import (
    ActorNet,
    Batch,
    CriticPair,
    Learner,
    actor_loss,
    critic_loss,
    critic_values,
)
from rlt.ndnet import (
    AdamState,
    ParamSet,
    Tensor,
    adam_step,
    attention_block,
    forward_mlp,
    grad_check,
    init_attention,
    init_layernorm,
    init_mlp,
    init_transformer,
    layernorm,
    transformer,
)
from rlt.orchestrate import (
    AlwaysInterveneSupervisor,
    Components,
    MetricsLog,
    RunConfig,
    ScriptedSupervisor,
    actor_policy,
    evaluate,
    prepare_episode,
    rollout_episode,
    stub_policy,
    train_online,
    warmup,
)
from rlt.replay import SOURCE_HUMAN, ReplayBuffer, build_transitions, window_starts

SEEDS_A4 = (101, 202, 303)


def report(name: str, ok: bool, detail: str):
    print(f"\n[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    assert ok, f"{name}: {detail}"


@pytest.fixture(scope="session")
def a3_artifacts(backbone):
    """Full-budget stage-1 training shared by A3/A4/A6."""
    demos = vlastub.generate_demos(50, seed=11)
    readout = rltoken.ReadoutModule.create(seed=0)
    t0 = time.time()
    readout, rep = rltoken.train_readout(readout, demos, steps=4000, batch=64, seed=0,
                                         backbone=backbone)
    return {"demos": demos, "readout": readout, "report": rep, "train_seconds": time.time() - t0}


# A1 ---------------------------------------------------------------------------

def test_a1_gradient_correctness(backbone):
    t0 = time.time()
    rng = np.random.default_rng(0)
    worst_layer = 0.0

    # layers: dense+relu mlp, gelu mlp, layernorm, attention (causal + full),
    # full transformer stack
    ps = ParamSet()
    init_mlp(ps, rng, "m", [10, 16, 4])
    x = Tensor(rng.standard_normal((6, 10)).astype(np.float32))
    tgt = rng.standard_normal((6, 4)).astype(np.float32)

    def f_mlp():
        d = forward_mlp(ps, x, "m", "relu") - Tensor(tgt)
        return (d * d).mean()

    worst_layer = max(worst_layer, grad_check(f_mlp, ps, 1e-4, 100, np.random.default_rng(1)))

    ps2 = ParamSet()
    init_mlp(ps2, rng, "g", [8, 12, 5])
    x2 = Tensor(rng.standard_normal((4, 8)).astype(np.float32))
    tgt2 = rng.standard_normal((4, 5)).astype(np.float32)

    def f_gelu():
        d = forward_mlp(ps2, x2, "g", "gelu") - Tensor(tgt2)
        return (d * d).mean()

    worst_layer = max(worst_layer, grad_check(f_gelu, ps2, 1e-4, 100, np.random.default_rng(2)))

    ps3 = ParamSet()
    init_layernorm(ps3, "ln", 12)
    xs = ps3.new("x", rng.standard_normal((5, 12)).astype(np.float32))
    tgt3 = rng.standard_normal((5, 12)).astype(np.float32)

    def f_ln():
        d = layernorm(ps3, "ln", xs) - Tensor(tgt3)
        return (d * d).mean()

    worst_layer = max(worst_layer, grad_check(f_ln, ps3, 1e-4, 120, np.random.default_rng(3)))

    for causal in (False, True):
        ps4 = ParamSet()
        init_attention(ps4, rng, "attn", 8)
        xt = Tensor(rng.standard_normal((2, 5, 8)).astype(np.float32))
        tgt4 = rng.standard_normal((2, 5, 8)).astype(np.float32)

        def f_attn(ps4=ps4, xt=xt, tgt4=tgt4, causal=causal):
            d = attention_block(ps4, "attn", xt, 2, causal) - Tensor(tgt4)
            return (d * d).mean()

        worst_layer = max(worst_layer, grad_check(f_attn, ps4, 1e-4, 100, np.random.default_rng(4)))

    ps5 = ParamSet()
    init_transformer(ps5, rng, "tr", 8, 2)
    xt5 = Tensor(rng.standard_normal((2, 5, 8)).astype(np.float32))
    tgt5 = rng.standard_normal((2, 5, 8)).astype(np.float32)

    def f_tr():
        d = transformer(ps5, "tr", xt5, 2, 2, True) - Tensor(tgt5)
        return (d * d).mean()

    worst_layer = max(worst_layer, grad_check(f_tr, ps5, 1e-4, 100, np.random.default_rng(5)))

    # full losses at production sizes
    worst_loss = 0.0

    # reconstruction objective over the full readout stack
    ro = rltoken.ReadoutModule.create(seed=3)
    toks = rng.standard_normal((4, 16, 32)).astype(np.float32)

    def f_recon():
        t = Tensor(toks)
        z = rltoken.encode_rl_token(ro, t)
        preds = rltoken.decode_reconstruct(ro, z, t)
        return rltoken.recon_loss(preds, t)

    worst_loss = max(worst_loss, grad_check(f_recon, ro.params, 1e-4, 100, np.random.default_rng(6)))

    # chunk TD loss wrt both online critics
    critics = CriticPair.create(seed=4)
    actor = ActorNet.create(seed=4)
    b = 6
    batch = Batch(
        x=rng.standard_normal((b, 38)).astype(np.float32),
        action=rng.uniform(-1, 1, (b, 10, 3)).astype(np.float32),
        ref=rng.uniform(-1, 1, (b, 10, 3)).astype(np.float32),
        rewards=np.zeros((b, 10), dtype=np.float32),
        next_x=rng.standard_normal((b, 38)).astype(np.float32),
        next_ref=rng.uniform(-1, 1, (b, 10, 3)).astype(np.float32),
        terminal_within=np.array([9, -1, -1, 9, -1, -1], dtype=np.int64),
        source=np.zeros(b, dtype=np.uint8),
    )
    batch.rewards[0, 9] = 1.0
    batch.rewards[3, 9] = 1.0

    for which in ("q1", "q2"):
        def f_critic(which=which):
            loss, _ = critic_loss(batch, critics, actor, 0.99, np.random.default_rng(7))
            return loss

        worst_loss = max(worst_loss, grad_check(f_critic, getattr(critics, which), 1e-4, 100,
                                                np.random.default_rng(8)))

    # regularized actor objective (reparameterized surrogate)
    actor2 = ActorNet.create(seed=5, p_ref=0.5)

    def f_actor():
        loss, _ = actor_loss(batch, actor2, critics, beta=1.0, rng=np.random.default_rng(9))
        return loss

    worst_loss = max(worst_loss, grad_check(f_actor, actor2.params, 1e-4, 100, np.random.default_rng(10)))

    dt = time.time() - t0
    ok = worst_layer <= 1e-4 and worst_loss <= 1e-3 and dt < 60
    report("A1 gradient correctness",
           ok, f"layers max rel err {worst_layer:.2e} (<=1e-4), losses {worst_loss:.2e} (<=1e-3), {dt:.1f}s (<60s)")


# A2 ---------------------------------------------------------------------------

def test_a2_chunk_bellman_oracle():
    t0 = time.time()
    n_states, c, gamma = 6, 2, 0.9
    chunks = np.array(list(itertools.product([-1.0, 1.0], repeat=c)), dtype=np.float32)

    def step1(s, a):
        s2 = min(max(s + (1 if a > 0 else -1), 0), n_states - 1)
        return s2, 1.0 if (s2 == n_states - 1 and s != n_states - 1) else 0.0

    def chunk_transition(s, chunk):
        s1, r1 = step1(s, chunk[0])
        if s1 == n_states - 1:
            return np.array([r1, 0.0], dtype=np.float32), 0, s1
        s2, r2 = step1(s1, chunk[1])
        return np.array([r1, r2], dtype=np.float32), (1 if s2 == n_states - 1 else -1), s2

    # independent oracle: brute-force C-step value iteration to fixed point
    q_star = np.zeros((n_states - 1, len(chunks)))
    for _ in range(500):
        q_next = np.zeros_like(q_star)
        for s in range(n_states - 1):
            for k, ch in enumerate(chunks):
                rs, term, s2 = chunk_transition(s, ch)
                boot = 0.0 if term >= 0 else gamma**c * q_star[s2].max()
                q_next[s, k] = rs[0] + gamma * rs[1] + boot
        if np.abs(q_next - q_star).max() < 1e-12:
            q_star = q_next
            break
        q_star = q_next

    def onehot(s):
        v = np.zeros(n_states, dtype=np.float32)
        v[s] = 1.0
        return v

    rows = []
    for s in range(n_states - 1):
        for ch in chunks:
            rs, term, s2 = chunk_transition(s, ch)
            rows.append((onehot(s), ch, rs, term, onehot(s2)))
    xs = np.stack([r[0] for r in rows])
    acts = np.stack([r[1] for r in rows])[:, :, None]
    rews = np.stack([r[2] for r in rows])
    terms = np.array([r[3] for r in rows], dtype=np.int64)
    nxs = np.stack([r[4] for r in rows])

    class GreedyEnum:
        def __init__(self, critics):
            self.critics = critics

        def sample(self, x, ref, rng=None, deterministic=False):
            best_q = np.full(x.shape[0], -np.inf)
            best_a = np.zeros((x.shape[0], c), dtype=np.float32)
            for ch in chunks:
                a = np.tile(ch, (x.shape[0], 1))
                q = np.minimum(critic_values(self.critics.t1, x, a),
                               critic_values(self.critics.t2, x, a))
                upd = q > best_q
                best_q[upd] = q[upd]
                best_a[upd] = ch
            return best_a

    critics = CriticPair.create(seed=0, x_dim=n_states, chunk_dim=c, tau=0.01, layernorm=False)
    policy = GreedyEnum(critics)
    opt1, opt2 = AdamState(lr=1e-3), AdamState(lr=1e-3)
    rng = np.random.default_rng(0)
    batch = Batch(x=xs, action=acts, ref=acts, rewards=rews, next_x=nxs,
                  next_ref=acts, terminal_within=terms, source=np.zeros(len(xs), np.uint8))
    flat = acts.reshape(len(xs), -1)
    err = np.inf
    for it in range(6000):
        critics.zero_grad()
        loss, _ = critic_loss(batch, critics, policy, gamma, rng)
        loss.backward()
        adam_step(opt1, critics.q1)
        adam_step(opt2, critics.q2)
        critics.sync_targets()
        if it % 250 == 249:
            q1 = critic_values(critics.q1, xs, flat)
            q2 = critic_values(critics.q2, xs, flat)
            err = max(np.abs(q1 - q_star.reshape(-1)).max(), np.abs(q2 - q_star.reshape(-1)).max())
            if err <= 8e-3:
                break
    dt = time.time() - t0
    ok = err <= 1e-2 and dt < 120
    report("A2 chunk-Bellman oracle", ok,
           f"max |Q - Q*| = {err:.2e} over all (state, chunk) pairs (<=1e-2), {dt:.1f}s (<120s)")


# A3 ---------------------------------------------------------------------------

def test_a3_rl_token_quality(backbone, a3_artifacts):
    demos = a3_artifacts["demos"]
    readout = a3_artifacts["readout"]
    rep = a3_artifacts["report"]
    ratio = rep.final / rep.initial

    # probes: readout vector vs fixed random 32-dim pixel projection, both
    # ridge-regressed to the per-episode slot center on held-out trajectories
    frames, targets, traj_ids = [], [], []
    for ti, traj in enumerate(demos.trajectories):
        for s in traj.steps:
            frames.append(s.pixels)
            targets.append(traj.slot_center)
            traj_ids.append(ti)
    frames = np.stack(frames)
    targets = np.array(targets)
    traj_ids = np.array(traj_ids)
    tokens = backbone.embed_batch(frames)
    z = rltoken.encode_rl_token_batch(readout, tokens).astype(np.float64)
    proj = np.random.default_rng(123).standard_normal((24 * 24, 32)) / np.sqrt(24 * 24)
    zp = frames.reshape(len(frames), -1).astype(np.float64) @ proj

    train_mask = traj_ids < 40  # hold out the last 10 trajectories entirely

    def ridge_mse(feats):
        xtr, xte = feats[train_mask], feats[~train_mask]
        ytr, yte = targets[train_mask], targets[~train_mask]
        mu, sd = xtr.mean(0), xtr.std(0) + 1e-9
        xtr = np.hstack([(xtr - mu) / sd, np.ones((len(xtr), 1))])
        xte = np.hstack([(xte - mu) / sd, np.ones((len(xte), 1))])
        w = np.linalg.solve(xtr.T @ xtr + 1e-3 * np.eye(xtr.shape[1]), xtr.T @ ytr)
        return float(((xte @ w - yte) ** 2).mean())

    mse_token = ridge_mse(z)
    mse_pixels = ridge_mse(zp)
    dt = a3_artifacts["train_seconds"]
    ok = ratio <= 0.10 and mse_token < mse_pixels and dt < 180
    report("A3 readout quality", ok,
           f"loss ratio {ratio:.4f} (<=0.10), probe MSE token {mse_token:.5f} < pixels {mse_pixels:.5f}, "
           f"stage-1 {dt:.0f}s (<180s)")


# A5 ---------------------------------------------------------------------------

def test_a5_subsampling_arithmetic():
    rng = np.random.default_rng(42)
    c, stride = 10, 2
    checked = 0
    for length in rng.integers(c, 600, size=50):
        starts = window_starts(int(length), c, stride)
        assert len(starts) == (int(length) - c) // stride + 1
        checked += 1
    report("A5 subsampling arithmetic", checked == 50,
           f"{checked}/50 random lengths match floor((L-C)/stride)+1 exactly")


# A7 ---------------------------------------------------------------------------

def test_a7_intervention_semantics(readout_trained, backbone):
    cfg = RunConfig(seed=5, n_warm=0, episode_budget=0)
    comps = Components(
        episode_template=simenv.EpisodeConfig(max_steps=200),
        backbone=backbone,
        stub=vlastub.ReferencePolicy(),
        readout=readout_trained,
        learner=Learner.create(seed=5),
        replay=ReplayBuffer(),
    )
    sup = AlwaysInterveneSupervisor(cfg)
    rng = np.random.default_rng(6)
    trace = rollout_episode(cfg, replace(comps.episode_template, seed=17), comps, sup, rng, 0,
                            use_actor=True)
    prepared = prepare_episode(trace, comps, cfg)
    transitions = build_transitions(prepared, cfg.chunk_len, cfg.stride)
    n_human = sum(tr.source == SOURCE_HUMAN for tr in transitions)
    n_override = sum(np.array_equal(tr.action, tr.ref) for tr in transitions)
    ok = n_human == len(transitions) and n_override == len(transitions) and len(transitions) > 0
    report("A7 intervention semantics", ok,
           f"{n_human}/{len(transitions)} transitions human-tagged, {n_override}/{len(transitions)} with ref==action")


# A8 ---------------------------------------------------------------------------

def test_a8_determinism_byte_identical(tmp_path):
    from rlt.cli import run_command

    cfg_path = tmp_path / "det.ini"
    cfg_path.write_text(
        "[stub]\nn_demos = 6\n\n[token]\nsteps = 60\nbatch = 16\n\n"
        "[run]\nn_warm = 1\nepisode_budget = 2\neval_cadence = 2\neval_episodes = 3\nlog_every = 1\n\n"
        "[env]\nmax_steps = 120\n"
    )
    logs = []
    for name in ("one", "two"):
        out = tmp_path / name
        assert run_command(["gen-demos", "--config", str(cfg_path), "--seed", "9", "--out", str(out)]) == 0
        assert run_command(["train-token", "--config", str(cfg_path), "--seed", "9", "--out", str(out)]) == 0
        assert run_command(["train-rl", "--config", str(cfg_path), "--seed", "9", "--out", str(out)]) == 0
        logs.append((out / "metrics.log").read_bytes())
    ok = logs[0] == logs[1] and len(logs[0]) > 0
    report("A8 determinism", ok,
           f"two synchronous runs: metrics.log byte-identical ({len(logs[0])} bytes)")
