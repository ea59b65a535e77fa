"""Outer training loop: warmup pre-fill, rollouts with three-way action
source precedence (human > base-policy > actor), critical-phase handover,
supervisor labels, replay-fed learning at a fixed update-to-data ratio, and
deterministic evaluation.

Synchronous mode is fully deterministic under a fixed seed; asynchronous
mode runs the collector and learner on separate threads with the same total
update count (ratio times stored transitions) at completion.
"""
from __future__ import annotations

import threading
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import simenv
from .chunkrl import ACT_DIM, CHUNK_LEN, Learner, make_rl_state
from .ndnet.tensor import ContractError, NumericError
from .replay import (
    SOURCE_HUMAN,
    SOURCE_RL_ACTOR,
    SOURCE_VLA_WARMUP,
    PreparedEpisode,
    ReplayBuffer,
    window_starts,
)
from .rltoken import ReadoutModule, encode_rl_token_batch
from .simenv import EpisodeConfig, Observation
from .vlastub import HORIZON, FrozenBackbone, ReferencePolicy


class DivergenceError(RuntimeError):
    """Critic values exceeded the plausible-return bound."""


@dataclass
class RunConfig:
    seed: int = 0
    n_warm: int = 20  # warmup episodes executing the base proposals
    utd: int = 5  # gradient updates per stored transition (G)
    gamma: float = 0.99
    beta: float = 1.0
    p_ref: float = 0.5
    sigma: float = 0.05
    tau: float = 0.005
    lr_actor: float = 3e-4
    lr_critic: float = 3e-4
    critic_layernorm: bool = True
    batch_size: int = 256
    chunk_len: int = CHUNK_LEN  # C
    horizon: int = HORIZON  # H
    stride: int = 2
    episode_budget: int = 400
    eval_cadence: int = 50  # episodes between evaluations (0 = never)
    eval_episodes: int = 50
    early_stop_success: float | None = None  # stop when eval success reaches this
    restore_best_eval: bool = False  # reload the best-eval actor at completion
    phase_mode: str = "critical"  # or "full"
    async_mode: bool = False
    replay_capacity: int = 100_000
    # Scripted supervisor policy: sparse corrections early in training.
    intervention_prob: float = 0.1
    intervention_episodes: int = 100
    intervention_min_dist: float = 5.0  # mm tip-slot distance gating corrections
    handover_dist: float = 10.0  # mm; full-task switch from base policy to actor
    divergence_factor: float = 10.0
    log_every: int = 20  # train metric lines every this many updates

    def validate(self):
        if self.utd < 1:
            raise ValueError("utd (G) must be >= 1")
        if self.chunk_len > self.horizon:
            raise ValueError(f"C <= H violated: C={self.chunk_len}, H={self.horizon}")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"gamma must be in [0, 1), got {self.gamma}")
        if not 0.0 <= self.p_ref <= 1.0:
            raise ValueError(f"p_ref must be in [0, 1], got {self.p_ref}")
        if self.n_warm < 0:
            raise ValueError("n_warm must be >= 0")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        if self.phase_mode not in ("critical", "full"):
            raise ValueError(f"unknown phase_mode {self.phase_mode!r}")

    def divergence_threshold(self) -> float:
        return self.divergence_factor / (1.0 - self.gamma)


@dataclass
class EpisodeTrace:
    seed: int
    chunk_len: int
    pixels: np.ndarray  # (L+1, 24, 24)
    proprios: np.ndarray  # (L+1, 6)
    actions: np.ndarray  # (L, 3)
    sources: np.ndarray  # (L,) uint8
    rewards: np.ndarray  # (L,)
    proposals: list[tuple[int, np.ndarray, int]]  # (boundary step, (H, 3), mode)
    handover_step: int | None
    label: bool
    final_success: bool

    @property
    def length(self) -> int:
        return self.actions.shape[0]

    def chunk_boundaries(self) -> list[int]:
        return [b for b, _, _ in self.proposals]

    def refs_extended(self) -> np.ndarray:
        """Per-step references, extended C steps past the end from the last
        proposal's tail; intervened steps carry the executed action."""
        l = self.length
        c = self.chunk_len
        out = np.zeros((l + c, ACT_DIM), dtype=np.float32)
        for b, prop, _mode in self.proposals:
            upto = min(l + c, b + prop.shape[0])
            out[b:upto] = prop[: upto - b]
        human = self.sources == SOURCE_HUMAN
        out[: l][human] = self.actions[human]
        return out


class Supervisor:
    """Decision source for interventions, handover and terminal labels."""

    kind = "scripted"

    def decide_intervention(self, episode_idx: int, chunk_idx: int, state, rng) -> bool:
        return False

    def decide_handover(self, state) -> bool:
        return False

    def intervention_chunk(self, state, chunk_len: int) -> np.ndarray:
        raise NotImplementedError

    def label_episode(self, state, trace_rewards: np.ndarray) -> bool:
        raise NotImplementedError

    def on_step(self, episode_idx: int, t: int, obs: Observation, action, source: int, reward: float):
        pass

    def on_episode_end(self, episode_idx: int, trace: "EpisodeTrace"):
        pass

    def on_stored(self, buffer_size: int):
        pass


class ScriptedSupervisor(Supervisor):
    """Deterministic stand-in for the operator: sparse early corrections via
    the scripted expert, distance-triggered handover, and labels that echo
    the environment's own success predicate."""

    kind = "scripted"

    def __init__(self, config: RunConfig):
        self.config = config

    def decide_intervention(self, episode_idx, chunk_idx, state, rng) -> bool:
        cfg = self.config
        if episode_idx >= cfg.intervention_episodes:
            return False
        if simenv.tip_slot_distance(state) <= cfg.intervention_min_dist:
            return False
        return bool(rng.random() < cfg.intervention_prob)

    def decide_handover(self, state) -> bool:
        return simenv.tip_slot_distance(state) <= self.config.handover_dist

    def intervention_chunk(self, state, chunk_len: int) -> np.ndarray:
        return simenv.scripted_expert_chunk(state, chunk_len)

    def label_episode(self, state, trace_rewards) -> bool:
        return bool(state.success)


class AlwaysInterveneSupervisor(ScriptedSupervisor):
    """Expert takes over every chunk (intervention-semantics checks)."""

    def decide_intervention(self, episode_idx, chunk_idx, state, rng) -> bool:
        return True


@dataclass
class Components:
    episode_template: EpisodeConfig
    backbone: FrozenBackbone
    stub: ReferencePolicy
    readout: ReadoutModule
    learner: Learner
    replay: ReplayBuffer

    def frozen_checksums(self) -> tuple[int, int]:
        return self.backbone.checksum(), self.readout.checksum()


def _encode_states(
    backbone: FrozenBackbone, readout: ReadoutModule, pixels: np.ndarray, proprios: np.ndarray
) -> np.ndarray:
    tokens = backbone.embed_batch(pixels)
    z = encode_rl_token_batch(readout, tokens)
    return make_rl_state(z, proprios)


def encode_state(backbone: FrozenBackbone, readout: ReadoutModule, obs: Observation) -> np.ndarray:
    return _encode_states(backbone, readout, obs.pixels[None], obs.proprio[None])[0]


def rollout_episode(
    cfg: RunConfig,
    episode_config: EpisodeConfig,
    comps: Components,
    supervisor: Supervisor,
    rng: np.random.Generator,
    episode_idx: int,
    use_actor: bool,
) -> EpisodeTrace:
    """Collect one episode under the source precedence
    human intervention > base proposals (warmup / pre-handover) > actor."""
    c = cfg.chunk_len
    state, obs = simenv.reset(episode_config)
    pixels = [obs.pixels]
    proprios = [obs.proprio]
    actions: list[np.ndarray] = []
    sources: list[int] = []
    rewards: list[float] = []
    proposals: list[tuple[int, np.ndarray, int]] = []
    handover_step: int | None = None
    handed_over = cfg.phase_mode == "critical"

    t = 0
    while not state.terminal:
        proposal, mode = comps.stub.propose_chunk(obs, seed=int(rng.integers(2**31)))
        proposals.append((t, proposal, mode))
        if handed_over is False and supervisor.decide_handover(state):
            handed_over = True
            handover_step = t

        if supervisor.decide_intervention(episode_idx, len(proposals) - 1, state, rng):
            chunk = np.asarray(supervisor.intervention_chunk(state, c), dtype=np.float32)
            source = SOURCE_HUMAN
        elif not use_actor or not handed_over:
            chunk = proposal[:c]
            source = SOURCE_VLA_WARMUP
        else:
            x = encode_state(comps.backbone, comps.readout, obs)
            flat = comps.learner.actor.sample(x, proposal[:c], rng=rng)
            chunk = flat.reshape(c, ACT_DIM)
            source = SOURCE_RL_ACTOR

        for a in chunk:
            state, reward, terminal, obs = simenv.step(state, a)
            actions.append(np.asarray(a, dtype=np.float32))
            sources.append(source)
            rewards.append(reward)
            pixels.append(obs.pixels)
            proprios.append(obs.proprio)
            supervisor.on_step(episode_idx, t, obs, a, source, reward)
            t += 1
            if terminal:
                break

    label = supervisor.label_episode(state, np.asarray(rewards))
    rewards_arr = np.zeros(len(rewards), dtype=np.float32)
    if label and rewards_arr.size:
        rewards_arr[-1] = 1.0  # the label owns the sparse terminal reward
    trace = EpisodeTrace(
        seed=episode_config.seed,
        chunk_len=c,
        pixels=np.stack(pixels),
        proprios=np.stack(proprios),
        actions=np.stack(actions) if actions else np.zeros((0, ACT_DIM), dtype=np.float32),
        sources=np.asarray(sources, dtype=np.uint8),
        rewards=rewards_arr,
        proposals=proposals,
        handover_step=handover_step,
        label=label,
        final_success=bool(state.success),
    )
    supervisor.on_episode_end(episode_idx, trace)
    return trace


def prepare_episode(trace: EpisodeTrace, comps: Components, cfg: RunConfig) -> PreparedEpisode:
    """Batch-compute readout states at every window boundary of the trace."""
    l = trace.length
    starts = window_starts(l, cfg.chunk_len, cfg.stride)
    needed = sorted({*starts, *(min(s + cfg.chunk_len, l) for s in starts)})
    xs: dict[int, np.ndarray] = {}
    if needed:
        arr = _encode_states(
            comps.backbone,
            comps.readout,
            trace.pixels[needed],
            trace.proprios[needed],
        )
        xs = {idx: arr[k] for k, idx in enumerate(needed)}
    return PreparedEpisode(
        length=l,
        xs=xs,
        actions=trace.actions,
        refs_ext=trace.refs_extended(),
        rewards=trace.rewards,
        sources=trace.sources,
        terminal=True,
    )


def warmup(cfg: RunConfig, comps: Components, supervisor: Supervisor, rng_env: np.random.Generator,
           rng_rollout: np.random.Generator, log=None) -> int:
    """Pre-fill the replay by executing the base proposals for n_warm episodes."""
    added = 0
    for ep in range(cfg.n_warm):
        episode_config = replace(comps.episode_template, seed=int(rng_env.integers(2**31)))
        trace = rollout_episode(cfg, episode_config, comps, supervisor, rng_rollout, ep, use_actor=False)
        prepared = prepare_episode(trace, comps, cfg)
        count = comps.replay.append_episode(prepared, cfg.chunk_len, cfg.stride)
        added += count
        supervisor.on_stored(len(comps.replay))
        if log is not None:
            log.episode(ep, trace, count, len(comps.replay), phase="warmup")
    return added


class MetricsLog:
    """Line-delimited TSV records; deterministic given deterministic values."""

    def __init__(self, path=None):
        self.path = path
        self._fh = open(path, "w") if path else None
        self.lines: list[str] = []
        self.train_rows: list[dict] = []
        self.episode_rows: list[dict] = []
        self.eval_rows: list[dict] = []

    @staticmethod
    def _fmt(v) -> str:
        if v is None:
            return "-"
        if isinstance(v, float):
            return f"{v:.6g}"
        return str(v)

    def _emit(self, *fields):
        line = "\t".join(self._fmt(f) for f in fields)
        self.lines.append(line)
        if self._fh:
            self._fh.write(line + "\n")
            self._fh.flush()

    def train(self, update_idx: int, metrics: dict):
        self.train_rows.append({"step": update_idx, **metrics})
        self._emit("train", update_idx, metrics.get("l_q"), metrics.get("l_pi"),
                   metrics.get("mean_q"), metrics.get("ref_dev"))

    def episode(self, idx: int, trace: EpisodeTrace, stored: int, buffer_size: int, phase: str):
        counts = {
            "vla": int(np.sum(trace.sources == SOURCE_VLA_WARMUP)),
            "rl": int(np.sum(trace.sources == SOURCE_RL_ACTOR)),
            "human": int(np.sum(trace.sources == SOURCE_HUMAN)),
        }
        self.episode_rows.append(
            {"episode": idx, "phase": phase, "steps": trace.length, "label": int(trace.label), **counts}
        )
        self._emit("episode", idx, phase, trace.length, int(trace.label),
                   counts["vla"], counts["rl"], counts["human"], stored, buffer_size)

    def eval(self, episode_idx: int, metrics: dict):
        self.eval_rows.append({"episode": episode_idx, **metrics})
        self._emit("eval", episode_idx, metrics["success_rate"], metrics["median_steps_to_success"],
                   metrics["mean_steps_to_success"], metrics["throughput"])

    def event(self, name: str, detail: str = ""):
        self._emit("event", name, detail)

    def close(self):
        if self._fh:
            self._fh.close()
            self._fh = None


@dataclass
class TrainResult:
    episodes: int
    updates: int
    stored: int
    diverged: bool = False
    final_eval: dict | None = None
    best_eval: dict | None = None
    best_checkpoint_step: int | None = None


def _run_updates(cfg: RunConfig, comps: Components, n: int, rng: np.random.Generator,
                 log: MetricsLog, update_counter: list[int]) -> None:
    thresh = cfg.divergence_threshold()
    for _ in range(n):
        batch = comps.replay.sample_batch(cfg.batch_size, rng)
        metrics = comps.learner.train_step(batch, rng)
        i = update_counter[0]
        update_counter[0] += 1
        if i % cfg.log_every == 0:
            log.train(i, metrics)
        if abs(metrics["mean_q"]) > thresh:
            log.event("divergence", f"mean_q={metrics['mean_q']:.3g} at update {i}")
            raise DivergenceError(
                f"critic divergence: |mean Q| {metrics['mean_q']:.3g} exceeds {thresh:.3g}"
            )


def train_online(
    cfg: RunConfig,
    comps: Components,
    supervisor: Supervisor,
    log: MetricsLog,
    checkpoint_fn=None,
    eval_fn=None,
) -> TrainResult:
    """Alternate collection and learning at G updates per stored transition.

    Synchronous mode interleaves deterministically; asynchronous mode runs a
    collector thread and a learner thread against the shared replay with the
    same ratio contract (identical total update count on completion).
    """
    cfg.validate()
    if len(comps.replay) == 0 and cfg.n_warm > 0:
        raise ContractError("train_online requires a pre-filled replay (run warmup first)")
    ss = np.random.SeedSequence([cfg.seed, 0x0107])
    rng_env, rng_rollout, rng_learn = (np.random.default_rng(s) for s in ss.spawn(3))

    result = TrainResult(episodes=0, updates=0, stored=len(comps.replay))
    if cfg.episode_budget == 0:
        if checkpoint_fn:
            checkpoint_fn("init", comps)
        return result

    update_counter = [0]
    best_actor_state = None
    stop_early = threading.Event()

    if checkpoint_fn:
        checkpoint_fn("init", comps)

    if cfg.async_mode:
        replay_lock = threading.Lock()
        owed = [0]
        collect_done = threading.Event()
        learner_error: list[BaseException] = []

        def learner_loop():
            try:
                while True:
                    with replay_lock:
                        pending = owed[0]
                    if pending <= 0:
                        if collect_done.is_set():
                            with replay_lock:
                                if owed[0] <= 0:
                                    return
                        time.sleep(0.001)
                        continue
                    with replay_lock:
                        batch = comps.replay.sample_batch(cfg.batch_size, rng_learn)
                        owed[0] -= 1
                    metrics = comps.learner.train_step(batch, rng_learn)
                    i = update_counter[0]
                    update_counter[0] += 1
                    if i % cfg.log_every == 0:
                        log.train(i, metrics)
                    if abs(metrics["mean_q"]) > cfg.divergence_threshold():
                        raise DivergenceError(f"critic divergence: |mean Q| {metrics['mean_q']:.3g}")
            except BaseException as e:  # surfaced after join
                learner_error.append(e)

        thread = threading.Thread(target=learner_loop, daemon=True)
        thread.start()
        for ep in range(cfg.episode_budget):
            episode_config = replace(comps.episode_template, seed=int(rng_env.integers(2**31)))
            trace = rollout_episode(cfg, episode_config, comps, supervisor, rng_rollout, ep, use_actor=True)
            prepared = prepare_episode(trace, comps, cfg)
            with replay_lock:
                count = comps.replay.append_episode(prepared, cfg.chunk_len, cfg.stride)
                owed[0] += cfg.utd * count
            supervisor.on_stored(len(comps.replay))
            result.stored += count
            result.episodes += 1
            log.episode(ep, trace, count, len(comps.replay), phase="online")
            if learner_error:
                break
        collect_done.set()
        thread.join()
        if learner_error:
            err = learner_error[0]
            if isinstance(err, DivergenceError):
                result.diverged = True
            else:
                raise err
        result.updates = update_counter[0]
        if checkpoint_fn:
            checkpoint_fn("final", comps)
        return result

    # Synchronous, deterministic path. Learning begins with the first
    # online episode; warmup transitions seed the buffer without earning
    # their own updates.
    try:
        for ep in range(cfg.episode_budget):
            episode_config = replace(comps.episode_template, seed=int(rng_env.integers(2**31)))
            trace = rollout_episode(cfg, episode_config, comps, supervisor, rng_rollout, ep, use_actor=True)
            prepared = prepare_episode(trace, comps, cfg)
            count = comps.replay.append_episode(prepared, cfg.chunk_len, cfg.stride)
            supervisor.on_stored(len(comps.replay))
            result.stored += count
            result.episodes += 1
            log.episode(ep, trace, count, len(comps.replay), phase="online")
            _run_updates(cfg, comps, cfg.utd * count, rng_learn, log, update_counter)
            if cfg.eval_cadence and (ep + 1) % cfg.eval_cadence == 0 and eval_fn is not None:
                ev = eval_fn(comps)
                log.eval(ep, ev)
                result.final_eval = ev
                if checkpoint_fn:
                    checkpoint_fn(f"ep{ep + 1}", comps)
                if result.best_eval is None or ev["success_rate"] > result.best_eval["success_rate"]:
                    result.best_eval = ev
                    result.best_checkpoint_step = comps.learner.update_count
                    if cfg.restore_best_eval:
                        best_actor_state = comps.learner.actor.params.state_dict()
                if cfg.early_stop_success is not None and ev["success_rate"] >= cfg.early_stop_success:
                    log.event("early_stop", f"eval success {ev['success_rate']:.3f} at episode {ep}")
                    stop_early.set()
                    break
    except DivergenceError:
        result.diverged = True
    if cfg.restore_best_eval and best_actor_state is not None:
        comps.learner.actor.params.load_state_dict(best_actor_state)
        log.event("restore_best", f"actor restored to update {result.best_checkpoint_step}")
    result.updates = update_counter[0]
    if checkpoint_fn:
        checkpoint_fn("final", comps)
    return result


# Evaluation -----------------------------------------------------------------

RESET_SECONDS = 5.0
TEN_MINUTES = 600.0


def stub_policy(comps: Components, cfg: RunConfig):
    def policy(state, obs, proposal, rng):
        return proposal[: cfg.chunk_len]

    return policy


def actor_policy(comps: Components, cfg: RunConfig, deterministic: bool = True, zero_refs: bool = False):
    def policy(state, obs, proposal, rng):
        x = encode_state(comps.backbone, comps.readout, obs)
        ref = np.zeros_like(proposal[: cfg.chunk_len]) if zero_refs else proposal[: cfg.chunk_len]
        flat = comps.learner.actor.sample(x, ref, rng=rng, deterministic=deterministic)
        return flat.reshape(cfg.chunk_len, ACT_DIM)

    return policy


def expert_policy(comps: Components, cfg: RunConfig):
    def policy(state, obs, proposal, rng):
        return simenv.scripted_expert_chunk(state, cfg.chunk_len)

    return policy


def evaluate(
    policy,
    cfg: RunConfig,
    episode_template: EpisodeConfig,
    comps: Components,
    n_episodes: int,
    seed_base: int,
) -> dict:
    """Deterministic evaluation: no interventions, no learning.

    Throughput counts successes per ten simulated minutes, where each
    episode costs its control time (20 ms per step) plus a fixed 5 s reset.
    """
    successes = 0
    steps_to_success: list[int] = []
    total_steps = 0
    for i in range(n_episodes):
        episode_config = replace(episode_template, seed=seed_base + i)
        state, obs = simenv.reset(episode_config)
        rng = np.random.default_rng(np.random.SeedSequence([seed_base, i]))
        handed_over = cfg.phase_mode == "critical"
        while not state.terminal:
            proposal, _mode = comps.stub.propose_chunk(obs, seed=int(rng.integers(2**31)))
            if not handed_over:
                if simenv.tip_slot_distance(state) <= cfg.handover_dist:
                    handed_over = True
                chunk = proposal[: cfg.chunk_len]
            else:
                chunk = policy(state, obs, proposal, rng)
            for a in chunk:
                state, reward, terminal, obs = simenv.step(state, a)
                if terminal:
                    break
        total_steps += state.t
        if state.success:
            successes += 1
            steps_to_success.append(state.t)
    sim_seconds = total_steps * simenv.DT + n_episodes * RESET_SECONDS
    return {
        "episodes": n_episodes,
        "success_rate": successes / n_episodes if n_episodes else 0.0,
        "median_steps_to_success": float(np.median(steps_to_success)) if steps_to_success else None,
        "mean_steps_to_success": float(np.mean(steps_to_success)) if steps_to_success else None,
        "throughput": successes / (sim_seconds / TEN_MINUTES) if sim_seconds > 0 else 0.0,
        "steps_to_success": steps_to_success,
    }


# Episode trace text format (one record per step) ----------------------------

def trace_to_lines(trace: EpisodeTrace) -> list[str]:
    """Line-delimited step records: t, pose, action, reward, terminal, source."""
    lines = []
    l = trace.length
    for t in range(l):
        pose = trace.proprios[t][:3]
        a = trace.actions[t]
        lines.append(
            "\t".join(
                [
                    str(t),
                    f"{pose[0]:.6g}", f"{pose[1]:.6g}", f"{pose[2]:.6g}",
                    f"{a[0]:.6g}", f"{a[1]:.6g}", f"{a[2]:.6g}",
                    f"{trace.rewards[t]:.6g}",
                    "1" if t == l - 1 else "0",
                    {SOURCE_VLA_WARMUP: "vla", SOURCE_RL_ACTOR: "rl", SOURCE_HUMAN: "human"}[int(trace.sources[t])],
                ]
            )
        )
    return lines
