"""Chunk-level off-policy actor-critic.

Twin critics with Polyak-averaged target copies are trained on C-step
chunk transitions; the bootstrap uses the minimum of the two targets at an
action sampled from the reference-conditioned Gaussian actor. The actor is
trained to raise the (min) critic value while staying quadratically close
to the stored reference chunk, with reference dropout zeroing its
conditioning input on a random half of each batch.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .ndnet import (
    AdamState,
    ParamSet,
    Tensor,
    adam_step,
    dense,
    forward_mlp,
    init_layernorm,
    init_mlp,
    no_grad,
    polyak_update,
)
from .ndnet.layers import mlp_layer_count
from .ndnet import tensor as T
from .ndnet.tensor import ContractError, NumericError
from .rltoken import TOKEN_DIM
from .simenv import STEP_SCALE, WORKSPACE

CHUNK_LEN = 10  # C
ACT_DIM = 3  # d
X_DIM = TOKEN_DIM + 6  # readout vector plus normalized proprio
HIDDEN = (256, 256)

# Proprio normalization: positions by the workspace extent, angle by pi,
# per-step velocities by their action scaling.
_PROPRIO_SCALE = np.array(
    [WORKSPACE, WORKSPACE, math.pi, STEP_SCALE[0], STEP_SCALE[1], STEP_SCALE[2]],
    dtype=np.float32,
)


def make_rl_state(z_rl: np.ndarray, proprio: np.ndarray) -> np.ndarray:
    """x = (z_rl, normalized proprio); accepts (d,)/(6,) or batched rows."""
    z = np.asarray(z_rl, dtype=np.float32)
    p = np.asarray(proprio, dtype=np.float32) / _PROPRIO_SCALE
    out = np.concatenate([z, p], axis=-1)
    if not np.all(np.isfinite(out)):
        raise NumericError("non-finite RL state")
    return out


@dataclass
class CriticPair:
    q1: ParamSet
    q2: ParamSet
    t1: ParamSet
    t2: ParamSet
    tau: float = 0.005
    x_dim: int = X_DIM
    chunk_dim: int = CHUNK_LEN * ACT_DIM

    @classmethod
    def create(cls, seed: int, x_dim: int = X_DIM, chunk_dim: int = CHUNK_LEN * ACT_DIM,
               hidden: tuple[int, ...] = HIDDEN, tau: float = 0.005,
               layernorm: bool = True) -> "CriticPair":
        sizes = [x_dim + chunk_dim, *hidden, 1]
        nets = []
        for k in range(2):
            rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC417, k]))
            ps = ParamSet()
            init_mlp(ps, rng, "q", sizes)
            if layernorm:
                # Hidden-layer normalization keeps TD targets bounded under
                # the high update-to-data ratio.
                for i, width in enumerate(hidden):
                    init_layernorm(ps, f"q.ln{i}", width)
            nets.append(ps)
        targets = []
        for ps in nets:
            tgt = ParamSet(frozen=True)
            for name, p in ps.items():
                tgt.new(name, p.data.copy())
            targets.append(tgt)
        return cls(q1=nets[0], q2=nets[1], t1=targets[0], t2=targets[1],
                   tau=tau, x_dim=x_dim, chunk_dim=chunk_dim)

    def sync_targets(self):
        polyak_update(self.t1, self.q1, self.tau)
        polyak_update(self.t2, self.q2, self.tau)

    def zero_grad(self):
        self.q1.zero_grad()
        self.q2.zero_grad()


def critic_forward(params: ParamSet, x: Tensor, chunk: Tensor) -> Tensor:
    """Q(x, a_{1:C}) -> (B,) values; dense -> [LN] -> relu per hidden layer."""
    h = T.concat([x, chunk], axis=-1)
    n_layers = mlp_layer_count(params, "q")
    for i in range(n_layers):
        h = dense(params, f"q.l{i}", h)
        if i < n_layers - 1:
            if f"q.ln{i}.gamma" in params:
                h = T.layernorm_op(h, params[f"q.ln{i}.gamma"], params[f"q.ln{i}.beta"])
            h = T.relu(h)
    return T.reshape(h, (h.shape[0],))


def critic_values(params: ParamSet, x: np.ndarray, chunk: np.ndarray) -> np.ndarray:
    with no_grad():
        return critic_forward(params, Tensor(x), Tensor(chunk)).data


@dataclass
class ActorNet:
    params: ParamSet
    sigma: float = 0.05  # fixed Gaussian std per action entry
    p_ref: float = 0.5  # reference dropout probability (training only)
    x_dim: int = X_DIM
    chunk_dim: int = CHUNK_LEN * ACT_DIM

    @classmethod
    def create(cls, seed: int, x_dim: int = X_DIM, chunk_dim: int = CHUNK_LEN * ACT_DIM,
               hidden: tuple[int, ...] = HIDDEN, sigma: float = 0.05, p_ref: float = 0.5) -> "ActorNet":
        if sigma <= 0:
            raise ContractError("sigma must be positive")
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xAC70]))
        ps = ParamSet()
        init_mlp(ps, rng, "mu", [x_dim + chunk_dim, *hidden, chunk_dim])
        return cls(params=ps, sigma=sigma, p_ref=p_ref, x_dim=x_dim, chunk_dim=chunk_dim)

    def sample(self, x, ref, rng=None, deterministic: bool = False) -> np.ndarray:
        return actor_sample(self, x, ref, rng=rng, deterministic=deterministic)

    def checksum(self) -> int:
        return self.params.checksum()


def actor_mean(actor: ActorNet, x: Tensor, ref_flat: Tensor) -> Tensor:
    inp = T.concat([x, ref_flat], axis=-1)
    return forward_mlp(actor.params, inp, "mu", "relu")


def _flat_refs(ref: np.ndarray, batched: bool) -> np.ndarray:
    """(C, d) -> (cd,) for single inputs; (B, C, d) -> (B, cd) for batches.
    Already-flat references pass through."""
    ref = np.asarray(ref, dtype=np.float32)
    if batched:
        return ref.reshape(ref.shape[0], -1) if ref.ndim == 3 else ref
    return ref.reshape(-1) if ref.ndim == 2 else ref


def actor_sample(
    actor: ActorNet,
    x: np.ndarray,
    ref: np.ndarray,
    rng: np.random.Generator | None = None,
    deterministic: bool = False,
) -> np.ndarray:
    """Sample an executable chunk: clip(mu + sigma * eps) in [-1, 1].

    The reference is always provided at rollout time; deterministic mode
    returns the clipped mean (evaluation). Output is flat (chunk_dim,) or
    (B, chunk_dim); callers reshape to (C, d) for execution.
    """
    x = np.asarray(x, dtype=np.float32)
    single = x.ndim == 1
    xb = x[None] if single else x
    rb = _flat_refs(ref, batched=not single)
    if single:
        rb = rb[None]
    with no_grad():
        mu = actor_mean(actor, Tensor(xb), Tensor(rb)).data
    if deterministic:
        out = np.clip(mu, -1.0, 1.0)
    else:
        if rng is None:
            raise ContractError("stochastic actor_sample requires an rng")
        eps = rng.standard_normal(mu.shape).astype(np.float32)
        out = np.clip(mu + actor.sigma * eps, -1.0, 1.0)
    if not np.all(np.isfinite(out)):
        raise NumericError("non-finite actor sample")
    return out[0] if single else out


def apply_reference_dropout(
    refs: np.ndarray, p_ref: float, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Zero whole reference chunks for a Bernoulli(p_ref) subset of the batch."""
    if not 0.0 <= p_ref <= 1.0:
        raise ContractError(f"p_ref must be in [0, 1], got {p_ref}")
    refs = np.asarray(refs, dtype=np.float32)
    mask = rng.random(refs.shape[0]) < p_ref
    masked = refs.copy()
    masked[mask] = 0.0
    return masked, mask


def td_target(
    rewards: np.ndarray,
    gamma: float,
    terminal_within: np.ndarray,
    next_x: np.ndarray,
    next_ref: np.ndarray,
    critics: CriticPair,
    actor: ActorNet,
    rng: np.random.Generator,
) -> np.ndarray:
    """Chunk-level TD target: discounted in-chunk rewards plus, when no
    terminal occurred inside the chunk, gamma^C times the min of the two
    target critics at a' sampled from the actor at (x', ref').

    rewards: (B, C) zero-padded past termination; terminal_within: (B,)
    int, -1 when the chunk contains no terminal step. The bootstrap policy
    only needs a .sample(x, ref, rng) method, so oracle tests can swap in
    enumeration-greedy policies.
    """
    rewards = np.asarray(rewards, dtype=np.float32)
    if rewards.ndim != 2:
        raise ContractError(f"rewards must be (B, C), got shape {rewards.shape}")
    if critics.chunk_dim % rewards.shape[1] != 0:
        raise ContractError(
            f"reward length {rewards.shape[1]} incompatible with chunk dim {critics.chunk_dim}"
        )
    if not 0.0 <= gamma < 1.0:
        raise ContractError(f"gamma must be in [0, 1), got {gamma}")
    c = rewards.shape[1]
    disc = (gamma ** np.arange(c)).astype(np.float32)
    in_chunk = rewards @ disc
    nonterminal = np.asarray(terminal_within) < 0
    target = in_chunk.copy()
    if np.any(nonterminal):
        nx = np.asarray(next_x, dtype=np.float32)[nonterminal]
        nr = _flat_refs(np.asarray(next_ref, dtype=np.float32), batched=True)[nonterminal]
        a_next = actor.sample(nx, nr, rng=rng)
        q1 = critic_values(critics.t1, nx, a_next)
        q2 = critic_values(critics.t2, nx, a_next)
        boot = np.minimum(q1, q2)
        target[nonterminal] += (gamma**c) * boot
    if not np.all(np.isfinite(target)):
        raise NumericError("non-finite TD targets")
    return target


@dataclass
class Batch:
    x: np.ndarray  # (B, x_dim)
    action: np.ndarray  # (B, C, d)
    ref: np.ndarray  # (B, C, d)
    rewards: np.ndarray  # (B, C)
    next_x: np.ndarray  # (B, x_dim)
    next_ref: np.ndarray  # (B, C, d)
    terminal_within: np.ndarray  # (B,) int; -1 = none
    source: np.ndarray  # (B,) uint8

    def __len__(self):
        return self.x.shape[0]


def critic_loss(
    batch: Batch,
    critics: CriticPair,
    actor: ActorNet,
    gamma: float,
    rng: np.random.Generator,
) -> tuple[Tensor, dict]:
    """Mean over the two critics of the MSE against the shared stopped target."""
    if len(batch) == 0:
        raise ContractError("empty batch")
    targets = td_target(
        batch.rewards, gamma, batch.terminal_within, batch.next_x, batch.next_ref, critics, actor, rng
    )
    x = Tensor(batch.x)
    a = Tensor(_flat_refs(batch.action, batched=True))
    tgt = Tensor(targets)
    q1 = critic_forward(critics.q1, x, a)
    q2 = critic_forward(critics.q2, x, a)
    d1 = q1 - tgt
    d2 = q2 - tgt
    loss = ((d1 * d1).mean() + (d2 * d2).mean()) * Tensor(np.float32(0.5))
    stats = {"targets": targets, "mean_q": float(q1.data.mean())}
    return loss, stats


def actor_loss(
    batch: Batch,
    actor: ActorNet,
    critics: CriticPair,
    beta: float,
    rng: np.random.Generator,
) -> tuple[Tensor, dict]:
    """Reparameterized objective: E[-min Q(x, a) + beta * ||a - ref||^2].

    The actor's conditioning reference passes through dropout; the
    quadratic anchor always uses the stored (true) reference.
    """
    refs_in, mask = apply_reference_dropout(batch.ref, actor.p_ref, rng)
    x = Tensor(batch.x)
    mu = actor_mean(actor, x, Tensor(_flat_refs(refs_in, batched=True)))
    eps = rng.standard_normal(mu.shape).astype(np.float32)
    a = mu + Tensor(eps * np.float32(actor.sigma))
    q1 = critic_forward(critics.q1, x, a)
    q2 = critic_forward(critics.q2, x, a)
    qmin = T.minimum(q1, q2)
    true_ref = Tensor(_flat_refs(batch.ref, batched=True))
    dev = a - true_ref
    penalty = (dev * dev).sum(axis=-1)
    loss = (-qmin + Tensor(np.float32(beta)) * penalty).mean()
    with no_grad():
        sampled = np.clip(mu.data + actor.sigma * eps, -1.0, 1.0)
        ref_dev = float(
            np.linalg.norm(sampled - _flat_refs(batch.ref, batched=True), axis=-1).mean()
        )
    stats = {"ref_dev": ref_dev, "dropout_frac": float(mask.mean())}
    return loss, stats


def save_actor(actor: ActorNet, path):
    actor.params.save(path)


def load_actor(path, sigma: float = 0.05, p_ref: float = 0.5) -> ActorNet:
    from .ndnet import load_arrays

    state = load_arrays(path)
    in_dim = state["mu.l0.w"].shape[0]
    n = 0
    while f"mu.l{n}.w" in state:
        n += 1
    chunk_dim = state[f"mu.l{n - 1}.w"].shape[1]
    hidden = tuple(state[f"mu.l{i}.w"].shape[1] for i in range(n - 1))
    actor = ActorNet.create(0, x_dim=in_dim - chunk_dim, chunk_dim=chunk_dim,
                            hidden=hidden, sigma=sigma, p_ref=p_ref)
    actor.params.load_state_dict(state)
    return actor


def save_critics(critics: CriticPair, path):
    from .ndnet import save_arrays

    arrays = {}
    for prefix, ps in (("q1", critics.q1), ("q2", critics.q2), ("t1", critics.t1), ("t2", critics.t2)):
        for name, t in ps.items():
            arrays[f"{prefix}.{name}"] = t.data
    save_arrays(path, arrays)


def load_critics(path, tau: float = 0.005, x_dim: int = X_DIM) -> CriticPair:
    from .ndnet import load_arrays

    state = load_arrays(path)
    n = 0
    while f"q1.q.l{n}.w" in state:
        n += 1
    hidden = tuple(state[f"q1.q.l{i}.w"].shape[1] for i in range(n - 1))
    in_dim = state["q1.q.l0.w"].shape[0]
    critics = CriticPair.create(0, x_dim=x_dim, chunk_dim=in_dim - x_dim, hidden=hidden, tau=tau,
                                layernorm="q1.q.ln0.gamma" in state)
    for prefix, ps in (("q1", critics.q1), ("q2", critics.q2), ("t1", critics.t1), ("t2", critics.t2)):
        ps.load_state_dict({k[len(prefix) + 1:]: v for k, v in state.items() if k.startswith(prefix + ".")})
    return critics


@dataclass
class Learner:
    """Owns the update schedule: critic every call, actor every second call."""

    critics: CriticPair
    actor: ActorNet
    opt_q1: AdamState
    opt_q2: AdamState
    opt_actor: AdamState
    gamma: float = 0.99
    beta: float = 1.0
    update_count: int = 0

    @classmethod
    def create(cls, seed: int, gamma: float = 0.99, beta: float = 1.0, sigma: float = 0.05,
               p_ref: float = 0.5, tau: float = 0.005, lr_critic: float = 3e-4,
               lr_actor: float = 3e-4, x_dim: int = X_DIM,
               chunk_dim: int = CHUNK_LEN * ACT_DIM, hidden: tuple[int, ...] = HIDDEN,
               critic_layernorm: bool = True) -> "Learner":
        critics = CriticPair.create(seed, x_dim=x_dim, chunk_dim=chunk_dim, hidden=hidden,
                                    tau=tau, layernorm=critic_layernorm)
        actor = ActorNet.create(seed, x_dim=x_dim, chunk_dim=chunk_dim, hidden=hidden,
                                sigma=sigma, p_ref=p_ref)
        return cls(
            critics=critics,
            actor=actor,
            opt_q1=AdamState(lr=lr_critic),
            opt_q2=AdamState(lr=lr_critic),
            opt_actor=AdamState(lr=lr_actor),
            gamma=gamma,
            beta=beta,
        )

    def train_step(self, batch: Batch, rng: np.random.Generator) -> dict:
        """One gradient update; returns step metrics.

        Critic update on every call; actor update on every second call (two
        critic updates per actor update); Polyak target sync after each
        critic update.
        """
        metrics: dict = {"step": self.update_count}
        self.critics.zero_grad()
        loss_q, qstats = critic_loss(batch, self.critics, self.actor, self.gamma, rng)
        lq = float(loss_q.item())
        if not np.isfinite(lq):
            raise NumericError("non-finite critic loss")
        loss_q.backward()
        adam_step(self.opt_q1, self.critics.q1)
        adam_step(self.opt_q2, self.critics.q2)
        self.critics.sync_targets()
        metrics["l_q"] = lq
        metrics["mean_q"] = qstats["mean_q"]

        if self.update_count % 2 == 1:
            self.actor.params.zero_grad()
            # Critic weights are constants for the actor objective; their
            # gradient GEMMs would be discarded anyway.
            with self.critics.q1.grads_disabled(), self.critics.q2.grads_disabled():
                loss_pi, stats = actor_loss(batch, self.actor, self.critics, self.beta, rng)
                lp = float(loss_pi.item())
                if not np.isfinite(lp):
                    raise NumericError("non-finite actor loss")
                loss_pi.backward()
            adam_step(self.opt_actor, self.actor.params)
            metrics["l_pi"] = lp
            metrics["ref_dev"] = stats["ref_dev"]
        self.update_count += 1
        return metrics
