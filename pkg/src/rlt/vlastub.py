"""Frozen stand-in for the pretrained action-proposal backbone.

Three pieces, all free of trainable state:
  - FrozenBackbone: maps the 24x24 observation to M=16 patch tokens of
    width 32 through a fixed random two-layer net (weights keyed by a
    constant stub seed, not the run seed).
  - ReferencePolicy: proposes H=50-step reference action chunks with two
    approach modes, Gaussian action noise and occasional approach-retreat
    probing. It aims at the *nominal* slot pose, so per-episode slot
    randomization is exactly the error the learner must perceive and fix.
  - generate_demos: scripted-expert episodes with small action noise,
    successful ones only, persisted in the RLTD format.
"""
from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import simenv
from .simenv import (
    ACTION_DIM,
    CHANNEL_DEPTH,
    NOMINAL_SLOT_ANGLE,
    NOMINAL_SLOT_CENTER,
    PIXELS,
    STEP_SCALE,
    TIP_LENGTH,
    EpisodeConfig,
    Observation,
    heading,
    wrap_angle,
)
from .ndnet.tensor import DimensionError

STUB_SEED = 0x5EED_CAFE  # global constant; never derived from run seeds
M_TOKENS = 16
TOKEN_DIM = 32
PATCH = 6  # 24/4: 4x4 grid of 6x6 patches
HORIZON = 50  # proposed chunk length (1 s at 50 Hz)

DEMO_MAGIC = b"RLTD"
DEMO_VERSION = 1


class DemoGenerationError(RuntimeError):
    pass


class FrozenBackbone:
    """Per-patch random projection producing the token matrix z_{1:M}."""

    def __init__(self):
        rng = np.random.default_rng(STUB_SEED)
        n_in, n_hid = PATCH * PATCH, 64
        b1 = 1.0 / math.sqrt(n_in)
        b2 = 1.0 / math.sqrt(n_hid)
        self.w1 = rng.uniform(-b1, b1, size=(n_in, n_hid)).astype(np.float32)
        self.b1 = rng.uniform(-b1, b1, size=(n_hid,)).astype(np.float32)
        self.w2 = rng.uniform(-b2, b2, size=(n_hid, TOKEN_DIM)).astype(np.float32)
        self.b2 = rng.uniform(-b2, b2, size=(TOKEN_DIM,)).astype(np.float32)

    def checksum(self) -> int:
        crc = 0
        for arr in (self.w1, self.b1, self.w2, self.b2):
            crc = zlib.crc32(np.ascontiguousarray(arr, dtype="<f4").tobytes(), crc)
        return crc

    def patches(self, pixels: np.ndarray) -> np.ndarray:
        if pixels.shape != (PIXELS, PIXELS):
            raise DimensionError(f"expected {PIXELS}x{PIXELS} image, got {pixels.shape}")
        g = PIXELS // PATCH
        return (
            pixels.reshape(g, PATCH, g, PATCH)
            .transpose(0, 2, 1, 3)
            .reshape(M_TOKENS, PATCH * PATCH)
            .astype(np.float32)
        )

    def embed_tokens(self, obs: Observation) -> np.ndarray:
        """(16, 32) token matrix; pure function of the pixels."""
        return self.embed_pixels(obs.pixels)

    def embed_pixels(self, pixels: np.ndarray) -> np.ndarray:
        p = self.patches(pixels)
        h = np.tanh(p @ self.w1 + self.b1)
        return (h @ self.w2 + self.b2).astype(np.float32)

    def embed_batch(self, pixel_stack: np.ndarray) -> np.ndarray:
        """(B, 24, 24) -> (B, 16, 32) in one pass."""
        b = pixel_stack.shape[0]
        g = PIXELS // PATCH
        p = (
            pixel_stack.reshape(b, g, PATCH, g, PATCH)
            .transpose(0, 1, 3, 2, 4)
            .reshape(b, M_TOKENS, PATCH * PATCH)
            .astype(np.float32)
        )
        h = np.tanh(p @ self.w1 + self.b1)
        return (h @ self.w2 + self.b2).astype(np.float32)


@dataclass
class StubConfig:
    action_noise: float = 0.15  # sigma pre-clipping
    probe_prob: float = 0.3  # approach-retreat cycle per chunk
    probe_steps: int = 6
    mode_offset: float = 5.0  # mm; exceeds any start's lateral error so modes separate
    waypoint_standoff: float = 4.0  # mm outside the opening
    insert_switch_depth: float = -2.0  # mm; waypoint phase applies further out
    gain: float = 0.8
    angle_gain: float = 0.9


class ReferencePolicy:
    """Scripted multimodal chunk proposer aiming at the nominal slot."""

    def __init__(self, config: StubConfig | None = None, episode_config: EpisodeConfig | None = None):
        self.config = config or StubConfig()
        ep = episode_config or EpisodeConfig()
        # The stub's belief: the nominal task geometry, never the sampled one.
        self.slot_center = np.array(NOMINAL_SLOT_CENTER, dtype=np.float64)
        self.slot_angle = float(NOMINAL_SLOT_ANGLE)
        self.required_depth = ep.required_depth

    def propose_chunk(self, obs: Observation, seed: int) -> tuple[np.ndarray, int]:
        """(H, 3) reference chunk in [-1, 1] plus the sampled mode id."""
        cfg = self.config
        rng = np.random.default_rng(seed)
        mode = int(rng.integers(2))
        probing = bool(rng.random() < cfg.probe_prob)
        noise = rng.normal(0.0, cfg.action_noise, size=(HORIZON, ACTION_DIM))

        u = heading(self.slot_angle)
        v = np.array([-u[1], u[0]])
        side = 1.0 if mode == 1 else -1.0
        waypoint = self.slot_center - cfg.waypoint_standoff * u + side * cfg.mode_offset * v
        insert_target = self.slot_center + (self.required_depth + 1.0) * u

        pose = obs.proprio[:3].astype(np.float64).copy()
        chunk = np.zeros((HORIZON, ACTION_DIM), dtype=np.float32)
        retreat_left = 0
        probed = False
        insert_phase = False
        for i in range(HORIZON):
            tip = pose[:2] + TIP_LENGTH * heading(pose[2])
            rel = tip - self.slot_center
            d = float(rel @ u)
            if probing and not probed and d > -1.0:
                probed = True
                retreat_left = cfg.probe_steps
            if not insert_phase and (
                d > cfg.insert_switch_depth or float(np.linalg.norm(tip - waypoint)) < 1.5
            ):
                insert_phase = True  # latched: the detour is over for this plan
            if retreat_left > 0:
                retreat_left -= 1
                a = np.array([-u[0] * 0.8, -u[1] * 0.8, 0.0])
            else:
                target = insert_target if insert_phase else waypoint
                theta_err = wrap_angle(pose[2] - self.slot_angle)
                dtheta = -cfg.angle_gain * theta_err / float(STEP_SCALE[2])
                dxy = cfg.gain * (target - tip) / float(STEP_SCALE[0])
                a = np.array([dxy[0], dxy[1], dtheta])
            a = np.clip(a + noise[i], -1.0, 1.0)
            chunk[i] = a.astype(np.float32)
            # Kinematic propagation of the stub's own plan (no contact model).
            scaled = a * STEP_SCALE.astype(np.float64)
            pose[0] += scaled[0]
            pose[1] += scaled[1]
            pose[2] = wrap_angle(pose[2] + scaled[2])
        return chunk, mode


# Demonstrations --------------------------------------------------------------

@dataclass
class DemoStep:
    pixels: np.ndarray  # (24, 24) float32
    proprio: np.ndarray  # (6,) float32
    action: np.ndarray  # (3,) float32
    reward: int  # 0 or 1


@dataclass
class DemoTrajectory:
    steps: list[DemoStep]
    slot_center: np.ndarray  # (2,) float64; probe target for evaluation
    success: bool

    def __len__(self):
        return len(self.steps)


@dataclass
class DemoDataset:
    trajectories: list[DemoTrajectory] = field(default_factory=list)
    seed: int = 0

    def __len__(self):
        return len(self.trajectories)

    def n_frames(self) -> int:
        return sum(len(t) for t in self.trajectories)

    def checksum(self) -> int:
        crc = 0
        for traj in self.trajectories:
            for s in traj.steps:
                for arr in (s.pixels, s.proprio, s.action):
                    crc = zlib.crc32(np.ascontiguousarray(arr, dtype="<f4").tobytes(), crc)
                crc = zlib.crc32(bytes([s.reward]), crc)
        return crc


def generate_demos(
    n: int,
    seed: int,
    episode_config: EpisodeConfig | None = None,
    action_noise: float = 0.05,
    chunk_len: int = 10,
    max_retries_per_demo: int = 20,
) -> DemoDataset:
    """Expert rollouts with small action noise; keeps successful episodes only."""
    template = episode_config or EpisodeConfig()
    dataset = DemoDataset(seed=seed)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xDE30]))
    attempt = 0
    while len(dataset.trajectories) < n:
        attempt += 1
        if attempt > max(1, n) * max_retries_per_demo:
            raise DemoGenerationError(
                f"expert failed to produce {n} successes in {attempt - 1} attempts; "
                "environment or expert gains are mis-tuned"
            )
        ep_cfg = EpisodeConfig(**{**template.__dict__, "seed": int(rng.integers(2**31))})
        state, obs = simenv.reset(ep_cfg)
        steps: list[DemoStep] = []
        while not state.terminal:
            chunk = simenv.scripted_expert_chunk(state, chunk_len)
            noisy = np.clip(chunk + rng.normal(0.0, action_noise, size=chunk.shape), -1.0, 1.0)
            for a in noisy.astype(np.float32):
                prev_obs = obs
                state, reward, terminal, obs = simenv.step(state, a)
                steps.append(
                    DemoStep(
                        pixels=prev_obs.pixels,
                        proprio=prev_obs.proprio,
                        action=a.copy(),
                        reward=int(reward),
                    )
                )
                if terminal:
                    break
        if state.success:
            dataset.trajectories.append(
                DemoTrajectory(steps=steps, slot_center=state.slot_center.copy(), success=True)
            )
    return dataset


def save_demos(dataset: DemoDataset, path):
    """RLTD: magic, version u32, count u32, then per-trajectory blocks of
    (slot cx f64, slot cy f64, length u32) followed by step records
    (pixels 576xf32, proprio 6xf32, action 3xf32, reward u8)."""
    with open(path, "wb") as f:
        f.write(DEMO_MAGIC)
        f.write(struct.pack("<I", DEMO_VERSION))
        f.write(struct.pack("<I", len(dataset.trajectories)))
        for traj in dataset.trajectories:
            f.write(struct.pack("<dd", float(traj.slot_center[0]), float(traj.slot_center[1])))
            f.write(struct.pack("<I", len(traj.steps)))
            for s in traj.steps:
                f.write(np.ascontiguousarray(s.pixels, dtype="<f4").tobytes())
                f.write(np.ascontiguousarray(s.proprio, dtype="<f4").tobytes())
                f.write(np.ascontiguousarray(s.action, dtype="<f4").tobytes())
                f.write(struct.pack("<B", s.reward))


def load_demos(path) -> DemoDataset:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != DEMO_MAGIC:
        raise DemoGenerationError(f"{path}: bad magic {blob[:4]!r}")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != DEMO_VERSION:
        raise DemoGenerationError(f"{path}: version {version}, expected {DEMO_VERSION}")
    (count,) = struct.unpack_from("<I", blob, 8)
    off = 12
    px_bytes = PIXELS * PIXELS * 4
    dataset = DemoDataset()
    try:
        for _ in range(count):
            cx, cy = struct.unpack_from("<dd", blob, off)
            off += 16
            (length,) = struct.unpack_from("<I", blob, off)
            off += 4
            steps = []
            for _ in range(length):
                pixels = np.frombuffer(blob, "<f4", PIXELS * PIXELS, off).reshape(PIXELS, PIXELS)
                off += px_bytes
                proprio = np.frombuffer(blob, "<f4", 6, off)
                off += 24
                action = np.frombuffer(blob, "<f4", 3, off)
                off += 12
                reward = blob[off]
                off += 1
                steps.append(
                    DemoStep(
                        pixels=pixels.astype(np.float32),
                        proprio=proprio.astype(np.float32),
                        action=action.astype(np.float32),
                        reward=int(reward),
                    )
                )
            dataset.trajectories.append(
                DemoTrajectory(steps=steps, slot_center=np.array([cx, cy]), success=bool(steps and steps[-1].reward == 1))
            )
    except (struct.error, ValueError, IndexError) as e:
        raise DemoGenerationError(f"{path}: truncated or corrupt demo file") from e
    if off != len(blob):
        raise DemoGenerationError(f"{path}: trailing bytes")
    return dataset
