"""Deterministic planar precision-insertion environment.

An effector carries a thin peg (tip offset TIP_LENGTH along its heading)
and must drive the tip into a narrow slot cut into a fixed block, under a
sparse binary reward. One step is a 20 ms control tick; per-step action
deltas are clipped to [-1, 1] and scaled by (0.5 mm, 0.5 mm, 0.02 rad).

All functions are pure over value-type states; randomness enters only
through the seed in reset().
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .ndnet.tensor import ContractError

WORKSPACE = 100.0  # mm, square
DT = 0.02  # seconds per control step (50 Hz analog)
STEP_SCALE = np.array([0.5, 0.5, 0.02], dtype=np.float32)  # mm, mm, rad
TIP_LENGTH = 8.0  # mm from effector center to peg tip
PEG_RADIUS = 1.2  # mm, render only

BLOCK_DEPTH = 15.0  # mm of material behind the face
BLOCK_HALF_SPAN = 20.0  # mm of face on either side of the slot
CHANNEL_DEPTH = 8.0  # mm of slot cut into the block
COMPLIANCE = 0.3  # mm of funnel margin at the opening
CONTACT_EPS = 1e-3  # mm; float32 pose round-trips wobble exact wall contact
ALIGN_TOL = 0.15  # rad of peg/slot misalignment before insertion jams
ALIGN_FREE_DEPTH = 0.5  # mm insertable regardless of alignment

NOMINAL_SLOT_CENTER = (50.0, 60.0)
NOMINAL_SLOT_ANGLE = math.pi / 2.0  # insertion direction points +y
NOMINAL_STANDOFF = 6.0  # mm outside the opening for critical-phase starts
CRITICAL_DIST = 10.0  # mm tip-to-slot distance defining the critical phase

PIXELS = 24
PROPRIO_DIM = 6
ACTION_DIM = 3

PHASE_APPROACH = "approach"
PHASE_CRITICAL = "critical"


def wrap_angle(a: float) -> float:
    return float((a + math.pi) % (2.0 * math.pi) - math.pi)


@dataclass
class EpisodeConfig:
    seed: int = 0
    start_mode: str = "critical_phase"  # or "full_task"
    start_axial_range: float = 2.5  # mm around the nominal standoff
    start_lateral_range: float = 2.5  # mm
    start_angle_range: float = 0.2  # rad
    slot_lateral_range: float = 1.6  # mm (calibrates the stub to ~40% success)
    slot_axial_range: float = 0.5  # mm
    slot_angle_range: float = 0.0  # rad
    slot_half_width: float = 1.0  # mm
    max_steps: int | None = None  # default resolved by start_mode
    success_tolerance: float = 0.4  # mm
    required_depth: float = 5.0  # mm

    def resolved_max_steps(self) -> int:
        if self.max_steps is not None:
            return self.max_steps
        return 500 if self.start_mode == "critical_phase" else 1500

    def validate(self):
        if self.start_mode not in ("critical_phase", "full_task"):
            raise ValueError(f"unknown start_mode {self.start_mode!r}")
        if self.success_tolerance <= 0 or self.required_depth <= 0:
            raise ValueError("success_tolerance and required_depth must be positive")
        if self.slot_half_width < self.success_tolerance:
            raise ValueError("slot_half_width must be >= success_tolerance")


@dataclass
class EnvState:
    pose: np.ndarray  # (3,) x mm, y mm, theta rad
    vel: np.ndarray  # (3,) per-step deltas
    slot_center: np.ndarray  # (2,) mm
    slot_angle: float
    slot_half_width: float
    depth: float  # mm of tip inside the channel
    t: int
    terminal: bool
    success: bool
    config: EpisodeConfig = field(repr=False, default=None)

    @property
    def phase(self) -> str:
        return PHASE_CRITICAL if tip_slot_distance(self) <= CRITICAL_DIST else PHASE_APPROACH


@dataclass
class Observation:
    pixels: np.ndarray  # (24, 24) float32 in [0, 1]
    proprio: np.ndarray  # (6,) float32: pose then velocity


def heading(theta: float) -> np.ndarray:
    return np.array([math.cos(theta), math.sin(theta)], dtype=np.float64)


def slot_frame(state: EnvState) -> tuple[np.ndarray, np.ndarray]:
    """(u, v): insertion axis into the block, and lateral direction."""
    u = heading(state.slot_angle)
    v = np.array([-u[1], u[0]])
    return u, v


def tip_position(pose: np.ndarray) -> np.ndarray:
    return pose[:2].astype(np.float64) + TIP_LENGTH * heading(float(pose[2]))


def tip_slot_coords(state: EnvState, tip: np.ndarray | None = None) -> tuple[float, float]:
    """(axial depth, lateral offset) of the tip in the slot frame."""
    if tip is None:
        tip = tip_position(state.pose)
    u, v = slot_frame(state)
    rel = tip - state.slot_center
    return float(rel @ u), float(rel @ v)


def tip_slot_distance(state: EnvState) -> float:
    tip = tip_position(state.pose)
    return float(np.linalg.norm(tip - state.slot_center))


def success_predicate(state: EnvState, tolerance: float | None = None, required_depth: float | None = None) -> bool:
    """Inserted deep enough with the tip close enough to the slot axis.

    Monotone in tolerance: success at tolerance t implies success at t' > t.
    """
    cfg = state.config
    tol = cfg.success_tolerance if tolerance is None else tolerance
    depth_req = cfg.required_depth if required_depth is None else required_depth
    d, lat = tip_slot_coords(state)
    return state.depth >= depth_req and d >= depth_req and abs(lat) <= tol


def reset(config: EpisodeConfig) -> tuple[EnvState, Observation]:
    config.validate()
    rng = np.random.default_rng(config.seed)
    slot_angle = NOMINAL_SLOT_ANGLE + float(rng.uniform(-config.slot_angle_range, config.slot_angle_range))
    u = heading(slot_angle)
    v = np.array([-u[1], u[0]])
    slot_center = np.array(NOMINAL_SLOT_CENTER) + u * float(
        rng.uniform(-config.slot_axial_range, config.slot_axial_range)
    ) + v * float(rng.uniform(-config.slot_lateral_range, config.slot_lateral_range))

    if config.start_mode == "critical_phase":
        axial = -NOMINAL_STANDOFF + float(rng.uniform(-config.start_axial_range, config.start_axial_range))
        lateral = float(rng.uniform(-config.start_lateral_range, config.start_lateral_range))
        theta = slot_angle + float(rng.uniform(-config.start_angle_range, config.start_angle_range))
        tip = slot_center + axial * u + lateral * v
        center = tip - TIP_LENGTH * heading(theta)
    else:
        margin = 12.0
        u_f = heading(slot_angle)
        v_f = np.array([-u_f[1], u_f[0]])
        while True:  # rejection-sample starts clear of the block
            center = rng.uniform(margin, WORKSPACE - margin, size=2)
            theta = float(rng.uniform(-math.pi, math.pi))
            clear = True
            for p in (center, center + TIP_LENGTH * heading(theta)):
                rel = p - slot_center
                if -2.0 < float(rel @ u_f) < BLOCK_DEPTH + 2.0 and abs(float(rel @ v_f)) < BLOCK_HALF_SPAN + 2.0:
                    clear = False
            if clear:
                break

    pose = np.array([center[0], center[1], wrap_angle(theta)], dtype=np.float32)
    state = EnvState(
        pose=pose,
        vel=np.zeros(3, dtype=np.float32),
        slot_center=slot_center.astype(np.float64),
        slot_angle=float(slot_angle),
        slot_half_width=config.slot_half_width,
        depth=0.0,
        t=0,
        terminal=False,
        success=False,
        config=config,
    )
    return state, observe(state)


def _resolve_contact(state: EnvState, tip_old: np.ndarray, tip_des: np.ndarray, theta_new: float) -> tuple[float, float, bool]:
    """Clamp the desired tip position against the face and channel walls.

    Contact is resolved for motion arriving from the front half-space or
    already inside the channel; step sizes (<= 0.5 mm) rule out tunneling.
    Returns resolved (axial, lateral) slot-frame coordinates plus a flag
    marking a legitimate in-channel position (entered through the opening).
    """
    u, v = slot_frame(state)
    rel_old = tip_old - state.slot_center
    rel_des = tip_des - state.slot_center
    d0, l0 = float(rel_old @ u), float(rel_old @ v)
    d1, l1 = float(rel_des @ u), float(rel_des @ v)
    w2 = state.slot_half_width

    if d1 <= 0.0 or d1 > BLOCK_DEPTH or abs(l1) > BLOCK_HALF_SPAN:
        return d1, l1, False  # clear of the block (including retraction)

    aligned = abs(wrap_angle(theta_new - state.slot_angle)) <= ALIGN_TOL
    depth_cap = CHANNEL_DEPTH if aligned else max(d0, ALIGN_FREE_DEPTH)
    in_channel_old = 0.0 < d0 <= CHANNEL_DEPTH and abs(l0) <= w2 + CONTACT_EPS

    if in_channel_old:
        # Walls block lateral motion; compliant sliding along the channel.
        return min(d1, depth_cap), float(np.clip(l1, -w2, w2)), True
    if 0.0 < d0 <= CHANNEL_DEPTH and abs(l0) <= w2 + COMPLIANCE:
        # Wall-adjacent within the compliance margin: wiggle slides in.
        return min(d1, depth_cap), float(np.clip(l1, -w2, w2)), True
    if d0 <= 0.0:
        if abs(l1) <= w2:
            return min(d1, depth_cap), l1, True
        if abs(l1) <= w2 + COMPLIANCE:
            # Funnel: off-axis push within the compliance margin slides in.
            return min(d1, depth_cap), math.copysign(w2, l1), True
        return 0.0, l1, False  # blocked at the face, free to slide along it
    # Old tip was behind or above the block: treated as clear of contact
    # (unreachable from critical-phase starts; full-task paths stage in
    # front first), and never counts as inserted.
    return d1, l1, False


def step(state: EnvState, action: np.ndarray) -> tuple[EnvState, float, bool, Observation]:
    """Integrate one clipped action delta; sparse reward at first success."""
    if state.terminal:
        raise ContractError("step() called on a terminal state")
    a = np.clip(np.asarray(action, dtype=np.float64), -1.0, 1.0) * STEP_SCALE.astype(np.float64)
    theta_new = wrap_angle(float(state.pose[2]) + float(a[2]))
    tip_old = tip_position(state.pose)
    center_des = state.pose[:2].astype(np.float64) + a[:2]
    tip_des = center_des + TIP_LENGTH * heading(theta_new)

    d_res, l_res, inserted = _resolve_contact(state, tip_old, tip_des, theta_new)
    u, v = slot_frame(state)
    tip_res = state.slot_center + d_res * u + l_res * v
    center_res = tip_res - TIP_LENGTH * heading(theta_new)
    center_res = np.clip(center_res, 0.0, WORKSPACE)

    pose_new = np.array([center_res[0], center_res[1], theta_new], dtype=np.float32)
    vel = np.array(
        [
            pose_new[0] - state.pose[0],
            pose_new[1] - state.pose[1],
            wrap_angle(float(pose_new[2]) - float(state.pose[2])),
        ],
        dtype=np.float32,
    )
    depth = max(0.0, d_res) if inserted and abs(l_res) <= state.slot_half_width + CONTACT_EPS else 0.0

    new_state = replace(
        state,
        pose=pose_new,
        vel=vel,
        depth=depth,
        t=state.t + 1,
    )
    success = success_predicate(new_state)
    terminal = success or new_state.t >= state.config.resolved_max_steps()
    new_state.success = success
    new_state.terminal = terminal
    reward = 1.0 if success else 0.0
    return new_state, reward, terminal, observe(new_state)


# Rendering -----------------------------------------------------------------

_px = (np.arange(PIXELS, dtype=np.float64) + 0.5) * (WORKSPACE / PIXELS)
_PIX_X, _PIX_Y = np.meshgrid(_px, _px)  # row i -> y, col j -> x
_AA = 2.0  # mm of anti-alias falloff so sub-pixel motion shifts intensities

_BG = 0.08
_BLOCK_SHADE = 0.55
_PEG_SHADE = 1.0


def _coverage(sdf: np.ndarray) -> np.ndarray:
    return np.clip(0.5 - sdf / _AA, 0.0, 1.0)


def _box_sdf(px, py, center, axis_u, half_axial, half_lateral):
    ux, uy = axis_u
    rx = px - center[0]
    ry = py - center[1]
    qa = np.abs(rx * ux + ry * uy) - half_axial
    ql = np.abs(-rx * uy + ry * ux) - half_lateral
    ax = np.maximum(qa, 0.0)
    al = np.maximum(ql, 0.0)
    outside = np.sqrt(ax * ax + al * al)
    inside = np.minimum(np.maximum(qa, ql), 0.0)
    return outside + inside


def render(state: EnvState) -> np.ndarray:
    """24x24 grayscale; anti-aliased so 0.1 mm pose changes alter pixels."""
    u, _v = slot_frame(state)
    block_center = state.slot_center + u * (BLOCK_DEPTH / 2.0)
    sdf_block = _box_sdf(_PIX_X, _PIX_Y, block_center, u, BLOCK_DEPTH / 2.0, BLOCK_HALF_SPAN)
    channel_center = state.slot_center + u * (CHANNEL_DEPTH / 2.0)
    sdf_channel = _box_sdf(_PIX_X, _PIX_Y, channel_center, u, CHANNEL_DEPTH / 2.0, state.slot_half_width)
    sdf_material = np.maximum(sdf_block, -sdf_channel)

    a = state.pose[:2].astype(np.float64)
    b = tip_position(state.pose)
    ab = b - a
    denom = float(ab @ ab) or 1.0
    tproj = np.clip(((_PIX_X - a[0]) * ab[0] + (_PIX_Y - a[1]) * ab[1]) / denom, 0.0, 1.0)
    cx = a[0] + tproj * ab[0]
    cy = a[1] + tproj * ab[1]
    sdf_peg = np.sqrt((_PIX_X - cx) ** 2 + (_PIX_Y - cy) ** 2) - PEG_RADIUS

    img = np.full((PIXELS, PIXELS), _BG)
    cov_b = _coverage(sdf_material)
    img = img * (1.0 - cov_b) + _BLOCK_SHADE * cov_b
    cov_p = _coverage(sdf_peg)
    img = img * (1.0 - cov_p) + _PEG_SHADE * cov_p
    return img.astype(np.float32)


def observe(state: EnvState) -> Observation:
    proprio = np.concatenate([state.pose, state.vel]).astype(np.float32)
    return Observation(pixels=render(state), proprio=proprio)


# Scripted expert ------------------------------------------------------------

EXPERT_GAIN = 0.8
EXPERT_ANGLE_GAIN = 0.9
_PRE_INSERT_STANDOFF = 1.5  # mm outside the opening
_LINED_UP_LATERAL = 0.3  # mm


def _expert_action(state: EnvState) -> np.ndarray:
    """One proportional-control step toward alignment then insertion."""
    d, lat = tip_slot_coords(state)
    theta_err = wrap_angle(float(state.pose[2]) - state.slot_angle)
    u, v = slot_frame(state)
    tip = tip_position(state.pose)

    in_channel = 0.0 < d <= CHANNEL_DEPTH and abs(lat) <= state.slot_half_width
    if in_channel:
        target = state.slot_center + (state.config.required_depth + 1.0) * u
    elif d <= 1e-9:  # in front of the face
        if abs(lat) > _LINED_UP_LATERAL or d < -_PRE_INSERT_STANDOFF - 0.5:
            target = state.slot_center - _PRE_INSERT_STANDOFF * u
        else:
            target = state.slot_center + (state.config.required_depth + 1.0) * u
    else:  # behind or above the block: skirt around the nearer side
        side = math.copysign(1.0, lat if lat != 0.0 else 1.0)
        if abs(lat) <= BLOCK_HALF_SPAN + 4.0:
            target = state.slot_center + d * u + side * (BLOCK_HALF_SPAN + 6.0) * v
        else:
            target = state.slot_center - NOMINAL_STANDOFF * u + side * (BLOCK_HALF_SPAN + 4.0) * v

    dtheta_cmd = -EXPERT_ANGLE_GAIN * theta_err / float(STEP_SCALE[2])
    delta_tip = target - tip
    # Moving the effector center by dxy moves the tip by the same amount at
    # fixed heading; compensate for the tip swing caused by the dtheta step.
    dtheta = float(np.clip(dtheta_cmd, -1.0, 1.0)) * float(STEP_SCALE[2])
    swing = TIP_LENGTH * (heading(float(state.pose[2]) + dtheta) - heading(float(state.pose[2])))
    dxy_cmd = (EXPERT_GAIN * delta_tip - swing) / float(STEP_SCALE[0])
    return np.clip(
        np.array([dxy_cmd[0], dxy_cmd[1], dtheta_cmd], dtype=np.float32), -1.0, 1.0
    )


def scripted_expert_chunk(state: EnvState, horizon: int) -> np.ndarray:
    """Open-loop near-optimal chunk, planned by internal rollout.

    Deterministic in the state; zero actions once the plan reaches success.
    """
    actions = np.zeros((horizon, ACTION_DIM), dtype=np.float32)
    sim = state
    for i in range(horizon):
        if sim.success or success_predicate(sim):
            break
        a = _expert_action(sim)
        actions[i] = a
        sim = _step_physics(sim, a)
    return actions


def _step_physics(state: EnvState, action: np.ndarray) -> EnvState:
    """step() without the terminal bookkeeping, for internal planning."""
    a = np.clip(np.asarray(action, dtype=np.float64), -1.0, 1.0) * STEP_SCALE.astype(np.float64)
    theta_new = wrap_angle(float(state.pose[2]) + float(a[2]))
    tip_old = tip_position(state.pose)
    center_des = state.pose[:2].astype(np.float64) + a[:2]
    tip_des = center_des + TIP_LENGTH * heading(theta_new)
    d_res, l_res, inserted = _resolve_contact(state, tip_old, tip_des, theta_new)
    u, v = slot_frame(state)
    tip_res = state.slot_center + d_res * u + l_res * v
    center_res = np.clip(tip_res - TIP_LENGTH * heading(theta_new), 0.0, WORKSPACE)
    pose_new = np.array([center_res[0], center_res[1], theta_new], dtype=np.float32)
    depth = max(0.0, d_res) if inserted and abs(l_res) <= state.slot_half_width + CONTACT_EPS else 0.0
    sim = replace(state, pose=pose_new, depth=depth, t=state.t + 1)
    sim.success = success_predicate(sim)
    return sim
