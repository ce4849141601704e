"""Desk-scale pixel POMDP environments with parameterized appearance shifts.

Two tasks share one interface:

* point-catch: a cursor accelerates in a 2-D box toward a static target;
  reward 1 per tick while the cursor sits within the catch threshold.
* spinner: a bar is torqued about its hub; reward 1 per tick while the
  angular speed exceeds the spin threshold (speed is invisible in a single
  frame, so the task is genuinely partially observed).

Domain shifts change rendering only: palettes, a view rotation/scale, and an
anchored distractor shape.  Physics is a pure, deterministic function of
(state, action) and identical across shifts.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .data import (
    EXPERT_DOMAIN,
    DomainLabel,
    Episode,
    OptimalityTag,
    write_dataset,
)

TASKS = ("point-catch", "spinner")
DT = 0.05


@dataclass(frozen=True)
class EnvSpec:
    task: str = "point-catch"
    image_hw: int = 32
    horizon: int = 250          # physics ticks per episode
    action_repeat: int = 2
    catch_threshold: float = 0.09
    catch_speed_cap: float = 0.12  # the catch only counts while moving slowly
    spin_threshold: float = 6.0    # rad/s
    max_speed: float = 0.6
    max_omega: float = 8.0
    accel_gain: float = 3.0
    torque_gain: float = 12.0
    friction: float = 1.5
    action_bias: tuple | None = None

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if self.horizon % self.action_repeat:
            raise ValueError("horizon must be divisible by action_repeat")

    @property
    def action_dim(self) -> int:
        return 2 if self.task == "point-catch" else 1

    @property
    def control_steps(self) -> int:
        return self.horizon // self.action_repeat


@dataclass(frozen=True)
class Distractor:
    shape: str = "circle"     # "circle" | "square"
    color: tuple = (128, 128, 128)
    position: tuple = (0.18, 0.82)  # anchored, fraction of frame
    radius: float = 0.09


@dataclass(frozen=True)
class DomainShift:
    palette: dict = field(default_factory=dict)
    rotation_deg: float = 0.0
    scale: float = 1.0
    distractor: Distractor | None = None


_EXPERT_PALETTE = {
    "background": (20, 24, 72),
    "cursor": (240, 240, 240),
    "target": (235, 140, 30),
    "arm": (90, 200, 120),
    "hub": (200, 200, 60),
}
_AGENT_PALETTE = {
    "background": (30, 78, 40),
    "cursor": (250, 220, 40),
    "target": (200, 40, 170),
    "arm": (70, 130, 230),
    "hub": (230, 90, 90),
}

SHIFT_PRESETS = {
    "expert": DomainShift(palette=dict(_EXPERT_PALETTE)),
    "palette": DomainShift(palette=dict(_AGENT_PALETTE)),
    "palette_tilt": DomainShift(palette=dict(_AGENT_PALETTE), rotation_deg=15.0),
    "distractor": DomainShift(palette=dict(_EXPERT_PALETTE),
                              distractor=Distractor()),
}


def shift_preset(name: str) -> DomainShift:
    try:
        return SHIFT_PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown shift preset {name!r}") from None


@dataclass
class SimState:
    tick: int = 0
    pos: np.ndarray | None = None     # point-catch: cursor position in [0,1]^2
    vel: np.ndarray | None = None
    target: np.ndarray | None = None
    angle: float = 0.0                # spinner
    omega: float = 0.0
    clip_warnings: int = 0


def env_reset(spec: EnvSpec, seed: int) -> SimState:
    rng = np.random.default_rng(seed)
    if spec.task == "point-catch":
        return SimState(
            pos=rng.uniform(0.2, 0.8, size=2).astype(np.float64),
            vel=np.zeros(2),
            target=rng.uniform(0.2, 0.8, size=2).astype(np.float64),
        )
    return SimState(angle=float(rng.uniform(0.0, 2 * np.pi)), omega=0.0)


def _success(spec: EnvSpec, state: SimState) -> bool:
    if spec.task == "point-catch":
        return (float(np.linalg.norm(state.pos - state.target)) < spec.catch_threshold
                and float(np.linalg.norm(state.vel)) < spec.catch_speed_cap)
    return abs(state.omega) >= spec.spin_threshold


def env_step(spec: EnvSpec, state: SimState, action) -> tuple[SimState, float, bool]:
    """One deterministic physics tick.  Out-of-bound actions are clipped with
    a warning counter on the returned state."""
    action = np.asarray(action, dtype=np.float64).reshape(spec.action_dim)
    clipped = np.clip(action, -1.0, 1.0)
    n_clip = int((clipped != action).sum())
    if n_clip:
        warnings.warn("action clipped to [-1, 1]", stacklevel=2)
    if spec.action_bias is not None:
        clipped = np.clip(clipped + np.asarray(spec.action_bias), -1.0, 1.0)

    if spec.task == "point-catch":
        vel = state.vel + clipped * spec.accel_gain * DT
        speed = float(np.linalg.norm(vel))
        if speed > spec.max_speed:
            vel = vel * (spec.max_speed / speed)
        pos = state.pos + vel * DT
        low, high = 0.05, 0.95
        for i in range(2):
            if pos[i] < low or pos[i] > high:
                pos[i] = min(max(pos[i], low), high)
                vel[i] = 0.0
        new = SimState(tick=state.tick + 1, pos=pos, vel=vel, target=state.target.copy(),
                       clip_warnings=state.clip_warnings + n_clip)
    else:
        omega = state.omega + float(clipped[0]) * spec.torque_gain * DT \
            - spec.friction * state.omega * DT
        omega = float(np.clip(omega, -spec.max_omega, spec.max_omega))
        angle = (state.angle + omega * DT) % (2 * np.pi)
        new = SimState(tick=state.tick + 1, angle=angle, omega=omega,
                       clip_warnings=state.clip_warnings + n_clip)

    reward = 1.0 if _success(spec, new) else 0.0
    done = new.tick >= spec.horizon
    return new, reward, done


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

def _draw_circle(img, cx, cy, radius, color):
    hw = img.shape[0]
    yy, xx = np.mgrid[0:hw, 0:hw]
    mask = (xx - cx) ** 2 + (yy - cy) ** 2 <= radius ** 2
    img[mask] = color


def _draw_square(img, cx, cy, half, color):
    hw = img.shape[0]
    x0, x1 = int(round(cx - half)), int(round(cx + half))
    y0, y1 = int(round(cy - half)), int(round(cy + half))
    img[max(y0, 0):min(y1 + 1, hw), max(x0, 0):min(x1 + 1, hw)] = color


def _draw_bar(img, cx, cy, angle, length, width, color):
    hw = img.shape[0]
    yy, xx = np.mgrid[0:hw, 0:hw]
    dx, dy = xx - cx, yy - cy
    ux, uy = np.cos(angle), np.sin(angle)
    along = dx * ux + dy * uy
    across = -dx * uy + dy * ux
    mask = (along >= 0) & (along <= length) & (np.abs(across) <= width / 2)
    img[mask] = color


def render(spec: EnvSpec, state: SimState, shift: DomainShift) -> np.ndarray:
    """Rasterize the scene through the shift's palette, distractor, and view
    transform.  Pure function of (state, shift); returns uint8 (H, W, 3)."""
    hw = spec.image_hw
    pal = {**_EXPERT_PALETTE, **shift.palette}
    img = np.empty((hw, hw, 3), dtype=np.float64)
    img[:] = pal["background"]

    u = hw / 32.0  # geometry specified at 32x32 scale
    if spec.task == "point-catch":
        tx, ty = state.target * (hw - 1)
        _draw_circle(img, tx, ty, 4.0 * u, pal["target"])
        cx, cy = state.pos * (hw - 1)
        _draw_square(img, cx, cy, 2.0 * u, pal["cursor"])
    else:
        c = (hw - 1) / 2.0
        _draw_bar(img, c, c, state.angle, 12.0 * u, 3.0 * u, pal["arm"])
        _draw_circle(img, c, c, 2.5 * u, pal["hub"])

    if shift.distractor is not None:
        d = shift.distractor
        dx, dy = d.position[0] * (hw - 1), d.position[1] * (hw - 1)
        if d.shape == "circle":
            _draw_circle(img, dx, dy, d.radius * hw, d.color)
        else:
            _draw_square(img, dx, dy, d.radius * hw, d.color)

    if shift.rotation_deg != 0.0 or shift.scale != 1.0:
        img = warp_view(img, shift.rotation_deg, shift.scale)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def warp_view(img: np.ndarray, rotation_deg: float, scale: float = 1.0) -> np.ndarray:
    """Rotate/scale about the image center with bilinear sampling."""
    hw = img.shape[0]
    c = (hw - 1) / 2.0
    th = np.deg2rad(rotation_deg)
    # output -> input mapping (inverse of the forward rotation+scale)
    rot = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]]) / scale
    offset = np.array([c, c]) - rot @ np.array([c, c])
    out = np.empty_like(img)
    for ch in range(img.shape[2]):
        out[:, :, ch] = ndimage.affine_transform(
            img[:, :, ch], rot, offset=offset, order=1, mode="nearest")
    return out


# ---------------------------------------------------------------------------
# Scripted policies
# ---------------------------------------------------------------------------

def scripted_expert(spec: EnvSpec, state: SimState) -> np.ndarray:
    """Saturating proportional(-derivative) controller toward the task goal."""
    if spec.task == "point-catch":
        a = 20.0 * (state.target - state.pos) - 5.0 * state.vel
        return np.clip(a, -1.0, 1.0).astype(np.float32)
    # spin up and hold just above the threshold
    direction = 1.0 if state.omega >= 0 else -1.0
    a = 2.0 * (direction * spec.max_omega - state.omega)
    return np.clip([a], -1.0, 1.0).astype(np.float32)


def scripted_novice(spec: EnvSpec, state: SimState, rng: np.random.Generator,
                    noise_std: float = 0.8, random_frac: float = 0.2) -> np.ndarray:
    """Expert action corrupted by heavy Gaussian noise and random substitution."""
    a = scripted_expert(spec, state).astype(np.float64)
    a = a + rng.normal(0.0, noise_std, size=a.shape)
    if rng.random() < random_frac:
        a = rng.uniform(-1.0, 1.0, size=a.shape)
    return np.clip(a, -1.0, 1.0).astype(np.float32)


# ---------------------------------------------------------------------------
# Control-step wrapper and dataset generation
# ---------------------------------------------------------------------------

class ControlEnv:
    """Action-repeat wrapper producing one transition per control step."""

    def __init__(self, spec: EnvSpec, shift: DomainShift):
        self.spec = spec
        self.shift = shift
        self.state: SimState | None = None

    @property
    def action_dim(self) -> int:
        return self.spec.action_dim

    @property
    def control_steps(self) -> int:
        return self.spec.control_steps

    def reset(self, seed: int) -> np.ndarray:
        self.state = env_reset(self.spec, seed)
        return render(self.spec, self.state, self.shift)

    def step(self, action) -> tuple[np.ndarray, float, bool]:
        total = 0.0
        done = False
        for _ in range(self.spec.action_repeat):
            self.state, reward, done = env_step(self.spec, self.state, action)
            total += reward
            if done:
                break
        return render(self.spec, self.state, self.shift), total, done


def run_policy_episode(env: ControlEnv, policy, seed: int,
                       tag: OptimalityTag, domain: DomainLabel) -> Episode:
    """Roll a state-aware scripted policy; record at control-step granularity."""
    obs = env.reset(seed)
    observations, actions, rewards = [], [], []
    done = False
    while not done:
        action = np.asarray(policy(env.state), dtype=np.float32)
        next_obs, reward, done = env.step(action)
        observations.append(obs)
        actions.append(action)
        rewards.append(reward)
        obs = next_obs
    return Episode(
        observations=np.stack(observations),
        actions=np.stack(actions),
        rewards=np.asarray(rewards, dtype=np.float32),
        domain=domain,
        optimality_tag=tag,
        seed=seed,
    )


def generate_dataset(spec: EnvSpec, shift: DomainShift, policy_name: str,
                     n_episodes: int, out_dir, seed: int) -> dict:
    """Write n expert- or novice-policy episodes (expert domain, label 0)."""
    if policy_name not in ("expert", "novice"):
        raise ValueError("policy_name must be 'expert' or 'novice'")
    env = ControlEnv(spec, shift)
    label = DomainLabel(EXPERT_DOMAIN)
    tag = OptimalityTag.EXPERT if policy_name == "expert" else OptimalityTag.NOVICE
    seeds = np.random.SeedSequence(seed).generate_state(max(n_episodes, 1))
    episodes = []
    for i in range(n_episodes):
        ep_seed = int(seeds[i])
        if policy_name == "expert":
            policy = lambda st: scripted_expert(spec, st)
        else:
            rng = np.random.default_rng(ep_seed + 1)
            policy = lambda st: scripted_novice(spec, st, rng)
        episodes.append(run_policy_episode(env, policy, ep_seed, tag, label))
    return write_dataset(out_dir, episodes, {"policy": policy_name, "task": spec.task})
