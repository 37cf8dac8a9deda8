"""Procedural lane-driving micro-environment.

A kinematic vehicle follows a road made of constant-curvature segments. The
frontal camera is a 64×64 grayscale perspective render of the two lane
boundaries; the boundaries carry a bright/dim dash pattern that scrolls with
the odometer, so consecutive frames reveal speed. A scripted autopilot
produces labelled demonstrations and the reward follows the lane-driving
reward used for DQN training.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from . import rng as rng_mod

LANE_HALF_WIDTH = 1.75      # m
STEER_GAIN = 2.5            # 1/s
DT = 0.1                    # s
MAX_EPISODE_STEPS = 1000
S_DES_KMH = 30.0
STEER_VALUES = (-0.2, 0.0, 0.2)     # rad
ACCEL_VALUES = (-3.0, 0.0, 3.0)     # m/s^2
N_ACTIONS = 9
SENSOR_DIM = 3                      # steering, throttle, brake

IMAGE_SIZE = 64
_HORIZON_ROW = 16
_ROW_SCALE = 208.9          # distance of row v is _ROW_SCALE / (v + 0.5 - _ROW_ORIGIN)
_ROW_ORIGIN = 11.28
_FOCAL = 59.4               # px per (m / m)
_LINE_WIDTH = 0.15          # m
_DASH_PERIOD = 6.0          # m
_DASH_LENGTH = 3.0          # m
_SKY, _ROAD, _DASH_ON, _DASH_OFF = 0.15, 0.35, 0.95, 0.7

_CAR_HALF_WIDTH = 0.9
_BLOCK_WIDTH = 0.6


@dataclass(frozen=True)
class Action:
    steer: float
    accel: float

    @property
    def index(self) -> int:
        return action_index(self.steer, self.accel)

    @classmethod
    def from_index(cls, k: int) -> "Action":
        if not 0 <= int(k) < N_ACTIONS:
            raise ValueError(f"action class {k} outside [0, {N_ACTIONS})")
        return cls(STEER_VALUES[int(k) // 3], ACCEL_VALUES[int(k) % 3])


def action_index(steer: float, accel: float) -> int:
    """Class index of an exact discrete action (3*steer_idx + accel_idx)."""
    try:
        return 3 * STEER_VALUES.index(steer) + ACCEL_VALUES.index(accel)
    except ValueError:
        raise ValueError(f"({steer}, {accel}) is not a discrete action") from None


def discretize_action(steer: float, accel: float) -> int:
    """Nearest discrete bin on each axis, both axes ascending."""
    si = int(np.argmin([abs(steer - v) for v in STEER_VALUES]))
    ai = int(np.argmin([abs(accel - v) for v in ACCEL_VALUES]))
    return 3 * si + ai


@dataclass(frozen=True)
class EnvState:
    lateral_offset: float = 0.0     # m, positive to the left of lane centre
    heading_error: float = 0.0      # rad
    curvature: float = 0.0          # 1/m
    speed: float = 0.0              # m/s
    odometer: float = 0.0           # m
    collided: bool = False
    out_of_lane: bool = False
    steer: float = 0.0              # last applied steering (rad)
    accel: float = 0.0              # last applied acceleration (m/s^2)

    def sensors(self) -> np.ndarray:
        """(steering in [-1, 1], throttle in [0, 1], brake in [0, 1])."""
        return np.array([self.steer / STEER_VALUES[-1],
                         1.0 if self.accel > 0 else 0.0,
                         1.0 if self.accel < 0 else 0.0], dtype=np.float32)


@dataclass(frozen=True)
class RewardConfig:
    collision: float = 200.0
    fast: float = 10.0
    out: float = 40.0
    steer: float = 5.0
    lateral: float = 0.2
    constant: float = -0.1
    s_des_kmh: float = S_DES_KMH
    negate_lateral: bool = False

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class Road:
    """Piecewise-constant curvature segments plus edge obstacles."""

    starts: np.ndarray
    curvatures: np.ndarray
    obstacle_positions: np.ndarray = field(default_factory=lambda: np.zeros(0))
    obstacle_sides: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @classmethod
    def straight(cls) -> "Road":
        return cls(np.zeros(1), np.zeros(1))

    @classmethod
    def random(cls, rng: np.random.Generator, length: float = 2000.0, max_curvature: float = 0.045,
               min_curvature: float = 0.02, straight_prob: float = 0.15, obstacle_prob: float = 0.05) -> "Road":
        starts, curvs, obs_s, obs_side = [], [], [], []
        s = 0.0
        while s < length:
            seg = float(rng.uniform(40.0, 120.0))
            if rng.random() < straight_prob:
                c = 0.0
            else:
                c = float(rng.uniform(min_curvature, max_curvature)) * (1.0 if rng.random() < 0.5 else -1.0)
            starts.append(s)
            curvs.append(c)
            if s > 0 and rng.random() < obstacle_prob:
                obs_s.append(s + float(rng.uniform(0.2, 0.8)) * seg)
                obs_side.append(1.0 if rng.random() < 0.5 else -1.0)
            s += seg
        return cls(np.array(starts), np.array(curvs), np.array(obs_s), np.array(obs_side))

    def curvature_at(self, s: float) -> float:
        i = int(np.searchsorted(self.starts, s, side="right")) - 1
        return float(self.curvatures[max(i, 0)])

    def collides(self, s0: float, s1: float, lateral: float) -> bool:
        if self.obstacle_positions.size == 0:
            return False
        hit = (self.obstacle_positions > s0) & (self.obstacle_positions <= s1)
        threshold = LANE_HALF_WIDTH - _BLOCK_WIDTH - _CAR_HALF_WIDTH
        return bool(np.any(hit & (self.obstacle_sides * lateral > threshold)))


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

_rows = np.arange(_HORIZON_ROW, IMAGE_SIZE)
_ROW_DIST = _ROW_SCALE / (_rows + 0.5 - _ROW_ORIGIN)
_COL_EDGES = np.arange(IMAGE_SIZE, dtype=np.float64) - IMAGE_SIZE / 2   # left edge of each column


def _line_coverage(center: np.ndarray, half_width: np.ndarray) -> np.ndarray:
    """Fraction of each pixel column covered by a line, per row."""
    lo = (center - half_width)[:, None]
    hi = (center + half_width)[:, None]
    cover = np.minimum(hi, _COL_EDGES + 1.0) - np.maximum(lo, _COL_EDGES)
    return np.clip(cover, 0.0, 1.0)


def render(state: EnvState) -> np.ndarray:
    """Grayscale frame ``(1, 64, 64)`` in [0, 1]; a pure function of the state."""
    d = _ROW_DIST
    phase = np.mod(state.odometer + d, _DASH_PERIOD) < _DASH_LENGTH
    line_val = np.where(phase, _DASH_ON, _DASH_OFF)
    half_px = np.maximum(_FOCAL * _LINE_WIDTH / d, 1.0) / 2
    bend = -state.heading_error * d + 0.5 * state.curvature * d * d
    frame = np.full((IMAGE_SIZE, IMAGE_SIZE), _SKY)
    road = np.full((d.size, IMAGE_SIZE), _ROAD)
    cover = np.zeros_like(road)
    for side in (-1.0, 1.0):
        lateral = (side * LANE_HALF_WIDTH - state.lateral_offset) + bend
        # image x grows to the right; lateral is positive to the left
        cover = cover + _line_coverage(-_FOCAL * lateral / d, half_px)
    cover = np.minimum(cover, 1.0)
    road = road + (line_val[:, None] - _ROAD) * cover
    frame[_HORIZON_ROW:] = road
    return frame[None].astype(np.float32)


def quantize(frame: np.ndarray) -> np.ndarray:
    return np.round(np.clip(frame, 0.0, 1.0) * 255.0).astype(np.uint8)


# ---------------------------------------------------------------------------
# dynamics, reward, autopilot
# ---------------------------------------------------------------------------

def step(state: EnvState, action: Action, dt: float = DT, road: Road | None = None) -> tuple[EnvState, dict]:
    """Advance the kinematic model one tick; returns the new state and event flags."""
    speed = max(0.0, state.speed + action.accel * dt)
    heading = state.heading_error + (STEER_GAIN * action.steer - state.curvature * speed) * dt
    lateral = state.lateral_offset + speed * math.sin(heading) * dt
    odometer = state.odometer + speed * math.cos(heading) * dt
    curvature = road.curvature_at(odometer) if road is not None else state.curvature
    collided = road.collides(state.odometer, odometer, lateral) if road is not None else False
    out_of_lane = abs(lateral) > LANE_HALF_WIDTH
    new = EnvState(lateral, heading, curvature, speed, odometer, collided, out_of_lane,
                   action.steer, action.accel)
    return new, {"collision": collided, "out_of_lane": out_of_lane}


def reward(state: EnvState, action: Action, events: dict, cfg: RewardConfig = RewardConfig()) -> float:
    r_collision = -1.0 if events.get("collision") else 0.0
    r_out = -1.0 if events.get("out_of_lane") else 0.0
    speed_kmh = state.speed * 3.6
    r_fast = -1.0 if speed_kmh > cfg.s_des_kmh else 0.0
    v_lon = state.speed * math.cos(state.heading_error)
    alpha = action.steer
    r_lat = alpha * state.speed ** 2
    if cfg.negate_lateral:
        r_lat = -r_lat
    return (cfg.collision * r_collision + v_lon + cfg.fast * (speed_kmh / cfg.s_des_kmh) * r_fast
            + cfg.out * r_out - cfg.steer * alpha ** 2 + cfg.lateral * r_lat + cfg.constant)


@dataclass(frozen=True)
class Autopilot:
    k_p: float = 0.6
    k_d: float = 1.2
    speed_band: float = 0.5     # m/s either side of the desired speed
    s_des: float = S_DES_KMH / 3.6

    def __call__(self, state: EnvState) -> Action:
        cmd = -self.k_p * state.lateral_offset - self.k_d * state.heading_error
        steer = STEER_VALUES[int(np.argmin([abs(cmd - v) for v in STEER_VALUES]))]
        if state.speed < self.s_des - self.speed_band:
            accel = 3.0
        elif state.speed > self.s_des + self.speed_band:
            accel = -3.0
        else:
            accel = 0.0
        return Action(steer, accel)


def autopilot(state: EnvState) -> Action:
    return Autopilot()(state)


# ---------------------------------------------------------------------------
# episodic environment
# ---------------------------------------------------------------------------

@dataclass
class EnvConfig:
    max_steps: int = MAX_EPISODE_STEPS
    max_curvature: float = 0.045
    min_curvature: float = 0.02
    straight_prob: float = 0.15
    obstacle_prob: float = 0.05
    start_offset: float = 0.5
    start_heading: float = 0.05
    start_speed: tuple[float, float] = (0.0, 12.0)
    reward: RewardConfig = field(default_factory=RewardConfig)


class DrivingEnv:
    """``reset(seed) -> (frame, sensors)``; ``step(k) -> (frame, sensors, reward, done, events)``."""

    def __init__(self, cfg: EnvConfig | None = None, seed: int = 0):
        self.cfg = cfg or EnvConfig()
        self._seed = seed
        self._episode = 0
        self.state = EnvState()
        self.road = Road.straight()
        self.t = 0
        self.done = True
        self.out_count = 0

    def reset(self, seed: int | None = None) -> tuple[np.ndarray, np.ndarray]:
        if seed is None:
            seed = self._seed
            self._episode += 1
            g = rng_mod.stream(seed, "episode", self._episode)
        else:
            g = rng_mod.stream(seed, "episode")
        cfg = self.cfg
        self.road = Road.random(g, length=cfg.max_steps * 2.0 + 400.0, max_curvature=cfg.max_curvature,
                                min_curvature=cfg.min_curvature, straight_prob=cfg.straight_prob,
                                obstacle_prob=cfg.obstacle_prob)
        self.state = EnvState(
            lateral_offset=float(g.uniform(-cfg.start_offset, cfg.start_offset)),
            heading_error=float(g.uniform(-cfg.start_heading, cfg.start_heading)),
            curvature=self.road.curvature_at(0.0),
            speed=float(g.uniform(*cfg.start_speed)),
        )
        self.t = 0
        self.done = False
        self.out_count = 0
        return self.observe()

    def observe(self) -> tuple[np.ndarray, np.ndarray]:
        return quantize(render(self.state)).astype(np.float32) / 255.0, self.state.sensors()

    def step(self, action: int | Action):
        if self.done:
            raise RuntimeError("step() on a finished episode; call reset()")
        act = action if isinstance(action, Action) else Action.from_index(action)
        self.state, events = step(self.state, act, road=self.road)
        r = reward(self.state, act, events, self.cfg.reward)
        self.t += 1
        self.out_count += int(events["out_of_lane"])
        self.done = events["collision"] or events["out_of_lane"] or self.t >= self.cfg.max_steps
        frame, sensors = self.observe()
        return frame, sensors, r, self.done, events
