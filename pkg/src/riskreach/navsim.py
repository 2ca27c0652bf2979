"""Deterministic 2D arena with a point differential-drive robot.

Square arena ``[-H, H]^2`` with cylindrical obstacles, a 180 degree LiDAR
sampled in ``lidar_bins`` rays, and a layered binary cost: ``cost = 1`` when
the clearance drops below ``d_danger``, episode ends in collision below
``d_col``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import kernels

OBS_DIM = 25


class ScenarioError(RuntimeError):
    pass


class ConfigError(ValueError):
    pass


def _default_fixed():
    return ((2.5, 2.5, 0.5), (-2.5, 2.5, 0.5), (-2.5, -2.5, 0.5), (2.5, -2.5, 0.5))


def _default_pairs():
    # (start x, start y, start heading, goal x, goal y)
    return (
        (-4.0, -4.0, 0.7854, 4.0, 4.0),
        (4.0, -4.0, 2.3562, -4.0, 4.0),
        (-4.0, 0.0, 0.0, 4.0, 0.0),
        (0.0, -4.0, 1.5708, 0.0, 4.0),
        (4.0, 0.0, 3.1416, -4.0, 0.0),
        (0.0, 4.0, -1.5708, 0.0, -4.0),
        (-4.0, 4.0, -0.7854, 4.0, -4.0),
        (4.0, 4.0, -2.3562, -4.0, -4.0),
        (-3.0, -1.0, 0.0, 3.0, 1.0),
        (1.0, -3.0, 1.5708, -1.0, 3.0),
    )


@dataclass(frozen=True)
class ScenarioConfig:
    half_extent: float = 5.0
    d_col: float = 0.4
    d_danger: float = 0.5
    fixed_obstacles: tuple = field(default_factory=_default_fixed)
    n_random: int = 4
    random_radius_min: float = 0.3
    random_radius_max: float = 0.6
    dt: float = 0.1
    v_max: float = 1.0
    w_max: float = 1.0
    goal_radius: float = 0.3
    lidar_bins: int = 20
    lidar_max_range: float = 10.0
    max_steps: int = 300
    reward_goal: float = 100.0
    reward_collision: float = -100.0
    progress_gain: float = 10.0
    step_penalty: float = 0.1
    spawn_margin: float = 1.0  # start/goal distance from the walls when sampled
    spawn_clearance: float = 1.0  # start/goal distance from obstacle surfaces
    min_start_goal_distance: float = 3.0
    eval_pairs: tuple = field(default_factory=_default_pairs)
    eval_map_seed: int = 9000

    @property
    def n_fixed(self) -> int:
        return len(self.fixed_obstacles)

    @property
    def goal_norm(self) -> float:
        return 2.0 * math.sqrt(2.0) * self.half_extent


def _fmt_tuples(items):
    return ";".join(",".join(repr(float(v)) for v in item) for item in items)


def _parse_tuples(text, width, key):
    text = text.strip()
    if not text:
        return ()
    out = []
    for chunk in text.split(";"):
        parts = [p for p in chunk.split(",") if p.strip()]
        if len(parts) != width:
            raise ConfigError(f"{key}: each entry needs {width} comma-separated numbers")
        out.append(tuple(float(p) for p in parts))
    return tuple(out)


_TUPLE_WIDTH = {"fixed_obstacles": 3, "eval_pairs": 5}


def scenario_to_text(cfg: ScenarioConfig) -> str:
    lines = []
    for f in fields(cfg):
        val = getattr(cfg, f.name)
        if f.name in _TUPLE_WIDTH:
            lines.append(f"{f.name}={_fmt_tuples(val)}")
        else:
            lines.append(f"{f.name}={val!r}" if isinstance(val, float) else f"{f.name}={val}")
    return "\n".join(lines) + "\n"


def parse_scenario(text: str, base: ScenarioConfig | None = None) -> ScenarioConfig:
    """Parse ``key=value`` lines; ``#`` starts a comment. Unknown keys raise."""
    base = base or ScenarioConfig()
    types = {f.name: f for f in fields(ScenarioConfig)}
    updates = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in _TUPLE_WIDTH:
            updates[key] = _parse_tuples(val, _TUPLE_WIDTH[key], key)
        else:
            kind = type(getattr(base, key))
            try:
                updates[key] = kind(val)
            except ValueError:
                raise ConfigError(f"line {lineno}: {key}: cannot parse {val!r}") from None
    cfg = ScenarioConfig(**{**{f.name: getattr(base, f.name) for f in fields(base)}, **updates})
    validate_scenario(cfg)
    return cfg


def validate_scenario(cfg: ScenarioConfig):
    if not 0 < cfg.d_col < cfg.d_danger:
        raise ConfigError("need 0 < d_col < d_danger")
    if cfg.spawn_clearance < cfg.d_danger:
        raise ConfigError("spawn_clearance must be at least d_danger")
    if cfg.lidar_bins != OBS_DIM - 5:
        raise ConfigError(f"lidar_bins must be {OBS_DIM - 5} for a {OBS_DIM}-wide observation")
    if cfg.half_extent <= 0 or cfg.dt <= 0 or cfg.max_steps <= 0:
        raise ConfigError("half_extent, dt and max_steps must be positive")
    if cfg.n_random < 0 or cfg.random_radius_min > cfg.random_radius_max:
        raise ConfigError("bad random obstacle settings")
    for cx, cy, r in cfg.fixed_obstacles:
        if abs(cx) + r > cfg.half_extent or abs(cy) + r > cfg.half_extent:
            raise ConfigError(f"fixed obstacle ({cx}, {cy}, {r}) leaves the arena")


def load_scenario(path) -> ScenarioConfig:
    return parse_scenario(Path(path).read_text(encoding="utf-8"))


@dataclass(frozen=True)
class RobotPose:
    x: float
    y: float
    theta: float


@dataclass(frozen=True)
class ArenaMap:
    half_extent: float
    obstacles: np.ndarray  # (k, 3): x, y, radius
    goal: tuple
    n_fixed: int
    n_random: int


@dataclass(frozen=True)
class StepOutcome:
    pose: RobotPose
    observation: np.ndarray
    reward: float
    cost: int
    status: str  # running | collision | goal | timeout
    d_min: float
    clipped: bool


def min_obstacle_distance(pose: RobotPose, arena: ArenaMap) -> float:
    return kernels.min_obstacle_distance(pose.x, pose.y, arena.half_extent, arena.obstacles)


def lidar_scan(pose: RobotPose, arena: ArenaMap, cfg: ScenarioConfig) -> np.ndarray:
    return kernels.lidar_scan(pose.x, pose.y, pose.theta, arena.half_extent, arena.obstacles,
                              cfg.lidar_bins, cfg.lidar_max_range)


def _clear(x, y, obstacles, half, margin, obstacle_margin=None):
    if half - abs(x) <= margin or half - abs(y) <= margin:
        return False
    if len(obstacles) == 0:
        return True
    d = np.hypot(obstacles[:, 0] - x, obstacles[:, 1] - y) - obstacles[:, 2]
    return bool(np.all(d > (margin if obstacle_margin is None else obstacle_margin)))


def generate_arena(seed: int, cfg: ScenarioConfig, start=None, goal=None, max_attempts=1000):
    """Build the obstacle map (and a start/goal pair when not given).

    Random draws come from ``numpy.random.default_rng(seed)`` only, so the
    result is a pure function of ``(seed, cfg, start, goal)``.
    """
    rng = np.random.default_rng(seed)
    half = cfg.half_extent
    fixed = np.array(cfg.fixed_obstacles, dtype=np.float64).reshape(-1, 3)
    attempts = 0
    lo, hi = -half + cfg.spawn_margin, half - cfg.spawn_margin
    if start is None or goal is None:
        while True:
            attempts += 1
            if attempts > max_attempts:
                raise ScenarioError(f"seed {seed}: no valid start/goal after {max_attempts} attempts")
            sx, sy, gx, gy = rng.uniform(lo, hi, size=4)
            if math.hypot(gx - sx, gy - sy) < cfg.min_start_goal_distance:
                continue
            if (_clear(sx, sy, fixed, half, cfg.d_danger, cfg.spawn_clearance)
                    and _clear(gx, gy, fixed, half, cfg.d_danger, cfg.spawn_clearance)):
                break
        start = (float(sx), float(sy), float(rng.uniform(-math.pi, math.pi)))
        goal = (float(gx), float(gy))
    placed = []
    while len(placed) < cfg.n_random:
        attempts += 1
        if attempts > max_attempts:
            raise ScenarioError(f"seed {seed}: obstacle placement exceeded {max_attempts} attempts")
        r = rng.uniform(cfg.random_radius_min, cfg.random_radius_max)
        cx, cy = rng.uniform(-half + r, half - r, size=2)
        cand = np.array([[cx, cy, r]])
        if (_clear(start[0], start[1], cand, half, cfg.d_danger, cfg.spawn_clearance)
                and _clear(goal[0], goal[1], cand, half, cfg.d_danger, cfg.spawn_clearance)):
            placed.append((cx, cy, r))
    obstacles = np.vstack([fixed, np.array(placed).reshape(-1, 3)])
    arena = ArenaMap(half, np.ascontiguousarray(obstacles), (float(goal[0]), float(goal[1])),
                     len(fixed), cfg.n_random)
    if not (_clear(start[0], start[1], obstacles, half, cfg.d_danger)
            and _clear(goal[0], goal[1], obstacles, half, cfg.d_danger)):
        raise ScenarioError(f"seed {seed}: start or goal inside the danger zone")
    return arena, RobotPose(float(start[0]), float(start[1]), kernels.wrap_angle(float(start[2])))


def observe(pose: RobotPose, arena: ArenaMap, prev_action, cfg: ScenarioConfig) -> np.ndarray:
    """25-dim normalised observation: 20 LiDAR bins in [0, 1], goal distance
    in [0, 1], goal bearing as (sin, cos), previous (v, w) scaled to [0, 1]
    and [-1, 1]."""
    obs = np.empty(OBS_DIM)
    obs[:cfg.lidar_bins] = lidar_scan(pose, arena, cfg) / cfg.lidar_max_range
    gx, gy = arena.goal
    dist = math.hypot(gx - pose.x, gy - pose.y)
    bearing = kernels.wrap_angle(math.atan2(gy - pose.y, gx - pose.x) - pose.theta)
    obs[cfg.lidar_bins] = min(dist / cfg.goal_norm, 1.0)
    obs[cfg.lidar_bins + 1] = math.sin(bearing)
    obs[cfg.lidar_bins + 2] = math.cos(bearing)
    obs[cfg.lidar_bins + 3] = prev_action[0] / cfg.v_max
    obs[cfg.lidar_bins + 4] = prev_action[1] / cfg.w_max
    return obs


def clip_action(action, cfg: ScenarioConfig):
    v = min(max(float(action[0]), 0.0), cfg.v_max)
    w = min(max(float(action[1]), -cfg.w_max), cfg.w_max)
    return (v, w), (v != action[0] or w != action[1])


def integrate(pose: RobotPose, v: float, w: float, dt: float) -> RobotPose:
    x = pose.x + v * math.cos(pose.theta) * dt
    y = pose.y + v * math.sin(pose.theta) * dt
    return RobotPose(x, y, kernels.wrap_angle(pose.theta + w * dt))


def classify(d_min: float, at_goal: bool, step_index: int, cfg: ScenarioConfig):
    """Cost and terminal status for a post-step clearance."""
    cost = 1 if d_min < cfg.d_danger else 0
    if d_min < cfg.d_col:
        return cost, "collision"
    if at_goal:
        return cost, "goal"
    if step_index >= cfg.max_steps:
        return cost, "timeout"
    return cost, "running"


def step(pose: RobotPose, action, arena: ArenaMap, cfg: ScenarioConfig, step_index: int = 1,
         dt: float | None = None) -> StepOutcome:
    """Advance one control interval. ``step_index`` counts steps taken
    including this one; reaching ``cfg.max_steps`` times out."""
    dt = cfg.dt if dt is None else dt
    (v, w), clipped = clip_action(action, cfg)
    gx, gy = arena.goal
    before = math.hypot(gx - pose.x, gy - pose.y)
    new = integrate(pose, v, w, dt)
    after = math.hypot(gx - new.x, gy - new.y)
    d_min = min_obstacle_distance(new, arena)
    cost, status = classify(d_min, after < cfg.goal_radius, step_index, cfg)
    if status == "goal":
        reward = cfg.reward_goal
    elif status == "collision":
        reward = cfg.reward_collision
    else:
        reward = cfg.progress_gain * (before - after) - cfg.step_penalty
    return StepOutcome(new, observe(new, arena, (v, w), cfg), reward, cost, status, d_min, clipped)


class NavEnv:
    """Stateful single-driver wrapper around :func:`step`."""

    def __init__(self, cfg: ScenarioConfig | None = None):
        self.cfg = cfg or ScenarioConfig()
        self.arena = None
        self.pose = None
        self.t = 0
        self.clip_events = 0

    def reset(self, seed: int, start=None, goal=None):
        self.arena, self.pose = generate_arena(seed, self.cfg, start, goal)
        self.t = 0
        obs = observe(self.pose, self.arena, (0.0, 0.0), self.cfg)
        return self.arena, self.pose, obs

    def reset_eval(self, index: int):
        sx, sy, sth, gx, gy = self.cfg.eval_pairs[index]
        return self.reset(self.cfg.eval_map_seed + index, (sx, sy, sth), (gx, gy))

    def step(self, action) -> StepOutcome:
        self.t += 1
        out = step(self.pose, action, self.arena, self.cfg, self.t)
        self.clip_events += out.clipped
        self.pose = out.pose
        return out
