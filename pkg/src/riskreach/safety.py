"""Per-state swept-motion safety check over a reachable action box."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from . import kernels
from .navsim import ArenaMap, RobotPose
from .reach import ReachableActionBox


@dataclass(frozen=True)
class SafetyVerdict:
    index: int
    safe: bool
    min_clearance: float
    failing_action: tuple | None = None
    verified: bool = True


def extremal_actions(box: ReachableActionBox):
    """Cartesian product of {lo, mid, hi} per action dimension (9 for 2-D)."""
    levels = [(lo, 0.5 * (lo + hi), hi) for lo, hi in zip(box.lo, box.hi)]
    out = []
    for combo in itertools.product(*levels):
        out.append(tuple(float(min(max(c, lo), hi)) for c, lo, hi in zip(combo, box.lo, box.hi)))
    return out


def swept_trajectory(pose: RobotPose, action, dt: float, k: int) -> np.ndarray:
    """Poses ``(k, 3)`` after each of ``k`` Euler sub-steps of length ``dt / k``."""
    if k < 1:
        raise ValueError("need at least one sub-step")
    return kernels.unicycle_rollout(pose.x, pose.y, pose.theta, float(action[0]), float(action[1]), dt, k)


def verify_state(pose: RobotPose, box: ReachableActionBox | None, arena: ArenaMap, dt: float = 0.1,
                 k: int = 10, threshold: float = 0.4, index: int = 0) -> SafetyVerdict:
    """Safe iff every sampled action keeps clearance strictly above ``threshold``
    at every sub-step. ``box=None`` marks an upstream reachability failure."""
    if box is None:
        return SafetyVerdict(index, False, float("nan"), None, verified=False)
    worst = np.inf
    failing = None
    for action in extremal_actions(box):
        d = kernels.sweep_min_clearance(pose.x, pose.y, pose.theta, action[0], action[1], dt, k,
                                        arena.half_extent, arena.obstacles)
        if d < worst:
            worst = d
            if d <= threshold:
                failing = action
    return SafetyVerdict(index, bool(worst > threshold), float(worst), failing)


def safety_rate(verdicts) -> float:
    """Fraction of verdicts that are verified and safe."""
    verdicts = list(verdicts)
    if not verdicts:
        raise ValueError("no verdicts to aggregate")
    return sum(1 for v in verdicts if v.safe and v.verified) / len(verdicts)
