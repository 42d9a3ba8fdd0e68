"""Five-component shared team reward.

r1 rewards EMV speed, r2 rewards a clear corridor zone ahead of the EMV,
r3 penalizes collisions, r4 rewards background CV flow, r5 penalizes abrupt
commanded accelerations.  The step reward is the weighted sum.
"""

from __future__ import annotations

from dataclasses import dataclass

from .sim import CollisionEvent, CvAction, VehicleKind, WorldState

DEFAULT_WEIGHTS = (5.0, 2.0, 1.0, 0.5, 0.2)


@dataclass(frozen=True)
class RewardConfig:
    weights: tuple[float, float, float, float, float] = DEFAULT_WEIGHTS
    v_max_emv: float = 12.0
    n_max: int = 5
    corridor_lane: int = 0
    corridor_range: float = 50.0
    v_normal: float = 4.5
    collision_penalty: float = -10.0
    smoothness_coeff: float = 0.1

    def __post_init__(self):
        if any(w < 0 for w in self.weights):
            raise ValueError("reward weights must be non-negative")


@dataclass(frozen=True)
class RewardBreakdown:
    r1: float
    r2: float
    r3: float
    r4: float
    r5: float
    total: float
    n_block: int


def count_blocking(world: WorldState, config: RewardConfig) -> int:
    """Non-EMV vehicles in the corridor lane strictly ahead of the EMV within
    the corridor range (front-bumper positions)."""
    emv = world.emv
    return sum(
        1 for v in world.vehicles
        if v.kind is not VehicleKind.EMV
        and v.lane == config.corridor_lane
        and 0.0 < v.x - emv.x <= config.corridor_range
    )


def compute_reward(world: WorldState, actions: dict[int, CvAction],
                   events: list[CollisionEvent],
                   config: RewardConfig = RewardConfig()) -> RewardBreakdown:
    """Evaluate the five components on the post-step world.

    ``actions`` are the commanded CV actions of this step (r5 averages their
    magnitudes); an empty map gives r5 = 0.  The collision penalty fires once
    per step with at least one collision.
    """
    emv = world.emv  # raises SimError when the EMV is missing
    r1 = emv.v / config.v_max_emv
    n_block = count_blocking(world, config)
    r2 = 1.0 - n_block / config.n_max
    r3 = config.collision_penalty if events else 0.0

    cv_speeds = [v.v for v in world.vehicles if v.kind is VehicleKind.CV]
    r4 = (sum(cv_speeds) / len(cv_speeds)) / config.v_normal if cv_speeds else 0.0

    if actions:
        mean_abs_accel = sum(abs(a.clamped().accel) for a in actions.values()) / len(actions)
        r5 = -config.smoothness_coeff * mean_abs_accel
    else:
        r5 = 0.0

    w = config.weights
    total = w[0] * r1 + w[1] * r2 + w[2] * r3 + w[3] * r4 + w[4] * r5
    return RewardBreakdown(r1=r1, r2=r2, r3=r3, r4=r4, r5=r5, total=total,
                           n_block=n_block)
