"""Deterministic discrete-time microscopic traffic world.

A world holds one emergency vehicle (EMV), connected vehicles (CVs) driven by
an external policy, and human-driven vehicles (HVs) following a Krauss-style
car-following rule.  ``world_step`` is a pure function of (world, actions):
the successor state carries its own advanced random stream so replays from a
retained state are bit-identical.
"""

from __future__ import annotations

import copy
import csv
import enum
import io
from dataclasses import dataclass, field, replace

import numpy as np

# Krauss parameters (SUMO defaults; the model is named but not specified upstream).
KRAUSS_TAU = 1.0        # driver reaction time, s
KRAUSS_B = 4.5          # comfortable deceleration, m/s^2
KRAUSS_ACCEL = 2.6      # HV acceleration, m/s^2
KRAUSS_EPS = 0.5        # driver imperfection magnitude, m/s
EMV_ACCEL = 3.0         # EMV acceleration, m/s^2
MIN_GAP = 2.0           # safety gap for placement and lane changes, m
A_MAX = 4.0             # CV acceleration bound, m/s^2
EMV_LENGTH = 6.0


class SimError(ValueError):
    pass


class VehicleKind(enum.Enum):
    CV = "CV"
    HV = "HV"
    EMV = "EMV"


@dataclass(frozen=True)
class VehicleState:
    id: int
    kind: VehicleKind
    x: float           # front-bumper longitudinal position, m
    lane: int          # 0 = leftmost
    v: float           # m/s
    a: float           # last applied acceleration, m/s^2
    length: float      # m


@dataclass(frozen=True)
class RoadGeometry:
    length: float = 200.0
    lane_count: int = 2
    lane_width: float = 3.5
    speed_limit: float = 13.89
    dt: float = 0.5

    def __post_init__(self):
        for name in ("length", "lane_count", "lane_width", "speed_limit", "dt"):
            if getattr(self, name) <= 0:
                raise SimError(f"RoadGeometry.{name} must be strictly positive")


@dataclass(frozen=True)
class EpisodeConfig:
    n_vehicles: int
    cv_penetration: float
    seed: int
    geometry: RoadGeometry = field(default_factory=RoadGeometry)
    max_steps: int = 120
    emv_target_speed: float = 12.0
    collision_terminates: bool = True

    def __post_init__(self):
        if self.n_vehicles < 2:
            raise SimError("n_vehicles must be >= 2")
        if not 0.0 <= self.cv_penetration <= 1.0:
            raise SimError("cv_penetration must lie in [0, 1]")
        if self.max_steps < 1:
            raise SimError("max_steps must be >= 1")


@dataclass(frozen=True)
class CollisionEvent:
    step: int
    follower_id: int
    leader_id: int
    lane: int


@dataclass(frozen=True)
class CvAction:
    accel: float          # m/s^2, clamped to [-A_MAX, A_MAX]
    lane_offset: float    # clamped to [-1, 1]; negative requests a left change

    def clamped(self) -> "CvAction":
        return CvAction(
            accel=float(np.clip(self.accel, -A_MAX, A_MAX)),
            lane_offset=float(np.clip(self.lane_offset, -1.0, 1.0)),
        )


@dataclass
class WorldState:
    vehicles: list[VehicleState]
    t: int
    clock: float
    events: tuple[CollisionEvent, ...]
    rng: np.random.Generator
    geometry: RoadGeometry
    emv_target_speed: float
    blocked_lane_changes: int = 0

    def vehicle(self, vid: int) -> VehicleState:
        for veh in self.vehicles:
            if veh.id == vid:
                return veh
        raise SimError(f"unknown vehicle id {vid}")

    @property
    def emv(self) -> VehicleState:
        for veh in self.vehicles:
            if veh.kind is VehicleKind.EMV:
                return veh
        raise SimError("world has no EMV")

    def cv_ids(self) -> list[int]:
        return [v.id for v in self.vehicles if v.kind is VehicleKind.CV]


def _truncated_normal(rng: np.random.Generator, mean: float, std: float,
                      lo: float, hi: float) -> float:
    while True:
        x = rng.normal(mean, std)
        if lo <= x <= hi:
            return float(x)


def _lane_overlaps(vehicles: list[VehicleState]) -> bool:
    by_lane: dict[int, list[VehicleState]] = {}
    for veh in vehicles:
        by_lane.setdefault(veh.lane, []).append(veh)
    for members in by_lane.values():
        members.sort(key=lambda v: v.x)
        for follower, leader in zip(members, members[1:]):
            if leader.x - leader.length - follower.x < MIN_GAP:
                return True
    return False


def init_episode(config: EpisodeConfig) -> WorldState:
    """Sample the initial world: evenly spaced background traffic plus the EMV.

    Non-EMV vehicles sit at L/(count+1) intervals with Gaussian position noise
    (sigma 5 m, redrawn while any same-lane gap is below 2 m); speeds and
    lengths come from N(4.5, 1.0) truncated to [2, 7] m/s and [2, 8] m.  The
    EMV starts upstream at x = -50 m, v = 8 m/s, lane 0.
    """
    rng = np.random.default_rng(config.seed)
    geom = config.geometry
    count = config.n_vehicles - 1
    spacing = geom.length / (count + 1)

    lanes = [int(rng.integers(0, geom.lane_count)) for _ in range(count)]
    speeds = [_truncated_normal(rng, 4.5, 1.0, 2.0, 7.0) for _ in range(count)]
    lengths = [_truncated_normal(rng, 4.5, 1.0, 2.0, 8.0) for _ in range(count)]

    n_cv = int(round(config.cv_penetration * count))
    kinds = [VehicleKind.CV] * n_cv + [VehicleKind.HV] * (count - n_cv)
    kinds = list(rng.permutation(np.array([k.value for k in kinds])))
    kinds = [VehicleKind(k) for k in kinds]

    vehicles: list[VehicleState] | None = None
    for _ in range(100):
        candidate = [
            VehicleState(
                id=i + 1,
                kind=kinds[i],
                x=float((i + 1) * spacing + rng.normal(0.0, 5.0)),
                lane=lanes[i],
                v=speeds[i],
                a=0.0,
                length=lengths[i],
            )
            for i in range(count)
        ]
        if not _lane_overlaps(candidate):
            vehicles = candidate
            break
    if vehicles is None:
        raise SimError(
            "could not place vehicles without overlap after 100 attempts "
            "(density too high for the road geometry)")

    emv = VehicleState(id=0, kind=VehicleKind.EMV, x=-50.0, lane=0, v=8.0,
                       a=0.0, length=EMV_LENGTH)
    return WorldState(
        vehicles=[emv] + vehicles,
        t=0,
        clock=0.0,
        events=(),
        rng=rng,
        geometry=geom,
        emv_target_speed=config.emv_target_speed,
    )


def _leader_of(vehicle: VehicleState, vehicles: list[VehicleState],
               lane: int | None = None) -> VehicleState | None:
    """Nearest vehicle ahead of ``vehicle`` in the given lane (default: own)."""
    lane = vehicle.lane if lane is None else lane
    leader = None
    for other in vehicles:
        if other.id == vehicle.id or other.lane != lane:
            continue
        if other.x > vehicle.x and (leader is None or other.x < leader.x):
            leader = other
    return leader


def krauss_safe_speed(follower: VehicleState, leader: VehicleState | None) -> float:
    if leader is None:
        return float("inf")
    gap = leader.x - leader.length - follower.x
    v_l = leader.v
    v_safe = v_l + (gap - v_l * KRAUSS_TAU) / (
        (follower.v + v_l) / (2.0 * KRAUSS_B) + KRAUSS_TAU)
    return v_safe


def krauss_hv_speed(follower: VehicleState, leader: VehicleState | None,
                    geometry: RoadGeometry, xi: float) -> float:
    """Krauss next speed: accelerate, cap by limit and safe speed, dawdle by eps*xi."""
    v_safe = krauss_safe_speed(follower, leader)
    v_det = min(follower.v + KRAUSS_ACCEL * geometry.dt, geometry.speed_limit, v_safe)
    return max(0.0, v_det - KRAUSS_EPS * xi)


def step_emv(emv: VehicleState, world: WorldState) -> float:
    """EMV next speed: stays in lane 0, accelerates toward its target speed,
    bounded by the Krauss safe speed with zero dawdling."""
    leader = _leader_of(emv, world.vehicles)
    v_safe = krauss_safe_speed(emv, leader)
    return max(0.0, min(emv.v + EMV_ACCEL * world.geometry.dt,
                        world.emv_target_speed, v_safe))


def _cv_next_speed(vehicle: VehicleState, action: CvAction,
                   geometry: RoadGeometry) -> float:
    act = action.clamped()
    return max(0.0, min(vehicle.v + act.accel * geometry.dt, geometry.speed_limit))


def _lane_change_target(vehicle: VehicleState, action: CvAction,
                        lane_count: int) -> int | None:
    offset = action.clamped().lane_offset
    if abs(offset) <= 0.5:
        return None
    target = vehicle.lane + (1 if offset > 0 else -1)
    if not 0 <= target < lane_count:
        return None
    return target


def _lane_change_safe(vehicle: VehicleState, target: int,
                      vehicles: list[VehicleState]) -> bool:
    for other in vehicles:
        if other.id == vehicle.id or other.lane != target:
            continue
        if other.x > vehicle.x:
            if other.x - other.length - vehicle.x < MIN_GAP:
                return False
        else:
            if vehicle.x - vehicle.length - other.x < MIN_GAP:
                return False
    return True


def apply_cv_action(vehicle: VehicleState, action: CvAction,
                    world: WorldState) -> VehicleState:
    """Apply a CV action against the current world: clamp and integrate the
    acceleration, and execute the requested lane change if it is feasible.
    Infeasible lane changes are silently dropped."""
    if vehicle.kind is not VehicleKind.CV:
        raise SimError("apply_cv_action requires a CV")
    geom = world.geometry
    v_next = _cv_next_speed(vehicle, action, geom)
    lane = vehicle.lane
    target = _lane_change_target(vehicle, action, geom.lane_count)
    if target is not None and _lane_change_safe(vehicle, target, world.vehicles):
        lane = target
    accel = (v_next - vehicle.v) / geom.dt
    return replace(vehicle, v=v_next, lane=lane, a=accel)


def detect_collisions(world: WorldState) -> list[CollisionEvent]:
    """A follower collides when the rear-to-front gap to its nearest same-lane
    leader is negative; each (follower, leader) pair is reported once."""
    events = []
    by_lane: dict[int, list[VehicleState]] = {}
    for veh in world.vehicles:
        by_lane.setdefault(veh.lane, []).append(veh)
    for lane, members in sorted(by_lane.items()):
        members.sort(key=lambda v: (v.x, v.id))
        for follower, leader in zip(members, members[1:]):
            if leader.x - leader.length - follower.x < 0.0:
                events.append(CollisionEvent(step=world.t, follower_id=follower.id,
                                             leader_id=leader.id, lane=lane))
    return events


def world_step(world: WorldState,
               actions: dict[int, CvAction]) -> tuple[WorldState, list[CollisionEvent]]:
    """Advance one step: speeds from the frozen state, lane changes in id
    order, position integration, collision detection, clock increment.

    CVs missing from ``actions`` fall back to Krauss car-following (used by
    the no-control baseline); non-CV ids in ``actions`` are rejected.
    """
    cv_ids = set(world.cv_ids())
    unknown = set(actions) - cv_ids
    if unknown:
        raise SimError(f"actions contain non-CV ids: {sorted(unknown)}")

    geom = world.geometry
    rng = copy.deepcopy(world.rng)
    frozen = list(world.vehicles)

    # Phase 1: next speeds from the frozen state.
    next_speed: dict[int, float] = {}
    for veh in sorted(frozen, key=lambda v: v.id):
        if veh.kind is VehicleKind.EMV:
            next_speed[veh.id] = step_emv(veh, world)
        elif veh.kind is VehicleKind.CV and veh.id in actions:
            next_speed[veh.id] = _cv_next_speed(veh, actions[veh.id], geom)
        else:
            xi = float(rng.uniform(0.0, 1.0))
            leader = _leader_of(veh, frozen)
            next_speed[veh.id] = krauss_hv_speed(veh, leader, geom, xi)

    # Phase 2: CV lane changes, ascending id, each seeing earlier changes.
    lanes = {veh.id: veh.lane for veh in frozen}
    blocked = world.blocked_lane_changes
    current = {veh.id: veh for veh in frozen}
    for vid in sorted(actions):
        veh = current[vid]
        target = _lane_change_target(veh, actions[vid], geom.lane_count)
        if target is None:
            continue
        if _lane_change_safe(veh, target, list(current.values())):
            lanes[vid] = target
            current[vid] = replace(veh, lane=target)
        else:
            blocked += 1

    # Phase 3: integrate positions.
    updated = []
    for veh in frozen:
        v_next = next_speed[veh.id]
        updated.append(replace(
            veh,
            x=veh.x + v_next * geom.dt,
            lane=lanes[veh.id],
            v=v_next,
            a=(v_next - veh.v) / geom.dt,
        ))

    successor = WorldState(
        vehicles=updated,
        t=world.t + 1,
        clock=(world.t + 1) * geom.dt,
        events=world.events,
        rng=rng,
        geometry=geom,
        emv_target_speed=world.emv_target_speed,
        blocked_lane_changes=blocked,
    )
    step_events = detect_collisions(successor)
    successor.events = world.events + tuple(step_events)
    return successor, step_events


def episode_done(world: WorldState, config: EpisodeConfig) -> tuple[bool, str]:
    if world.emv.x >= world.geometry.length:
        return True, "success"
    if config.collision_terminates and world.events:
        return True, "collision"
    if world.t >= config.max_steps:
        return True, "timeout"
    return False, ""


# ---------------------------------------------------------------------------
# Trajectory export
# ---------------------------------------------------------------------------

TRAJECTORY_COLUMNS = ["step", "clock", "id", "kind", "x", "lane", "v", "a"]
REWARD_COLUMNS = ["r1", "r2", "r3", "r4", "r5", "total"]


def export_trajectory_csv(states: list[WorldState], out,
                          rewards: list | None = None) -> None:
    """Write one row per (step, vehicle).  Floats use 6 decimal places.

    ``rewards`` optionally supplies one reward breakdown per stepped state
    (states[1:]); its components are appended to every row of that step.
    """
    close = False
    if isinstance(out, (str, bytes)):
        out = open(out, "w", newline="")
        close = True
    try:
        writer = csv.writer(out)
        header = list(TRAJECTORY_COLUMNS)
        if rewards is not None:
            header += REWARD_COLUMNS
        writer.writerow(header)
        for idx, world in enumerate(states):
            extra = []
            if rewards is not None:
                if idx == 0:
                    extra = ["0.000000"] * len(REWARD_COLUMNS)
                else:
                    br = rewards[idx - 1]
                    extra = [f"{val:.6f}" for val in
                             (br.r1, br.r2, br.r3, br.r4, br.r5, br.total)]
            for veh in sorted(world.vehicles, key=lambda v: v.id):
                writer.writerow([
                    world.t, f"{world.clock:.6f}", veh.id, veh.kind.value,
                    f"{veh.x:.6f}", veh.lane, f"{veh.v:.6f}", f"{veh.a:.6f}",
                ] + extra)
    finally:
        if close:
            out.close()


def trajectory_csv_string(states: list[WorldState], rewards=None) -> str:
    buf = io.StringIO()
    export_trajectory_csv(states, buf, rewards)
    return buf.getvalue()
