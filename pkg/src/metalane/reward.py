"""Comfort / efficiency / safety reward and the one-step safety shield."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

from .config import RewardConfig, RoadConfig, ScenarioConfig
from .sim import (
    ABORT, CHANGE, KEEP, LC_ABORTING, LC_CHANGING, N_ACTIONS, SUCCESS,
    EnvState, Neighbors, Simulator, StepEvents, decode_action,
)

# Which neighbour slots enter the near-collision term for each lateral action.
TABLE_ROWS: dict[int, tuple[str, ...]] = {
    KEEP: ("C1",),
    CHANGE: ("C1", "C3"),
    ABORT: ("C0", "C2"),
}

RISK_SLOTS = ("C0", "C1", "C2", "C3")
CLEAR_GAP = 1.0e6


def near_collision_f(distance: float) -> float:
    """F(C_e, C_i) = -1 / (|dy| + 0.1) for a longitudinal separation ``distance``."""
    return -1.0 / (abs(distance) + 0.1)


def near_collision_penalty(
    lateral_action: int,
    distances: Mapping[str, float | None],
    d_near: float = 10.0,
) -> float:
    """Action-conditioned near-collision penalty, in [-10, 0].

    ``distances`` maps C0..C3 to the ego/neighbour longitudinal separation
    (None for an empty slot).  Slots at or beyond ``d_near`` contribute 0.
    """
    value = 0.0
    for slot in TABLE_ROWS[lateral_action]:
        d = distances.get(slot)
        if d is None or abs(d) >= d_near:
            continue
        value = min(value, near_collision_f(d))
    return value


def table_row(lateral_action: int, lc_phase: str) -> int:
    """Row of the near-collision table used for a transition.

    The manoeuvre phase wins over the raw action: a car that is mid-change
    (or mid-abort) is scored on that row even if it held position this step.
    An abort with nothing to abort scores as lane keeping.
    """
    if lc_phase == LC_CHANGING:
        return CHANGE
    if lc_phase == LC_ABORTING:
        return ABORT
    return KEEP if lateral_action == ABORT else lateral_action


@dataclass(frozen=True)
class RewardBreakdown:
    comfort: float
    efficiency: float
    safety: float
    total: float

    @classmethod
    def combine(cls, comfort: float, efficiency: float, safety: float, cfg: RewardConfig) -> "RewardBreakdown":
        total = cfg.w_comfort * comfort + cfg.w_efficiency * efficiency + cfg.w_safety * safety
        return cls(comfort, efficiency, safety, total)


def compute_reward(
    prev: EnvState,
    action: int,
    nxt: EnvState,
    events: StepEvents,
    cfg: RewardConfig,
    road: RoadConfig,
) -> RewardBreakdown:
    """Reward for one transition.

    comfort    -(|longitudinal jerk| + |lateral jerk|) / jerk_max, clipped to [-1, 0]
    efficiency -|lat - exit centreline| / road width - c_time + speed / v_max,
               plus ``success_bonus`` on the transition that completes the task
    safety     near-collision penalty / 10, minus ``p_collision`` on a crash
    """
    ego = nxt.ego
    comfort = -(abs(events.long_jerk) + abs(events.lat_jerk)) / cfg.jerk_max
    comfort = min(0.0, max(-1.0, comfort))

    lateral_err = abs(ego.lat_pos - road.centerline(road.exit_lane)) / road.width
    efficiency = -min(1.0, lateral_err) - cfg.c_time + min(1.0, ego.speed / road.v_max)
    if nxt.terminal_flag == SUCCESS:
        efficiency += cfg.success_bonus

    row = table_row(events.lateral_action, ego.lc_phase)
    safety = near_collision_penalty(row, events.near, cfg.d_near) / 10.0
    if events.collision:
        safety -= cfg.p_collision
    return RewardBreakdown.combine(comfort, efficiency, safety, cfg)


@dataclass(frozen=True)
class RiskLabel:
    catastrophic: bool = False
    risk_vehicle: str = "none"


@dataclass(frozen=True)
class Lookahead:
    min_gap: float
    catastrophic: bool
    risk_vehicle: str


def lookahead(sim: Simulator, state: EnvState, action: int, nb: Neighbors, d_crit: float) -> Lookahead:
    """Simulate the ego car one step under ``action`` against C0..C3.

    Neighbours keep their current acceleration.  A neighbour only counts
    when the two bodies overlap laterally; the gap is then the bumper-to-
    bumper longitudinal distance (negative when the bodies overlap).  The
    action is catastrophic if any such gap falls below ``d_crit``.
    """
    road = sim.road
    dt = road.dt
    ego, _ = sim.ego_kinematics(state, nb, action)
    tr = state.traffic
    min_gap = CLEAR_GAP
    worst_slot = "none"
    worst_violation = CLEAR_GAP
    for slot in RISK_SLOTS:
        idx = nb[slot]
        if idx is None:
            continue
        v = float(tr.speed[idx])
        v_new = max(0.0, v + float(tr.accel[idx]) * dt)
        pos = float(tr.pos[idx]) + 0.5 * (v + v_new) * dt
        lat_gap = abs(float(tr.lat[idx]) - ego.lat_pos) - road.vehicle_width
        if lat_gap >= 0.0:
            continue
        lon_gap = abs(pos - ego.long_pos) - road.vehicle_length
        if lon_gap < min_gap:
            min_gap = lon_gap
        if lon_gap < d_crit and lon_gap < worst_violation:
            worst_violation = lon_gap
            worst_slot = slot
    return Lookahead(min_gap, worst_slot != "none", worst_slot)


def shield(
    sim: Simulator,
    state: EnvState,
    proposed: int,
    d_crit: float = 2.0,
    nb: Neighbors | None = None,
) -> tuple[int, RiskLabel]:
    """Replace a catastrophic proposal by the safest alternative.

    Safe proposals pass through untouched.  Otherwise the safe action with
    the largest lookahead gap is chosen, ties going to lateral keep and then
    to the lower index.  If nothing is safe the proposal is returned, still
    labelled catastrophic.
    """
    nb = nb if nb is not None else sim.surrounding(state)
    own = lookahead(sim, state, proposed, nb, d_crit)
    if not own.catastrophic:
        return proposed, RiskLabel()
    label = RiskLabel(True, own.risk_vehicle)
    best, best_key = None, None
    for a in range(N_ACTIONS):
        res = own if a == proposed else lookahead(sim, state, a, nb, d_crit)
        if res.catastrophic:
            continue
        lateral, _ = decode_action(a)
        key = (-res.min_gap, lateral != KEEP, a)
        if best_key is None or key < best_key:
            best, best_key = a, key
    if best is None:
        return proposed, label
    return best, label


def neighbor_distances(sim: Simulator, state: EnvState, nb: Neighbors | None = None) -> dict[str, float | None]:
    nb = nb if nb is not None else sim.surrounding(state)
    ego = state.ego
    out: dict[str, float | None] = {}
    for slot in RISK_SLOTS:
        idx = nb[slot]
        out[slot] = None if idx is None else abs(ego.long_pos - float(state.traffic.pos[idx]))
    return out


def reward_for(scenario: ScenarioConfig, prev: EnvState, action: int, nxt: EnvState, events: StepEvents) -> RewardBreakdown:
    return compute_reward(prev, action, nxt, events, scenario.reward, scenario.road)
