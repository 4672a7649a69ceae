"""Three-lane highway simulator with IDM traffic and a lane-changing ego car.

Surrounding vehicles never change lanes; they follow the nearest vehicle ahead
in their lane (or the ego car once it reaches into their lane) using the
Intelligent Driver Model.  The ego car picks a lateral manoeuvre (keep,
change, abort) and which leader its own IDM controller follows.

Positions are vehicle centres.  ``lat_pos`` is measured from the centreline
of lane 0, so lane ``k`` sits at ``k * lane_width``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from typing import IO, Iterator

import numpy as np

from .config import IdmParams, RoadConfig, ScenarioConfig, TrafficTask

KEEP, CHANGE, ABORT = 0, 1, 2
FOLLOW_CURRENT, FOLLOW_TARGET = 0, 1
N_ACTIONS = 6
OBS_DIM = 21

LC_NONE, LC_CHANGING, LC_ABORTING = "none", "changing", "aborting"
RUNNING, SUCCESS, COLLISION, EXIT_MISSED = "running", "success", "collision", "exit_missed"

# gap used when a vehicle has nobody ahead of it
NO_LEADER_GAP = 1.0e9
EGO_ID = 0


class SimulationError(RuntimeError):
    pass


def decode_action(index: int) -> tuple[int, int]:
    """Split a joint action index into (lateral, longitudinal)."""
    index = int(index)
    if not 0 <= index < N_ACTIONS:
        raise ValueError(f"action index {index} outside [0, {N_ACTIONS - 1}]")
    return index // 2, index % 2


def encode_action(lateral: int, longitudinal: int) -> int:
    return 2 * lateral + longitudinal


def idm_accel(v: float, v_lead: float, gap: float, p: IdmParams) -> float:
    """IDM acceleration, clamped to ``[-2 b, a_max]``.

    The dynamic part of the desired gap is floored at zero (Treiber's form),
    so a faster leader never shrinks the desired gap below ``s0``.
    """
    if not (math.isfinite(v) and math.isfinite(v_lead) and math.isfinite(gap)):
        raise SimulationError("invalid kinematics")
    if gap <= 0.0:
        gap = 1e-6
    dv = v - v_lead
    s_star = p.min_gap + max(0.0, v * p.time_headway + v * dv / (2.0 * math.sqrt(p.max_accel * p.comfort_decel)))
    a = p.max_accel * (1.0 - (v / p.desired_speed) ** p.accel_exponent - (s_star / gap) ** 2)
    return min(max(a, -2.0 * p.comfort_decel), p.max_accel)


def idm_accel_array(v: np.ndarray, v_lead: np.ndarray, gap: np.ndarray, p: IdmParams) -> np.ndarray:
    gap = np.maximum(gap, 1e-6)
    dyn = v * p.time_headway + v * (v - v_lead) / (2.0 * math.sqrt(p.max_accel * p.comfort_decel))
    s_star = p.min_gap + np.maximum(dyn, 0.0)
    a = p.max_accel * (1.0 - (v / p.desired_speed) ** p.accel_exponent - (s_star / gap) ** 2)
    return np.minimum(np.maximum(a, -2.0 * p.comfort_decel), p.max_accel)


@dataclass
class VehicleState:
    id: int
    lane: int
    long_pos: float
    lat_pos: float
    speed: float
    accel: float = 0.0


@dataclass
class EgoState(VehicleState):
    """Ego kinematics plus lane-change bookkeeping.

    During a manoeuvre ``lane`` is the origin lane and ``target_lane`` the
    adjacent lane being entered.  Progress is stored as integer ticks of
    ``dt`` so that change-then-abort returns exactly to the centreline.
    """

    target_lane: int = 0
    lc_phase: str = LC_NONE
    lc_ticks: int = 0
    lc_total_ticks: int = 30
    prev_accel: float = 0.0
    lat_speed: float = 0.0
    prev_lat_speed: float = 0.0
    lat_accel: float = 0.0

    @property
    def lc_progress(self) -> float:
        return self.lc_ticks / self.lc_total_ticks


@dataclass
class Traffic:
    """Struct-of-arrays storage for the surrounding vehicles."""

    ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    lane: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    pos: np.ndarray = field(default_factory=lambda: np.zeros(0))
    lat: np.ndarray = field(default_factory=lambda: np.zeros(0))
    speed: np.ndarray = field(default_factory=lambda: np.zeros(0))
    accel: np.ndarray = field(default_factory=lambda: np.zeros(0))
    next_id: int = 1

    def __len__(self) -> int:
        return len(self.ids)

    def copy(self) -> "Traffic":
        return Traffic(
            self.ids.copy(), self.lane.copy(), self.pos.copy(), self.lat.copy(),
            self.speed.copy(), self.accel.copy(), self.next_id,
        )

    def select(self, mask: np.ndarray) -> "Traffic":
        return Traffic(
            self.ids[mask], self.lane[mask], self.pos[mask], self.lat[mask],
            self.speed[mask], self.accel[mask], self.next_id,
        )

    def append(self, lane: int, pos: float, lat: float, speed: float) -> "Traffic":
        return Traffic(
            np.append(self.ids, self.next_id),
            np.append(self.lane, lane),
            np.append(self.pos, pos),
            np.append(self.lat, lat),
            np.append(self.speed, speed),
            np.append(self.accel, 0.0),
            self.next_id + 1,
        )

    def vehicle(self, i: int) -> VehicleState:
        return VehicleState(
            int(self.ids[i]), int(self.lane[i]), float(self.pos[i]),
            float(self.lat[i]), float(self.speed[i]), float(self.accel[i]),
        )

    def vehicles(self) -> list[VehicleState]:
        return [self.vehicle(i) for i in range(len(self))]


@dataclass
class EnvState:
    ego: EgoState | None
    traffic: Traffic
    sim_time: float = 0.0
    step_count: int = 0
    terminal_flag: str = RUNNING

    @property
    def others(self) -> list[VehicleState]:
        return self.traffic.vehicles()

    def copy(self) -> "EnvState":
        return EnvState(
            replace(self.ego) if self.ego is not None else None,
            self.traffic.copy(), self.sim_time, self.step_count, self.terminal_flag,
        )


SLOTS = ("C0", "C1", "C2", "C3", "far_leader", "far_follower")


@dataclass(frozen=True)
class Neighbors:
    """Indices into ``EnvState.traffic`` for each neighbour slot, or None.

    C0/C2 are the current-lane leader/follower, C1/C3 the target-lane
    leader/follower and the far pair sits in the lane on the other side.
    """

    C0: int | None = None
    C1: int | None = None
    C2: int | None = None
    C3: int | None = None
    far_leader: int | None = None
    far_follower: int | None = None

    def __getitem__(self, slot: str) -> int | None:
        return getattr(self, slot)

    def items(self) -> Iterator[tuple[str, int | None]]:
        for s in SLOTS:
            yield s, getattr(self, s)


@dataclass
class StepEvents:
    collision: bool = False
    collided_with: int | None = None
    lateral_action: int = KEEP
    longitudinal_action: int = FOLLOW_CURRENT
    lc_completed: bool = False
    long_jerk: float = 0.0
    lat_jerk: float = 0.0
    # |long_pos(ego) - long_pos(Ci)| after the step, None when the slot is empty
    near: dict[str, float | None] = field(default_factory=dict)
    spawned: int = 0


class Simulator:
    """Stateless stepping rules bound to one scenario configuration."""

    def __init__(self, scenario: ScenarioConfig | None = None):
        self.scenario = scenario or ScenarioConfig()
        self.road: RoadConfig = self.scenario.road
        self.idm: IdmParams = self.scenario.idm
        road = self.road
        ticks = road.lane_change_time / road.dt
        if abs(ticks - round(ticks)) > 1e-9 or round(ticks) < 1:
            raise ValueError("lane_change_time must be a positive whole multiple of dt")
        if road.warmup_dt > 1.0:
            raise ValueError("warmup_dt must not exceed one second")
        steps_per_second = 1.0 / road.dt
        if abs(steps_per_second - round(steps_per_second)) > 1e-9:
            raise ValueError("dt must divide one second")
        self.lc_ticks_total = int(round(ticks))
        self.steps_per_second = int(round(steps_per_second))
        self.direction = int(np.sign(road.exit_lane - road.ego_lane))

    # ----------------------------------------------------------------- geometry
    def lat_of(self, lane: int, target: int, ticks: int) -> float:
        c0 = lane * self.road.lane_width
        c1 = target * self.road.lane_width
        return c0 + (ticks / self.lc_ticks_total) * (c1 - c0)

    def next_lane_toward_exit(self, lane: int) -> int:
        if lane == self.road.exit_lane:
            return lane
        return lane + (1 if self.road.exit_lane > lane else -1)

    def lanes_occupied(self, lat: float) -> list[int]:
        """Lanes whose band intersects a vehicle body centred at ``lat``."""
        road = self.road
        half_w = road.vehicle_width / 2.0
        out = []
        for k in range(road.n_lanes):
            c = k * road.lane_width
            if lat - half_w < c + road.lane_width / 2.0 and lat + half_w > c - road.lane_width / 2.0:
                out.append(k)
        return out

    # ----------------------------------------------------------------- episodes
    def empty_state(self) -> EnvState:
        return EnvState(ego=None, traffic=Traffic())

    def make_ego(self, speed: float, long_pos: float = 0.0, lane: int | None = None) -> EgoState:
        lane = self.road.ego_lane if lane is None else lane
        target = self.next_lane_toward_exit(lane)
        return EgoState(
            id=EGO_ID, lane=lane, long_pos=long_pos, lat_pos=lane * self.road.lane_width,
            speed=speed, accel=0.0, target_lane=target, lc_phase=LC_NONE, lc_ticks=0,
            lc_total_ticks=self.lc_ticks_total,
        )

    def reset(self, task: TrafficTask, rng: np.random.Generator) -> EnvState:
        """Warm up traffic for ``warmup_time`` seconds, then insert the ego car."""
        state = self.empty_state()
        for _ in range(int(round(self.road.warmup_time / self.road.warmup_dt))):
            state = self._advance_traffic(state, task, rng)
        road = self.road
        tr = state.traffic
        blocked = (tr.lane == road.ego_lane) & (tr.pos - road.vehicle_length < road.spawn_clearance)
        traffic = tr.select(~blocked)
        lo, hi = road.ego_speed_range
        ego = self.make_ego(float(rng.uniform(lo, hi)) * self.idm.desired_speed)
        return EnvState(ego=ego, traffic=traffic, sim_time=0.0, step_count=0)

    # ----------------------------------------------------------------- traffic
    def entry_free(self, state: EnvState, lane: int) -> bool:
        road = self.road
        tr = state.traffic
        m = tr.lane == lane
        if np.any(tr.pos[m] - road.vehicle_length < road.spawn_clearance):
            return False
        ego = state.ego
        if ego is not None and lane in self.lanes_occupied(ego.lat_pos):
            if ego.long_pos - road.vehicle_length < road.spawn_clearance:
                return False
        return True

    def spawn_traffic(self, rng: np.random.Generator, task: TrafficTask, state: EnvState) -> EnvState:
        """One Bernoulli(f) release attempt at the road entry.

        A released vehicle goes to a uniformly chosen lane with speed drawn
        from ``spawn_speed_range * v0``, capped at the speed of a leader
        closer than 100 m.  A blocked entry drops the release silently.
        """
        if rng.random() >= task.release_prob:
            return state
        road = self.road
        lane = int(rng.integers(road.n_lanes))
        lo, hi = road.spawn_speed_range
        speed = float(rng.uniform(lo, hi)) * self.idm.desired_speed
        if not self.entry_free(state, lane):
            return state
        tr = state.traffic
        m = (tr.lane == lane) & (tr.pos < 100.0)
        if np.any(m):
            speed = min(speed, float(tr.speed[m][np.argmin(tr.pos[m])]))
        new = EnvState(state.ego, tr.append(lane, 0.0, lane * road.lane_width, speed),
                       state.sim_time, state.step_count, state.terminal_flag)
        return new

    def _traffic_accels(self, state: EnvState) -> np.ndarray:
        road = self.road
        tr = state.traffic
        n = len(tr)
        if n == 0:
            return np.zeros(0)
        gap = np.full(n, NO_LEADER_GAP)
        v_lead = tr.speed.copy()
        order = np.lexsort((tr.pos, tr.lane))
        lanes_s = tr.lane[order]
        same = lanes_s[1:] == lanes_s[:-1]
        follower = order[:-1][same]
        leader = order[1:][same]
        gap[follower] = tr.pos[leader] - tr.pos[follower] - road.vehicle_length
        v_lead[follower] = tr.speed[leader]
        ego = state.ego
        if ego is not None:
            for k in self.lanes_occupied(ego.lat_pos):
                m = (tr.lane == k) & (tr.pos < ego.long_pos)
                if not np.any(m):
                    continue
                g = ego.long_pos - tr.pos - road.vehicle_length
                closer = m & (g < gap)
                gap[closer] = g[closer]
                v_lead[closer] = ego.speed
        return idm_accel_array(tr.speed, v_lead, gap, self.idm)

    def _integrate_traffic(self, tr: Traffic, accel: np.ndarray, dt: float | None = None) -> Traffic:
        dt = self.road.dt if dt is None else dt
        v_new = np.minimum(np.maximum(tr.speed + accel * dt, 0.0), self.road.v_max)
        out = tr.copy()
        out.pos = tr.pos + 0.5 * (tr.speed + v_new) * dt
        out.accel = (v_new - tr.speed) / dt
        out.speed = v_new
        return out

    def _advance_traffic(self, state: EnvState, task: TrafficTask, rng: np.random.Generator) -> EnvState:
        """Traffic-only warm-up step of ``warmup_dt`` seconds (no ego car)."""
        dt = self.road.warmup_dt
        acc = self._traffic_accels(state)
        tr = self._integrate_traffic(state.traffic, acc, dt)
        step_count = state.step_count + 1
        t_prev, t_now = state.sim_time, step_count * dt
        new = EnvState(None, tr, t_now, step_count, RUNNING)
        for _ in range(int(math.floor(t_now + 1e-9)) - int(math.floor(t_prev + 1e-9))):
            new = self.spawn_traffic(rng, task, new)
        keep = new.traffic.pos <= self.road.length + self.road.despawn_margin
        if not np.all(keep):
            new.traffic = new.traffic.select(keep)
        return new

    # ----------------------------------------------------------------- neighbours
    def surrounding(self, state: EnvState) -> Neighbors:
        """Nearest leader/follower per relevant lane; ties go to the lower id."""
        ego = state.ego
        if ego is None:
            return Neighbors()
        tr = state.traffic
        cur, tgt = ego.lane, ego.target_lane
        if tgt == cur:
            # on the exit lane: the far side is the adjacent lane away from the exit
            far = cur - self.direction if self.direction else -1
        else:
            far = 2 * cur - tgt
        ref = ego.long_pos
        # best[(lane, ahead)] = (distance, id, index)
        best: dict[tuple[int, bool], tuple[float, int, int]] = {}
        for i, (lane, pos, vid) in enumerate(zip(tr.lane.tolist(), tr.pos.tolist(), tr.ids.tolist())):
            if lane != cur and lane != tgt and lane != far:
                continue
            if pos > ref:
                key = (lane, True)
                d = pos - ref
            elif pos < ref:
                key = (lane, False)
                d = ref - pos
            else:
                continue
            cand = (d, vid, i)
            old = best.get(key)
            if old is None or cand < old:
                best[key] = cand

        def pick(lane: int, ahead: bool) -> int | None:
            hit = best.get((lane, ahead))
            return None if hit is None else hit[2]

        return Neighbors(pick(cur, True), pick(tgt, True), pick(cur, False), pick(tgt, False),
                         pick(far, True), pick(far, False))

    # ----------------------------------------------------------------- observation
    def observe(self, state: EnvState, neighbors: Neighbors | None = None) -> np.ndarray:
        """21-element observation, every entry in [-1, 1].

        Layout: ego speed / v_max, ego lat_pos / road width, remaining distance
        / road length, then (dpos / 100, dv / v_max, present) for the leader and
        follower of the target lane, the current lane and the far lane, in
        that order.  Empty slots read (+1 or -1, 0, 0).
        """
        ego = state.ego
        if ego is None:
            raise SimulationError("state has no ego vehicle")
        road = self.road
        nb = neighbors if neighbors is not None else self.surrounding(state)
        obs = np.empty(OBS_DIM)
        obs[0] = ego.speed / road.v_max
        obs[1] = ego.lat_pos / road.width
        obs[2] = (road.length - ego.long_pos) / road.length
        tr = state.traffic
        slots = ((nb.C1, 1.0), (nb.C3, -1.0), (nb.C0, 1.0), (nb.C2, -1.0),
                 (nb.far_leader, 1.0), (nb.far_follower, -1.0))
        for j, (idx, absent) in enumerate(slots):
            base = 3 + 3 * j
            if idx is None:
                obs[base] = absent
                obs[base + 1] = 0.0
                obs[base + 2] = 0.0
            else:
                obs[base] = (tr.pos[idx] - ego.long_pos) / 100.0
                obs[base + 1] = (tr.speed[idx] - ego.speed) / road.v_max
                obs[base + 2] = 1.0
        np.clip(obs, -1.0, 1.0, out=obs)
        return obs

    # ----------------------------------------------------------------- ego motion
    def lateral_update(self, ego: EgoState, lateral: int) -> tuple[int, int, str, int, bool]:
        """Return (lane, target_lane, phase, ticks, completed) after one lateral action."""
        lane, tgt, phase, ticks = ego.lane, ego.target_lane, ego.lc_phase, ego.lc_ticks
        total = self.lc_ticks_total
        if lateral == CHANGE:
            if tgt != lane:
                if phase == LC_NONE:
                    ticks = 0
                phase = LC_CHANGING
                ticks = min(total, ticks + 1)
        elif lateral == ABORT:
            if phase in (LC_CHANGING, LC_ABORTING):
                phase = LC_ABORTING
                ticks = max(0, ticks - 1)
        completed = False
        if phase == LC_CHANGING and ticks >= total:
            lane = tgt
            phase = LC_NONE
            completed = True
            if lane == self.road.exit_lane:
                ticks = total
            else:
                tgt = self.next_lane_toward_exit(lane)
                ticks = 0
        elif phase == LC_ABORTING and ticks <= 0:
            phase = LC_NONE
            ticks = 0
        return lane, tgt, phase, ticks, completed

    def leader_for(self, state: EnvState, nb: Neighbors, longitudinal: int) -> tuple[float, float]:
        """(gap, leader speed) for the ego IDM under a longitudinal choice."""
        ego = state.ego
        idx = nb.C1 if longitudinal == FOLLOW_TARGET else nb.C0
        if idx is None:
            return NO_LEADER_GAP, ego.speed
        tr = state.traffic
        return float(tr.pos[idx] - ego.long_pos - self.road.vehicle_length), float(tr.speed[idx])

    def ego_kinematics(self, state: EnvState, nb: Neighbors, action: int) -> tuple[EgoState, bool]:
        """Advance the ego car alone by one step under ``action``."""
        ego = state.ego
        road = self.road
        dt = road.dt
        lateral, longitudinal = decode_action(action)
        gap, v_lead = self.leader_for(state, nb, longitudinal)
        a = idm_accel(ego.speed, v_lead, gap, self.idm)
        v_new = min(max(ego.speed + a * dt, 0.0), road.v_max)
        a_eff = (v_new - ego.speed) / dt
        pos = ego.long_pos + 0.5 * (ego.speed + v_new) * dt
        lane, tgt, phase, ticks, completed = self.lateral_update(ego, lateral)
        lat = self.lat_of(lane, tgt, ticks) if phase != LC_NONE else lane * road.lane_width
        lat = min(max(lat, 0.0), (road.n_lanes - 1) * road.lane_width)
        lat_speed = (lat - ego.lat_pos) / dt
        lat_accel = (lat_speed - ego.lat_speed) / dt
        new = EgoState(
            id=ego.id, lane=lane, long_pos=pos, lat_pos=lat, speed=v_new, accel=a_eff,
            target_lane=tgt, lc_phase=phase, lc_ticks=ticks, lc_total_ticks=ego.lc_total_ticks,
            prev_accel=ego.accel, lat_speed=lat_speed, prev_lat_speed=ego.lat_speed,
            lat_accel=lat_accel,
        )
        return new, completed

    # ----------------------------------------------------------------- step
    def collision_with(self, ego: EgoState, tr: Traffic) -> int | None:
        road = self.road
        if len(tr) == 0:
            return None
        hit = (np.abs(tr.pos - ego.long_pos) < road.vehicle_length) & (
            np.abs(tr.lat - ego.lat_pos) < road.vehicle_width
        )
        idx = np.flatnonzero(hit)
        if idx.size == 0:
            return None
        return int(tr.ids[idx[np.argmin(tr.ids[idx])]])

    def step(
        self, state: EnvState, action: int, task: TrafficTask, rng: np.random.Generator,
        neighbors: Neighbors | None = None,
    ) -> tuple[EnvState, StepEvents]:
        if state.terminal_flag != RUNNING:
            raise SimulationError("episode finished")
        if state.ego is None:
            raise SimulationError("state has no ego vehicle")
        road = self.road
        ego = state.ego
        nb = neighbors if neighbors is not None else self.surrounding(state)
        lateral, longitudinal = decode_action(action)

        new_ego, completed = self.ego_kinematics(state, nb, action)
        acc = self._traffic_accels(state)
        tr = self._integrate_traffic(state.traffic, acc)

        step_count = state.step_count + 1
        new = EnvState(new_ego, tr, step_count * road.dt, step_count, RUNNING)
        events = StepEvents(
            lateral_action=lateral, longitudinal_action=longitudinal, lc_completed=completed,
            long_jerk=(new_ego.accel - ego.accel) / road.dt,
            lat_jerk=(new_ego.lat_accel - ego.lat_accel) / road.dt,
        )
        hit = self.collision_with(new_ego, tr)
        if hit is not None:
            events.collision = True
            events.collided_with = hit

        n_before = len(new.traffic)
        if step_count % self.steps_per_second == 0:
            new = self.spawn_traffic(rng, task, new)
        events.spawned = len(new.traffic) - n_before
        keep = new.traffic.pos <= road.length + road.despawn_margin
        if not np.all(keep):
            new.traffic = new.traffic.select(keep)

        nb_next = self.surrounding(new)
        for slot in ("C0", "C1", "C2", "C3"):
            idx = nb_next[slot]
            events.near[slot] = None if idx is None else abs(new_ego.long_pos - float(new.traffic.pos[idx]))

        if events.collision:
            new.terminal_flag = COLLISION
        elif new_ego.lane == road.exit_lane and new_ego.lc_phase == LC_NONE and ego.long_pos < road.length:
            new.terminal_flag = SUCCESS
        elif new_ego.long_pos >= road.length or step_count >= road.max_episode_steps:
            new.terminal_flag = EXIT_MISSED
        return new, events


TRACE_COLUMNS = ("step", "sim_time", "vehicle_id", "is_ego", "lane", "long_pos", "lat_pos", "speed", "event")


class TraceWriter:
    """Long-format episode trace: one row per vehicle per step.

    The ``event`` column is empty except on ego rows, where it carries the
    terminal flag, ``collision`` or ``shield``.
    """

    def __init__(self, fh: IO[str]):
        self._w = csv.writer(fh, lineterminator="\n")
        self._w.writerow(("episode",) + TRACE_COLUMNS)

    def write(self, episode: int, state: EnvState, event: str = "") -> None:
        ego = state.ego
        t = f"{state.sim_time:.1f}"
        if ego is not None:
            self._w.writerow((episode, state.step_count, t, ego.id, 1, ego.lane, f"{ego.long_pos:.6f}",
                              f"{ego.lat_pos:.6f}", f"{ego.speed:.6f}", event))
        tr = state.traffic
        for i in range(len(tr)):
            self._w.writerow((episode, state.step_count, t, int(tr.ids[i]), 0, int(tr.lane[i]),
                              f"{tr.pos[i]:.6f}", f"{tr.lat[i]:.6f}", f"{tr.speed[i]:.6f}", ""))
