"""Episode wrapper tying the simulator, reward and shield together."""
from __future__ import annotations

from dataclasses import dataclass
from typing import TextIO

import numpy as np

from .config import ScenarioConfig, TrafficTask
from .reward import RewardBreakdown, RiskLabel, compute_reward, shield
from .sim import RUNNING, EnvState, Neighbors, Simulator, StepEvents, TraceWriter


@dataclass
class StepInfo:
    proposed: int
    executed: int
    intervened: bool
    risk: RiskLabel
    reward: RewardBreakdown
    events: StepEvents
    terminal_flag: str


class LaneChangeEnv:
    """One task's environment.  Auto-reset is left to the caller.

    All randomness (traffic warm-up, releases, ego start speed) comes from
    ``rng``, so a fixed generator seed reproduces an episode sequence
    bit for bit.
    """

    def __init__(
        self,
        scenario: ScenarioConfig,
        task: TrafficTask,
        rng: np.random.Generator,
        shield_on: bool = True,
        trace: TextIO | None = None,
    ):
        self.scenario = scenario
        self.sim = Simulator(scenario)
        self.task = task
        self.rng = rng
        self.shield_on = shield_on
        self.state: EnvState | None = None
        self._nb: Neighbors | None = None
        self._trace = TraceWriter(trace) if trace is not None else None
        self.episode = -1

    def reset(self) -> np.ndarray:
        self.state = self.sim.reset(self.task, self.rng)
        self.episode += 1
        self._nb = self.sim.surrounding(self.state)
        if self._trace is not None:
            self._trace.write(self.episode, self.state)
        return self.sim.observe(self.state, self._nb)

    def step(self, action: int) -> tuple[np.ndarray, float, bool, StepInfo]:
        prev = self.state
        nb = self._nb
        executed, risk = int(action), RiskLabel()
        if self.shield_on:
            executed, risk = shield(self.sim, prev, int(action), self.scenario.shield.d_crit, nb)
        nxt, events = self.sim.step(prev, executed, self.task, self.rng, nb)
        rb = compute_reward(prev, executed, nxt, events, self.scenario.reward, self.scenario.road)
        self.state = nxt
        self._nb = self.sim.surrounding(nxt)
        obs = self.sim.observe(nxt, self._nb)
        done = nxt.terminal_flag != RUNNING
        info = StepInfo(int(action), executed, executed != int(action), risk, rb, events, nxt.terminal_flag)
        if self._trace is not None:
            tag = nxt.terminal_flag if done else ("shield" if info.intervened else "")
            self._trace.write(self.episode, nxt, tag)
        return obs, rb.total, done, info
