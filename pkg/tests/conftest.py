from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pytest

from metalane.config import ScenarioConfig
from metalane.sim import LC_ABORTING, LC_CHANGING, LC_NONE, EnvState, Simulator, Traffic


@pytest.fixture
def sim() -> Simulator:
    return Simulator(ScenarioConfig())


def random_state(sim: Simulator, rng: np.random.Generator, n_max: int = 12, spread: float = 60.0,
                 manoeuvring: bool = False) -> EnvState:
    """Arbitrary (possibly crowded) state around an ego car, for property tests."""
    road = sim.road
    lane = int(rng.integers(1 if manoeuvring else 0, road.n_lanes))
    ego = sim.make_ego(float(rng.uniform(0.0, road.v_max)), float(rng.uniform(0.0, road.length)), lane)
    if ego.target_lane != ego.lane:
        phase = rng.choice([LC_CHANGING, LC_ABORTING] if manoeuvring else [LC_NONE, LC_CHANGING, LC_ABORTING])
        if phase != LC_NONE:
            ego.lc_phase = str(phase)
            ego.lc_ticks = int(rng.integers(1, sim.lc_ticks_total))
            ego.lat_pos = sim.lat_of(ego.lane, ego.target_lane, ego.lc_ticks)
    ego.accel = float(rng.uniform(-6.0, 2.0))
    tr = Traffic()
    for _ in range(int(rng.integers(0, n_max + 1))):
        k = int(rng.integers(road.n_lanes))
        pos = ego.long_pos + float(rng.uniform(-spread, spread))
        tr = tr.append(k, pos, k * road.lane_width, float(rng.uniform(0.0, road.v_max)))
    tr.accel = rng.uniform(-6.0, 2.0, size=len(tr))
    # occasionally duplicate a position to exercise the id tie-break
    if len(tr) >= 2 and rng.random() < 0.2:
        tr.pos[1] = tr.pos[0]
        tr.lane[1] = tr.lane[0]
        tr.lat[1] = tr.lat[0]
    return EnvState(ego, tr)


def random_batch(params, rng: np.random.Generator, n: int = 32):
    """Batch with behaviour log-probs offset from the current policy.

    Offsets keep every ratio at least 0.02 away from the clip edges so a
    central difference with h = 1e-5 never straddles a kink.
    """
    from metalane.nn import forward_batch, log_softmax
    from metalane.ppo import Batch

    obs = rng.uniform(-1.0, 1.0, size=(n, params.layout.obs_dim))
    actions = rng.integers(params.layout.n_actions, size=n)
    logits, _, _ = forward_batch(params, obs)
    lp = log_softmax(logits)[np.arange(n), actions]
    log_r = rng.choice([-0.5, -0.1, 0.05, 0.12, 0.4], size=n)
    return Batch(obs, actions, lp - log_r, rng.standard_normal(n), rng.standard_normal(n))


@dataclass
class StubInfo:
    executed: int
    terminal_flag: str = "success"


class TerminalStub:
    """Every step ends the episode."""

    def __init__(self, obs_dim: int = 21):
        self.obs_dim = obs_dim
        self.resets = 0

    def reset(self) -> np.ndarray:
        self.resets += 1
        return np.zeros(self.obs_dim)

    def step(self, action: int):
        return np.zeros(self.obs_dim), 1.0, True, StubInfo(action)


class BanditStub:
    """Two one-hot states; action 0 pays +1, action 1 pays -1, others 0."""

    def __init__(self, rng: np.random.Generator, obs_dim: int = 21):
        self.rng = rng
        self.obs_dim = obs_dim

    def _obs(self) -> np.ndarray:
        o = np.zeros(self.obs_dim)
        o[0 if self.rng.random() < 0.5 else 1] = 1.0
        return o

    def reset(self) -> np.ndarray:
        return self._obs()

    def step(self, action: int):
        r = {0: 1.0, 1: -1.0}.get(action, 0.0)
        return self._obs(), r, True, StubInfo(action)


def terminal_factory(task, rng, shield_on):
    return TerminalStub()


def bandit_factory(task, rng, shield_on):
    return BanditStub(rng)


# ---------------------------------------------------------------- acceptance reporting
ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion():
    """Record one PASS/FAIL line; printed in the terminal summary and to stdout."""

    def report(number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
