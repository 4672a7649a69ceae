"""Greedy policy evaluation: success and collision rates over fixed episode seeds."""
from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, fields
from typing import Any, Callable, Iterable, Sequence, TextIO

import numpy as np

from .config import TrafficTask
from .nn import PolicyParams, forward_batch
from .ppo import EnvFactory, EpisodeOutcome, sample_action
from .sim import COLLISION, EXIT_MISSED, SUCCESS, TraceWriter

RESULTS = (SUCCESS, COLLISION, EXIT_MISSED)


@dataclass
class MetricRecord:
    gradient_step: int
    success_rate: float
    collision_rate: float
    exit_missed_rate: float
    comfort: float
    efficiency: float
    safety: float
    total: float
    interventions: float
    episodes: int

    @classmethod
    def from_outcomes(cls, outcomes: Sequence[EpisodeOutcome], gradient_step: int = 0) -> "MetricRecord":
        n = len(outcomes)
        if n == 0:
            raise ValueError("no episodes to aggregate")
        for o in outcomes:
            if o.result not in RESULTS:
                raise ValueError(f"episode ended without a terminal result: {o.result!r}")

        def mean(xs: Iterable[float]) -> float:
            return float(np.mean(np.fromiter(xs, dtype=np.float64, count=n)))

        return cls(
            gradient_step=gradient_step,
            success_rate=sum(o.result == SUCCESS for o in outcomes) / n,
            collision_rate=sum(o.result == COLLISION for o in outcomes) / n,
            exit_missed_rate=sum(o.result == EXIT_MISSED for o in outcomes) / n,
            comfort=mean(o.comfort for o in outcomes),
            efficiency=mean(o.efficiency for o in outcomes),
            safety=mean(o.safety for o in outcomes),
            total=mean(o.total for o in outcomes),
            interventions=mean(o.interventions for o in outcomes),
            episodes=n,
        )

    def as_row(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def columns(cls) -> tuple[str, ...]:
        return tuple(f.name for f in fields(cls))


def pmap(fn: Callable[[Any], Any], items: Sequence[Any], workers: int = 1) -> list[Any]:
    """Ordered map, optionally over a process pool.  Results never depend on ``workers``."""
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def run_episode(
    params: PolicyParams,
    env: Any,
    greedy: bool = True,
    act_rng: np.random.Generator | None = None,
    trace: TraceWriter | None = None,
    episode: int = 0,
) -> EpisodeOutcome:
    if not greedy and act_rng is None:
        raise ValueError("stochastic episodes need an action generator")
    obs = env.reset()
    if trace is not None:
        trace.write(episode, env.state)
    out = EpisodeOutcome("running", 0)
    done = False
    while not done:
        logits, _, _ = forward_batch(params, obs)
        action = int(np.argmax(logits[0])) if greedy else sample_action(logits[0], act_rng)
        obs, reward, done, info = env.step(action)
        out.steps += 1
        out.total += reward
        out.comfort += info.reward.comfort
        out.efficiency += info.reward.efficiency
        out.safety += info.reward.safety
        out.interventions += int(info.intervened)
        if trace is not None:
            tag = info.terminal_flag if done else ("shield" if info.intervened else "")
            trace.write(episode, env.state, tag)
    out.result = info.terminal_flag
    return out


def _episode_job(job: tuple) -> EpisodeOutcome:
    params, env_factory, task, seed, shield_on = job
    env = env_factory(task, np.random.Generator(np.random.PCG64(seed)), shield_on)
    return run_episode(params, env)


def evaluate(
    params: PolicyParams,
    task: TrafficTask,
    n_episodes: int,
    rng: np.random.Generator,
    shield_on: bool,
    env_factory: EnvFactory,
    gradient_step: int = 0,
    trace: TextIO | None = None,
    workers: int = 1,
) -> MetricRecord:
    """Greedy (argmax) evaluation over ``n_episodes`` independently seeded episodes.

    Episode ``j`` draws its traffic from the ``j``-th seed taken from ``rng``,
    so results do not depend on worker count or scheduling.
    """
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    seeds = [int(s) for s in rng.integers(0, 2**63, size=n_episodes)]
    if trace is not None:
        writer = TraceWriter(trace)
        outcomes = []
        for j, seed in enumerate(seeds):
            env = env_factory(task, np.random.Generator(np.random.PCG64(seed)), shield_on)
            outcomes.append(run_episode(params, env, trace=writer, episode=j))
    else:
        jobs = [(params, env_factory, task, s, shield_on) for s in seeds]
        outcomes = pmap(_episode_job, jobs, workers)
    return MetricRecord.from_outcomes(outcomes, gradient_step)
