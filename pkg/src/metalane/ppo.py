"""PPO task learner: rollouts, GAE(lambda) and the clipped-surrogate update."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Protocol

import numpy as np

from .config import PpoHyper, ScenarioConfig, TrafficTask
from .env import LaneChangeEnv
from .nn import (
    AdamState, DivergenceError, PolicyParams, adam_step, clip_grad_norm,
    forward_batch, log_softmax, loss_and_grad,
)

log = logging.getLogger(__name__)


class Env(Protocol):
    def reset(self) -> np.ndarray: ...
    def step(self, action: int) -> tuple[np.ndarray, float, bool, Any]: ...


EnvFactory = Callable[[TrafficTask, np.random.Generator, bool], Env]


@dataclass(frozen=True)
class LaneChangeEnvFactory:
    """Picklable factory so rollouts can run in worker processes."""

    scenario: ScenarioConfig

    def __call__(self, task: TrafficTask, rng: np.random.Generator, shield_on: bool) -> Env:
        return LaneChangeEnv(self.scenario, task, rng, shield_on=shield_on)


@dataclass
class EpisodeOutcome:
    result: str
    steps: int
    comfort: float = 0.0
    efficiency: float = 0.0
    safety: float = 0.0
    total: float = 0.0
    interventions: int = 0


@dataclass
class Batch:
    obs: np.ndarray
    actions: np.ndarray
    logp: np.ndarray
    adv: np.ndarray
    returns: np.ndarray


@dataclass
class RolloutBuffer:
    obs: np.ndarray
    actions: np.ndarray
    logp: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    dones: np.ndarray
    intervened: np.ndarray
    bootstrap_value: float = 0.0
    comfort: np.ndarray | None = None
    efficiency: np.ndarray | None = None
    safety: np.ndarray | None = None
    episodes: list[EpisodeOutcome] = field(default_factory=list)
    adv: np.ndarray | None = None
    adv_raw: np.ndarray | None = None
    returns: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.actions)

    def batch(self, idx: np.ndarray | None = None) -> Batch:
        if self.adv is None:
            raise ValueError("advantages missing; run compute_gae first")
        if idx is None:
            return Batch(self.obs, self.actions, self.logp, self.adv, self.returns)
        return Batch(self.obs[idx], self.actions[idx], self.logp[idx], self.adv[idx], self.returns[idx])


def sample_action(logits: np.ndarray, rng: np.random.Generator) -> int:
    logp = log_softmax(logits)
    cdf = np.cumsum(np.exp(logp))
    a = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    return min(a, len(logits) - 1)


def collect_rollout(
    env_factory: EnvFactory,
    task: TrafficTask,
    params: PolicyParams,
    hyper: PpoHyper,
    rng: np.random.Generator,
    shield_on: bool = True,
    greedy: bool = False,
    horizon: int | None = None,
) -> RolloutBuffer:
    """Run exactly ``horizon`` environment steps, resetting after each terminal.

    The buffer records the *executed* action (after shielding) together
    with its log-probability under ``params``.
    """
    T = hyper.horizon if horizon is None else horizon
    if T <= 0:
        raise ValueError("rollout horizon must be positive")
    env_rng = np.random.Generator(np.random.PCG64(int(rng.integers(2**63))))
    act_rng = np.random.Generator(np.random.PCG64(int(rng.integers(2**63))))
    env = env_factory(task, env_rng, shield_on)
    obs_dim = params.layout.obs_dim
    buf = RolloutBuffer(
        obs=np.zeros((T, obs_dim)), actions=np.zeros(T, dtype=np.int64), logp=np.zeros(T),
        rewards=np.zeros(T), values=np.zeros(T), dones=np.zeros(T, dtype=bool),
        intervened=np.zeros(T, dtype=bool), comfort=np.zeros(T), efficiency=np.zeros(T),
        safety=np.zeros(T),
    )
    obs = env.reset()
    ep = EpisodeOutcome("running", 0)
    for t in range(T):
        logits, value, _ = forward_batch(params, obs)
        logits = logits[0]
        proposed = int(np.argmax(logits)) if greedy else sample_action(logits, act_rng)
        next_obs, reward, done, info = env.step(proposed)
        executed = int(getattr(info, "executed", proposed))
        buf.obs[t] = obs
        buf.actions[t] = executed
        buf.logp[t] = log_softmax(logits)[executed]
        buf.rewards[t] = reward
        buf.values[t] = value[0]
        buf.dones[t] = done
        buf.intervened[t] = executed != proposed
        rb = getattr(info, "reward", None)
        if rb is not None:
            buf.comfort[t], buf.efficiency[t], buf.safety[t] = rb.comfort, rb.efficiency, rb.safety
            ep.comfort += rb.comfort
            ep.efficiency += rb.efficiency
            ep.safety += rb.safety
        ep.total += reward
        ep.steps += 1
        ep.interventions += int(buf.intervened[t])
        if done:
            ep.result = getattr(info, "terminal_flag", "done")
            buf.episodes.append(ep)
            ep = EpisodeOutcome("running", 0)
            obs = env.reset()
        else:
            obs = next_obs
    if buf.dones[-1]:
        buf.bootstrap_value = 0.0
    else:
        _, v_last, _ = forward_batch(params, obs)
        buf.bootstrap_value = float(v_last[0])
    return buf


def gae_advantages(
    rewards: np.ndarray, values: np.ndarray, dones: np.ndarray,
    gamma: float, lam: float, bootstrap_value: float,
) -> np.ndarray:
    """Backward GAE recursion; a terminal step does not bootstrap."""
    T = len(rewards)
    adv = np.zeros(T)
    gae = 0.0
    for t in range(T - 1, -1, -1):
        nonterminal = 0.0 if dones[t] else 1.0
        next_v = bootstrap_value if t == T - 1 else values[t + 1]
        delta = rewards[t] + gamma * next_v * nonterminal - values[t]
        gae = delta + gamma * lam * nonterminal * gae
        adv[t] = gae
    return adv


def normalize(adv: np.ndarray) -> np.ndarray:
    mean = adv.mean()
    std = adv.std()
    if std < 1e-12:
        return adv - mean
    return (adv - mean) / std


def compute_gae(buf: RolloutBuffer, gamma: float, lam: float, bootstrap_value: float | None = None) -> RolloutBuffer:
    boot = buf.bootstrap_value if bootstrap_value is None else bootstrap_value
    raw = gae_advantages(buf.rewards, buf.values, buf.dones, gamma, lam, boot)
    buf.adv_raw = raw
    buf.returns = raw + buf.values
    buf.adv = normalize(raw)
    return buf


class PpoLoss:
    """Clipped surrogate + value error - entropy bonus, averaged over the batch.

        loss = -pg * mean(min(r A, clip(r, 1-eps, 1+eps) A))
               + c1 * mean((V - V_targ)^2) - c2 * mean(H[pi])

    ``pg_coef`` = 0 gives a value-only loss.
    """

    def __init__(self, clip_eps: float = 0.2, c1: float = 0.5, c2: float = 0.01, pg_coef: float = 1.0):
        self.clip_eps = clip_eps
        self.c1 = c1
        self.c2 = c2
        self.pg_coef = pg_coef

    @classmethod
    def from_hyper(cls, hyper: PpoHyper) -> "PpoLoss":
        return cls(hyper.clip_eps, hyper.c1, hyper.c2)

    def _parts(self, logits: np.ndarray, values: np.ndarray, batch: Batch):
        n = len(batch.actions)
        logp = log_softmax(logits)
        p = np.exp(logp)
        rows = np.arange(n)
        lp = logp[rows, batch.actions]
        ratio = np.exp(lp - batch.logp)
        A = batch.adv
        surr1 = ratio * A
        surr2 = np.clip(ratio, 1.0 - self.clip_eps, 1.0 + self.clip_eps) * A
        active = surr1 <= surr2
        surr = np.where(active, surr1, surr2)
        ent = -np.sum(p * logp, axis=1)
        verr = values - batch.returns
        return n, logp, p, rows, ratio, A, active, surr, ent, verr

    def per_sample(self, logits: np.ndarray, values: np.ndarray, batch: Batch) -> dict[str, np.ndarray]:
        """Per-sample ratio, unclipped term r*A and the surrogate actually optimized."""
        _, _, _, _, ratio, A, _, surr, ent, verr = self._parts(logits, values, batch)
        return {"ratio": ratio, "unclipped": ratio * A, "surrogate": surr, "entropy": ent, "value_error": verr}

    def components(self, logits: np.ndarray, values: np.ndarray, batch: Batch) -> dict[str, float]:
        n, _, _, _, ratio, _, _, surr, ent, verr = self._parts(logits, values, batch)
        return {
            "surrogate": float(surr.mean()),
            "value_loss": float(np.mean(verr * verr)),
            "entropy": float(ent.mean()),
            "ratio": float(ratio.mean()),
            "clip_frac": float(np.mean(np.abs(ratio - 1.0) > self.clip_eps)),
        }

    def head(self, logits: np.ndarray, values: np.ndarray, batch: Batch) -> tuple[float, np.ndarray, np.ndarray]:
        n, logp, p, rows, ratio, A, active, surr, ent, verr = self._parts(logits, values, batch)
        loss = -self.pg_coef * surr.mean() + self.c1 * np.mean(verr * verr) - self.c2 * ent.mean()
        k = -self.pg_coef * np.where(active, ratio * A, 0.0) / n
        g = -k[:, None] * p
        g[rows, batch.actions] += k
        g += (self.c2 / n) * p * (logp + ent[:, None])
        gv = 2.0 * self.c1 * verr / n
        return float(loss), g, gv

    def head_rop(self, logits, values, batch, r_logits, r_values):
        n, logp, p, rows, ratio, A, active, surr, ent, verr = self._parts(logits, values, batch)
        pu = np.sum(p * r_logits, axis=1, keepdims=True)
        r_logp = r_logits - pu
        r_p = p * r_logp
        r_ratio = ratio * r_logp[rows, batch.actions]
        k = -self.pg_coef * np.where(active, ratio * A, 0.0) / n
        rk = -self.pg_coef * np.where(active, r_ratio * A, 0.0) / n
        rg = -rk[:, None] * p - k[:, None] * r_p
        rg[rows, batch.actions] += rk
        r_ent = -np.sum(r_p * logp, axis=1)
        rg += (self.c2 / n) * (r_p * (logp + ent[:, None]) + p * (r_logp + r_ent[:, None]))
        rgv = 2.0 * self.c1 * r_values / n
        return rg, rgv

    def value(self, params: PolicyParams, batch: Batch) -> float:
        logits, values, _ = forward_batch(params, batch.obs)
        return self.head(logits, values, batch)[0]


def ppo_loss(params: PolicyParams, minibatch: Batch, hyper: PpoHyper) -> float:
    value = PpoLoss.from_hyper(hyper).value(params, minibatch)
    if not np.isfinite(value):
        raise DivergenceError("diverged")
    return value


@dataclass
class UpdateStats:
    loss: float = 0.0
    surrogate: float = 0.0
    value_loss: float = 0.0
    entropy: float = 0.0
    epoch_ratio: list[float] = field(default_factory=list)
    grad_norm: float = 0.0
    diverged: bool = False


def ppo_update(
    params: PolicyParams,
    buf: RolloutBuffer,
    hyper: PpoHyper,
    adam: AdamState,
    rng: np.random.Generator,
    lr: float | None = None,
) -> tuple[PolicyParams, AdamState, UpdateStats]:
    """``epochs`` passes over shuffled minibatches, one Adam step each.

    On a non-finite loss the update stops and the last finite parameters
    are returned with ``stats.diverged`` set.
    """
    T = len(buf)
    if T % hyper.minibatch != 0:
        raise ValueError(f"minibatch {hyper.minibatch} does not divide buffer length {T}")
    loss_fn = PpoLoss.from_hyper(hyper)
    lr = hyper.lr if lr is None else lr
    stats = UpdateStats()
    losses, norms = [], []
    for _ in range(hyper.epochs):
        perm = rng.permutation(T)
        ratios = []
        for start in range(0, T, hyper.minibatch):
            mb = buf.batch(perm[start:start + hyper.minibatch])
            try:
                value, g = loss_and_grad(params, loss_fn, mb)
            except DivergenceError:
                log.warning("PPO update diverged; keeping last stable parameters")
                stats.diverged = True
                return params, adam, stats
            logits, values, _ = forward_batch(params, mb.obs)
            ratios.append(loss_fn.components(logits, values, mb)["ratio"])
            g, norm = clip_grad_norm(g, hyper.max_grad_norm)
            flat, adam = adam_step(params.flat, g, adam, lr)
            params = params.replace_flat(flat)
            losses.append(value)
            norms.append(norm)
        stats.epoch_ratio.append(float(np.mean(ratios)))
    full = buf.batch()
    logits, values, _ = forward_batch(params, full.obs)
    comp = loss_fn.components(logits, values, full)
    stats.loss = float(np.mean(losses)) if losses else 0.0
    stats.surrogate = comp["surrogate"]
    stats.value_loss = comp["value_loss"]
    stats.entropy = comp["entropy"]
    stats.grad_norm = float(np.mean(norms)) if norms else 0.0
    return params, adam, stats
