"""Gradient-based meta-learning over traffic-density tasks, plus the multi-task baseline.

Inner loop: ``n_inner`` plain SGD steps at rate alpha on the PPO objective over
D_tr (collected with theta).  D_vd is then collected with the adapted
parameters phi.  Outer loop: Adam at rate beta on the summed per-task
meta-gradients.

First-order mode uses grad L_vd(phi) as the meta-gradient.  Second-order mode
back-propagates it through the SGD chain with exact Hessian-vector products:

    v <- grad L_vd(phi_n);  for k = n-1 .. 0:  v <- v - alpha * H_tr(phi_k) v
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterator, Sequence

import numpy as np

from . import checkpoint as ckpt
from .config import MetaHyper, PpoHyper, RunConfig, TrafficTask
from .evaluation import MetricRecord, evaluate, pmap
from .nn import (
    AdamState, DivergenceError, Layout, PolicyParams, adam_step, clip_grad_norm,
    forward_batch, grad, hvp, init_params, linear_anneal, log_softmax, sgd_step,
)
from .ppo import EnvFactory, LaneChangeEnvFactory, PpoLoss, RolloutBuffer, collect_rollout, compute_gae
from .seeding import make_rng

log = logging.getLogger(__name__)

FlatFn = Callable[[np.ndarray], np.ndarray]
HvpFn = Callable[[np.ndarray, np.ndarray], np.ndarray]


class MetaBatchEmpty(RuntimeError):
    pass


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, last_checkpoint: Path | None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint


# ------------------------------------------------------------------ generic core
def sgd_path(theta: np.ndarray, grad_tr: FlatFn, alpha: float, n_steps: int) -> list[np.ndarray]:
    """[phi_0 = theta, phi_1, ..., phi_n] under phi_{k+1} = phi_k - alpha * grad_tr(phi_k)."""
    path = [theta]
    for _ in range(n_steps):
        path.append(sgd_step(path[-1], grad_tr(path[-1]), alpha))
    return path


def chain_meta_gradient(path: Sequence[np.ndarray], grad_vd: FlatFn, hvp_tr: HvpFn | None, alpha: float) -> np.ndarray:
    """Meta-gradient d L_vd(phi_n) / d theta.  ``hvp_tr=None`` gives the first-order version."""
    v = grad_vd(path[-1])
    if hvp_tr is None or alpha == 0.0:
        return v
    for phi in reversed(path[:-1]):
        v = v - alpha * hvp_tr(phi, v)
    return v


# ------------------------------------------------------------------ task level
def split_streams(rng: np.random.Generator) -> tuple[np.random.Generator, np.random.Generator]:
    """Independent generators for the D_tr and D_vd rollouts of one task."""
    a, b = rng.integers(0, 2**63, size=2)
    return np.random.Generator(np.random.PCG64(int(a))), np.random.Generator(np.random.PCG64(int(b)))


@dataclass
class InnerResult:
    phi: PolicyParams
    d_tr: RolloutBuffer
    d_vd: RolloutBuffer
    path: list[PolicyParams]

    def __iter__(self) -> Iterator[Any]:
        return iter((self.phi, self.d_tr, self.d_vd))


def _flat_fns(layout: Layout, loss: PpoLoss, buf: RolloutBuffer) -> tuple[FlatFn, HvpFn]:
    batch = buf.batch()

    def g(flat: np.ndarray) -> np.ndarray:
        return grad(PolicyParams(layout, flat), loss, batch)

    def h(flat: np.ndarray, v: np.ndarray) -> np.ndarray:
        return hvp(PolicyParams(layout, flat), loss, batch, v)

    return g, h


def gather(params: PolicyParams, task: TrafficTask, ppo: PpoHyper, rng: np.random.Generator,
           env_factory: EnvFactory, shield_on: bool) -> RolloutBuffer:
    buf = collect_rollout(env_factory, task, params, ppo, rng, shield_on=shield_on)
    return compute_gae(buf, ppo.gamma, ppo.lam)


def inner_adapt(
    theta: PolicyParams,
    task: TrafficTask,
    meta: MetaHyper,
    ppo: PpoHyper,
    rng: np.random.Generator,
    env_factory: EnvFactory,
    shield_on: bool = True,
) -> InnerResult:
    if not theta.is_finite():
        raise DivergenceError("non-finite parameters before adaptation")
    tr_rng, vd_rng = split_streams(rng)
    d_tr = gather(theta, task, ppo, tr_rng, env_factory, shield_on)
    g_tr, _ = _flat_fns(theta.layout, PpoLoss.from_hyper(ppo), d_tr)
    path = [theta.replace_flat(x) for x in sgd_path(theta.flat, g_tr, meta.inner_lr, meta.inner_steps)]
    phi = path[-1]
    if not phi.is_finite():
        raise DivergenceError("diverged")
    d_vd = gather(phi, task, ppo, vd_rng, env_factory, shield_on)
    return InnerResult(phi, d_tr, d_vd, path)


@dataclass
class TaskStep:
    task: TrafficTask
    meta_grad: np.ndarray | None
    env_steps: int
    row: dict[str, Any] = field(default_factory=dict)
    skipped: bool = False


def _summarize(buf: RolloutBuffer) -> dict[str, Any]:
    return {
        "comfort": float(buf.comfort.mean()),
        "efficiency": float(buf.efficiency.mean()),
        "safety": float(buf.safety.mean()),
        "reward": float(buf.rewards.mean()),
        "interventions": int(buf.intervened.sum()),
        "episodes": len(buf.episodes),
        "successes": sum(e.result == "success" for e in buf.episodes),
        "collisions": sum(e.result == "collision" for e in buf.episodes),
    }


def _mean_ratio(new: PolicyParams, buf: RolloutBuffer) -> float:
    logits, _, _ = forward_batch(new, buf.obs)
    lp = log_softmax(logits)[np.arange(len(buf)), buf.actions]
    return float(np.mean(np.exp(lp - buf.logp)))


def _loss_row(params: PolicyParams, loss: PpoLoss, buf: RolloutBuffer) -> dict[str, float]:
    logits, values, _ = forward_batch(params, buf.obs)
    comp = loss.components(logits, values, buf.batch())
    return {"surrogate": comp["surrogate"], "value_loss": comp["value_loss"], "entropy": comp["entropy"]}


def meta_task_step(job: tuple) -> TaskStep:
    theta, task, meta, ppo, rng, env_factory, shield_on = job
    loss = PpoLoss.from_hyper(ppo)
    try:
        res = inner_adapt(theta, task, meta, ppo, rng, env_factory, shield_on)
        g_vd, _ = _flat_fns(theta.layout, loss, res.d_vd)
        _, h_tr = _flat_fns(theta.layout, loss, res.d_tr)
        g = chain_meta_gradient([p.flat for p in res.path], g_vd,
                                h_tr if meta.mode == "so" else None, meta.inner_lr)
        if not np.all(np.isfinite(g)):
            raise DivergenceError("diverged")
    except DivergenceError as exc:
        log.warning("task f=%.2f skipped this meta-batch: %s", task.release_prob, exc)
        return TaskStep(task, None, 0, skipped=True)
    row = _summarize(res.d_vd) | _loss_row(res.phi, loss, res.d_vd)
    row["ratio"] = _mean_ratio(res.phi, res.d_tr)
    return TaskStep(task, g, len(res.d_tr) + len(res.d_vd), row)


def pretrained_task_step(job: tuple) -> TaskStep:
    theta, task, meta, ppo, rng, env_factory, shield_on = job
    loss = PpoLoss.from_hyper(ppo)
    tr_rng, vd_rng = split_streams(rng)
    try:
        d_tr = gather(theta, task, ppo, tr_rng, env_factory, shield_on)
        d_vd = gather(theta, task, ppo, vd_rng, env_factory, shield_on)
        g = grad(theta, loss, d_vd.batch())
    except DivergenceError as exc:
        log.warning("task f=%.2f skipped this batch: %s", task.release_prob, exc)
        return TaskStep(task, None, 0, skipped=True)
    row = _summarize(d_vd) | _loss_row(theta, loss, d_vd)
    row["ratio"] = 1.0
    return TaskStep(task, g, len(d_tr) + len(d_vd), row)


@dataclass
class UpdateResult:
    theta: PolicyParams
    adam: AdamState
    steps: list[TaskStep]
    grad_norm: float
    env_steps: int


def _apply(theta: PolicyParams, steps: list[TaskStep], adam: AdamState, lr: float,
           ppo: PpoHyper, empty_msg: str) -> UpdateResult:
    good = [s for s in steps if not s.skipped]
    if not good:
        raise MetaBatchEmpty(empty_msg)
    total = np.zeros_like(theta.flat)
    for s in good:  # fixed task order
        total = total + s.meta_grad
    total, norm = clip_grad_norm(total, ppo.max_grad_norm)
    flat, adam = adam_step(theta.flat, total, adam, lr)
    return UpdateResult(theta.replace_flat(flat), adam, steps, norm, sum(s.env_steps for s in steps))


def meta_update(
    theta: PolicyParams,
    tasks: Sequence[TrafficTask],
    meta: MetaHyper,
    ppo: PpoHyper,
    adam: AdamState,
    rngs: Sequence[np.random.Generator],
    env_factory: EnvFactory,
    lr: float | None = None,
    shield_on: bool = True,
    workers: int = 1,
) -> UpdateResult:
    """One outer step: adapt to every task, sum the meta-gradients, Adam at ``lr``."""
    jobs = [(theta, t, meta, ppo, r, env_factory, shield_on) for t, r in zip(tasks, rngs, strict=True)]
    steps = pmap(meta_task_step, jobs, workers)
    return _apply(theta, steps, adam, meta.outer_lr if lr is None else lr, ppo, "meta-batch empty")


def pretrained_update(
    theta: PolicyParams,
    tasks: Sequence[TrafficTask],
    meta: MetaHyper,
    ppo: PpoHyper,
    adam: AdamState,
    rngs: Sequence[np.random.Generator],
    env_factory: EnvFactory,
    lr: float | None = None,
    shield_on: bool = True,
    workers: int = 1,
) -> UpdateResult:
    """Joint multi-task step on data from every task, same rollout budget and streams as ``meta_update``."""
    jobs = [(theta, t, meta, ppo, r, env_factory, shield_on) for t, r in zip(tasks, rngs, strict=True)]
    steps = pmap(pretrained_task_step, jobs, workers)
    return _apply(theta, steps, adam, meta.outer_lr if lr is None else lr, ppo, "batch empty")


# ------------------------------------------------------------------ adaptation
def adapt(
    params: PolicyParams,
    task: TrafficTask,
    n_grad_steps: int,
    rng: np.random.Generator,
    meta: MetaHyper,
    ppo: PpoHyper,
    env_factory: EnvFactory,
    shield_on: bool = True,
) -> list[PolicyParams]:
    """[params, after 1 step, ..., after n steps]; each step is a fresh rollout plus one SGD step at alpha."""
    if n_grad_steps < 0:
        raise ValueError("n_grad_steps must be >= 0")
    loss = PpoLoss.from_hyper(ppo)
    seq = [params]
    for k in range(n_grad_steps):
        cur = seq[-1]
        try:
            buf = gather(cur, task, ppo, rng, env_factory, shield_on)
            nxt = cur.replace_flat(sgd_step(cur.flat, grad(cur, loss, buf.batch()), meta.inner_lr))
            if not nxt.is_finite():
                raise DivergenceError("diverged")
        except DivergenceError:
            log.warning("adaptation diverged at step %d; sequence truncated", k + 1)
            break
        seq.append(nxt)
    return seq


# ------------------------------------------------------------------ training loops
TRAIN_LOG_COLUMNS = (
    "iteration", "agent", "task_f", "env_steps", "lr", "grad_norm",
    "comfort", "efficiency", "safety", "reward", "surrogate", "value_loss", "entropy",
    "ratio", "interventions", "episodes", "successes", "collisions",
)
EVAL_LOG_COLUMNS = ("iteration", "agent", "task_f") + MetricRecord.columns()


@dataclass
class TrainOutcome:
    params: PolicyParams
    adam: AdamState
    env_steps: int
    log_rows: list[dict[str, Any]]
    eval_rows: list[dict[str, Any]]
    checkpoint: Path | None


def train_tasks(cfg: RunConfig) -> list[TrafficTask]:
    return [TrafficTask(f, cfg.seed) for f in cfg.tasks.train]


def initial_params(cfg: RunConfig) -> PolicyParams:
    layout = Layout(hidden=cfg.net.hidden, separate_critic=cfg.net.separate_critic)
    return init_params(layout, make_rng(cfg.seed, "init"))


def one_step_eval(params: PolicyParams, cfg: RunConfig, env_factory: EnvFactory, agent: str,
                  iteration: int, workers: int = 1) -> list[dict[str, Any]]:
    """Success/collision after ``inner_steps`` adaptation steps on each training task.

    Adaptation and evaluation seeds are the same at every iteration so the
    curve compares parameters, not traffic draws.
    """
    rows = []
    for i, task in enumerate(train_tasks(cfg)):
        seq = adapt(params, task, cfg.meta.inner_steps, make_rng(cfg.seed, "eval-adapt", i),
                    cfg.meta, cfg.ppo, env_factory, cfg.shield)
        rec = evaluate(seq[-1], task, cfg.meta.eval_episodes, make_rng(cfg.seed, "eval", i),
                       cfg.shield, env_factory, gradient_step=len(seq) - 1, workers=workers)
        rows.append({"iteration": iteration, "agent": agent, "task_f": task.release_prob} | rec.as_row())
    return rows


def _write_csv(path: Path, columns: Sequence[str], rows: list[dict[str, Any]]) -> None:
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r.get(k, "")) for k in columns})


def _fmt(v: Any) -> Any:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v


def _train(cfg: RunConfig, agent: str, out_dir: Path | None, env_factory: EnvFactory | None,
           workers: int, iterations: int | None) -> TrainOutcome:
    env_factory = env_factory or LaneChangeEnvFactory(cfg.scenario)
    update = meta_update if agent == "meta" else pretrained_update
    n_iter = cfg.meta.iterations if iterations is None else iterations
    tasks = train_tasks(cfg)
    theta = initial_params(cfg)
    adam = AdamState.zeros(theta.flat.size)
    env_steps = 0
    log_rows: list[dict[str, Any]] = []
    eval_rows: list[dict[str, Any]] = []
    ckpt_dir = out_dir / "checkpoints" if out_dir is not None else None
    last_ckpt: Path | None = None

    def save(it: int, name: str) -> Path | None:
        if ckpt_dir is None:
            return None
        meta = {"agent": agent, "iteration": it, "env_steps": env_steps, "seed": cfg.seed, "mode": cfg.meta.mode}
        return ckpt.save(ckpt_dir / name, theta, adam, meta)

    do_eval = cfg.meta.eval_every > 0 and cfg.meta.eval_episodes > 0
    if do_eval:
        eval_rows += one_step_eval(theta, cfg, env_factory, agent, 0, workers)
    for it in range(n_iter):
        lr = linear_anneal(cfg.meta.outer_lr, it, n_iter, cfg.meta.anneal)
        rngs = [make_rng(cfg.seed, "train", it, i) for i in range(len(tasks))]
        res = update(theta, tasks, cfg.meta, cfg.ppo, adam, rngs, env_factory, lr=lr,
                     shield_on=cfg.shield, workers=workers)
        if not res.theta.is_finite():
            raise TrainingAborted(f"non-finite parameters at iteration {it + 1}", last_ckpt)
        theta, adam = res.theta, res.adam
        env_steps += res.env_steps
        for s in res.steps:
            if s.skipped:
                continue
            log_rows.append({"iteration": it + 1, "agent": agent, "task_f": s.task.release_prob,
                             "env_steps": env_steps, "lr": lr, "grad_norm": res.grad_norm} | s.row)
        done = it + 1
        if do_eval and (done % cfg.meta.eval_every == 0 or done == n_iter):
            eval_rows += one_step_eval(theta, cfg, env_factory, agent, done, workers)
            last = eval_rows[-len(tasks):]
            log.info("%s iter %d: one-step success %s collision %s", agent, done,
                     [round(r["success_rate"], 2) for r in last], [round(r["collision_rate"], 2) for r in last])
        if cfg.meta.checkpoint_every > 0 and done % cfg.meta.checkpoint_every == 0:
            last_ckpt = save(done, f"{agent}-{done:05d}.ckpt")
    final = save(n_iter, f"{agent}.ckpt")
    if out_dir is not None:
        _write_csv(out_dir / f"{agent}-train.csv", TRAIN_LOG_COLUMNS, log_rows)
        _write_csv(out_dir / f"{agent}-eval.csv", EVAL_LOG_COLUMNS, eval_rows)
    return TrainOutcome(theta, adam, env_steps, log_rows, eval_rows, final)


def train_meta(cfg: RunConfig, out_dir: str | Path | None = None, env_factory: EnvFactory | None = None,
               workers: int = 1, iterations: int | None = None) -> TrainOutcome:
    return _train(cfg, "meta", Path(out_dir) if out_dir is not None else None, env_factory, workers, iterations)


def train_pretrained(cfg: RunConfig, out_dir: str | Path | None = None, env_factory: EnvFactory | None = None,
                     workers: int = 1, iterations: int | None = None) -> TrainOutcome:
    return _train(cfg, "pretrained", Path(out_dir) if out_dir is not None else None, env_factory, workers,
                  iterations)
