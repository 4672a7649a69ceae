"""Dense actor-critic network with hand-written reverse-mode gradients.

The network is 21 -> 256 -> 256 (tanh) with a 6-way logit head and a scalar
value head.  By default both heads share the trunk; ``separate_critic`` gives
the value head its own trunk of the same shape.

Parameters live in one flat float64 vector.  The flattening order is the
layout order below, each array row-major:

    W1 (H x 21), b1 (H), W2 (H x H), b2 (H), W_pi (6 x H), b_pi (6),
    W_v (1 x H), b_v (1)
    [separate critic only]  Wc1 (H x 21), bc1 (H), Wc2 (H x H), bc2 (H)

Losses plug in through a *head* object exposing

    head(logits, values, batch) -> (loss, dL/dlogits, dL/dvalues)
    head_rop(logits, values, batch, r_logits, r_values) -> (R dL/dlogits, R dL/dvalues)

where ``R`` is the directional derivative along a parameter direction.  The
second method is only needed for Hessian-vector products.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Protocol

import numpy as np

OBS_DIM = 21
N_ACTIONS = 6


class DivergenceError(FloatingPointError):
    """A loss or gradient became non-finite."""


@dataclass(frozen=True)
class Layout:
    obs_dim: int = OBS_DIM
    hidden: int = 256
    n_actions: int = N_ACTIONS
    separate_critic: bool = False

    @property
    def shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        h, d, k = self.hidden, self.obs_dim, self.n_actions
        out = [
            ("W1", (h, d)), ("b1", (h,)), ("W2", (h, h)), ("b2", (h,)),
            ("W_pi", (k, h)), ("b_pi", (k,)), ("W_v", (1, h)), ("b_v", (1,)),
        ]
        if self.separate_critic:
            out += [("Wc1", (h, d)), ("bc1", (h,)), ("Wc2", (h, h)), ("bc2", (h,))]
        return out

    @property
    def slices(self) -> dict[str, tuple[slice, tuple[int, ...]]]:
        out = {}
        start = 0
        for name, shape in self.shapes:
            n = int(np.prod(shape))
            out[name] = (slice(start, start + n), shape)
            start += n
        return out

    @property
    def size(self) -> int:
        return sum(int(np.prod(s)) for _, s in self.shapes)


class PolicyParams:
    """Flat parameter vector plus named, reshaped views into it."""

    __slots__ = ("layout", "flat", "_views")

    def __init__(self, layout: Layout, flat: np.ndarray):
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (layout.size,):
            raise ValueError(f"expected flat vector of length {layout.size}, got shape {flat.shape}")
        self.layout = layout
        self.flat = flat
        self._views = {name: flat[sl].reshape(shape) for name, (sl, shape) in layout.slices.items()}

    def __getitem__(self, name: str) -> np.ndarray:
        return self._views[name]

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.layout, self.flat.copy())

    def replace_flat(self, flat: np.ndarray) -> "PolicyParams":
        return PolicyParams(self.layout, flat)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.flat)))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, PolicyParams):
            return NotImplemented
        return self.layout == other.layout and np.array_equal(self.flat, other.flat)

    def __reduce__(self):
        return (PolicyParams, (self.layout, self.flat))


def _orthogonal(rng: np.random.Generator, shape: tuple[int, int], gain: float) -> np.ndarray:
    rows, cols = shape
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return gain * q[:rows, :cols]


def init_params(layout: Layout, rng: np.random.Generator, actor_gain: float = 0.01) -> PolicyParams:
    """Orthogonal init: trunk gain sqrt(2), actor head ``actor_gain``, value head 1."""
    p = PolicyParams(layout, np.zeros(layout.size))
    trunk = math.sqrt(2.0)
    p["W1"][...] = _orthogonal(rng, p["W1"].shape, trunk)
    p["W2"][...] = _orthogonal(rng, p["W2"].shape, trunk)
    p["W_pi"][...] = _orthogonal(rng, p["W_pi"].shape, actor_gain)
    p["W_v"][...] = _orthogonal(rng, p["W_v"].shape, 1.0)
    if layout.separate_critic:
        p["Wc1"][...] = _orthogonal(rng, p["Wc1"].shape, trunk)
        p["Wc2"][...] = _orthogonal(rng, p["Wc2"].shape, trunk)
    return p


@dataclass
class PolicyOutput:
    logits: np.ndarray
    value: float


@dataclass
class ForwardCache:
    x: np.ndarray
    h1: np.ndarray
    h2: np.ndarray
    c1: np.ndarray | None = None
    c2: np.ndarray | None = None


def _as_batch(obs: np.ndarray, obs_dim: int) -> np.ndarray:
    x = np.asarray(obs, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != obs_dim:
        raise ValueError(f"observation must have trailing dimension {obs_dim}, got shape {np.shape(obs)}")
    return x


def forward_batch(params: PolicyParams, obs: np.ndarray) -> tuple[np.ndarray, np.ndarray, ForwardCache]:
    """Logits (N, 6), values (N,) and the activations needed for backprop."""
    x = _as_batch(obs, params.layout.obs_dim)
    h1 = np.tanh(x @ params["W1"].T + params["b1"])
    h2 = np.tanh(h1 @ params["W2"].T + params["b2"])
    logits = h2 @ params["W_pi"].T + params["b_pi"]
    cache = ForwardCache(x, h1, h2)
    if params.layout.separate_critic:
        c1 = np.tanh(x @ params["Wc1"].T + params["bc1"])
        c2 = np.tanh(c1 @ params["Wc2"].T + params["bc2"])
        cache.c1, cache.c2 = c1, c2
        vh = c2
    else:
        vh = h2
    values = (vh @ params["W_v"].T)[:, 0] + params["b_v"][0]
    return logits, values, cache


def forward(params: PolicyParams, obs: np.ndarray) -> PolicyOutput:
    if np.ndim(obs) != 1:
        raise ValueError("forward takes a single observation; use forward_batch for batches")
    logits, values, _ = forward_batch(params, obs)
    return PolicyOutput(logits[0], float(values[0]))


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - np.max(logits, axis=-1, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=-1, keepdims=True))


def log_prob_and_entropy(logits: np.ndarray) -> tuple[np.ndarray, np.ndarray | float]:
    """Per-action log-probabilities and the entropy of the categorical."""
    logp = log_softmax(np.asarray(logits, dtype=np.float64))
    p = np.exp(logp)
    ent = -np.sum(p * logp, axis=-1)
    return logp, (float(ent) if np.ndim(ent) == 0 else ent)


class LossHead(Protocol):
    def head(self, logits: np.ndarray, values: np.ndarray, batch: Any) -> tuple[float, np.ndarray, np.ndarray]: ...


def _trunk_backward(W1, W2, x, h1, h2, dh2):
    dz2 = dh2 * (1.0 - h2 * h2)
    dW2 = dz2.T @ h1
    db2 = dz2.sum(axis=0)
    dh1 = dz2 @ W2
    dz1 = dh1 * (1.0 - h1 * h1)
    dW1 = dz1.T @ x
    db1 = dz1.sum(axis=0)
    return dW1, db1, dW2, db2, dh1


def _backward(params: PolicyParams, cache: ForwardCache, g_logits: np.ndarray, g_values: np.ndarray) -> np.ndarray:
    grad = PolicyParams(params.layout, np.zeros(params.layout.size))
    sep = params.layout.separate_critic
    grad["W_pi"][...] = g_logits.T @ cache.h2
    grad["b_pi"][...] = g_logits.sum(axis=0)
    vh = cache.c2 if sep else cache.h2
    gv = g_values[:, None]
    grad["W_v"][...] = gv.T @ vh
    grad["b_v"][...] = gv.sum(axis=0)
    dh2 = g_logits @ params["W_pi"]
    dvh = gv @ params["W_v"]
    if not sep:
        dh2 = dh2 + dvh
    dW1, db1, dW2, db2, _ = _trunk_backward(params["W1"], params["W2"], cache.x, cache.h1, cache.h2, dh2)
    grad["W1"][...], grad["b1"][...], grad["W2"][...], grad["b2"][...] = dW1, db1, dW2, db2
    if sep:
        dW1, db1, dW2, db2, _ = _trunk_backward(params["Wc1"], params["Wc2"], cache.x, cache.c1, cache.c2, dvh)
        grad["Wc1"][...], grad["bc1"][...], grad["Wc2"][...], grad["bc2"][...] = dW1, db1, dW2, db2
    return grad.flat


def loss_and_grad(params: PolicyParams, loss: LossHead, batch: Any) -> tuple[float, np.ndarray]:
    logits, values, cache = forward_batch(params, batch.obs)
    value, g_logits, g_values = loss.head(logits, values, batch)
    if not math.isfinite(value):
        raise DivergenceError("diverged")
    g = _backward(params, cache, g_logits, g_values)
    if not np.all(np.isfinite(g)):
        raise DivergenceError("diverged")
    return value, g


def grad(params: PolicyParams, loss: LossHead, batch: Any) -> np.ndarray:
    """Exact gradient of the scalar loss with respect to the flat parameters."""
    return loss_and_grad(params, loss, batch)[1]


# ---------------------------------------------------------------------- R-operator
def _trunk_rforward(W2, V1, vb1, V2, vb2, x, h1, h2):
    rh1 = (1.0 - h1 * h1) * (x @ V1.T + vb1)
    rh2 = (1.0 - h2 * h2) * (rh1 @ W2.T + h1 @ V2.T + vb2)
    return rh1, rh2


def _trunk_rbackward(W2, V2, x, h1, h2, rh1, rh2, dh2, rdh2):
    d2 = 1.0 - h2 * h2
    dz2 = dh2 * d2
    rdz2 = rdh2 * d2 - 2.0 * h2 * rh2 * dh2
    rdW2 = rdz2.T @ h1 + dz2.T @ rh1
    rdb2 = rdz2.sum(axis=0)
    dh1 = dz2 @ W2
    rdh1 = rdz2 @ W2 + dz2 @ V2
    d1 = 1.0 - h1 * h1
    rdz1 = rdh1 * d1 - 2.0 * h1 * rh1 * dh1
    rdW1 = rdz1.T @ x
    rdb1 = rdz1.sum(axis=0)
    return rdW1, rdb1, rdW2, rdb2


def hvp(params: PolicyParams, loss: Any, batch: Any, direction: np.ndarray) -> np.ndarray:
    """Exact Hessian-vector product H @ direction via Pearlmutter's R-operator."""
    lay = params.layout
    sep = lay.separate_critic
    V = PolicyParams(lay, np.asarray(direction, dtype=np.float64))
    logits, values, cache = forward_batch(params, batch.obs)
    x, h1, h2 = cache.x, cache.h1, cache.h2

    rh1, rh2 = _trunk_rforward(params["W2"], V["W1"], V["b1"], V["W2"], V["b2"], x, h1, h2)
    r_logits = rh2 @ params["W_pi"].T + h2 @ V["W_pi"].T + V["b_pi"]
    if sep:
        c1, c2 = cache.c1, cache.c2
        rc1, rc2 = _trunk_rforward(params["Wc2"], V["Wc1"], V["bc1"], V["Wc2"], V["bc2"], x, c1, c2)
        vh, rvh = c2, rc2
    else:
        vh, rvh = h2, rh2
    r_values = (rvh @ params["W_v"].T + vh @ V["W_v"].T)[:, 0] + V["b_v"][0]

    _, g_logits, g_values = loss.head(logits, values, batch)
    rg_logits, rg_values = loss.head_rop(logits, values, batch, r_logits, r_values)

    out = PolicyParams(lay, np.zeros(lay.size))
    gv, rgv = g_values[:, None], rg_values[:, None]
    out["W_pi"][...] = rg_logits.T @ h2 + g_logits.T @ rh2
    out["b_pi"][...] = rg_logits.sum(axis=0)
    out["W_v"][...] = rgv.T @ vh + gv.T @ rvh
    out["b_v"][...] = rgv.sum(axis=0)

    dh2 = g_logits @ params["W_pi"]
    rdh2 = rg_logits @ params["W_pi"] + g_logits @ V["W_pi"]
    dvh = gv @ params["W_v"]
    rdvh = rgv @ params["W_v"] + gv @ V["W_v"]
    if not sep:
        dh2 = dh2 + dvh
        rdh2 = rdh2 + rdvh
    r = _trunk_rbackward(params["W2"], V["W2"], x, h1, h2, rh1, rh2, dh2, rdh2)
    out["W1"][...], out["b1"][...], out["W2"][...], out["b2"][...] = r
    if sep:
        r = _trunk_rbackward(params["Wc2"], V["Wc2"], x, c1, c2, rc1, rc2, dvh, rdvh)
        out["Wc1"][...], out["bc1"][...], out["Wc2"][...], out["bc2"][...] = r
    return out.flat


# ---------------------------------------------------------------------- optimizers
@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)

    def copy(self) -> "AdamState":
        return AdamState(self.m.copy(), self.v.copy(), self.t)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, AdamState):
            return NotImplemented
        return self.t == other.t and np.array_equal(self.m, other.m) and np.array_equal(self.v, other.v)


def adam_step(
    params: np.ndarray,
    grads: np.ndarray,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam update; returns new arrays, inputs untouched."""
    if params.shape != grads.shape or grads.shape != state.m.shape:
        raise ValueError("parameter, gradient and moment shapes differ")
    t = state.t + 1
    m = beta1 * state.m + (1.0 - beta1) * grads
    v = beta2 * state.v + (1.0 - beta2) * (grads * grads)
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    new = params - lr * m_hat / (np.sqrt(v_hat) + eps)
    return new, AdamState(m, v, t)


def sgd_step(params: np.ndarray, grads: np.ndarray, alpha: float) -> np.ndarray:
    if params.shape != grads.shape:
        raise ValueError("parameter and gradient shapes differ")
    return params - alpha * grads


def clip_grad_norm(g: np.ndarray, max_norm: float | None) -> tuple[np.ndarray, float]:
    norm = float(np.sqrt(np.dot(g, g)))
    if max_norm is not None and max_norm > 0 and norm > max_norm:
        return g * (max_norm / norm), norm
    return g, norm


def linear_anneal(lr: float, iteration: int, total: int, enabled: bool = True) -> float:
    """Linearly decay ``lr`` to zero over ``total`` iterations."""
    if not enabled or total <= 0:
        return lr
    return lr * max(0.0, 1.0 - iteration / total)


@dataclass
class Checkpoint:
    params: PolicyParams
    adam: AdamState | None = None
    meta: dict[str, Any] = field(default_factory=dict)
