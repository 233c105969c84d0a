"""Implicit Q-learning critics: Q, a soft-updated target Q, and V.

V is fitted by expectile regression on target-Q minus V over dataset
actions only; Q regresses onto r + gamma * V(s'). No policy is ever queried
during training.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nnengine import AdamState, MlpNet, adam_step, backward, forward, forward_cache, init_mlp


def expectile_loss(u, tau: float):
    """|tau - 1(u < 0)| * u**2, elementwise."""
    u = np.asarray(u, dtype=np.float64)
    w = np.where(u < 0, 1.0 - tau, tau)
    return w * u * u


@dataclass
class CriticSet:
    q_net: MlpNet
    q_target: MlpNet
    v_net: MlpNet
    tau: float = 0.7
    eta: float = 0.005
    gamma: float = 0.99
    q_opt: AdamState | None = None
    v_opt: AdamState | None = None

    def __post_init__(self):
        if not 0 < self.tau < 1:
            raise ValueError(f"expectile tau must be in (0, 1), got {self.tau}")
        if not 0 < self.eta <= 1:
            raise ValueError(f"soft-update rate eta must be in (0, 1], got {self.eta}")
        if not 0 <= self.gamma <= 1:
            raise ValueError(f"discount gamma must be in [0, 1], got {self.gamma}")
        if [w.shape for w in self.q_net.weights] != [w.shape for w in self.q_target.weights]:
            raise ValueError("target network shape differs from the Q network")

    @classmethod
    def create(cls, state_dim: int, action_dim: int, hidden: int = 64, rng=0, lr: float = 3e-4,
               **kw) -> "CriticSet":
        rng = np.random.default_rng(rng)
        q = init_mlp(state_dim + action_dim, 1, hidden, rng=rng)
        v = init_mlp(state_dim, 1, hidden, rng=rng)
        return cls(q, q.copy(), v, q_opt=AdamState.for_net(q, lr), v_opt=AdamState.for_net(v, lr), **kw)

    def q(self, s, a) -> np.ndarray:
        return forward(self.q_net, np.concatenate([np.atleast_2d(s), np.atleast_2d(a)], 1))[:, 0]

    def q_hat(self, s, a) -> np.ndarray:
        return forward(self.q_target, np.concatenate([np.atleast_2d(s), np.atleast_2d(a)], 1))[:, 0]

    def v(self, s) -> np.ndarray:
        return forward(self.v_net, np.atleast_2d(s))[:, 0]


def v_update(critics: CriticSet, s, a, target_q=None) -> float:
    """One Adam step of V on the mean expectile loss of target_q - V(s).

    ``target_q`` defaults to the target network's Q(s, a); it is a constant
    for this step either way.
    """
    s = np.atleast_2d(s)
    if target_q is None:
        target_q = critics.q_hat(s, a)
    v, cache = forward_cache(critics.v_net, s)
    u = np.asarray(target_q, dtype=np.float64) - v[:, 0]
    loss = float(np.mean(expectile_loss(u, critics.tau)))
    if not np.isfinite(loss):
        raise FloatingPointError("non-finite value loss")
    w = np.where(u < 0, 1.0 - critics.tau, critics.tau)
    grad_v = (-2.0 * w * u / len(u))[:, None]
    adam_step(critics.v_net, backward(critics.v_net, s, grad_v, cache), critics.v_opt)
    return loss


def q_update(critics: CriticSet, s, a, r, s_next, done, next_v=None) -> float:
    """One Adam step of Q on the mean squared error to r + gamma * V(s')."""
    s = np.atleast_2d(s)
    if next_v is None:
        next_v = critics.v(s_next)
    done = np.asarray(done, dtype=np.float64)
    target = np.asarray(r, dtype=np.float64) + critics.gamma * (1.0 - done) * next_v
    x = np.concatenate([s, np.atleast_2d(a)], axis=1)
    q, cache = forward_cache(critics.q_net, x)
    diff = q[:, 0] - target
    loss = float(np.mean(diff * diff))
    if not np.isfinite(loss):
        raise FloatingPointError("non-finite Q loss")
    adam_step(critics.q_net, backward(critics.q_net, x, (2.0 * diff / len(diff))[:, None], cache),
              critics.q_opt)
    return loss


def soft_update(critics: CriticSet) -> None:
    eta = critics.eta
    if not 0 < eta <= 1:
        raise ValueError(f"soft-update rate eta must be in (0, 1], got {eta}")
    for tgt, src in zip(critics.q_target.params(), critics.q_net.params()):
        if eta == 1.0:
            tgt[...] = src
        else:
            tgt *= 1.0 - eta
            tgt += eta * src


def train_step(critics: CriticSet, batch) -> tuple[float, float]:
    s, a, r, s_next, done = batch
    v_loss = v_update(critics, s, a)
    q_loss = q_update(critics, s, a, r, s_next, done)
    soft_update(critics)
    return q_loss, v_loss


def train_critics(critics: CriticSet, s, a, r, s_next, done, *, steps: int,
                  batch_size: int = 256, rng=None, callback=None) -> list[tuple[float, float]]:
    """One V update, one Q update and one soft update per sampled minibatch."""
    rng = np.random.default_rng(rng)
    n = len(s)
    history = []
    for step in range(steps):
        idx = rng.integers(0, n, size=min(batch_size, n))
        q_loss, v_loss = train_step(critics, (s[idx], a[idx], r[idx], s_next[idx], done[idx]))
        if not (np.isfinite(q_loss) and np.isfinite(v_loss)):
            raise FloatingPointError(f"non-finite critic loss at step {step}")
        history.append((q_loss, v_loss))
        if callback is not None:
            callback(step, q_loss, v_loss)
    return history
