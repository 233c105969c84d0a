"""Discrete VP-SDE diffusion over actions, conditioned on the state.

The reverse chain runs i = N..1 from a^N ~ N(0, I). Each step draws from
N(mu, beta_i I), where mu is the epsilon-parameterized DDPM mean, optionally
shifted toward a Gaussian guidance density N(mu_w, var_w I) supplied by a GP
posterior. The last step (i = 1) adds no noise and clips to the action box.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gpr import GprPosterior
from .nnengine import AdamState, MlpNet, adam_step, backward, forward, forward_cache, init_mlp

EMBED_DIM = 16
ACTION_LOW, ACTION_HIGH = -1.0, 1.0


class ScheduleError(ValueError):
    pass


class GuidanceError(ValueError):
    pass


@dataclass(frozen=True)
class DiffusionSchedule:
    betas: np.ndarray  # betas[i - 1] is beta^i
    alpha_bars: np.ndarray

    def __post_init__(self):
        b = self.betas
        if b.ndim != 1 or len(b) < 1:
            raise ScheduleError("need at least one diffusion step")
        if not np.all((b > 0) & (b < 1)):
            raise ScheduleError(f"every beta must lie in (0, 1), got {b.tolist()}")
        if not np.all(np.diff(self.alpha_bars) < 0) or not np.all(
                (self.alpha_bars > 0) & (self.alpha_bars < 1)):
            raise ScheduleError("alpha_bar must be strictly decreasing inside (0, 1)")

    @property
    def n(self) -> int:
        return len(self.betas)

    def beta(self, i):
        return self.betas[np.asarray(i) - 1]

    def alpha_bar(self, i):
        return self.alpha_bars[np.asarray(i) - 1]

    def check_step(self, i):
        i = np.asarray(i)
        if np.any((i < 1) | (i > self.n)):
            raise ScheduleError(f"diffusion step outside 1..{self.n}: {i}")


def make_schedule(n: int = 5, beta_min: float = 0.1, beta_max: float = 10.0,
                  kind: str = "vp") -> DiffusionSchedule:
    """Per-step rates for an N-step chain.

    ``kind="vp"`` integrates the linear VP-SDE rate beta(t) over each of the
    N equal sub-intervals of [0, 1]; ``kind="linear"`` spaces
    beta_min/N..beta_max/N linearly and rejects settings that reach 1.
    """
    if n < 1:
        raise ScheduleError("n must be >= 1")
    if not 0 < beta_min <= beta_max:
        raise ScheduleError("need 0 < beta_min <= beta_max")
    i = np.arange(1, n + 1, dtype=np.float64)
    if kind == "vp":
        betas = 1.0 - np.exp(-beta_min / n - (beta_max - beta_min) * (2 * i - 1) / (2 * n * n))
    elif kind == "linear":
        frac = (i - 1) / (n - 1) if n > 1 else np.zeros(1)
        betas = (beta_min + frac * (beta_max - beta_min)) / n
    else:
        raise ScheduleError(f"unknown schedule kind {kind!r}")
    if np.any(betas >= 1):
        raise ScheduleError(f"schedule produces beta >= 1: {betas.tolist()}")
    return DiffusionSchedule(betas, np.cumprod(1.0 - betas))


def timestep_embedding(i, dim: int = EMBED_DIM) -> np.ndarray:
    i = np.atleast_1d(np.asarray(i, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    args = i[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


@dataclass
class EpsNet:
    """Noise estimator eps(s, a^i, i) on top of an MLP."""

    mlp: MlpNet
    state_dim: int
    action_dim: int

    @classmethod
    def create(cls, state_dim: int, action_dim: int, hidden: int = 64, rng=0) -> "EpsNet":
        return cls(init_mlp(state_dim + action_dim + EMBED_DIM, action_dim, hidden, rng=rng),
                   state_dim, action_dim)

    def inputs(self, s, a, i) -> np.ndarray:
        s = np.atleast_2d(s)
        a = np.atleast_2d(a)
        i = np.broadcast_to(np.asarray(i), (a.shape[0],))
        return np.concatenate([s, a, timestep_embedding(i)], axis=1)

    def predict(self, s, a, i) -> np.ndarray:
        return forward(self.mlp, self.inputs(s, a, i))


def forward_noise(a0, i, eps, sched: DiffusionSchedule) -> np.ndarray:
    sched.check_step(i)
    ab = np.asarray(sched.alpha_bar(i))
    if ab.ndim:
        ab = ab[:, None]
    return np.sqrt(ab) * np.asarray(a0) + np.sqrt(1.0 - ab) * np.asarray(eps)


def eps_loss(net, states, actions, sched: DiffusionSchedule, rng=None, *,
             noise=None, steps=None, with_grad: bool = True):
    """Batch estimate of E||eps - eps_theta(s, noised a, i)||^2 with i ~ U{1..N}.

    ``noise`` and ``steps`` may be injected; otherwise they are drawn from
    ``rng``. Returns ``(loss, grads)`` where grads is None without
    ``with_grad``.
    """
    states = np.atleast_2d(states)
    actions = np.atleast_2d(actions)
    B = actions.shape[0]
    if B == 0:
        raise ValueError("empty batch")
    if steps is None:
        steps = rng.integers(1, sched.n + 1, size=B)
    if noise is None:
        noise = rng.standard_normal(actions.shape)
    noised = forward_noise(actions, steps, noise, sched)
    if with_grad:
        x = net.inputs(states, noised, steps)
        pred, cache = forward_cache(net.mlp, x)
    else:
        pred = net.predict(states, noised, steps)
    diff = pred - noise
    loss = float(np.mean(np.sum(diff * diff, axis=1)))
    if not with_grad:
        return loss, None
    return loss, backward(net.mlp, x, 2.0 * diff / B, cache)


def train_eps(net: EpsNet, states, actions, sched, *, steps: int, batch_size: int = 256,
              lr: float = 3e-4, rng=None, adam: AdamState | None = None, callback=None):
    """Minibatch Adam on the noise-prediction loss. Returns the loss history."""
    rng = np.random.default_rng(rng)
    adam = adam or AdamState.for_net(net.mlp, lr=lr)
    n = len(actions)
    history = []
    for step in range(steps):
        idx = rng.integers(0, n, size=min(batch_size, n))
        loss, grads = eps_loss(net, states[idx], actions[idx], sched, rng)
        if not np.isfinite(loss):
            raise FloatingPointError(f"non-finite diffusion loss at step {step}")
        adam_step(net.mlp, grads, adam)
        history.append(loss)
        if callback is not None:
            callback(step, loss)
    return history


def reverse_mean(net, s, a_i, i, sched: DiffusionSchedule) -> np.ndarray:
    """DDPM mean (a^i - beta/sqrt(1 - alpha_bar) * eps_hat) / sqrt(1 - beta)."""
    sched.check_step(i)
    beta = sched.beta(i)
    ab = sched.alpha_bar(i)
    eps_hat = net.predict(s, a_i, i)
    return (np.atleast_2d(a_i) - beta / np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(1.0 - beta)


# -- guidance -----------------------------------------------------------------

def gaussian_logpdf_grad(y, mean, cov) -> np.ndarray:
    """d/dy log N(y | mean, cov) for a full covariance matrix (dense solve)."""
    y = np.asarray(y, dtype=np.float64)
    cov = np.asarray(cov, dtype=np.float64)
    if cov.ndim < 2:
        cov = cov * np.eye(y.shape[-1])
    return -np.linalg.solve(cov, y - np.asarray(mean, dtype=np.float64))


def score_guided_mean(mu, cov_theta, grad_log_g) -> np.ndarray:
    """mu + Sigma_theta * grad log g, with Sigma_theta scalar or a matrix."""
    cov_theta = np.asarray(cov_theta, dtype=np.float64)
    if cov_theta.ndim == 2:
        return mu + cov_theta @ grad_log_g
    return mu + cov_theta * grad_log_g


def perturbed_mean(mu, var_theta, mu_w, var_w) -> np.ndarray:
    """First-order guided mean mu - var_theta / var_w * (mu - mu_w).

    Scalar variances broadcast over the action dimensions; ``mu`` may be a
    batch (B, m) with ``var_w`` of shape (B,).
    """
    var_w = np.asarray(var_w, dtype=np.float64)
    if np.any(var_w <= 0):
        raise GuidanceError("guidance variance must be positive")
    gain = np.asarray(var_theta, dtype=np.float64) / var_w
    if gain.ndim:
        gain = gain[..., None]
    return mu - gain * (mu - mu_w)


def conjugate_mean(mu, var_theta, mu_w, var_w, prior_var) -> np.ndarray:
    """Guided mean from the exact product N(mu, var_theta) * N(mu_w, 1/lam).

    ``lam = 1/var_w - 1/prior_var`` is the precision the GP gained from its
    training data. It is zero once the query decorrelates from every
    training state, which makes the step identical to the unguided one,
    and the gain ``var_theta*lam / (1 + var_theta*lam)`` always lies in [0, 1).
    """
    var_w = np.asarray(var_w, dtype=np.float64)
    if np.any(var_w <= 0):
        raise GuidanceError("guidance variance must be positive")
    lam = np.maximum(1.0 / var_w - 1.0 / prior_var, 0.0)
    r = np.asarray(var_theta, dtype=np.float64) * lam
    gain = r / (1.0 + r)
    if gain.ndim:
        gain = gain[..., None]
    return mu - gain * (mu - mu_w)


GUIDANCE_FORMS = ("conjugate", "perturbation")


def guided_mean(mu, beta_i, post: GprPosterior, form: str = "conjugate") -> np.ndarray:
    if form == "conjugate":
        return conjugate_mean(mu, beta_i, post.mean, post.var, post.prior_var)
    if form == "perturbation":
        return perturbed_mean(mu, beta_i, post.mean, post.var)
    raise ValueError(f"unknown guidance form {form!r}")


@dataclass
class ReverseStep:
    mean: np.ndarray  # unguided mu_theta
    guided: np.ndarray  # equals mean when no guidance
    var: float  # beta_i, shared by every action dimension
    sample: np.ndarray


def reverse_step(net, s, a_i, i: int, sched: DiffusionSchedule, guidance: GprPosterior | None,
                 rng, form: str = "conjugate") -> ReverseStep:
    mu = reverse_mean(net, s, a_i, i, sched)
    beta = float(sched.beta(i))
    guided = mu if guidance is None else guided_mean(mu, beta, guidance, form)
    if i > 1:
        out = guided + np.sqrt(beta) * rng.standard_normal(guided.shape)
    else:
        out = np.clip(guided, ACTION_LOW, ACTION_HIGH)
    return ReverseStep(mu, guided, beta, out)


def sample_actions(net, states, sched: DiffusionSchedule, guidance: GprPosterior | None = None,
                   rng=None, form: str = "conjugate") -> np.ndarray:
    """Run the full reverse chain for a batch of states (one action per row)."""
    rng = np.random.default_rng(rng)
    states = np.atleast_2d(states)
    a = rng.standard_normal((states.shape[0], net.action_dim))
    for i in range(sched.n, 0, -1):
        a = reverse_step(net, states, a, i, sched, guidance, rng, form).sample
    return a


def sample_action(net, state, sched, guidance=None, rng=None, form="conjugate") -> np.ndarray:
    return sample_actions(net, np.asarray(state)[None, :], sched, guidance, rng, form)[0]
