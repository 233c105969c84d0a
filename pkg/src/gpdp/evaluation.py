"""Monte Carlo evaluation: undiscounted episode returns, reports, and the
statistical checks used to compare policies."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.distance import cdist
from scipy.stats import mannwhitneyu

from . import gpr
from .diffusion import sample_actions
from .envdata import EnvConfig, PointReacherEnv, ShiftSpec

TRACE_HEADER = ("t", "reward", "condition")


@dataclass
class EpisodeResult:
    seed: int
    rewards: np.ndarray
    states: np.ndarray  # states at which actions were chosen
    actions: np.ndarray
    shift_active: np.ndarray

    @property
    def ret(self) -> float:
        return float(np.sum(self.rewards))


def episode_rngs(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    env_ss, pol_ss = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(env_ss), np.random.default_rng(pol_ss)


def run_episode(policy, env_cfg: EnvConfig, seed: int, shift: ShiftSpec | None = None) -> EpisodeResult:
    env_rng, pol_rng = episode_rngs(seed)
    env = PointReacherEnv(env_cfg, shift)
    s = env.reset(env_rng)
    rewards, states, actions, flags = [], [], [], []
    while True:
        a = np.asarray(policy(s, pol_rng), dtype=np.float64)
        flags.append(env.shift_active)
        states.append(s)
        actions.append(a)
        s, r, terminal, truncated = env.step(a)
        rewards.append(r)
        if terminal or truncated:
            break
    return EpisodeResult(seed, np.array(rewards), np.array(states), np.array(actions), np.array(flags))


@dataclass
class EvalReport:
    condition: str
    policy: str
    seeds: list[int]
    returns: list[float]
    mean: float
    max: float
    trace_paths: list[str] = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_episodes(cls, episodes: list[EpisodeResult], condition: str, policy: str) -> "EvalReport":
        rets = [e.ret for e in episodes]
        return cls(condition, policy, [e.seed for e in episodes], rets,
                   float(np.mean(rets)), float(np.max(rets)))

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2) + "\n"


def evaluate(policy, env_cfg: EnvConfig, seeds, condition: str = "normal",
             shift: ShiftSpec | None = None, policy_name: str = "gpdp"):
    if condition not in ("normal", "shift"):
        raise ValueError(f"unknown condition {condition!r}")
    if condition == "shift" and shift is None:
        raise ValueError("shift condition needs a ShiftSpec")
    episodes = [run_episode(policy, env_cfg, int(s), shift if condition == "shift" else None)
                for s in seeds]
    return EvalReport.from_episodes(episodes, condition, policy_name), episodes


def write_traces(report: EvalReport, episodes: list[EpisodeResult], out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for ep in episodes:
        p = out / f"trace_{report.policy}_{report.condition}_seed{ep.seed}.csv"
        with p.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(TRACE_HEADER)
            for t, r in enumerate(ep.rewards):
                w.writerow((t, repr(float(r)), report.condition))
        paths.append(p.name)
    report.trace_paths = paths


def read_trace(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return np.array([float(r["reward"]) for r in rows])


# -- statistics -------------------------------------------------------------

def energy_statistic(x: np.ndarray, y: np.ndarray) -> float:
    x = np.atleast_2d(x)
    y = np.atleast_2d(y)
    return float(2 * cdist(x, y).mean() - cdist(x, x).mean() - cdist(y, y).mean())


def energy_test(x, y, n_perm: int = 200, rng=None) -> tuple[float, float]:
    """Two-sample energy-distance permutation test. Returns (statistic, p-value)."""
    rng = np.random.default_rng(rng)
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    z = np.vstack([x, y])
    D = cdist(z, z)
    nx, n = len(x), len(z)
    ny = n - nx
    total = D.sum()

    def stat(ind):
        # block sums from one matrix-vector product: xx = i'Di, xy = i'D(1-i)
        Di = D @ ind
        xx = ind @ Di
        xy = Di.sum() - xx
        yy = total - 2 * xy - xx
        return 2 * xy / (nx * ny) - xx / nx ** 2 - yy / ny ** 2

    base = np.zeros(n)
    base[:nx] = 1.0
    observed = stat(base)
    hits = 0
    for _ in range(n_perm):
        hits += stat(rng.permutation(base)) >= observed - 1e-12 * abs(observed)
    return float(observed), float((hits + 1) / (n_perm + 1))


def improvement_test(policy_returns, behavior_returns) -> float:
    """One-sided Wilcoxon rank-sum p-value for policy > behavior."""
    return float(mannwhitneyu(policy_returns, behavior_returns, alternative="greater").pvalue)


def behavior_comparison(policy_returns, behavior_returns) -> dict:
    return {
        "behavior_mean": float(np.mean(behavior_returns)),
        "behavior_episodes": len(behavior_returns),
        "margin": float(np.mean(policy_returns) - np.mean(behavior_returns)),
        "p_value": improvement_test(policy_returns, behavior_returns),
    }


def far_field_check(bundle, episodes: list[EpisodeResult], n_draws: int = 1000, n_perm: int = 200,
                    alpha: float = 0.01, rng=None) -> dict:
    """Guided vs unguided action draws at the shifted-phase state farthest from the GP data.

    Passes when the energy test does not reject equality of the two
    distributions at level ``alpha``.
    """
    rng = np.random.default_rng(rng)
    shifted = [e.states[e.shift_active] for e in episodes if e.shift_active.any()]
    if not shifted:
        return {"evaluated": False, "reason": "no shifted-phase states"}
    states = np.vstack(shifted)
    dist = bundle.gpr_model.min_distance(states)
    k = int(np.argmax(dist))
    s = states[k]
    post = gpr.posterior(bundle.gpr_model, s)
    rep = np.repeat(bundle.norm(s)[None, :], n_draws, axis=0)
    guided = sample_actions(bundle.eps_net, rep, bundle.sched, post, rng, bundle.guidance_form)
    plain = sample_actions(bundle.eps_net, rep, bundle.sched, None, rng)
    stat, p = energy_test(guided, plain, n_perm, rng)
    return {
        "evaluated": True,
        "state": s.tolist(),
        "distance_lengthscales": float(dist[k]),
        "posterior_var": float(post.var),
        "prior_var": float(post.prior_var),
        "energy_statistic": stat,
        "p_value": p,
        "alpha": alpha,
        "passed": bool(p >= alpha),
    }
