"""Guided diffusion policy assembly.

The GP is trained on the states of the highest-return dataset episodes
(``top_k`` of them, concatenated up to the GP cap), with each state's target
replaced by the highest-Q action among unguided diffusion
samples. At decision time its posterior at the current observation guides
every reverse step; away from the training states the guidance fades out.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import gpr
from .critic import CriticSet
from .diffusion import DiffusionSchedule, EpsNet, make_schedule, sample_actions
from .envdata import Dataset
from .nnengine import load_checkpoint, save_checkpoint


@dataclass(frozen=True)
class Normalizer:
    mean: np.ndarray
    std: np.ndarray

    def __call__(self, s) -> np.ndarray:
        return (np.asarray(s, dtype=np.float64) - self.mean) / self.std

    @classmethod
    def identity(cls, dim: int) -> "Normalizer":
        return cls(np.zeros(dim), np.ones(dim))


@dataclass
class BestTrajectory:
    states: np.ndarray
    actions: np.ndarray
    ret: float
    episode_id: int
    episode_ids: list[int] = field(default_factory=list)

    @property
    def H(self) -> int:
        return len(self.states)


@dataclass
class AlteredActionSet:
    actions: np.ndarray  # (H, m)
    q_values: np.ndarray  # Q of the chosen action
    n_candidates: int
    original_q: np.ndarray | None = None
    chose_original: np.ndarray | None = None


def select_best_trajectory(ds: Dataset, cap: int = gpr.DEFAULT_CAP, top_k: int = 1) -> BestTrajectory:
    """Episode(s) with the highest undiscounted return, lower id first on ties."""
    if len(ds) == 0:
        raise ValueError("empty dataset")
    slices = ds.episode_slices()
    rets = {ep: float(np.sum(ds.r[idx])) for ep, idx in slices.items()}
    ranked = sorted(rets, key=lambda ep: (-rets[ep], ep))[:max(top_k, 1)]
    idx = np.concatenate([slices[ep] for ep in ranked])[:cap]
    return BestTrajectory(ds.s[idx].copy(), ds.a[idx].copy(), rets[ranked[0]], ranked[0], ranked)


def relabel(traj: BestTrajectory, eps_net: EpsNet, sched: DiffusionSchedule, critics: CriticSet,
            M: int = 16, rng=None, norm: Normalizer | None = None,
            include_original: bool = True) -> AlteredActionSet:
    """Greedy targets: argmax over M unguided samples (plus the logged action) of Q."""
    if M < 1:
        raise ValueError("need at least one candidate")
    rng = np.random.default_rng(rng)
    norm = norm or Normalizer.identity(traj.states.shape[1])
    H = traj.H
    sn = norm(traj.states)
    rep = np.repeat(sn, M, axis=0)
    cands = sample_actions(eps_net, rep, sched, rng=rng).reshape(H, M, -1)
    if include_original:
        cands = np.concatenate([cands, traj.actions[:, None, :]], axis=1)
    K = cands.shape[1]
    q = critics.q(np.repeat(sn, K, axis=0), cands.reshape(H * K, -1)).reshape(H, K)
    best = np.argmax(q, axis=1)  # first maximum wins ties
    rows = np.arange(H)
    orig_q = critics.q(sn, traj.actions) if include_original else None
    return AlteredActionSet(
        actions=cands[rows, best].copy(),
        q_values=q[rows, best].copy(),
        n_candidates=K,
        original_q=orig_q,
        chose_original=(best == M) if include_original else None,
    )


def build_guidance(traj: BestTrajectory, altered: AlteredActionSet, *, init=None, restarts: int = 4,
                   seed: int = 0, stats=None, cap: int = gpr.DEFAULT_CAP,
                   bounds=gpr.LOG_BOUNDS) -> gpr.GprModel:
    if len(altered.actions) != traj.H:
        raise ValueError("altered action count differs from trajectory length")
    return gpr.fit(traj.states, altered.actions, init, restarts, seed=seed, stats=stats, cap=cap,
                   bounds=bounds)


def act(state, eps_net: EpsNet, sched: DiffusionSchedule, gpr_model: gpr.GprModel, rng,
        norm: Normalizer | None = None, form: str = "conjugate") -> np.ndarray:
    """One guided action: GP posterior at the raw state, then the reverse chain."""
    post = gpr.posterior(gpr_model, state)
    s = state if norm is None else norm(state)
    return sample_actions(eps_net, np.atleast_2d(s), sched, post, rng, form)[0]


def greedy_act(state, eps_net, sched, critics: CriticSet, M: int, rng,
               norm: Normalizer | None = None) -> np.ndarray:
    """Ablation without a GP: best of M unguided samples under Q, at every step."""
    s = np.atleast_2d(state if norm is None else norm(state))
    rep = np.repeat(s, M, axis=0)
    cands = sample_actions(eps_net, rep, sched, rng=rng)
    return cands[int(np.argmax(critics.q(rep, cands)))]


# -- bundle -----------------------------------------------------------------

class IncompleteBundleError(FileNotFoundError):
    pass


BUNDLE_FILES = ("eps_net.bin", "q_net.bin", "q_target.bin", "v_net.bin", "gpr.bin", "policy.json")


@dataclass
class PolicyBundle:
    eps_net: EpsNet
    critics: CriticSet
    gpr_model: gpr.GprModel
    sched: DiffusionSchedule
    norm: Normalizer
    M: int = 16
    guidance_form: str = "conjugate"
    schedule_params: dict = field(default_factory=dict)

    def policy(self, kind: str = "gpdp"):
        """Callable (state, rng) -> action for 'gpdp', 'greedy' or 'diffusion'."""
        if kind == "gpdp":
            return lambda s, rng: act(s, self.eps_net, self.sched, self.gpr_model, rng,
                                      self.norm, self.guidance_form)
        if kind == "greedy":
            return lambda s, rng: greedy_act(s, self.eps_net, self.sched, self.critics, self.M,
                                             rng, self.norm)
        if kind == "diffusion":
            return lambda s, rng: sample_actions(self.eps_net, self.norm(s)[None, :], self.sched,
                                                 rng=rng)[0]
        raise ValueError(f"unknown policy kind {kind!r}")

    def save(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(self.eps_net.mlp, out / "eps_net.bin")
        save_checkpoint(self.critics.q_net, out / "q_net.bin")
        save_checkpoint(self.critics.q_target, out / "q_target.bin")
        save_checkpoint(self.critics.v_net, out / "v_net.bin")
        gpr.save_snapshot(self.gpr_model, out / "gpr.bin")
        (out / "policy.json").write_text(json.dumps(self.describe(), indent=2) + "\n")

    def describe(self) -> dict:
        return {
            "state_dim": self.eps_net.state_dim,
            "action_dim": self.eps_net.action_dim,
            "schedule": self.schedule_params,
            "critic": {"tau": self.critics.tau, "eta": self.critics.eta, "gamma": self.critics.gamma},
            "norm_mean": self.norm.mean.tolist(),
            "norm_std": self.norm.std.tolist(),
            "M": self.M,
            "guidance_form": self.guidance_form,
        }

    @classmethod
    def load(cls, bundle_dir) -> "PolicyBundle":
        d = Path(bundle_dir)
        missing = [f for f in BUNDLE_FILES if not (d / f).exists()]
        if missing:
            raise IncompleteBundleError(f"incomplete bundle {d}: missing {', '.join(missing)}")
        meta = json.loads((d / "policy.json").read_text())
        eps = EpsNet(load_checkpoint(d / "eps_net.bin"), meta["state_dim"], meta["action_dim"])
        c = meta["critic"]
        critics = CriticSet(load_checkpoint(d / "q_net.bin"), load_checkpoint(d / "q_target.bin"),
                            load_checkpoint(d / "v_net.bin"), c["tau"], c["eta"], c["gamma"])
        sp = meta["schedule"]
        sched = make_schedule(sp["n"], sp["beta_min"], sp["beta_max"], sp.get("kind", "vp"))
        norm = Normalizer(np.array(meta["norm_mean"]), np.array(meta["norm_std"]))
        return cls(eps, critics, gpr.load_snapshot(d / "gpr.bin"), sched, norm, meta["M"],
                   meta["guidance_form"], sp)
