"""Staged, resumable training of a policy bundle.

Stages run in order: critics, noise-prediction network, greedy relabeling,
GP fit. Each stage draws from its own seeded stream and leaves a marker file
once its outputs are on disk, so an interrupted run picks up where it stopped
and still produces the same bytes as an uninterrupted one.
"""

from __future__ import annotations

import csv
import json
import logging
from pathlib import Path

import numpy as np

from . import critic as critic_mod
from . import diffusion
from . import gpr
from .config import RunConfig
from .critic import CriticSet
from .diffusion import EpsNet, make_schedule
from .envdata import Dataset
from .nnengine import load_checkpoint, save_checkpoint
from .policy import (AlteredActionSet, BestTrajectory, Normalizer, PolicyBundle,
                     relabel, select_best_trajectory)

log = logging.getLogger(__name__)

STAGES = ("critic", "eps", "relabel", "gpr")
METRICS_HEADER = ("step", "stage", "loss")
CRITIC_HEADER = ("step", "q_loss", "v_loss")


class TrainingDiverged(FloatingPointError):
    def __init__(self, stage: str, step: int, detail: str = ""):
        self.stage, self.step = stage, step
        super().__init__(f"non-finite loss in stage '{stage}' at step {step}"
                         + (f" ({detail})" if detail else ""))


def marker_path(bundle_dir, k: int) -> Path:
    return Path(bundle_dir) / f"stage_{k}_{STAGES[k]}.done"


def completed_stages(bundle_dir) -> list[int]:
    return [k for k in range(len(STAGES)) if marker_path(bundle_dir, k).exists()]


def stage_rng(seed: int, k: int) -> np.random.Generator:
    return np.random.default_rng([seed, k])


def state_normalizer(ds: Dataset) -> Normalizer:
    return Normalizer(*ds.state_stats())


def _write_metrics(bundle_dir: Path, stage: str, losses) -> None:
    """Replace this stage's rows in metrics.csv, keeping other stages' rows."""
    path = bundle_dir / "metrics.csv"
    rows = []
    if path.exists():
        with path.open(newline="") as fh:
            rows = [r for r in csv.DictReader(fh) if r["stage"] != stage]
    rows += [{"step": str(i), "stage": stage, "loss": repr(float(v))} for i, v in enumerate(losses)]
    order = {s: k for k, s in enumerate(STAGES)}
    rows.sort(key=lambda r: (order.get(r["stage"], len(STAGES)), int(r["step"])))
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, METRICS_HEADER)
        w.writeheader()
        w.writerows(rows)


def read_metrics(bundle_dir) -> dict[str, np.ndarray]:
    out: dict[str, list] = {}
    with (Path(bundle_dir) / "metrics.csv").open(newline="") as fh:
        for r in csv.DictReader(fh):
            out.setdefault(r["stage"], []).append(float(r["loss"]))
    return {k: np.array(v) for k, v in out.items()}


def _guarded(stage: str, fn, *args, **kwargs):
    """Run a training loop, turning divergence into TrainingDiverged(stage, step)."""
    done = [0]

    def count(step, *_):
        done[0] = step + 1

    try:
        return fn(*args, callback=count, **kwargs)
    except FloatingPointError as exc:
        raise TrainingDiverged(stage, done[0], str(exc)) from None


def _train_critics(cfg: RunConfig, ds: Dataset, norm: Normalizer, out: Path) -> None:
    rng = stage_rng(cfg.seed, 0)
    c = CriticSet.create(ds.s.shape[1], ds.a.shape[1], cfg.optim.hidden, rng, cfg.optim.lr,
                         tau=cfg.critic.tau, eta=cfg.critic.eta, gamma=cfg.critic.gamma)
    hist = _guarded("critic", critic_mod.train_critics, c, norm(ds.s), ds.a, ds.r, norm(ds.s_next),
                    ds.done.astype(np.float64), steps=cfg.optim.critic_steps,
                    batch_size=cfg.optim.batch_size, rng=rng)
    for name, net in (("q_net", c.q_net), ("q_target", c.q_target), ("v_net", c.v_net)):
        save_checkpoint(net, out / f"{name}.bin")
    with (out / "critic.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CRITIC_HEADER)
        for i, (q, v) in enumerate(hist):
            w.writerow((i, repr(q), repr(v)))
    _write_metrics(out, "critic", [q for q, _ in hist])


def _train_eps(cfg: RunConfig, ds: Dataset, norm: Normalizer, out: Path) -> None:
    rng = stage_rng(cfg.seed, 1)
    sched = make_schedule(cfg.schedule.n, cfg.schedule.beta_min, cfg.schedule.beta_max, cfg.schedule.kind)
    net = EpsNet.create(ds.s.shape[1], ds.a.shape[1], cfg.optim.hidden, rng)
    hist = _guarded("eps", diffusion.train_eps, net, norm(ds.s), ds.a, sched,
                    steps=cfg.optim.eps_steps, batch_size=cfg.optim.batch_size,
                    lr=cfg.optim.lr, rng=rng)
    save_checkpoint(net.mlp, out / "eps_net.bin")
    _write_metrics(out, "eps", hist)


def load_critics(cfg: RunConfig, out: Path) -> CriticSet:
    return CriticSet(load_checkpoint(out / "q_net.bin"), load_checkpoint(out / "q_target.bin"),
                     load_checkpoint(out / "v_net.bin"), cfg.critic.tau, cfg.critic.eta, cfg.critic.gamma)


def load_eps(ds: Dataset, out: Path) -> EpsNet:
    return EpsNet(load_checkpoint(out / "eps_net.bin"), ds.s.shape[1], ds.a.shape[1])


def _relabel(cfg: RunConfig, ds: Dataset, norm: Normalizer, out: Path) -> None:
    rng = stage_rng(cfg.seed, 2)
    sched = make_schedule(cfg.schedule.n, cfg.schedule.beta_min, cfg.schedule.beta_max, cfg.schedule.kind)
    traj = select_best_trajectory(ds, cfg.gpr.cap, cfg.policy.top_k)
    alt = relabel(traj, load_eps(ds, out), sched, load_critics(cfg, out), cfg.policy.M, rng, norm,
                  include_original=cfg.policy.include_original)
    doc = {
        "episode_id": traj.episode_id,
        "episode_ids": traj.episode_ids,
        "return": traj.ret,
        "states": traj.states.tolist(),
        "actions": traj.actions.tolist(),
        "altered_actions": alt.actions.tolist(),
        "q_values": alt.q_values.tolist(),
        "n_candidates": alt.n_candidates,
        "original_q": None if alt.original_q is None else alt.original_q.tolist(),
        "chose_original": None if alt.chose_original is None else alt.chose_original.tolist(),
    }
    (out / "relabel.json").write_text(json.dumps(doc) + "\n")


def load_relabel(path) -> tuple[BestTrajectory, AlteredActionSet]:
    doc = json.loads(Path(path).read_text())
    traj = BestTrajectory(np.array(doc["states"]), np.array(doc["actions"]), doc["return"],
                          doc["episode_id"], doc["episode_ids"])
    orig = doc["original_q"]
    chose = doc["chose_original"]
    alt = AlteredActionSet(np.array(doc["altered_actions"]), np.array(doc["q_values"]), doc["n_candidates"],
                           None if orig is None else np.array(orig),
                           None if chose is None else np.array(chose, dtype=bool))
    return traj, alt


def _fit_gpr(cfg: RunConfig, ds: Dataset, norm: Normalizer, out: Path) -> None:
    traj, alt = load_relabel(out / "relabel.json")
    model, trace = gpr.fit(traj.states, alt.actions, None, cfg.gpr.restarts, seed=cfg.seed,
                           iters=cfg.gpr.iters, lr=cfg.gpr.lr, stats=(norm.mean, norm.std),
                           cap=cfg.gpr.cap, bounds=tuple(cfg.gpr.log_bounds), return_trace=True)
    gpr.save_snapshot(model, out / "gpr.bin")
    _write_metrics(out, "gpr", [val for *_, val in trace])
    bundle = PolicyBundle(load_eps(ds, out), load_critics(cfg, out), model,
                          make_schedule(cfg.schedule.n, cfg.schedule.beta_min, cfg.schedule.beta_max,
                                        cfg.schedule.kind),
                          norm, cfg.policy.M, cfg.policy.guidance_form,
                          {"n": cfg.schedule.n, "beta_min": cfg.schedule.beta_min,
                           "beta_max": cfg.schedule.beta_max, "kind": cfg.schedule.kind})
    (out / "policy.json").write_text(json.dumps(bundle.describe(), indent=2) + "\n")


_RUNNERS = (_train_critics, _train_eps, _relabel, _fit_gpr)


def train_bundle(cfg: RunConfig, ds: Dataset, bundle_dir, stop_after: int | None = None) -> list[int]:
    """Run every stage without a marker. Returns the stage indices actually run.

    ``stop_after`` ends the run once that stage has completed, leaving the
    bundle in the state an interrupted run would.
    """
    out = Path(bundle_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.dumps())
    norm = state_normalizer(ds)
    ran = []
    for k, runner in enumerate(_RUNNERS):
        if marker_path(out, k).exists():
            log.info("stage %d (%s) already complete, skipping", k, STAGES[k])
        else:
            log.info("stage %d (%s) starting", k, STAGES[k])
            runner(cfg, ds, norm, out)
            marker_path(out, k).write_text("done\n")
            ran.append(k)
        if stop_after is not None and k >= stop_after:
            break
    return ran
