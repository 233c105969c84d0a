"""Point-mass reacher with an actuator-disable shift, scripted behavior
controllers, and the JSONL dataset format.

State layout (d = 6): position (2), velocity (2), goal - position (2).
Actions (m = 2) are accelerations in the box [-1, 1]^2.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

STATE_DIM = 6
ACTION_DIM = 2
SCHEMA_VERSION = 1
FIELDS = ("s", "a", "r", "s_next", "done", "ep", "step", "tag")
TAGS = ("expert", "medium", "shifted")


class EnvironmentFault(RuntimeError):
    pass


@dataclass
class ShiftSpec:
    t_shift: int = 5
    actuator: int = 0
    mode: str = "zeroed"  # or "inverted"
    duration: int | None = 30  # None: permanent

    def __post_init__(self):
        if self.t_shift < 0:
            raise ValueError("t_shift must be >= 0")
        if not 0 <= self.actuator < ACTION_DIM:
            raise ValueError(f"actuator index must be < {ACTION_DIM}")
        if self.mode not in ("zeroed", "inverted"):
            raise ValueError(f"unknown shift mode {self.mode!r}")
        if self.duration is not None and self.duration < 0:
            raise ValueError("duration must be >= 0")

    def active(self, t: int) -> bool:
        if t < self.t_shift:
            return False
        return self.duration is None or t < self.t_shift + self.duration

    def apply(self, action: np.ndarray) -> np.ndarray:
        out = np.array(action, dtype=np.float64)
        out[self.actuator] = 0.0 if self.mode == "zeroed" else -out[self.actuator]
        return out


@dataclass
class EnvConfig:
    mass: float = 1.0
    drag: float = 0.5
    dt: float = 0.1
    horizon: int = 200
    goal: tuple[float, float] = (0.8, 0.8)
    goal_radius: float = 0.1
    goal_bonus: float = 10.0
    start_center: tuple[float, float] = (-0.9, -0.9)
    start_spread: float = 0.1

    def validate(self):
        if self.mass <= 0 or self.dt <= 0 or self.drag < 0 or self.drag * self.dt >= 1:
            raise ValueError("need mass > 0, dt > 0 and 0 <= drag*dt < 1")
        if self.horizon < 1 or self.goal_radius <= 0:
            raise ValueError("horizon and goal radius must be positive")


def make_state(pos, vel, goal) -> np.ndarray:
    pos = np.asarray(pos, dtype=np.float64)
    return np.concatenate([pos, np.asarray(vel, dtype=np.float64), np.asarray(goal) - pos])


def initial_state(cfg: EnvConfig, rng: np.random.Generator) -> np.ndarray:
    pos = np.asarray(cfg.start_center) + rng.uniform(-cfg.start_spread, cfg.start_spread, size=2)
    return make_state(pos, np.zeros(2), cfg.goal)


def step(cfg: EnvConfig, state, action, shift: ShiftSpec | None = None,
         shift_active: bool = False) -> tuple[np.ndarray, float, bool]:
    """Semi-implicit Euler step. Returns (next_state, reward, reached_goal)."""
    state = np.asarray(state, dtype=np.float64)
    if not np.isfinite(state).all():
        raise EnvironmentFault(f"non-finite state: {state}")
    action = np.clip(np.asarray(action, dtype=np.float64), -1.0, 1.0)
    if shift_active and shift is not None:
        action = shift.apply(action)
    pos, vel, offset = state[:2], state[2:4], state[4:6]
    goal = pos + offset
    vel2 = vel * (1.0 - cfg.drag * cfg.dt) + action / cfg.mass * cfg.dt
    pos2 = pos + vel2 * cfg.dt
    nxt = np.concatenate([pos2, vel2, goal - pos2])
    if not np.isfinite(nxt).all():
        raise EnvironmentFault(f"non-finite state after step: {nxt}")
    dist = float(np.linalg.norm(pos2 - goal))
    reached = dist < cfg.goal_radius
    reward = -dist + (cfg.goal_bonus if reached else 0.0)
    return nxt, reward, reached


class PointReacherEnv:
    """Episodic wrapper tracking time, the horizon and the shift schedule."""

    def __init__(self, cfg: EnvConfig | None = None, shift: ShiftSpec | None = None):
        self.cfg = cfg or EnvConfig()
        self.cfg.validate()
        self.shift = shift
        self.state = None
        self.t = 0

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        self.state = initial_state(self.cfg, rng)
        self.t = 0
        return self.state.copy()

    @property
    def shift_active(self) -> bool:
        return self.shift is not None and self.shift.active(self.t)

    def step(self, action):
        """Returns (next_state, reward, terminal, truncated)."""
        nxt, r, terminal = step(self.cfg, self.state, action, self.shift, self.shift_active)
        self.state = nxt
        self.t += 1
        return nxt.copy(), r, terminal, (not terminal and self.t >= self.cfg.horizon)


GAINS = {"expert": (1.2, 0.8, 0.05), "medium": (0.6, 0.4, 0.4)}


def behavior_policy(state, grade: str, rng: np.random.Generator | None, noise: bool = True):
    """PD controller toward the goal plus Gaussian noise, clipped to the box."""
    if grade not in GAINS:
        raise ValueError(f"unknown behavior grade {grade!r}")
    kp, kd, sigma = GAINS[grade]
    state = np.asarray(state, dtype=np.float64)
    a = kp * state[4:6] - kd * state[2:4]
    if noise:
        a = a + sigma * rng.standard_normal(2)
    return np.clip(a, -1.0, 1.0)


# -- datasets ---------------------------------------------------------------

@dataclass
class Dataset:
    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s_next: np.ndarray
    done: np.ndarray
    ep: np.ndarray
    step: np.ndarray
    tag: np.ndarray
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.r)

    def episode_ids(self) -> np.ndarray:
        return np.unique(self.ep)

    def episode_slices(self) -> dict[int, np.ndarray]:
        order = np.lexsort((self.step, self.ep))
        ids, starts = np.unique(self.ep[order], return_index=True)
        bounds = list(starts[1:]) + [len(order)]
        return {int(i): order[b0:b1] for i, b0, b1 in zip(ids, starts, bounds)}

    def episode_returns(self, tags=None) -> dict[int, float]:
        out = {}
        for ep, idx in self.episode_slices().items():
            if tags is not None and self.tag[idx[0]] not in tags:
                continue
            out[ep] = float(np.sum(self.r[idx]))
        return out

    def state_stats(self) -> tuple[np.ndarray, np.ndarray]:
        std = self.s.std(axis=0)
        return self.s.mean(axis=0), np.where(std > 1e-12, std, 1.0)


PLAN_BLOCK = 20


def episode_plan(ep: int, shift_fraction: float = 0.1) -> tuple[str, bool]:
    """Grade and shift flag for an episode id.

    Episodes are laid out in blocks of 20: an even expert/medium split of the
    unshifted slots, then the shifted slots alternating expert and medium.
    With the default fraction that is 9 expert, 9 medium and 2 shifted.
    """
    n_shift = int(round(shift_fraction * PLAN_BLOCK))
    n_plain = PLAN_BLOCK - n_shift
    k = ep % PLAN_BLOCK
    if k < n_plain:
        return ("expert" if k < (n_plain + 1) // 2 else "medium"), False
    return ("expert" if (k - n_plain) % 2 == 0 else "medium"), True


@dataclass
class DataConfig:
    n_transitions: int = 100_000
    shift_fraction: float = 0.1
    shift_duration: int = 30
    shift_t_max: int = 20
    shift_mode: str = "zeroed"

    def validate(self):
        if self.n_transitions < 1:
            raise ValueError("n_transitions must be >= 1")
        if not 0 <= self.shift_fraction <= 1:
            raise ValueError("shift_fraction must be in [0, 1]")
        if self.shift_duration < 0 or self.shift_t_max < 0:
            raise ValueError("shift timings must be >= 0")
        if self.shift_mode not in ("zeroed", "inverted"):
            raise ValueError(f"unknown shift mode {self.shift_mode!r}")


def rollout_episode(env_cfg: EnvConfig, data_cfg: DataConfig, seed: int, ep: int):
    rng = np.random.default_rng([seed, ep])
    grade, shifted = episode_plan(ep, data_cfg.shift_fraction)
    shift = None
    if shifted:
        shift = ShiftSpec(t_shift=int(rng.integers(0, data_cfg.shift_t_max + 1)),
                          actuator=int(rng.integers(0, ACTION_DIM)), mode=data_cfg.shift_mode,
                          duration=data_cfg.shift_duration)
    env = PointReacherEnv(env_cfg, shift)
    s = env.reset(rng)
    rows = []
    tag = "shifted" if shifted else grade
    while True:
        a = behavior_policy(s, grade, rng)
        s2, r, terminal, truncated = env.step(a)
        rows.append((s, a, r, s2, terminal, ep, env.t - 1, tag))
        s = s2
        if terminal or truncated:
            return rows


def generate_dataset(env_cfg: EnvConfig, data_cfg: DataConfig, seed: int) -> Dataset:
    """Roll complete episodes until at least ``n_transitions`` are collected."""
    env_cfg.validate()
    data_cfg.validate()
    rows = []
    ep = 0
    while len(rows) < data_cfg.n_transitions:
        rows.extend(rollout_episode(env_cfg, data_cfg, seed, ep))
        ep += 1
    ds = _from_rows(rows)
    ds.meta = build_meta(ds, env_cfg, data_cfg, seed)
    return ds


def _from_rows(rows) -> Dataset:
    cols = list(zip(*rows))
    return Dataset(
        s=np.array(cols[0], dtype=np.float64).reshape(-1, STATE_DIM),
        a=np.array(cols[1], dtype=np.float64).reshape(-1, ACTION_DIM),
        r=np.array(cols[2], dtype=np.float64),
        s_next=np.array(cols[3], dtype=np.float64).reshape(-1, STATE_DIM),
        done=np.array(cols[4], dtype=bool),
        ep=np.array(cols[5], dtype=np.int64),
        step=np.array(cols[6], dtype=np.int64),
        tag=np.array(cols[7], dtype=object),
    )


def build_meta(ds: Dataset, env_cfg: EnvConfig, data_cfg: DataConfig, seed: int) -> dict:
    ep_tags = {int(e): ds.tag[i] for e, i in zip(*np.unique(ds.ep, return_index=True))}
    mean, std = ds.state_stats()
    return {
        "schema_version": SCHEMA_VERSION,
        "env": asdict(env_cfg),
        "data": asdict(data_cfg),
        "seed": seed,
        "state_dim": STATE_DIM,
        "action_dim": ACTION_DIM,
        "n_transitions": len(ds),
        "n_episodes": len(ep_tags),
        "episodes_per_tag": {t: sum(1 for v in ep_tags.values() if v == t) for t in TAGS},
        "transitions_per_tag": {t: int(np.sum(ds.tag == t)) for t in TAGS},
        "state_mean": mean.tolist(),
        "state_std": std.tolist(),
        "reward_mean": float(ds.r.mean()),
        "reward_std": float(ds.r.std()),
    }


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def _vec(v) -> str:
    return "[" + ", ".join(_fmt(x) for x in v) + "]"


def write_dataset(ds: Dataset, out_dir) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    if not out_dir.is_dir():
        raise FileNotFoundError(f"output directory does not exist: {out_dir}")
    data_path = out_dir / "dataset.jsonl"
    meta_path = out_dir / "dataset.meta.json"
    lines = []
    for k in range(len(ds)):
        lines.append(
            f'{{"s": {_vec(ds.s[k])}, "a": {_vec(ds.a[k])}, "r": {_fmt(ds.r[k])}, '
            f'"s_next": {_vec(ds.s_next[k])}, "done": {"true" if ds.done[k] else "false"}, '
            f'"ep": {int(ds.ep[k])}, "step": {int(ds.step[k])}, "tag": "{ds.tag[k]}"}}\n')
    data_path.write_text("".join(lines))
    meta_path.write_text(json.dumps(ds.meta, indent=2, sort_keys=True) + "\n")
    return data_path, meta_path


def load_dataset(path) -> Dataset:
    """Load ``dataset.jsonl`` (or the directory holding it) plus its sidecar."""
    path = Path(path)
    if path.is_dir():
        path = path / "dataset.jsonl"
    rows = []
    with path.open() as fh:
        for line in fh:
            if line.strip():
                d = json.loads(line)
                rows.append(tuple(d[k] for k in FIELDS))
    if not rows:
        raise ValueError(f"{path}: empty dataset")
    ds = _from_rows(rows)
    meta_path = path.with_name(path.name.replace(".jsonl", ".meta.json"))
    if meta_path.exists():
        ds.meta = json.loads(meta_path.read_text())
    return ds
