import hashlib
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import mannwhitneyu

from gpdp.envdata import (DataConfig, EnvConfig, EnvironmentFault, PointReacherEnv, ShiftSpec,
                          behavior_policy, episode_plan, generate_dataset, load_dataset, make_state,
                          rollout_episode, step, write_dataset)


@pytest.fixture(scope="module")
def small_ds():
    return generate_dataset(EnvConfig(), DataConfig(n_transitions=1000), seed=11)


def test_zero_action_keeps_position():
    cfg = EnvConfig()
    s = make_state([0.2, -0.3], [0.0, 0.0], cfg.goal)
    nxt, r, reached = step(cfg, s, [0.0, 0.0])
    np.testing.assert_array_equal(nxt[:2], s[:2])
    assert r == pytest.approx(-np.hypot(0.8 - 0.2, 0.8 + 0.3), rel=1e-15)
    assert not reached


def test_zeroed_actuator_masks_first_component():
    spec = ShiftSpec(actuator=0, mode="zeroed")
    np.testing.assert_array_equal(spec.apply([0.7, -0.4]), [0.0, -0.4])
    np.testing.assert_array_equal(ShiftSpec(actuator=1, mode="inverted").apply([0.7, -0.4]), [0.7, 0.4])


def test_shift_changes_dynamics_only_when_active():
    cfg = EnvConfig()
    s = make_state([0.0, 0.0], [0.0, 0.0], cfg.goal)
    spec = ShiftSpec(actuator=0)
    off, _, _ = step(cfg, s, [1.0, 1.0], spec, shift_active=False)
    on, _, _ = step(cfg, s, [1.0, 1.0], spec, shift_active=True)
    assert off[2] > 0 and on[2] == 0.0
    assert on[3] == off[3]


def test_constant_action_matches_closed_form_kinematics():
    cfg = EnvConfig(drag=0.0, goal=(50.0, 50.0))
    a = np.array([0.3, -0.2])
    p0 = np.array([0.1, 0.4])
    s = make_state(p0, [0.0, 0.0], cfg.goal)
    for _ in range(10):
        s, _, _ = step(cfg, s, a)
    # v_k = k a dt, p_10 = p0 + sum_k v_k dt = p0 + a dt^2 * 55
    expected = p0 + a * cfg.dt ** 2 * sum(range(1, 11))
    np.testing.assert_allclose(s[:2], expected, rtol=0, atol=1e-12)
    np.testing.assert_allclose(s[2:4], 10 * a * cfg.dt, rtol=0, atol=1e-12)


def test_goal_bonus_and_termination():
    cfg = EnvConfig()
    s = make_state([0.79, 0.8], [0.0, 0.0], cfg.goal)
    _, r, reached = step(cfg, s, [0.0, 0.0])
    assert reached
    assert r == pytest.approx(10.0 - 0.01)


def test_non_finite_state_is_a_fault():
    with pytest.raises(EnvironmentFault):
        step(EnvConfig(), np.array([np.inf, 0, 0, 0, 0, 0]), [0.0, 0.0])


def test_env_truncates_at_horizon():
    env = PointReacherEnv(EnvConfig(horizon=5))
    env.reset(np.random.default_rng(0))
    flags = [env.step([0.0, 0.0])[2:] for _ in range(5)]
    assert flags[-1] == (False, True)
    assert all(f == (False, False) for f in flags[:-1])


def test_shift_spec_validation_and_schedule():
    with pytest.raises(ValueError):
        ShiftSpec(t_shift=-1)
    with pytest.raises(ValueError):
        ShiftSpec(actuator=2)
    with pytest.raises(ValueError):
        ShiftSpec(mode="stuck")
    spec = ShiftSpec(t_shift=3, duration=2)
    assert [spec.active(t) for t in range(7)] == [False, False, False, True, True, False, False]
    assert ShiftSpec(t_shift=1, duration=None).active(10 ** 6)


def test_pd_fixpoint_at_goal():
    cfg = EnvConfig()
    s = make_state(cfg.goal, [0.0, 0.0], cfg.goal)
    for grade in ("expert", "medium"):
        np.testing.assert_allclose(behavior_policy(s, grade, None, noise=False), 0.0, atol=1e-15)
    with pytest.raises(ValueError):
        behavior_policy(s, "novice", None)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=6, max_size=6), st.sampled_from(["expert", "medium"]),
       st.integers(0, 2 ** 31))
def test_behavior_actions_inside_box(state, grade, seed):
    a = behavior_policy(np.array(state), grade, np.random.default_rng(seed))
    assert a.shape == (2,)
    assert np.all(np.abs(a) <= 1.0)


def test_expert_beats_medium():
    cfg = EnvConfig()
    data = DataConfig(shift_fraction=0.0)
    rets = {"expert": [], "medium": []}
    for ep in range(200):
        grade, _ = episode_plan(ep, 0.0)
        rows = rollout_episode(cfg, data, 5, ep)
        rets[grade].append(sum(r[2] for r in rows))
    assert len(rets["expert"]) == len(rets["medium"]) == 100
    assert np.mean(rets["expert"]) > np.mean(rets["medium"])
    assert mannwhitneyu(rets["expert"], rets["medium"], alternative="greater").pvalue < 0.01


def test_episode_plan_mix():
    plan = [episode_plan(k) for k in range(20)]
    assert sum(1 for g, sh in plan if g == "expert" and not sh) == 9
    assert sum(1 for g, sh in plan if g == "medium" and not sh) == 9
    assert sum(1 for _, sh in plan if sh) == 2
    assert all(not sh for _, sh in (episode_plan(k, 0.0) for k in range(20)))


def test_count_contract(small_ds):
    ds = small_ds
    assert len(ds) >= 1000
    slices = ds.episode_slices()
    last = slices[max(slices)]
    # dropping the last episode would fall short, and it is complete
    assert len(ds) - len(last) < 1000
    assert ds.done[last[-1]] or ds.step[last[-1]] == EnvConfig().horizon - 1
    assert ds.meta["n_transitions"] == len(ds)


def test_chain_consistency(small_ds):
    ds = small_ds
    for idx in ds.episode_slices().values():
        np.testing.assert_array_equal(ds.step[idx], np.arange(len(idx)))
        np.testing.assert_array_equal(ds.s_next[idx[:-1]], ds.s[idx[1:]])
        assert not ds.done[idx[:-1]].any()
        assert len(set(ds.tag[idx])) == 1


def test_tags_follow_plan(small_ds):
    ds = small_ds
    for ep, idx in ds.episode_slices().items():
        grade, shifted = episode_plan(ep)
        assert ds.tag[idx[0]] == ("shifted" if shifted else grade)
    counts = ds.meta["episodes_per_tag"]
    assert sum(counts.values()) == ds.meta["n_episodes"]


def test_round_trip_is_bit_identical(small_ds, tmp_path):
    write_dataset(small_ds, tmp_path)
    back = load_dataset(tmp_path / "dataset.jsonl")
    for name in ("s", "a", "r", "s_next", "done", "ep", "step", "tag"):
        np.testing.assert_array_equal(getattr(back, name), getattr(small_ds, name))
    assert back.meta == json.loads(json.dumps(small_ds.meta))


def test_meta_stats_match_recomputation(small_ds, tmp_path):
    write_dataset(small_ds, tmp_path)
    rows = [json.loads(line) for line in (tmp_path / "dataset.jsonl").read_text().splitlines()]
    S = np.array([r["s"] for r in rows])
    R = np.array([r["r"] for r in rows])
    meta = json.loads((tmp_path / "dataset.meta.json").read_text())
    np.testing.assert_allclose(meta["state_mean"], S.mean(axis=0), rtol=0, atol=1e-12)
    np.testing.assert_allclose(meta["state_std"], S.std(axis=0), rtol=0, atol=1e-12)
    assert meta["reward_mean"] == pytest.approx(R.mean(), abs=1e-12)
    assert meta["transitions_per_tag"] == {t: sum(r["tag"] == t for r in rows)
                                           for t in ("expert", "medium", "shifted")}


def test_field_order_and_precision(small_ds, tmp_path):
    write_dataset(small_ds, tmp_path)
    first = (tmp_path / "dataset.jsonl").read_text().splitlines()[0]
    assert list(json.loads(first)) == ["s", "a", "r", "s_next", "done", "ep", "step", "tag"]
    assert float(first.split('"r": ')[1].split(",")[0]) == small_ds.r[0]


def test_same_seed_same_bytes(tmp_path):
    digests = []
    for k in range(2):
        out = tmp_path / str(k)
        out.mkdir()
        write_dataset(generate_dataset(EnvConfig(), DataConfig(n_transitions=500), seed=3), out)
        digests.append(hashlib.sha256((out / "dataset.jsonl").read_bytes()).hexdigest())
    assert digests[0] == digests[1]
    other = tmp_path / "other"
    other.mkdir()
    write_dataset(generate_dataset(EnvConfig(), DataConfig(n_transitions=500), seed=4), other)
    assert hashlib.sha256((other / "dataset.jsonl").read_bytes()).hexdigest() != digests[0]


def test_missing_output_dir(small_ds, tmp_path):
    with pytest.raises(FileNotFoundError, match="nowhere"):
        write_dataset(small_ds, tmp_path / "nowhere")


def test_invalid_configs():
    with pytest.raises(ValueError):
        generate_dataset(EnvConfig(), DataConfig(shift_fraction=1.5), 0)
    with pytest.raises(ValueError):
        PointReacherEnv(EnvConfig(dt=-0.1))
