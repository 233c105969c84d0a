import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gpdp import gpr
from gpdp.critic import CriticSet
from gpdp.diffusion import EpsNet, make_schedule, sample_actions
from gpdp.envdata import Dataset
from gpdp.evaluation import energy_test
from gpdp.gpr import KernelHyperparams
from gpdp.policy import (AlteredActionSet, BestTrajectory, IncompleteBundleError, Normalizer, PolicyBundle,
                         act, build_guidance, relabel, select_best_trajectory)

SCHED = make_schedule(5)


def make_dataset(rewards_per_episode, d=2, m=2, seed=0):
    """Episodes with the given per-step rewards; states and actions are random."""
    rng = np.random.default_rng(seed)
    cols = {k: [] for k in ("s", "a", "r", "ep", "step")}
    for ep, rewards in enumerate(rewards_per_episode):
        for t, r in enumerate(rewards):
            cols["s"].append(rng.normal(size=d))
            cols["a"].append(rng.uniform(-1, 1, size=m))
            cols["r"].append(r)
            cols["ep"].append(ep)
            cols["step"].append(t)
    n = len(cols["r"])
    s = np.array(cols["s"]).reshape(n, d)
    return Dataset(s=s, a=np.array(cols["a"]).reshape(n, m), r=np.array(cols["r"], dtype=float),
                   s_next=s.copy(), done=np.zeros(n, dtype=bool), ep=np.array(cols["ep"]),
                   step=np.array(cols["step"]), tag=np.array(["expert"] * n, dtype=object))


class StubCritics:
    def __init__(self, fn):
        self.fn = fn

    def q(self, s, a):
        return self.fn(np.atleast_2d(s), np.atleast_2d(a))


neg_norm = StubCritics(lambda s, a: -np.sum(a * a, axis=1))


def test_best_trajectory_simple():
    ds = make_dataset([[5.0, 5.0], [10.0, 10.0]])
    traj = select_best_trajectory(ds)
    assert traj.episode_id == 1
    assert traj.ret == 20.0
    np.testing.assert_array_equal(traj.states, ds.s[2:4])


def test_best_trajectory_tie_goes_to_lower_id():
    ds = make_dataset([[1.0], [4.0, 6.0], [10.0]])
    assert select_best_trajectory(ds).episode_id == 1


def test_best_trajectory_matches_brute_force():
    rng = np.random.default_rng(3)
    eps = [list(rng.normal(size=int(rng.integers(1, 30)))) for _ in range(40)]
    ds = make_dataset(eps)
    totals = []
    for k, rewards in enumerate(eps):
        acc = 0.0
        for r in rewards:
            acc += r
        totals.append(acc)
    best = max(range(len(eps)), key=lambda k: (totals[k], -k))
    traj = select_best_trajectory(ds)
    assert traj.episode_id == best
    assert traj.ret == pytest.approx(totals[best], rel=1e-12)
    assert traj.H == len(eps[best])


def test_best_trajectory_cap_and_shuffled_rows():
    ds = make_dataset([[1.0] * 10, [0.0] * 3])
    perm = np.random.default_rng(0).permutation(len(ds))
    shuffled = Dataset(ds.s[perm], ds.a[perm], ds.r[perm], ds.s_next[perm], ds.done[perm],
                       ds.ep[perm], ds.step[perm], ds.tag[perm])
    traj = select_best_trajectory(shuffled, cap=4)
    np.testing.assert_array_equal(traj.states, ds.s[:4])
    assert traj.ret == 10.0


def test_best_trajectory_top_k():
    ds = make_dataset([[1.0], [3.0, 3.0], [2.5, 2.5, 2.5]])
    traj = select_best_trajectory(ds, top_k=2)
    assert traj.episode_ids == [2, 1]
    assert traj.H == 5


def test_best_trajectory_empty():
    empty = make_dataset([])
    with pytest.raises(ValueError):
        select_best_trajectory(empty)


def random_traj(H=6, d=3, m=2, seed=0):
    rng = np.random.default_rng(seed)
    return BestTrajectory(rng.normal(size=(H, d)), rng.uniform(-1, 1, size=(H, m)), 1.0, 0)


def test_relabel_single_candidate_is_the_sample():
    traj = random_traj()
    net = EpsNet.create(3, 2, hidden=8, rng=1)
    alt = relabel(traj, net, SCHED, neg_norm, M=1, rng=5, include_original=False)
    expected = sample_actions(net, traj.states, SCHED, rng=5)
    np.testing.assert_array_equal(alt.actions, expected)
    np.testing.assert_array_equal(alt.q_values, -np.sum(expected ** 2, axis=1))
    assert alt.n_candidates == 1


def test_relabel_picks_min_norm_by_exhaustive_scan():
    traj = random_traj(H=5)
    net = EpsNet.create(3, 2, hidden=8, rng=2)
    M = 9
    alt = relabel(traj, net, SCHED, neg_norm, M=M, rng=7, include_original=False)
    cands = sample_actions(net, np.repeat(traj.states, M, axis=0), SCHED, rng=7).reshape(5, M, 2)
    for t in range(5):
        norms = [float(np.dot(c, c)) for c in cands[t]]
        k = min(range(M), key=lambda j: norms[j])
        np.testing.assert_array_equal(alt.actions[t], cands[t, k])
        # dominance over every candidate
        assert all(alt.q_values[t] >= -n for n in norms)


def test_relabel_ties_take_first_candidate():
    traj = random_traj(H=3)
    net = EpsNet.create(3, 2, hidden=8, rng=2)
    flat = StubCritics(lambda s, a: np.zeros(len(a)))
    alt = relabel(traj, net, SCHED, flat, M=4, rng=3, include_original=True)
    cands = sample_actions(net, np.repeat(traj.states, 4, axis=0), SCHED, rng=3).reshape(3, 4, 2)
    np.testing.assert_array_equal(alt.actions, cands[:, 0])
    assert not alt.chose_original.any()


def test_relabel_dominates_original_action():
    traj = random_traj(H=20, seed=4)
    net = EpsNet.create(3, 2, hidden=8, rng=4)
    critics = CriticSet.create(3, 2, hidden=8, rng=5)
    alt = relabel(traj, net, SCHED, critics, M=4, rng=6)
    assert alt.n_candidates == 5
    assert np.all(alt.q_values >= alt.original_q)
    np.testing.assert_array_equal(alt.original_q, critics.q(traj.states, traj.actions))
    assert np.all(np.abs(alt.actions) <= 1.0)


def test_relabel_is_deterministic_and_validates_m():
    traj = random_traj()
    net = EpsNet.create(3, 2, hidden=8, rng=1)
    a = relabel(traj, net, SCHED, neg_norm, M=3, rng=9).actions
    b = relabel(traj, net, SCHED, neg_norm, M=3, rng=9).actions
    np.testing.assert_array_equal(a, b)
    with pytest.raises(ValueError):
        relabel(traj, net, SCHED, neg_norm, M=0)


def smooth_task(H=25, seed=0):
    rng = np.random.default_rng(seed)
    S = rng.uniform(-2, 2, size=(H, 2))
    A = np.stack([0.6 * np.sin(S[:, 0]), 0.5 * np.cos(S[:, 1])], axis=1)
    return BestTrajectory(S, np.zeros_like(A), 0.0, 0), AlteredActionSet(A, np.zeros(H), 1)


def test_guidance_constant_targets():
    traj, _ = smooth_task()
    alt = AlteredActionSet(np.full((traj.H, 2), 0.3), np.zeros(traj.H), 1)
    model = build_guidance(traj, alt, seed=1)
    post = gpr.posterior(model, traj.states)
    np.testing.assert_allclose(post.mean, 0.3, atol=max(3 * model.hp.noise, 1e-3))


def test_guidance_is_plain_fit():
    traj, alt = smooth_task(H=3)
    a = build_guidance(traj, alt, seed=4)
    b = gpr.fit(traj.states, alt.actions, None, 4, seed=4)
    for x, y in ((a.chol, b.chol), (a.alpha, b.alpha), (a.hp.log_values, b.hp.log_values)):
        assert x.tobytes() == y.tobytes()


def test_guidance_interpolates_smooth_targets():
    traj, alt = smooth_task()
    model = build_guidance(traj, alt, seed=0)
    post = gpr.posterior(model, traj.states)
    err = np.abs(post.mean - alt.actions)
    assert np.all(err <= 2 * model.hp.noise + 1e-6)


def test_guidance_length_mismatch():
    traj, alt = smooth_task()
    with pytest.raises(ValueError):
        build_guidance(traj, AlteredActionSet(alt.actions[:-1], alt.q_values[:-1], 1))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10 ** 6), st.floats(0.01, 1.0), st.floats(0.3, 3.0), st.floats(0.2, 2.0))
def test_guidance_locality(seed, noise, signal, ls):
    rng = np.random.default_rng(seed)
    S = rng.normal(size=(int(rng.integers(2, 20)), 3))
    A = rng.uniform(-1, 1, size=(len(S), 2))
    model = gpr.condition(S, A, KernelHyperparams(noise, signal, ls))
    near = gpr.posterior(model, S).var
    far = gpr.posterior(model, S[0] + 25 * ls * np.ones(3)).var
    assert np.all(near < far)


def tight_model(traj, targets):
    return gpr.condition(traj.states, targets, KernelHyperparams(1e-3, 1.0, 0.5))


def test_act_concentrates_on_relabeled_action():
    traj, alt = smooth_task(H=10, seed=2)
    model = tight_model(traj, alt.actions)
    net = EpsNet.create(2, 2, hidden=16, rng=3)
    beta1 = SCHED.beta(1)
    rng = np.random.default_rng(0)
    for k in (0, 4, 9):
        var_w = float(gpr.posterior(model, traj.states[k]).var)
        radius = 3 * np.sqrt(var_w + beta1)
        draws = np.array([act(traj.states[k], net, SCHED, model, rng) for _ in range(100)])
        dist = np.linalg.norm(draws - alt.actions[k], axis=1)
        assert np.all(dist <= radius)


def test_act_far_field_matches_unguided():
    traj, alt = smooth_task(H=10, seed=2)
    model = tight_model(traj, alt.actions)
    net = EpsNet.create(2, 2, hidden=16, rng=3)
    far = traj.states[0] + 20 * 0.5 * np.array([1.0, 1.0])
    assert model.min_distance(far)[0] >= 20
    post = gpr.posterior(model, far)
    rep = np.repeat(far[None, :], 1000, axis=0)
    guided = sample_actions(net, rep, SCHED, post, rng=1)
    plain = sample_actions(net, rep, SCHED, None, rng=2)
    _, p = energy_test(guided, plain, n_perm=200, rng=3)
    assert p >= 0.01


def test_act_deterministic_for_seed():
    traj, alt = smooth_task(H=10, seed=2)
    model = tight_model(traj, alt.actions)
    net = EpsNet.create(2, 2, hidden=16, rng=3)
    a = act(traj.states[3], net, SCHED, model, np.random.default_rng(42))
    b = act(traj.states[3], net, SCHED, model, np.random.default_rng(42))
    np.testing.assert_array_equal(a, b)


def test_normalizer_applies_to_networks_only():
    traj, alt = smooth_task(H=10, seed=2)
    model = tight_model(traj, alt.actions)
    net = EpsNet.create(2, 2, hidden=16, rng=3)
    norm = Normalizer(np.array([0.5, -0.5]), np.array([2.0, 3.0]))
    s = traj.states[1]
    a = act(s, net, SCHED, model, np.random.default_rng(1), norm)
    post = gpr.posterior(model, s)
    b = sample_actions(net, norm(s)[None, :], SCHED, post, np.random.default_rng(1))[0]
    np.testing.assert_array_equal(a, b)


def small_bundle():
    traj, alt = smooth_task(H=8, seed=5)
    return PolicyBundle(EpsNet.create(2, 2, hidden=8, rng=1), CriticSet.create(2, 2, hidden=8, rng=2),
                        tight_model(traj, alt.actions), SCHED, Normalizer.identity(2), M=4,
                        schedule_params={"n": 5, "beta_min": 0.1, "beta_max": 10.0, "kind": "vp"})


def test_bundle_round_trip(tmp_path):
    b = small_bundle()
    b.save(tmp_path)
    back = PolicyBundle.load(tmp_path)
    s = np.array([0.3, -0.2])
    for kind in ("gpdp", "greedy", "diffusion"):
        x = b.policy(kind)(s, np.random.default_rng(8))
        y = back.policy(kind)(s, np.random.default_rng(8))
        assert x.tobytes() == y.tobytes()
    with pytest.raises(ValueError):
        b.policy("random")


def test_incomplete_bundle(tmp_path):
    small_bundle().save(tmp_path)
    (tmp_path / "gpr.bin").unlink()
    with pytest.raises(IncompleteBundleError, match="gpr.bin"):
        PolicyBundle.load(tmp_path)
