import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cgflow.sampler import (
    AlDataset,
    broaden,
    dataset_add,
    find_high_error,
    mc_chains,
    mc_trajectory,
    replay_count,
    replay_sample,
)

LEVELS = np.array([0.0, 1.0, 0.4])


def three_state(s):
    """Piecewise-constant potential on a ring of circumference 3 with unit-width states."""
    return LEVELS[np.floor(np.asarray(s)[:, 0]).astype(int) % 3]


def test_downhill_moves_are_always_accepted():
    rng = np.random.default_rng(0)
    # a strictly decreasing potential along +s: every step with positive displacement is accepted
    path, energies, acc = mc_trajectory([0.0], lambda s: -1e3 * s[:, 0], 1.0, 0.1, 500, rng)
    steps = np.diff(np.concatenate([[0.0], path[:, 0]]))
    assert np.all(acc[steps > 0])
    # an accepted move never leaves the state unchanged, a rejected one always does
    assert np.array_equal(acc, steps != 0)
    # flat potential: dU = 0 for every proposal, so every proposal is accepted even at huge beta
    _, _, acc = mc_trajectory([0.0], lambda s: np.zeros(len(s)), 1e6, 0.1, 200, rng)
    assert acc.all()


def test_path_repeats_on_rejection_and_zero_scale_never_moves():
    rng = np.random.default_rng(1)
    path, energies, acc = mc_trajectory([0.3, -0.2], lambda s: np.sum(s**2, axis=1), 5.0, 0.5, 200, rng)
    assert path.shape == (200, 2) and energies.shape == (200,)
    rejected = np.flatnonzero(~acc[1:]) + 1
    np.testing.assert_array_equal(path[rejected], path[rejected - 1])
    path, _, _ = mc_trajectory([0.3], lambda s: s[:, 0] ** 2, 1.0, 0.0, 50, rng)
    np.testing.assert_array_equal(path[:, 0], 0.3)
    final, _, _ = mc_trajectory([0.3], lambda s: s[:, 0] ** 2, 1.0, 0.1, 50, rng, record=False)
    assert final.shape == (1, 1)


def test_mc_errors():
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        mc_trajectory([0.0], lambda s: s[:, 0], 1.0, 0.1, 0, rng)
    with pytest.raises(ValueError):
        mc_trajectory([0.0], lambda s: np.full(len(s), np.inf), 1.0, 0.1, 5, rng)


def test_three_state_occupation_and_detailed_balance():
    beta = 1.5
    exact = np.exp(-beta * LEVELS) / np.exp(-beta * LEVELS).sum()
    rng = np.random.default_rng(2)
    starts = rng.uniform(0, 3, (100, 1))
    samples, n_acc = mc_chains(starts, three_state, beta, 0.7, 10_000, rng)
    states = np.floor(samples[..., 0]).astype(int) % 3
    occ = np.bincount(states.ravel(), minlength=3) / states.size
    np.testing.assert_allclose(occ, exact, atol=0.01)
    # flux i -> j equals flux j -> i
    flux = np.zeros((3, 3))
    np.add.at(flux, (states[:-1].ravel(), states[1:].ravel()), 1)
    for i in range(3):
        for j in range(i + 1, 3):
            assert abs(flux[i, j] - flux[j, i]) < 4 * np.sqrt(flux[i, j] + flux[j, i])
    assert np.all(n_acc > 0)


def _const(mean, std):
    return lambda s: (np.full(len(s), mean), np.full(len(s), std))


def test_converged_ensemble_terminates_without_points():
    rng = np.random.default_rng(3)
    res = find_high_error(_const(0.0, 0.0), 1.0, 0.4, 1, 8, 10, 200, np.zeros((1, 1)), rng)
    assert res.terminated and res.points.shape == (0, 1)
    assert res.total_steps == 0 and res.rounds == 200
    assert np.all(res.chain_lengths == 200)


def test_uncertain_everywhere_yields_at_min_len():
    rng = np.random.default_rng(4)
    beta = 0.1
    res = find_high_error(_const(0.0, 10.0 / beta), beta, 0.4, 50, 50, 10, 30_000, np.zeros((1, 1)), rng)
    assert not res.terminated
    assert res.points.shape == (50, 1)
    np.testing.assert_array_equal(res.chain_lengths, 10)
    assert res.total_steps == 500


def test_one_target_from_fifty_chains_counts_all_steps():
    rng = np.random.default_rng(5)
    # std grows with |s|; chains start at 0 and diffuse outwards
    res = find_high_error(lambda s: (np.zeros(len(s)), np.abs(s[:, 0])), 1.0, 0.4, 1, 50, 10, 30_000,
                          np.zeros((1, 1)), rng, proposal_scale=0.1)
    assert res.points.shape == (1, 1) and abs(res.points[0, 0]) > 0.4
    assert res.total_steps == res.chain_lengths.sum() == 50 * res.rounds


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 15), st.integers(1, 5))
def test_points_never_come_from_short_chains(seed, min_len, n_targets):
    rng = np.random.default_rng(seed)
    trace = []
    res = find_high_error(lambda s: (s[:, 0] ** 2, np.abs(np.sin(3 * s[:, 0]))), 1.0, 0.5, n_targets, 6, min_len,
                          300, rng.uniform(-1, 1, (3, 1)), rng, proposal_scale=0.3, trace=trace)
    assert res.rounds >= min(min_len, 300) or res.points.size == 0
    assert np.all(res.chain_lengths[res.chain_lengths < res.rounds] >= min_len)
    if not res.terminated:
        assert res.total_steps == res.chain_lengths.sum()
    assert len(trace) == res.chain_lengths.sum()


def test_find_high_error_validates():
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        find_high_error(_const(0, 1), 1.0, 0.0, 1, 2, 1, 5, np.zeros((1, 1)), rng)
    with pytest.raises(ValueError):
        find_high_error(_const(0, 1), 1.0, 0.4, 1, 2, 1, 5, np.zeros((0, 1)), rng)


def test_broaden_interval():
    rng = np.random.default_rng(6)
    out = broaden([[0.25]], 1.0, 65, rng)
    assert out.shape == (65, 1)
    assert np.all(np.abs(out - 0.25) <= 0.5)
    np.testing.assert_array_equal(broaden([[0.25], [2.0]], 0.0, 4, rng)[:, 0], [0.25] * 4 + [2.0] * 4)


def test_broaden_statistics():
    rng = np.random.default_rng(7)
    n = 100_000
    out = broaden([[1.0]], 1.0, n, rng)[:, 0]
    sigma = 1.0 / np.sqrt(12.0)
    assert abs(out.mean() - 1.0) < 3 * sigma / np.sqrt(n)
    assert out.var() == pytest.approx(sigma**2, rel=0.02)
    ball = broaden([[0.0, 0.0]], 2.0, n, rng)
    r = np.linalg.norm(ball, axis=1)
    assert r.max() <= 1.0
    # uniform in a disc: P(r < 1/2) = 1/4
    assert np.mean(r < 0.5) == pytest.approx(0.25, abs=0.01)


def test_dataset_add_counts():
    rng = np.random.default_rng(8)
    ds = dataset_add(AlDataset(k=30), rng.uniform(size=(65, 1)), 0.8, rng)
    assert ds.energy.size == 1950
    assert ds.is_train.sum() == 1560 and (~ds.is_train).sum() == 390
    assert np.all(np.isnan(ds.energy))
    one = dataset_add(AlDataset(k=1), [[0.5]], 0.8, rng)
    assert one.energy.size == 1 and one.n_configs == 1
    rec = ds.records([3, 7], train=True)
    np.testing.assert_array_equal(ds.record_s(rec)[:, 0], np.repeat(ds.s[[3, 7], 0], ds.is_train[[3, 7]].sum(1)))
    with pytest.raises(ValueError):
        dataset_add(ds, [[0.0]], 1.0, rng)


def test_config_split_keeps_copies_together():
    rng = np.random.default_rng(9)
    ds = dataset_add(AlDataset(k=5), rng.uniform(size=(10, 1)), 0.8, rng, split_by="config")
    assert np.all(ds.is_train.all(1) | (~ds.is_train).all(1))
    assert ds.is_train[:, 0].sum() == 8


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(1, 40), min_size=1, max_size=5), st.integers(1, 10), st.floats(0.05, 0.95))
def test_dataset_invariants(sizes, k, frac):
    rng = np.random.default_rng(0)
    ds = AlDataset(k=k)
    for n in sizes:
        dataset_add(ds, rng.uniform(size=(n, 1)), frac, rng)
    total = sum(sizes) * k
    assert ds.energy.shape == ds.log_q.shape == ds.is_train.shape == (sum(sizes), k)
    assert abs(ds.is_train.sum() - frac * total) <= len(sizes)
    assert ds.n_groups == len(sizes)
    assert np.all(np.diff(ds.group) >= 0)


def test_write_and_json_round_trip(tmp_path):
    rng = np.random.default_rng(10)
    ds = dataset_add(AlDataset(k=3), rng.uniform(size=(4, 1)), 0.5, rng)
    ds.write([0, 5, 11], [1.0, 2.0, np.inf], [-0.5, -1.0, -2.0])
    assert ds.energy[1, 2] == 2.0 and ds.energy[3, 2] == np.inf
    ds.save(tmp_path / "d.json")
    back = AlDataset.load(tmp_path / "d.json")
    np.testing.assert_array_equal(back.energy, ds.energy)
    np.testing.assert_array_equal(back.is_train, ds.is_train)
    np.testing.assert_array_equal(back.s, ds.s)


def test_replay():
    rng = np.random.default_rng(11)
    ds = AlDataset(k=2)
    dataset_add(ds, rng.uniform(size=(100, 1)), 0.8, rng)
    assert replay_sample(ds, 0, 0.3, rng).size == 0
    dataset_add(ds, rng.uniform(size=(65, 1)), 0.8, rng)
    assert replay_count(65, 0.3) == 20
    picked = replay_sample(ds, 1, 0.3, rng)
    assert picked.size == 20 and np.all(ds.group[picked] == 0)
    assert replay_sample(ds, 1, 0.0, rng).size == 0
    with pytest.raises(ValueError):
        replay_sample(ds, 1, -0.1, rng)
