import json
import warnings

import numpy as np
import pytest

from dsgdlab.algorithms import NetworkState, StepSchedule
from dsgdlab.errors import AssumptionError, ContractError
from dsgdlab.metrics import seed_average
from dsgdlab.tdlearning import (
    MdpModel, StepSizeWarning, TransitionSampler, build_gridworld, decentralized_td_step, default_td_schedule,
    quadrant_features, run_td, sample_matrix, stationary_distribution, td_fixed_point,
)
from dsgdlab.topology import MixingMatrix, build_ring


@pytest.fixture(scope="module")
def grid():
    return build_gridworld(seed=0, n_agents=10)


def oracle_chain():
    """Random-walk chain on the 4x4 grid, built from coordinates without the package."""
    P = np.zeros((16, 16))
    for s in range(16):
        r, c = divmod(s, 4)
        for dr, dc in ((0, -1), (0, 1), (-1, 0), (1, 0)):
            rr, cc = r + dr, c + dc
            P[s, rr * 4 + cc if 0 <= rr < 4 and 0 <= cc < 4 else s] += 0.25
    return P


def two_state(rewards=((1.0,), (3.0,)), discount=0.5):
    P = np.array([[[0.0, 1.0], [1.0, 0.0]]])
    r = np.array(rewards, dtype=float)[:, None, :].repeat(2, axis=1)
    return MdpModel(P, r, discount, np.ones((2, 1)), np.array([[1.0], [0.5]]))


# -- MDP ---------------------------------------------------------------------------


def test_corner_left_stays_put(grid):
    # row-major numbering: state 0 is the top-left corner
    assert grid.P[0, 0, 0] == 1.0
    assert grid.P[1, 0, 1] == 1.0
    assert np.allclose(grid.policy_chain().sum(axis=1), 1.0)


def test_quadrant_features():
    phi = quadrant_features()
    assert phi[5].tolist() == [1, 0, 0, 0]
    assert phi[15].tolist() == [0, 0, 0, 1]
    assert np.all(phi.sum(axis=0) == 4)


def test_policy_chain_matches_oracle(grid):
    assert np.array_equal(grid.policy_chain(), oracle_chain())


def test_stationary_distribution_matches_eigenvector_oracle(grid):
    vals, vecs = np.linalg.eig(oracle_chain().T)
    v = np.real(vecs[:, np.argmin(np.abs(vals - 1))])
    v /= v.sum()
    mu = stationary_distribution(grid)
    assert np.allclose(mu, v, atol=1e-12)
    # the stay-put walk is symmetric, hence doubly stochastic: corners and interior carry equal mass
    assert np.allclose(mu, 1 / 16, atol=1e-12)


def test_stationary_distribution_of_periodic_two_state_chain():
    assert np.allclose(stationary_distribution(np.array([[0.0, 1.0], [1.0, 0.0]])), [0.5, 0.5])
    assert np.allclose(stationary_distribution(np.array([[0.9, 0.1], [0.3, 0.7]])), [0.75, 0.25])


def test_model_validation(grid):
    with pytest.raises(ContractError):
        MdpModel(grid.P * 2, grid.rewards, 0.9, grid.policy, grid.features)
    with pytest.raises(ContractError):
        MdpModel(grid.P, grid.rewards, 1.0, grid.policy, grid.features)
    with pytest.raises(ContractError):
        MdpModel(grid.P, grid.rewards, 0.9, grid.policy, 2 * grid.features)


def test_json_round_trip(grid):
    back = MdpModel.from_json(grid.to_json())
    for name in ("P", "rewards", "policy", "features"):
        assert np.array_equal(getattr(back, name), getattr(grid, name))
    assert back.discount == grid.discount
    json.loads(grid.to_json())


def test_shared_reward_tables_are_identical():
    m = build_gridworld(seed=1, n_agents=4, shared_reward=True)
    assert all(np.array_equal(m.rewards[0], m.rewards[i]) for i in range(4))


# -- fixed point --------------------------------------------------------------------------


def test_fixed_point_matches_matrix_form_oracle(grid):
    mu = np.full(16, 1 / 16)
    phi, P = quadrant_features(), oracle_chain()
    D = np.diag(mu)
    A = phi.T @ D @ (phi - 0.9 * P @ phi)
    r_pi = grid.mean_reward.mean(axis=1)
    b = phi.T @ D @ r_pi
    fp = td_fixed_point(grid)
    assert np.allclose(fp.A_mat, A, atol=1e-14)
    assert np.allclose(fp.b_bar, b, atol=1e-14)
    assert np.allclose(fp.theta_star, np.linalg.solve(A, b), atol=1e-12)
    assert fp.lambda_min == pytest.approx(0.025, abs=1e-12)
    assert fp.beta == pytest.approx(1.9)
    assert fp.sigma_sq == pytest.approx(2 * np.abs(grid.rewards).max() ** 2)


def test_beta_bounds_every_sample_matrix(grid):
    norms = [np.linalg.norm(sample_matrix(grid, s, t), 2) for s in range(16) for _ in range(4) for t in range(16)]
    assert len(norms) == 16 * 4 * 16
    assert max(norms) <= 1.9 + 1e-12


def test_zero_discount_closed_form():
    m = build_gridworld(seed=2, n_agents=3, discount=0.0)
    fp = td_fixed_point(m)
    assert np.allclose(fp.A_mat, 0.25 * np.eye(4), atol=1e-14)
    phi = quadrant_features()
    r_pi = m.mean_reward.mean(axis=1)
    want = [r_pi[phi[:, k] == 1].mean() for k in range(4)]
    assert np.allclose(fp.theta_star, want, atol=1e-12)


def test_constant_rewards(grid):
    m = MdpModel(grid.P, np.full_like(grid.rewards, 2.5), 0.9, grid.policy, grid.features)
    fp = td_fixed_point(m)
    e_phi = quadrant_features().mean(axis=0)
    assert np.allclose(fp.b_bar, 2.5 * e_phi)
    assert np.allclose(fp.theta_star, np.linalg.solve(fp.A_mat, 2.5 * e_phi))


def test_degenerate_features_violate_assumption(grid):
    phi = grid.features.copy()
    phi[:, 3] = 0.0
    with pytest.raises(AssumptionError):
        td_fixed_point(MdpModel(grid.P, grid.rewards, 0.9, grid.policy, phi))


def test_default_schedule_first_step_is_the_bound(grid):
    fp = td_fixed_point(grid)
    s = default_td_schedule(fp)
    assert s.gamma(1) == pytest.approx(fp.step_bound())
    assert s.a0 == pytest.approx(0.6 / 0.025)


# -- sampling and steps ------------------------------------------------------------------------


def test_sampler_frequencies(grid):
    u = np.random.default_rng(0).random((200_000, 3))
    s, a, s_next = TransitionSampler(grid)(u)
    freq = np.bincount(s, minlength=16) / len(s)
    assert np.abs(freq - 1 / 16).max() < 5 * np.sqrt(1 / 16 / len(s))
    assert np.abs(np.bincount(a, minlength=4) / len(a) - 0.25).max() < 5 * np.sqrt(0.25 / len(a))
    # every sampled move is one the chain allows
    assert np.all(grid.P[a, s, s_next] == 1.0)


def test_two_state_hand_step():
    m = two_state()
    W = MixingMatrix.from_array(np.full((2, 2), 0.5))
    state = NetworkState(np.array([[0.2], [-0.4]]))
    # delta_i = r_i + theta_i (0.5 * 0.5 - 1): (0.85, 3.3); mixed iterate -0.1
    nxt = decentralized_td_step(state, W, m, 0.1, 0, 0, 1)
    assert np.allclose(nxt.Theta[:, 0], [-0.015, 0.23], atol=1e-15)


def test_single_agent_is_centralized_td(grid):
    m = grid.centralized()
    W1 = MixingMatrix.from_array(np.ones((1, 1)))
    th = np.array([0.1, -0.3, 0.2, 0.5])
    s, a, t = 5, 2, 6
    delta = m.rewards[0, s, a] + (0.9 * m.features[t] - m.features[s]) @ th
    got = decentralized_td_step(NetworkState(th[None]), W1, m, 0.05, s, a, t).Theta[0]
    assert np.allclose(got, th + 0.05 * delta * m.features[s], atol=1e-15)


def test_identical_agents_stay_in_consensus():
    m = build_gridworld(seed=3, n_agents=5, shared_reward=True)
    W = build_ring(5, 0.4)
    state = NetworkState(np.tile([0.3, 0.1, -0.2, 0.4], (5, 1)))
    rng = np.random.default_rng(1)
    for s, a, t in zip(*TransitionSampler(m)(rng.random((50, 3)))):
        state = decentralized_td_step(state, W, m, 0.05, s, a, t)
        assert np.abs(state.Theta - state.Theta[0]).max() <= 1e-12


def test_averaged_recursion_identity(grid):
    W = build_ring(10, 0.8)
    rng = np.random.default_rng(2)
    state = NetworkState(rng.standard_normal((10, 4)))
    s, a, t = 6, 1, 10
    avg = state.average
    delta_bar = grid.mean_reward[s, a] + (0.9 * grid.features[t] - grid.features[s]) @ avg
    nxt = decentralized_td_step(state, W, grid, 0.07, s, a, t)
    assert np.allclose(nxt.average, avg + 0.07 * delta_bar * grid.features[s], atol=1e-12)


def test_decentralized_average_tracks_centralized_run(grid):
    W = build_ring(10, 0.8)
    fp = td_fixed_point(grid)
    dec, cen = run_td(W, grid, default_td_schedule(fp), 500, [0, 1], stride=5)
    for d, c in zip(dec, cen):
        assert np.allclose(d["avg_gap"], c["avg_gap"], rtol=1e-9, atol=1e-14)
        assert d.metadata["algorithm"] == "TD0" and c.metadata["algorithm"] == "TD0-centralized"
    assert np.all(seed_average(dec)["consensus_err"][1:] > 0)


def test_run_td_is_thread_invariant(grid):
    W = build_ring(10, 0.8)
    s = default_td_schedule(td_fixed_point(grid))
    a, _ = run_td(W, grid, s, 200, [0, 1, 2], stride=10, threads=1)
    b, _ = run_td(W, grid, s, 200, [0, 1, 2], stride=10, threads=8)
    assert [r.to_csv() for r in a] == [r.to_csv() for r in b]


def test_large_step_warns(grid):
    W = build_ring(10, 0.8)
    with pytest.warns(StepSizeWarning):
        run_td(W, grid, StepSchedule.constant(0.5), 5, [0])
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        run_td(W, grid, StepSchedule.constant(0.001), 5, [0])


def test_run_td_contracts(grid):
    with pytest.raises(ContractError):
        run_td(build_ring(5, 0.8), grid, StepSchedule.constant(0.001), 5, [0])
    with pytest.raises(ContractError):
        run_td(build_ring(10, 0.8), grid, StepSchedule.constant(0.001), 0, [0])
