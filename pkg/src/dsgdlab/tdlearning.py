"""Multi-agent policy evaluation with linear TD(0) on a finite MDP.

Agents share the global state and action and observe one common transition
per iteration, but each agent has its own reward table; the evaluation target
is the value of the network-average reward.
"""

from __future__ import annotations

import json
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import rng as streams
from .algorithms import NetworkState, Recorder, StepSchedule, guard, split_seeds
from .errors import AssumptionError, ContractError, NumericalError
from .metrics import TrajectoryRecord
from .topology import MixingMatrix

STOCHASTIC_TOL = 1e-12
POWER_TOL = 1e-12
POWER_MAX_ITERS = 100_000

GRID_SIDE = 4
ACTIONS = ("left", "right", "up", "down")
_MOVES = {"left": (0, -1), "right": (0, 1), "up": (-1, 0), "down": (1, 0)}


class StepSizeWarning(UserWarning):
    """The TD step size exceeds ``lambda_min / beta^2``."""


@dataclass(frozen=True)
class MdpModel:
    """``P[a, s, s']`` transitions, ``rewards[i, s, a]`` per agent, ``policy[s, a]``, ``features[s]``."""

    P: np.ndarray
    rewards: np.ndarray
    discount: float
    policy: np.ndarray
    features: np.ndarray

    def __post_init__(self):
        P, pol = self.P, self.policy
        if P.ndim != 3 or P.shape[1] != P.shape[2]:
            raise ContractError(f"transition tensor must be (A, S, S), got {P.shape}")
        if np.any(P < 0) or np.abs(P.sum(axis=2) - 1).max() > STOCHASTIC_TOL:
            raise ContractError("transition rows must be probability vectors")
        if pol.shape != (self.S, self.A) or np.any(pol < 0) or np.abs(pol.sum(axis=1) - 1).max() > STOCHASTIC_TOL:
            raise ContractError("policy must be an (S, A) table of probability vectors")
        if self.rewards.ndim != 3 or self.rewards.shape[1:] != (self.S, self.A):
            raise ContractError(f"rewards must be (n, S, A), got {self.rewards.shape}")
        if self.features.shape[0] != self.S:
            raise ContractError("features need one row per state")
        if np.linalg.norm(self.features, axis=1).max() > 1 + 1e-12:
            raise ContractError("feature vectors must have norm at most 1")
        if not 0 <= self.discount < 1:
            raise ContractError(f"discount must lie in [0, 1), got {self.discount}")

    @property
    def S(self) -> int:
        return self.P.shape[1]

    @property
    def A(self) -> int:
        return self.P.shape[0]

    @property
    def n(self) -> int:
        return self.rewards.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    @property
    def r_max(self) -> float:
        return float(np.abs(self.rewards).max())

    @property
    def mean_reward(self) -> np.ndarray:
        return self.rewards.mean(axis=0)

    def policy_chain(self) -> np.ndarray:
        """``P_pi[s, s'] = sum_a pi(a|s) P[a, s, s']``."""
        return np.einsum("sa,ast->st", self.policy, self.P)

    def centralized(self) -> "MdpModel":
        """Single-agent model whose reward is the network average."""
        return MdpModel(self.P, self.mean_reward[None], self.discount, self.policy, self.features)

    def to_dict(self) -> dict:
        return {"P": self.P.tolist(), "rewards": self.rewards.tolist(), "discount": self.discount,
                "policy": self.policy.tolist(), "features": self.features.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "MdpModel":
        return cls(np.array(data["P"], dtype=float), np.array(data["rewards"], dtype=float),
                   float(data["discount"]), np.array(data["policy"], dtype=float),
                   np.array(data["features"], dtype=float))

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "MdpModel":
        return cls.from_dict(json.loads(text))


def quadrant_features(side: int = GRID_SIDE) -> np.ndarray:
    """Indicator of the 2x2 block each state of a row-major grid lies in."""
    half = side // 2
    phi = np.zeros((side * side, 4))
    for s in range(side * side):
        r, c = divmod(s, side)
        phi[s, 2 * (r // half) + (c // half)] = 1.0
    return phi


def build_gridworld(seed: int = 0, n_agents: int = 10, shared_reward: bool = False,
                    discount: float = 0.9, reward_mean: float = 1.0, reward_var: float = 10.0) -> MdpModel:
    """4x4 grid, states numbered row-major; off-grid moves stay put; random policy.

    Reward tables are normal with the given mean and variance, one per agent
    unless ``shared_reward`` is set.
    """
    S = GRID_SIDE * GRID_SIDE
    P = np.zeros((len(ACTIONS), S, S))
    for a, name in enumerate(ACTIONS):
        dr, dc = _MOVES[name]
        for s in range(S):
            r, c = divmod(s, GRID_SIDE)
            rr, cc = r + dr, c + dc
            if 0 <= rr < GRID_SIDE and 0 <= cc < GRID_SIDE:
                P[a, s, rr * GRID_SIDE + cc] = 1.0
            else:
                P[a, s, s] = 1.0
    rng = np.random.default_rng(seed)
    sd = np.sqrt(reward_var)
    if shared_reward:
        rewards = np.repeat(rng.normal(reward_mean, sd, (1, S, len(ACTIONS))), n_agents, axis=0)
    else:
        rewards = rng.normal(reward_mean, sd, (n_agents, S, len(ACTIONS)))
    policy = np.full((S, len(ACTIONS)), 1.0 / len(ACTIONS))
    return MdpModel(P, rewards, discount, policy, quadrant_features())


def stationary_distribution(m: MdpModel | np.ndarray) -> np.ndarray:
    """Power iteration from state 0 to residual ``<= 1e-12``, cross-checked by a linear solve."""
    P = m.policy_chain() if isinstance(m, MdpModel) else np.asarray(m, dtype=float)
    S = P.shape[0]
    mu = np.zeros(S)
    mu[0] = 1.0
    for _ in range(POWER_MAX_ITERS):
        # averaging with the previous iterate removes any periodicity
        nxt = 0.5 * (mu + mu @ P)
        if np.abs(nxt @ P - nxt).sum() <= POWER_TOL:
            mu = nxt
            break
        mu = nxt
    else:
        raise NumericalError(f"power iteration did not converge in {POWER_MAX_ITERS} steps")
    M = np.vstack([P.T - np.eye(S), np.ones((1, S))])
    rhs = np.zeros(S + 1)
    rhs[-1] = 1.0
    direct, *_ = np.linalg.lstsq(M, rhs, rcond=None)
    if np.abs(direct - mu).max() > 1e-9:
        raise NumericalError("power iteration and linear solve disagree; chain may be reducible")
    return mu / mu.sum()


@dataclass(frozen=True)
class TdFixedPoint:
    A_mat: np.ndarray
    b_bar: np.ndarray
    theta_star: np.ndarray
    lambda_min: float
    lambda_max: float
    beta: float
    sigma_sq: float

    def step_bound(self) -> float:
        """Largest constant step for the one-step descent inequality."""
        return self.lambda_min / self.beta ** 2


def td_fixed_point(m: MdpModel) -> TdFixedPoint:
    """Exact ``A`` and ``b_bar`` by enumerating ``(s, a, s')``, then solve ``A theta = b_bar``."""
    mu = stationary_distribution(m)
    phi, g = m.features, m.discount
    w = np.einsum("s,sa,ast->sat", mu, m.policy, m.P)
    A = np.einsum("sat,sk,sl->kl", w, phi, phi) - g * np.einsum("sat,sk,tl->kl", w, phi, phi)
    b = np.einsum("sat,sa,sk->k", w, m.mean_reward, phi)
    sym = np.linalg.eigvalsh((A + A.T) / 2)
    if not sym[0] > 0:
        raise AssumptionError(f"symmetrized TD matrix has lambda_min = {sym[0]:.3e} <= 0")
    theta = np.linalg.solve(A, b)
    if np.linalg.norm(A @ theta - b) > 1e-10:
        raise NumericalError("TD fixed-point residual above 1e-10")
    return TdFixedPoint(A, b, theta, float(sym[0]), float(sym[-1]), 1.0 + g, 2.0 * m.r_max ** 2)


def sample_matrix(m: MdpModel, s: int, s_next: int) -> np.ndarray:
    """``A(zeta) = phi(s) (phi(s) - gamma phi(s'))^T``."""
    phi = m.features
    return np.outer(phi[s], phi[s] - m.discount * phi[s_next])


class TransitionSampler:
    """Inverse-CDF map from three uniforms to ``(s, a, s')`` under the stationary law."""

    def __init__(self, m: MdpModel):
        self.cdf_mu = np.cumsum(stationary_distribution(m))
        self.cdf_pi = np.cumsum(m.policy, axis=1)
        self.cdf_P = np.cumsum(m.P, axis=2)

    @staticmethod
    def _invert(cdf_rows, u):
        k = (cdf_rows <= u[..., None]).sum(axis=-1)
        return np.minimum(k, cdf_rows.shape[-1] - 1)

    def __call__(self, u: np.ndarray):
        s = self._invert(np.broadcast_to(self.cdf_mu, u.shape[:-1] + self.cdf_mu.shape), u[..., 0])
        a = self._invert(self.cdf_pi[s], u[..., 1])
        s_next = self._invert(self.cdf_P[a, s], u[..., 2])
        return s, a, s_next


def decentralized_td_step(state: NetworkState, W: MixingMatrix, m: MdpModel, alpha: float,
                          s, a, s_next) -> NetworkState:
    """``theta_i <- sum_j W_ij theta_j + alpha phi(s) delta_i`` with ``delta_i`` at the old iterate.

    ``s, a, s_next`` are integers or arrays over the leading seed axis of ``state.Theta``.
    """
    Theta = state.Theta
    if Theta.shape[-2:] != (W.n, m.d) or m.n != W.n:
        raise ContractError(f"state shape {Theta.shape[-2:]} does not match n={W.n}, d={m.d}")
    if not alpha > 0:
        raise ContractError(f"step size must be positive, got {alpha}")
    phi = m.features[s]
    direction = m.discount * m.features[s_next] - phi
    reward = np.moveaxis(m.rewards[:, s, a], 0, -1)
    delta = reward + np.einsum("...nd,...d->...n", Theta, direction)
    nxt = np.matmul(W.W, Theta) + alpha * delta[..., None] * phi[..., None, :]
    return NetworkState(nxt, state.t + 1)


def _run_td_chunk(m, W, fp, schedule, T, seeds, stride, init):
    S, n = len(seeds), m.n
    sampler = TransitionSampler(m)
    bank = streams.StreamBank(seeds, [streams.stream_id(streams.SHARED, 0)], 3)
    central = m.centralized()
    W1 = MixingMatrix.from_array(np.ones((1, 1)))
    residual = lambda avg: np.einsum("kl,sl->sk", fp.A_mat, avg) - fp.b_bar  # noqa: E731
    rec = Recorder(fp.theta_star, residual, S, T, stride)
    rec_c = Recorder(fp.theta_star, residual, S, T, stride)
    dec = NetworkState(np.ascontiguousarray(np.broadcast_to(init, (S, n, m.d)), dtype=np.float64))
    cen = NetworkState(np.ascontiguousarray(np.broadcast_to(init, (S, 1, m.d)), dtype=np.float64))
    rec(0, dec.Theta)
    rec_c(0, cen.Theta)
    for t in range(1, T + 1):
        s, a, s_next = sampler(bank.draw(t - 1)[:, 0])
        alpha = schedule.gamma(t)
        dec = decentralized_td_step(dec, W, m, alpha, s, a, s_next)
        cen = decentralized_td_step(cen, W1, central, alpha, s, a, s_next)
        guard(t, dec.Theta)
        rec(t, dec.Theta)
        rec_c(t, cen.Theta)
    return rec, rec_c


def run_td(W: MixingMatrix, m: MdpModel, schedule: StepSchedule, T: int, seeds, stride: int = 1,
           threads: int = 1, init=None):
    """Decentralized TD(0) and the centralized average-reward reference on the same samples.

    Returns ``(decentralized, centralized)`` lists of per-seed records.
    """
    if T < 1:
        raise ContractError(f"horizon must be >= 1, got {T}")
    if W.n != m.n:
        raise ContractError(f"W is {W.n}x{W.n} but the MDP has {m.n} agents")
    fp = td_fixed_point(m)
    if schedule.sup() > fp.step_bound():
        warnings.warn(f"sup step {schedule.sup():.3e} exceeds lambda_min / beta^2 = {fp.step_bound():.3e}",
                      StepSizeWarning, stacklevel=2)
    init = np.zeros(m.d) if init is None else np.asarray(init, dtype=float)
    chunks = split_seeds(seeds, threads)
    job = lambda c: _run_td_chunk(m, W, fp, schedule, T, c, stride, init)  # noqa: E731
    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(job, chunks))
    else:
        results = [job(c) for c in chunks]
    meta = {"algorithm": "TD0", "n": m.n, "rho": W.rho, "T": T, "stride": stride,
            "schedule": schedule.as_dict(), "lambda_min": fp.lambda_min, "beta": fp.beta}
    dec, cen = [], []
    for chunk, (r, rc) in zip(chunks, results):
        dec += r.records(chunk, meta)
        cen += rc.records(chunk, dict(meta, algorithm="TD0-centralized", n=1))
    return dec, cen


def default_td_schedule(fp: TdFixedPoint, scale: float = 0.6) -> StepSchedule:
    """``alpha_t = c / (c' + t)`` with ``c = scale / lambda_min`` and ``alpha_1 = lambda_min / beta^2``."""
    c = scale / fp.lambda_min
    return StepSchedule.inverse_time(c, c / fp.step_bound() - 1.0)
