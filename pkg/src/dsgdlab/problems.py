"""Stochastic objective families with exact oracles and a homogeneity dial.

Every agent ``i`` owns an empirical dataset ``B_i`` of ``m`` samples; the union
of all datasets is the pooled dataset ``B``. At draw time a sample comes from
``B`` with probability ``alpha`` and from ``B_i`` otherwise, so ``alpha = 1``
makes every agent's objective identical and ``alpha = 0`` keeps them distinct.

Samples are addressed by flat index ``i * m + k`` into the pooled dataset, and
each draw consumes three uniforms ``(switch, pooled pick, local pick)``. This
lets the algorithms draw uniforms from counter-based streams and map them to
samples with one vectorized call.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import math
from dataclasses import dataclass

import numpy as np
from scipy import optimize

from .errors import ConfigError, ContractError, GenerationError, SolverError

#: uniforms consumed per sample draw
DRAW_WIDTH = 3
PD_MAX_RETRIES = 100
PROBE_RADII = (0.1, 1.0, 10.0)
PROBE_COUNT = 32
LOGISTIC_GTOL = 1e-9


@dataclass(frozen=True)
class HomogeneityMix:
    """Probability of drawing from the pooled dataset instead of the local one."""

    alpha: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")


@dataclass(frozen=True)
class ProblemConstants:
    L: float
    mu: float
    varsigma: float
    varsigma_H: float
    L_H: float

    def as_dict(self) -> dict:
        return {"L": self.L, "mu": self.mu, "varsigma": self.varsigma,
                "varsigma_H": self.varsigma_H, "L_H": self.L_H}


def _mix(alpha, local, pooled):
    """Mean of the mixed distribution: ``(1 - alpha) * local + alpha * pooled``."""
    return (1.0 - alpha) * local + alpha * pooled


class StochasticProblem:
    """Base class: sampling over the pooled empirical dataset plus oracles.

    Subclasses provide per-sample gradients (``sample_grads``), per-agent local
    means and the optimum. ``theta`` arguments broadcast: a leading batch shape
    ``(..., n, dim)`` for per-agent evaluation or ``(..., dim)`` for the average.
    """

    family = "abstract"
    n: int
    m: int
    dim: int
    alpha: float
    theta_star: np.ndarray

    # -- sampling ---------------------------------------------------------
    def draw_indices(self, u: np.ndarray) -> np.ndarray:
        """Map uniforms of shape ``(..., n, batch, 3)`` to flat sample indices."""
        u = np.asarray(u)
        if u.shape[-1] != DRAW_WIDTH or u.shape[-3] != self.n:
            raise ContractError(f"uniform block has shape {u.shape}, expected (..., {self.n}, batch, 3)")
        total = self.n * self.m
        pooled = np.minimum((u[..., 1] * total).astype(np.int64), total - 1)
        local = np.minimum((u[..., 2] * self.m).astype(np.int64), self.m - 1)
        agent = np.arange(self.n).reshape((self.n, 1))
        return np.where(u[..., 0] < self.alpha, pooled, agent * self.m + local)

    def batch_gradient(self, theta: np.ndarray, u: np.ndarray) -> np.ndarray:
        """Mean of ``batch`` sampled gradients per agent; ``theta`` is ``(..., n, dim)``."""
        idx = self.draw_indices(u)
        return self.sample_grads(idx, theta).mean(axis=-2)

    def sample_gradient(self, agent: int, theta, rng: np.random.Generator) -> np.ndarray:
        """One draw from ``agent``'s mixed distribution, gradient at ``theta``."""
        if not 0 <= agent < self.n:
            raise ContractError(f"agent {agent} out of range 0..{self.n - 1}")
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.dim,) or not np.all(np.isfinite(theta)):
            raise ContractError(f"theta must be a finite vector of length {self.dim}")
        u = rng.random(DRAW_WIDTH)
        total = self.n * self.m
        if u[0] < self.alpha:
            k = min(int(u[1] * total), total - 1)
        else:
            k = agent * self.m + min(int(u[2] * self.m), self.m - 1)
        return self.sample_grads(np.array([[k]]), theta[None, :])[0, 0]

    # -- oracles ----------------------------------------------------------
    def exact_gradient(self, agent, theta) -> np.ndarray:
        """Gradient of ``f_i`` (integer agent) or of ``f`` (``agent=None``)."""
        theta = np.asarray(theta, dtype=float)
        if agent is None:
            return self.pooled_gradient(theta)
        return _mix(self.alpha, self.local_gradient(agent, theta), self.pooled_gradient(theta))

    def exact_hessian(self, agent, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        if agent is None:
            return self.pooled_hessian(theta)
        return _mix(self.alpha, self.local_hessian(agent, theta), self.pooled_hessian(theta))

    def agent_gradients(self, theta) -> np.ndarray:
        """All agents' exact gradients at a shared ``theta``, shape ``(n, dim)``."""
        return np.stack([self.exact_gradient(i, theta) for i in range(self.n)])

    def default_probes(self, seed: int = 0) -> list[np.ndarray]:
        """``theta_star`` plus Gaussian directions scaled to each probe radius."""
        rng = np.random.default_rng(seed)
        probes = [self.theta_star.copy()]
        per = (PROBE_COUNT - 1) // len(PROBE_RADII)
        sizes = [per] * len(PROBE_RADII)
        sizes[0] += PROBE_COUNT - 1 - per * len(PROBE_RADII)
        for radius, k in zip(PROBE_RADII, sizes):
            for _ in range(k):
                z = rng.standard_normal(self.dim)
                probes.append(self.theta_star + radius * z / np.linalg.norm(z))
        return probes

    def gradient_heterogeneity(self, probes) -> float:
        worst = 0.0
        for th in probes:
            g = self.exact_gradient(None, th)
            for i in range(self.n):
                worst = max(worst, float(np.linalg.norm(self.exact_gradient(i, th) - g)))
        return worst

    def hessian_heterogeneity(self, probes) -> float:
        """Max over agents and probes of ``||hess f_i - hess f||_2``."""
        if len(probes) == 0:
            raise ContractError("at least one probe point is required")
        worst = 0.0
        for th in probes:
            H = self.exact_hessian(None, th)
            for i in range(self.n):
                worst = max(worst, float(np.linalg.norm(self.exact_hessian(i, th) - H, 2)))
        return worst

    def gradient_variance(self, theta=None, reduce: str = "mean") -> float:
        """Single-draw gradient variance at ``theta``, reduced over agents by ``mean`` or ``max``.

        Computed exactly by enumerating the mixed empirical distribution.
        """
        if reduce not in ("mean", "max"):
            raise ContractError(f"reduce must be 'mean' or 'max', got {reduce!r}")
        theta = self.theta_star if theta is None else np.asarray(theta, dtype=float)
        idx = np.arange(self.n * self.m)[:, None]
        g = self.sample_grads(idx, np.broadcast_to(theta, (idx.shape[0], self.dim)))[:, 0]
        sq = np.einsum("kd,kd->k", g, g).reshape(self.n, self.m)
        pooled_sq = sq.mean()
        per_agent = np.empty(self.n)
        for i in range(self.n):
            mean = self.exact_gradient(i, theta)
            per_agent[i] = _mix(self.alpha, sq[i].mean(), pooled_sq) - mean @ mean
        value = per_agent.mean() if reduce == "mean" else per_agent.max()
        return float(max(value, 0.0))

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(self.family.encode())
        h.update(np.float64(self.alpha).tobytes())
        for arr in self._payload_arrays():
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()[:16]

    # -- subclass hooks ---------------------------------------------------
    def sample_grads(self, idx, theta):  # pragma: no cover - abstract
        """Per-sample gradients: ``idx`` is ``(..., batch)``, ``theta`` is ``(..., dim)``."""
        raise NotImplementedError

    def _payload_arrays(self):  # pragma: no cover - abstract
        raise NotImplementedError


# ---------------------------------------------------------------------------
# quadratic family
# ---------------------------------------------------------------------------


def pair_index(d: int, i: int) -> tuple[int, int]:
    """The ``i``-th 2-combination of ``range(d)`` in lexicographic order."""
    return next(itertools.islice(itertools.combinations(range(d), 2), i, None))


class QuadraticProblem(StochasticProblem):
    """Per-sample loss ``0.5 theta^T (A + A^T) theta + b^T theta``.

    ``A`` holds raw samples ``(n, m, d, d)``, ``b`` holds ``(n, m, d)``.
    """

    family = "quadratic"

    def __init__(self, A, b, mix: HomogeneityMix | float = 0.0, provenance: dict | None = None):
        A = np.array(A, dtype=np.float64)
        b = np.array(b, dtype=np.float64)
        if A.ndim != 4 or A.shape[2] != A.shape[3] or b.shape != A.shape[:3]:
            raise ContractError(f"dataset shapes {A.shape} / {b.shape} are inconsistent")
        if A.shape[1] < 1:
            raise ConfigError("each agent needs at least one sample")
        mix = mix if isinstance(mix, HomogeneityMix) else HomogeneityMix(float(mix))
        self.A, self.b = A, b
        self.n, self.m, self.dim = A.shape[0], A.shape[1], A.shape[2]
        self.alpha = mix.alpha
        self.provenance = dict(provenance or {})
        self._H = (A + np.swapaxes(A, -1, -2)).reshape(self.n * self.m, self.dim, self.dim)
        self._bflat = b.reshape(self.n * self.m, self.dim)
        self.A_mean = A.mean(axis=1)
        self.b_mean = b.mean(axis=1)
        self.H_local = self.A_mean + np.swapaxes(self.A_mean, -1, -2)
        self.H_bar = self.H_local.mean(axis=0)
        self.b_bar = self.b_mean.mean(axis=0)
        total = self.H_local.sum(axis=0)
        self.min_eig = float(np.linalg.eigvalsh(total)[0])
        if self.min_eig > 0:
            self.theta_star = -np.linalg.solve(total, self.b_mean.sum(axis=0))
        else:
            self.theta_star = None
        for arr in (self.A, self.b, self._H, self._bflat):
            arr.setflags(write=False)

    @property
    def H_mixed(self) -> np.ndarray:
        return _mix(self.alpha, self.H_local, self.H_bar)

    @property
    def b_mixed(self) -> np.ndarray:
        return _mix(self.alpha, self.b_mean, self.b_bar)

    def with_mix(self, mix) -> "QuadraticProblem":
        """Same datasets, different homogeneity dial."""
        return QuadraticProblem(self.A, self.b, mix, self.provenance)

    def sample_grads(self, idx, theta):
        return np.einsum("...kl,...l->...k", self._H[idx], theta[..., None, :]) + self._bflat[idx]

    def local_gradient(self, agent, theta):
        return self.H_local[agent] @ theta + self.b_mean[agent]

    def pooled_gradient(self, theta):
        # einsum keeps each row's arithmetic independent of how many rows are batched
        return np.einsum("kl,...l->...k", self.H_bar, theta) + self.b_bar

    def local_hessian(self, agent, theta):
        return self.H_local[agent]

    def pooled_hessian(self, theta):
        return self.H_bar

    def loss(self, theta) -> float:
        theta = np.asarray(theta, dtype=float)
        return float(0.5 * theta @ self.H_bar @ theta + self.b_bar @ theta)

    def hessian_heterogeneity(self, probes=None) -> float:
        # Hessians are constant, so probes are irrelevant.
        H = self.H_mixed
        return float(max(np.linalg.norm(H[i] - self.H_bar, 2) for i in range(self.n)))

    def estimate_constants(self, probes=None) -> ProblemConstants:
        probes = self.default_probes() if probes is None else probes
        if len(probes) == 0:
            raise ContractError("at least one probe point is required")
        H = self.H_mixed
        return ProblemConstants(
            L=float(max(np.linalg.norm(H[i], 2) for i in range(self.n))),
            mu=float(np.linalg.eigvalsh(self.H_bar)[0]),
            varsigma=self.gradient_heterogeneity(probes),
            varsigma_H=self.hessian_heterogeneity(),
            L_H=0.0,
        )

    def _payload_arrays(self):
        return (self.A, self.b)

    def to_dict(self) -> dict:
        return {"family": self.family, "n": self.n, "m": self.m, "d": self.dim,
                "alpha": self.alpha, "provenance": self.provenance,
                "A": self.A.tolist(), "b": self.b.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "QuadraticProblem":
        return cls(np.array(data["A"]), np.array(data["b"]), data["alpha"], data.get("provenance"))


def make_quadratic(d: int, n: int, samples_per_agent: int, mix: HomogeneityMix | float = 0.0,
                   seed: int = 0, curvature_shift: float = 1.0, offset_scale: float = 0.0,
                   max_retries: int = PD_MAX_RETRIES) -> QuadraticProblem:
    """Random quadratic with agent-specific curvature on coordinate pairs.

    Sample entries are standard normal, except the two diagonal entries of
    agent ``i``'s pair ``pair_index(d, i)``, which are normal with variance 2
    and mean ``curvature_shift``. ``offset_scale`` adds to every ``b`` sample
    of agent ``i`` the centred indicator of its pair, so agents disagree on
    the linear term while the network-average ``b`` is unchanged. The seed is
    incremented until ``sum_i (A_i + A_i^T)`` is positive definite.
    """
    if d < 3 or math.comb(d, 2) < n:
        raise ConfigError(f"need C(d, 2) >= n distinct coordinate pairs, got d={d}, n={n}")
    if samples_per_agent < 1 or n < 1:
        raise ConfigError("n and samples_per_agent must be positive")
    pairs = list(itertools.islice(itertools.combinations(range(d), 2), n))
    ind = np.zeros((n, d))
    for i, pr in enumerate(pairs):
        ind[i, list(pr)] = 1.0
    ind -= ind.mean(axis=0)
    for attempt in range(max_retries):
        s = seed + attempt
        rng = np.random.default_rng(s)
        A = rng.standard_normal((n, samples_per_agent, d, d))
        b = rng.standard_normal((n, samples_per_agent, d))
        for i, (p, q) in enumerate(pairs):
            for c in (p, q):
                A[i, :, c, c] = curvature_shift + math.sqrt(2.0) * rng.standard_normal(samples_per_agent)
        b += offset_scale * ind[:, None, :]
        prov = {"seed": seed, "used_seed": s, "attempts": attempt + 1,
                "curvature_shift": curvature_shift, "offset_scale": offset_scale}
        prob = QuadraticProblem(A, b, mix, prov)
        if prob.min_eig > 0:
            return prob
    raise GenerationError(f"sum of agent Hessians not positive definite after {max_retries} seeds")


# ---------------------------------------------------------------------------
# logistic family
# ---------------------------------------------------------------------------


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


class LogisticProblem(StochasticProblem):
    """Per-sample loss ``r/2 ||theta||^2 + log(1 + e^<x,theta>) - y <x,theta>``.

    ``X`` holds augmented features ``(n, m, d+1)`` whose last column is 1.
    """

    family = "logistic"

    def __init__(self, X, y, r: float, mix: HomogeneityMix | float = 0.0,
                 provenance: dict | None = None, theta_star=None):
        X = np.array(X, dtype=np.float64)
        y = np.array(y, dtype=np.float64)
        if X.ndim != 3 or y.shape != X.shape[:2]:
            raise ContractError(f"dataset shapes {X.shape} / {y.shape} are inconsistent")
        if not r > 0:
            raise ConfigError(f"ridge coefficient must be positive, got {r}")
        mix = mix if isinstance(mix, HomogeneityMix) else HomogeneityMix(float(mix))
        self.X, self.y, self.r = X, y, float(r)
        self.n, self.m, self.dim = X.shape
        self.alpha = mix.alpha
        self.provenance = dict(provenance or {})
        self._Xf = X.reshape(-1, self.dim)
        self._yf = y.reshape(-1)
        for arr in (self.X, self.y, self._Xf, self._yf):
            arr.setflags(write=False)
        self.theta_star = self._solve() if theta_star is None else np.array(theta_star, dtype=float)

    def with_mix(self, mix) -> "LogisticProblem":
        return LogisticProblem(self.X, self.y, self.r, mix, self.provenance, self.theta_star)

    def _solve(self) -> np.ndarray:
        res = optimize.minimize(self.loss, np.zeros(self.dim), jac=self.pooled_gradient,
                                hess=self.pooled_hessian, method="trust-exact",
                                options={"gtol": LOGISTIC_GTOL / 10, "maxiter": 1000})
        theta = res.x
        # trust-region stops on its own criteria; Newton polish is quadratic near the optimum
        for _ in range(20):
            g = self.pooled_gradient(theta)
            if np.linalg.norm(g) <= LOGISTIC_GTOL / 10:
                break
            theta = theta - np.linalg.solve(self.pooled_hessian(theta), g)
        gnorm = float(np.linalg.norm(self.pooled_gradient(theta)))
        if gnorm > LOGISTIC_GTOL:
            raise SolverError(f"logistic solve stopped at gradient norm {gnorm:.3e}", grad_norm=gnorm)
        return theta

    def sample_grads(self, idx, theta):
        x = self._Xf[idx]
        z = np.einsum("...k,...k->...", x, theta[..., None, :])
        return self.r * theta[..., None, :] + (_sigmoid(z) - self._yf[idx])[..., None] * x

    def _grad_over(self, X, y, theta):
        p = _sigmoid(X @ theta)
        return self.r * theta + (p - y) @ X / len(y)

    def _hess_over(self, X, theta):
        p = _sigmoid(X @ theta)
        return self.r * np.eye(self.dim) + (X.T * (p * (1 - p))) @ X / len(X)

    def local_gradient(self, agent, theta):
        return self._grad_over(self.X[agent], self.y[agent], theta)

    def pooled_gradient(self, theta):
        theta = np.asarray(theta, dtype=float)
        if theta.ndim == 1:
            return self._grad_over(self._Xf, self._yf, theta)
        p = _sigmoid(np.einsum("jk,sk->sj", self._Xf, theta))
        return self.r * theta + np.einsum("sj,jk->sk", p - self._yf, self._Xf) / len(self._yf)

    def local_hessian(self, agent, theta):
        return self._hess_over(self.X[agent], theta)

    def pooled_hessian(self, theta):
        return self._hess_over(self._Xf, theta)

    def loss(self, theta) -> float:
        z = self._Xf @ theta
        return float(0.5 * self.r * theta @ theta + np.mean(np.logaddexp(0.0, z) - self._yf * z))

    def estimate_constants(self, probes=None) -> ProblemConstants:
        """``L`` and ``mu`` are exact bounds; the rest are probe lower estimates."""
        probes = self.default_probes() if probes is None else probes
        if len(probes) == 0:
            raise ContractError("at least one probe point is required")
        L = self.r + float(np.max(np.einsum("kd,kd->k", self._Xf, self._Xf))) / 4.0
        hess = [[self.exact_hessian(i, th) for th in probes] for i in range(self.n)]
        L_H = 0.0
        for a, b in itertools.combinations(range(len(probes)), 2):
            dist = np.linalg.norm(probes[a] - probes[b])
            if dist == 0:
                continue
            for i in range(self.n):
                L_H = max(L_H, float(np.linalg.norm(hess[i][a] - hess[i][b], 2)) / dist)
        return ProblemConstants(L=L, mu=self.r, varsigma=self.gradient_heterogeneity(probes),
                                varsigma_H=self.hessian_heterogeneity(probes), L_H=float(L_H))

    def _payload_arrays(self):
        return (self.X, self.y, np.float64(self.r))

    def to_dict(self) -> dict:
        return {"family": self.family, "n": self.n, "m": self.m, "d": self.dim,
                "alpha": self.alpha, "r": self.r, "provenance": self.provenance,
                "X": self.X.tolist(), "y": self.y.tolist(),
                "theta_star": self.theta_star.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "LogisticProblem":
        return cls(np.array(data["X"]), np.array(data["y"]), data["r"], data["alpha"],
                   data.get("provenance"), np.array(data["theta_star"]))


def make_logistic(d: int, n: int, samples_per_agent: int, r: float = 1.0,
                  mix: HomogeneityMix | float = 0.0, seed: int = 0,
                  partition: str = "random") -> LogisticProblem:
    """Separable logistic data labelled by a random hyperplane.

    ``partition="random"`` gives every agent its own i.i.d. draw;
    ``partition="sorted"`` pools all samples, sorts them by signed margin and
    deals out contiguous blocks, which makes the local datasets disagree.
    """
    if n < 1 or samples_per_agent < 1 or d < 1:
        raise ConfigError("d, n and samples_per_agent must be positive")
    if partition not in ("random", "sorted"):
        raise ConfigError(f"unknown partition {partition!r}; use 'random' or 'sorted'")
    rng = np.random.default_rng(seed)
    truth = rng.uniform(-1.0, 1.0, d + 1)
    x = rng.uniform(-1.0, 1.0, (n * samples_per_agent, d))
    margin = x @ truth[:d] + truth[d]
    y = (np.sign(margin) + 1.0) / 2.0
    if partition == "sorted":
        order = np.argsort(margin, kind="stable")
        x, y = x[order], y[order]
    X = np.concatenate([x, np.ones((len(x), 1))], axis=1).reshape(n, samples_per_agent, d + 1)
    prov = {"seed": seed, "partition": partition, "theta_o": truth[:d].tolist(), "b_o": float(truth[d])}
    return LogisticProblem(X, y.reshape(n, samples_per_agent), r, mix, prov)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

_FAMILIES = {"quadratic": QuadraticProblem, "logistic": LogisticProblem}


def problem_to_json(p: StochasticProblem) -> str:
    return json.dumps(p.to_dict())


def problem_from_json(text: str) -> StochasticProblem:
    data = json.loads(text)
    family = data.get("family")
    if family not in _FAMILIES:
        raise ConfigError(f"unknown problem family {family!r}")
    return _FAMILIES[family].from_dict(data)
