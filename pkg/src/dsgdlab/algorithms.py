"""DSGD and its baselines, vectorized across independent seeds.

State arrays carry a leading seed axis: ``Theta`` has shape ``(S, n, dim)``.
The single-state step functions accept either ``(n, dim)`` or ``(S, n, dim)``
arrays. Every stochastic gradient draw consumes uniforms from the agent's
counter-addressed stream at the current iteration, so a seed's trajectory does
not depend on which other seeds share its batch or worker thread.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import rng as streams
from .errors import ConfigError, ContractError, DivergenceError
from .metrics import TrajectoryRecord
from .problems import DRAW_WIDTH, StochasticProblem
from .topology import MixingMatrix

DIVERGENCE_NORM = 1e12
KINDS = ("DSGD", "CSGD", "GT", "ED")


@dataclass(frozen=True)
class StepSchedule:
    """``inverse-time``: ``gamma_t = a0 / (a1 + t)``; ``constant``: ``gamma_t = value``."""

    kind: str = "inverse-time"
    a0: float = 1.0
    a1: float = 1.0
    value: float = 0.0

    def __post_init__(self):
        if self.kind == "inverse-time":
            if not (self.a0 > 0 and self.a1 > -1):
                raise ConfigError(f"inverse-time schedule needs a0 > 0 and a1 + 1 > 0, got {self.a0}, {self.a1}")
        elif self.kind == "constant":
            if not self.value > 0:
                raise ConfigError(f"constant step must be positive, got {self.value}")
        else:
            raise ConfigError(f"unknown schedule kind {self.kind!r}")

    @classmethod
    def constant(cls, value: float) -> "StepSchedule":
        return cls(kind="constant", value=value)

    @classmethod
    def inverse_time(cls, a0: float, a1: float) -> "StepSchedule":
        return cls(kind="inverse-time", a0=a0, a1=a1)

    @classmethod
    def horizon_rule(cls, T: int, D: float, n: int, L: float, sigma_sq: float) -> "StepSchedule":
        """Constant step ``sqrt(2 D n / (L sigma^2)) / sqrt(T)`` for a fixed horizon."""
        if min(T, D, n, L, sigma_sq) <= 0:
            raise ConfigError("horizon rule needs positive T, D, n, L and sigma^2")
        return cls.constant(math.sqrt(2.0 * D * n / (L * sigma_sq)) / math.sqrt(T))

    def gamma(self, t: int) -> float:
        """Step size used by the update that produces iterate ``t`` (``t >= 1``)."""
        if self.kind == "constant":
            return self.value
        return self.a0 / (self.a1 + t)

    def sup(self) -> float:
        return self.gamma(1)

    def as_dict(self) -> dict:
        if self.kind == "constant":
            return {"kind": self.kind, "value": self.value}
        return {"kind": self.kind, "a0": self.a0, "a1": self.a1}


@dataclass(frozen=True)
class AlgorithmSpec:
    kind: str = "DSGD"
    batch_size: int = 1
    schedule: StepSchedule = field(default_factory=StepSchedule)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown algorithm {self.kind!r}; choose from {', '.join(KINDS)}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")


@dataclass
class NetworkState:
    """Agent parameters ``Theta`` (``(n, dim)`` or ``(S, n, dim)``) at iteration ``t``."""

    Theta: np.ndarray
    t: int = 0

    @property
    def average(self) -> np.ndarray:
        return self.Theta.mean(axis=-2)

    @property
    def deviation(self) -> np.ndarray:
        return self.Theta - self.average[..., None, :]

    def consensus_error(self) -> np.ndarray:
        dev = self.deviation
        return np.einsum("...ij,...ij->...", dev, dev)


def _check(state_theta, W: MixingMatrix, p: StochasticProblem):
    if state_theta.shape[-2:] != (W.n, p.dim) or p.n != W.n:
        raise ContractError(
            f"state shape {state_theta.shape[-2:]} does not match W.n={W.n}, problem n={p.n}, dim={p.dim}")


def _gossip(W: np.ndarray, X: np.ndarray) -> np.ndarray:
    return np.matmul(W, X)


def dsgd_step(state: NetworkState, W: MixingMatrix, p: StochasticProblem, gamma: float,
              u: np.ndarray) -> NetworkState:
    """``theta_i <- sum_j W_ij theta_j - gamma g_i(theta_i)`` with ``g_i`` at the old iterate.

    ``u`` holds the agents' uniforms for this iteration, shape ``(..., n, batch, 3)``.
    """
    _check(state.Theta, W, p)
    if not gamma > 0:
        raise ContractError(f"step size must be positive, got {gamma}")
    G = p.batch_gradient(state.Theta, u)
    return NetworkState(_gossip(W.W, state.Theta) - gamma * G, state.t + 1)


def csgd_step(theta: np.ndarray, p: StochasticProblem, gamma: float, u: np.ndarray) -> np.ndarray:
    """Centralized minibatch step: every agent's draws evaluated at the shared ``theta``."""
    if not gamma > 0:
        raise ContractError(f"step size must be positive, got {gamma}")
    theta = np.asarray(theta, dtype=float)
    shared = np.broadcast_to(theta[..., None, :], theta.shape[:-1] + (p.n, p.dim))
    return theta - gamma * p.batch_gradient(shared, u).mean(axis=-2)


def gt_step(state: NetworkState, Y: np.ndarray, G: np.ndarray, W: MixingMatrix, p: StochasticProblem,
            gamma: float, u_next: np.ndarray):
    """Gradient tracking. ``G`` is the gradient stack at ``state``; returns ``(state, Y, G)``."""
    _check(state.Theta, W, p)
    Theta = _gossip(W.W, state.Theta - gamma * Y)
    G_next = p.batch_gradient(Theta, u_next)
    Y = _gossip(W.W, Y) + G_next - G
    return NetworkState(Theta, state.t + 1), Y, G_next


def ed_step(state: NetworkState, psi: np.ndarray, W_lazy: MixingMatrix, p: StochasticProblem,
            gamma: float, u: np.ndarray):
    """Exact diffusion step through the lazy matrix ``(I + W) / 2``; returns ``(state, psi)``."""
    _check(state.Theta, W_lazy, p)
    G = p.batch_gradient(state.Theta, u)
    psi_next = state.Theta - gamma * G
    phi = psi_next + state.Theta - psi
    return NetworkState(_gossip(W_lazy.W, phi), state.t + 1), psi_next


class Recorder:
    """Accumulates strided metrics for a batch of seeds.

    ``grad_fn`` maps averaged iterates ``(S, dim)`` to the quantity whose
    squared norm is logged as ``grad_norm_sq``.
    """

    def __init__(self, theta_star, grad_fn, S: int, T: int, stride: int):
        self.theta_star = np.asarray(theta_star, dtype=float)
        self.grad_fn = grad_fn
        self.iters = sorted(set(range(0, T + 1, stride)) | {T})
        k = len(self.iters)
        self.cols = {name: np.empty((S, k)) for name in TrajectoryRecord.COLUMNS}
        self.pos = 0

    def __call__(self, t: int, Theta: np.ndarray) -> None:
        if self.pos >= len(self.iters) or self.iters[self.pos] != t:
            return
        diff = Theta - self.theta_star
        per_agent = np.einsum("snd,snd->sn", diff, diff)
        avg = Theta.mean(axis=1)
        avg_gap = np.einsum("sd,sd->s", avg - self.theta_star, avg - self.theta_star)
        mean_gap = per_agent.mean(axis=1)
        worst = per_agent.max(axis=1)
        tol = 1e-12 * (1.0 + worst)
        if np.any(avg_gap > mean_gap + tol) or np.any(mean_gap > worst + tol):
            raise ContractError(f"gap ordering violated at t={t}")
        grad = self.grad_fn(avg)
        dev = Theta - avg[:, None, :]
        self.cols["avg_gap"][:, self.pos] = avg_gap
        self.cols["worst_gap"][:, self.pos] = worst
        self.cols["grad_norm_sq"][:, self.pos] = np.einsum("sd,sd->s", grad, grad)
        self.cols["consensus_err"][:, self.pos] = np.einsum("snd,snd->s", dev, dev)
        self.pos += 1

    def records(self, seeds, metadata: dict) -> list[TrajectoryRecord]:
        out = []
        for a, seed in enumerate(seeds):
            cols = {k: v[a].copy() for k, v in self.cols.items()}
            out.append(TrajectoryRecord(np.array(self.iters), cols, dict(metadata, seed=int(seed))))
        return out


def guard(t: int, Theta: np.ndarray) -> None:
    norms = np.sqrt(np.einsum("snd,snd->s", Theta, Theta))
    worst = float(norms.max()) if norms.size else 0.0
    if not np.isfinite(worst) or worst > DIVERGENCE_NORM:
        raise DivergenceError(f"iterate norm {worst:.3e} exceeded {DIVERGENCE_NORM:.0e} at iteration {t}",
                              iteration=t, norm=worst)


def _run_chunk(spec: AlgorithmSpec, p: StochasticProblem, W: MixingMatrix, T: int,
               init: np.ndarray, seeds: list[int], stride: int):
    S, n = len(seeds), p.n
    width = spec.batch_size * DRAW_WIDTH
    bank = streams.StreamBank(seeds, [streams.stream_id(streams.AGENT, i) for i in range(n)], width)

    def draws(t):
        return bank.draw(t).reshape(S, n, spec.batch_size, DRAW_WIDTH)

    rec = Recorder(p.theta_star, p.pooled_gradient, S, T, stride)
    Theta = np.ascontiguousarray(np.broadcast_to(init, (S, n, p.dim)), dtype=np.float64)
    sched = spec.schedule
    if spec.kind == "CSGD":
        theta = Theta.mean(axis=1)
        rec(0, Theta)
        for t in range(1, T + 1):
            theta = csgd_step(theta, p, sched.gamma(t), draws(t - 1))
            Theta = np.ascontiguousarray(np.broadcast_to(theta[:, None, :], (S, n, p.dim)))
            guard(t, Theta)
            rec(t, Theta)
        return rec
    state = NetworkState(Theta, 0)
    rec(0, Theta)
    if spec.kind == "DSGD":
        for t in range(1, T + 1):
            state = dsgd_step(state, W, p, sched.gamma(t), draws(t - 1))
            guard(t, state.Theta)
            rec(t, state.Theta)
    elif spec.kind == "GT":
        G = p.batch_gradient(state.Theta, draws(0))
        Y = G.copy()
        for t in range(1, T + 1):
            state, Y, G = gt_step(state, Y, G, W, p, sched.gamma(t), draws(t))
            guard(t, state.Theta)
            rec(t, state.Theta)
    else:
        W_lazy = W.lazy()
        psi = state.Theta.copy()
        for t in range(1, T + 1):
            state, psi = ed_step(state, psi, W_lazy, p, sched.gamma(t), draws(t - 1))
            guard(t, state.Theta)
            rec(t, state.Theta)
    return rec


def split_seeds(seeds, threads: int) -> list[list[int]]:
    seeds = list(seeds)
    k = max(1, min(threads, len(seeds)))
    size = -(-len(seeds) // k)
    return [seeds[i:i + size] for i in range(0, len(seeds), size)]


def run_many(spec: AlgorithmSpec, p: StochasticProblem, W: MixingMatrix, T: int, init,
             seeds, stride: int = 1, threads: int = 1, metadata: dict | None = None) -> list[TrajectoryRecord]:
    """One :class:`TrajectoryRecord` per seed.

    ``init`` is a ``dim`` vector (every agent starts there) or an ``(n, dim)``
    matrix. Seeds are split into contiguous chunks run on ``threads`` workers.
    """
    if T < 1:
        raise ContractError(f"horizon must be >= 1, got {T}")
    if stride < 1:
        raise ContractError(f"stride must be >= 1, got {stride}")
    if p.n != W.n:
        raise ContractError(f"problem has {p.n} agents but W is {W.n}x{W.n}")
    init = np.asarray(init, dtype=float)
    if init.shape not in ((p.dim,), (p.n, p.dim)):
        raise ContractError(f"init must have shape ({p.dim},) or ({p.n}, {p.dim}), got {init.shape}")
    chunks = split_seeds(seeds, threads)
    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            recs = list(pool.map(lambda c: _run_chunk(spec, p, W, T, init, c, stride), chunks))
    else:
        recs = [_run_chunk(spec, p, W, T, init, c, stride) for c in chunks]
    base = {"algorithm": spec.kind, "batch_size": spec.batch_size, "schedule": spec.schedule.as_dict(),
            "n": p.n, "rho": W.rho, "problem": p.fingerprint(), "T": T, "stride": stride}
    base.update(metadata or {})
    out = []
    for chunk, rec in zip(chunks, recs):
        out += rec.records(chunk, base)
    return out


def run(spec: AlgorithmSpec, p: StochasticProblem, W: MixingMatrix, T: int, init, seed: int,
        stride: int = 1) -> TrajectoryRecord:
    return run_many(spec, p, W, T, init, [seed], stride)[0]
