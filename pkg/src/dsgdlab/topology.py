"""Communication graphs, doubly stochastic mixing matrices and spectral gaps."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, TopologyError, TopologyGenerationError

STOCHASTIC_TOL = 1e-10
ER_MAX_ATTEMPTS = 100


@dataclass(frozen=True)
class Graph:
    """Undirected graph on ``range(n)``; self-loops are implicit."""

    n: int
    edges: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        if self.n < 1:
            raise TopologyError(f"graph needs at least one node, got n={self.n}")
        norm = set()
        for i, j in self.edges:
            if i == j:
                raise TopologyError(f"explicit self-loop ({i}, {j}); self-loops are implied")
            if not (0 <= i < self.n and 0 <= j < self.n):
                raise TopologyError(f"edge ({i}, {j}) outside node range 0..{self.n - 1}")
            norm.add((min(i, j), max(i, j)))
        object.__setattr__(self, "edges", frozenset(norm))

    def neighbors(self, i: int) -> list[int]:
        return sorted({b if a == i else a for a, b in self.edges if i in (a, b)})

    def degrees(self) -> np.ndarray:
        deg = np.zeros(self.n, dtype=int)
        for a, b in self.edges:
            deg[a] += 1
            deg[b] += 1
        return deg

    def adjacency(self) -> np.ndarray:
        adj = np.zeros((self.n, self.n), dtype=bool)
        for a, b in self.edges:
            adj[a, b] = adj[b, a] = True
        return adj

    def is_connected(self) -> bool:
        adj = self.adjacency()
        seen = np.zeros(self.n, dtype=bool)
        seen[0] = True
        queue = deque([0])
        while queue:
            u = queue.popleft()
            for v in np.flatnonzero(adj[u] & ~seen):
                seen[v] = True
                queue.append(int(v))
        return bool(seen.all())


def ring_graph(n: int) -> Graph:
    return Graph(n, frozenset((i, (i + 1) % n) for i in range(n)))


def complete_graph(n: int) -> Graph:
    return Graph(n, frozenset((i, j) for i in range(n) for j in range(i + 1, n)))


def star_graph(n: int) -> Graph:
    return Graph(n, frozenset((0, j) for j in range(1, n)))


def path_graph(n: int) -> Graph:
    return Graph(n, frozenset((i, i + 1) for i in range(n - 1)))


def check_doubly_stochastic(W: np.ndarray, tol: float = STOCHASTIC_TOL) -> None:
    """Raise :class:`ContractError` naming the first offending row or column."""
    W = np.asarray(W, dtype=float)
    if W.ndim != 2 or W.shape[0] != W.shape[1]:
        raise ContractError(f"mixing matrix must be square, got shape {W.shape}")
    if np.any(W < 0):
        i, j = np.argwhere(W < 0)[0]
        raise ContractError(f"negative weight W[{i},{j}] = {W[i, j]!r}")
    rows = np.abs(W.sum(axis=1) - 1.0)
    if rows.max() > tol:
        i = int(rows.argmax())
        raise ContractError(f"row {i} sums to {W[i].sum()!r}, expected 1 within {tol}")
    cols = np.abs(W.sum(axis=0) - 1.0)
    if cols.max() > tol:
        j = int(cols.argmax())
        raise ContractError(f"column {j} sums to {W[:, j].sum()!r}, expected 1 within {tol}")


def consensus_basis(n: int) -> np.ndarray:
    """Orthonormal basis (n x n-1) of the complement of the all-ones vector.

    Columns 2..n of the Householder reflection that maps e_1 onto 1/sqrt(n).
    """
    if n == 1:
        return np.zeros((1, 0))
    v = np.full(n, 1.0 / np.sqrt(n))
    v[0] -= 1.0
    H = np.eye(n) - 2.0 * np.outer(v, v) / (v @ v)
    return H[:, 1:]


def spectral_gap(W: np.ndarray) -> float:
    """``1 - ||U^T W U||_2`` for the consensus basis ``U``."""
    W = np.asarray(W, dtype=float)
    check_doubly_stochastic(W)
    n = W.shape[0]
    if n == 1:
        return 1.0
    U = consensus_basis(n)
    s = np.linalg.svd(U.T @ W @ U, compute_uv=False)[0]
    return float(1.0 - s)


@dataclass(frozen=True, eq=False)
class MixingMatrix:
    """A validated doubly stochastic gossip matrix with its cached spectral gap."""

    W: np.ndarray
    rho: float
    graph: Graph | None = None

    @classmethod
    def from_array(cls, W, graph: Graph | None = None) -> "MixingMatrix":
        W = np.array(W, dtype=np.float64)
        rho = spectral_gap(W)
        if graph is not None:
            allowed = graph.adjacency() | np.eye(graph.n, dtype=bool)
            bad = np.argwhere((W != 0) & ~allowed)
            if len(bad):
                i, j = bad[0]
                raise TopologyError(f"W[{i},{j}] nonzero but ({i}, {j}) is not an edge")
        if not rho > 0:
            raise TopologyError(f"spectral gap {rho!r} is not positive; graph disconnected or periodic")
        W.setflags(write=False)
        return cls(W, rho, graph)

    @property
    def n(self) -> int:
        return self.W.shape[0]

    def lazy(self) -> "MixingMatrix":
        """``(I + W) / 2``, the wrapped matrix exact diffusion gossips with."""
        return MixingMatrix.from_array((np.eye(self.n) + self.W) / 2.0, self.graph)

    def to_text(self) -> str:
        lines = [str(self.n)]
        lines += [" ".join(format(x, ".17g") for x in row) for row in self.W]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "MixingMatrix":
        lines = [ln for ln in text.strip().splitlines() if ln.strip()]
        try:
            n = int(lines[0])
            rows = [[float(tok) for tok in ln.split()] for ln in lines[1:]]
        except (ValueError, IndexError) as exc:
            raise TopologyError(f"malformed mixing-matrix text: {exc}") from None
        if len(rows) != n or any(len(r) != n for r in rows):
            raise TopologyError(f"expected {n} rows of {n} values")
        return cls.from_array(np.array(rows))

    def __eq__(self, other):
        return isinstance(other, MixingMatrix) and np.array_equal(self.W, other.W)

    def __hash__(self):
        return hash(self.W.tobytes())


def _absorb_diagonal(W: np.ndarray) -> np.ndarray:
    np.fill_diagonal(W, 0.0)
    np.fill_diagonal(W, 1.0 - W.sum(axis=1))
    return W


def build_ring(n: int, self_weight: float) -> MixingMatrix:
    """Circulant ring: ``W_ii = self_weight``, each neighbour ``(1 - self_weight) / 2``."""
    if n < 3:
        raise TopologyError(f"ring needs n >= 3, got {n}")
    if not 0.0 < self_weight < 1.0:
        raise TopologyError(f"self_weight must lie in (0, 1), got {self_weight}")
    W = np.zeros((n, n))
    side = (1.0 - self_weight) / 2.0
    for i in range(n):
        W[i, (i - 1) % n] += side
        W[i, (i + 1) % n] += side
    return MixingMatrix.from_array(_absorb_diagonal(W), ring_graph(n))


def mh_weights(g: Graph) -> MixingMatrix:
    """Metropolis-Hastings weights ``1 / (1 + max(deg_i, deg_j))`` on edges."""
    if not g.is_connected():
        raise TopologyError(f"graph on {g.n} nodes is disconnected")
    deg = g.degrees()
    W = np.zeros((g.n, g.n))
    for i, j in g.edges:
        W[i, j] = W[j, i] = 1.0 / (1.0 + max(deg[i], deg[j]))
    return MixingMatrix.from_array(_absorb_diagonal(W), g)


def build_erdos_renyi(n: int, p: float, seed: int, max_attempts: int = ER_MAX_ATTEMPTS) -> MixingMatrix:
    """Connected G(n, p) sample with halved MH weights, so ``W_ii >= 1/2``."""
    if not 0.0 < p <= 1.0:
        raise TopologyError(f"edge probability must lie in (0, 1], got {p}")
    rng = np.random.default_rng(seed)
    iu, ju = np.triu_indices(n, k=1)
    for attempt in range(1, max_attempts + 1):
        keep = rng.random(iu.size) < p
        g = Graph(n, frozenset(zip(iu[keep].tolist(), ju[keep].tolist())))
        if g.is_connected():
            W = np.array(mh_weights(g).W) / 2.0
            return MixingMatrix.from_array(_absorb_diagonal(W), g)
    raise TopologyGenerationError(
        f"no connected G({n}, {p}) sample in {max_attempts} attempts", attempts=max_attempts
    )
