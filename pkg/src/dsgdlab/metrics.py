"""Trajectory records, centralized bound curves, transient-time estimates and fits."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DegenerateReferenceError, FitError

SCHEMA_VERSION = 1


@dataclass
class TrajectoryRecord:
    """Strided per-iteration metrics of one run (or of a seed average)."""

    COLUMNS = ("avg_gap", "worst_gap", "grad_norm_sq", "consensus_err")

    iters: np.ndarray
    columns: dict
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.iters = np.asarray(self.iters, dtype=np.int64)
        missing = set(self.COLUMNS) - set(self.columns)
        if missing:
            raise ContractError(f"record is missing columns {sorted(missing)}")
        for name in self.COLUMNS:
            col = np.asarray(self.columns[name], dtype=np.float64)
            if col.shape != self.iters.shape:
                raise ContractError(f"column {name} has shape {col.shape}, expected {self.iters.shape}")
            self.columns[name] = col

    def __getitem__(self, name: str) -> np.ndarray:
        return self.columns[name]

    def __len__(self) -> int:
        return len(self.iters)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("iter",) + self.COLUMNS)
        for k, t in enumerate(self.iters):
            w.writerow([int(t)] + [repr(float(self.columns[c][k])) for c in self.COLUMNS])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, metadata: dict | None = None) -> "TrajectoryRecord":
        rows = list(csv.reader(io.StringIO(text)))
        header = tuple(rows[0])
        if header != ("iter",) + cls.COLUMNS:
            raise ContractError(f"unexpected CSV header {header}")
        body = np.array([[float(x) for x in r] for r in rows[1:]]).reshape(-1, len(header))
        cols = {c: body[:, j + 1] for j, c in enumerate(cls.COLUMNS)}
        return cls(body[:, 0].astype(np.int64), cols, dict(metadata or {}))

    def metadata_json(self) -> str:
        return json.dumps(self.metadata, indent=2, sort_keys=True)


def seed_average(records: list[TrajectoryRecord]) -> TrajectoryRecord:
    """Column-wise mean across seeds; iteration grids must agree."""
    if not records:
        raise ContractError("no records to average")
    iters = records[0].iters
    for r in records[1:]:
        if not np.array_equal(r.iters, iters):
            raise ContractError("records have different iteration grids")
    cols = {c: np.mean([r[c] for r in records], axis=0) for c in TrajectoryRecord.COLUMNS}
    meta = {k: v for k, v in records[0].metadata.items() if k != "seed"}
    meta["seeds"] = [r.metadata.get("seed") for r in records]
    return TrajectoryRecord(iters.copy(), cols, meta)


# ---------------------------------------------------------------------------
# centralized bounds
# ---------------------------------------------------------------------------


def ub_cvx(t: int, sigma_sq: float, n: int, mu: float, schedule) -> float:
    """Strongly convex centralized curve ``sigma^2 gamma_t / (n mu)``."""
    if not mu > 0:
        raise ContractError(f"mu must be positive, got {mu}")
    return sigma_sq / (n * mu) * schedule.gamma(t)


def ub_ncvx(T: int, L: float, D: float, sigma_sq: float, n: int, constant: float = 8.0) -> float:
    """Smooth nonconvex centralized bound ``sqrt(constant D L sigma^2 / (n T))``."""
    if min(T, L, D, sigma_sq, n) <= 0:
        raise ContractError("ub_ncvx needs positive T, L, D, sigma^2 and n")
    return math.sqrt(constant * D * L * sigma_sq / (n * T))


# ---------------------------------------------------------------------------
# transient time
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TransientEstimate:
    T_hat: int | None
    window: int
    threshold: float
    reference: str = "CSGD"

    @property
    def reached(self) -> bool:
        return self.T_hat is not None

    def as_dict(self) -> dict:
        return {"T_hat": self.T_hat, "reached": self.reached, "window": self.window,
                "threshold": self.threshold, "reference": self.reference}


def default_window(n_points: int) -> int:
    """10% of the record length, at least 50 points (capped by the record)."""
    return min(n_points, max(50, n_points // 10))


def estimate_transient(decentralized: TrajectoryRecord, centralized: TrajectoryRecord,
                       window: int | None = None, threshold: float = 0.25,
                       field_name: str = "worst_gap") -> TransientEstimate:
    """First recorded ``t`` after which the decentralized gap stays within ``threshold`` of the reference.

    With ``k`` the index of ``t``, requires ``dec[k - i] / ref[k] <= threshold``
    for every ``i`` in ``0 .. window-1``. Window is counted in recorded points.
    """
    if not np.array_equal(decentralized.iters, centralized.iters):
        raise ContractError("records must share the same iteration grid")
    dec = decentralized[field_name]
    ref = centralized["avg_gap"]
    n = len(dec)
    window = default_window(n) if window is None else int(window)
    if not 1 <= window <= n:
        raise ContractError(f"window {window} must lie in 1..{n}")
    # trailing window maximum of dec ending at each index
    tail = np.full(n, np.inf)
    run = np.lib.stride_tricks.sliding_window_view(dec, window).max(axis=1)
    tail[window - 1:] = run
    for k in range(window - 1, n):
        if ref[k] == 0:
            raise DegenerateReferenceError(f"centralized gap is zero at t={int(decentralized.iters[k])}")
        if tail[k] / ref[k] <= threshold:
            return TransientEstimate(int(decentralized.iters[k]), window, threshold)
    return TransientEstimate(None, window, threshold)


# ---------------------------------------------------------------------------
# fits
# ---------------------------------------------------------------------------


def _linfit(x, y):
    A = np.vstack([x, np.ones_like(x)]).T
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - A @ coef
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - float((resid ** 2).sum()) / ss_tot if ss_tot > 0 else 1.0
    return float(coef[0]), float(coef[1]), r2


def rate_fit(record: TrajectoryRecord | tuple, field_name: str = "avg_gap", tail_fraction: float = 0.1):
    """Least-squares line on ``(log t, log metric)`` over the trailing fraction of records.

    ``record`` may also be an ``(iters, values)`` pair. Returns ``(slope, intercept, r2)``.
    """
    if isinstance(record, TrajectoryRecord):
        t, v = record.iters, record[field_name]
    else:
        t, v = record
    t = np.asarray(t, dtype=float)
    v = np.asarray(v, dtype=float)
    if not 0 < tail_fraction <= 1:
        raise FitError(f"tail_fraction must lie in (0, 1], got {tail_fraction}")
    k = int(math.ceil(len(t) * tail_fraction))
    t, v = t[len(t) - k:], v[len(v) - k:]
    if len(t) < 10:
        raise FitError(f"need at least 10 points in the tail, got {len(t)}")
    if np.any(t <= 0) or np.any(~(v > 0)):
        raise FitError(f"tail of {field_name} contains nonpositive values or iterations")
    return _linfit(np.log(t), np.log(v))


def scaling_fit(points):
    """Fit ``T_hat`` against ``x = sqrt(n) / rho``; ``points`` are ``(x, T_hat[, label])``.

    Returns ``(slope, r2)``. Refuses the fit if any point did not reach a transient.
    """
    if len(points) < 3:
        raise FitError(f"need at least 3 points, got {len(points)}")
    xs, ys = [], []
    for pt in points:
        x, y = pt[0], pt[1]
        label = pt[2] if len(pt) > 2 else f"x={x:g}"
        if y is None:
            raise FitError(f"transient not reached for configuration {label}")
        xs.append(float(x))
        ys.append(float(y))
    slope, _, r2 = _linfit(np.array(xs), np.array(ys))
    return slope, r2


# ---------------------------------------------------------------------------
# recursion checks on seed-averaged records
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RecursionCheck:
    """Outcome of checking a one-step inequality at every consecutive pair of records."""

    name: str
    holds: np.ndarray
    slack: float

    @property
    def fraction(self) -> float:
        return float(self.holds.mean()) if self.holds.size else 1.0

    def passed(self, required: float = 0.99) -> bool:
        return self.fraction >= required

    def as_dict(self) -> dict:
        return {"name": self.name, "fraction": self.fraction, "checked": int(self.holds.size),
                "slack": self.slack}


def _consecutive(record: TrajectoryRecord):
    t = record.iters
    if len(t) < 2 or np.any(np.diff(t) != 1):
        raise ContractError("recursion checks need a record with stride 1")
    return t


def consensus_recursion_check(record: TrajectoryRecord, rho: float, n: int, varsigma: float,
                              sigma_sq: float, schedule, slack: float = 0.1) -> RecursionCheck:
    """``E_{t+1} <= (1 - rho/2) E_t + (1 + slack) 2 n (varsigma^2 + sigma^2) gamma^2 / rho``.

    ``E_t`` is the seed-averaged consensus error; ``gamma`` is the step that produced ``t+1``.
    """
    t = _consecutive(record)
    e = record["consensus_err"]
    gam = np.array([schedule.gamma(int(k) + 1) for k in t[:-1]])
    add = 2.0 * n * (varsigma ** 2 + sigma_sq) / rho * gam ** 2
    holds = e[1:] <= (1.0 - rho / 2.0) * e[:-1] + (1.0 + slack) * add
    return RecursionCheck("consensus_contraction", holds, slack)


def td_descent_check(record: TrajectoryRecord, lambda_min: float, sigma_sq: float, n: int, beta: float,
                     theta_star_norm_sq: float, schedule, slack: float = 0.1,
                     start: int = 1) -> RecursionCheck:
    """``G_{t+1} <= (1 - a lambda_min) G_t + (1 + slack) a^2 (sigma^2/n + 4 beta^2 ||theta*||^2)``.

    ``G_t`` is the seed-averaged averaged-iterate gap, ``a`` the step producing ``t+1``;
    pairs with ``t < start`` are skipped.
    """
    t = _consecutive(record)
    g = record["avg_gap"]
    keep = t[:-1] >= start
    a = np.array([schedule.gamma(int(k) + 1) for k in t[:-1]])
    add = sigma_sq / n + 4.0 * beta ** 2 * theta_star_norm_sq
    holds = g[1:] <= (1.0 - a * lambda_min) * g[:-1] + (1.0 + slack) * a ** 2 * add
    return RecursionCheck("td_one_step", holds[keep], slack)
