"""Experiment orchestration and artifact output."""

from __future__ import annotations

import hashlib
import json
import math
import os
import shutil
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import __version__
from .. import metrics as mt
from ..algorithms import AlgorithmSpec, StepSchedule, run_many
from ..errors import ConfigError, FitError
from ..problems import StochasticProblem, make_logistic, make_quadratic
from ..tdlearning import build_gridworld, default_td_schedule, run_td, td_fixed_point
from ..topology import MixingMatrix, build_erdos_renyi, build_ring, complete_graph, mh_weights
from .config import ExperimentConfig


# ---------------------------------------------------------------------------
# builders
# ---------------------------------------------------------------------------


def build_problem(cfg: ExperimentConfig, n: int, alpha: float) -> StochasticProblem:
    p = cfg.problem
    if p.family == "quadratic":
        return make_quadratic(p.d, n, p.samples, mix=alpha, seed=p.seed,
                              curvature_shift=p.curvature_shift, offset_scale=p.offset_scale)
    if p.family == "logistic":
        return make_logistic(p.d, n, p.samples, r=p.r, mix=alpha, seed=p.seed, partition=p.partition)
    raise ConfigError(f"problem.family: {p.family!r} is not a stochastic-gradient problem")


def build_topology(cfg: ExperimentConfig, n: int) -> MixingMatrix:
    t = cfg.topology
    if t.kind == "ring":
        return build_ring(n, t.self_weight)
    if t.kind == "erdos_renyi":
        return build_erdos_renyi(n, t.p, t.seed)
    return mh_weights(complete_graph(n))


def point_label(n: int, alpha: float) -> str:
    return f"n{n}_alpha{alpha:g}"


def measured_constants(p: StochasticProblem, W: MixingMatrix) -> dict:
    c = p.estimate_constants().as_dict()
    c["rho"] = W.rho
    c["sigma_sq"] = p.gradient_variance()
    return c


def resolve_schedule(entry, cfg: ExperimentConfig, p: StochasticProblem, consts: dict) -> StepSchedule:
    if entry.schedule.kind != "horizon":
        return entry.schedule.resolve()
    x0 = np.full(p.dim, cfg.problem.init)
    D = p.loss(x0) - p.loss(p.theta_star)
    return entry.schedule.resolve(T=cfg.horizon, D=D, n=p.n, L=consts["L"],
                                  sigma_sq=consts["sigma_sq"] / entry.batch_size)


def describe_derived(cfg: ExperimentConfig) -> list[str]:
    """Human-readable derived quantities, one per line; nothing is run."""
    lines = []
    if cfg.experiment == "td":
        m = build_gridworld(cfg.problem.seed, cfg.problem.n[0], cfg.problem.shared_reward,
                            cfg.problem.discount, cfg.problem.reward_mean, cfg.problem.reward_var)
        W = build_topology(cfg, m.n)
        fp = td_fixed_point(m)
        sched = _td_schedule(cfg, fp)
        lines.append(f"n = {m.n}: rho = {W.rho:.4f}")
        lines.append(f"lambda_min = {fp.lambda_min:.6g}, beta = {fp.beta:.4g}, step bound = {fp.step_bound():.6g}")
        lines.append(f"theta_star = {np.round(fp.theta_star, 4).tolist()}")
        lines.append(f"schedule = {sched.as_dict()}")
        return lines
    seen = set()
    for n, alpha in cfg.grid():
        W = build_topology(cfg, n)
        if n not in seen:
            lines.append(f"n = {n}: rho = {W.rho:.4f}, sqrt(n)/rho = {math.sqrt(n) / W.rho:.1f}")
            seen.add(n)
        p = build_problem(cfg, n, alpha)
        c = measured_constants(p, W)
        body = ", ".join(f"{k} = {c[k]:.4g}" for k in ("L", "mu", "varsigma", "varsigma_H", "L_H", "sigma_sq"))
        lines.append(f"  alpha = {alpha:g}: {body}")
    return lines


def _td_schedule(cfg: ExperimentConfig, fp) -> StepSchedule:
    if cfg.algorithms:
        entry = cfg.algorithms[0]
        if entry.schedule.kind == "td-default":
            return default_td_schedule(fp, entry.schedule.scale)
        return entry.schedule.resolve()
    return default_td_schedule(fp)


# ---------------------------------------------------------------------------
# artifacts
# ---------------------------------------------------------------------------


class ArtifactWriter:
    """Stages files in a hidden sibling directory; :meth:`commit` moves them into place.

    On failure :meth:`abort` deletes the staging directory, so a failed run
    leaves no partial outputs behind.
    """

    def __init__(self, root: Path):
        self.root = Path(root)
        self.stage = self.root.parent / f".{self.root.name}.partial-{os.getpid()}"
        if self.stage.exists():
            shutil.rmtree(self.stage)
        self.stage.mkdir(parents=True)
        self.hashes: dict[str, str] = {}

    def write(self, rel: str, text: str) -> None:
        path = self.stage / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        data = text.encode()
        path.write_bytes(data)
        self.hashes[rel] = hashlib.sha256(data).hexdigest()

    def write_record(self, rel: str, rec: mt.TrajectoryRecord) -> None:
        self.write(rel + ".csv", rec.to_csv())
        self.write(rel + ".json", rec.metadata_json() + "\n")

    def commit(self, manifest: dict) -> Path:
        manifest = dict(manifest, files=dict(sorted(self.hashes.items())))
        (self.stage / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
        if self.root.exists():
            shutil.rmtree(self.root)
        self.stage.rename(self.root)
        return self.root

    def abort(self) -> None:
        shutil.rmtree(self.stage, ignore_errors=True)


@dataclass
class ExperimentResult:
    summary: dict
    records: dict = field(default_factory=dict)
    means: dict = field(default_factory=dict)
    out_dir: Path | None = None


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.floating, float)):
        v = float(x)
        return v if math.isfinite(v) else None
    if isinstance(x, np.integer):
        return int(x)
    return x


# ---------------------------------------------------------------------------
# experiments
# ---------------------------------------------------------------------------


def _rate(rec: mt.TrajectoryRecord, tail: float) -> dict:
    try:
        slope, intercept, r2 = mt.rate_fit(rec, "avg_gap", tail)
    except FitError as exc:
        return {"error": str(exc)}
    return {"slope": slope, "intercept": intercept, "r2": r2, "tail_fraction": tail}


def _bound_ratio(rec: mt.TrajectoryRecord, consts: dict, n: int, schedule: StepSchedule, batch: int) -> dict:
    """Tail ratio of a centralized-style curve to the strongly convex reference curve."""
    k = max(1, len(rec) // 10)
    iters = rec.iters[-k:]
    ub = np.array([mt.ub_cvx(int(t), consts["sigma_sq"] / batch, n, consts["mu"], schedule) for t in iters])
    ratio = rec["avg_gap"][-k:] / ub
    return {"tail_max": float(ratio.max()), "tail_mean": float(ratio.mean())}


def _window(cfg: ExperimentConfig, n_points: int) -> int | None:
    wf = cfg.transient.window_fraction
    return None if wf is None else max(1, int(round(wf * n_points)))


def _run_grid(cfg: ExperimentConfig, writer, result: ExperimentResult) -> dict:
    points = []
    tr = cfg.transient
    for n, alpha in cfg.grid():
        label = point_label(n, alpha)
        p = build_problem(cfg, n, alpha)
        W = build_topology(cfg, n)
        consts = measured_constants(p, W)
        init = np.full(p.dim, cfg.problem.init)
        algs, means = {}, {}
        for entry in cfg.algorithms:
            sched = resolve_schedule(entry, cfg, p, consts)
            spec = AlgorithmSpec(entry.kind, entry.batch_size, sched)
            meta = {"experiment": cfg.name, "point": label, "alpha": alpha}
            recs = run_many(spec, p, W, cfg.horizon, init, cfg.seeds, cfg.stride, cfg.threads, meta)
            mean = mt.seed_average(recs)
            result.records[(label, entry.kind)] = recs
            result.means[(label, entry.kind)] = mean
            means[entry.kind] = mean
            if writer is not None:
                for r in recs:
                    writer.write_record(f"{label}/{entry.kind}/seed_{r.metadata['seed']:04d}", r)
                writer.write_record(f"{label}/{entry.kind}/mean", mean)
            info = {"schedule": sched.as_dict(), "batch_size": entry.batch_size,
                    "final": {c: float(mean[c][-1]) for c in mt.TrajectoryRecord.COLUMNS}}
            if "rate" in cfg.metrics:
                info["rate"] = _rate(mean, tr.rate_tail_fraction)
            if "bound" in cfg.metrics and consts["mu"] > 0 and sched.kind == "inverse-time":
                info["bound_ratio"] = _bound_ratio(mean, consts, n, sched, entry.batch_size)
            algs[entry.kind] = info
        if "transient" in cfg.metrics:
            ref = means[tr.reference]
            for kind, mean in means.items():
                if kind == tr.reference:
                    continue
                est = mt.estimate_transient(mean, ref, _window(cfg, len(ref)), tr.threshold, tr.field)
                algs[kind]["transient"] = dict(est.as_dict(), reference=tr.reference, field=tr.field)
        points.append({"label": label, "n": n, "alpha": alpha, "rho": W.rho,
                       "sqrt_n_over_rho": math.sqrt(n) / W.rho, "constants": consts,
                       "algorithms": algs})
    summary = {"points": points}
    if cfg.experiment == "scaling":
        summary["scaling"] = _scaling(points, tr)
    return summary


def _scaling(points: list, tr) -> dict:
    data = [(pt["sqrt_n_over_rho"], pt["algorithms"][tr.target].get("transient", {}).get("T_hat"),
             pt["label"]) for pt in points]
    out = {"target": tr.target, "x": "sqrt(n)/rho",
           "points": [{"label": lab, "x": x, "T_hat": y} for x, y, lab in data], "min_r2": tr.min_r2}
    try:
        slope, r2 = mt.scaling_fit(data)
    except FitError as exc:
        out.update(error=str(exc), passed=False)
        return out
    out.update(slope=slope, r2=r2, passed=r2 >= tr.min_r2)
    return out


def _run_td(cfg: ExperimentConfig, writer, result: ExperimentResult) -> dict:
    pr = cfg.problem
    m = build_gridworld(pr.seed, pr.n[0], pr.shared_reward, pr.discount, pr.reward_mean, pr.reward_var)
    W = build_topology(cfg, m.n)
    fp = td_fixed_point(m)
    sched = _td_schedule(cfg, fp)
    dec, cen = run_td(W, m, sched, cfg.horizon, cfg.seeds, cfg.stride, cfg.threads,
                      init=np.full(m.d, pr.init))
    md, mc = mt.seed_average(dec), mt.seed_average(cen)
    for name, recs, mean in (("TD0", dec, md), ("TD0-centralized", cen, mc)):
        result.records[("td", name)] = recs
        result.means[("td", name)] = mean
        if writer is not None:
            for r in recs:
                writer.write_record(f"td/{name}/seed_{r.metadata['seed']:04d}", r)
            writer.write_record(f"td/{name}/mean", mean)
    burn = cfg.td.burn_in_fraction * cfg.horizon
    keep = md.iters > burn
    ratio = md["worst_gap"][keep] / mc["avg_gap"][keep]
    rate = _rate(md, cfg.td.rate_tail_fraction)
    lo, hi = cfg.td.rate_range
    td = {"rho": W.rho, "lambda_min": fp.lambda_min, "lambda_max": fp.lambda_max, "beta": fp.beta,
          "sigma_sq": fp.sigma_sq, "theta_star": fp.theta_star, "step_bound": fp.step_bound(),
          "schedule": sched.as_dict(), "burn_in": burn, "ratio_bound": cfg.td.ratio_bound,
          "max_ratio_after_burn_in": float(ratio.max()),
          "zero_transient": bool(ratio.max() <= cfg.td.ratio_bound),
          "rate": rate, "rate_range": [lo, hi],
          "rate_in_range": bool("slope" in rate and lo <= rate["slope"] <= hi)}
    return {"td": td}


def _run_lemmas(cfg: ExperimentConfig, writer, result: ExperimentResult) -> dict:
    lm = cfg.lemmas
    n, alpha = cfg.grid()[0]
    p = build_problem(cfg, n, alpha)
    W = build_topology(cfg, n)
    consts = p.estimate_constants()
    gamma = lm.step_fraction * W.rho / (4.0 * consts.L)
    sched = StepSchedule.constant(gamma)
    # constants at the optimum: lower estimates of the uniform bounds, hence a stricter check
    varsigma = max(float(np.linalg.norm(p.exact_gradient(i, p.theta_star))) for i in range(p.n))
    sigma_sq = p.gradient_variance(reduce="max")
    spec = AlgorithmSpec("DSGD", 1, sched)
    recs = run_many(spec, p, W, lm.consensus_horizon, np.full(p.dim, cfg.problem.init), cfg.seeds,
                    1, cfg.threads, {"experiment": cfg.name, "check": "consensus"})
    mean = mt.seed_average(recs)
    chk = mt.consensus_recursion_check(mean, W.rho, n, varsigma, sigma_sq, sched, lm.slack)
    result.means[("consensus", "DSGD")] = mean

    m = build_gridworld(lm.td_seed, lm.td_agents)
    Wt = build_ring(lm.td_agents, lm.td_self_weight)
    fp = td_fixed_point(m)
    tsched = default_td_schedule(fp, lm.td_schedule_scale)
    seeds = list(range(cfg.seed_base, cfg.seed_base + lm.td_seeds))
    dec, _ = run_td(Wt, m, tsched, lm.td_horizon, seeds, 1, cfg.threads)
    tmean = mt.seed_average(dec)
    tchk = mt.td_descent_check(tmean, fp.lambda_min, fp.sigma_sq, m.n, fp.beta,
                               float(fp.theta_star @ fp.theta_star), tsched, lm.slack)
    result.means[("td_one_step", "TD0")] = tmean
    if writer is not None:
        writer.write_record("consensus/DSGD/mean", mean)
        writer.write_record("td_one_step/TD0/mean", tmean)
    return {"lemmas": {
        "consensus": dict(chk.as_dict(), gamma=gamma, rho=W.rho, L=consts.L, varsigma=varsigma,
                          sigma_sq=sigma_sq, seeds=cfg.seed_count, passed=chk.passed(lm.required_fraction)),
        "td_one_step": dict(tchk.as_dict(), lambda_min=fp.lambda_min, beta=fp.beta, sigma_sq=fp.sigma_sq,
                            schedule=tsched.as_dict(), seeds=lm.td_seeds,
                            passed=tchk.passed(lm.required_fraction)),
        "required_fraction": lm.required_fraction,
    }}


_DRIVERS = {"transient": _run_grid, "scaling": _run_grid, "td": _run_td, "lemmas": _run_lemmas}


def run_experiment(cfg: ExperimentConfig, write: bool = True) -> ExperimentResult:
    """Run ``cfg``; with ``write`` the artifacts go to ``<cfg.output>/<cfg.name>``.

    Any exception discards the staged outputs before propagating.
    """
    started = time.time()
    writer = ArtifactWriter(Path(cfg.output) / cfg.name) if write else None
    result = ExperimentResult(summary={})
    try:
        body = _DRIVERS[cfg.experiment](cfg, writer, result)
        summary = {"schema_version": mt.SCHEMA_VERSION, "name": cfg.name, "experiment": cfg.experiment,
                   "config_hash": cfg.hash(), "horizon": cfg.horizon, "stride": cfg.stride,
                   "seeds": cfg.seeds}
        summary.update(body)
        result.summary = _jsonable(summary)
        if writer is not None:
            writer.write("summary.json", json.dumps(result.summary, indent=2) + "\n")
            writer.write("config.toml", cfg.to_toml())
            elapsed = time.time() - started
            manifest = {"schema_version": mt.SCHEMA_VERSION, "name": cfg.name, "config_hash": cfg.hash(),
                        "code_version": __version__, "started": started,
                        "wall_clock_seconds": elapsed, "threads": cfg.threads}
            result.out_dir = writer.commit(manifest)
    except BaseException:
        if writer is not None:
            writer.abort()
        raise
    return result


def all_checks(summary: dict) -> dict:
    """Named boolean verdicts found in a summary."""
    out = {}
    if "scaling" in summary:
        out["scaling_r2"] = bool(summary["scaling"].get("passed"))
    if "td" in summary:
        out["zero_transient"] = summary["td"]["zero_transient"]
        out["td_rate"] = summary["td"]["rate_in_range"]
    if "lemmas" in summary:
        out["consensus_contraction"] = summary["lemmas"]["consensus"]["passed"]
        out["td_one_step"] = summary["lemmas"]["td_one_step"]["passed"]
    return out


__all__ = ["ArtifactWriter", "ExperimentResult", "run_experiment", "build_problem", "build_topology",
           "describe_derived", "all_checks"]
