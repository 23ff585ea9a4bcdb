import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dsgdlab.algorithms import AlgorithmSpec, NetworkState, StepSchedule, run_many
from dsgdlab.errors import ContractError, DegenerateReferenceError, FitError
from dsgdlab.metrics import (
    TrajectoryRecord, consensus_recursion_check, default_window, estimate_transient, rate_fit, scaling_fit,
    seed_average, td_descent_check, ub_cvx, ub_ncvx,
)
from dsgdlab.problems import make_quadratic
from dsgdlab.topology import build_ring


def record(iters, avg, worst=None, grad=None, cons=None, **meta):
    iters = np.asarray(iters)
    avg = np.asarray(avg, dtype=float)
    z = np.zeros_like(avg)
    cols = {"avg_gap": avg, "worst_gap": avg if worst is None else np.asarray(worst, float),
            "grad_norm_sq": z if grad is None else np.asarray(grad, float),
            "consensus_err": z if cons is None else np.asarray(cons, float)}
    return TrajectoryRecord(iters, cols, meta)


def decay(n=200, scale=1.0):
    t = np.arange(1, n + 1)
    return t, scale / t


# -- records --------------------------------------------------------------------


def test_csv_round_trip_is_exact():
    rng = np.random.default_rng(0)
    r = record(np.arange(0, 50, 5), rng.random(10), rng.random(10) + 1, rng.random(10), rng.random(10) * 1e-30,
               seed=3)
    back = TrajectoryRecord.from_csv(r.to_csv(), r.metadata)
    assert np.array_equal(back.iters, r.iters)
    for c in TrajectoryRecord.COLUMNS:
        assert np.array_equal(back[c], r[c])
    assert back.to_csv() == r.to_csv()


def test_record_contracts():
    with pytest.raises(ContractError):
        TrajectoryRecord(np.arange(3), {"avg_gap": np.zeros(3)})
    with pytest.raises(ContractError):
        record(np.arange(3), np.zeros(4))
    with pytest.raises(ContractError):
        TrajectoryRecord.from_csv("t,a\n1,2\n")


def test_seed_average_rejects_mismatched_grids():
    with pytest.raises(ContractError):
        seed_average([record([0, 1], [1, 1]), record([0, 2], [1, 1])])
    with pytest.raises(ContractError):
        seed_average([])


@settings(max_examples=30, deadline=None)
@given(vals=st.lists(st.lists(st.floats(0, 1e6), min_size=4, max_size=4), min_size=1, max_size=6))
def test_seed_average_is_columnwise_mean(vals):
    recs = [record(np.arange(4), v, np.array(v) * 2, cons=np.array(v) * 3, seed=k) for k, v in enumerate(vals)]
    avg = seed_average(recs)
    for c in ("avg_gap", "worst_gap", "consensus_err"):
        assert np.allclose(avg[c], np.mean([r[c] for r in recs], axis=0), rtol=1e-12, atol=0)
    assert avg.metadata["seeds"] == list(range(len(vals)))


def test_run_records_satisfy_jensen_chain_and_average_linearly():
    p = make_quadratic(4, 6, 20, mix=0.0, seed=2)
    W = build_ring(6, 0.3)
    recs = run_many(AlgorithmSpec("DSGD", 1, StepSchedule.inverse_time(2.0, 20.0)), p, W, 200,
                    np.ones(4), list(range(5)), stride=3)
    for r in recs:
        assert np.all(r["avg_gap"] <= r["worst_gap"] * (1 + 1e-12))
    mean = seed_average(recs)
    assert np.allclose(mean["consensus_err"], sum(r["consensus_err"] for r in recs) / 5, rtol=1e-12)


def test_state_jensen_chain():
    rng = np.random.default_rng(5)
    star = rng.standard_normal(3)
    state = NetworkState(rng.standard_normal((9, 3)))
    per = np.sum((state.Theta - star) ** 2, axis=1)
    assert np.sum((state.average - star) ** 2) <= per.mean() + 1e-12 <= per.max() + 2e-12


# -- bounds ---------------------------------------------------------------------------


def test_ub_cvx_examples():
    s = StepSchedule.constant(0.1)
    assert ub_cvx(5, 1.0, 10, 1.0, s) == pytest.approx(0.01)
    assert ub_cvx(5, 1.0, 20, 1.0, s) == pytest.approx(0.005)
    with pytest.raises(ContractError):
        ub_cvx(5, 1.0, 10, 0.0, s)


def test_ub_ncvx_examples():
    n, T = 4, 200
    D, L, sig = 5.0, 2.0, n * T / 8 / 10.0
    assert ub_ncvx(T, L, D, sig, n) == pytest.approx(1.0)
    assert ub_ncvx(4 * T, L, D, sig, n) == pytest.approx(0.5)
    with pytest.raises(ContractError):
        ub_ncvx(T, L, 0.0, sig, n)


# -- transient estimate --------------------------------------------------------------------


def test_identical_trajectories_reach_at_first_full_window():
    # flat curves: on decaying ones the trailing window compares older, larger gaps
    t = np.arange(1, 201)
    v = np.full(200, 0.3)
    est = estimate_transient(record(t, v), record(t, v), window=20, threshold=1.0)
    assert est.T_hat == t[19] and est.reached
    assert est.as_dict()["window"] == 20


def test_tenfold_decentralized_is_never_reached():
    t, v = decay()
    est = estimate_transient(record(t, 10 * v), record(t, v), window=20, threshold=0.25)
    assert est.T_hat is None and not est.reached


def test_trailing_window_uses_earlier_worst_gaps():
    t = np.arange(1, 11)
    ref = np.ones(10)
    dec = np.r_[np.full(6, 5.0), np.ones(4)]
    est = estimate_transient(record(t, dec), record(t, ref), window=3, threshold=1.0)
    # the last large gap (index 5) must leave the window before the estimate fires
    assert est.T_hat == t[8]


def test_degenerate_reference():
    t = np.arange(1, 11)
    with pytest.raises(DegenerateReferenceError):
        estimate_transient(record(t, np.ones(10)), record(t, np.zeros(10)), window=2, threshold=1.0)


def test_transient_contracts():
    t, v = decay(20)
    with pytest.raises(ContractError):
        estimate_transient(record(t, v), record(t + 1, v))
    with pytest.raises(ContractError):
        estimate_transient(record(t, v), record(t, v), window=21)


def test_default_window():
    assert default_window(10_000) == 1000
    assert default_window(120) == 50
    assert default_window(30) == 30


@settings(max_examples=60, deadline=None)
@given(noise=st.lists(st.floats(0.5, 20.0), min_size=60, max_size=60), th=st.floats(0.5, 10.0),
       factor=st.floats(1.0, 3.0), window=st.integers(1, 20))
def test_transient_is_monotone_in_threshold(noise, th, factor, window):
    t, v = decay(60)
    dec, ref = record(t, v * np.array(noise)), record(t, v)
    lo = estimate_transient(dec, ref, window=window, threshold=th)
    hi = estimate_transient(dec, ref, window=window, threshold=th * factor)
    if lo.reached:
        assert hi.reached and hi.T_hat <= lo.T_hat


# -- fits -------------------------------------------------------------------------------------


def test_rate_fit_on_exact_inverse_time():
    t = np.arange(1, 1001)
    slope, intercept, r2 = rate_fit(record(t, 3.0 / t), tail_fraction=0.5)
    assert abs(slope + 1) <= 1e-9
    assert intercept == pytest.approx(math.log(3.0))
    assert r2 == pytest.approx(1.0, abs=1e-12)


def test_rate_fit_on_inverse_sqrt_and_pairs():
    t = np.arange(1, 1001)
    slope, _, _ = rate_fit((t, 2.0 / np.sqrt(t)), tail_fraction=0.2)
    assert slope == pytest.approx(-0.5, abs=1e-9)


@pytest.mark.parametrize("vals,frac", [(np.r_[np.ones(99), 0.0], 0.5), (np.ones(100), 0.05), (np.ones(100), 0.0)])
def test_rate_fit_errors(vals, frac):
    with pytest.raises(FitError):
        rate_fit((np.arange(1, 101), vals), tail_fraction=frac)


def test_scaling_fit_colinear():
    slope, r2 = scaling_fit([(1.0, 12.0), (2.0, 22.0), (5.0, 52.0)])
    assert slope == pytest.approx(10.0)
    assert r2 == pytest.approx(1.0)


def test_scaling_fit_names_unreached_configuration():
    with pytest.raises(FitError, match="n30_alpha1"):
        scaling_fit([(1.0, 10.0), (2.0, 20.0), (3.0, None, "n30_alpha1")])
    with pytest.raises(FitError):
        scaling_fit([(1.0, 10.0), (2.0, 20.0)])


# -- recursion checks ----------------------------------------------------------------------------------


def test_consensus_check_counts_violations():
    s = StepSchedule.constant(0.1)
    # additive term: 2 * 2 * (1 + 1) / 0.5 * 0.01 = 0.16
    e = np.array([1.0, 0.9, 0.9, 2.0])
    chk = consensus_recursion_check(record(np.arange(4), np.ones(4), cons=e), rho=0.5, n=2, varsigma=1.0,
                                    sigma_sq=1.0, schedule=s, slack=0.0)
    # bounds: 0.75 + 0.16 = 0.91, 0.675 + 0.16 = 0.835, 0.835
    assert chk.holds.tolist() == [True, False, False]
    assert chk.fraction == pytest.approx(1 / 3)
    assert not chk.passed(0.99) and chk.passed(0.3)


def test_td_check_and_start():
    s = StepSchedule.constant(0.1)
    g = np.array([5.0, 1.0, 0.96, 0.96])
    chk = td_descent_check(record(np.arange(4), g), lambda_min=0.5, sigma_sq=2.0, n=2, beta=1.0,
                           theta_star_norm_sq=0.0, schedule=s, slack=0.0, start=1)
    # bound on g[2]: 0.95 * 1.0 + 0.01 * 1.0 = 0.96; on g[3]: 0.912 + 0.01
    assert chk.holds.tolist() == [True, False]


def test_recursion_checks_need_stride_one():
    with pytest.raises(ContractError):
        consensus_recursion_check(record([0, 2, 4], np.ones(3)), 0.5, 2, 1.0, 1.0, StepSchedule.constant(0.1))
