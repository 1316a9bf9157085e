"""Acceptance criteria P1-P11.

Each test records one pass/fail line in ``RESULTS``; ``conftest.py`` prints
the collected lines at the end of the session.  Run this file directly for
just the acceptance suite:

    python tests/test_acceptance.py
"""

import itertools
import math
import sys
import time

import numpy as np
import pytest

from homodyne_qed.conditional import (
    block_trace_ratio, conditional_state, eigenvalue_ratio, eigenvalue_weights,
    real_beta_invariance, smooth_on_steady, total_weight)
from homodyne_qed.diffusive import SMEConfig, sme_ensemble
from homodyne_qed.disentangle import ORACLE, check_corollary, check_theorem1, check_theorem2
from homodyne_qed.dynamics import LindbladGenerator, build_rho_ss, check_step, evolve_unconditional
from homodyne_qed.errors import CostError, OracleBudgetError, TruncationError
from homodyne_qed.extended import steady_low_rank
from homodyne_qed.hilbert import SystemParams, trace_distance
from homodyne_qed.jumps import dyson_oracle, lemma1_residual, mean_of_factors, sample_ensemble

from conftest import random_density

RESULTS: dict[str, str] = {}

GRID_G = (1.0, 10.0, 100.0)
GRID_E = (0.0, 1.0, 10.0)
GRID_T = (0.1, 0.5, 1.0, 3.0)
GRID_BETA = (0.0, 0.7, 0.5j, 0.3 + 0.4j)

# n_fock for the extended-precision steady-state checks at g=10, E=3; the
# margin rule alone (216) leaves coherent tails of order 1e-5 at the top.
STEADY_LEVELS = 300
LEMMA2_LEVELS = 400


def report(cid: str, ok: bool, detail: str) -> None:
    line = f"{cid:4s} {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS[cid] = line
    print(line)


def _grid_run(residual_of, budget: float):
    """Worst residual over the grid; budget-exceeded cases count as failures."""
    worst, failures, blocked = 0.0, [], 0
    t0 = time.perf_counter()
    for g, E, t in itertools.product(GRID_G, GRID_E, GRID_T):
        p = SystemParams(g=g, E=E)
        try:
            r = residual_of(t, p)
        except (OracleBudgetError, TruncationError):
            blocked += 1
            failures.append((g, E, t, math.inf))
            continue
        worst = max(worst, r)
        if not r < 1e-8:
            failures.append((g, E, t, r))
    elapsed = time.perf_counter() - t0
    return worst, failures, blocked, elapsed


def _grid_detail(worst, failures, blocked, elapsed, budget):
    cases = len(GRID_G) * len(GRID_E) * len(GRID_T)
    bad = ", ".join(f"(g={g:g},E={E:g},t={t:g}):{r:.1e}" for g, E, t, r in failures[:6])
    more = f" +{len(failures) - 6} more" if len(failures) > 6 else ""
    return (f"{cases - len(failures)}/{cases} cases < 1e-8, worst finite {worst:.2e}, "
            f"{blocked} without oracle, {elapsed:.0f}s (limit {budget:g}s)"
            + (f"; failing {bad}{more}" if failures else ""))


def test_p1_theorem1():
    ORACLE.clear()
    out = _grid_run(lambda t, p: check_theorem1(t, p).residual, 60)
    ok = not out[1] and out[3] < 60
    report("P1", ok, _grid_detail(*out, 60))
    assert ok


def test_p2_theorem2():
    def worst(t, p):
        return max(check_theorem2(k, t, p.replace(beta=b)).residual
                   for k in (1, 2) for b in GRID_BETA)
    out = _grid_run(worst, 60)
    ok = not out[1] and out[3] < 60
    report("P2", ok, _grid_detail(*out, 60))
    assert ok


def test_p3_corollary():
    out = _grid_run(lambda t, p: check_corollary(t, p).residual, 30)
    ORACLE.clear()
    ok = not out[1] and out[3] < 30
    report("P3", ok, _grid_detail(*out, 30))
    assert ok


def test_p4_lemma1_slope():
    t0 = time.perf_counter()
    p = SystemParams(g=10.0, E=3.0, beta=0.5)
    rho = build_rho_ss(p)
    taus = np.logspace(-4, -2, 7)
    res = [lemma1_residual(t, rho, p) for t in taus]
    slope = float(np.polyfit(np.log(taus), np.log(res), 1)[0])
    elapsed = time.perf_counter() - t0
    ok = abs(slope - 2.0) <= 0.1 and elapsed < 10
    report("P4", ok, f"slope {slope:.4f} (2.0 +- 0.1), {elapsed:.1f}s (limit 10s)")
    assert ok


def test_p5_lemma2():
    t0 = time.perf_counter()
    p = SystemParams(g=10.0, E=3.0, n_fock=LEMMA2_LEVELS)
    checks = {dt: smooth_on_steady(dt, p) for dt in (0.1, 1.0, 3.0)}
    elapsed = time.perf_counter() - t0
    worst = max(c.residual for c in checks.values())
    scalar = max(c.scalar_residual for c in checks.values())
    ok = worst < 1e-6 and scalar <= 1e-14 and elapsed < 10
    report("P5", ok, f"residual {worst:.2e} (< 1e-6), scalar {scalar:.1e} (<= 1e-14), "
                     f"n_fock={p.n_fock}, {elapsed:.1f}s (limit 10s)")
    assert ok


def test_p6a_engine_consistency():
    t0 = time.perf_counter()
    p = SystemParams(g=2.0, E=1.0, beta=0.3 + 0.4j, n_fock=45)
    rng = np.random.default_rng(606)
    rho0 = random_density(p.dim, 3, rng, levels=6, n_fock=p.n_fock)
    worst, worst_ordered, bad = 0.0, 0.0, []
    for m in range(3):
        for labels in itertools.product((1, 2), repeat=m):
            ref = dyson_oracle(rho0, labels, 0.5, 16, p, use_exact=False)
            res = conditional_state(rho0, labels, 0.5, p)
            err = max(trace_distance(res.rho_c, ref.rho_c), abs(res.weight / ref.weight - 1))
            alt = conditional_state(rho0, labels, 0.5, p, ordering="ordered")
            worst_ordered = max(worst_ordered, trace_distance(alt.rho_c, ref.rho_c),
                                abs(alt.weight / ref.weight - 1))
            worst = max(worst, err)
            if not err < 1e-8:
                bad.append(f"{labels}:{err:.1e}")
    elapsed = time.perf_counter() - t0
    ok = not bad and elapsed < 120
    report("P6a", ok, f"default engine worst {worst:.2e} (< 1e-8)"
                      + (f", failing {' '.join(bad)}" if bad else "")
                      + f"; ordered engine worst {worst_ordered:.1e}; {elapsed:.0f}s (limit 120s)")
    assert ok


def test_p6b_real_beta_invariance():
    t0 = time.perf_counter()
    p = SystemParams(g=10.0, E=3.0, beta=0.7, n_fock=STEADY_LEVELS)
    rng = np.random.default_rng(66)
    worst_d, worst_s = 0.0, 0.0
    for _ in range(10):
        m = int(rng.integers(0, 4))
        labels = tuple(int(k) for k in rng.integers(1, 3, size=m))
        dt = float(rng.uniform(0.1, 1.0))
        chk = real_beta_invariance(labels, dt, p)
        worst_d = max(worst_d, chk.distance)
        worst_s = max(worst_s, chk.scalar_error)
    formula_ok = worst_d < 1e-9 and worst_s < 1e-9
    # exact-dynamics comparison at g = 50
    q = SystemParams(g=50.0, E=3.0, beta=0.7)
    try:
        ss = build_rho_ss(q)
        exact = max(trace_distance(dyson_oracle(ss, labels, 0.5, 8, q, use_exact=True).rho_c, ss)
                    for labels in [(), (1,), (2, 1)])
        exact_msg = f"exact oracle worst {exact:.3f} (< 0.1)"
    except CostError as exc:
        exact = math.inf
        exact_msg = f"exact oracle unavailable: {exc}"
    elapsed = time.perf_counter() - t0
    ok = formula_ok and exact < 0.1 and elapsed < 600
    report("P6b", ok, f"formula distance {worst_d:.1e}, scalar {worst_s:.1e} (< 1e-9); "
                      f"{exact_msg}; {elapsed:.0f}s")
    assert ok


def test_p7_eigenvalue_ratio():
    t0 = time.perf_counter()
    rng = np.random.default_rng(77)
    worst, worst_corr = 0.0, 0.0
    for _ in range(20):
        beta0 = float(rng.uniform(0.2, 2.0))
        p = SystemParams(g=10.0, E=3.0, beta=1j * beta0, n_fock=STEADY_LEVELS)
        m = int(rng.integers(1, 4))
        labels = tuple(int(k) for k in rng.integers(1, 3, size=m))
        dt = float(rng.uniform(0.05, 1.0))
        res = conditional_state(steady_low_rank(p), labels, dt, p, precision="extended")
        block = block_trace_ratio(res.rho_c, p.n_fock)
        worst = max(worst, abs(eigenvalue_ratio(labels, dt, p) / block - 1))
        worst_corr = max(worst_corr, abs(eigenvalue_ratio(labels, dt, p, "corrected") / block - 1))
    p = SystemParams(g=10.0, E=3.0, beta=0.5j, n_fock=STEADY_LEVELS)
    empty = eigenvalue_weights((), 0.4, p) == (0.5, 0.5)
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-10 and empty and elapsed < 30
    report("P7", ok, f"formula vs block-trace ratio worst rel {worst:.2e} (< 1e-10); "
                     f"m=0 halves exact: {empty}; sigma_y-corrected product worst {worst_corr:.1e}; "
                     f"{elapsed:.0f}s (limit 30s)")
    assert ok


def bootstrap_band(mean, resample, n: int, rng, reps: int = 200) -> float:
    """Mean plus three standard deviations of the bootstrap trace distance to ``mean``."""
    d = []
    for _ in range(reps):
        w = np.bincount(rng.integers(0, n, n), minlength=n) / n
        d.append(trace_distance(resample(w), mean))
    return float(np.mean(d) + 3 * np.std(d))


@pytest.mark.slow
def test_p8_unraveling():
    t0 = time.perf_counter()
    p = SystemParams(g=10.0, E=3.0, beta=0.5j)
    ss = build_rho_ss(p)
    n = 2000
    factors = []
    for lo in range(0, n, 250):
        ens = sample_ensemble(ss, 1.0, 0.002, 250, 8, p, first_index=lo)
        factors.append(ens.factors)
    factors = np.concatenate(factors)
    mean = mean_of_factors(factors)
    ref = evolve_unconditional(ss, 1.0, 0.002, LindbladGenerator(p)).rho
    dist = trace_distance(mean, ref)
    band = bootstrap_band(mean, lambda w: mean_of_factors(factors, w), n,
                          np.random.default_rng(88))
    elapsed = time.perf_counter() - t0
    ok = dist <= band and elapsed < 600
    report("P8", ok, f"distance {dist:.4f} vs 3-sigma band {band:.4f}, {n} records, "
                     f"{elapsed:.0f}s (limit 600s)")
    assert ok


@pytest.mark.slow
def test_p9_sme_martingale():
    t0 = time.perf_counter()
    p = SystemParams(g=0.5, E=0.25)
    gen = LindbladGenerator(p)
    rho0 = np.zeros((p.dim, p.dim), dtype=complex)
    rho0[0, 0] = 1.0
    marks = (0.5, 1.0, 2.0)
    cfg = SMEConfig(dt=0.005, n_traj=2000, seed=9, drift="rk4")
    res = sme_ensemble(rho0, 2.0, cfg, gen, checkpoints=marks)
    ref = evolve_unconditional(rho0, 2.0, 0.005, gen, checkpoints=marks).checkpoints
    rng = np.random.default_rng(99)
    parts, ok = [], True
    for t in marks:
        j = int(np.argmin(np.abs(res.times - t)))
        states = res.states[j]
        mean = states.mean(axis=0)
        dist = trace_distance(mean, ref[t])
        band = bootstrap_band(mean, lambda w: np.einsum("b,bij->ij", w, states), len(states), rng)
        ok &= dist <= band
        parts.append(f"t={t:g}: {dist:.2e} <= {band:.2e}")
    elapsed = time.perf_counter() - t0
    ok = ok and elapsed < 600
    report("P9", ok, "; ".join(parts) + f"; {elapsed:.0f}s (limit 600s)")
    assert ok


def _max_drift(g: float, t_total: float, budget: float):
    p = SystemParams(g=g, E=3.0)
    gen = LindbladGenerator(p)
    ss = build_rho_ss(p)
    dt = min(0.02 / g, 2.5 / gen.spectral_bound()) * 0.999
    check_step(dt, gen)
    every = max(1, int(round(0.5 / dt)))
    worst = [0.0]
    count = [0]

    def watch(t, rho):
        count[0] += 1
        if count[0] % every == 0:
            worst[0] = max(worst[0], trace_distance(rho, ss))

    res = evolve_unconditional(ss, t_total, dt, gen, callback=watch, time_budget=budget)
    return max(worst[0], trace_distance(res.rho, ss))


@pytest.mark.slow
def test_p10_steady_state_claim():
    t0 = time.perf_counter()
    try:
        d50 = _max_drift(50.0, 20.0, 300.0)
        msg50 = f"g=50 max distance {d50:.3f} (< 0.1)"
    except CostError as exc:
        d50 = math.inf
        msg50 = f"g=50 run not possible: {exc}"
    remaining = 300.0 - (time.perf_counter() - t0)
    try:
        d10 = _max_drift(10.0, 20.0, remaining)
        msg10 = f"g=10 max distance {d10:.3f}"
    except CostError as exc:
        d10 = math.nan
        msg10 = f"g=10 run not possible: {exc}"
    elapsed = time.perf_counter() - t0
    ok = d50 < 0.1 and d50 < d10 and elapsed < 300
    report("P10", ok, f"{msg50}; {msg10}; {elapsed:.0f}s (limit 300s)")
    assert ok


def test_p11_completeness():
    t0 = time.perf_counter()
    p = SystemParams(g=1.0, E=0.5, beta=0.5, n_fock=40)
    w_ss = total_weight(build_rho_ss(p), 0.1, p, 3)
    q = p.replace(beta=0.3 + 0.4j)
    rho0 = random_density(q.dim, 3, np.random.default_rng(11), levels=6, n_fock=q.n_fock)
    w_rand = total_weight(rho0, 0.1, q, 3)
    elapsed = time.perf_counter() - t0
    ok = abs(w_ss - 1) < 1e-3 and abs(w_rand - 1) < 1e-3 and elapsed < 60
    report("P11", ok, f"steady state {w_ss:.6f}, random state {w_rand:.6f} (|w - 1| < 1e-3), "
                      f"{elapsed:.1f}s (limit 60s)")
    assert ok


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
