"""End-to-end acceptance criteria, one test per criterion.

Each test records a pass/fail line through ``acceptance_log``; the lines are
printed in the terminal summary.  Criteria 8-11 share the runs produced by a
module-scoped fixture.
"""

import math
import time

import numpy as np
import pytest

from dpspider.calibrate import alpha_bound, calibration_for
from dpspider.harness import achieved_grad_norm, report, run_experiment, sweep, write_csv
from dpspider.objective import Dataset, generate_dataset, make_problem, population_gradient
from dpspider.oracles import (
    OraclePool,
    adaptive_batch_size,
    oracle1,
    oracle1_tail_scale,
    oracle2,
    oracle2_tail_scale,
)
from dpspider.spider import run_spider
from dpspider.tree_mech import calibrate_sigma, init_tree, node_intervals, tree_noise
from dpspider.verify import descent_audit, escape_rate, generalization_gap, subgaussian_tail_check

from plain_spiderboost import plain_spiderboost

pytestmark = pytest.mark.slow


def all_minimal_covers(capacity):
    """Fewest aligned dyadic blocks tiling [1, t] for every t <= capacity,
    by dynamic programming over right endpoints."""
    best = {0: []}
    for v in range(1, capacity + 1):
        options = []
        size = 1
        while size <= capacity and v % size == 0:
            options.append(best[v - size] + [(v - size + 1, v)])
            size *= 2
        best[v] = min(options, key=len)
    return best


def test_criterion_01_node_intervals(acceptance_log):
    start = time.perf_counter()
    mismatches = 0
    checked = 0
    cap = 2
    while cap <= 1024:
        covers = all_minimal_covers(cap)
        for t in range(1, cap + 1):
            checked += 1
            mismatches += node_intervals(t, cap) != covers[t]
        cap *= 2
    elapsed = time.perf_counter() - start
    ok = mismatches == 0 and elapsed < 10
    acceptance_log(1, ok, f"{checked} (capacity, t) pairs, {mismatches} mismatches, {elapsed:.1f}s (< 10s)")
    assert ok


def test_criterion_02_tree_noise_magnitude(acceptance_log):
    start = time.perf_counter()
    cap, d, sigma, trees = 64, 16, 1.0, 1000
    maxima = np.empty(trees)
    for k in range(trees):
        tree = init_tree(cap, d, sigma, seed=k)
        maxima[k] = max(np.linalg.norm(tree_noise(tree, t)) for t in range(1, cap + 1))
    p99 = float(np.quantile(maxima, 0.99))
    bound = 8 * sigma * math.sqrt(d * math.log(cap))
    elapsed = time.perf_counter() - start
    ok = p99 <= bound and elapsed < 30
    acceptance_log(2, ok, f"p99 max_t ||TREE(t)|| = {p99:.2f} sigma <= {bound:.2f} sigma, {elapsed:.1f}s (< 30s)")
    assert ok


def _neighbour(ds, j, rng, p, adversarial):
    shift = ds.shift.copy()
    curv = None if ds.curvature is None else ds.curvature.copy()
    if adversarial:
        shift[j] = -p.noise_scale * shift[j] / max(np.linalg.norm(shift[j]), 1e-300)
        if curv is not None:
            curv[j] = -p.noise_scale * np.sign(curv[j])
    else:
        other = generate_dataset(p, 1, seed=int(rng.integers(2**31)))
        shift[j] = other.shift[0]
        if curv is not None:
            curv[j] = other.curvature[0]
    return Dataset(shift, curv, seed=-1)


def test_criterion_03_sensitivity(acceptance_log):
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst1 = worst2 = 0.0
    violations = 0
    trials = 1000
    for k in range(trials):
        d = int(rng.integers(1, 8))
        noise = ("linear", "linear_plus_curvature")[k % 2]
        p = make_problem(("quartic_saddle", "quadratic_bowl")[(k // 2) % 2], d, noise, float(rng.uniform(0.05, 1.0)))
        x = rng.uniform(-2, 2, d)
        y = np.clip(x + rng.normal(0, 0.5, d), -2, 2)
        b = int(rng.integers(1, 40))
        b_t = adaptive_batch_size(float(np.linalg.norm(population_gradient(p, y))), 0.3, 2.0, d, 1.0)
        ds = generate_dataset(p, max(b, b_t), seed=int(rng.integers(2**31)))
        nb = _neighbour(ds, int(rng.integers(b)), rng, p, adversarial=k % 3 == 0)
        g, r1 = oracle1(OraclePool(ds), p, x, b)
        g2, _ = oracle1(OraclePool(nb), p, x, b)
        dev1 = float(np.linalg.norm(g - g2))
        bound1 = 2 * p.G / b
        j = int(rng.integers(b_t))
        nb2 = _neighbour(ds, j, rng, p, adversarial=k % 3 == 1)
        h, r2 = oracle2(OraclePool(ds), p, x, y, b_t)
        h2, _ = oracle2(OraclePool(nb2), p, x, y, b_t)
        dev2 = float(np.linalg.norm(h - h2))
        bound2 = 2 * p.M * float(np.linalg.norm(x - y)) / b_t
        assert r1.sensitivity_bound == pytest.approx(bound1) and r2.sensitivity_bound == pytest.approx(bound2)
        violations += (dev1 > bound1) + (dev2 > bound2)
        worst1 = max(worst1, dev1 / bound1)
        if bound2 > 0:
            worst2 = max(worst2, dev2 / bound2)
    elapsed = time.perf_counter() - start
    ok = violations == 0 and elapsed < 30
    acceptance_log(
        3, ok,
        f"{trials} swaps, {violations} violations; worst ratio oracle1 {worst1:.3f}, oracle2 {worst2:.3f}; "
        f"{elapsed:.1f}s (< 30s)",
    )
    assert ok


def test_criterion_04_oracle_tails(acceptance_log):
    start = time.perf_counter()
    results = []
    samples = 2000
    for noise, d, b, s_z in [("linear", 3, 5, 0.5), ("linear_plus_curvature", 5, 4, 1.0), ("linear_plus_curvature", 10, 20, 0.3)]:
        p = make_problem("quartic_saddle", d, noise, s_z)
        pool = OraclePool(generate_dataset(p, 2 * b * samples, seed=d))
        x = np.full(d, 1.9)
        y = x - 0.25
        e1 = np.array([oracle1(pool, p, x, b)[0] - population_gradient(p, x) for _ in range(samples)])
        target = population_gradient(p, x) - population_gradient(p, y)
        e2 = np.array([oracle2(pool, p, x, y, b)[0] - target for _ in range(samples)])
        bias1 = float(np.linalg.norm(e1.mean(axis=0)))
        bias2 = float(np.linalg.norm(e2.mean(axis=0)))
        unbiased = bias1 <= 5 * 2 * p.G * math.sqrt(d / (samples * b)) and bias2 <= 5 * 2 * p.M * 0.25 * math.sqrt(
            d * d / (samples * b)
        )
        t1 = subgaussian_tail_check(e1, oracle1_tail_scale(p.G, b, d), 0.99).passed
        t2 = subgaussian_tail_check(e2, oracle2_tail_scale(p.M, float(np.linalg.norm(x - y)), b, d), 0.99).passed
        results.append(unbiased and t1 and t2)
    elapsed = time.perf_counter() - start
    ok = all(results) and elapsed < 60
    acceptance_log(4, ok, f"{sum(results)}/{len(results)} settings unbiased with subGaussian tails, {elapsed:.1f}s (< 60s)")
    assert ok


def test_criterion_05_noise_off_equivalence(acceptance_log):
    start = time.perf_counter()
    problems = [
        ("quadratic_bowl", [1.0, -0.5, 0.25, 1.5]),
        ("quartic_saddle", [0.0, 0.0, 0.0, 0.0]),
        ("quartic_saddle", [0.3, -0.2, 1.5, -1.1]),
    ]
    identical = 0
    total = 0
    for family, x0 in problems:
        spec = make_problem(family, 4, "linear", 0.0, x0=x0)
        n = 100_000
        calib = calibration_for(spec, n, math.inf, 1e-6, 0.01, overrides={"zeta": 0.0})
        assert calib.sigma == 0.0
        for seed in range(5):
            total += 1
            trace = run_spider(spec, generate_dataset(spec, n, seed=seed), calib, seed=seed)
            xs, branches, noisy, used = plain_spiderboost(
                family, x0, n, calib.T, calib.b, calib.kappa, calib.alpha, calib.eta, calib.Gamma,
                calib.escape_threshold, 4,
            )
            same = (
                len(trace) == len(xs)
                and [s.branch for s in trace.steps] == branches
                and all(s.x_next.tobytes() == x.tobytes() for s, x in zip(trace.steps, xs))
                and all(s.noisy_grad.tobytes() == g.tobytes() for s, g in zip(trace.steps, noisy))
                and trace.data_used == used
            )
            identical += same
    elapsed = time.perf_counter() - start
    ok = identical == total and elapsed < 30
    acceptance_log(5, ok, f"{identical}/{total} traces bit-identical to the plain reference, {elapsed:.1f}s (< 30s)")
    assert ok


def test_criterion_06_descent_audit(acceptance_log):
    start = time.perf_counter()
    violations = 0
    audited = 0
    for k in range(50):
        family = ("quadratic_bowl", "quartic_saddle")[k % 2]
        d = 2 + k % 5
        rng = np.random.default_rng(k)
        x0 = rng.uniform(-1.5, 1.5, d)
        spec = make_problem(family, d, ("linear", "linear_plus_curvature")[(k // 2) % 2], 0.1, x0=x0)
        n = 50_000
        calib = calibration_for(spec, n, math.inf, 1e-6, 0.01)
        trace = run_spider(spec, generate_dataset(spec, n, seed=k), calib, seed=k)
        audited += len(trace)
        violations += len(descent_audit(trace, spec, calib))
    elapsed = time.perf_counter() - start
    ok = violations == 0 and audited > 0 and elapsed < 120
    acceptance_log(6, ok, f"50 runs, {audited} steps audited, {violations} violations, {elapsed:.1f}s (< 120s)")
    assert ok


def test_criterion_07_saddle_escape(acceptance_log):
    start = time.perf_counter()
    spec = make_problem("quartic_saddle", 2)
    calib = calibration_for(spec, 100_000, math.inf, 1e-6, 0.01, overrides={"gamma": 0.05})
    res = escape_rate(spec, calib, 100, seed=7)
    elapsed = time.perf_counter() - start
    ok = res.fraction >= 0.9 and elapsed < 120
    acceptance_log(
        7, ok,
        f"escape fraction {res.fraction:.2f} >= 0.9 over 100 trials (Gamma={calib.Gamma}, "
        f"zeta={calib.zeta:.4f}), {elapsed:.1f}s (< 120s)",
    )
    assert ok


# criteria 8-11 -----------------------------------------------------------

D = 5
BASE = {
    "problem": {"family": "quartic_saddle", "d": D, "noise_model": "none", "s_z": 0.0, "x0": [0.0] * D},
    "iota": 0.01,
    "seeds": {"master_seed": 0, "num_runs": 10},
    "workers": 4,
}
SWEEP_NS = (1000, 10_000, 100_000)


@pytest.fixture(scope="module")
def end_to_end():
    out = {}
    start = time.perf_counter()
    out["c8"] = run_experiment({
        **BASE, "privacy": {"epsilon": "inf", "delta": 1e-6}, "data": {"n": 100_000}, "check": {"alpha": 0.1},
    })
    out["t8"] = time.perf_counter() - start
    start = time.perf_counter()
    out["c9"] = run_experiment({
        **BASE, "privacy": {"epsilon": 2.0, "delta": 1e-6}, "data": {"n": 200_000}, "check": {"alpha_factor": 5.0},
    })
    out["t9"] = time.perf_counter() - start
    start = time.perf_counter()
    cfg = {**BASE, "privacy": {"epsilon": 2.0, "delta": 1e-6}, "data": {"n": SWEEP_NS[0]}}
    out["c10_rows"] = sweep(cfg, {"n": list(SWEEP_NS)})
    out["c10_runs"] = [run_experiment({**cfg, "data": {"n": n}}) for n in SWEEP_NS]
    out["t10"] = time.perf_counter() - start
    return out


def _valid_sosp(records):
    return sum(bool(r["valid"] and r["any_sosp"]) for r in records)


def _halts(records):
    reasons = {}
    for r in records:
        reasons[r.get("halt_reason")] = reasons.get(r.get("halt_reason"), 0) + 1
    return reasons


def test_criterion_08_sosp_nonprivate(acceptance_log, end_to_end):
    recs = end_to_end["c8"]
    hits = _valid_sosp(recs)
    ok = hits >= 9 and end_to_end["t8"] < 300
    acceptance_log(8, ok, f"{hits}/10 seeds return an 0.1-SOSP candidate (need 9), {end_to_end['t8']:.1f}s (< 300s)")
    assert ok


def test_criterion_09_sosp_private(acceptance_log, end_to_end):
    recs = end_to_end["c9"]
    spec = make_problem("quartic_saddle", D)
    alpha = 5 * alpha_bound(200_000, D, 2.0, spec.G, spec.M, spec.B)
    assert recs[0]["alpha_check"] == pytest.approx(alpha)
    hits = _valid_sosp(recs)
    ok = hits >= 8 and end_to_end["t9"] < 900
    acceptance_log(
        9, ok,
        f"{hits}/10 valid seeds return a {alpha:.3f}-SOSP candidate (need 8); halts {_halts(recs)}; "
        f"sigma={recs[0]['calibration']['sigma']:.2f}, {end_to_end['t9']:.1f}s (< 900s)",
    )
    assert ok


def test_criterion_10_scaling_direction(acceptance_log, end_to_end, tmp_path):
    rows = end_to_end["c10_rows"]
    # runs that leave the box have no certified candidate; they count as inf
    medians = []
    for runs in end_to_end["c10_runs"]:
        medians.append(float(np.median([achieved_grad_norm(r) if r["valid"] else math.inf for r in runs])))
    assert all(not r["error"] for r in rows)
    monotone = all(b <= a for a, b in zip(medians, medians[1:])) and all(math.isfinite(m) for m in medians)
    slope = math.nan
    if all(math.isfinite(m) and m > 0 for m in medians):
        path = tmp_path / "sweep.csv"
        write_csv([{**row, "grad_norm_median": m} for row, m in zip(rows, medians)], path)
        slope = report(path)["n"].slope
    ok = monotone and slope <= -0.15 and end_to_end["t10"] < 1800
    acceptance_log(
        10, ok,
        f"median grad_norm over n={list(SWEEP_NS)}: {[round(m, 4) for m in medians]}, slope {slope:.3f} "
        f"(need non-increasing and <= -0.15), {end_to_end['t10']:.1f}s (< 1800s)",
    )
    assert ok


def test_criterion_11_budget_accounting(acceptance_log, end_to_end):
    records = end_to_end["c8"] + end_to_end["c9"] + [r for runs in end_to_end["c10_runs"] for r in runs]
    over_budget = [r["run_index"] for r in records if r["data_used"] > r["n"]]
    bad_halts = [r for r in records if r.get("halt_reason") not in ("step_budget", "data_exhausted")]
    ok = not over_budget and not bad_halts
    acceptance_log(
        11, ok,
        f"{len(records)} runs: {len(over_budget)} over budget, {len(bad_halts)} halted outside "
        f"step_budget/data_exhausted ({_halts(records)})",
    )
    assert ok


def test_criterion_12_generalization_gap(acceptance_log):
    start = time.perf_counter()
    s_z, d, n = 0.5, 10, 10_000
    spec = make_problem("quartic_saddle", d, "linear", s_z)
    ds = generate_dataset(spec, n, seed=12)
    pts = np.random.default_rng(12).uniform(-2, 2, (20, d))
    med = float(np.median([r.gradient_gap for r in generalization_gap(spec, ds, pts)]))
    bound = 5 * s_z * math.sqrt(d / n)
    elapsed = time.perf_counter() - start
    ok = med <= bound and elapsed < 60
    acceptance_log(12, ok, f"median gradient gap {med:.5f} <= {bound:.5f}, {elapsed:.1f}s (< 60s)")
    assert ok
