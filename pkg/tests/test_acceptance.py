"""Acceptance checks, one test per criterion, each printing a single PASS/FAIL line.

These are the slow end-to-end runs (about 5 minutes on one core). Deselect
them with ``pytest -m "not slow"``.
"""

import math
import time

import numpy as np
import pytest

from obclip import bench, presets
from obclip.encoder import TwoTower
from obclip.props import distance_suite, geometry_suite, gradcheck_suite, loss_suite
from obclip.rng import named_rng
from obclip.synthdata import token_subset_eval
from obclip.trainer import convergence_step, embed_batch, eval_set, train

pytestmark = pytest.mark.slow

CHANCE = 1 / 64
ELAPSED: dict[int, float] = {}


@pytest.fixture
def report(capsys):
    def emit(criterion: int, passed: bool, seconds: float, detail: str) -> None:
        ELAPSED[criterion] = seconds
        with capsys.disabled():
            print(f"\ncriterion {criterion:>2}: {'PASS' if passed else 'FAIL'} ({seconds:6.1f}s) {detail}")
    return emit


def timed(fn, *args, **kwargs):
    t0 = time.perf_counter()
    out = fn(*args, **kwargs)
    return out, time.perf_counter() - t0


@pytest.fixture(scope="module")
def distance_run():
    return timed(distance_suite, 0)


def test_criterion_01_gradients(report):
    suite, secs = timed(gradcheck_suite, 0, trials=100, tol=1e-5)
    worst = max(c.value for c in suite.checks)
    ok = suite.passed and secs < 60 and len(suite.checks) == 8
    report(1, ok, secs, f"{len(suite.checks)} checks x 100 instances, max rel err {worst:.2e}")
    assert suite.passed, suite.summary()
    assert secs < 60


def test_criterion_02_manifold(report):
    suite, secs = timed(geometry_suite, 0, samples=100_000)
    wanted = {"oblique_column_norm", "oblique_idempotent_bitwise", "sphere_norm", "sphere_idempotent_bitwise"}
    present = {c.name for c in suite.checks} >= wanted
    ok = present and suite.passed and secs < 30
    report(2, ok, secs, "; ".join(f"{c.name} {c.detail}" for c in suite.checks if c.name in wanted))
    assert present and suite.passed, suite.summary()
    assert secs < 30


def test_criterion_03_ranges(report, distance_run):
    suite, secs = distance_run
    picked = [c for c in suite.checks if c.name.endswith(".range") or c.name.startswith("geodesic_antipodal")]
    bad = [c for c in picked if not c.passed]
    report(3, not bad and len(picked) == 7, secs,
           "; ".join(f"{c.name} {c.detail}" for c in picked if c.name.startswith("geodesic")))
    assert len(picked) == 7 and not bad, suite.summary()


def test_criterion_04_triangle(report, distance_run):
    suite, secs = distance_run
    wanted = {"euclidean_l2.triangle", "oblique_geodesic.triangle", "neg_trace_shifted_counterexample",
              "geodesic_relaxed_triangle"}
    picked = [c for c in suite.checks if c.name in wanted]
    bad = [c for c in picked if not c.passed]
    report(4, not bad and len(picked) == 4, secs, "; ".join(f"{c.name} n={c.count}" for c in picked))
    assert len(picked) == 4 and not bad, suite.summary()


def test_criterion_05_loss_oracle(report):
    suite, secs = timed(loss_suite, 0, instances=100)
    wanted = {"matches_loop_oracle", "uniform_is_log_b", "clamp_blocks_t_gradient"}
    picked = [c for c in suite.checks if c.name in wanted]
    ok = len(picked) == 3 and all(c.passed for c in picked)
    report(5, ok, secs, "; ".join(f"{c.name} {c.detail}".strip() for c in picked))
    assert ok, suite.summary()


def test_criterion_06_fixed_temperature_ordering(report):
    t0 = time.perf_counter()
    runs = {c.model.kind: train(c) for c in presets.fixed_tau_grid(seed=0)}
    secs = time.perf_counter() - t0
    recall = {k: float(np.mean(r.recall)) for k, r in runs.items()}
    strong = [recall["euclidean_l2"], recall["oblique_neg_trace"]]
    weak = [recall["sphere_neg_inner"], recall["oblique_geodesic"]]
    gap = min(strong) / max(weak)
    near_chance = max(weak) <= 2 * CHANCE
    ok = gap >= 3 and near_chance and secs < 300
    report(6, ok, secs, ", ".join(f"{k} {v:.3f}" for k, v in recall.items())
           + f"; gap {gap:.2f}x (need 3x), weak max {max(weak) / CHANCE:.1f}x chance (need <= 2x)")
    assert all(math.isfinite(v) for v in recall.values())
    assert gap >= 3, f"strong/weak recall ratio {gap:.2f} < 3"
    assert near_chance, f"weak set reaches {max(weak) / CHANCE:.1f}x chance"
    assert secs < 300


def test_criterion_07_temperature_equilibrium(report):
    t0 = time.perf_counter()
    a, b, trace = (train(c) for c in presets.temperature_runs(seed=0))
    secs = time.perf_counter() - t0
    conv = (convergence_step(a.log), convergence_step(b.log))
    spread = abs(a.tau - b.tau) / min(a.tau, b.tau)
    ok = None not in conv and spread <= 0.15 and trace.tau < min(a.tau, b.tau) and secs < 300
    report(7, ok, secs, f"sphere tau {a.tau:.3f} (t0=0) vs {b.tau:.3f} (t0=2.64), spread {spread:.1%}, "
           f"convergence steps {conv}; neg-trace tau {trace.tau:.3f}")
    assert None not in conv
    assert spread <= 0.15
    assert trace.tau < min(a.tau, b.tau)
    assert secs < 300


def test_criterion_08_storage_exponents(report):
    reports, secs = timed(bench.sweep, bench.parse_sweep(""))
    exps = bench.fitted_exponents(reports)
    checks = [
        abs(exps["euclidean_l2"]["d"] - 1.0) <= 0.15,
        abs(exps["sphere_neg_inner"]["d"]) <= 0.1,
        abs(exps["oblique_neg_trace"]["d"]) <= 0.1,
        abs(exps["oblique_geodesic"]["m"] - 1.0) <= 0.15,
    ]
    ok = all(checks) and secs < 120
    report(8, ok, secs, f"l2 d^{exps['euclidean_l2']['d']:.3f}, neg-inner d^{exps['sphere_neg_inner']['d']:.3f}, "
           f"neg-trace d^{exps['oblique_neg_trace']['d']:.3f}, geodesic m^{exps['oblique_geodesic']['m']:.3f}")
    assert all(checks), exps
    assert secs < 120


def test_criterion_09_token_subsets(report):
    t0 = time.perf_counter()
    cfg = presets.multi_token_run(seed=0)
    res = train(cfg)
    u, v = embed_batch(TwoTower(cfg.model), res.params, eval_set(cfg))
    rng = named_rng(cfg.seed, "token-subsets")
    full, half, one = (token_subset_eval(u, v, s, n_subsets=5, rng=rng, batch_size=cfg.eval_size).mean
                       for s in (4, 2, 1))
    secs = time.perf_counter() - t0
    ok = half > 5 * CHANCE and full >= 2 * one
    report(9, ok, secs, f"recall@1 all 4 tokens {full:.3f}, 2 tokens {half:.3f} ({half / CHANCE:.1f}x chance), "
           f"1 token {one:.3f} (full/one {full / one:.2f}x)")
    assert half > 5 * CHANCE
    assert full >= 2 * one


def test_criterion_10_total_runtime(report):
    needed = set(range(1, 9))
    missing = needed - ELAPSED.keys()
    if missing:
        pytest.skip(f"criteria {sorted(missing)} did not run in this session")
    # criteria 3 and 4 share one distance-suite run
    total = sum(v for k, v in ELAPSED.items() if k != 4)
    core = sum(v for k, v in ELAPSED.items() if k in needed and k != 4)
    ok = total < 15 * 60
    report(10, ok, total, f"all criteria {total / 60:.1f} min; props+gradcheck+bench+training {core / 60:.1f} min")
    assert total < 15 * 60
