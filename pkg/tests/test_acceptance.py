"""End-to-end acceptance checks, one test per criterion.

Each test appends a ``PASS``/``FAIL`` line to the session log that the
terminal summary prints at the end of the run.
"""

import json
import shutil
import time

import numpy as np
import pytest

from relex.cli import main as cli_main
from relex.harness import RunConfig, compare_baselines, run_experiment
from relex.instances import m1, random_mdp
from relex.learner import init_state, update_regression
from relex.mdp import sample_episode, solve_optimal
from relex.representation import (
    coverage_check,
    coverage_instance,
    gen_cluster_lowrank,
    gen_rotated,
    gen_tabular,
    reconstruct_kernel,
)
from relex.seeding import Streams

from oracles import enumerate_optimal

SEEDS = list(range(20))
K_PHASE = 20_000


class Clock:
    def __init__(self):
        self.start = time.perf_counter()

    @property
    def elapsed(self):
        return time.perf_counter() - self.start


def report(log, number, title, ok, detail, elapsed=None, limit=None):
    timing = ""
    if elapsed is not None:
        timing = f" [{elapsed:.1f}s" + (f" / limit {limit:.0f}s]" if limit else "]")
    line = f"criterion {number} {'PASS' if ok else 'FAIL'}: {title}: {detail}{timing}"
    log.append(line)
    print(line)
    return ok


def test_criterion_1_oracle_equivalence(acceptance_log):
    clock = Clock()
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(50):
        S, A, H = (int(x) for x in (rng.integers(1, 4), rng.integers(1, 3), rng.integers(1, 4)))
        spec = random_mdp(rng, S, A, H)
        q_enum, v_enum = enumerate_optimal(spec)
        sol = solve_optimal(spec)
        worst = max(worst, float(np.abs(sol.q_star - q_enum).max()),
                    float(np.abs(sol.v_star[:-1] - v_enum).max()))
    ok = worst <= 1e-10 and clock.elapsed < 10
    assert report(acceptance_log, 1, "backward induction matches policy enumeration",
                  ok, f"50 instances, max abs diff {worst:.2e} (tol 1e-10)", clock.elapsed, 10)


def _generated_classes():
    rng = np.random.default_rng(7)
    out = [(m1(), gen_tabular(m1()))]
    for _ in range(5):
        spec = random_mdp(rng, 3, 2, 3)
        out.append((spec, gen_tabular(spec)))
    for seed in range(10):
        for clusters in (1, 2, 3):
            out.append(gen_cluster_lowrank(clusters, seed, 4, 2, 2))
    out.append(coverage_instance(0))
    return out


def test_criterion_2_exact_factorization(acceptance_log):
    clock = Clock()
    worst_resid, worst_rot = 0.0, 0.0
    for seed, (spec, rep) in enumerate(_generated_classes()):
        for phi, model in zip(rep.feature_maps, rep.models):
            kernel = reconstruct_kernel(phi, rep.psi, model.matrices)
            worst_resid = max(worst_resid, float(np.abs(kernel - spec.transitions).max()))
        rot = gen_rotated(rep, seed=seed)
        for a, b, ma, mb in zip(rep.feature_maps, rot.feature_maps, rep.models, rot.models):
            ka = reconstruct_kernel(a, rep.psi, ma.matrices)
            kb = reconstruct_kernel(b, rot.psi, mb.matrices)
            worst_rot = max(worst_rot, float(np.abs(ka - kb).max()),
                            float(np.abs(kb - spec.transitions).max()))
    ok = worst_resid <= 1e-9 and worst_rot <= 1e-9 and clock.elapsed < 5
    assert report(acceptance_log, 2, "bilinear residual and rotation invariance", ok,
                  f"max residual {worst_resid:.2e}, max rotation drift {worst_rot:.2e} (tol 1e-9)",
                  clock.elapsed, 5)


def test_criterion_3_regression_consistency(acceptance_log):
    clock = Clock()
    spec = m1()
    rep = gen_tabular(spec)
    pi_star = solve_optimal(spec).pi_star
    H, S, A = spec.rewards.shape
    good = 0
    worst = []
    for seed in SEEDS:
        streams = Streams(seed)
        policy_rng, trans_rng, init_rng = streams.get("policy"), streams.get("transition"), streams.get("init_state")
        states = init_state(rep)
        for k in range(1, 5001):
            explore = policy_rng.random((H, S)) < 0.3
            policy = np.where(explore, policy_rng.integers(0, A, size=(H, S)), pi_star)
            update_regression(states, rep, sample_episode(spec, policy, trans_rng, init_rng, k))
        st = states[0]
        err = 0.0
        for h in range(H):
            visited = np.flatnonzero(np.diag(st.cov[h]) > 1.0)
            rows = spec.transitions[h].reshape(S * A, S)[visited]
            err = max(err, float(np.linalg.norm(st.estimate[h][visited] - rows, axis=1).max()))
        worst.append(err)
        good += err <= 0.05
    ok = good >= 18 and clock.elapsed < 60
    assert report(acceptance_log, 3, "ridge rows converge under epsilon-greedy play", ok,
                  f"{good}/20 seeds within 0.05 (worst row error {max(worst):.3f})", clock.elapsed, 60)


def test_criterion_4_optimism(acceptance_log):
    clock = Clock()
    bad_runs = 0
    cells = 0
    for seed in SEEDS:
        spec = random_mdp(np.random.default_rng(1000 + seed), 2, 2, 2)
        rep = gen_tabular(spec)
        res = run_experiment(RunConfig("relex", 2000, seed, c=1.0, delta=0.1, audit_covariance=False,
                                       audit_bonus=False), spec, rep)
        opt = res.audit["optimism"]
        cells += opt["violations"]
        bad_runs += opt["violations"] > 0
    ok = bad_runs <= 4 and clock.elapsed < 120
    assert report(acceptance_log, 4, "optimistic Q stays above Q*", ok,
                  f"{bad_runs}/20 runs with a violating cell (allowed 4); {cells} violating cells",
                  clock.elapsed, 120)


@pytest.fixture(scope="module")
def phase_runs(coverage):
    spec, rep = coverage
    clock = Clock()
    results = {}
    for seed in SEEDS:
        results[("relex", seed)] = run_experiment(
            RunConfig("relex", K_PHASE, seed, audit_optimism=False, audit_stride=100), spec, rep)
        for i in range(len(rep)):
            results[(f"single:{i}", seed)] = run_experiment(
                RunConfig(f"single:{i}", K_PHASE, seed, audit_optimism=False, audit_covariance=False,
                          audit_bonus=False), spec, rep)
    return results, clock.elapsed


@pytest.mark.slow
def test_criterion_5_phase_transition(coverage, phase_runs, acceptance_log):
    results, elapsed = phase_runs
    spec, rep = coverage
    assert coverage_check(rep, spec, solve_optimal(spec)).assumption3_holds
    relex = [results[("relex", s)].phase for s in SEEDS]
    one_hot = [results[("single:0", s)].phase for s in SEEDS]
    flat = float(np.median([p.flatness for p in relex]))
    k_star = float(np.median([p.k_star if p.k_star is not None else np.inf for p in relex]))
    flat_fine = float(np.median([p.flatness for p in one_hot]))
    ok = flat <= 0.01 and k_star < K_PHASE / 2 and flat_fine >= 0.05 and elapsed < 600
    assert report(acceptance_log, 5, "regret flattens with a covering class", ok,
                  f"median flatness {flat:.4f} (<= 0.01), median k* {k_star:.0f} (< {K_PHASE // 2}), "
                  f"one-hot-only median flatness {flat_fine:.3f} (>= 0.05)", elapsed, 600)


@pytest.mark.slow
def test_criterion_6_no_worse_than_single(coverage, phase_runs, acceptance_log):
    results, _ = phase_runs
    spec, rep = coverage
    table = compare_baselines(spec, rep, K_PHASE, SEEDS, results=results)
    relex = table["algorithms"]["relex"]["median_cum_regret"]
    best = table["min_baseline_median"]
    ok = relex <= 1.25 * best + 50
    assert report(acceptance_log, 6, "learner is no worse than the best single map", ok,
                  f"median regret {relex:.2f} vs best single {best:.2f} "
                  f"(bound {1.25 * best + 50:.2f}, ratio {table['ratio']:.3f})")


@pytest.mark.slow
def test_criterion_7_covariance_growth(phase_runs, acceptance_log):
    results, _ = phase_runs
    passed = total = 0
    for seed in SEEDS:
        audit = results[("relex", seed)].audit["covariance_growth"]
        rows = [r for r in audit["trace"] if r[0] >= K_PHASE / 4]
        passed += sum(r[3] >= r[4] for r in rows)
        total += len(rows)
    frac = passed / total
    ok = total > 0 and frac >= 0.95
    assert report(acceptance_log, 7, "projected covariance grows linearly", ok,
                  f"pass fraction {frac:.4f} over {total} sampled (k, h, map) cells with k >= K/4 (>= 0.95)")


@pytest.mark.slow
def test_criterion_8_bonus_decay(phase_runs, acceptance_log):
    results, _ = phase_runs
    slopes = [results[("relex", s)].audit["bonus_decay"]["slope_second_half"] for s in SEEDS]
    med = float(np.median(slopes))
    ok = -0.65 <= med <= -0.35
    assert report(acceptance_log, 8, "largest bonus decays like k^-1/2", ok,
                  f"median log-log slope {med:.3f} (range of seeds {min(slopes):.3f}..{max(slopes):.3f}; "
                  f"target [-0.65, -0.35])")


def test_criterion_9_determinism(tmp_path, acceptance_log):
    clock = Clock()
    K = 1000
    base = {"generator": {"kind": "coverage", "seed": 0}, "algorithms": ["relex", "single:1"],
            "episodes": K, "seeds": [3, 4], "audit_stride": 25, "mc_check": 0}

    def run(name, **extra):
        cfg = tmp_path / f"{name}.json"
        cfg.write_text(json.dumps({**base, "out_dir": name, **extra}))
        assert cli_main(["run", "--config", str(cfg)]) == 0
        return tmp_path / name

    def snapshot(root, skip=("checkpoint.json",)):
        return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*"))
                if p.is_file() and p.name not in skip}

    a = snapshot(run("a"))
    b = snapshot(run("b"))
    repeat_ok = a == b and len(a) == 16  # 4 jobs x 4 artifacts

    part = run("part", checkpoint_at=K // 2)
    for p in part.rglob("*"):
        if p.is_file() and p.name != "checkpoint.json":
            p.unlink()
    resumed = snapshot(run("part", checkpoint_at=K // 2, resume=True))
    resume_ok = resumed == a
    shutil.rmtree(tmp_path / "part")
    ok = repeat_ok and resume_ok and clock.elapsed < 60
    assert report(acceptance_log, 9, "byte-identical reruns and checkpoint resume", ok,
                  f"rerun identical: {repeat_ok}, resume at K/2 identical: {resume_ok}", clock.elapsed, 60)
