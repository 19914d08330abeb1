"""Experiment driver: exact regret accounting, phase detection and audits.

A run alternates planning, a rollout in the true MDP, exact evaluation of
the played policy and the regression update. Audits only read learner
state and never consume randomness from the environment streams.
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .learner import ReLEX
from .mdp import MdpSpec, rollout_batch, policy_value, sample_episode, solve_optimal
from .representation import RepresentationClass, coverage_check
from .seeding import Streams

log = logging.getLogger(__name__)

ALGORITHMS = ("relex", "oracle", "uniform_random")
OPTIMISM_TOL = 1e-8
ZERO_TOL = 1e-12


def fmt(x) -> str:
    return f"{x:.12g}"


def round_floats(obj):
    """Recursively round floats to 12 significant digits for reports."""
    if isinstance(obj, float):
        return float(fmt(obj)) if math.isfinite(obj) else obj
    if isinstance(obj, dict):
        return {k: round_floats(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [round_floats(v) for v in obj]
    if isinstance(obj, np.generic):
        return round_floats(obj.item())
    return obj


def dump_json(obj, path):
    Path(path).write_text(json.dumps(round_floats(obj), indent=2, sort_keys=True) + "\n")


@dataclass
class RunConfig:
    """One (algorithm, seed) job.

    ``algorithm`` is ``relex``, ``single:<i>``, ``oracle`` or
    ``uniform_random``. ``burn_in`` defaults to ``episodes // 4``.
    """

    algorithm: str = "relex"
    episodes: int = 1000
    seed: int = 0
    c: float = 0.5
    delta: float = 0.1
    instance: str = ""
    audit_optimism: bool = True
    audit_covariance: bool = True
    audit_bonus: bool = True
    audit_stride: int = 50
    rank_tol: float = 1e-7
    burn_in: int | None = None
    mc_check: int = 0
    mc_replays: int = 100_000
    out_dir: str | None = None
    checkpoint_at: int | None = None
    checkpoint_path: str | None = None

    def __post_init__(self):
        if self.episodes < 1:
            raise ValueError(f"episodes must be >= 1, got {self.episodes}")
        if not 0 < self.delta < 1:
            raise ValueError(f"delta must lie in (0, 1), got {self.delta}")
        if self.audit_stride < 1:
            raise ValueError("audit_stride must be >= 1")
        parse_algorithm(self.algorithm)

    @property
    def learning(self):
        return parse_algorithm(self.algorithm)[0] in ("relex", "single")


def parse_algorithm(name):
    """``'single:2'`` -> ``('single', 2)``; other names map to ``(name, None)``."""
    if name.startswith("single:"):
        try:
            return "single", int(name.split(":", 1)[1])
        except ValueError:
            raise ValueError(f"bad map index in algorithm {name!r}") from None
    if name not in ALGORITHMS:
        raise ValueError(f"unknown algorithm {name!r}; expected one of {ALGORITHMS} or single:<i>")
    return name, None


@dataclass
class RegretRecord:
    """Per-episode regret series; ``chosen`` counts pairs per (h, map)."""

    init_state: list = field(default_factory=list)
    ep_regret: list = field(default_factory=list)
    cum_regret: list = field(default_factory=list)
    gap_sum: list = field(default_factory=list)
    expected_regret: list = field(default_factory=list)
    chosen: list = field(default_factory=list)
    map_names: list = field(default_factory=list)
    horizon: int = 0

    def append(self, init_state, regret, gap_sum, expected, chosen=()):
        prev = self.cum_regret[-1] if self.cum_regret else 0.0
        self.init_state.append(int(init_state))
        self.ep_regret.append(float(regret))
        self.cum_regret.append(prev + float(regret))
        self.gap_sum.append(float(gap_sum))
        self.expected_regret.append(float(expected))
        self.chosen.append([int(c) for c in chosen])

    def __len__(self):
        return len(self.ep_regret)

    def header(self):
        cols = ["episode", "init_state", "ep_regret", "cum_regret", "gap_sum"]
        cols += [f"chosen_h{h + 1}_{name}" for h in range(self.horizon) for name in self.map_names]
        return cols

    def to_csv(self) -> str:
        lines = [",".join(self.header())]
        for k in range(len(self)):
            row = [str(k + 1), str(self.init_state[k]), fmt(self.ep_regret[k]),
                   fmt(self.cum_regret[k]), fmt(self.gap_sum[k])]
            row += [str(c) for c in self.chosen[k]]
            lines.append(",".join(row))
        return "\n".join(lines) + "\n"

    def expected_csv(self) -> str:
        lines = ["episode,exp_regret,cum_exp_regret"]
        total = 0.0
        for k, r in enumerate(self.expected_regret):
            total += r
            lines.append(f"{k + 1},{fmt(r)},{fmt(total)}")
        return "\n".join(lines) + "\n"

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, doc):
        return cls(**doc)


@dataclass
class PhaseReport:
    k_star: int | None
    early_mean: float
    late_mean: float
    flatness: float
    num_episodes: int
    insufficient: bool

    def to_dict(self):
        return asdict(self)


def detect_phase(records) -> PhaseReport:
    """Empirical onset of zero regret and the late/early flatness ratio.

    ``k_star`` is one plus the last episode with nonzero regret (``None``
    when the final episode still has regret). Runs shorter than 10
    episodes are marked insufficient.
    """
    regret = np.asarray(records.ep_regret if isinstance(records, RegretRecord) else records, dtype=float)
    K = len(regret)
    if K == 0:
        return PhaseReport(None, 0.0, 0.0, 0.0, 0, True)
    nonzero = np.nonzero(np.abs(regret) > ZERO_TOL)[0]
    if nonzero.size == 0:
        k_star = 1
    elif nonzero[-1] == K - 1:
        k_star = None
    else:
        k_star = int(nonzero[-1]) + 2
    early = float(regret[: max(1, K // 10)].mean())
    late = float(regret[K - max(1, K // 5):].mean())
    if late <= ZERO_TOL:
        ratio = 0.0
    elif early <= ZERO_TOL:
        ratio = math.inf
    else:
        ratio = late / early
    return PhaseReport(k_star, early, late, ratio, K, K < 10)


class OptimismAudit:
    """Counts cells where the optimistic Q falls below ``Q*``."""

    def __init__(self, q_star, tol=OPTIMISM_TOL):
        self.q_star = q_star
        self.tol = tol
        self.cells = 0
        self.violations = 0
        self.episodes_with_violation = 0
        self.first_violation = None
        self.worst = 0.0

    def observe(self, plan):
        short = self.q_star - plan.q
        bad = short > self.tol
        n = int(bad.sum())
        self.cells += bad.size
        if n:
            self.violations += n
            self.episodes_with_violation += 1
            self.worst = max(self.worst, float(short.max()))
            if self.first_violation is None:
                self.first_violation = int(plan.episode)

    def result(self):
        return {
            "cells": self.cells,
            "violations": self.violations,
            "fraction": self.violations / self.cells if self.cells else 0.0,
            "episodes_with_violation": self.episodes_with_violation,
            "first_violation": self.first_violation,
            "worst_shortfall": self.worst,
        }

    def state(self):
        return {k: getattr(self, k) for k in
                ("cells", "violations", "episodes_with_violation", "first_violation", "worst")}

    def load(self, doc):
        for k, v in doc.items():
            setattr(self, k, v)


def audit_optimism(plans, solution, tol=OPTIMISM_TOL):
    audit = OptimismAudit(solution.q_star, tol)
    for plan in plans:
        audit.observe(plan)
    return audit.result()


class CovarianceAudit:
    """Smallest eigenvalue of ``U^k`` on the image of each diversity matrix."""

    def __init__(self, coverage, burn_in, factor=0.5):
        self.coverage = coverage
        self.burn_in = burn_in
        self.factor = factor
        self.trace = []  # rows [k, map, h, eigenvalue, reference]

    def observe(self, k, states):
        for i, st in enumerate(states):
            sigma = self.coverage.sigma[i]
            if sigma is None:
                continue
            for h, basis in enumerate(self.coverage.bases[i]):
                if basis.shape[1] == 0:
                    continue
                lam = float(np.linalg.eigvalsh(basis.T @ st.cov[h] @ basis)[0])
                self.trace.append([int(k), i, h, lam, self.factor * sigma * (k - 1)])

    def result(self):
        rows = [r for r in self.trace if r[0] >= self.burn_in]
        per = {}
        for k, i, h, lam, ref in rows:
            key = f"{self.coverage.names[i]}/h{h + 1}"
            ok, n = per.get(key, (0, 0))
            per[key] = (ok + (lam >= ref), n + 1)
        passed = sum(ok for ok, _ in per.values())
        total = sum(n for _, n in per.values())
        return {
            "burn_in": self.burn_in,
            "factor": self.factor,
            "sigma": self.coverage.sigma,
            "pass_fraction": passed / total if total else None,
            "per_map_step": {k: ok / n for k, (ok, n) in sorted(per.items())},
            "trace": self.trace,
        }

    def state(self):
        return {"trace": self.trace}

    def load(self, doc):
        self.trace = [list(r) for r in doc["trace"]]


def fit_loglog_slope(ks, values, start=None):
    """Least-squares slope of ``log(values)`` on ``log(ks)`` for ``ks >= start``."""
    ks = np.asarray(ks, dtype=float)
    values = np.asarray(values, dtype=float)
    keep = (values > 0) & (ks >= (start if start is not None else 0))
    if keep.sum() < 2:
        return None
    return float(np.polyfit(np.log(ks[keep]), np.log(values[keep]), 1)[0])


class BonusAudit:
    """Largest (over pairs and steps) of the smallest (over maps) bonus."""

    def __init__(self, episodes):
        self.episodes = episodes
        self.trace = []

    def observe(self, k, plan):
        self.trace.append([int(k), float(plan.bonus_min.max())])

    def result(self):
        ks = [r[0] for r in self.trace]
        vals = [r[1] for r in self.trace]
        return {
            "slope_second_half": fit_loglog_slope(ks, vals, start=self.episodes / 2),
            "trace": self.trace,
        }

    def state(self):
        return {"trace": self.trace}

    def load(self, doc):
        self.trace = [list(r) for r in doc["trace"]]


def audit_covariance_growth(states_stream, coverage, burn_in, factor=0.5):
    """``states_stream`` yields ``(k, states)`` pairs."""
    audit = CovarianceAudit(coverage, burn_in, factor)
    for k, states in states_stream:
        audit.observe(k, states)
    return audit.result()


def audit_bonus_decay(plan_stream, episodes):
    """``plan_stream`` yields plans carrying ``episode`` and ``bonus_min``."""
    audit = BonusAudit(episodes)
    for plan in plan_stream:
        audit.observe(plan.episode, plan)
    return audit.result()


def regret_gap_bound(gap_total, horizon, episodes, delta):
    """Right-hand side of the regret-versus-gap-sum consistency check."""
    H, K = horizon, episodes
    log_term = math.log((1 + math.log(H * K)) * K**2 / delta)
    return 2 * gap_total + 16 * H**2 * log_term / 3 + 2


@dataclass
class RunResult:
    config: RunConfig
    records: RegretRecord
    audit: dict
    phase: PhaseReport


def _mc_regret(spec, solution, policy, s0, n, rng):
    _, opt = rollout_batch(spec, solution.pi_star, n, rng, init_state=s0)
    _, got = rollout_batch(spec, policy, n, rng, init_state=s0)
    diff = opt.mean() - got.mean()
    se = math.sqrt(opt.var(ddof=1) / n + got.var(ddof=1) / n)
    return diff, se


def run_experiment(config: RunConfig, spec: MdpSpec, rep: RepresentationClass | None = None,
                   resume_from=None) -> RunResult:
    """Play ``config.episodes`` episodes and account regret exactly."""
    kind, map_index = parse_algorithm(config.algorithm)
    solution = solve_optimal(spec)
    H, S, _ = spec.rewards.shape
    K = config.episodes
    streams = Streams(config.seed)
    init_rng, trans_rng = streams.get("init_state"), streams.get("transition")
    policy_rng = streams.get("policy")
    v_star = policy_value(spec, solution.pi_star)

    learner = None
    if config.learning:
        if rep is None:
            raise ValueError(f"algorithm {config.algorithm!r} needs a representation class")
        maps = None if kind == "relex" else [map_index]
        if maps is not None and not 0 <= map_index < len(rep):
            raise ValueError(f"map index {map_index} out of range for a class of {len(rep)}")
        learner = ReLEX(c=config.c, delta=config.delta, maps=maps).start(spec, rep)
    names = learner.rep_.names if learner else []
    records = RegretRecord(map_names=names, horizon=H if learner else 0)

    burn_in = config.burn_in if config.burn_in is not None else K // 4
    optimism = OptimismAudit(solution.q_star) if learner and config.audit_optimism else None
    covariance = None
    if learner and config.audit_covariance:
        coverage = coverage_check(learner.rep_, spec, solution, config.rank_tol)
        covariance = CovarianceAudit(coverage, burn_in)
    bonus_audit = BonusAudit(K) if learner and config.audit_bonus else None
    mc_episodes = set(np.unique(np.linspace(1, K, config.mc_check).astype(int)).tolist()) if config.mc_check else set()
    mc_rows = []
    start = 1

    if resume_from is not None:
        doc = json.loads(Path(resume_from).read_text())
        start = doc["episode"] + 1
        streams.set_state(doc["streams"])
        records = RegretRecord.from_dict(doc["records"])
        if learner:
            learner.restore(doc["learner"])
        for audit, key in ((optimism, "optimism"), (covariance, "covariance"), (bonus_audit, "bonus")):
            if audit is not None:
                audit.load(doc["audits"][key])
        mc_rows = doc.get("mc", [])

    for k in range(start, K + 1):
        sampled = (k - 1) % config.audit_stride == 0 or k == K
        if kind == "oracle":
            policy = solution.pi_star
        elif kind == "uniform_random":
            policy = policy_rng.integers(0, spec.num_actions, size=(H, S))
        else:
            plan = learner.plan()
            policy = plan.policy
            if optimism is not None:
                optimism.observe(plan)
            if sampled and covariance is not None:
                covariance.observe(k, learner.states_)
            if sampled and bonus_audit is not None:
                bonus_audit.observe(k, plan)
        traj = sample_episode(spec, policy, trans_rng, init_rng, episode=k)
        v_pi = policy_value(spec, policy)
        s1 = traj.states[0]
        gap_sum = sum(solution.gaps[h, s, a] for h, s, a, _, _ in traj.steps())
        chosen = ()
        if learner:
            counts = np.stack([(plan.chosen == i).sum(axis=(1, 2)) for i in range(len(names))], axis=1)
            chosen = counts.reshape(-1)
        records.append(s1, v_star[s1] - v_pi[s1], gap_sum, float(spec.init_dist @ (v_star - v_pi)), chosen)
        if k in mc_episodes:
            # separate stream so the spot check leaves trajectories untouched
            rng = np.random.default_rng([config.seed, k, 0xA11])
            diff, se = _mc_regret(spec, solution, policy, s1, config.mc_replays, rng)
            mc_rows.append([k, v_star[s1] - v_pi[s1], diff, se])
        if learner:
            learner.partial_fit(traj)
        if config.checkpoint_at == k and config.checkpoint_path:
            _write_checkpoint(config, k, streams, records, learner, optimism, covariance, bonus_audit, mc_rows)

    audit = {"algorithm": config.algorithm, "seed": config.seed, "episodes": K}
    audit["optimism"] = optimism.result() if optimism else None
    audit["covariance_growth"] = covariance.result() if covariance else None
    audit["bonus_decay"] = bonus_audit.result() if bonus_audit else None
    gap_total = float(np.sum(records.gap_sum))
    bound = regret_gap_bound(gap_total, H, K, config.delta)
    final = records.cum_regret[-1]
    if math.isinf(solution.gap_min):
        # every action is optimal everywhere, the gap check says nothing
        log.warning("all gaps are zero; skipping the regret-vs-gap check")
        audit["regret_gap"] = {"skipped": "all gaps are zero"}
    else:
        audit["regret_gap"] = {"cum_regret": final, "gap_total": gap_total, "bound": bound,
                               "flagged": bool(final > bound)}
    if mc_rows:
        audit["monte_carlo"] = [
            {"episode": k, "exact": ex, "mc": mc, "se": se,
             "within_5se": bool(abs(ex - mc) <= 5 * se + 1e-12)}
            for k, ex, mc, se in mc_rows
        ]
    phase = detect_phase(records)
    result = RunResult(config, records, audit, phase)
    if config.out_dir:
        write_run(result, config.out_dir)
    return result


def _write_checkpoint(config, k, streams, records, learner, optimism, covariance, bonus_audit, mc_rows):
    doc = {
        "config": asdict(config),
        "episode": k,
        "streams": streams.state(),
        "records": records.to_dict(),
        "learner": learner.snapshot() if learner else None,
        "audits": {
            "optimism": optimism.state() if optimism else None,
            "covariance": covariance.state() if covariance else None,
            "bonus": bonus_audit.state() if bonus_audit else None,
        },
        "mc": mc_rows,
    }
    Path(config.checkpoint_path).parent.mkdir(parents=True, exist_ok=True)
    Path(config.checkpoint_path).write_text(json.dumps(doc))


def write_run(result: RunResult, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "episodes.csv").write_text(result.records.to_csv())
    (out / "expected_regret.csv").write_text(result.records.expected_csv())
    dump_json(result.audit, out / "audit.json")
    phase = result.phase.to_dict()
    phase.update(algorithm=result.config.algorithm, seed=result.config.seed)
    dump_json(phase, out / "phase.json")


def _job(args):
    config, spec, rep = args
    return run_experiment(config, spec, rep)


def run_many(configs, spec, rep, jobs=1):
    """Run independent jobs, returned in input order."""
    if jobs <= 1 or len(configs) <= 1:
        return [run_experiment(c, spec, rep) for c in configs]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_job, [(c, spec, rep) for c in configs]))


def compare_baselines(spec, rep, episodes, seeds, c=0.5, delta=0.1, jobs=1, results=None):
    """Median cumulative regret of the learner against every single-map run.

    ``results`` may pass already-computed runs keyed by ``(algorithm, seed)``.
    """
    algorithms = ["relex"] + [f"single:{i}" for i in range(len(rep))]
    results = dict(results or {})
    todo = [RunConfig(a, episodes, s, c, delta, audit_optimism=False, audit_covariance=False,
                      audit_bonus=False)
            for a in algorithms for s in seeds if (a, s) not in results]
    for cfg, res in zip(todo, run_many(todo, spec, rep, jobs)):
        results[(cfg.algorithm, cfg.seed)] = res
    table = {}
    for a in algorithms:
        finals = [results[(a, s)].records.cum_regret[-1] for s in seeds]
        name = "relex" if a == "relex" else f"{a} ({rep.names[parse_algorithm(a)[1]]})"
        table[a] = {"name": name, "median_cum_regret": float(np.median(finals)), "per_seed": finals}
    best = min(table[a]["median_cum_regret"] for a in algorithms[1:])
    relex = table["relex"]["median_cum_regret"]
    if best == 0:
        ratio = 1.0 if relex == 0 else math.inf
    else:
        ratio = relex / best
    return {"episodes": episodes, "seeds": list(seeds), "algorithms": table,
            "min_baseline_median": best, "ratio": ratio}
