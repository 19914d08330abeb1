"""Command-line entry points: ``generate``, ``validate``, ``run``, ``report``.

Exit codes: 0 success, 1 usage or parse error, 2 validation failure,
3 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import harness
from .instances import NAMED
from .mdp import MdpSpec, solve_optimal, validate_mdp
from .representation import (
    RESIDUAL_TOL,
    FactorizationError,
    RepresentationClass,
    compute_constants,
    coverage_check,
    coverage_instance,
    fit_true_model,
    gen_cluster_lowrank,
    gen_rotated,
    gen_tabular,
    reconstruct_kernel,
)
from .svg import line_chart, thin

log = logging.getLogger("relex")

EXIT_OK, EXIT_USAGE, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2, 3
OUTPUT_ROOT_ENV = "RELEX_OUTPUT_ROOT"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# configuration


@dataclass
class ExperimentConfig:
    """Parsed ``run`` configuration; paths are resolved against the file."""

    instance: str | None = None
    rep_class: str | None = None
    generator: dict | None = None
    algorithms: list = field(default_factory=lambda: ["relex"])
    episodes: int = 1000
    seeds: list = field(default_factory=lambda: [0])
    c: float = 0.5
    delta: float = 0.1
    rank_tol: float = 1e-7
    audit_stride: int = 50
    out_dir: str = "runs"
    checkpoint_at: int | None = None
    resume: bool = False
    mc_check: int = 0

    KEYS = {
        "instance": "instance", "class": "rep_class", "generator": "generator",
        "algorithms": "algorithms", "episodes": "episodes", "seeds": "seeds", "c": "c",
        "delta": "delta", "rank_tol": "rank_tol", "audit_stride": "audit_stride",
        "out_dir": "out_dir", "checkpoint_at": "checkpoint_at", "resume": "resume",
        "mc_check": "mc_check",
    }

    @classmethod
    def from_dict(cls, doc, base_dir="."):
        unknown = set(doc) - set(cls.KEYS)
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**{cls.KEYS[k]: v for k, v in doc.items()})
        base = Path(base_dir)
        for attr in ("instance", "rep_class"):
            value = getattr(cfg, attr)
            if value is not None and value.lower() not in NAMED:
                path = (base / value) if not Path(value).is_absolute() else Path(value)
                if not path.exists():
                    raise UsageError(f"{attr} file not found: {path}")
                setattr(cfg, attr, str(path))
        if not Path(cfg.out_dir).is_absolute():
            cfg.out_dir = str(base / cfg.out_dir)
        cfg.check()
        return cfg

    def check(self):
        if not self.seeds:
            raise UsageError("seeds must be a nonempty list")
        if len(set(self.seeds)) != len(self.seeds):
            raise UsageError(f"seeds must be distinct: {self.seeds}")
        if self.instance is None and self.generator is None:
            raise UsageError("config needs an instance path or a generator block")
        if self.episodes < 1:
            raise UsageError("episodes must be >= 1")
        if not 0 < self.delta < 1:
            raise UsageError("delta must lie in (0, 1)")
        for a in self.algorithms:
            try:
                harness.parse_algorithm(a)
            except ValueError as exc:
                raise UsageError(str(exc)) from None

    def to_dict(self):
        return {k: getattr(self, attr) for k, attr in self.KEYS.items()}

    @classmethod
    def load(cls, path):
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from None
        return cls.from_dict(doc, path.parent)


def load_instance(ref) -> MdpSpec:
    if ref.lower() in NAMED:
        return NAMED[ref.lower()]()
    return MdpSpec.load(ref)


def generate(kind, params):
    """Build ``(spec, rep)`` for a generator block."""
    params = dict(params)
    seed = params.pop("seed", 0)
    if kind == "tabular":
        spec = load_instance(params.pop("instance", "m1"))
        return spec, gen_tabular(spec)
    if kind == "cluster":
        spec, rep = gen_cluster_lowrank(
            params.pop("clusters", 2), seed,
            num_states=params.pop("states", 4), num_actions=params.pop("actions", 2),
            horizon=params.pop("horizon", 2), **params,
        )
        return spec, rep
    if kind == "coverage":
        return coverage_instance(seed, **params)
    if kind == "rotated":
        spec = load_instance(params.pop("instance"))
        rep = RepresentationClass.load(params.pop("class"))
        rotations = params.pop("rotations", None)
        if rotations is not None:
            rotations = {int(k): np.asarray(v) for k, v in rotations.items()}
        return spec, gen_rotated(rep, seed=seed, rotations=rotations, **params)
    raise UsageError(f"unknown generator kind {kind!r}")


def definition_check(spec, rep):
    """Problems that break the bilinear factorization; empty when it holds."""
    problems = [str(v) for v in validate_mdp(spec)]
    if problems:
        return problems
    for phi, model in zip(rep.feature_maps, rep.models):
        kernel = reconstruct_kernel(phi, rep.psi, model.matrices)
        err = float(np.abs(kernel - spec.transitions).max())
        if err > RESIDUAL_TOL:
            problems.append(f"map {phi.name!r}: stored model misses the kernel by {err:.3g}")
        try:
            fit_true_model(spec, phi, rep.psi)
        except FactorizationError as exc:
            problems.append(str(exc))
    return problems


# ---------------------------------------------------------------------------
# commands


def cmd_generate(args):
    params = {"seed": args.seed}
    if args.kind == "cluster":
        params.update(states=args.states, actions=args.actions, horizon=args.horizon,
                      clusters=args.clusters)
    elif args.kind == "coverage":
        pass
    elif args.kind == "tabular":
        params["instance"] = args.instance or "m1"
    elif args.kind == "rotated":
        if not (args.instance and args.rep_class):
            raise UsageError("rotated needs --instance and --class")
        params.update(instance=args.instance, **{"class": args.rep_class})
        if args.rotation:
            params["rotations"] = json.loads(Path(args.rotation).read_text())
    try:
        spec, rep = generate(args.kind, params)
    except (ValueError, FactorizationError) as exc:
        print(f"generate failed: {exc}", file=sys.stderr)
        return EXIT_INVALID
    problems = definition_check(spec, rep)
    if problems:
        print("generated instance failed re-validation:\n  " + "\n  ".join(problems), file=sys.stderr)
        return EXIT_INVALID
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    spec.save(out / "mdp.json")
    rep.save(out / "class.json")
    resid = max(m.residual for m in rep.models)
    print(f"wrote {out / 'mdp.json'} and {out / 'class.json'} "
          f"(maps: {', '.join(rep.names)}; max residual {resid:.3g})")
    return EXIT_OK


def cmd_validate(args):
    spec = load_instance(args.instance)
    rep = RepresentationClass.load(args.rep_class)
    problems = definition_check(spec, rep)
    report = {"definition_holds": not problems, "problems": problems}
    if problems:
        print(json.dumps(report, indent=2))
        return EXIT_INVALID
    consts = compute_constants(rep)
    solution = solve_optimal(spec)
    coverage = coverage_check(rep, spec, solution, args.rank_tol)
    report.update(constants=consts.to_dict(), coverage=coverage.summary(),
                  gap_min=solution.gap_min, unique_optimal=solution.unique_optimal)
    warnings = []
    if not coverage.assumption3_holds:
        warnings.append(f"coverage fails: {len(coverage.uncovered())} uncovered (h, s, a) triples")
    if any(coverage.degenerate_steps):
        warnings.append(f"maps with zero diversity matrix at some step: {coverage.degenerate_steps}")
    if not solution.unique_optimal:
        warnings.append("optimal policy is not unique; ties broken toward the lowest action")
    report["warnings"] = warnings
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        harness.dump_json(report, out / "validate.json")
        (out / "uncovered.csv").write_text(coverage.uncovered_csv())
    print(json.dumps(harness.round_floats(report), indent=2))
    for w in warnings:
        print(f"warning: {w}", file=sys.stderr)
    return EXIT_OK


def job_dir(out_dir, algorithm, seed):
    return Path(out_dir) / f"{algorithm.replace(':', '_')}_seed{seed}"


def cmd_run(args):
    cfg = ExperimentConfig.load(args.config)
    if args.seed is not None:
        cfg.seeds = [args.seed]
    if args.out:
        cfg.out_dir = args.out
    elif os.environ.get(OUTPUT_ROOT_ENV):
        cfg.out_dir = os.environ[OUTPUT_ROOT_ENV]
    if cfg.generator is not None:
        gen = dict(cfg.generator)
        spec, rep = generate(gen.pop("kind"), gen)
    else:
        spec = load_instance(cfg.instance)
        rep = RepresentationClass.load(cfg.rep_class) if cfg.rep_class else None
    problems = definition_check(spec, rep) if rep is not None else [str(v) for v in validate_mdp(spec)]
    if problems:
        print("instance failed validation:\n  " + "\n  ".join(problems), file=sys.stderr)
        return EXIT_INVALID
    configs, resume = [], []
    for algorithm in cfg.algorithms:
        for seed in cfg.seeds:
            d = job_dir(cfg.out_dir, algorithm, seed)
            ckpt = d / "checkpoint.json"
            configs.append(harness.RunConfig(
                algorithm, cfg.episodes, seed, cfg.c, cfg.delta,
                instance=str(cfg.instance or cfg.generator), audit_stride=cfg.audit_stride,
                rank_tol=cfg.rank_tol, mc_check=cfg.mc_check, out_dir=str(d),
                checkpoint_at=cfg.checkpoint_at,
                checkpoint_path=str(ckpt) if cfg.checkpoint_at else None,
            ))
            resume.append(str(ckpt) if cfg.resume and ckpt.exists() else None)
    if any(resume):
        results = [harness.run_experiment(c, spec, rep, r) for c, r in zip(configs, resume)]
    else:
        results = harness.run_many(configs, spec, rep, args.jobs)
    for res in results:
        ph = res.phase
        print(f"{res.config.algorithm} seed={res.config.seed} K={ph.num_episodes} "
              f"cum_regret={harness.fmt(res.records.cum_regret[-1])} k_star={ph.k_star} "
              f"flatness={harness.fmt(ph.flatness)}")
    return EXIT_OK


def read_run(run_dir):
    run_dir = Path(run_dir)
    with open(run_dir / "episodes.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise UsageError(f"{run_dir / 'episodes.csv'} has no rows")
    meta = {}
    if (run_dir / "phase.json").exists():
        meta = json.loads((run_dir / "phase.json").read_text())
    episodes = [int(r["episode"]) for r in rows]
    cum = [float(r["cum_regret"]) for r in rows]
    ep = [float(r["ep_regret"]) for r in rows]
    return meta, episodes, cum, ep


def cmd_report(args):
    series, runs = {}, []
    for d in args.run_dirs:
        try:
            meta, episodes, cum, ep = read_run(d)
        except OSError as exc:
            raise UsageError(f"cannot read run directory {d}: {exc}") from None
        phase = harness.detect_phase(ep)
        label = f"{meta.get('algorithm', Path(d).name)} s{meta.get('seed', '?')}"
        while label in series:
            label += "'"
        series[label] = thin(episodes, cum)
        runs.append({"dir": str(d), "algorithm": meta.get("algorithm"), "seed": meta.get("seed"),
                     "final_cum_regret": cum[-1], "k_star": phase.k_star,
                     "flatness": phase.flatness})
    svg = line_chart(series, log_x=args.log_x)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(svg)
    by_alg = {}
    for r in runs:
        if r["algorithm"]:
            by_alg.setdefault(r["algorithm"], []).append(r["final_cum_regret"])
    medians = {a: float(np.median(v)) for a, v in sorted(by_alg.items())}
    singles = [m for a, m in medians.items() if a.startswith("single:")]
    ratio = None
    if "relex" in medians and singles:
        best = min(singles)
        ratio = (1.0 if medians["relex"] == 0 else float("inf")) if best == 0 else medians["relex"] / best
    summary = {"runs": runs, "median_cum_regret": medians, "baseline_ratio": ratio}
    summary_path = Path(args.summary) if args.summary else out.with_suffix(".json")
    harness.dump_json(summary, summary_path)
    print(f"wrote {out} and {summary_path}")
    return EXIT_OK


def build_parser():
    p = _Parser(prog="relex", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="write an instance and representation class")
    g.add_argument("kind", choices=["tabular", "cluster", "rotated", "coverage"])
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--states", type=int, default=4)
    g.add_argument("--actions", type=int, default=2)
    g.add_argument("--horizon", type=int, default=2)
    g.add_argument("--clusters", type=int, default=2)
    g.add_argument("--instance", help="instance file or builtin name (m1)")
    g.add_argument("--class", dest="rep_class", help="representation class file")
    g.add_argument("--rotation", help="JSON file mapping map index to a rotation matrix")
    g.set_defaults(func=cmd_generate)

    v = sub.add_parser("validate", help="check factorization, constants and coverage")
    v.add_argument("--instance", required=True)
    v.add_argument("--class", dest="rep_class", required=True)
    v.add_argument("--rank-tol", type=float, default=1e-7)
    v.add_argument("--out", help="directory for validate.json and uncovered.csv")
    v.set_defaults(func=cmd_validate)

    r = sub.add_parser("run", help="run experiments from a JSON config")
    r.add_argument("--config", required=True)
    r.add_argument("--seed", type=int)
    r.add_argument("--jobs", type=int, default=1)
    r.add_argument("--out", help=f"output root (overrides ${OUTPUT_ROOT_ENV} and the config)")
    r.set_defaults(func=cmd_run)

    rp = sub.add_parser("report", help="plot cumulative regret of finished runs")
    rp.add_argument("run_dirs", nargs="+")
    rp.add_argument("--out", required=True, help="SVG path")
    rp.add_argument("--summary", help="summary JSON path (default: next to the SVG)")
    rp.add_argument("--log-x", action="store_true")
    rp.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, json.JSONDecodeError, KeyError) as exc:
        print(f"error: cannot parse input: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:
        # ValidationError and FactorizationError land here too
        print(f"validation failed: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001
        log.exception("runtime failure")
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
