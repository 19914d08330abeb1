"""Feature maps, exact bilinear factorizations and coverage diagnostics.

A representation class shares one next-state map ``psi`` and carries a
finite list of state-action maps ``phi``. Each ``phi`` comes with the
per-step matrices ``M*_h`` such that ``P_h(s'|s,a) = phi(s,a)^T M*_h psi(s')``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .mdp import MdpSpec, OptimalSolution, occupancy

RESIDUAL_TOL = 1e-9
FIT_ERROR_TOL = 1e-6
DEFAULT_RANK_TOL = 1e-7
EXACT_CPSI_MAX_STATES = 20
MAX_CONDITION = 1e6


class FactorizationError(ValueError):
    """The representation cannot reproduce the MDP's transition kernel."""


class StateFeatureMap:
    """Next-state features ``psi(s')`` stacked as the rows of ``table``."""

    def __init__(self, table):
        table = np.array(table, dtype=float)
        if table.ndim != 2:
            raise ValueError(f"psi table must be 2-D (S, d'), got shape {table.shape}")
        self.table = table
        self.gram = table.T @ table
        eig_min = np.linalg.eigvalsh(self.gram).min()
        if eig_min <= 1e-8:
            raise ValueError(f"psi gram matrix is not invertible (min eigenvalue {eig_min:.3g})")
        self.gram_inv = np.linalg.inv(self.gram)
        # row s' is K_psi^{-1} psi(s'), the regression target for landing in s'
        self.targets = table @ self.gram_inv
        for arr in (self.table, self.gram, self.gram_inv, self.targets):
            arr.setflags(write=False)

    @property
    def dim(self) -> int:
        return self.table.shape[1]

    @property
    def num_states(self) -> int:
        return self.table.shape[0]

    def __eq__(self, other):
        return isinstance(other, StateFeatureMap) and np.array_equal(self.table, other.table)


class FeatureMap:
    """State-action features; ``table`` has shape ``(S, A, d)``, shared by all steps."""

    def __init__(self, name: str, table):
        table = np.array(table, dtype=float)
        if table.ndim != 3:
            raise ValueError(f"phi table must be 3-D (S, A, d), got shape {table.shape}")
        self.name = str(name)
        self.table = table
        self.table.setflags(write=False)
        self._stacked = table.reshape(-1, table.shape[2])

    @property
    def dim(self) -> int:
        return self.table.shape[2]

    @property
    def stacked(self) -> np.ndarray:
        """Rows indexed by the flat pair index ``s * A + a``."""
        return self._stacked

    def __eq__(self, other):
        return (
            isinstance(other, FeatureMap)
            and self.name == other.name
            and np.array_equal(self.table, other.table)
        )

    def __repr__(self):
        return f"FeatureMap({self.name!r}, d={self.dim})"


@dataclass(eq=False)
class BilinearModel:
    matrices: np.ndarray  # (H, d, d')
    residual: float
    worst_index: tuple

    def __eq__(self, other):
        return (
            isinstance(other, BilinearModel)
            and np.array_equal(self.matrices, other.matrices)
            and self.residual == other.residual
            and tuple(self.worst_index) == tuple(other.worst_index)
        )


def reconstruct_kernel(phi: FeatureMap, psi: StateFeatureMap, matrices) -> np.ndarray:
    """``phi^T M_h psi`` for every ``(h, s, a, s')``."""
    return np.einsum("sai,hij,tj->hsat", phi.table, np.asarray(matrices), psi.table)


def _residual(spec, phi, psi, matrices):
    err = np.abs(reconstruct_kernel(phi, psi, matrices) - spec.transitions)
    worst = np.unravel_index(int(np.argmax(err)), err.shape)
    return float(err[worst]), tuple(int(i) for i in worst)


def fit_true_model(spec: MdpSpec, phi: FeatureMap, psi: StateFeatureMap) -> BilinearModel:
    """Solve for ``M*_h`` by least squares on the exact kernel.

    Raises :class:`FactorizationError` when the reconstruction misses any
    transition probability by more than ``FIT_ERROR_TOL``.
    """
    S, A = spec.num_states, spec.num_actions
    if phi.table.shape[:2] != (S, A):
        raise ValueError(f"phi covers {phi.table.shape[:2]} pairs, MDP has {(S, A)}")
    if psi.num_states != S:
        raise ValueError(f"psi covers {psi.num_states} states, MDP has {S}")
    phi_pinv = np.linalg.pinv(phi.stacked)
    P = spec.transitions.reshape(spec.horizon, S * A, S)
    matrices = np.stack([phi_pinv @ P[h] @ psi.targets for h in range(spec.horizon)])
    residual, worst = _residual(spec, phi, psi, matrices)
    if residual > FIT_ERROR_TOL:
        h, s, a, s2 = worst
        raise FactorizationError(
            f"representation {phi.name!r} does not factor this MDP: "
            f"error {residual:.3g} at (h={h}, s={s}, a={a}, s'={s2})"
        )
    return BilinearModel(matrices, residual, worst)


@dataclass
class ConstantsReport:
    """Smallest constants satisfying the bilinear norm bounds, with witnesses.

    ``c_phi[i] * d_i`` is the largest squared feature norm of map ``i`` and
    ``c_m[i] * d_i`` the largest squared Frobenius norm of its ``M*_h``.
    """

    c_phi: list
    c_m: list
    c_psi: float
    c_psi_prime: float
    c_psi_exact: bool
    witnesses: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "c_phi": list(self.c_phi),
            "c_m": list(self.c_m),
            "c_psi": self.c_psi,
            "c_psi_prime": self.c_psi_prime,
            "c_psi_exact": self.c_psi_exact,
            "witnesses": self.witnesses,
        }

    @classmethod
    def from_dict(cls, doc):
        return cls(
            list(doc["c_phi"]),
            list(doc["c_m"]),
            doc["c_psi"],
            doc["c_psi_prime"],
            doc["c_psi_exact"],
            doc.get("witnesses", {}),
        )

    def __eq__(self, other):
        if not isinstance(other, ConstantsReport):
            return NotImplemented
        return self.to_dict() == other.to_dict()


def sup_to_two_norm(psi_table, max_exact_states=EXACT_CPSI_MAX_STATES):
    """``sup_{|v|_inf = 1} |Psi^T v|_2``, exact over sign vectors for small S.

    Returns ``(value, exact, witness)``; ``witness`` is the maximising sign
    vector when exact, ``None`` for the column-sum upper bound.
    """
    psi_table = np.asarray(psi_table, dtype=float)
    S = psi_table.shape[0]
    if S > max_exact_states:
        bound = float(np.linalg.norm(np.abs(psi_table).sum(axis=0)))
        return bound, False, None
    # the objective is convex, so the sup sits on a vertex of the cube;
    # v and -v give the same norm, so the first sign is pinned to +1
    best, best_v = -1.0, None
    rest = S - 1
    chunk = 1 << min(rest, 14)
    for start in range(0, 1 << rest, chunk):
        codes = np.arange(start, min(start + chunk, 1 << rest))
        bits = (codes[:, None] >> np.arange(rest)) & 1
        signs = np.hstack([np.ones((len(codes), 1)), 1.0 - 2.0 * bits])
        norms = np.linalg.norm(signs @ psi_table, axis=1)
        i = int(np.argmax(norms))
        if norms[i] > best:
            best, best_v = float(norms[i]), signs[i]
    return best, True, [int(x) for x in best_v]


@dataclass(eq=False)
class RepresentationClass:
    psi: StateFeatureMap
    feature_maps: list
    models: list
    constants: ConstantsReport | None = None

    def __post_init__(self):
        if len(self.feature_maps) != len(self.models):
            raise ValueError("one bilinear model is required per feature map")
        if not self.feature_maps:
            raise ValueError("representation class is empty")

    def __len__(self):
        return len(self.feature_maps)

    @property
    def names(self):
        return [phi.name for phi in self.feature_maps]

    @property
    def horizon(self):
        return self.models[0].matrices.shape[0]

    def subset(self, indices) -> "RepresentationClass":
        """Class restricted to ``indices``; constants are recomputed."""
        indices = list(indices)
        return with_constants(
            RepresentationClass(
                self.psi,
                [self.feature_maps[i] for i in indices],
                [self.models[i] for i in indices],
            )
        )

    def __eq__(self, other):
        if not isinstance(other, RepresentationClass):
            return NotImplemented
        return (
            self.psi == other.psi
            and self.feature_maps == other.feature_maps
            and self.models == other.models
            and self.constants == other.constants
        )

    def to_dict(self):
        return {
            "psi": self.psi.table.tolist(),
            "feature_maps": [
                {"name": phi.name, "d": phi.dim, "table": phi.stacked.tolist()}
                for phi in self.feature_maps
            ],
            "num_states": self.psi.num_states,
            "num_actions": self.feature_maps[0].table.shape[1],
            "models": [
                {
                    "matrices": m.matrices.tolist(),
                    "residual": m.residual,
                    "worst_index": list(m.worst_index),
                }
                for m in self.models
            ],
            "constants": None if self.constants is None else self.constants.to_dict(),
        }

    @classmethod
    def from_dict(cls, doc):
        S, A = doc["num_states"], doc["num_actions"]
        maps = [
            FeatureMap(fm["name"], np.array(fm["table"], dtype=float).reshape(S, A, fm["d"]))
            for fm in doc["feature_maps"]
        ]
        models = [
            BilinearModel(np.array(m["matrices"], dtype=float), m["residual"], tuple(m["worst_index"]))
            for m in doc["models"]
        ]
        consts = doc.get("constants")
        return cls(
            StateFeatureMap(doc["psi"]),
            maps,
            models,
            None if consts is None else ConstantsReport.from_dict(consts),
        )

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


def build_class(spec: MdpSpec, psi: StateFeatureMap, feature_maps) -> RepresentationClass:
    """Fit every map against ``spec`` and attach the constants."""
    models = [fit_true_model(spec, phi, psi) for phi in feature_maps]
    return with_constants(RepresentationClass(psi, list(feature_maps), models))


def with_constants(rep: RepresentationClass) -> RepresentationClass:
    rep.constants = compute_constants(rep)
    return rep


def compute_constants(rep: RepresentationClass) -> ConstantsReport:
    if any(m is None for m in rep.models):
        raise ValueError("every feature map needs a fitted model before computing constants")
    c_phi, c_m, wit_phi, wit_m = [], [], [], []
    for phi, model in zip(rep.feature_maps, rep.models):
        sq = (phi.table**2).sum(axis=2)
        s, a = np.unravel_index(int(np.argmax(sq)), sq.shape)
        c_phi.append(float(sq[s, a]) / phi.dim)
        wit_phi.append([int(s), int(a)])
        fro = (model.matrices**2).sum(axis=(1, 2))
        h = int(np.argmax(fro))
        c_m.append(float(fro[h]) / phi.dim)
        wit_m.append(h)
    c_psi, exact, sign_witness = sup_to_two_norm(rep.psi.table)
    rows = np.linalg.norm(rep.psi.targets, axis=1)
    s_prime = int(np.argmax(rows))
    witnesses = {
        "c_phi": wit_phi,
        "c_m": wit_m,
        "c_psi": sign_witness,
        "c_psi_prime": s_prime,
    }
    return ConstantsReport(c_phi, c_m, c_psi, float(rows[s_prime]), exact, witnesses)


def lambda_matrix(spec: MdpSpec, solution: OptimalSolution, phi: FeatureMap, h: int, dist=None):
    """Second moment of ``phi(s, pi*_h(s))`` under the optimal-policy state law.

    ``dist`` may carry a precomputed occupancy table to avoid recomputing it.
    """
    d = occupancy(spec, solution.pi_star) if dist is None else dist
    feats = phi.table[np.arange(spec.num_states), solution.pi_star[h]]
    lam = (feats * d[h][:, None]).T @ feats
    return 0.5 * (lam + lam.T)


@dataclass
class CoverageReport:
    """Eigen-structure of each ``Lambda_{h,phi}`` and the induced coverage.

    ``bases[i][h]`` is an orthonormal basis of the retained eigenspace
    (possibly with zero columns); ``covered[i]`` is a boolean ``(H, S, A)``
    mask. ``sigma[i]`` is ``None`` when no step has a nonzero ``Lambda``.
    """

    names: list
    lambdas: list
    eigenvalues: list
    bases: list
    sigma: list
    covered: list
    degenerate_steps: list
    union_covered: list
    assumption3_holds: bool
    rank_tol: float

    def uncovered(self):
        """``(h, s, a)`` triples no map covers, 0-based."""
        union = np.logical_or.reduce(self.covered)
        return [tuple(int(i) for i in idx) for idx in zip(*np.nonzero(~union))]

    def summary(self):
        return {
            "maps": self.names,
            "sigma": self.sigma,
            "degenerate_steps": self.degenerate_steps,
            "union_covered": self.union_covered,
            "assumption3_holds": self.assumption3_holds,
            "rank_tol": self.rank_tol,
            "num_uncovered": len(self.uncovered()),
            "covered_counts": [[int(c) for c in m.sum(axis=(1, 2))] for m in self.covered],
        }

    def uncovered_csv(self):
        lines = ["h,s,a"]
        lines += [f"{h + 1},{s},{a}" for h, s, a in self.uncovered()]
        return "\n".join(lines) + "\n"


def coverage_check(rep: RepresentationClass, spec: MdpSpec, solution: OptimalSolution,
                   rank_tol: float = DEFAULT_RANK_TOL) -> CoverageReport:
    dist = occupancy(spec, solution.pi_star)
    H = spec.horizon
    lambdas, eigvals, bases, sigma, covered, degenerate = [], [], [], [], [], []
    for phi in rep.feature_maps:
        lam_h, ev_h, basis_h, retained_min, degen = [], [], [], [], []
        mask = np.zeros((H, spec.num_states, spec.num_actions), dtype=bool)
        feats = phi.table
        norms = np.linalg.norm(feats, axis=2)
        for h in range(H):
            lam = lambda_matrix(spec, solution, phi, h, dist)
            w, V = np.linalg.eigh(lam)
            top = w.max(initial=0.0)
            keep = w > rank_tol * top if top > 0 else np.zeros_like(w, dtype=bool)
            basis = V[:, keep]
            lam_h.append(lam)
            ev_h.append(w)
            basis_h.append(basis)
            if keep.any():
                retained_min.append(float(w[keep].min()))
            else:
                degen.append(h)
            resid = feats - (feats @ basis) @ basis.T
            mask[h] = np.linalg.norm(resid, axis=2) <= rank_tol * norms
        lambdas.append(lam_h)
        eigvals.append(ev_h)
        bases.append(basis_h)
        sigma.append(min(retained_min) if retained_min else None)
        covered.append(mask)
        degenerate.append(degen)
    union = np.logical_or.reduce(covered)
    union_by_step = [bool(union[h].all()) for h in range(H)]
    return CoverageReport(
        rep.names, lambdas, eigvals, bases, sigma, covered, degenerate,
        union_by_step, all(union_by_step), rank_tol,
    )


# ---------------------------------------------------------------------------
# instance generators


def one_hot_pairs(num_states, num_actions, name="tabular") -> FeatureMap:
    return FeatureMap(name, np.eye(num_states * num_actions).reshape(num_states, num_actions, -1))


def cluster_map(assignment, num_clusters, name="coarse") -> FeatureMap:
    """One-hot over clusters; ``assignment`` is an ``(S, A)`` integer table."""
    assignment = np.asarray(assignment)
    return FeatureMap(name, np.eye(num_clusters)[assignment])


def gen_tabular(spec: MdpSpec) -> RepresentationClass:
    psi = StateFeatureMap(np.eye(spec.num_states))
    return build_class(spec, psi, [one_hot_pairs(spec.num_states, spec.num_actions)])


def gen_cluster_lowrank(num_clusters, seed, num_states=4, num_actions=2, horizon=2,
                        min_gap=0.0, require_coverage=False, reward_levels=None,
                        min_sigma=0.0, max_tries=10_000):
    """Random MDP whose kernel is constant on pair clusters.

    Pair ``(s, a)`` belongs to cluster ``(s + a) mod num_clusters`` so the
    actions of one state fall into different clusters whenever possible,
    and every cluster collects pairs from many states. Transition rows are
    drawn per (step, cluster) from a flat Dirichlet, rewards uniformly (or
    from ``reward_levels``) and the initial law has full support.

    With ``require_coverage``, ``min_gap`` or ``min_sigma`` set, draws are
    rejected until the coarse map alone covers every pair at every step
    under the optimal policy, the smallest nonzero gap reaches ``min_gap``
    and the coarse map's smallest retained diversity eigenvalue (the least
    optimal-policy mass on any cluster) reaches ``min_sigma``.

    Returns ``(spec, rep)`` with the fine pair one-hot map first and the
    coarse cluster map second.
    """
    from .mdp import solve_optimal

    S, A, H = num_states, num_actions, horizon
    if not 1 <= num_clusters <= S * A:
        raise ValueError(f"num_clusters must lie in [1, {S * A}], got {num_clusters}")
    rng = np.random.default_rng(seed)
    assignment = (np.arange(S)[:, None] + np.arange(A)[None, :]) % num_clusters
    fine = one_hot_pairs(S, A, "fine")
    coarse = cluster_map(assignment, num_clusters, "coarse")
    psi = StateFeatureMap(np.eye(S))
    for _ in range(max_tries):
        rows = rng.dirichlet(np.ones(S), size=(H, num_clusters))
        transitions = rows[:, assignment]
        if reward_levels is None:
            rewards = rng.random((H, S, A))
        else:
            rewards = rng.choice(np.asarray(reward_levels, dtype=float), size=(H, S, A))
        init = rng.dirichlet(np.ones(S))
        spec = MdpSpec(rewards, transitions, init / init.sum())
        if min_gap > 0 or min_sigma > 0 or require_coverage:
            sol = solve_optimal(spec)
            if not sol.unique_optimal or sol.gap_min < min_gap:
                continue
            if require_coverage or min_sigma > 0:
                report = coverage_check(build_class(spec, psi, [coarse]), spec, sol)
                if require_coverage and not report.assumption3_holds:
                    continue
                if min_sigma > 0 and (report.sigma[0] is None or report.sigma[0] < min_sigma):
                    continue
        return spec, build_class(spec, psi, [fine, coarse])
    raise RuntimeError(f"no instance met the constraints after {max_tries} draws")


def random_rotation(dim, rng, spread=0.5):
    """Well-conditioned random invertible matrix ``Q1 diag(e^u) Q2``."""
    q1, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    q2, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    return q1 @ np.diag(np.exp(rng.uniform(-spread, spread, dim))) @ q2


def gen_rotated(rep: RepresentationClass, seed=None, rotations=None, maps=None,
                suffix="") -> RepresentationClass:
    """Replace ``phi`` by ``R phi`` and ``M*_h`` by ``R^{-T} M*_h``.

    The kernel is preserved exactly in exact arithmetic; ``rotations`` maps
    a map index to an explicit ``R``, otherwise one is drawn from ``seed``.
    Only the indices in ``maps`` are rotated (all by default). Matrices
    with condition number above 1e6 are rejected.
    """
    rng = np.random.default_rng(seed)
    maps = range(len(rep)) if maps is None else maps
    rotations = {} if rotations is None else dict(rotations)
    new_maps, new_models = list(rep.feature_maps), list(rep.models)
    for i in maps:
        phi, model = rep.feature_maps[i], rep.models[i]
        R = np.asarray(rotations[i], dtype=float) if i in rotations else random_rotation(phi.dim, rng)
        if R.shape != (phi.dim, phi.dim):
            raise ValueError(f"rotation for map {i} must be {phi.dim}x{phi.dim}")
        cond = np.linalg.cond(R)
        if not np.isfinite(cond) or cond > MAX_CONDITION:
            raise ValueError(f"rotation for map {phi.name!r} is near singular (condition {cond:.3g})")
        new_phi = FeatureMap(phi.name + suffix, phi.table @ R.T)
        mats = np.linalg.solve(R.T, model.matrices)
        # residual against the original kernel, which the old model reproduces
        kernel = reconstruct_kernel(phi, rep.psi, model.matrices)
        err = np.abs(reconstruct_kernel(new_phi, rep.psi, mats) - kernel)
        worst = np.unravel_index(int(np.argmax(err)), err.shape)
        if err[worst] > model.residual:
            model_out = BilinearModel(mats, float(err[worst]), tuple(int(j) for j in worst))
        else:
            model_out = BilinearModel(mats, model.residual, model.worst_index)
        new_maps[i] = new_phi
        new_models[i] = model_out
    return with_constants(RepresentationClass(rep.psi, new_maps, new_models))


def coverage_instance(seed=0, num_states=6, num_actions=2, horizon=3, num_clusters=2,
                      min_gap=0.3, min_sigma=0.3, reward_levels=(0.0, 0.5, 1.0)):
    """The cluster instance used by the phase-transition experiments.

    Class order is ``[fine, coarse, coarse_rot]``: a pair one-hot map that
    fails coverage on its own, the coverage-completing cluster map, and a
    rotated copy of the cluster map.
    """
    spec, rep = gen_cluster_lowrank(
        num_clusters, seed, num_states, num_actions, horizon,
        min_gap=min_gap, require_coverage=True, reward_levels=reward_levels,
        min_sigma=min_sigma,
    )
    rotated = gen_rotated(rep.subset([1]), seed=seed, suffix="_rot")
    return spec, with_constants(
        RepresentationClass(
            rep.psi,
            rep.feature_maps + rotated.feature_maps,
            rep.models + rotated.models,
        )
    )
