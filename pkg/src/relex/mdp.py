"""Finite episodic MDPs and their exact dynamic-programming oracle.

Steps are indexed ``h = 0, ..., H-1`` internally; everything that is
written to disk for humans (CSV episode numbers, reports) is 1-based.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

PROB_ATOL = 1e-9
TIE_ATOL = 1e-9


class ValidationError(ValueError):
    """Raised when an object violates one of its structural invariants."""

    def __init__(self, message, violations=None):
        super().__init__(message)
        self.violations = list(violations or [])


@dataclass(frozen=True)
class Violation:
    kind: str
    index: tuple
    magnitude: float

    def __str__(self):
        return f"{self.kind} at {self.index}: {self.magnitude:.3g}"


@dataclass(eq=False)
class MdpSpec:
    """Tabular time-inhomogeneous episodic MDP.

    ``rewards`` has shape ``(H, S, A)``, ``transitions`` has shape
    ``(H, S, A, S)`` and ``init_dist`` has shape ``(S,)``.
    """

    rewards: np.ndarray
    transitions: np.ndarray
    init_dist: np.ndarray

    def __post_init__(self):
        self.rewards = np.array(self.rewards, dtype=float)
        self.transitions = np.array(self.transitions, dtype=float)
        self.init_dist = np.array(self.init_dist, dtype=float)
        if self.rewards.ndim != 3:
            raise ValueError(f"rewards must be (H, S, A), got shape {self.rewards.shape}")
        H, S, A = self.rewards.shape
        if self.transitions.shape != (H, S, A, S):
            raise ValueError(
                f"transitions must have shape {(H, S, A, S)}, got {self.transitions.shape}"
            )
        if self.init_dist.shape != (S,):
            raise ValueError(f"init_dist must have shape {(S,)}, got {self.init_dist.shape}")
        for arr in (self.rewards, self.transitions, self.init_dist):
            arr.setflags(write=False)

    @property
    def num_states(self) -> int:
        return self.rewards.shape[1]

    @property
    def num_actions(self) -> int:
        return self.rewards.shape[2]

    @property
    def horizon(self) -> int:
        return self.rewards.shape[0]

    @cached_property
    def transition_cdf(self) -> np.ndarray:
        return np.cumsum(self.transitions, axis=-1)

    def __eq__(self, other):
        if not isinstance(other, MdpSpec):
            return NotImplemented
        return (
            np.array_equal(self.rewards, other.rewards)
            and np.array_equal(self.transitions, other.transitions)
            and np.array_equal(self.init_dist, other.init_dist)
        )

    def to_dict(self) -> dict:
        return {
            "num_states": self.num_states,
            "num_actions": self.num_actions,
            "horizon": self.horizon,
            "rewards": self.rewards.tolist(),
            "transitions": self.transitions.tolist(),
            "init_dist": self.init_dist.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "MdpSpec":
        spec = cls(doc["rewards"], doc["transitions"], doc["init_dist"])
        declared = (doc["horizon"], doc["num_states"], doc["num_actions"])
        if declared != spec.rewards.shape:
            raise ValueError(
                f"declared (H, S, A) = {declared} does not match arrays {spec.rewards.shape}"
            )
        return spec

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "MdpSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))


def validate_mdp(spec: MdpSpec) -> list[Violation]:
    """Return every invariant violation of ``spec``; empty when well formed."""
    out = []
    P = spec.transitions
    for idx in zip(*np.nonzero(P < -PROB_ATOL)):
        out.append(Violation("negative_probability", tuple(int(i) for i in idx), float(-P[idx])))
    defect = P.sum(axis=-1) - 1.0
    for idx in zip(*np.nonzero(np.abs(defect) > PROB_ATOL)):
        out.append(Violation("row_sum", tuple(int(i) for i in idx), float(abs(defect[idx]))))
    r = spec.rewards
    bad = (r < 0.0) | (r > 1.0)
    for idx in zip(*np.nonzero(bad)):
        val = float(r[idx])
        out.append(Violation("reward_range", tuple(int(i) for i in idx), val - 1.0 if val > 1 else -val))
    rho = spec.init_dist
    for idx in np.nonzero(rho < -PROB_ATOL)[0]:
        out.append(Violation("negative_init", (int(idx),), float(-rho[idx])))
    if abs(rho.sum() - 1.0) > PROB_ATOL:
        out.append(Violation("init_sum", (), float(abs(rho.sum() - 1.0))))
    return out


def check_mdp(spec: MdpSpec) -> MdpSpec:
    """Raise :class:`ValidationError` unless ``spec`` is well formed."""
    violations = validate_mdp(spec)
    if violations:
        head = "; ".join(str(v) for v in violations[:5])
        raise ValidationError(f"invalid MDP ({len(violations)} violations): {head}", violations)
    return spec


def check_policy(spec: MdpSpec, policy) -> np.ndarray:
    """Coerce ``policy`` to an ``(H, S)`` integer table of valid actions."""
    policy = np.asarray(policy)
    if policy.shape != (spec.horizon, spec.num_states):
        raise ValueError(
            f"policy must have shape {(spec.horizon, spec.num_states)}, got {policy.shape}"
        )
    if not np.issubdtype(policy.dtype, np.integer):
        if not np.all(policy == np.round(policy)):
            raise ValueError("policy entries must be integer action indices")
        policy = policy.astype(np.int64)
    if policy.min() < 0 or policy.max() >= spec.num_actions:
        raise ValueError(f"action index out of range [0, {spec.num_actions})")
    return policy


@dataclass
class OptimalSolution:
    q_star: np.ndarray
    v_star: np.ndarray
    pi_star: np.ndarray
    gaps: np.ndarray
    gap_min: float
    unique_optimal: bool


def solve_optimal(spec: MdpSpec) -> OptimalSolution:
    """Backward induction on the Bellman optimality equation.

    Ties in the argmax go to the lowest action index. ``gap_min`` is the
    smallest gap above ``TIE_ATOL`` (``inf`` if all actions are optimal).
    """
    check_mdp(spec)
    H, S, A = spec.rewards.shape
    q = np.zeros((H, S, A))
    v = np.zeros((H + 1, S))
    for h in range(H - 1, -1, -1):
        q[h] = spec.rewards[h] + spec.transitions[h] @ v[h + 1]
        v[h] = q[h].max(axis=1)
    pi = q.argmax(axis=2)
    gaps = v[:H, :, None] - q
    near_best = gaps <= TIE_ATOL
    unique = bool(np.all(near_best.sum(axis=2) == 1))
    nonzero = gaps[gaps > TIE_ATOL]
    gap_min = float(nonzero.min()) if nonzero.size else float("inf")
    return OptimalSolution(q, v, pi, gaps, gap_min, unique)


def evaluate_policy(spec: MdpSpec, policy):
    """Exact ``(V, Q)`` of a deterministic policy; ``V`` has ``H+1`` rows."""
    policy = check_policy(spec, policy)
    H, S, _ = spec.rewards.shape
    q = np.empty(spec.rewards.shape)
    v = np.zeros((H + 1, S))
    states = np.arange(S)
    for h in range(H - 1, -1, -1):
        q[h] = spec.rewards[h] + spec.transitions[h] @ v[h + 1]
        v[h] = q[h, states, policy[h]]
    return v, q


def policy_value(spec: MdpSpec, policy) -> np.ndarray:
    """Initial-step values ``V^pi_1(s)`` only; the hot path for regret."""
    H, S, _ = spec.rewards.shape
    states = np.arange(S)
    v = np.zeros(S)
    # same arithmetic as solve_optimal, so pi == pi* gives V == V* bitwise
    for h in range(H - 1, -1, -1):
        v = (spec.rewards[h] + spec.transitions[h] @ v)[states, policy[h]]
    return v


def occupancy(spec: MdpSpec, policy) -> np.ndarray:
    """State distribution ``d_h(s)`` at each step under ``policy``, shape (H, S)."""
    policy = check_policy(spec, policy)
    H, S, _ = spec.rewards.shape
    d = np.empty((H, S))
    d[0] = spec.init_dist
    states = np.arange(S)
    for h in range(H - 1):
        d[h + 1] = d[h] @ spec.transitions[h, states, policy[h]]
    return d


@dataclass
class Trajectory:
    """One episode: ``states`` has H+1 entries, the others H."""

    episode: int
    states: list = field(default_factory=list)
    actions: list = field(default_factory=list)
    rewards: list = field(default_factory=list)

    def __len__(self):
        return len(self.actions)

    def steps(self):
        """Yield ``(h, s_h, a_h, r_h, s_{h+1})`` tuples."""
        for h, a in enumerate(self.actions):
            yield h, self.states[h], a, self.rewards[h], self.states[h + 1]

    @property
    def total_reward(self) -> float:
        return float(sum(self.rewards))


def _draw(cdf, u):
    # clamp guards against cdf[-1] landing a hair below 1
    return min(int(np.searchsorted(cdf, u, side="right")), len(cdf) - 1)


def sample_episode(spec: MdpSpec, policy, rng, init_rng=None, episode: int = 0) -> Trajectory:
    """Roll out one episode.

    ``policy`` is either an ``(H, S)`` action table or a callable
    ``policy(h, s) -> a``. The initial state is drawn from ``init_rng``
    (defaults to ``rng``), transitions from ``rng``.
    """
    init_rng = rng if init_rng is None else init_rng
    act = policy if callable(policy) else (lambda h, s, _t=np.asarray(policy): int(_t[h, s]))
    traj = Trajectory(episode)
    s = _draw(np.cumsum(spec.init_dist), init_rng.random())
    traj.states.append(s)
    for h in range(spec.horizon):
        a = act(h, s)
        traj.actions.append(a)
        traj.rewards.append(float(spec.rewards[h, s, a]))
        s = _draw(spec.transition_cdf[h, s, a], rng.random())
        traj.states.append(s)
    return traj


def rollout_batch(spec: MdpSpec, policy, n: int, rng, init_state=None):
    """Vectorised Monte Carlo rollouts of a deterministic policy.

    Returns ``(states, returns)`` with ``states`` of shape ``(n, H+1)``.
    Used by the audits and tests as an oracle independent of the
    backward recursions above.
    """
    policy = check_policy(spec, policy)
    H = spec.horizon
    states = np.empty((n, H + 1), dtype=np.int64)
    if init_state is None:
        cdf = np.cumsum(spec.init_dist)
        states[:, 0] = np.minimum(np.searchsorted(cdf, rng.random(n), side="right"), spec.num_states - 1)
    else:
        states[:, 0] = init_state
    returns = np.zeros(n)
    for h in range(H):
        s = states[:, h]
        a = policy[h, s]
        returns += spec.rewards[h, s, a]
        cdf = spec.transition_cdf[h, s, a]
        nxt = (cdf <= rng.random(n)[:, None]).sum(axis=1)
        states[:, h + 1] = np.minimum(nxt, spec.num_states - 1)
    return states, returns
