"""Optimistic representation-selecting learner and its single-map baseline.

Each feature map keeps its own ridge regression of the next-state target
``K_psi^{-1} psi(s')`` on ``phi(s, a)``. At planning time every map
produces an optimistic Q table and the learner takes the elementwise
minimum, i.e. the tightest upper confidence bound available for each pair.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .mdp import MdpSpec, check_mdp, sample_episode
from .representation import RepresentationClass, with_constants
from .seeding import Streams


@dataclass
class RepState:
    """Ridge statistics for one feature map, stacked over steps.

    Shapes: ``cov`` and ``cov_inv`` are ``(H, d, d)``, ``cross`` and
    ``estimate`` are ``(H, d, d')``, ``count`` is ``(H,)``.
    """

    cov: np.ndarray
    cov_inv: np.ndarray
    cross: np.ndarray
    estimate: np.ndarray
    count: np.ndarray

    @classmethod
    def empty(cls, horizon, dim, psi_dim):
        eye = np.broadcast_to(np.eye(dim), (horizon, dim, dim))
        return cls(
            eye.copy(),
            eye.copy(),
            np.zeros((horizon, dim, psi_dim)),
            np.zeros((horizon, dim, psi_dim)),
            np.zeros(horizon, dtype=np.int64),
        )

    def update(self, x, y):
        """Add one sample per step: ``x`` is ``(H, d)``, ``y`` is ``(H, d')``."""
        self.cov += x[:, :, None] * x[:, None, :]
        self.cross += x[:, :, None] * y[:, None, :]
        # Sherman-Morrison on every step at once
        ux = np.einsum("hij,hj->hi", self.cov_inv, x)
        denom = 1.0 + np.einsum("hi,hi->h", x, ux)
        self.cov_inv -= ux[:, :, None] * ux[:, None, :] / denom[:, None, None]
        self.estimate = self.cov_inv @ self.cross
        self.count += 1

    def to_dict(self):
        return {k: getattr(self, k).tolist() for k in ("cov", "cov_inv", "cross", "estimate", "count")}

    @classmethod
    def from_dict(cls, doc):
        return cls(
            np.array(doc["cov"], dtype=float),
            np.array(doc["cov_inv"], dtype=float),
            np.array(doc["cross"], dtype=float),
            np.array(doc["estimate"], dtype=float),
            np.array(doc["count"], dtype=np.int64),
        )

    def __eq__(self, other):
        if not isinstance(other, RepState):
            return NotImplemented
        return all(
            np.array_equal(getattr(self, k), getattr(other, k))
            for k in ("cov", "cov_inv", "cross", "estimate", "count")
        )


def init_state(rep: RepresentationClass, horizon=None):
    horizon = rep.horizon if horizon is None else horizon
    return [RepState.empty(horizon, phi.dim, rep.psi.dim) for phi in rep.feature_maps]


def update_regression(states, rep: RepresentationClass, trajectory):
    """Fold one trajectory into every map's statistics (in place)."""
    H = len(trajectory.actions)
    if any(st.cov.shape[0] != H for st in states):
        raise ValueError(f"trajectory has {H} steps, learner state has {states[0].cov.shape[0]}")
    s = np.asarray(trajectory.states[:-1])
    a = np.asarray(trajectory.actions)
    y = rep.psi.targets[np.asarray(trajectory.states[1:])]
    for st, phi in zip(states, rep.feature_maps):
        st.update(phi.table[s, a], y)
    return states


@dataclass
class BetaSchedule:
    """Confidence widths ``c (C_M + C'_psi^2) d log(k H C_phi |Phi| / delta)``.

    The log argument is clamped below at ``e`` so the width stays positive
    for tiny constants.
    """

    c: float
    delta: float
    c_m: np.ndarray
    c_phi: np.ndarray
    dims: np.ndarray
    c_psi_prime: float
    num_maps: int
    horizon: int

    def __post_init__(self):
        if not self.c > 0:
            raise ValueError(f"c must be positive, got {self.c}")
        if not 0 < self.delta < 1:
            raise ValueError(f"delta must lie in (0, 1), got {self.delta}")
        self.c_m = np.asarray(self.c_m, dtype=float)
        self.c_phi = np.asarray(self.c_phi, dtype=float)
        self.dims = np.asarray(self.dims, dtype=float)
        self._scale = self.c * (self.c_m + self.c_psi_prime**2) * self.dims
        self._log_base = self.horizon * self.c_phi * self.num_maps / self.delta

    @classmethod
    def from_class(cls, rep: RepresentationClass, c=0.5, delta=0.1, horizon=None):
        if rep.constants is None:
            with_constants(rep)
        k = rep.constants
        return cls(
            c, delta, k.c_m, k.c_phi, [phi.dim for phi in rep.feature_maps],
            k.c_psi_prime, len(rep), rep.horizon if horizon is None else horizon,
        )

    def values(self, k) -> np.ndarray:
        """``beta_{k, phi}`` for every map."""
        if k < 1:
            raise ValueError(f"episode index must be >= 1, got {k}")
        return self._scale * np.log(np.maximum(k * self._log_base, math.e))

    def __call__(self, k, i):
        return float(self.values(k)[i])


def beta(schedule: BetaSchedule, k, i):
    return schedule(k, i)


def bonus(phi_vec, cov_inv, beta_value, c_psi, horizon):
    """Confidence radius ``C_psi H sqrt(beta phi^T U^{-1} phi)``."""
    phi_vec = np.asarray(phi_vec, dtype=float)
    quad = float(phi_vec @ np.asarray(cov_inv) @ phi_vec)
    if quad < -1e-10:
        raise ValueError(f"negative quadratic form {quad:.3g}; covariance inverse is broken")
    return c_psi * horizon * math.sqrt(beta_value * max(quad, 0.0))


@dataclass
class EpisodePlan:
    """Optimistic tables for one episode.

    ``q``, ``chosen`` and ``bonus_min`` are ``(H, S, A)``; ``v`` is
    ``(H+1, S)`` with a zero terminal row; ``policy`` is ``(H, S)``.
    ``q_maps`` keeps the per-map tables, shape ``(|Phi|, H, S, A)``.
    """

    episode: int
    q: np.ndarray
    v: np.ndarray
    policy: np.ndarray
    chosen: np.ndarray
    bonus_min: np.ndarray
    q_maps: np.ndarray

    def act(self, h, s):
        return int(self.policy[h, s])


def q_backward_pass(states, spec: MdpSpec, rep: RepresentationClass, schedule: BetaSchedule, k,
                    estimates=None) -> EpisodePlan:
    """Optimistic backward induction with a min over feature maps.

    ``estimates`` optionally overrides each map's ``M`` (one ``(H, d, d')``
    array per map); the oracle tests substitute the true matrices.
    """
    H, S, A = spec.rewards.shape
    n_maps = len(rep)
    betas = schedule.values(k)
    c_psi = rep.constants.c_psi
    gammas = np.empty((n_maps, H, S * A))
    # predicted next-state features phi^T M_h, one (H, SA, d') block per map
    preds = np.empty((n_maps, H, S * A, rep.psi.dim))
    for i, (st, phi) in enumerate(zip(states, rep.feature_maps)):
        F = phi.stacked
        quad = ((F @ st.cov_inv) * F).sum(axis=2)
        if quad.min(initial=0.0) < -1e-10:
            raise ValueError(f"negative quadratic form in map {phi.name!r}")
        gammas[i] = c_psi * H * np.sqrt(betas[i] * np.maximum(quad, 0.0))
        preds[i] = F @ (st.estimate if estimates is None else np.asarray(estimates[i]))
    q_maps = np.empty((n_maps, H, S * A))
    v = np.zeros((H + 1, S))
    psi_T = rep.psi.table.T
    for h in range(H - 1, -1, -1):
        # Psi^T v_{h+1} is shared by every map
        w = psi_T @ v[h + 1]
        q_maps[:, h] = spec.rewards[h].reshape(-1) + preds[:, h] @ w + gammas[:, h]
        q_h = q_maps[:, h].min(axis=0).reshape(S, A)
        v[h] = np.minimum(q_h.max(axis=1), H)
    chosen = q_maps.argmin(axis=0)
    q = np.take_along_axis(q_maps, chosen[None], axis=0)[0].reshape(H, S, A)
    return EpisodePlan(
        k,
        q,
        v,
        q.argmax(axis=2),
        chosen.reshape(H, S, A),
        gammas.min(axis=0).reshape(H, S, A),
        q_maps.reshape(n_maps, H, S, A),
    )


class ReLEX(BaseEstimator):
    """Online learner that keeps one ridge model per feature map.

    ``fit(spec, rep)`` interacts with ``spec`` for ``n_episodes`` episodes;
    the lower-level ``plan`` / ``partial_fit`` pair lets a driver run the
    loop itself (the experiment harness does this to account regret).

    Parameters
    ----------
    c : float
        Scale of the confidence width.
    delta : float
        Confidence level in (0, 1).
    n_episodes : int
        Episodes played by ``fit``.
    random_state : int or None
        Seed for the environment streams used by ``fit``.
    maps : list of int or None
        Restrict the class to these feature maps; ``None`` keeps all.
    """

    def __init__(self, c=0.5, delta=0.1, n_episodes=1000, random_state=None, maps=None):
        self.c = c
        self.delta = delta
        self.n_episodes = n_episodes
        self.random_state = random_state
        self.maps = maps

    def start(self, spec: MdpSpec, rep: RepresentationClass):
        """Reset the statistics; episode counter goes back to 1."""
        check_mdp(spec)
        if rep.psi.num_states != spec.num_states or rep.horizon != spec.horizon:
            raise ValueError("representation class does not match the MDP's states or horizon")
        self.spec_ = spec
        self.rep_ = rep if self.maps is None else rep.subset(self.maps)
        self.schedule_ = BetaSchedule.from_class(self.rep_, self.c, self.delta)
        self.states_ = init_state(self.rep_)
        self.episode_ = 1
        self.plan_ = None
        return self

    def plan(self, estimates=None) -> EpisodePlan:
        self._check_started()
        self.plan_ = q_backward_pass(
            self.states_, self.spec_, self.rep_, self.schedule_, self.episode_, estimates
        )
        return self.plan_

    def partial_fit(self, trajectory):
        """Absorb one episode and advance the episode counter."""
        self._check_started()
        update_regression(self.states_, self.rep_, trajectory)
        self.episode_ += 1
        return self

    def fit(self, spec, rep):
        self.start(spec, rep)
        streams = Streams(self.random_state)
        init_rng, rng = streams.get("init_state"), streams.get("transition")
        for k in range(1, self.n_episodes + 1):
            plan = self.plan()
            traj = sample_episode(spec, plan.policy, rng, init_rng, episode=k)
            self.partial_fit(traj)
        self.plan()
        return self

    def predict(self, X):
        """Greedy actions for rows ``(h, s)`` under the latest plan."""
        if getattr(self, "plan_", None) is None:
            raise NotFittedError("call fit or plan before predict")
        X = np.asarray(X, dtype=np.int64).reshape(-1, 2)
        return self.plan_.policy[X[:, 0], X[:, 1]]

    def snapshot(self):
        self._check_started()
        return {"episode": self.episode_, "states": [st.to_dict() for st in self.states_]}

    def restore(self, doc):
        self._check_started()
        self.episode_ = int(doc["episode"])
        self.states_ = [RepState.from_dict(d) for d in doc["states"]]
        self.plan_ = None
        return self

    def _check_started(self):
        if not hasattr(self, "states_"):
            raise NotFittedError("call start or fit first")


class SingleRepresentation(ReLEX):
    """Baseline restricted to one feature map, so ``|Phi| = 1`` inside beta."""

    def __init__(self, map_index=0, c=0.5, delta=0.1, n_episodes=1000, random_state=None):
        self.map_index = map_index
        super().__init__(c=c, delta=delta, n_episodes=n_episodes, random_state=random_state,
                         maps=[map_index])
