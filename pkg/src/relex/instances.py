"""Named hand-built instances."""

import numpy as np

from .mdp import MdpSpec


def m1() -> MdpSpec:
    """Two states, two actions, horizon two.

    From ``s0`` action 0 stays with reward 1 and action 1 moves to the
    absorbing zero-reward ``s1``. Starts in ``s0``.
    """
    H, S, A = 2, 2, 2
    rewards = np.zeros((H, S, A))
    rewards[:, 0, 0] = 1.0
    transitions = np.zeros((H, S, A, S))
    transitions[:, 0, 0, 0] = 1.0
    transitions[:, 0, 1, 1] = 1.0
    transitions[:, 1, :, 1] = 1.0
    return MdpSpec(rewards, transitions, [1.0, 0.0])


def random_mdp(rng, num_states, num_actions, horizon, init=None) -> MdpSpec:
    """Dense random kernel, uniform rewards, Dirichlet initial law."""
    transitions = rng.dirichlet(np.ones(num_states), size=(horizon, num_states, num_actions))
    rewards = rng.random((horizon, num_states, num_actions))
    if init is None:
        init = rng.dirichlet(np.ones(num_states))
    return MdpSpec(rewards, transitions, init)


NAMED = {"m1": m1}
