"""Named random streams derived from one integer seed.

Each consumer draws from its own stream, so adding an audit that needs
randomness never shifts the draws seen by the environment.
"""

import zlib

import numpy as np

STREAM_NAMES = ("init_state", "transition", "generator", "policy")


def stream_seed(seed, name) -> np.random.SeedSequence:
    return np.random.SeedSequence(int(seed), spawn_key=(zlib.crc32(name.encode()),))


class Streams:
    def __init__(self, seed=0):
        self.seed = 0 if seed is None else int(seed)
        self._gens = {}

    def get(self, name) -> np.random.Generator:
        if name not in self._gens:
            self._gens[name] = np.random.Generator(np.random.PCG64(stream_seed(self.seed, name)))
        return self._gens[name]

    def state(self):
        return {name: gen.bit_generator.state for name, gen in self._gens.items()}

    def set_state(self, doc):
        for name, st in doc.items():
            self.get(name).bit_generator.state = st
