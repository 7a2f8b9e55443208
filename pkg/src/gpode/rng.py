"""Named random-number substreams.

One run owns one root seed, split into independent substreams so that
structural choices (say, turning on shooting variables, which draw more
state noise) never perturb the path draws of another stream.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SUBSTREAMS = ("path", "states", "init")


@dataclass
class RngStreams:
    path: np.random.Generator
    states: np.random.Generator
    init: np.random.Generator


def make_streams(seed):
    """Three independent generators derived from one 64-bit seed."""
    children = np.random.SeedSequence(int(seed)).spawn(len(SUBSTREAMS))
    gens = [np.random.Generator(np.random.PCG64(c)) for c in children]
    return RngStreams(*gens)


def as_streams(rng):
    """Accept either an RngStreams or a single generator shared by all roles."""
    if isinstance(rng, RngStreams):
        return rng
    return RngStreams(path=rng, states=rng, init=rng)


def get_state(streams):
    return {
        name: getattr(streams, name).bit_generator.state for name in SUBSTREAMS
    }


def set_state(streams, state):
    for name in SUBSTREAMS:
        getattr(streams, name).bit_generator.state = state[name]
