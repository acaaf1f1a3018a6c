"""Counter-based random substreams.

Every stochastic draw in a run is a pure function of ``(master seed, stream,
counter, component, client)``.  A Philox generator is keyed by the master seed
and positioned by a 256-bit counter whose upper words hold the remaining
coordinates, so draws never overlap and never depend on call order.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from functools import lru_cache

import numpy as np


class Stream(enum.IntEnum):
    NOISE_F = 0
    NOISE_G = 1
    COIN_LL = 2
    COIN_ML = 3
    NEUMANN_DEPTH = 4
    INIT = 5


class Component(enum.IntEnum):
    """Which oracle output a noise draw perturbs."""

    GRAD_X_F = 0
    GRAD_Y_F = 1
    GRAD_Y_G = 2
    HESS_YY_G = 3
    HESS_XY_G = 4
    SCALAR = 5


# sub-slots inside one outer round, packed into the token counter
class Slot(enum.IntEnum):
    LOWER = 0
    NEUMANN = 1
    MEDIUM = 2
    UPPER = 3


_K_SHIFT = 24
_SLOT_SHIFT = 20
_MAX_INDEX = 1 << _SLOT_SHIFT


def pack_counter(k: int, slot: int, index: int) -> int:
    if not 0 <= index < _MAX_INDEX:
        raise ValueError(f"index {index} out of range for a single round")
    return (k << _K_SHIFT) | (slot << _SLOT_SHIFT) | index


@lru_cache(maxsize=256)
def _philox_key(seed: int) -> tuple[int, int]:
    state = np.random.SeedSequence(seed).generate_state(2, np.uint64)
    return int(state[0]), int(state[1])


@dataclass(frozen=True)
class SampleToken:
    """Names one random draw."""

    stream: Stream
    counter: int
    seed: int = 0

    def rng(self, component: int = 0, client: int = 0) -> np.random.Generator:
        key = np.array(_philox_key(self.seed), dtype=np.uint64)
        counter = np.array(
            [0, client, self.counter, int(self.stream) * 16 + int(component)],
            dtype=np.uint64,
        )
        return np.random.Generator(np.random.Philox(key=key, counter=counter))


class RoundDraws:
    """Token factory for outer round ``k`` of a run seeded by ``seed``.

    Solvers and estimators ask this object for named draws instead of
    threading raw counters around.
    """

    __slots__ = ("seed", "k")

    def __init__(self, seed: int, k: int):
        self.seed = seed
        self.k = k

    def token(self, stream: Stream, slot: int, index: int = 0) -> SampleToken:
        return SampleToken(stream, pack_counter(self.k, slot, index), self.seed)

    def xi(self, slot: int, index: int = 0) -> SampleToken:
        return self.token(Stream.NOISE_F, slot, index)

    def phi(self, slot: int, index: int = 0) -> SampleToken:
        return self.token(Stream.NOISE_G, slot, index)

    def coin(self, stream: Stream, index: int, prob: float) -> bool:
        if prob >= 1.0:
            # counter-addressed draws: skipping this one shifts nothing else
            return True
        u = self.token(stream, 0, index).rng(Component.SCALAR).random()
        return bool(u < prob)

    def depth(self, cap: int) -> int:
        if cap == 1:
            return 0
        tok = self.token(Stream.NEUMANN_DEPTH, 0, 0)
        return int(tok.rng(Component.SCALAR).integers(0, cap))


def init_rng(seed: int) -> np.random.Generator:
    return SampleToken(Stream.INIT, 0, seed).rng(Component.SCALAR)
