"""Counter-based random numbers for the Monte Carlo kernels.

Each replica owns a 64-bit key derived from (seed, replica index); draw k of
that replica is ``mix(key + k·GOLDEN)``, the SplitMix64 output function applied
to a Weyl sequence. A replica's stream therefore depends only on (seed, index),
so any partition of replicas across workers reproduces the serial run bit for
bit. State is a length-2 uint64 array ``[key, counter]``.
"""

import math

import numpy as np

from ._accel import njit

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)
_ONE = np.uint64(1)
_INV53 = 1.0 / 9007199254740992.0
TWO_PI = 2.0 * math.pi


@njit
def mix64(z):
    z = (z ^ (z >> _S30)) * _M1
    z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


@njit
def replica_key(seed, replica):
    return mix64(mix64(np.uint64(seed) + GOLDEN) ^ mix64(np.uint64(replica) * GOLDEN + _ONE))


@njit
def new_state(seed, replica):
    st = np.zeros(2, dtype=np.uint64)
    st[0] = replica_key(seed, replica)
    return st


@njit
def next_u64(st):
    st[1] += _ONE
    return mix64(st[0] + st[1] * GOLDEN)


@njit
def uniform(st):
    """Uniform on (0, 1]; never returns 0 so logs are safe."""
    return (float(next_u64(st) >> _S11) + 1.0) * _INV53


@njit
def exponential(st):
    return -math.log(uniform(st))


@njit
def normal(st):
    return math.sqrt(-2.0 * math.log(uniform(st))) * math.cos(TWO_PI * uniform(st))


@njit
def normal_pair(st):
    """Two independent standard normals (Marsaglia polar method)."""
    while True:
        a = 2.0 * uniform(st) - 1.0
        b = 2.0 * uniform(st) - 1.0
        q = a * a + b * b
        if 0.0 < q < 1.0:
            f = math.sqrt(-2.0 * math.log(q) / q)
            return a * f, b * f


@njit
def randint(st, n):
    """Uniform integer in [0, n)."""
    return int(uniform(st) * n) % n


def seed_key(seed: int) -> int:
    """Validate a user seed as unsigned 64-bit."""
    seed = int(seed)
    if not 0 <= seed < 1 << 64:
        raise ValueError("seed must be an unsigned 64-bit integer")
    return seed
