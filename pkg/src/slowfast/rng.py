"""Counter-based Gaussian noise.

Every Gaussian draw is a pure function of ``(master_seed, stream, step, mode,
block)``.  The generator is Threefry-2x32 with 20 rounds; a stream key is
derived from the master seed by hashing ``(sample_index, tag)`` through the
same block cipher.  Nothing here holds state, so draws are independent of
thread scheduling and of the order in which samples are processed.
"""
from __future__ import annotations

from dataclasses import dataclass

import numba as nb
import numpy as np

W1 = 1
W2 = 2
INIT = 3

_TAGS = {"W1": W1, "W2": W2, "INIT": INIT}

_PARITY = np.uint32(0x1BD11BDA)
_MASK32 = 0xFFFFFFFF


@nb.njit(inline="always", cache=True)
def _rotl(x, r):
    return ((x << np.uint32(r)) | (x >> np.uint32(32 - r))) & np.uint32(0xFFFFFFFF)


@nb.njit(inline="always", cache=True)
def _mix4(x0, x1, r0, r1, r2, r3):
    x0 = np.uint32(x0 + x1)
    x1 = _rotl(x1, r0) ^ x0
    x0 = np.uint32(x0 + x1)
    x1 = _rotl(x1, r1) ^ x0
    x0 = np.uint32(x0 + x1)
    x1 = _rotl(x1, r2) ^ x0
    x0 = np.uint32(x0 + x1)
    x1 = _rotl(x1, r3) ^ x0
    return x0, x1


@nb.njit(cache=True)
def threefry2x32(k0, k1, c0, c1):
    """Threefry-2x32-20 block function on uint32 words."""
    k0 = np.uint32(k0)
    k1 = np.uint32(k1)
    k2 = np.uint32(np.uint32(0x1BD11BDA) ^ k0 ^ k1)
    x0 = np.uint32(np.uint32(c0) + k0)
    x1 = np.uint32(np.uint32(c1) + k1)
    x0, x1 = _mix4(x0, x1, 13, 15, 26, 6)
    x0 = np.uint32(x0 + k1)
    x1 = np.uint32(x1 + k2 + np.uint32(1))
    x0, x1 = _mix4(x0, x1, 17, 29, 16, 24)
    x0 = np.uint32(x0 + k2)
    x1 = np.uint32(x1 + k0 + np.uint32(2))
    x0, x1 = _mix4(x0, x1, 13, 15, 26, 6)
    x0 = np.uint32(x0 + k0)
    x1 = np.uint32(x1 + k1 + np.uint32(3))
    x0, x1 = _mix4(x0, x1, 17, 29, 16, 24)
    x0 = np.uint32(x0 + k1)
    x1 = np.uint32(x1 + k2 + np.uint32(4))
    x0, x1 = _mix4(x0, x1, 13, 15, 26, 6)
    x0 = np.uint32(x0 + k2)
    x1 = np.uint32(x1 + k0 + np.uint32(5))
    return x0, x1


@nb.njit(cache=True)
def normal_pair(k0, k1, step, lane):
    """Two independent N(0,1) draws for counter ``(step, lane)`` (Box-Muller)."""
    u0, u1 = threefry2x32(k0, k1, np.uint32(step & 0xFFFFFFFF), np.uint32(lane & 0xFFFFFFFF))
    a = (np.float64(u0) + 0.5) * 2.3283064365386963e-10
    b = (np.float64(u1) + 0.5) * 2.3283064365386963e-10
    r = np.sqrt(-2.0 * np.log(a))
    t = 6.283185307179586 * b
    return r * np.cos(t), r * np.sin(t)


@nb.njit(inline="always", cache=True)
def lane(mode, block):
    # 16 blocks per mode; mode indices stay below 2**27
    return mode * 16 + block


@nb.njit(cache=True)
def _fill_normals(k0, k1, steps, mode, block, out):
    for i in range(steps.shape[0]):
        z0, z1 = normal_pair(k0, k1, steps[i], lane(mode, block))
        out[i, 0] = z0
        out[i, 1] = z1


def split_seed(master_seed: int) -> tuple[int, int]:
    s = int(master_seed) & 0xFFFFFFFFFFFFFFFF
    return s & _MASK32, s >> 32


def stream_key(master_seed: int, sample_index: int, tag: int, replica: int = 0) -> tuple[int, int]:
    """Derive the two-word cipher key of one noise stream."""
    k0, k1 = split_seed(master_seed)
    c1 = ((int(replica) & 0x3FFFFFF) << 4) | (int(tag) & 0xF)
    x0, x1 = threefry2x32(np.uint32(k0), np.uint32(k1),
                          np.uint32(int(sample_index) & _MASK32), np.uint32(c1))
    return int(x0), int(x1)


def stream_keys(master_seed: int, samples, tag: int, replica: int = 0) -> np.ndarray:
    """Keys for a batch of sample indices, shape ``(n, 2)`` uint32."""
    samples = np.atleast_1d(np.asarray(samples, dtype=np.int64))
    out = np.empty((samples.size, 2), dtype=np.uint32)
    for i, s in enumerate(samples):
        out[i] = stream_key(master_seed, int(s), tag, replica)
    return out


@dataclass(frozen=True)
class NoiseStream:
    """Identity of one independent Gaussian stream.

    ``tag`` is the equation tag (``"W1"`` for the slow noise, ``"W2"`` for the
    fast noise).  Two streams that differ in any field are independent.
    """

    master_seed: int
    sample_index: int = 0
    tag: str = "W1"
    replica: int = 0

    def __post_init__(self):
        if self.tag not in _TAGS:
            raise ValueError(f"unknown stream tag {self.tag!r}")
        if not 0 <= int(self.master_seed) < 2**64:
            raise ValueError("master_seed must fit in 64 bits")

    @property
    def key(self) -> tuple[int, int]:
        return stream_key(self.master_seed, self.sample_index, _TAGS[self.tag], self.replica)

    def normals(self, steps, mode: int, block: int = 0) -> np.ndarray:
        """Draws for the given step indices of one mode, shape ``(len(steps), 2)``."""
        steps = np.atleast_1d(np.asarray(steps, dtype=np.int64))
        out = np.empty((steps.size, 2))
        k0, k1 = self.key
        _fill_normals(np.uint32(k0), np.uint32(k1), steps, mode, block, out)
        return out

    def with_sample(self, sample_index: int) -> "NoiseStream":
        return NoiseStream(self.master_seed, sample_index, self.tag, self.replica)


def tag_code(tag: str) -> int:
    return _TAGS[tag]
