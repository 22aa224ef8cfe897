"""Deterministic splitmix64 PRNG with vectorized uniform/gaussian fills.

Every random draw in the library flows through this generator so that runs
are bit-reproducible across machines and across scalar/vector call mixes.
A generator is a counter over the splitmix64 output sequence: draw i equals
mix(seed + (i+1)*GAMMA), which lets us fill whole arrays with numpy uint64
arithmetic while staying consistent with one-at-a-time draws.
"""

import math

import numpy as np

_GAMMA = 0x9E3779B97F4A7C15
_MASK = 0xFFFFFFFFFFFFFFFF
_INV_2_53 = 1.0 / (1 << 53)


def _mix(z):
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def splitmix64(x):
    """One splitmix64 step of seed x: the value a fresh SplitMix64(x) draws first."""
    return _mix((x + _GAMMA) & _MASK)


class SplitMix64:
    """Counter-based splitmix64 stream."""

    def __init__(self, seed):
        self.seed = seed & _MASK
        self.counter = 0

    def next_u64(self):
        self.counter += 1
        return _mix((self.seed + self.counter * _GAMMA) & _MASK)

    def fill_u64(self, n):
        """Draw n u64 values, advancing the stream exactly n positions."""
        idx = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            z = np.uint64(self.seed) + idx * np.uint64(_GAMMA)
            z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
            z = z ^ (z >> np.uint64(31))
        return z

    def uniform(self):
        """One double in [0, 1)."""
        return (self.next_u64() >> 11) * _INV_2_53

    def uniforms(self, n):
        """Array of n doubles in [0, 1)."""
        return ((self.fill_u64(n) >> np.uint64(11)).astype(np.float64)) * _INV_2_53

    def randint(self, bound):
        """One integer in [0, bound) via modular reduction."""
        return self.next_u64() % bound

    def gauss(self):
        """One standard normal draw (consumes two stream positions)."""
        return float(self.gaussians(1)[0])

    def gaussians(self, n, dtype=np.float64):
        """Array of n standard normals via Box-Muller.

        Always consumes 2*ceil(n/2) stream positions so the stream advance
        depends only on n, never on the drawn values.
        """
        m = (n + 1) // 2
        u1 = ((self.fill_u64(m) >> np.uint64(11)).astype(np.float64) + 1.0) * _INV_2_53
        u2 = ((self.fill_u64(m) >> np.uint64(11)).astype(np.float64)) * _INV_2_53
        r = np.sqrt(-2.0 * np.log(u1))
        theta = (2.0 * math.pi) * u2
        out = np.empty(2 * m, dtype=np.float64)
        out[0::2] = r * np.cos(theta)
        out[1::2] = r * np.sin(theta)
        return out[:n].astype(dtype)

    def gaussian_array(self, shape, dtype=np.float32):
        size = int(np.prod(shape)) if shape else 1
        return self.gaussians(size, dtype=dtype).reshape(shape)
