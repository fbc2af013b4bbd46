"""Counter-based deterministic random streams.

Every randomness consumer owns an ``RngStream`` identified by a seed plus a
lineage path of child indices. The Philox key is derived by hashing the
lineage, so ``RngStream(7).child(3)`` yields the same draws on every platform
and is statistically independent of ``RngStream(7).child(4)`` and of the
parent. Draw results depend only on (lineage, position, count); they never
depend on how unrelated streams are consumed.

Gaussian draws use the Marsaglia polar method built on the uniform stream.
Two properties the attack engine and the tests rely on:

* sigma=0 returns exact zeros without consuming the stream;
* one block draw of even size n equals n sequential draws (the polar method
  consumes uniforms in aligned pairs and keeps no cross-call buffer).
"""

import hashlib

import numpy as np


class RngStream:
    """One independent random stream addressed by (seed, *path)."""

    def __init__(self, seed, *path):
        self.seed = int(seed)
        self.path = tuple(int(p) for p in path)
        label = ":".join(str(p) for p in (self.seed,) + self.path)
        digest = hashlib.sha256(b"daattack-rng:" + label.encode()).digest()
        key = int.from_bytes(digest[:16], "little")
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def child(self, index):
        """Independent substream; index is typically a dataset position."""
        return RngStream(self.seed, *self.path, index)

    def random(self, shape=None):
        """Uniform f64 in [0, 1)."""
        if shape is None:
            return float(self._gen.random())
        return self._gen.random(shape)

    def uniform(self, lo, hi, shape=None):
        """Uniform f64 in [lo, hi)."""
        if not hi > lo:
            raise ValueError(f"uniform needs hi > lo, got [{lo}, {hi})")
        if shape is None:
            return lo + (hi - lo) * float(self._gen.random())
        return lo + (hi - lo) * self._gen.random(shape)

    def randint(self, lo, hi):
        """Uniform integer in [lo, hi] inclusive."""
        if hi < lo:
            raise ValueError(f"randint needs hi >= lo, got [{lo}, {hi}]")
        return int(self._gen.integers(lo, hi + 1))

    def permutation(self, n):
        return self._gen.permutation(n)

    def normal(self, sigma, shape):
        """Zero-mean Gaussian with scale sigma, Marsaglia polar method.

        sigma=0 short-circuits to exact zeros and leaves the stream position
        untouched.
        """
        if sigma < 0:
            raise ValueError(f"sigma must be >= 0, got {sigma}")
        if np.ndim(shape) == 0:
            shape = (int(shape),)
        n = int(np.prod(shape)) if len(shape) else 1
        if sigma == 0.0:
            return np.zeros(shape)
        out = np.empty(n)
        filled = 0
        while filled < n:
            pairs = (n - filled + 1) // 2
            u = self.uniform(-1.0, 1.0, (pairs, 2))
            s = u[:, 0] ** 2 + u[:, 1] ** 2
            ok = (s > 0.0) & (s < 1.0)
            ua, sa = u[ok], s[ok]
            f = np.sqrt(-2.0 * np.log(sa) / sa)
            z = (ua * f[:, None]).ravel()
            take = min(z.size, n - filled)
            out[filled: filled + take] = z[:take]
            filled += take
        return (sigma * out).reshape(shape)


def sub_seed(master, label):
    """Derive a labeled 63-bit sub-seed from a master seed.

    Used by the harness so that e.g. dataset generation and each model's
    training consume unrelated streams from one experiment seed.
    """
    digest = hashlib.sha256(f"{int(master)}:{label}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1
