"""Counter-based random streams.

Every draw site derives its own Philox key from ``(seed, stream)``, so the
values a client sees never depend on how many draws other clients made or on
the order threads happen to run in.
"""

from __future__ import annotations

import hashlib

import numpy as np

ALGORITHM = "philox4x64-10"


def _stream_word(part) -> int:
    if isinstance(part, (bool, np.bool_)):
        raise TypeError("stream components must be int or str")
    if isinstance(part, (int, np.integer)):
        if part < 0:
            raise ValueError(f"stream components must be non-negative, got {part}")
        return int(part)
    if isinstance(part, str):
        digest = hashlib.blake2b(part.encode("utf-8"), digest_size=8).digest()
        return int.from_bytes(digest, "little")
    raise TypeError(f"unsupported stream component {part!r}")


class Rng:
    """A named, splittable random stream.

    >>> a = Rng(7).child("client", 2)
    >>> b = Rng(7, ("client", 2))
    >>> bool(a.normal(size=3).tolist() == b.normal(size=3).tolist())
    True
    """

    algorithm = ALGORITHM

    def __init__(self, seed: int, stream: tuple = ()):
        if not 0 <= int(seed) < 2**64:
            raise ValueError("seed must fit in 64 unsigned bits")
        self.seed = int(seed)
        self.stream = tuple(stream)
        words = [_stream_word(p) for p in self.stream]
        seq = np.random.SeedSequence(entropy=self.seed, spawn_key=words)
        key = seq.generate_state(2, dtype=np.uint64)
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def child(self, *parts) -> "Rng":
        """Independent stream addressed by ``parts`` under this one."""
        return Rng(self.seed, self.stream + tuple(parts))

    def __repr__(self):
        return f"Rng(seed={self.seed}, stream={self.stream!r})"

    # thin wrappers, all float64
    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n):
        return self._gen.permutation(n)

    def dirichlet(self, alpha, size=None):
        return self._gen.dirichlet(alpha, size)

    def choice(self, a, size=None, replace=True):
        return self._gen.choice(a, size=size, replace=replace)
