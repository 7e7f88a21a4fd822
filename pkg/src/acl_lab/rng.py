"""Counter-based, splittable random streams.

Every stochastic draw in the package comes from a Philox4x64-10 generator
(``numpy.random.Philox``). A stream is addressed by a root seed plus a path of
non-negative integers, e.g. ``stream(seed, EPOCH, epoch, item, view)``. The
path is folded into the second Philox key word with SplitMix64 finalization,
the first key word is the root seed, and the counter starts at zero. Streams
are therefore independent of evaluation order: item 17's second view draws the
same numbers whether it is produced serially or on a worker.
"""

import numpy as np

MASK64 = (1 << 64) - 1

# stream domains, first element of a path
DATASET = 1
INIT = 2
SHUFFLE = 3
AUGMENT = 4
PROBE = 5
SPLIT = 6
BACKGROUND = 7


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK64
    return x ^ (x >> 31)


def fold_path(path) -> int:
    h = 0x2545F4914F6CDD1D
    for p in path:
        p = int(p)
        if p < 0:
            raise ValueError("stream path elements must be non-negative")
        h = splitmix64(h ^ (p & MASK64))
    return h


def stream(seed: int, *path: int) -> np.random.Generator:
    """Independent generator for ``(seed, *path)``."""
    seed = int(seed)
    if not 0 <= seed <= MASK64:
        raise ValueError(f"seed must fit in an unsigned 64-bit word, got {seed}")
    key = np.array([seed, fold_path(path)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


# Vectorized Philox4x32-10 for hot paths. Each 128-bit counter
# (item, view, epoch, block) maps to four 32-bit words under a 64-bit key, so a
# whole batch of per-item draws is computed at once and any single item can be
# regenerated on its own.

_M0 = np.uint64(0xD2511F53)
_M1 = np.uint64(0xCD9E8D57)
_W0 = 0x9E3779B9
_W1 = 0xBB67AE85
_LO32 = np.uint64(0xFFFFFFFF)
_SH32 = np.uint64(32)


def philox4x32(counters, key) -> np.ndarray:
    """Philox4x32-10 block function.

    counters: (n, 4) array of 32-bit words; key: two 32-bit words.
    Returns an (n, 4) uint64 array holding 32-bit outputs.
    """
    c = np.asarray(counters, dtype=np.uint64) & _LO32
    c0, c1, c2, c3 = (c[:, i].copy() for i in range(4))
    k0, k1 = int(key[0]) & 0xFFFFFFFF, int(key[1]) & 0xFFFFFFFF
    for r in range(10):
        if r:
            k0 = (k0 + _W0) & 0xFFFFFFFF
            k1 = (k1 + _W1) & 0xFFFFFFFF
        p0 = _M0 * c0
        p1 = _M1 * c2
        hi0, lo0 = p0 >> _SH32, p0 & _LO32
        hi1, lo1 = p1 >> _SH32, p1 & _LO32
        c0 = hi1 ^ c1 ^ np.uint64(k0)
        c1 = lo1
        c2 = hi0 ^ c3 ^ np.uint64(k1)
        c3 = lo0
    return np.stack([c0, c1, c2, c3], axis=1)


def counter_key(seed: int, domain: int):
    h = splitmix64(splitmix64(int(seed) & MASK64) ^ int(domain))
    return h & 0xFFFFFFFF, h >> 32


def counter_uniforms(seed, domain, items, view, epoch, count) -> np.ndarray:
    """``count`` doubles in (0, 1] for every item, shape (len(items), count).

    Row r depends only on (seed, domain, items[r], view, epoch).
    """
    items = np.asarray(items, dtype=np.uint64).reshape(-1)
    n_blocks = (count + 1) // 2
    n = items.shape[0]
    ctr = np.empty((n * n_blocks, 4), dtype=np.uint64)
    ctr[:, 0] = np.repeat(items, n_blocks)
    ctr[:, 1] = view
    ctr[:, 2] = epoch
    ctr[:, 3] = np.tile(np.arange(n_blocks, dtype=np.uint64), n)
    w = philox4x32(ctr, counter_key(seed, domain))
    # two 53-bit doubles per block, shifted off zero so log() is safe
    hi = np.stack([w[:, 0] >> np.uint64(5), w[:, 2] >> np.uint64(5)], axis=1)
    lo = np.stack([w[:, 1] >> np.uint64(6), w[:, 3] >> np.uint64(6)], axis=1)
    bits = hi * np.uint64(1 << 26) + lo
    u = (bits.astype(np.float64) + 1.0) / 9007199254740992.0
    return u.reshape(n, n_blocks * 2)[:, :count]


def box_muller(u1, u2) -> np.ndarray:
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)
