"""Counter-based random streams.

Every batch draw is cut into fixed blocks of ``BLOCK`` paths.  Block ``b`` of
purpose ``tag`` reads a Philox stream keyed by ``(seed, tag)`` whose counter
starts at ``b << 192``; full blocks are always drawn, so path ``k`` sees the
same numbers whatever the batch size or worker layout.
"""
import numpy as np

BLOCK = 1024

TAG_BROWNIAN = 1
TAG_CHAIN = 2
TAG_SINGLE = 3

_MASK64 = (1 << 64) - 1


def block_rng(seed, tag, block):
    key = (int(seed) & _MASK64) | (int(tag) << 64)
    return np.random.Generator(np.random.Philox(key=key, counter=int(block) << 192))


def path_blocks(M, first=0):
    """Yield ``(block_index, start, stop)`` covering ``M`` paths from path ``first``.

    ``first`` must be a multiple of ``BLOCK``; ``start``/``stop`` are local to the slice.
    """
    if first % BLOCK:
        raise ValueError(f"first path {first} is not a multiple of {BLOCK}")
    b0 = first // BLOCK
    for b in range((M + BLOCK - 1) // BLOCK):
        yield b0 + b, b * BLOCK, min(M, (b + 1) * BLOCK)


def normal_increments(seed, M, N, dt, tag=TAG_BROWNIAN, first=0):
    """``(M, N)`` array of independent ``N(0, dt)`` draws for paths ``first .. first+M-1``."""
    out = np.empty((M, N))
    scale = np.sqrt(dt)
    for b, lo, hi in path_blocks(M, first):
        z = block_rng(seed, tag, b).standard_normal((BLOCK, N))
        out[lo:hi] = z[: hi - lo] * scale
    return out


def as_generator(rng):
    """Accept a seed or an existing :class:`numpy.random.Generator`."""
    if isinstance(rng, np.random.Generator):
        return rng
    return block_rng(0 if rng is None else rng, TAG_SINGLE, 0)
