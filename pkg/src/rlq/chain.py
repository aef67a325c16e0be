"""Regime chain: path sampling and occupation probabilities."""
from dataclasses import dataclass

import numpy as np

from .grid import TimeGrid
from .problem import Generator
from .streams import BLOCK, TAG_CHAIN, as_generator, block_rng, path_blocks


@dataclass(frozen=True)
class RegimePath:
    """Piecewise-constant regime path on ``[0, T]`` (zero-based states)."""

    jump_times: np.ndarray
    states: np.ndarray
    T: float

    def at(self, t):
        """Regime in force at ``t`` (right-continuous)."""
        idx = np.searchsorted(self.jump_times, t, side="right")
        return self.states[idx]

    def on_grid(self, grid):
        return self.at(grid.nodes)

    def to_rows(self):
        """(time, regime) rows, one per piece, regimes one-based."""
        times = np.concatenate([[0.0], self.jump_times])
        return [(float(t), int(s) + 1) for t, s in zip(times, self.states)]


def _as_rates(generator):
    return generator.rates if isinstance(generator, Generator) else np.asarray(generator, dtype=float)


def _jump_tables(q):
    exit_rate = -np.diag(q).copy()
    probs = np.where(np.eye(len(q), dtype=bool), 0.0, q)
    with np.errstate(invalid="ignore", divide="ignore"):
        probs = np.where(exit_rate[:, None] > 0, probs / exit_rate[:, None], 0.0)
    return exit_rate, np.cumsum(probs, axis=1)


def sample_regime_path(generator, i0, T, rng=None):
    """One path by the embedded-chain construction: exponential holding times, then a jump."""
    q = _as_rates(generator)
    rng = as_generator(rng)
    exit_rate, cum = _jump_tables(q)
    t, state = 0.0, int(i0)
    times, states = [], [state]
    while exit_rate[state] > 0:
        t += rng.exponential(1.0 / exit_rate[state])
        if t > T:
            break
        nxt = int(np.searchsorted(cum[state], rng.random() * cum[state, -1], side="right"))
        state = min(nxt, len(q) - 1)
        times.append(t)
        states.append(state)
    return RegimePath(np.array(times), np.array(states, dtype=int), float(T))


def first_holding_times(generator, i0, count, seed):
    """``count`` first exit times from ``i0`` (``inf`` when absorbing)."""
    rate = -_as_rates(generator)[i0, i0]
    out = np.empty(count)
    for b, lo, hi in path_blocks(count):
        u = block_rng(seed, TAG_CHAIN, b).random((BLOCK, 1))[: hi - lo, 0]
        out[lo:hi] = -np.log1p(-u) / rate if rate > 0 else np.inf
    return out


def sample_regime_grid(generator, i0, grid, M, seed, chunk=8, first=0):
    """Regimes at the grid nodes for ``M`` independent paths: ``(M, N+1)`` int array.

    Draws come from per-block streams (see :mod:`rlq.streams`): each path
    consumes ``chunk`` (holding-time, destination) uniform pairs per round.
    """
    q = _as_rates(generator)
    exit_rate, cum = _jump_tables(q)
    ell = len(q)
    nodes = grid.nodes
    out = np.empty((M, grid.N + 1), dtype=np.int64)
    for b, lo, hi in path_blocks(M, first):
        rng = block_rng(seed, TAG_CHAIN, b)
        state = np.full(BLOCK, int(i0))
        t = np.zeros(BLOCK)
        reg = np.full((BLOCK, grid.N + 1), int(i0), dtype=np.int64)
        active = exit_rate[state] > 0
        while active.any():
            u = rng.random((2, BLOCK, chunk))
            for j in range(chunk):
                rate = exit_rate[state]
                active &= rate > 0
                if not active.any():
                    break
                with np.errstate(divide="ignore"):
                    hold = np.where(active, -np.log1p(-u[0, :, j]) / np.where(active, rate, 1.0), np.inf)
                t = t + hold
                active &= t <= grid.T
                if not active.any():
                    break
                target = u[1, :, j] * cum[state, -1]
                nxt = np.minimum((cum[state] <= target[:, None]).sum(axis=1), ell - 1)
                state = np.where(active, nxt, state)
                after = nodes[None, :] >= t[:, None]
                reg = np.where(after & active[:, None], state[:, None], reg)
        out[lo:hi] = reg[: hi - lo]
    return out


@dataclass(frozen=True)
class OccupationTable:
    grid: TimeGrid
    probs: np.ndarray  # (N+1, ell)


def step_propagator(q, h, terms=16):
    """``exp(q h)`` by scaling and squaring of a truncated Taylor series."""
    q = np.asarray(q, dtype=float)
    norm = float(np.abs(q).sum(axis=1).max()) * h
    squarings = max(0, int(np.ceil(np.log2(norm / 0.25)))) if norm > 0.25 else 0
    scaled = q * (h / 2.0 ** squarings)
    out = np.eye(len(q))
    term = np.eye(len(q))
    for j in range(1, terms + 1):
        term = term @ scaled / j
        out = out + term
    for _ in range(squarings):
        out = out @ out
    return out


def occupation_probabilities(generator, i0, grid):
    """Marginal law of the chain on ``grid``: ``p_{k+1} = p_k exp(Q h)``, exact up to roundoff."""
    q = _as_rates(generator)
    ell = len(q)
    step = step_propagator(q, grid.h)
    probs = np.empty((grid.N + 1, ell))
    p = np.zeros(ell)
    p[i0] = 1.0
    probs[0] = p
    for k in range(grid.N):
        p = np.maximum(p @ step, 0.0)
        p = p / p.sum()
        probs[k + 1] = p
    return OccupationTable(grid, probs)
