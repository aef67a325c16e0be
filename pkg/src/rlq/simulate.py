"""Euler-Maruyama simulation of the controlled state and Monte Carlo cost estimates."""
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import kernels
from .chain import occupation_probabilities, sample_regime_grid
from .control import FeedbackPolicy, optimal_value, trapezoid
from .errors import BlowUp
from .streams import BLOCK, normal_increments

Z99 = 2.5758293035489004
MAX_BLOWN_FRACTION = 1e-3
CHUNK_PATHS = 8 * BLOCK
_STATE_NAMES = ("A", "B", "C", "D", "b", "sigma", "Q", "R", "q", "r")


def worker_count():
    env = os.environ.get("RLQ_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


@dataclass(frozen=True)
class AffineControl:
    """Explicit control ``u = -gain X + offset`` with node tables ``(N+1, ell, ...)``."""

    grid: object
    gain: np.ndarray
    offset: np.ndarray

    def __call__(self, t, X, regime):
        k = self.grid.node_at_or_before(t)
        return -np.einsum("...ij,...j->...i", self.gain[k, regime], X) + self.offset[k, regime]

    def tables_on(self, grid):
        if grid.same_as(self.grid):
            return self.gain, self.offset
        idx = np.array([self.grid.node_at_or_before(t) for t in grid.nodes])
        return self.gain[idx], self.offset[idx]


def perturbed(policy, delta=0.0, gain_delta=0.0):
    """Affine control shifted from ``policy`` by a constant or tabulated offset/gain change."""
    gain = policy.Gamma + np.asarray(gain_delta, dtype=float)
    offset = policy.phi + np.asarray(delta, dtype=float)
    return AffineControl(policy.grid, np.broadcast_to(gain, policy.Gamma.shape).copy(),
                         np.broadcast_to(offset, policy.phi.shape).copy())


@dataclass(frozen=True)
class SimulationBatch:
    paths: int
    costs: np.ndarray        # per path; NaN where the path blew up
    penalties: np.ndarray    # per path deviation penalty (zero without a reference policy)
    terminal_states: np.ndarray
    blown: np.ndarray
    regimes: np.ndarray = None      # (M, N+1) when kept
    increments: np.ndarray = None   # (M, N) when kept
    states: np.ndarray = None       # (M, N+1, n) when kept

    @property
    def blowup_count(self):
        return int(self.blown.sum())

    @property
    def good(self):
        return ~self.blown

    @property
    def mean(self):
        return float(self.costs[self.good].mean())

    @property
    def stderr(self):
        c = self.costs[self.good]
        return float(c.std(ddof=1) / np.sqrt(c.size)) if c.size > 1 else 0.0

    @property
    def ci99(self):
        return Z99 * self.stderr

    @property
    def penalty_mean(self):
        return float(self.penalties[self.good].mean())

    @property
    def penalty_stderr(self):
        c = self.penalties[self.good]
        return float(c.std(ddof=1) / np.sqrt(c.size)) if c.size > 1 else 0.0


def _node_tables(spec, grid):
    t = grid.nodes
    tabs = {k: spec.tabulate(k, t) for k in _STATE_NAMES}
    if spec.has_cross_term:
        tabs["S"] = np.stack([c.S(t) if c.S is not None else np.zeros((len(t), spec.m, spec.n))
                              for c in spec.coefficients], axis=1)
    else:
        tabs["S"] = np.zeros((len(t), spec.ell, spec.m, spec.n))
    tabs["G"] = spec.tabulate("G", spec.T)
    tabs["g"] = spec.tabulate("g", spec.T)
    return tabs


def _chunks(M):
    return [(lo, min(M, lo + CHUNK_PATHS)) for lo in range(0, M, CHUNK_PATHS)]


def _map_chunks(fn, M, workers=None):
    chunks = _chunks(M)
    workers = min(workers or worker_count(), len(chunks))
    if workers <= 1:
        return [fn(lo, hi) for lo, hi in chunks]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda c: fn(*c), chunks))


def _draws(spec, grid, seed, lo, hi):
    dW = normal_increments(seed, hi - lo, grid.N, grid.h, first=lo)
    regimes = sample_regime_grid(spec.generator, spec.i0, grid, hi - lo, seed, first=lo)
    return dW, regimes


def _finish(M, parts, keep):
    costs = np.concatenate([p[0] for p in parts])
    pens = np.concatenate([p[1] for p in parts])
    XT = np.concatenate([p[2] for p in parts])
    blown = np.concatenate([p[3] for p in parts])
    costs = np.where(blown, np.nan, costs)
    pens = np.where(blown, np.nan, pens)
    extra = {}
    if keep:
        extra = dict(regimes=np.concatenate([p[4] for p in parts]),
                     increments=np.concatenate([p[5] for p in parts]),
                     states=np.concatenate([p[6] for p in parts]))
    batch = SimulationBatch(paths=M, costs=costs, penalties=pens, terminal_states=XT, blown=blown, **extra)
    if batch.blowup_count > MAX_BLOWN_FRACTION * M:
        raise BlowUp(f"BlowUp: {batch.blowup_count} of {M} paths diverged", count=batch.blowup_count)
    return batch


def _affine_tables(control, grid):
    if isinstance(control, FeedbackPolicy):
        gain, offset, _ = control.tables_on(grid)
    else:
        gain, offset = control.tables_on(grid)
    return gain, offset


def _is_affine(control):
    return isinstance(control, (FeedbackPolicy, AffineControl))


def estimate_cost(spec, control, grid, M, rng=0, reference=None, keep_paths=False, workers=None):
    """Monte Carlo cost of ``control`` over ``M`` paths.

    ``control`` is a :class:`FeedbackPolicy`, an :class:`AffineControl`, or a
    callable ``(t, X, regimes, w) -> u`` on batches.  With ``reference`` (a
    :class:`FeedbackPolicy`) each path also accumulates the penalty
    ``h <W (u - v), u - v>`` with ``v`` and ``W`` taken from the reference.
    Affine controls with deterministic coefficients use the compiled kernel.
    """
    seed = int(rng)
    if _is_affine(control) and spec.deterministic and not keep_paths:
        return _estimate_affine(spec, control, grid, M, seed, reference, workers)
    return _estimate_general(spec, control, grid, M, seed, reference, keep_paths, workers)


def _estimate_affine(spec, control, grid, M, seed, reference, workers):
    tabs = _node_tables(spec, grid)
    gain, offset = _affine_tables(control, grid)
    if reference is not None:
        ref_gain, ref_offset, weight = reference.tables_on(grid)
    else:
        ref_gain, ref_offset = gain, offset
        weight = np.zeros(gain.shape[:2] + (spec.m, spec.m))

    def run(lo, hi):
        dW, regimes = _draws(spec, grid, seed, lo, hi)
        return kernels.euler_affine(
            spec.x, regimes, dW, grid.h, tabs["A"], tabs["B"], tabs["C"], tabs["D"], tabs["b"],
            tabs["sigma"], tabs["Q"], tabs["R"], tabs["q"], tabs["r"], tabs["S"], tabs["G"], tabs["g"],
            gain, offset, ref_gain, ref_offset, weight)

    return _finish(M, _map_chunks(run, M, workers), False)


def _select(table, regimes):
    """Pick each path's regime from a ``(paths, ell, ...)`` table."""
    return table[np.arange(regimes.shape[0]), regimes]


def _estimate_general(spec, control, grid, M, seed, reference, keep, workers):
    if _is_affine(control):
        policy = control
        control = lambda t, X, i, w: policy(t, X, i)
    h, n = grid.h, spec.n
    names = _STATE_NAMES + (("S",) if spec.has_cross_term else ())

    def coef(name, t, W, regimes):
        vals = []
        for c in spec.coefficients:
            f = getattr(c, name)
            if f is None:
                vals.append(np.zeros(W.shape + (spec.m, spec.n)))
            else:
                vals.append(np.broadcast_to(f(t, W), W.shape + f.shape))
        return _select(np.stack(vals, axis=1), regimes)

    def run(lo, hi):
        dW, regimes = _draws(spec, grid, seed, lo, hi)
        P = hi - lo
        X = np.broadcast_to(spec.x, (P, n)).copy()
        W = np.zeros(P)
        cost = np.zeros(P)
        pen = np.zeros(P)
        blown = np.zeros(P, dtype=bool)
        states = np.empty((P, grid.N + 1, n)) if keep else None
        if keep:
            states[:, 0] = X
        for k in range(grid.N):
            t = grid.nodes[k]
            i = regimes[:, k]
            c = {name: coef(name, t, W, i) for name in names}
            u = np.asarray(control(t, X, i, W), dtype=float).reshape(P, spec.m)
            dx = X - c["q"]
            du = u - c["r"]
            run_cost = (np.einsum("pi,pij,pj->p", dx, c["Q"], dx)
                        + np.einsum("pi,pij,pj->p", du, c["R"], du))
            if "S" in c:
                run_cost += 2.0 * np.einsum("pi,pij,pj->p", du, c["S"], dx)
            cost += h * run_cost
            if reference is not None:
                kk = reference.node_index(t)
                e = u - reference(t, X, i)
                pen += h * np.einsum("pi,pij,pj->p", e, reference.weight[kk, i], e)
            drift = np.einsum("pij,pj->pi", c["A"], X) + np.einsum("pij,pj->pi", c["B"], u) + c["b"]
            diff = np.einsum("pij,pj->pi", c["C"], X) + np.einsum("pij,pj->pi", c["D"], u) + c["sigma"]
            X = X + drift * h + diff * dW[:, k, None]
            W = W + dW[:, k]
            bad = ~np.all(np.isfinite(X), axis=1) | (np.abs(X).max(axis=1) > 1e12)
            if bad.any():
                blown |= bad
                X[bad] = 0.0
            if keep:
                states[:, k + 1] = X
        iT = regimes[:, -1]
        G = _select(np.stack([tm.G(spec.T, W) * np.ones((P, 1, 1)) for tm in spec.terminal], axis=1), iT)
        g = _select(np.stack([tm.g(spec.T, W) * np.ones((P, 1)) for tm in spec.terminal], axis=1), iT)
        dx = X - g
        cost += np.einsum("pi,pij,pj->p", dx, G, dx)
        out = (cost, pen, X, blown)
        if keep:
            out += (regimes, dW, states)
        return out

    return _finish(M, _map_chunks(run, M, workers), keep)


def simulate_closed_loop(spec, policy, grid, M, rng=0, keep_paths=False, workers=None):
    """Simulate ``M`` paths under ``policy``; the penalty column is identically zero."""
    return estimate_cost(spec, policy, grid, M, rng, keep_paths=keep_paths, workers=workers)


@dataclass(frozen=True)
class DecompositionReport:
    J: float
    J_stderr: float
    V: float
    penalty: float
    penalty_stderr: float
    blowups: int

    @property
    def discrepancy(self):
        return self.J - self.V - self.penalty

    @property
    def pooled_stderr(self):
        return float(np.hypot(self.J_stderr, self.penalty_stderr))

    def holds(self, k=3.0, allowance=0.0):
        return abs(self.discrepancy) <= k * self.pooled_stderr + allowance


def cost_decomposition(spec, riccati, adjoint, policy, test_control, grid, M, rng=0, value=None,
                       workers=None):
    """Both sides of ``J(u) = V + E int <M (u - v), u - v> dt`` along simulated paths.

    ``v`` is ``policy`` evaluated on the simulated state and ``M = R + D^T P D``.
    """
    if value is None:
        occ = occupation_probabilities(spec.generator, spec.i0, riccati.grid)
        value = optimal_value(spec, riccati, adjoint, occ).V
    batch = estimate_cost(spec, test_control, grid, M, rng, reference=policy, workers=workers)
    return DecompositionReport(J=batch.mean, J_stderr=batch.stderr, V=float(value),
                               penalty=batch.penalty_mean, penalty_stderr=batch.penalty_stderr,
                               blowups=batch.blowup_count)


def constant_deviation_penalty(policy, spec, delta):
    """``E int <M delta, delta> dt`` by occupation-probability quadrature for a constant shift ``delta``."""
    occ = occupation_probabilities(spec.generator, spec.i0, policy.grid)
    d = np.broadcast_to(np.asarray(delta, dtype=float), (spec.m,))
    vals = np.einsum("a,kiab,b->ki", d, policy.weight, d)
    return trapezoid((vals * occ.probs).sum(axis=1), policy.grid.h)
