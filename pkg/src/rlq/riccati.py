"""Coupled matrix Riccati system for deterministic coefficients.

With coefficients that depend on time only, the martingale part vanishes and
each regime's kernel solves

    -dP_i/dt = P_i A_i + A_i^T P_i + C_i^T P_i C_i + Q_i + sum_j q_ij P_j
               - (P_i B_i + C_i^T P_i D_i)(R_i + D_i^T P_i D_i)^{-1}(B_i^T P_i + D_i^T P_i C_i),

with ``P_i(T) = G_i``.  Two solvers are provided: direct backward RK4 on the
coupled system, and an outer fixed-point iteration that freezes the
off-regime coupling and re-solves the decoupled equations.
"""
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import BlowUp, NoConvergence, SingularInnerMatrix, SingularR
from .grid import TimeGrid

BLOWUP_GUARD = 1e12
_COEFS = ("A", "B", "C", "D", "Q", "R")


@dataclass(frozen=True)
class RiccatiSolution:
    grid: TimeGrid
    P: np.ndarray        # (N+1, ell, n, n)
    Lambda: np.ndarray   # (N+1, ell, n, n), zero for deterministic coefficients
    Gamma: np.ndarray    # (N+1, ell, m, n)
    dP: np.ndarray       # (N+1, ell, n, n), time derivative at the nodes
    min_eig_inner: np.ndarray  # (N+1, ell), smallest eigenvalue of R + D^T P D
    iterations: int = 1
    method: str = "ode"
    residuals: tuple = field(default=(), compare=False)

    @property
    def min_eig_P(self):
        return np.linalg.eigvalsh(self.P).min(axis=-1)

    def midpoints(self):
        """Cubic Hermite values of P halfway between nodes (fourth-order accurate)."""
        return hermite_midpoints(self.P, self.dP, self.grid.h)


def hermite_midpoints(Y, dY, h):
    return 0.5 * (Y[:-1] + Y[1:]) + (h / 8.0) * (dY[:-1] - dY[1:])


def interleave(nodes, mids):
    """Merge node values ``(N+1, ...)`` and midpoint values ``(N, ...)`` into ``(2N+1, ...)``."""
    out = np.empty((nodes.shape[0] + mids.shape[0],) + nodes.shape[1:])
    out[0::2] = nodes
    out[1::2] = mids
    return out


def coefficient_tables(spec, times, names=_COEFS):
    """Deterministic coefficient tables ``(len(times), ell, ...)``."""
    return {name: spec.tabulate(name, times) for name in names}


def _require_deterministic(spec):
    if not spec.deterministic:
        raise ValueError("ODE solvers need deterministic coefficients; use rlq.lsmc for brownian_markovian specs")


def riccati_drift(t, P_all, spec, i, w=0.0):
    """Right-hand side ``F`` with ``dP_i/dt = -F`` (the martingale part is taken as zero)."""
    c = spec.coefficients[i]
    A, B, C, D, Q, R = (getattr(c, k)(t, w) for k in _COEFS)
    P = np.asarray(P_all[i], dtype=float)
    S = P @ B + C.T @ P @ D
    M = R + D.T @ P @ D
    M = 0.5 * (M + M.T)
    try:
        L = np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        eig = float(np.linalg.eigvalsh(M).min())
        raise SingularInnerMatrix(f"SingularInnerMatrix: R + D^T P D not positive definite at t={t:g}, "
                                  f"regime {i + 1} (min eigenvalue {eig:g})",
                                  regime=i, t=float(t), min_eig=eig) from None
    Y = np.linalg.solve(L.T, np.linalg.solve(L, S.T))
    F = P @ A + A.T @ P + C.T @ P @ C + Q - S @ Y
    F = F + sum(spec.generator.rates[i, j] * np.asarray(P_all[j]) for j in range(spec.ell))
    return 0.5 * (F + F.T)


def _raise_status(status, k, regime, grid, tables, P_stage=None):
    t = float(grid.nodes[k])
    if status == kernels.SINGULAR:
        eig = None
        if P_stage is not None:
            D, R = tables["D"][2 * k, regime], tables["R"][2 * k, regime]
            eig = float(np.linalg.eigvalsh(R + D.T @ P_stage @ D).min())
        msg = f"SingularInnerMatrix: R + D^T P D not positive definite near t={t:g}, regime {regime + 1}"
        if eig is not None:
            msg += f" (min eigenvalue {eig:g})"
        raise SingularInnerMatrix(msg, regime=regime, t=t, min_eig=eig)
    if status == kernels.BLOWUP:
        raise BlowUp(f"BlowUp: Riccati solution exceeded {BLOWUP_GUARD:g} at t={t:g}, regime {regime + 1}", t=t)


def _sweep(spec, grid, tables, frozen=None):
    P, dP, status, k, regime = kernels.riccati_sweep(
        tables["A"], tables["B"], tables["C"], tables["D"], tables["Q"], tables["R"],
        spec.generator.rates, spec.tabulate("G", spec.T), grid.h, frozen, BLOWUP_GUARD)
    if status != kernels.OK:
        stage = P[min(k + 1, grid.N), regime] if status == kernels.SINGULAR else None
        _raise_status(status, k, regime, grid, tables, stage)
    return P, dP


def _finish(spec, grid, P, dP, iterations, method, residuals=()):
    t = grid.nodes
    B, C, D, R = (spec.tabulate(k, t) for k in ("B", "C", "D", "R"))
    Dt = np.swapaxes(D, -1, -2)
    M = R + Dt @ P @ D
    M = 0.5 * (M + np.swapaxes(M, -1, -2))
    rhs = np.swapaxes(B, -1, -2) @ P + Dt @ P @ C
    Gamma = np.linalg.solve(M, rhs)
    eig = np.linalg.eigvalsh(M).min(axis=-1)
    return RiccatiSolution(grid=grid, P=P, Lambda=np.zeros_like(P), Gamma=Gamma, dP=dP,
                           min_eig_inner=eig, iterations=iterations, method=method,
                           residuals=tuple(residuals))


def scaled_solution(spec, solution, factor):
    """Copy of ``solution`` with ``P`` multiplied by ``factor`` and the gain recomputed.

    Used as a negative control: a wrong kernel must break the verification checks.
    """
    return _finish(spec, solution.grid, solution.P * factor, solution.dP * factor,
                   solution.iterations, solution.method + "-scaled", solution.residuals)


def solve_riccati_ode(spec, grid):
    """Direct backward RK4 on the coupled system, symmetrising every stage."""
    _require_deterministic(spec)
    tables = coefficient_tables(spec, grid.half_nodes)
    P, dP = _sweep(spec, grid, tables)
    return _finish(spec, grid, P, dP, 1, "ode")


def _frozen_coupling(rates, P, dP, h):
    """Off-regime coupling ``sum_{j != i} q_ij p_j`` on the half-step grid."""
    off = rates - np.diag(np.diag(rates))
    nodes = np.einsum("ij,kjab->kiab", off, P)
    dnodes = np.einsum("ij,kjab->kiab", off, dP)
    return interleave(nodes, hermite_midpoints(nodes, dnodes, h))


def solve_riccati_picard(spec, grid, tol=1e-10, max_iter=50, min_window=None):
    """Fixed-point iteration on the frozen-coupling equations.

    Starts from ``p(t, i) = G(i)``; each pass solves every regime's equation
    with ``sum_{j != i} q_ij p(t, j)`` taken from the previous pass, until the
    sup over nodes and regimes of the Frobenius change is at most ``tol``.
    When the whole horizon fails to converge the horizon is split into
    windows solved right to left, halving the window length on failure.
    """
    _require_deterministic(spec)
    tables = coefficient_tables(spec, grid.half_nodes)
    try:
        P, dP, its, res = _picard_window(spec, grid, tables, 0, grid.N, None, tol, max_iter)
        return _finish(spec, grid, P, dP, its, "picard", res)
    except NoConvergence:
        if min_window == grid.N:
            raise
    return _picard_windowed(spec, grid, tables, tol, max_iter, min_window or 1)


def _picard_window(spec, grid, tables, lo, hi, terminal, tol, max_iter):
    """Picard on nodes ``lo..hi``; ``terminal`` overrides ``P(t_hi)`` (defaults to G)."""
    sub = {k: v[2 * lo:2 * hi + 1] for k, v in tables.items()}
    h = grid.h
    G = spec.tabulate("G", spec.T) if terminal is None else terminal
    nloc = hi - lo
    p = np.broadcast_to(G, (nloc + 1,) + G.shape).copy()
    dp = np.zeros_like(p)
    residuals = []
    sub_grid = TimeGrid(h * nloc, nloc)
    for it in range(1, max_iter + 1):
        frozen = _frozen_coupling(spec.generator.rates, p, dp, h)
        P, dP, status, k, regime = kernels.riccati_sweep(
            sub["A"], sub["B"], sub["C"], sub["D"], sub["Q"], sub["R"],
            spec.generator.rates, G, h, frozen, BLOWUP_GUARD)
        if status != kernels.OK:
            k_glob = lo + k
            _raise_status(status, k_glob, regime, grid, tables,
                          P[min(k + 1, nloc), regime] if status == kernels.SINGULAR else None)
        res = float(np.sqrt(((P - p) ** 2).sum(axis=(-1, -2))).max())
        residuals.append(res)
        p, dp = P, dP
        if res <= tol:
            return P, dP, it, residuals
    raise NoConvergence(f"NoConvergence: Picard residual {residuals[-1]:g} after {max_iter} iterations "
                        f"on [{grid.nodes[lo]:g}, {grid.nodes[hi]:g}]", residual=residuals[-1],
                        iterations=max_iter)


def _picard_windowed(spec, grid, tables, tol, max_iter, min_window):
    N = grid.N
    ell, n = spec.ell, spec.n
    P = np.empty((N + 1, ell, n, n))
    dP = np.empty((N + 1, ell, n, n))
    width = max(N // 2, 1)
    hi = N
    terminal = None
    total, residuals = 0, []
    while hi > 0:
        lo = max(hi - width, 0)
        try:
            Pw, dPw, its, res = _picard_window(spec, grid, tables, lo, hi, terminal, tol, max_iter)
        except NoConvergence:
            if width <= min_window:
                raise
            width = max(width // 2, min_window)
            continue
        P[lo:hi + 1] = Pw
        dP[lo:hi + 1] = dPw
        total += its
        residuals.extend(res)
        terminal = Pw[0]
        hi = lo
    return _finish(spec, grid, P, dP, total, "picard-windowed", residuals)


def _probe(spec, grid):
    t = grid.nodes
    if spec.deterministic:
        return t[None, :], np.zeros((1, t.size))
    sd = np.sqrt(t)
    w = np.stack([0 * sd, 2 * sd, -2 * sd, 4 * sd, -4 * sd])
    return np.broadcast_to(t, w.shape), w


def check_condition_lsigma(spec, grid):
    """``sup |D R^{-1} D^T|`` over nodes and regimes (Brownian values probed at 0, +-2sd, +-4sd)."""
    tt, ww = _probe(spec, grid)
    worst = 0.0
    for i, c in enumerate(spec.coefficients):
        D, R = c.D(tt, ww), c.R(tt, ww)
        try:
            np.linalg.cholesky(R)
        except np.linalg.LinAlgError:
            eig = np.linalg.eigvalsh(R).min(axis=-1)
            idx = np.unravel_index(np.argmin(eig), eig.shape)
            raise SingularR(f"SingularR: R not positive definite at t={tt[idx]:g}, regime {i + 1}",
                            regime=i, t=float(tt[idx]), min_eig=float(eig[idx])) from None
        val = D @ np.linalg.solve(R, np.swapaxes(D, -1, -2))
        worst = max(worst, float(frobenius_norm(val).max()))
    return worst


def frobenius_norm(M):
    """``tr(M M^T)^(1/2)``, batched over leading axes."""
    M = np.asarray(M, dtype=float)
    if M.ndim == 1:
        return float(np.sqrt(M @ M))
    out = np.sqrt(np.einsum("...ij,...ij->...", M, M))
    return float(out) if out.ndim == 0 else out


def spectral_trace_bound_check(A, B, tol=1e-10):
    """Check ``tr(AB) <= lambda_max(A) tr(B)`` and ``|AB| <= |A||B|`` for symmetric A, PSD B."""
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    lam = np.linalg.eigvalsh(0.5 * (A + A.T)).max()
    trace_ok = np.trace(A @ B) <= lam * np.trace(B) + tol
    norm_ok = frobenius_norm(A @ B) <= frobenius_norm(A) * frobenius_norm(B) + tol
    return bool(trace_ok and norm_ok)
