"""Adjoint backward equation for the affine part of the value function.

Per regime, with ``M = R + D^T P D`` and ``Gamma = M^{-1}(B^T P + D^T P C + D^T Lambda)``::

    alpha = A - B Gamma
    beta  = C - D M^{-1}(B^T P + D^T P C)
    gamma = -D M^{-1} D^T Lambda
    eta   = Gamma^T (D^T P sigma - R r) + Q q - P b - C^T P sigma - Lambda sigma
    xi    = G g

and the regimes are stacked into one ``n*ell`` system whose drift matrix adds
the transposed generator blocks ``q_ji I_n``.
"""
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import BlowUp, GridMismatch, SingularInnerMatrix
from .riccati import BLOWUP_GUARD, hermite_midpoints, interleave

_NAMES = ("A", "B", "C", "D", "b", "sigma", "Q", "R", "q", "r")


@dataclass(frozen=True)
class AdjointSolution:
    grid: object
    K: np.ndarray   # (N+1, ell, n)
    L: np.ndarray   # (N+1, ell, n), zero for deterministic coefficients
    iterations: int = 1


@dataclass(frozen=True)
class StackedLinearSystem:
    """Stacked coefficients tabulated at ``times`` (nodes and midpoints)."""

    times: np.ndarray
    alpha_bar: np.ndarray  # (len(times), n*ell, n*ell)
    beta_bar: np.ndarray
    gamma_bar: np.ndarray
    eta_bar: np.ndarray    # (len(times), n*ell)
    xi_bar: np.ndarray     # (n*ell,)


def adjoint_pieces(tabs, P, Lam):
    """Per-regime ``alpha, beta, gamma, eta`` batched over leading axes.

    ``tabs`` maps coefficient names to arrays whose leading axes match ``P``.
    """
    A, B, C, D = tabs["A"], tabs["B"], tabs["C"], tabs["D"]
    b, sig, Q, R, q, r = tabs["b"], tabs["sigma"], tabs["Q"], tabs["R"], tabs["q"], tabs["r"]
    Bt, Ct, Dt = (np.swapaxes(X, -1, -2) for X in (B, C, D))
    M = R + Dt @ P @ D
    M = 0.5 * (M + np.swapaxes(M, -1, -2))
    try:
        np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        eig = np.linalg.eigvalsh(M).min(axis=-1)
        raise SingularInnerMatrix(f"SingularInnerMatrix: R + D^T P D not positive definite "
                                  f"(min eigenvalue {eig.min():g})", min_eig=float(eig.min())) from None
    base = Bt @ P + Dt @ P @ C
    Gamma = np.linalg.solve(M, base + Dt @ Lam)
    alpha = A - B @ Gamma
    beta = C - D @ np.linalg.solve(M, base)
    gamma = -D @ np.linalg.solve(M, Dt @ Lam)
    Psig = _mv(P, sig)
    eta = (_mv(np.swapaxes(Gamma, -1, -2), _mv(Dt, Psig) - _mv(R, r))
           + _mv(Q, q) - _mv(P, b) - _mv(Ct, Psig) - _mv(Lam, sig))
    return alpha, beta, gamma, eta


def _mv(M, v):
    return np.einsum("...ij,...j->...i", M, v)


def stack_blocks(blocks):
    """Block-diagonal ``(..., ell*n, ell*n)`` from ``(..., ell, n, n)``."""
    *lead, ell, n, _ = blocks.shape
    out = np.zeros(tuple(lead) + (ell * n, ell * n))
    for i in range(ell):
        out[..., i * n:(i + 1) * n, i * n:(i + 1) * n] = blocks[..., i, :, :]
    return out


def generator_blocks(rates, n):
    """``(Q kron I_n)^T``: the off-diagonal n x n block (i, j) is ``q_ji I_n``."""
    return np.kron(rates, np.eye(n)).T


def _check_grid(riccati, grid):
    if grid is not None and not riccati.grid.same_as(grid):
        raise GridMismatch(f"Riccati solution lives on N={riccati.grid.N}, T={riccati.grid.T}; "
                           f"adjoint requested on N={grid.N}, T={grid.T}")


def assemble_stacked_system(spec, riccati):
    grid = riccati.grid
    times = grid.half_nodes
    tabs = {k: spec.tabulate(k, times) for k in _NAMES}
    P = interleave(riccati.P, riccati.midpoints())
    Lam = interleave(riccati.Lambda, 0.5 * (riccati.Lambda[:-1] + riccati.Lambda[1:]))
    alpha, beta, gamma, eta = adjoint_pieces(tabs, P, Lam)
    n, ell = spec.n, spec.ell
    alpha_bar = stack_blocks(alpha) + generator_blocks(spec.generator.rates, n)
    G = spec.tabulate("G", spec.T)
    g = spec.tabulate("g", spec.T)
    xi = np.einsum("iab,ib->ia", G, g).reshape(ell * n)
    return StackedLinearSystem(times=times, alpha_bar=alpha_bar, beta_bar=stack_blocks(beta),
                               gamma_bar=stack_blocks(gamma), eta_bar=eta.reshape(len(times), ell * n),
                               xi_bar=xi)


def solve_adjoint_ode(spec, riccati, grid=None):
    """Backward RK4 on ``dK/dt = -(alpha_bar^T K + eta_bar)``, ``K(T) = xi_bar``; ``L`` is zero."""
    if not spec.deterministic:
        raise ValueError("solve_adjoint_ode needs deterministic coefficients; use rlq.lsmc")
    _check_grid(riccati, grid)
    grid = riccati.grid
    system = assemble_stacked_system(spec, riccati)
    Mt = np.swapaxes(system.alpha_bar, -1, -2)
    K, status, k = kernels.linear_sweep(Mt, system.eta_bar, system.xi_bar, grid.h, BLOWUP_GUARD)
    if status != kernels.OK:
        raise BlowUp(f"BlowUp: adjoint solution exceeded {BLOWUP_GUARD:g} at t={grid.nodes[k]:g}",
                     t=float(grid.nodes[k]))
    K = K.reshape(grid.N + 1, spec.ell, spec.n)
    K[-1] = system.xi_bar.reshape(spec.ell, spec.n)
    return AdjointSolution(grid=grid, K=K, L=np.zeros_like(K))


def adjoint_midpoints(spec, riccati, adjoint):
    """Hermite midpoints of K using the equation's own right-hand side at the nodes."""
    system = assemble_stacked_system(spec, riccati)
    nodes = system.alpha_bar[0::2]
    Kst = adjoint.K.reshape(adjoint.K.shape[0], -1)
    dK = -(np.einsum("kji,kj->ki", nodes, Kst) + system.eta_bar[0::2])
    mids = hermite_midpoints(Kst, dK, riccati.grid.h)
    return mids.reshape(-1, spec.ell, spec.n)
