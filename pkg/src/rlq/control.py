"""Closed-loop optimal policy and the optimal value."""
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import GridMismatch, SingularInnerMatrix


@dataclass(frozen=True)
class FeedbackPolicy:
    """Affine feedback ``u = -Gamma X + phi`` held constant between grid nodes.

    ``weight`` is ``R + D^T P D`` at the nodes; it weighs the deviation
    penalty in the cost decomposition.
    """

    grid: object
    Gamma: np.ndarray   # (N+1, ell, m, n)
    phi: np.ndarray     # (N+1, ell, m)
    weight: np.ndarray  # (N+1, ell, m, m)

    def node_index(self, t):
        return self.grid.node_at_or_before(t)

    def __call__(self, t, X, regime):
        k = self.node_index(t)
        G = self.Gamma[k, regime]
        return -np.einsum("...ij,...j->...i", G, X) + self.phi[k, regime]

    def tables_on(self, grid):
        """Gain and offset tables resampled at the nodes of a (refining) grid."""
        if grid.same_as(self.grid):
            return self.Gamma, self.phi, self.weight
        if not grid.refines(self.grid):
            raise GridMismatch(f"simulation grid N={grid.N} does not refine policy grid N={self.grid.N}")
        idx = np.array([self.node_index(t) for t in grid.nodes])
        return self.Gamma[idx], self.phi[idx], self.weight[idx]

    def shifted(self, gain_shift):
        """Policy in original controls when ``u = u_reduced - gain_shift X``.

        ``gain_shift`` is an ``(N+1, ell, m, n)`` table.
        """
        return replace(self, Gamma=self.Gamma + gain_shift)


def _inner(spec, P, t, w=0.0):
    D, R = spec.tabulate("D", t, w), spec.tabulate("R", t, w)
    M = R + np.swapaxes(D, -1, -2) @ P @ D
    return 0.5 * (M + np.swapaxes(M, -1, -2))


def _check(riccati, adjoint):
    if not riccati.grid.same_as(adjoint.grid):
        raise GridMismatch(f"Riccati grid N={riccati.grid.N} and adjoint grid N={adjoint.grid.N} differ")


def _chol_or_raise(M, grid):
    try:
        np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        eig = np.linalg.eigvalsh(M).min(axis=-1)
        k, i = np.unravel_index(np.argmin(eig), eig.shape)
        raise SingularInnerMatrix(
            f"SingularInnerMatrix: R + D^T P D not positive definite at t={grid.nodes[k]:g}, "
            f"regime {i + 1} (min eigenvalue {eig[k, i]:g})",
            regime=int(i), t=float(grid.nodes[k]), min_eig=float(eig[k, i])) from None


def _mv(M, v):
    return np.einsum("...ij,...j->...i", M, v)


def offset_terms(spec, P, K, L, t, w=0.0):
    """``D^T P sigma - R r - B^T K - D^T L``; the optimal offset is ``-M^{-1}`` times this."""
    B, D, R = (spec.tabulate(k, t, w) for k in ("B", "D", "R"))
    sig, r = spec.tabulate("sigma", t, w), spec.tabulate("r", t, w)
    Bt, Dt = np.swapaxes(B, -1, -2), np.swapaxes(D, -1, -2)
    return _mv(Dt, _mv(P, sig)) - _mv(R, r) - _mv(Bt, K) - _mv(Dt, L)


def build_policy(riccati, adjoint, spec):
    _check(riccati, adjoint)
    grid = riccati.grid
    t = grid.nodes
    M = _inner(spec, riccati.P, t)
    _chol_or_raise(M, grid)
    w = offset_terms(spec, riccati.P, adjoint.K, adjoint.L, t)
    phi = -np.linalg.solve(M, w[..., None])[..., 0]
    return FeedbackPolicy(grid=grid, Gamma=riccati.Gamma.copy(), phi=phi, weight=M)


def original_control_policy(policy, spec):
    """Map a policy of a cross-term-reduced spec back to the original control."""
    if spec.control_shift is None:
        return policy
    t = policy.grid.nodes
    shift = np.stack([s(t, 0.0) for s in spec.control_shift], axis=1)
    return policy.shifted(shift)


@dataclass(frozen=True)
class ValueReport:
    V: float
    terms: dict = field(default_factory=dict)

    def total(self):
        return float(sum(v for k, v in self.terms.items() if not k.startswith("stderr")))


def trapezoid(values, h):
    values = np.asarray(values, dtype=float)
    return float(h * (values.sum(axis=0) - 0.5 * (values[0] + values[-1])))


def value_integrands(spec, P, K, L, t, w=0.0):
    """Running-integral pieces of the optimal value, each batched like ``P[..., 0, 0]``."""
    tabs = {k: spec.tabulate(k, t, w) for k in ("b", "sigma", "Q", "R", "q", "r")}
    dot = lambda a, b: np.einsum("...i,...i->...", a, b)
    sig = tabs["sigma"]
    M = _inner(spec, P, t, w)
    wv = offset_terms(spec, P, K, L, t, w)
    return {
        "running_Qq": dot(_mv(tabs["Q"], tabs["q"]), tabs["q"]),
        "running_Rr": dot(_mv(tabs["R"], tabs["r"]), tabs["r"]),
        "running_Psigma": dot(_mv(P, sig), sig),
        "running_Kb": -2.0 * dot(K, tabs["b"]),
        "running_Lsigma": -2.0 * dot(L, sig),
        "completed_square": -dot(np.linalg.solve(M, wv[..., None])[..., 0], wv),
    }


def terminal_term(spec):
    G, g = spec.tabulate("G", spec.T), spec.tabulate("g", spec.T)
    return np.einsum("iab,ib,ia->i", G, g, g)


def optimal_value(spec, riccati, adjoint, occupation):
    """Optimal value with expectations over the regime taken by occupation probabilities."""
    _check(riccati, adjoint)
    grid = riccati.grid
    if not occupation.grid.same_as(grid):
        raise GridMismatch("occupation table is on a different grid")
    _chol_or_raise(_inner(spec, riccati.P, grid.nodes), grid)
    x, i0 = spec.x, spec.i0
    probs = occupation.probs
    terms = {
        "quadratic": float(x @ riccati.P[0, i0] @ x),
        "linear": float(-2.0 * adjoint.K[0, i0] @ x),
        "terminal": float(probs[-1] @ terminal_term(spec)),
    }
    pieces = value_integrands(spec, riccati.P, adjoint.K, adjoint.L, grid.nodes)
    for name, vals in pieces.items():
        terms[name] = trapezoid((vals * probs).sum(axis=1), grid.h)
    return ValueReport(V=float(sum(terms.values())), terms=terms)
