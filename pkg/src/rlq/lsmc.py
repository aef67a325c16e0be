"""Least-squares Monte Carlo for coefficients driven by ``(t, W_t)``.

With Markovian coefficients every field is a function of ``(t, W_t, regime)``
and conditional expectations reduce to polynomial regression on ``W_{t_k}``.
Each backward step is a Heun predictor/corrector on the driver; the
martingale part at ``t_k`` is ``E[(Y_{k+1} - E_k Y_{k+1}) dW_k] / dt``, where
subtracting the fitted mean removes the noise that a constant ``Y_{k+1}``
would otherwise inject.
"""
import logging
import struct
from dataclasses import dataclass, field

import numpy as np

from .adjoint import adjoint_pieces
from .chain import sample_regime_grid
from .control import ValueReport, offset_terms, value_integrands
from .errors import DegenerateDesign, GridMismatch, NoConvergence, SingularInnerMatrix, SingularR
from .riccati import check_condition_lsigma
from .streams import normal_increments

log = logging.getLogger(__name__)

MAGIC = b"RLQ1"
CLIP_TOL = 1e-6
_STATE = ("A", "B", "C", "D", "Q", "R")
_ALL = ("A", "B", "C", "D", "b", "sigma", "Q", "R", "q", "r")


@dataclass(frozen=True)
class BrownianGrid:
    grid: object
    paths: int
    increments: np.ndarray  # (M, N)
    values: np.ndarray      # (M, N+1)
    seed: int = 0


def simulate_brownian_grid(grid, M, rng=0):
    if M < 2 or grid.N < 1:
        raise ValueError("need at least 2 paths and 1 time step")
    dW = normal_increments(int(rng), M, grid.N, grid.h)
    W = np.zeros((M, grid.N + 1))
    np.cumsum(dW, axis=1, out=W[:, 1:])
    return BrownianGrid(grid=grid, paths=M, increments=dW, values=W, seed=int(rng))


@dataclass(frozen=True)
class RegressionBasis:
    """Monomials ``1, z, ..., z^d`` of the standardised Brownian value ``z``."""

    degree: int = 3

    @property
    def size(self):
        return self.degree + 1

    def features(self, w, center=0.0, scale=1.0):
        z = (np.asarray(w, dtype=float) - center) / scale
        out = np.empty(z.shape + (self.size,))
        out[..., 0] = 1.0
        for j in range(1, self.size):
            out[..., j] = out[..., j - 1] * z
        return out


@dataclass(frozen=True)
class RegressionFit:
    coef: np.ndarray     # (d+1,) + target feature shape
    fitted: np.ndarray   # targets' shape
    center: float
    scale: float


class NodeRegression:
    """Least-squares projection onto ``basis(w)`` for one fixed sample of ``w``.

    The factorisation is computed once, so repeated fits at the same node
    (several targets, several Picard passes) cost one matrix product each.
    A sample with no spread (e.g. ``W_0 = 0``) is fitted by its mean alone.
    """

    def __init__(self, w, basis, ridge=1e-8):
        w = np.asarray(w, dtype=float)
        M = w.shape[0]
        if M < basis.degree + 2:
            raise DegenerateDesign(f"DegenerateDesign: {M} paths cannot fit {basis.size} basis functions")
        self.basis, self.paths = basis, M
        self.center = float(w.mean())
        self.scale = float(w.std())
        self.constant = self.scale <= 1e-14 * max(1.0, abs(self.center))
        if self.constant:
            self.scale = 1.0
            return
        X = basis.features(w, self.center, self.scale)
        gram = X.T @ X / M
        s = np.sqrt(np.diag(gram))
        gram = gram / np.outer(s, s) + ridge * np.eye(basis.size)
        try:
            L = np.linalg.cholesky(gram)
        except np.linalg.LinAlgError:
            raise DegenerateDesign("DegenerateDesign: regularised normal matrix is not positive definite") from None
        if np.diag(L).min() ** 2 < 1e-14 * np.diag(L).max() ** 2:
            raise DegenerateDesign("DegenerateDesign: regularised normal matrix is numerically singular")
        # coef = S^-1 (L L^T)^-1 S^-1 X^T Y / M
        Linv = np.linalg.inv(L)
        self.X = X
        self.proj = (Linv.T @ Linv) / np.outer(s, s) / M

    def fit(self, targets):
        Y = np.asarray(targets, dtype=float)
        flat = Y.reshape(self.paths, -1)
        coef = np.zeros((self.basis.size, flat.shape[1]))
        if self.constant:
            coef[0] = flat.mean(axis=0)
            fitted = np.broadcast_to(coef[0], flat.shape).copy()
        else:
            coef = self.proj @ (self.X.T @ flat)
            fitted = self.X @ coef
        return RegressionFit(coef.reshape((self.basis.size,) + Y.shape[1:]), fitted.reshape(Y.shape),
                             self.center, self.scale)


def regress_conditional_expectation(targets, w_values, basis, ridge=1e-8):
    """Ridge least squares of ``targets`` (one row per path) on ``basis(w)``."""
    return NodeRegression(w_values, basis, ridge).fit(targets)


@dataclass(frozen=True)
class StochasticFieldSolution:
    """Per-path samples of a solved field and the regression tables behind them.

    ``values``/``martingale`` are ``(N+1, M, ell) + shape``; ``coef_*`` are
    ``(N+1, d+1, ell) + shape`` in the standardised variable with
    ``centers``/``scales`` per node.
    """

    kind: str
    grid: object
    paths: int
    basis: RegressionBasis
    values: np.ndarray
    martingale: np.ndarray
    coef_values: np.ndarray
    coef_martingale: np.ndarray
    centers: np.ndarray
    scales: np.ndarray
    iterations: int = 1
    residuals: tuple = ()
    diagnostics: dict = field(default_factory=dict, compare=False)

    def evaluate(self, k, w, martingale=False):
        """Fitted field at node ``k`` for Brownian values ``w``: ``w.shape + (ell,) + shape``."""
        coef = self.coef_martingale[k] if martingale else self.coef_values[k]
        X = self.basis.features(w, self.centers[k], self.scales[k])
        return np.tensordot(X, coef, axes=([-1], [0]))

    def intercept(self, k=0):
        """Fitted value at ``W = center`` (at ``t = 0`` the unconditional estimate)."""
        return self.coef_values[k][0]


def _sym(X):
    return 0.5 * (X + np.swapaxes(X, -1, -2))


def psd_clip(P):
    """Eigenvalue clipping at zero; returns the projection and the size of the change."""
    lam, V = np.linalg.eigh(P)
    if lam.min() >= 0.0:
        return P, np.zeros(P.shape[:-2])
    out = (V * np.maximum(lam, 0.0)[..., None, :]) @ np.swapaxes(V, -1, -2)
    change = np.sqrt(((out - P) ** 2).sum(axis=(-1, -2)))
    return out, change


def _tables(spec, t, w, names):
    return {k: spec.tabulate(k, t, w) for k in names}


def _riccati_driver(tabs, P, Lam):
    """Own-regime driver ``Pi + Q + H`` (no generator coupling) for batched ``P``, ``Lambda``."""
    A, B, C, D, Q, R = (tabs[k] for k in _STATE)
    Ct, Dt = np.swapaxes(C, -1, -2), np.swapaxes(D, -1, -2)
    S = P @ B + Ct @ P @ D + Lam @ D
    M = _sym(R + Dt @ P @ D)
    Y = spd_solve(M, np.swapaxes(S, -1, -2))
    F = P @ A + np.swapaxes(A, -1, -2) @ P + Ct @ P @ C + Lam @ C + Ct @ Lam + Q - S @ Y
    return _sym(F)


def spd_solve(M, rhs):
    """``M^{-1} rhs`` for batched symmetric positive definite ``M``; raises SingularInnerMatrix."""
    if M.shape[-1] == 1:
        if not np.all(M > 0):
            eig = float(M.min())
            raise SingularInnerMatrix(f"SingularInnerMatrix: R + D^T P D not positive definite on a sampled "
                                      f"path (min eigenvalue {eig:g})", min_eig=eig)
        return rhs / M
    try:
        np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        eig = float(np.linalg.eigvalsh(M).min())
        raise SingularInnerMatrix(f"SingularInnerMatrix: R + D^T P D not positive definite on a sampled path "
                                  f"(min eigenvalue {eig:g})", min_eig=eig) from None
    return np.linalg.solve(M, rhs)


def _coupling(rates, own, off):
    """``q_ii own_i + sum_{j != i} q_ij off_j`` per path."""
    diag = np.diag(rates)
    return np.einsum("i,pi...->pi...", diag, own) + np.einsum("ij,pj...->pi...", rates - np.diag(diag), off)


def _martingale(reg, Y_next, dW, h):
    """Martingale density at a node: regression of ``(Y - E_k Y) dW`` divided by ``h``."""
    resid = (Y_next - reg.fit(Y_next).fitted) * dW.reshape((-1,) + (1,) * (Y_next.ndim - 1))
    fit = reg.fit(resid)
    return fit.fitted / h, fit.coef / h


def node_regressions(bg, basis, ridge):
    return [NodeRegression(bg.values[:, k], basis, ridge) for k in range(bg.grid.N + 1)]


def solve_sre_lsmc(spec, bg, basis=None, tol=1e-3, max_iter=50, ridge=1e-8):
    """Backward regression for ``(P, Lambda)`` with a Picard loop on the regime coupling.

    Each pass sweeps all regimes backward using the previous pass's off-regime
    ``P`` in the implicit half of the step; passes stop when the largest RMS
    (over paths) Frobenius change at any node and regime is at most ``tol``.
    """
    basis = basis or RegressionBasis()
    grid, M = bg.grid, bg.paths
    h, N, ell, n = grid.h, grid.N, spec.ell, spec.n
    W, dW = bg.values, bg.increments
    rates = spec.generator.rates
    try:
        condition = check_condition_lsigma(spec, grid)
    except SingularR:
        condition = float("inf")
    if condition > 1.0:
        log.warning("condition value %.4g exceeds 1.0", condition)

    G = spec.tabulate("G", spec.T, W[:, N])
    prev = np.broadcast_to(G, (N + 1,) + G.shape).copy()
    coupled = ell > 1 and np.any(rates - np.diag(np.diag(rates)))
    regs = node_regressions(bg, basis, ridge)
    residuals = []
    for it in range(1, max_iter + 1):
        P, Lam, cP, cL, clipped = _sre_sweep(spec, regs, W, dW, h, prev, G, rates)
        res = float(np.sqrt(((P - prev) ** 2).sum(axis=(-1, -2)).mean(axis=1)).max())
        residuals.append(res)
        prev = P
        if res <= tol or not coupled:
            break
    else:
        raise NoConvergence(f"NoConvergence: LSMC Picard change {residuals[-1]:g} after {max_iter} passes",
                            residual=residuals[-1], iterations=max_iter)
    frac = clipped / float(N * M * ell)
    if frac > 0.01:
        log.warning("PSD projection changed P on %.2f%% of samples", 100 * frac)
    return StochasticFieldSolution(
        kind="riccati", grid=grid, paths=M, basis=basis, values=P, martingale=Lam, coef_values=cP,
        coef_martingale=cL, centers=np.array([r.center for r in regs]), scales=np.array([r.scale for r in regs]),
        iterations=it, residuals=tuple(residuals),
        diagnostics={"clip_fraction": frac, "condition": condition})


def _sre_sweep(spec, regs, W, dW, h, prev, G, rates):
    N = W.shape[1] - 1
    nodes = np.linspace(0.0, spec.T, N + 1)
    P = np.empty_like(prev)
    Lam = np.zeros_like(prev)
    cshape = (N + 1, regs[0].basis.size) + prev.shape[2:]
    cP, cL = np.zeros(cshape), np.zeros(cshape)
    P[N] = G
    cP[N] = regs[N].fit(G).coef
    tabs = _tables(spec, nodes[N], W[:, N], _STATE)
    f_next = _riccati_driver(tabs, P[N], Lam[N]) + _coupling(rates, P[N], P[N])
    clipped = 0
    for k in range(N - 1, -1, -1):
        reg = regs[k]
        Lam[k], cL[k] = _martingale(reg, P[k + 1], dW[:, k], h)
        Lam[k] = _sym(Lam[k])
        pred = _sym(reg.fit(P[k + 1] + h * f_next).fitted)
        tabs = _tables(spec, nodes[k], W[:, k], _STATE)
        f_pred = _riccati_driver(tabs, pred, Lam[k]) + _coupling(rates, pred, prev[k])
        fit = reg.fit(P[k + 1] + 0.5 * h * (f_next + f_pred))
        Pk, change = psd_clip(_sym(fit.fitted))
        clipped += int((change > CLIP_TOL).sum())
        P[k] = Pk
        cP[k] = fit.coef
        f_next = _riccati_driver(tabs, P[k], Lam[k]) + _coupling(rates, P[k], P[k])
    return P, Lam, cP, cL, clipped


def _adjoint_driver(pieces, K, L, rates):
    alpha, beta, gamma, eta = pieces
    return (np.einsum("...ji,...j->...i", alpha, K) + np.einsum("...ji,...j->...i", beta + gamma, L)
            + eta + np.einsum("ij,pjn->pin", rates, K))


def solve_adjoint_lsmc(spec, sre, bg, basis=None, ridge=1e-8):
    """Single backward regression sweep for ``(K, L)`` given sampled ``(P, Lambda)``."""
    if sre.paths != bg.paths or not sre.grid.same_as(bg.grid):
        raise GridMismatch("Riccati samples and Brownian grid differ")
    basis = basis or sre.basis
    grid, M = bg.grid, bg.paths
    h, N, ell, n = grid.h, grid.N, spec.ell, spec.n
    W, dW = bg.values, bg.increments
    rates = spec.generator.rates
    nodes = grid.nodes

    K = np.empty((N + 1, M, ell, n))
    L = np.zeros_like(K)
    cshape = (N + 1, basis.size, ell, n)
    cK, cL = np.zeros(cshape), np.zeros(cshape)
    regs = node_regressions(bg, basis, ridge)
    G = spec.tabulate("G", spec.T, W[:, N])
    g = spec.tabulate("g", spec.T, W[:, N])
    K[N] = np.einsum("piab,pib->pia", G, g)
    cK[N] = regs[N].fit(K[N]).coef

    def pieces_at(k):
        tabs = _tables(spec, nodes[k], W[:, k], _ALL)
        return adjoint_pieces(tabs, sre.values[k], sre.martingale[k])

    f_next = _adjoint_driver(pieces_at(N), K[N], L[N], rates)
    for k in range(N - 1, -1, -1):
        reg = regs[k]
        L[k], cL[k] = _martingale(reg, K[k + 1], dW[:, k], h)
        pc = pieces_at(k)
        pred = reg.fit(K[k + 1] + h * f_next).fitted
        f_pred = _adjoint_driver(pc, pred, L[k], rates)
        fit = reg.fit(K[k + 1] + 0.5 * h * (f_next + f_pred))
        K[k] = fit.fitted
        cK[k] = fit.coef
        f_next = _adjoint_driver(pc, K[k], L[k], rates)
    return StochasticFieldSolution(kind="adjoint", grid=grid, paths=M, basis=basis, values=K, martingale=L,
                                   coef_values=cK, coef_martingale=cL,
                                   centers=np.array([r.center for r in regs]),
                                   scales=np.array([r.scale for r in regs]))


class LSMCPolicy:
    """Feedback ``u = -Gamma(t, W, i) X + phi(t, W, i)`` read from regression tables.

    Callable as ``policy(t, X, regimes, w)`` on path batches.
    """

    def __init__(self, spec, sre, adj):
        self.spec, self.sre, self.adj = spec, sre, adj
        self.grid = sre.grid

    def fields(self, k, w):
        P, _ = psd_clip(_sym(self.sre.evaluate(k, w)))
        Lam = _sym(self.sre.evaluate(k, w, martingale=True))
        K = self.adj.evaluate(k, w)
        Lk = self.adj.evaluate(k, w, martingale=True)
        return P, Lam, K, Lk

    def gain_offset(self, k, w):
        spec, t = self.spec, self.grid.nodes[k]
        P, Lam, K, Lk = self.fields(k, w)
        B, C, D, R = (spec.tabulate(name, t, w) for name in ("B", "C", "D", "R"))
        Dt = np.swapaxes(D, -1, -2)
        M = _sym(R + Dt @ P @ D)
        gain = np.linalg.solve(M, np.swapaxes(B, -1, -2) @ P + Dt @ P @ C + Dt @ Lam)
        phi = -np.linalg.solve(M, offset_terms(spec, P, K, Lk, t, w)[..., None])[..., 0]
        return gain, phi

    def __call__(self, t, X, regimes, w):
        k = self.grid.node_at_or_before(t)
        gain, phi = self.gain_offset(k, np.asarray(w, dtype=float))
        idx = np.arange(X.shape[0])
        return -np.einsum("pij,pj->pi", gain[idx, regimes], X) + phi[idx, regimes]


def optimal_value_mc(spec, sre, adj, bg, chain_paths=None, rng=0):
    """Optimal value averaged over joint (W, regime) paths with fields from the regression tables.

    Brownian path ``p`` is paired with regime path ``p mod chain_paths``.
    """
    if not sre.grid.same_as(bg.grid) or not adj.grid.same_as(bg.grid):
        raise GridMismatch("regression tables and Brownian grid differ")
    grid, M = bg.grid, bg.paths
    chain_paths = chain_paths or M
    regimes = sample_regime_grid(spec.generator, spec.i0, grid, chain_paths, int(rng))
    regimes = regimes[np.arange(M) % chain_paths]
    idx = np.arange(M)
    x, i0 = spec.x, spec.i0
    P0 = sre.evaluate(0, np.zeros(1))[0, i0]
    K0 = adj.evaluate(0, np.zeros(1))[0, i0]
    names = ("running_Qq", "running_Rr", "running_Psigma", "running_Kb", "running_Lsigma", "completed_square")
    per_path = {name: np.zeros(M) for name in names}
    for k in range(grid.N + 1):
        w = bg.values[:, k]
        P = _sym(sre.values[k])
        K, L = adj.values[k], adj.martingale[k]
        pieces = value_integrands(spec, P, K, L, grid.nodes[k], w)
        weight = grid.h * (0.5 if k in (0, grid.N) else 1.0)
        for name in names:
            per_path[name] += weight * pieces[name][idx, regimes[:, k]]
    G = spec.tabulate("G", spec.T, bg.values[:, -1])
    g = spec.tabulate("g", spec.T, bg.values[:, -1])
    term = np.einsum("piab,pib,pia->pi", G, g, g)[idx, regimes[:, -1]]
    per_path["terminal"] = term
    terms = {"quadratic": float(x @ P0 @ x), "linear": float(-2.0 * K0 @ x)}
    total = np.full(M, terms["quadratic"] + terms["linear"])
    for name, vals in per_path.items():
        terms[name] = float(vals.mean())
        total += vals
    V = float(total.mean())
    terms["stderr"] = float(total.std(ddof=1) / np.sqrt(M))
    return ValueReport(V=V, terms=terms)


def dump_tables(solution, path):
    """Write regression tables: magic ``RLQ1``, little-endian header, float64 payload.

    Header: ``u32 N, u32 degree, u32 ell, u32 ndim, u32 dims[ndim]``; payload:
    centers (N+1), scales (N+1), value coefficients, martingale coefficients.
    """
    shape = solution.coef_values.shape[3:]
    ell = solution.coef_values.shape[2]
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<4I", solution.grid.N, solution.basis.degree, ell, len(shape)))
        fh.write(struct.pack(f"<{len(shape)}I", *shape))
        fh.write(struct.pack("<d", solution.grid.T))
        for arr in (solution.centers, solution.scales, solution.coef_values, solution.coef_martingale):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_tables(path):
    """Inverse of :func:`dump_tables`; returns a dict of arrays and header values."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not an RLQ1 table file")
    N, degree, ell, ndim = struct.unpack_from("<4I", data, 4)
    off = 20
    shape = struct.unpack_from(f"<{ndim}I", data, off)
    off += 4 * ndim
    (T,) = struct.unpack_from("<d", data, off)
    off += 8
    payload = np.frombuffer(data, dtype="<f8", offset=off)
    nodes = N + 1
    cshape = (nodes, degree + 1, ell) + tuple(shape)
    csize = int(np.prod(cshape))
    centers = payload[:nodes]
    scales = payload[nodes:2 * nodes]
    cv = payload[2 * nodes:2 * nodes + csize].reshape(cshape)
    cm = payload[2 * nodes + csize:2 * nodes + 2 * csize].reshape(cshape)
    return {"N": N, "T": T, "degree": degree, "ell": ell, "shape": tuple(shape), "centers": centers.copy(),
            "scales": scales.copy(), "coef_values": cv.copy(), "coef_martingale": cm.copy()}
