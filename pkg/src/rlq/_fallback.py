"""Pure numpy versions of the compiled kernels in ``_kernels.pyx``.

Signatures and status codes match the compiled module exactly; callers in
:mod:`rlq.kernels` translate the codes into exceptions.
"""
import numpy as np

OK = 0
SINGULAR = 1
BLOWUP = 2


def _sym(X):
    return 0.5 * (X + np.swapaxes(X, -1, -2))


def _drift(P, A, B, C, D, Q, R, rates, frozen):
    """Riccati drift for all regimes at once, or None plus the failing regime."""
    PT = P
    S = PT @ B + np.swapaxes(C, -1, -2) @ PT @ D
    M = R + np.swapaxes(D, -1, -2) @ PT @ D
    M = _sym(M)
    try:
        L = np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        bad = [i for i in range(len(M)) if not _is_pd(M[i])]
        return None, bad[0] if bad else 0
    St = np.swapaxes(S, -1, -2)
    Y = np.linalg.solve(np.swapaxes(L, -1, -2), np.linalg.solve(L, St))
    F = PT @ A + np.swapaxes(A, -1, -2) @ PT + np.swapaxes(C, -1, -2) @ PT @ C + Q - S @ Y
    if frozen is None:
        F = F + np.einsum("ij,jab->iab", rates, PT)
    else:
        F = F + np.diag(rates)[:, None, None] * PT + frozen
    return _sym(F), -1


def _is_pd(M):
    try:
        np.linalg.cholesky(M)
        return True
    except np.linalg.LinAlgError:
        return False


def riccati_sweep(A, B, C, D, Q, R, rates, G, h, frozen=None, guard=1e12):
    """Backward RK4 for the coupled Riccati system on half-step coefficient tables.

    Coefficient tables have leading axis ``2N+1`` (nodes and midpoints).  With
    ``frozen`` given, the coupling for regime i is ``q_ii P_i + frozen_i``.
    Returns ``(P, dP, status, k, regime)`` where ``dP`` is ``dP/dt`` at the nodes.
    """
    N = (A.shape[0] - 1) // 2
    ell, n = G.shape[0], G.shape[1]
    P = np.empty((N + 1, ell, n, n))
    dP = np.empty((N + 1, ell, n, n))
    P[N] = G

    def f(s, X):
        fr = None if frozen is None else frozen[s]
        return _drift(X, A[s], B[s], C[s], D[s], Q[s], R[s], rates, fr)

    cur = np.array(G, dtype=float)
    F1, bad = f(2 * N, cur)
    if F1 is None:
        return P, dP, SINGULAR, N, bad
    for k in range(N - 1, -1, -1):
        dP[k + 1] = -F1
        F2, bad = f(2 * k + 1, _sym(cur + 0.5 * h * F1))
        if F2 is None:
            return P, dP, SINGULAR, k, bad
        F3, bad = f(2 * k + 1, _sym(cur + 0.5 * h * F2))
        if F3 is None:
            return P, dP, SINGULAR, k, bad
        F4, bad = f(2 * k, _sym(cur + h * F3))
        if F4 is None:
            return P, dP, SINGULAR, k, bad
        cur = _sym(cur + (h / 6.0) * (F1 + 2.0 * F2 + 2.0 * F3 + F4))
        if not np.all(np.isfinite(cur)) or np.abs(cur).max() > guard:
            bad = int(np.argmax(np.abs(np.nan_to_num(cur, nan=np.inf)).reshape(ell, -1).max(axis=1)))
            return P, dP, BLOWUP, k, bad
        P[k] = cur
        F1, bad = f(2 * k, cur)
        if F1 is None:
            return P, dP, SINGULAR, k, bad
    dP[0] = -F1
    return P, dP, OK, 0, -1


def linear_sweep(M, eta, xi, h, guard=1e12):
    """Backward RK4 for ``dK/dt = -(M(t) K + eta(t))`` with ``K(T) = xi``.

    ``M`` is ``(2N+1, d, d)`` and ``eta`` is ``(2N+1, d)`` on half steps.
    Returns ``(K, status, k)``.
    """
    N = (M.shape[0] - 1) // 2
    K = np.empty((N + 1, xi.shape[0]))
    K[N] = xi
    cur = np.array(xi, dtype=float)
    for k in range(N - 1, -1, -1):
        s1, s2, s3 = 2 * k + 2, 2 * k + 1, 2 * k
        F1 = M[s1] @ cur + eta[s1]
        F2 = M[s2] @ (cur + 0.5 * h * F1) + eta[s2]
        F3 = M[s2] @ (cur + 0.5 * h * F2) + eta[s2]
        F4 = M[s3] @ (cur + h * F3) + eta[s3]
        cur = cur + (h / 6.0) * (F1 + 2.0 * F2 + 2.0 * F3 + F4)
        if not np.all(np.isfinite(cur)) or np.abs(cur).max() > guard:
            return K, BLOWUP, k
        K[k] = cur
    return K, OK, 0


def euler_affine(x0, regimes, dW, h, A, B, C, D, b, sig, Q, R, q, r, S, G, g,
                 gain, offset, ref_gain, ref_offset, weight, guard=1e12):
    """Euler-Maruyama under ``u = -gain X + offset`` on node tables ``(N+1, ell, ...)``.

    Returns ``(cost, penalty, XT, blown)``.  ``penalty`` accumulates
    ``h <W(u - v), u - v>`` with ``v = -ref_gain X + ref_offset``.
    """
    Mp, N = dW.shape
    n = x0.shape[0]
    X = np.broadcast_to(x0, (Mp, n)).copy()
    cost = np.zeros(Mp)
    pen = np.zeros(Mp)
    blown = np.zeros(Mp, dtype=bool)
    for k in range(N):
        i = regimes[:, k]
        u = -np.einsum("pij,pj->pi", gain[k, i], X) + offset[k, i]
        v = -np.einsum("pij,pj->pi", ref_gain[k, i], X) + ref_offset[k, i]
        dx = X - q[k, i]
        du = u - r[k, i]
        run = (np.einsum("pi,pij,pj->p", dx, Q[k, i], dx)
               + np.einsum("pi,pij,pj->p", du, R[k, i], du)
               + 2.0 * np.einsum("pi,pij,pj->p", du, S[k, i], dx))
        e = u - v
        cost += h * run
        pen += h * np.einsum("pi,pij,pj->p", e, weight[k, i], e)
        drift = np.einsum("pij,pj->pi", A[k, i], X) + np.einsum("pij,pj->pi", B[k, i], u) + b[k, i]
        diff = np.einsum("pij,pj->pi", C[k, i], X) + np.einsum("pij,pj->pi", D[k, i], u) + sig[k, i]
        X = X + drift * h + diff * dW[:, k, None]
        bad = ~np.all(np.isfinite(X), axis=1) | (np.abs(X).max(axis=1) > guard)
        if bad.any():
            blown |= bad
            X[bad] = 0.0
    iT = regimes[:, N]
    dx = X - g[iT]
    cost += np.einsum("pi,pij,pj->p", dx, G[iT], dx)
    return cost, pen, X, blown
