# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops: Riccati/linear backward RK4 sweeps and closed-loop Euler paths.

Mirrors ``rlq._fallback`` one-to-one (same arguments, outputs, status codes).
"""
import numpy as np
from libc.math cimport sqrt, fabs, isfinite

cdef int OK = 0
cdef int SINGULAR = 1
cdef int BLOWUP = 2


cdef int _chol(double[:, ::1] M, int m) noexcept nogil:
    """In-place lower Cholesky factor; returns 1 when M is not positive definite."""
    cdef int i, j, k
    cdef double s
    for j in range(m):
        s = M[j, j]
        for k in range(j):
            s -= M[j, k] * M[j, k]
        if not (s > 0.0):
            return 1
        M[j, j] = sqrt(s)
        for i in range(j + 1, m):
            s = M[i, j]
            for k in range(j):
                s -= M[i, k] * M[j, k]
            M[i, j] = s / M[j, j]
    return 0


cdef void _chol_solve(double[:, ::1] L, double[:, ::1] Y, int m, int ncol) noexcept nogil:
    """Overwrite Y (m x ncol) with (L L^T)^{-1} Y."""
    cdef int i, k, c
    cdef double s
    for c in range(ncol):
        for i in range(m):
            s = Y[i, c]
            for k in range(i):
                s -= L[i, k] * Y[k, c]
            Y[i, c] = s / L[i, i]
        for i in range(m - 1, -1, -1):
            s = Y[i, c]
            for k in range(i + 1, m):
                s -= L[k, i] * Y[k, c]
            Y[i, c] = s / L[i, i]


cdef int _drift(const double[:, :, ::1] P, int s,
                const double[:, :, :, ::1] A, const double[:, :, :, ::1] B, const double[:, :, :, ::1] C,
                const double[:, :, :, ::1] D, const double[:, :, :, ::1] Q, const double[:, :, :, ::1] R,
                const double[:, ::1] rates, const double[:, :, :, ::1] frozen, bint use_frozen,
                double[:, :, ::1] F,
                double[:, ::1] T1, double[:, ::1] PD, double[:, ::1] S,
                double[:, ::1] Mm, double[:, ::1] Y,
                int ell, int n, int m) noexcept nogil:
    """Fill F with the drift of every regime; return -1 or the first singular regime."""
    cdef int i, j, a, b, c
    cdef double acc
    for i in range(ell):
        # F = P A + (P A)^T + C^T (P C) + Q
        for a in range(n):
            for c in range(n):
                acc = 0.0
                for b in range(n):
                    acc += P[i, a, b] * A[s, i, b, c]
                T1[a, c] = acc
        for a in range(n):
            for c in range(n):
                F[i, a, c] = T1[a, c] + T1[c, a] + Q[s, i, a, c]
        for a in range(n):
            for c in range(n):
                acc = 0.0
                for b in range(n):
                    acc += P[i, a, b] * C[s, i, b, c]
                T1[a, c] = acc
        for a in range(n):
            for c in range(n):
                acc = 0.0
                for b in range(n):
                    acc += C[s, i, b, a] * T1[b, c]
                F[i, a, c] += acc
        # PD, S = P B + C^T P D, M = R + D^T P D
        for a in range(n):
            for j in range(m):
                acc = 0.0
                for b in range(n):
                    acc += P[i, a, b] * D[s, i, b, j]
                PD[a, j] = acc
        for a in range(n):
            for j in range(m):
                acc = 0.0
                for b in range(n):
                    acc += P[i, a, b] * B[s, i, b, j] + C[s, i, b, a] * PD[b, j]
                S[a, j] = acc
        for j in range(m):
            for c in range(m):
                acc = R[s, i, j, c]
                for b in range(n):
                    acc += D[s, i, b, j] * PD[b, c]
                Mm[j, c] = acc
        for j in range(m):
            for c in range(j):
                acc = 0.5 * (Mm[j, c] + Mm[c, j])
                Mm[j, c] = acc
                Mm[c, j] = acc
        if _chol(Mm, m):
            return i
        for j in range(m):
            for a in range(n):
                Y[j, a] = S[a, j]
        _chol_solve(Mm, Y, m, n)
        for a in range(n):
            for c in range(n):
                acc = 0.0
                for j in range(m):
                    acc += S[a, j] * Y[j, c]
                F[i, a, c] -= acc
        # regime coupling
        if use_frozen:
            for a in range(n):
                for c in range(n):
                    F[i, a, c] += rates[i, i] * P[i, a, c] + frozen[s, i, a, c]
        else:
            for j in range(ell):
                if rates[i, j] != 0.0:
                    for a in range(n):
                        for c in range(n):
                            F[i, a, c] += rates[i, j] * P[j, a, c]
        for a in range(n):
            for c in range(a):
                acc = 0.5 * (F[i, a, c] + F[i, c, a])
                F[i, a, c] = acc
                F[i, c, a] = acc
    return -1


cdef void _axpy_sym(double[:, :, ::1] out, const double[:, :, ::1] x, double alpha,
                    const double[:, :, ::1] y, int ell, int n) noexcept nogil:
    """out = sym(x + alpha * y)."""
    cdef int i, a, c
    cdef double v1, v2
    for i in range(ell):
        for a in range(n):
            for c in range(a + 1):
                v1 = x[i, a, c] + alpha * y[i, a, c]
                v2 = x[i, c, a] + alpha * y[i, c, a]
                out[i, a, c] = 0.5 * (v1 + v2)
                out[i, c, a] = 0.5 * (v1 + v2)


def riccati_sweep(const double[:, :, :, ::1] A, const double[:, :, :, ::1] B, const double[:, :, :, ::1] C,
                  const double[:, :, :, ::1] D, const double[:, :, :, ::1] Q, const double[:, :, :, ::1] R,
                  const double[:, ::1] rates, const double[:, :, ::1] G, double h, frozen=None,
                  double guard=1e12):
    cdef int N = (A.shape[0] - 1) // 2
    cdef int ell = G.shape[0]
    cdef int n = G.shape[1]
    cdef int m = B.shape[3]
    cdef int k, i, a, c, bad
    cdef bint use_frozen = frozen is not None
    cdef double[:, :, :, ::1] fr
    if use_frozen:
        fr = np.ascontiguousarray(frozen, dtype=np.float64)
    else:
        fr = np.zeros((1, 1, 1, 1))
    P_np = np.empty((N + 1, ell, n, n))
    dP_np = np.empty((N + 1, ell, n, n))
    cdef double[:, :, :, ::1] P = P_np
    cdef double[:, :, :, ::1] dP = dP_np
    cdef double[:, :, ::1] cur = np.array(G, dtype=np.float64)
    cdef double[:, :, ::1] tmp = np.empty((ell, n, n))
    cdef double[:, :, ::1] F1 = np.empty((ell, n, n))
    cdef double[:, :, ::1] F2 = np.empty((ell, n, n))
    cdef double[:, :, ::1] F3 = np.empty((ell, n, n))
    cdef double[:, :, ::1] F4 = np.empty((ell, n, n))
    cdef double[:, ::1] T1 = np.empty((n, n))
    cdef double[:, ::1] PD = np.empty((n, m))
    cdef double[:, ::1] S = np.empty((n, m))
    cdef double[:, ::1] Mm = np.empty((m, m))
    cdef double[:, ::1] Y = np.empty((m, n))
    cdef double v, amax
    P[N, :, :, :] = G
    with nogil:
        bad = _drift(cur, 2 * N, A, B, C, D, Q, R, rates, fr, use_frozen, F1, T1, PD, S, Mm, Y, ell, n, m)
    if bad >= 0:
        return P_np, dP_np, SINGULAR, N, bad
    for k in range(N - 1, -1, -1):
        with nogil:
            for i in range(ell):
                for a in range(n):
                    for c in range(n):
                        dP[k + 1, i, a, c] = -F1[i, a, c]
            _axpy_sym(tmp, cur, 0.5 * h, F1, ell, n)
            bad = _drift(tmp, 2 * k + 1, A, B, C, D, Q, R, rates, fr, use_frozen, F2, T1, PD, S, Mm, Y, ell, n, m)
            if bad < 0:
                _axpy_sym(tmp, cur, 0.5 * h, F2, ell, n)
                bad = _drift(tmp, 2 * k + 1, A, B, C, D, Q, R, rates, fr, use_frozen, F3, T1, PD, S, Mm, Y, ell, n, m)
            if bad < 0:
                _axpy_sym(tmp, cur, h, F3, ell, n)
                bad = _drift(tmp, 2 * k, A, B, C, D, Q, R, rates, fr, use_frozen, F4, T1, PD, S, Mm, Y, ell, n, m)
        if bad >= 0:
            return P_np, dP_np, SINGULAR, k, bad
        with nogil:
            amax = 0.0
            bad = -1
            for i in range(ell):
                for a in range(n):
                    for c in range(n):
                        tmp[i, a, c] = cur[i, a, c] + (h / 6.0) * (F1[i, a, c] + 2.0 * F2[i, a, c]
                                                                   + 2.0 * F3[i, a, c] + F4[i, a, c])
            for i in range(ell):
                for a in range(n):
                    for c in range(a + 1):
                        v = 0.5 * (tmp[i, a, c] + tmp[i, c, a])
                        cur[i, a, c] = v
                        cur[i, c, a] = v
                        if not isfinite(v) or fabs(v) > guard:
                            if bad < 0:
                                bad = i
                        P[k, i, a, c] = v
                        P[k, i, c, a] = v
        if bad >= 0:
            return P_np, dP_np, BLOWUP, k, bad
        with nogil:
            bad = _drift(cur, 2 * k, A, B, C, D, Q, R, rates, fr, use_frozen, F1, T1, PD, S, Mm, Y, ell, n, m)
        if bad >= 0:
            return P_np, dP_np, SINGULAR, k, bad
    for i in range(ell):
        for a in range(n):
            for c in range(n):
                dP[0, i, a, c] = -F1[i, a, c]
    return P_np, dP_np, OK, 0, -1


def linear_sweep(const double[:, :, ::1] M, const double[:, ::1] eta, const double[::1] xi, double h, double guard=1e12):
    cdef int N = (M.shape[0] - 1) // 2
    cdef int d = xi.shape[0]
    cdef int k, a, b, s1, s2, s3
    cdef double acc
    K_np = np.empty((N + 1, d))
    cdef double[:, ::1] K = K_np
    cdef double[::1] cur = np.array(xi, dtype=np.float64)
    cdef double[::1] tmp = np.empty(d)
    cdef double[::1] F1 = np.empty(d)
    cdef double[::1] F2 = np.empty(d)
    cdef double[::1] F3 = np.empty(d)
    cdef double[::1] F4 = np.empty(d)
    cdef int blown = 0
    K[N, :] = xi
    with nogil:
        for k in range(N - 1, -1, -1):
            s1 = 2 * k + 2
            s2 = 2 * k + 1
            s3 = 2 * k
            for a in range(d):
                acc = eta[s1, a]
                for b in range(d):
                    acc += M[s1, a, b] * cur[b]
                F1[a] = acc
            for a in range(d):
                tmp[a] = cur[a] + 0.5 * h * F1[a]
            for a in range(d):
                acc = eta[s2, a]
                for b in range(d):
                    acc += M[s2, a, b] * tmp[b]
                F2[a] = acc
            for a in range(d):
                tmp[a] = cur[a] + 0.5 * h * F2[a]
            for a in range(d):
                acc = eta[s2, a]
                for b in range(d):
                    acc += M[s2, a, b] * tmp[b]
                F3[a] = acc
            for a in range(d):
                tmp[a] = cur[a] + h * F3[a]
            for a in range(d):
                acc = eta[s3, a]
                for b in range(d):
                    acc += M[s3, a, b] * tmp[b]
                F4[a] = acc
            for a in range(d):
                cur[a] = cur[a] + (h / 6.0) * (F1[a] + 2.0 * F2[a] + 2.0 * F3[a] + F4[a])
                if not isfinite(cur[a]) or fabs(cur[a]) > guard:
                    blown = 1
                K[k, a] = cur[a]
            if blown:
                break
    if blown:
        return K_np, BLOWUP, k
    return K_np, OK, 0


def euler_affine(const double[::1] x0, const long[:, ::1] regimes, const double[:, ::1] dW, double h,
                 const double[:, :, :, ::1] A, const double[:, :, :, ::1] B, const double[:, :, :, ::1] C,
                 const double[:, :, :, ::1] D, const double[:, :, ::1] b, const double[:, :, ::1] sig,
                 const double[:, :, :, ::1] Q, const double[:, :, :, ::1] R, const double[:, :, ::1] q,
                 const double[:, :, ::1] r, const double[:, :, :, ::1] S, const double[:, :, ::1] G, const double[:, ::1] g,
                 const double[:, :, :, ::1] gain, const double[:, :, ::1] offset,
                 const double[:, :, :, ::1] ref_gain, const double[:, :, ::1] ref_offset,
                 const double[:, :, :, ::1] weight, double guard=1e12):
    cdef Py_ssize_t Mp = dW.shape[0]
    cdef int N = dW.shape[1]
    cdef int n = x0.shape[0]
    cdef int m = B.shape[3]
    cdef Py_ssize_t p
    cdef int k, i, a, c, j
    cdef double acc, run, pen_k, dw, xa
    cost_np = np.zeros(Mp)
    pen_np = np.zeros(Mp)
    XT_np = np.empty((Mp, n))
    blown_np = np.zeros(Mp, dtype=np.uint8)
    cdef double[::1] cost = cost_np
    cdef double[::1] pen = pen_np
    cdef double[:, ::1] XT = XT_np
    cdef unsigned char[::1] blown = blown_np
    cdef double[::1] X = np.empty(n)
    cdef double[::1] Xn = np.empty(n)
    cdef double[::1] u = np.empty(m)
    cdef double[::1] e = np.empty(m)
    cdef double[::1] du = np.empty(m)
    cdef double[::1] dx = np.empty(n)
    with nogil:
        for p in range(Mp):
            for a in range(n):
                X[a] = x0[a]
            for k in range(N):
                i = regimes[p, k]
                for j in range(m):
                    acc = offset[k, i, j]
                    xa = ref_offset[k, i, j]
                    for a in range(n):
                        acc -= gain[k, i, j, a] * X[a]
                        xa -= ref_gain[k, i, j, a] * X[a]
                    u[j] = acc
                    e[j] = acc - xa
                    du[j] = acc - r[k, i, j]
                for a in range(n):
                    dx[a] = X[a] - q[k, i, a]
                run = 0.0
                for a in range(n):
                    for c in range(n):
                        run += dx[a] * Q[k, i, a, c] * dx[c]
                for j in range(m):
                    for c in range(m):
                        run += du[j] * R[k, i, j, c] * du[c]
                    for a in range(n):
                        run += 2.0 * du[j] * S[k, i, j, a] * dx[a]
                pen_k = 0.0
                for j in range(m):
                    for c in range(m):
                        pen_k += e[j] * weight[k, i, j, c] * e[c]
                cost[p] += h * run
                pen[p] += h * pen_k
                dw = dW[p, k]
                for a in range(n):
                    acc = b[k, i, a] * h + sig[k, i, a] * dw
                    for c in range(n):
                        acc += (A[k, i, a, c] * h + C[k, i, a, c] * dw) * X[c]
                    for j in range(m):
                        acc += (B[k, i, a, j] * h + D[k, i, a, j] * dw) * u[j]
                    Xn[a] = X[a] + acc
                j = 0
                for a in range(n):
                    X[a] = Xn[a]
                    if not isfinite(X[a]) or fabs(X[a]) > guard:
                        j = 1
                if j:
                    blown[p] = 1
                    for a in range(n):
                        X[a] = 0.0
            i = regimes[p, N]
            for a in range(n):
                dx[a] = X[a] - g[i, a]
                XT[p, a] = X[a]
            run = 0.0
            for a in range(n):
                for c in range(n):
                    run += dx[a] * G[i, a, c] * dx[c]
            cost[p] += run
    return cost_np, pen_np, XT_np, blown_np.astype(bool)
