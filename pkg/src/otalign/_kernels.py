"""JIT-compiled inner loops for the iterative solvers.

Importing this module requires numba; `solvers` falls back to its numpy
implementations when the import fails.  The kernels mirror the numpy code
paths and assume already-validated inputs: finite costs, nonnegative
marginals with at least one positive entry per side.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def sinkhorn_log(scaled, log_mu, log_nu, mu, max_iter, tol):
    K, M = scaled.shape
    phi = np.zeros(K)
    psi = np.zeros(M)
    lse_r = np.empty(K)
    for i in range(K):
        m = -np.inf
        for j in range(M):
            v = psi[j] - scaled[i, j]
            if v > m:
                m = v
        s = 0.0
        for j in range(M):
            s += np.exp(psi[j] - scaled[i, j] - m)
        lse_r[i] = m + np.log(s)
    iterations = 0
    residual = np.inf
    for it in range(1, max_iter + 1):
        iterations = it
        for i in range(K):
            phi[i] = log_mu[i] - lse_r[i]
        for j in range(M):
            m = -np.inf
            for i in range(K):
                v = phi[i] - scaled[i, j]
                if v > m:
                    m = v
            s = 0.0
            for i in range(K):
                s += np.exp(phi[i] - scaled[i, j] - m)
            psi[j] = log_nu[j] - (m + np.log(s))
        residual = 0.0
        for i in range(K):
            m = -np.inf
            for j in range(M):
                v = psi[j] - scaled[i, j]
                if v > m:
                    m = v
            s = 0.0
            for j in range(M):
                s += np.exp(psi[j] - scaled[i, j] - m)
            lse_r[i] = m + np.log(s)
            r = abs(np.exp(phi[i] + lse_r[i]) - mu[i])
            if r > residual:
                residual = r
        if residual <= tol:
            break
    plan = np.empty((K, M))
    for i in range(K):
        for j in range(M):
            plan[i, j] = np.exp(phi[i] + psi[j] - scaled[i, j])
    return plan, iterations, residual


@njit(cache=True)
def ipot(kern, mu, nu, outer, inner, tol):
    K, M = kern.shape
    plan = np.empty((K, M))
    for i in range(K):
        for j in range(M):
            plan[i, j] = mu[i] * nu[j]
    a = np.ones(K)
    b = np.ones(M)
    q = np.empty((K, M))
    prev = np.empty((K, M))
    iterations = 0
    residual = np.inf
    for it in range(1, outer + 1):
        iterations = it
        for i in range(K):
            for j in range(M):
                q[i, j] = kern[i, j] * plan[i, j]
                prev[i, j] = plan[i, j]
        for _ in range(inner):
            for i in range(K):
                s = 0.0
                for j in range(M):
                    s += q[i, j] * b[j]
                a[i] = mu[i] / s if mu[i] > 0.0 else 0.0
            for j in range(M):
                s = 0.0
                for i in range(K):
                    s += q[i, j] * a[i]
                b[j] = nu[j] / s if nu[j] > 0.0 else 0.0
        ok = True
        residual = 0.0
        change = 0.0
        for i in range(K):
            rs = 0.0
            for j in range(M):
                t = a[i] * q[i, j] * b[j]
                plan[i, j] = t
                if not np.isfinite(t):
                    ok = False
                rs += t
                c = abs(t - prev[i, j])
                if c > change:
                    change = c
            r = abs(rs - mu[i])
            if r > residual:
                residual = r
        if not ok:
            # Sentinel: the wrapper raises NumericInstabilityError.
            return plan, -1, residual
        if residual <= tol and change <= tol:
            break
    return plan, iterations, residual
