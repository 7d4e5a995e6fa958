"""Independent reference implementations used by the tests."""
from __future__ import annotations

import itertools

import numpy as np

from geocausal import tensor as T


def max_rel_error(analytic, numeric, floor: float) -> float:
    """max |a - n| / max(|a|, |n|, floor).

    ``floor`` keeps derivatives that sit at the float32 finite-difference
    resolution (about 3e-5 for O(1) losses at h=1e-3) from dividing by ~0.
    """
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))


def op_gradcheck(fn, inputs, h: float = 1e-3, seed: int = 0, floor: float = 1e-2):
    """Elementwise central differences of ``sum(fn(*inputs) * R)`` for a fixed random R.

    Returns the max relative error over all input entries.
    """
    rng = np.random.default_rng(seed)
    tensors = [T.Tensor(np.asarray(x, np.float32), requires_grad=True) for x in inputs]
    out = fn(*tensors)
    R = rng.normal(size=out.shape).astype(np.float32)
    T.backward(T.tsum(out * T.Tensor(R)))

    def value():
        return float(np.sum(fn(*[T.Tensor(t.values) for t in tensors]).values.astype(np.float64) * R))

    worst = 0.0
    for t in tensors:
        numeric = np.zeros(t.shape)
        flat = t.values.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = value()
            flat[i] = old - h
            down = value()
            flat[i] = old
            numeric.reshape(-1)[i] = (up - down) / (2 * h)
        worst = max(worst, max_rel_error(t.grad, numeric, floor))
    return worst


def brute_auc(scores, labels) -> float:
    """Pair counting: treated beats control scores 1, ties 1/2."""
    s = np.asarray(scores, float)
    y = np.asarray(labels)
    pos, neg = s[y == 1], s[y == 0]
    total = 0.0
    for a, b in itertools.product(pos, neg):
        total += 1.0 if a > b else 0.5 if a == b else 0.0
    return total / (len(pos) * len(neg))


def normal_equations_ols(X, y):
    """Coefficients, classical SEs and adjusted R^2 via explicit (X'X)^-1 X'y."""
    X = np.asarray(X, float)
    y = np.asarray(y, float)
    xtx_inv = np.linalg.inv(X.T @ X)
    beta = xtx_inv @ X.T @ y
    resid = y - X @ beta
    n, k = X.shape
    sigma2 = resid @ resid / (n - k)
    r2 = 1 - (resid @ resid) / np.sum((y - y.mean()) ** 2)
    adj = 1 - (1 - r2) * (n - 1) / (n - k)
    return beta, np.sqrt(np.diag(xtx_inv) * sigma2), adj


def dummy_twfe_sandwich(y, a, unit, period, cluster):
    """TWFE by explicit unit and period dummies; cluster sandwich with G/(G-1)."""
    units = sorted(set(unit))
    periods = sorted(set(period))
    cols = [np.asarray(a, float)]
    cols += [np.array([u == v for u in unit], float) for v in units]
    cols += [np.array([p == v for p in period], float) for v in periods[1:]]
    X = np.column_stack(cols)
    xtx_inv = np.linalg.pinv(X.T @ X)
    beta = xtx_inv @ X.T @ np.asarray(y, float)
    e = np.asarray(y, float) - X @ beta
    labels = sorted(set(cluster))
    meat = np.zeros((X.shape[1], X.shape[1]))
    for g in labels:
        rows = np.array([c == g for c in cluster])
        s = X[rows].T @ e[rows]
        meat += np.outer(s, s)
    G = len(labels)
    V = G / (G - 1) * xtx_inv @ meat @ xtx_inv
    return float(beta[0]), float(np.sqrt(V[0, 0]))


def projected_gradient_cca(A, B, ridge=1e-3, restarts=20, iters=3000, lr=0.05, seed=0):
    """Maximize w'Cxy v / sqrt(w'Cxx w * v'Cyy v) by gradient ascent on the unit spheres."""
    def std(M):
        M = M - M.mean(axis=0)
        sd = M.std(axis=0)
        return M / np.where(sd > 1e-12, sd, 1)

    A, B = std(np.asarray(A, float)), std(np.asarray(B, float))
    n = len(A)
    cxx = A.T @ A / n + ridge * np.eye(A.shape[1])
    cyy = B.T @ B / n + ridge * np.eye(B.shape[1])
    cxy = A.T @ B / n
    rng = np.random.default_rng(seed)
    best = -np.inf

    def rho(w, v):
        return (w @ cxy @ v) / np.sqrt((w @ cxx @ w) * (v @ cyy @ v))

    for _ in range(restarts):
        w = rng.normal(size=A.shape[1])
        v = rng.normal(size=B.shape[1])
        w /= np.linalg.norm(w)
        v /= np.linalg.norm(v)
        for _ in range(iters):
            sw, sv = w @ cxx @ w, v @ cyy @ v
            num = w @ cxy @ v
            gw = cxy @ v / np.sqrt(sw * sv) - num * (cxx @ w) / (sw ** 1.5 * np.sqrt(sv))
            gv = cxy.T @ w / np.sqrt(sw * sv) - num * (cyy @ v) / (sv ** 1.5 * np.sqrt(sw))
            w = w + lr * gw
            v = v + lr * gv
            w /= np.linalg.norm(w)
            v /= np.linalg.norm(v)
        best = max(best, abs(rho(w, v)))
    return float(best)


def sorted_median(stack, masks):
    """Median over valid scenes per pixel by explicit sorting; NaN where none is valid."""
    stack = np.asarray(stack, float)
    masks = np.asarray(masks, bool)
    k, b, h, w = stack.shape
    out = np.full((b, h, w), np.nan)
    for i in range(h):
        for j in range(w):
            vals_idx = [s for s in range(k) if masks[s, i, j]]
            for c in range(b):
                vals = sorted(stack[s, c, i, j] for s in vals_idx)
                m = len(vals)
                if m == 0:
                    continue
                out[c, i, j] = vals[m // 2] if m % 2 else 0.5 * (vals[m // 2 - 1] + vals[m // 2])
    return out
