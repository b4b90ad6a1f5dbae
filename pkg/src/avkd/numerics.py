"""Dense numeric primitives used throughout the package.

Every array is a float64 ``numpy.ndarray``; training math stays in double
precision so central-difference gradient checks hold at 1e-4.
"""

from __future__ import annotations

import numpy as np

IN_EPS = 1e-10
PROB_FLOOR = 1e-12
FD_STEP = 1e-5


def instance_normalize(x, eps=IN_EPS):
    """Standardize each channel (column) of a ``T x D`` array over time.

    Population variance, ``eps`` inside the square root, no affine part.
    A constant channel maps to zeros.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ValueError(f"expected a T x D array with T >= 1, got shape {x.shape}")
    mu = x.mean(axis=0, keepdims=True)
    var = x.var(axis=0, keepdims=True)
    return (x - mu) / np.sqrt(var + eps)


def softmax(x, temperature=1.0, axis=-1):
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    z = np.asarray(x, dtype=np.float64) / temperature
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(x, temperature=1.0, axis=-1):
    z = np.asarray(x, dtype=np.float64) / temperature
    z = z - z.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def cosine_rows(a, B):
    """Cosine similarity of vector ``a`` against every row of ``B``.

    Entries involving a zero-norm vector are 0.
    """
    a = np.asarray(a, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if B.ndim != 2 or a.shape != (B.shape[1],):
        raise ValueError(f"shape mismatch: a {a.shape} vs B {B.shape}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(B, axis=1)
    denom = na * nb
    out = np.zeros(B.shape[0])
    ok = denom > 0
    out[ok] = (B[ok] @ a) / denom[ok]
    return np.clip(out, -1.0, 1.0)


def kl_divergence(target, pred, floor=PROB_FLOOR):
    """KL(target || pred) with both distributions floored before the log."""
    q = np.maximum(np.asarray(target, dtype=np.float64), floor)
    p = np.maximum(np.asarray(pred, dtype=np.float64), floor)
    t = np.asarray(target, dtype=np.float64)
    # terms with zero target mass contribute nothing
    val = float(np.sum(np.where(t > 0, t * (np.log(q) - np.log(p)), 0.0)))
    return max(val, 0.0)


def gelu(x):
    """Tanh approximation of GELU; returns (y, dy/dx)."""
    c = np.sqrt(2.0 / np.pi)
    u = c * (x + 0.044715 * x**3)
    th = np.tanh(u)
    y = 0.5 * x * (1.0 + th)
    dy = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th**2) * c * (1.0 + 3 * 0.044715 * x**2)
    return y, dy


def symmetric_eig(M):
    """Eigendecomposition of a symmetric matrix, eigenvalues descending."""
    M = np.asarray(M, dtype=np.float64)
    M = 0.5 * (M + M.T)
    w, V = np.linalg.eigh(M)
    order = np.argsort(w)[::-1]
    return w[order], V[:, order]


def check_gradient(f, x, analytic_grad, h=FD_STEP):
    """Max relative error between ``analytic_grad`` and central differences of ``f`` at ``x``.

    ``x`` is perturbed in place one coordinate at a time and restored.
    Error per coordinate is ``|a - n| / max(1e-8, |a| + |n|)``.
    """
    x = np.asarray(x)
    g = np.asarray(analytic_grad, dtype=np.float64)
    if g.shape != x.shape:
        raise ValueError(f"gradient shape {g.shape} != input shape {x.shape}")
    flat = x.reshape(-1)
    if not np.shares_memory(flat, x):
        raise ValueError("x must be a contiguous array that can be perturbed in place")
    worst = 0.0
    for i, a in enumerate(g.reshape(-1)):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        n = (fp - fm) / (2 * h)
        err = abs(a - n) / max(1e-8, abs(a) + abs(n))
        worst = max(worst, err)
    return worst
