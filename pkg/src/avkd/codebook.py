"""K-means codebooks over teacher frames and the distance-based soft labels
built from them."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import container


class DegenerateCodebookError(ValueError):
    """Soft labels are undefined for a codebook with zero inertia; use hard labels."""


@dataclass
class Codebook:
    centroids: np.ndarray
    inertia: float
    num_samples: int = 1
    history: list = field(default_factory=list)

    @property
    def num_clusters(self):
        return self.centroids.shape[0]

    @property
    def mean_inertia(self):
        """Inertia per fitted sample; the scale used by soft labels."""
        return self.inertia / self.num_samples


def _sq_dists(X, C, xx=None):
    if xx is None:
        xx = np.einsum("ij,ij->i", X, X)
    d = X @ (-2.0 * C.T)
    d += xx[:, None]
    d += np.einsum("ij,ij->i", C, C)[None, :]
    return np.maximum(d, 0.0, out=d)


def _centroid_sums(X, assign, n):
    order = np.argsort(assign, kind="stable")
    counts = np.bincount(assign, minlength=n)
    sums = np.zeros((n, X.shape[1]))
    nz = np.flatnonzero(counts)
    starts = np.concatenate(([0], np.cumsum(counts)[:-1]))[nz]
    sums[nz] = np.add.reduceat(X[order], starts, axis=0)
    return sums, counts


def _kmeanspp(X, n, rng):
    M = X.shape[0]
    centers = [int(rng.integers(M))]
    closest = _sq_dists(X, X[centers])[:, 0]
    for _ in range(1, n):
        total = closest.sum()
        if total <= 0:
            remaining = np.setdiff1d(np.arange(M), centers)
            idx = int(rng.choice(remaining))
        else:
            idx = int(rng.choice(M, p=closest / total))
        centers.append(idx)
        closest = np.minimum(closest, _sq_dists(X, X[idx:idx + 1])[:, 0])
    return X[centers].copy()


def _lloyd(X, C, max_iters, tol):
    history = []
    xx = np.einsum("ij,ij->i", X, X)
    rows = np.arange(len(X))
    for _ in range(max_iters):
        d = _sq_dists(X, C, xx)
        assign = d.argmin(1)
        own = d[rows, assign]
        history.append(float(own.sum()))
        sums, counts = _centroid_sums(X, assign, len(C))
        newC = sums / np.maximum(counts, 1)[:, None]
        # empty clusters: re-seed from the point farthest from its centroid
        for j in np.flatnonzero(counts == 0):
            far = int(own.argmax())
            newC[j] = X[far]
            own[far] = -1.0
        shift = float(np.sqrt(((newC - C) ** 2).sum(1)).max())
        C = newC
        if shift < tol:
            break
    # final inertia from exact differences, not the expanded form
    assign = _sq_dists(X, C, xx).argmin(1)
    inertia = float(((X - C[assign]) ** 2).sum())
    history.append(inertia)
    return C, assign, inertia, history


def _hartigan(X, assign, N, max_passes=50):
    """Single-point transfers that strictly lower inertia, until none remain.

    Each pass screens all points at once against the current centroids and
    then visits only the candidates, re-checking each against the centroids
    as they move.
    """
    assign = assign.copy()
    sums, counts = _centroid_sums(X, assign, N)
    counts = counts.astype(np.float64)
    rows = np.arange(X.shape[0])
    for _ in range(max_passes):
        C = sums / np.maximum(counts, 1)[:, None]
        d = ((X[:, None, :] - C[None]) ** 2).sum(-1) if X.shape[0] * N <= 1 << 20 else _sq_dists(X, C)
        na = counts[assign]
        remove = np.where(na > 1, na / np.maximum(na - 1, 1) * d[rows, assign], np.inf)
        add = counts / (counts + 1) * d
        add[rows, assign] = np.inf
        candidates = np.flatnonzero(add.min(1) < remove * (1 - 1e-9))
        moved = False
        for i in candidates:
            a = assign[i]
            if counts[a] <= 1:
                continue
            C = sums / np.maximum(counts, 1)[:, None]
            di = ((C - X[i]) ** 2).sum(1)
            rem = counts[a] / (counts[a] - 1) * di[a]
            ad = counts / (counts + 1) * di
            ad[a] = np.inf
            b = int(ad.argmin())
            if ad[b] < rem * (1 - 1e-12) - 1e-15:
                counts[a] -= 1
                counts[b] += 1
                sums[a] -= X[i]
                sums[b] += X[i]
                assign[i] = b
                moved = True
        if not moved:
            break
    return assign


def _refine(X, N, run, max_iters, tol):
    C, assign, inertia, hist = run
    assign = _hartigan(X, assign, N)
    C = np.stack([X[assign == j].mean(0) for j in range(N)])
    C, assign, inertia, tail = _lloyd(X, C, max_iters, tol)
    return C, assign, inertia, hist + tail


REFINE_ALL_BELOW = 2000


def fit_kmeans(samples, N, seed=0, max_iters=100, tol=1e-6, n_init=10, refine=True):
    """Lloyd's algorithm from k-means++ seeds; best of ``n_init`` restarts.

    With ``refine`` Lloyd solutions are polished by Hartigan transfers and a
    final Lloyd pass, which escapes Lloyd fixed points that are not local
    optima of the partition. Below ``REFINE_ALL_BELOW`` samples every restart
    is refined; above it only the winning restart (the transfer loop is
    per-sample Python).
    """
    X = np.asarray(samples, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    if X.shape[0] < N:
        raise ValueError(f"need at least N={N} samples, got {X.shape[0]}")
    rng = np.random.default_rng(seed)
    refine = refine and N > 1
    small = X.shape[0] < REFINE_ALL_BELOW
    best = None
    for _ in range(n_init):
        run = _lloyd(X, _kmeanspp(X, N, rng), max_iters, tol)
        if refine and small:
            run = _refine(X, N, run, max_iters, tol)
        if best is None or run[2] < best[2]:
            best = run
    if refine and not small:
        best = _refine(X, N, best, max_iters, tol)
    C, _, inertia, hist = best
    return Codebook(centroids=C, inertia=inertia, num_samples=X.shape[0], history=hist)


def hard_label(h, cb: Codebook):
    """Index of the nearest centroid; ties go to the lowest index."""
    d = ((cb.centroids - np.asarray(h)) ** 2).sum(1)
    return int(np.argmin(d))


def _exact_sq_dists(H, C, chunk=2048):
    out = np.empty((H.shape[0], C.shape[0]))
    for s in range(0, H.shape[0], chunk):
        out[s:s + chunk] = ((H[s:s + chunk, None, :] - C[None]) ** 2).sum(-1)
    return out


def hard_labels(H, cb: Codebook):
    H = np.atleast_2d(np.asarray(H, dtype=np.float64))
    return _exact_sq_dists(H, cb.centroids).argmin(1)


def soft_labels(H, cb: Codebook, tau_prime):
    """Soft labels for every row of ``H`` (``M x D`` -> ``M x N``)."""
    if tau_prime <= 0:
        raise ValueError("tau_prime must be positive")
    if cb.inertia <= 0:
        raise DegenerateCodebookError("codebook inertia is 0; fall back to hard one-hot labels")
    H = np.atleast_2d(np.asarray(H, dtype=np.float64))
    z = -_exact_sq_dists(H, cb.centroids) / (tau_prime * cb.mean_inertia)
    z -= z.max(1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(1, keepdims=True)


def soft_label(h, cb: Codebook, tau_prime):
    return soft_labels(np.asarray(h)[None, :], cb, tau_prime)[0]


def save_codebook(cb: Codebook, path):
    container.write_tensors(path, [cb.centroids, np.array([[cb.inertia]]), np.array([[float(cb.num_samples)]])])


def load_codebook(path) -> Codebook:
    tensors = container.read_tensors(path)
    if len(tensors) not in (2, 3) or tensors[1].shape != (1, 1):
        raise container.ShapeMismatchError("codebook file must hold centroids and a 1x1 inertia")
    n = int(tensors[2][0, 0]) if len(tensors) == 3 else 1
    return Codebook(centroids=tensors[0], inertia=float(tensors[1][0, 0]), num_samples=n)
