"""Permutohedral-lattice Gaussian filtering.

Approximates ``out_i = sum_j exp(-|f_i - f_j|^2 / 2) v_j`` for points ``f``
in d dimensions.  Values are splatted onto the vertices of the enclosing
simplex in the (d+1)-dimensional permutohedral lattice, blurred along each
of the d+1 lattice axes with a [1/2, 1, 1/2] stencil, and sliced back with
the same barycentric weights (Adams, Baek and Davis 2010).  Splat, blur and
slice are all linear, so the lattice is stored as scipy sparse matrices and
reused for every filtering call on the same points.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp


class PermutohedralLattice:
    """Lattice built once for a fixed point set, applied to many value arrays.

    Parameters
    ----------
    features : ndarray of shape (n_points, d)
        Point positions, already divided by the kernel standard deviations.
    dtype : numpy dtype
        Precision of the stored operators and of the filtered values.
        Single precision halves the memory traffic of every filter call.
    """

    def __init__(self, features: np.ndarray, dtype=np.float64):
        self.dtype = np.dtype(dtype)
        features = np.ascontiguousarray(features, dtype=np.float64)
        if features.ndim != 2 or features.shape[1] < 1:
            raise ValueError(f"features must have shape (n, d), got {features.shape}")
        self.n_points, self.dim = features.shape
        self._build(features)

    def _build(self, features: np.ndarray) -> None:
        n, d = features.shape
        # Scale so the lattice blur matches a unit-variance Gaussian.
        inv_std = np.sqrt(2.0 / 3.0) * (d + 1)
        scale = inv_std / np.sqrt((np.arange(d) + 1.0) * (np.arange(d) + 2.0))
        cf = features * scale

        # Elevate onto the hyperplane x . 1 = 0 in d+1 dimensions.
        elevated = np.empty((n, d + 1))
        elevated[:, d] = -d * cf[:, d - 1]
        for i in range(d - 1, 0, -1):
            elevated[:, i] = elevated[:, i + 1] - i * cf[:, i - 1] + (i + 2) * cf[:, i]
        elevated[:, 0] = elevated[:, 1] + 2 * cf[:, 0]

        # Nearest remainder-zero lattice point.
        down = 1.0 / (d + 1)
        v = elevated * down
        up = np.ceil(v) * (d + 1)
        dn = np.floor(v) * (d + 1)
        rem0 = np.where(up - elevated < elevated - dn, up, dn)
        total = np.rint(rem0.sum(axis=1) * down).astype(np.int64)

        # Rank of each coordinate's offset from rem0, ties broken by index.
        diff = elevated - rem0
        rank = np.zeros((n, d + 1), dtype=np.int64)
        for i in range(d + 1):
            for j in range(i + 1, d + 1):
                lt = diff[:, i] < diff[:, j]
                rank[:, i] += lt
                rank[:, j] += ~lt

        # Wrap points whose coordinates do not sum to zero back onto the plane.
        pos = (total > 0)[:, None]
        neg = (total < 0)[:, None]
        tc = total[:, None]
        hi = pos & (rank >= d + 1 - tc)
        rem0 = rem0 - (d + 1) * hi
        rank = np.where(hi, rank + tc - (d + 1), np.where(pos, rank + tc, rank))
        lo = neg & (rank < -tc)
        rem0 = rem0 + (d + 1) * lo
        rank = np.where(lo, rank + d + 1 + tc, np.where(neg, rank + tc, rank))

        # Barycentric weights of the d+1 enclosing simplex vertices.
        diff = (elevated - rem0) * down
        bary = np.zeros((n, d + 2))
        rows = np.broadcast_to(np.arange(n)[:, None], rank.shape)
        # ranks are a permutation per row, so neither scatter has duplicates
        bary[rows, d - rank] = diff
        bary[rows, d + 1 - rank] -= diff
        bary[:, 0] += 1.0 + bary[:, d + 1]

        # Integer keys of the enclosing vertices; the last coordinate is
        # implied by the zero-sum constraint and dropped.
        rem0 = rem0.astype(np.int64)
        keys = np.empty((n, d + 1, d), dtype=np.int64)
        for k in range(d + 1):
            keys[:, k, :] = rem0[:, :d] + np.where(rank[:, :d] <= d - k, k, k - (d + 1))
        flat = keys.reshape(-1, d)

        # Hash keys to dense codes with room for a one-step neighbour margin.
        lo_key = flat.min(axis=0) - (d + 1)
        span = flat.max(axis=0) - lo_key + (d + 2)
        mult = np.cumprod(np.concatenate([[1], span[:-1]])).astype(np.int64)
        codes = (flat - lo_key) @ mult
        uniq, inv = np.unique(codes, return_inverse=True)
        m = uniq.size
        inv = inv.ravel()

        self.n_vertices = m
        # Every point has exactly d+1 vertices, so the slice matrix is built
        # straight in CSR form; splatting uses its transpose.
        self._slice = sp.csr_matrix(
            (bary[:, : d + 1].ravel().astype(self.dtype), inv,
             np.arange(0, n * (d + 1) + 1, d + 1)),
            shape=(n, m),
        )
        self._splat = self._slice.T.tocsr()

        # Each blur row holds the vertex itself and its two neighbours along
        # one lattice axis.  A missing neighbour is stored as a zero-weight
        # self entry, which keeps every row at exactly three entries.
        # Codes are linear in the keys, so a step along a lattice axis is a
        # constant code offset and the shifted queries stay sorted.
        self._blurs = []
        ident = np.arange(m)
        indptr = np.arange(0, 3 * m + 1, 3)
        for j in range(d + 1):
            step = np.full(d, -1, dtype=np.int64)
            if j < d:
                step[j] = d
            delta = int(step @ mult)
            cols = [ident]
            vals = [np.ones(m)]
            for sign in (1, -1):
                c = uniq + sign * delta
                idx = np.minimum(np.searchsorted(uniq, c), m - 1)
                hit = uniq[idx] == c
                cols.append(np.where(hit, idx, ident))
                vals.append(np.where(hit, 0.5, 0.0))
            self._blurs.append(
                sp.csr_matrix(
                    (np.stack(vals, axis=1).ravel().astype(self.dtype),
                     np.stack(cols, axis=1).ravel(), indptr),
                    shape=(m, m),
                )
            )
        self._alpha = 1.0 / (1.0 + 2.0 ** (-d))

    def filter(self, values: np.ndarray, normalize: bool = True) -> np.ndarray:
        """Gaussian-filter ``values`` of shape (n_points,) or (n_points, k).

        With ``normalize=False`` the constant lattice gain ``1 / (1 + 2^-d)``
        is left out, which saves a pass when the caller rescales anyway.
        """
        values = np.asarray(values, dtype=self.dtype)
        if values.shape[0] != self.n_points:
            raise ValueError(
                f"expected {self.n_points} rows of values, got {values.shape[0]}"
            )
        x = self._splat @ values
        for blur in self._blurs:
            x = blur @ x
        out = self._slice @ x
        if normalize:
            out *= self._alpha
        return out
