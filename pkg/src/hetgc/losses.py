"""Synthetic partitioned losses: least squares and binary logistic regression.

Both keep the data split into n partitions so that partition gradients g_j
can be encoded by workers.  All evaluation methods take a batch of parameter
vectors with shape (B, l) and return per-row results.
"""
from dataclasses import dataclass

import numpy as np

from .errors import InvalidInput


class QuadraticLoss:
    """L(beta) = sum_j [0.5 ||A_j beta - b_j||^2 + 0.5 (ridge/n) ||beta||^2].

    Partition Hessians are formed only when the blocks have at least l/2 rows;
    otherwise gradients go through the rows directly.
    """

    kind = "QUADRATIC"

    def __init__(self, A, b, ridge=0.0):
        A = np.asarray(A, dtype=np.float64)
        b = np.asarray(b, dtype=np.float64)
        if A.ndim == 2:
            # diagonal blocks: row r of block j is A[j, r] * e_r
            if b.shape != A.shape:
                raise InvalidInput("diagonal blocks need A and b of equal shape (n, l)")
            self.mode = "diag"
            self.n, self.dim = A.shape
            self.m = self.dim
        elif A.ndim == 3 and b.shape == A.shape[:2]:
            self.n, self.m, self.dim = A.shape
            self.mode = "rows" if 2 * self.m < self.dim else "dense"
        else:
            raise InvalidInput("A must be (n, m, l) with b (n, m), or (n, l) diagonal blocks with b (n, l)")
        self.A, self.b, self.ridge = A, b, float(ridge)
        if self.mode == "diag":
            h = np.sum(A * A, axis=0) + self.ridge
            self.H_diag = h
            self._D = A * A + self.ridge / self.n
            self._Ab = A * b
            self.c_tot = np.sum(A * b, axis=0)
            self.strong_convexity = float(h.min())
            self.smoothness = float(h.max())
            self.optimum = self.c_tot / h if h.min() > 0 else None
            return
        eye = np.eye(self.dim)
        if self.mode == "dense":
            self.H = np.einsum("jml,jmk->jlk", A, A) + (self.ridge / self.n) * eye[None]
            self.c = np.einsum("jml,jm->jl", A, b)
        self.H_tot = np.einsum("jml,jmk->lk", A, A) + self.ridge * eye
        self.c_tot = np.einsum("jml,jm->l", A, b)
        eig = np.linalg.eigvalsh(self.H_tot)
        self.strong_convexity = float(eig[0])
        self.smoothness = float(eig[-1])
        self.optimum = np.linalg.solve(self.H_tot, self.c_tot) if eig[0] > 0 else None

    @classmethod
    def from_blocks(cls, A_blocks, b_blocks, ridge=0.0):
        return cls(np.stack(A_blocks), np.stack(b_blocks), ridge)

    def partition_grads(self, beta, indices=None):
        """Per-partition gradients, shape (B, n, l).

        ``indices`` (B, n, batch) selects sampled rows per partition (drawn
        uniformly with replacement); the estimate is rescaled to stay unbiased.
        """
        beta = np.atleast_2d(beta)
        shrink = (self.ridge / self.n) * beta[:, None, :]
        if self.mode == "diag":
            if indices is None:
                return self._D * beta[:, None, :] - self._Ab
            full = self.A * (self.A * beta[:, None, :] - self.b[None])
            B, n, batch = indices.shape
            flat = (np.arange(B * n).reshape(B, n, 1) * self.dim + indices).ravel()
            counts = np.bincount(flat, minlength=B * n * self.dim).reshape(B, n, self.dim)
            return (self.m / batch) * counts * full + shrink
        if indices is not None:
            part = np.arange(self.n)[None, :, None]
            rows = self.A[part, indices]
            resid = np.einsum("bjsl,bl->bjs", rows, beta) - self.b[part, indices]
            scale = self.m / indices.shape[2]
            return scale * np.einsum("bjsl,bjs->bjl", rows, resid) + shrink
        if self.mode == "rows":
            resid = np.einsum("jml,bl->bjm", self.A, beta) - self.b[None]
            return np.einsum("jml,bjm->bjl", self.A, resid) + shrink
        return np.einsum("jlk,bk->bjl", self.H, beta) - self.c[None]

    def encoded_grads(self, W, betas):
        """Rows sum_j W[r, j] g_j(betas[r]) without forming every partition gradient."""
        W = np.atleast_2d(W)
        betas = np.atleast_2d(betas)
        if self.mode == "diag":
            return (W @ self._D) * betas - W @ self._Ab
        grads = self.partition_grads(betas)
        return np.einsum("rn,rnl->rl", W, grads)

    def grad(self, beta):
        beta = np.atleast_2d(beta)
        if self.mode == "diag":
            return beta * self.H_diag - self.c_tot
        return beta @ self.H_tot - self.c_tot

    def loss(self, beta):
        beta = np.atleast_2d(beta)
        if self.mode == "diag":
            quad = 0.5 * (beta * beta) @ self.H_diag - beta @ self.c_tot
            return quad + 0.5 * float(np.sum(self.b * self.b))
        else:
            resid = np.einsum("jml,bl->bjm", self.A, beta) - self.b[None]
        return 0.5 * np.einsum("bjm,bjm->b", resid, resid) + 0.5 * self.ridge * np.einsum("bl,bl->b", beta, beta)

    def optimal_loss(self):
        return float(self.loss(self.optimum)[0]) if self.optimum is not None else None

    def _pinned(self, lam):
        """Same data with the diagonal shift adjusted so the smallest eigenvalue is ``lam``."""
        gap = lam - self.strong_convexity
        if abs(gap) <= 1e-12:
            return self
        return QuadraticLoss(self.A, self.b, self.ridge + gap)


class LogisticLoss:
    """Sum over partitions of the mean logistic loss on that partition's samples.

    Labels are +/-1.  An optional ridge term ridge/2 ||beta||^2 is split evenly
    across partitions, so the strong convexity constant is ``ridge``.
    """

    kind = "LOGISTIC"

    def __init__(self, X, y, ridge=0.0):
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        if X.ndim != 3 or y.shape != X.shape[:2]:
            raise InvalidInput("X must be (n, m, l) and y must be (n, m)")
        self.X, self.y, self.ridge = X, y, float(ridge)
        self.n, self.m, self.dim = X.shape
        gram = np.einsum("jml,jmk->lk", X, X) / self.m
        self.smoothness = 0.25 * float(np.linalg.eigvalsh(gram)[-1]) + self.ridge
        self.strong_convexity = self.ridge
        self.optimum = None
        self._yX = y[:, :, None] * X
        self._flat = self._yX.reshape(self.n * self.m, self.dim)

    def _margins(self, beta):
        return (beta @ self._flat.T).reshape(beta.shape[0], self.n, self.m)

    def partition_grads(self, beta, indices=None):
        beta = np.atleast_2d(beta)
        if indices is None:
            weights = -_sigmoid(-self._margins(beta)) / self.m
            g = np.matmul(weights.transpose(1, 0, 2), self._yX).transpose(1, 0, 2)
        else:
            idx = indices
            batch = idx.shape[2]
            yx = self._yX[np.arange(self.n)[None, :, None], idx]
            marg = np.einsum("bjsl,bl->bjs", yx, beta)
            g = np.einsum("bjs,bjsl->bjl", -_sigmoid(-marg) / batch, yx)
        return g + (self.ridge / self.n) * beta[:, None, :]

    def grad(self, beta):
        beta = np.atleast_2d(beta)
        weights = -_sigmoid(-self._margins(beta)) / self.m
        return weights.reshape(beta.shape[0], -1) @ self._flat + self.ridge * beta

    def loss(self, beta):
        beta = np.atleast_2d(beta)
        data = np.logaddexp(0.0, -self._margins(beta)).mean(axis=2).sum(axis=1)
        return data + 0.5 * self.ridge * np.einsum("bl,bl->b", beta, beta)

    def optimal_loss(self):
        return None


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def make_quadratic(n, l, lambda_target, rng, rows=None, spread=1.0, diagonal=False):
    """Random least-squares problem whose summed Hessian has smallest eigenvalue lambda_target.

    With at least 2l rows in total, half of ``lambda_target`` comes from the
    data and half from a diagonal shift; with fewer rows the data Gram matrix
    is singular and the shift supplies all of it.  Each partition has its own local optimum (scale ``spread``), so the
    partition gradients do not vanish together.
    """
    if n < 1 or l < 1 or lambda_target <= 0:
        raise InvalidInput("need n, l >= 1 and lambda_target > 0")
    if diagonal:
        # block j scales coordinate r by a_jr in [0.5, 1.5] / sqrt(n)
        A = rng.uniform(0.5, 1.5, size=(n, l)) / np.sqrt(n)
        local = spread * rng.standard_normal((n, l))
        b = A * local + 0.1 * spread * rng.standard_normal((n, l)) / np.sqrt(n)
        h = np.sum(A * A, axis=0)
        return QuadraticLoss(A, b, lambda_target - h.min() if h.min() < lambda_target else 0.0)._pinned(lambda_target)
    m = rows or l
    A = rng.standard_normal((n, m, l)) / np.sqrt(n * m)
    data_min = np.linalg.eigvalsh(np.einsum("jml,jmk->lk", A, A))[0]
    if n * m >= 2 * l and data_min > 1e-12:
        A *= np.sqrt(0.5 * lambda_target / data_min)
        ridge = 0.5 * lambda_target
    else:
        ridge = lambda_target
    local = spread * rng.standard_normal((n, l))
    b = np.einsum("jml,jl->jm", A, local) + 0.1 * spread * rng.standard_normal((n, m)) / np.sqrt(n * m)
    return QuadraticLoss(A, b, ridge)._pinned(lambda_target)


def make_logistic(n, l, samples_per_partition, rng, ridge=0.0, separation=1.0, scale=1.0):
    """Two Gaussian blobs at +/- separation*mu/sqrt(l) with unit noise, features times scale/sqrt(l)."""
    m = samples_per_partition
    mu = rng.standard_normal(l)
    mu /= np.linalg.norm(mu)
    y = np.where(rng.random((n, m)) < 0.5, -1.0, 1.0)
    X = y[:, :, None] * separation * mu + rng.standard_normal((n, m, l))
    return LogisticLoss(X * (scale / np.sqrt(l)), y, ridge)


def calibrate_C(loss, beta_samples, headroom=1.1, floor=1e-12):
    """Assumed bound on every partition gradient's squared norm over the sample points."""
    beta_samples = np.atleast_2d(np.asarray(beta_samples, dtype=np.float64))
    g = loss.partition_grads(beta_samples)
    return max(headroom * float(np.max(np.einsum("bjl,bjl->bj", g, g))), floor)
