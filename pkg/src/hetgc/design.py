"""Optimal approximate gradient code structure.

Each worker i gets a cost coefficient c_i = (p_i + eta*phi_i)/(1 - p_i).  The
minimum-residual-error structure gives worker i a total effective weight
(target mass) Y_i proportional to 1/c_i, normalized so the masses sum to the
number of partitions n.  Laying the masses end to end on [0, n] and reading
off their overlaps with the unit partitions gives a sparse effective-weight
matrix alpha with at most n + k - 1 nonzeros.
"""
import json
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import sparse

from . import quantizer
from .errors import DegenerateWorker, InfeasibleBudget, InvalidCost, InvalidMass
from .stragglers import p_vector

DROP_TOL = 1e-12


def cost_coeff(p, phi_z, eta=1.0):
    p = np.asarray(p, dtype=np.float64)
    if np.any(p >= 1):
        raise DegenerateWorker("straggler probability must be < 1")
    if eta <= 0:
        raise InvalidCost(f"eta must be positive, got {eta!r}")
    c = (p + eta * np.asarray(phi_z, dtype=np.float64)) / (1.0 - p)
    return float(c) if c.ndim == 0 else c


def phi_vector(z, l):
    return np.array([quantizer.variance_coeff(int(zi), l) for zi in z], dtype=np.float64)


def balance_eta(profiles, Z_tot, k, l):
    """Scale making eta*phi at the equal per-worker width equal the mean p."""
    if Z_tot < 2 * k:
        raise InfeasibleBudget(f"Z_tot={Z_tot} is below the 2 bits/worker minimum for k={k}")
    z_eq = Z_tot // k
    s = (1 << (z_eq - 1)) - 1
    return float(np.mean(p_vector(profiles))) * 4.0 * s * s / l


def target_masses(c, n):
    c = np.asarray(c, dtype=np.float64)
    if c.size == 0 or np.any(~(c > 0)) or not np.all(np.isfinite(c)):
        raise InvalidCost("cost coefficients must be positive and finite")
    inv = 1.0 / c
    return inv * (n / inv.sum())


def segment_construction(Y, n):
    """Sparse alpha with alpha[i, j] = overlap of [R_{i-1}, R_i] with [j, j+1]."""
    Y = np.asarray(Y, dtype=np.float64)
    if np.any(Y < 0) or abs(Y.sum() - n) >= 1e-9:
        raise InvalidMass(f"masses must be nonnegative and sum to n={n}, got sum {Y.sum()!r}")
    k = Y.size
    R = np.concatenate([[0.0], np.cumsum(Y)])
    R[-1] = float(n)
    R = np.maximum.accumulate(np.minimum(R, n))
    rows, cols, vals = [], [], []
    for i in range(k):
        lo, hi = R[i], R[i + 1]
        if hi <= lo:
            continue
        for j in range(int(math.floor(lo)), min(int(math.ceil(hi)), n)):
            v = min(hi, j + 1.0) - max(lo, float(j))
            if v > 0:
                rows.append(i)
                cols.append(j)
                vals.append(v)
    rows, cols, vals = np.array(rows, dtype=np.int64), np.array(cols, dtype=np.int64), np.array(vals)
    keep = vals >= DROP_TOL
    if not keep.all():
        # fold slivers into the largest surviving entry of the same column
        for idx in np.flatnonzero(~keep):
            same = np.flatnonzero(keep & (cols == cols[idx]))
            tgt = same[np.argmax(vals[same])]
            vals[tgt] += vals[idx]
        rows, cols, vals = rows[keep], cols[keep], vals[keep]
    alpha = sparse.csr_array((vals, (rows, cols)), shape=(k, n))
    alpha.sort_indices()
    return alpha


@dataclass(frozen=True, eq=False)
class CodeDesign:
    alpha: sparse.csr_array
    Y: np.ndarray
    A: sparse.csr_array
    w: np.ndarray
    tilde_w: np.ndarray
    c: np.ndarray
    p: np.ndarray
    phi: np.ndarray | None = None
    unbiased: bool = True
    label: str = ""
    meta: dict = field(default_factory=dict)

    @property
    def k(self):
        return self.A.shape[0]

    @property
    def n(self):
        return self.A.shape[1]

    @property
    def nnz(self):
        return int(self.A.count_nonzero())

    @property
    def avg_load(self):
        """Average number of workers per partition."""
        return self.nnz / self.n

    def row_sums(self):
        return np.asarray(self.A.sum(axis=1)).ravel()

    def effective_column_sums(self):
        """sum_i (1 - p_i) w_i a_ij for each partition j; all ones when unbiased."""
        scale = (1.0 - self.p) * self.w
        return np.asarray(self.A.T @ scale).ravel()

    def unbiasedness_residual(self):
        return float(np.max(np.abs(self.effective_column_sums() - 1.0)))

    def true_cost(self):
        """c_i with the actual quantizer variance (eta = 1)."""
        phi = np.zeros(self.k) if self.phi is None else self.phi
        return (self.p + phi) / (1.0 - self.p)

    def dense_A(self):
        return self.A.toarray()

    def to_dict(self):
        def coo(m):
            m = m.tocoo()
            return {"row": m.row.tolist(), "col": m.col.tolist(), "val": m.data.tolist()}

        return {
            "k": self.k, "n": self.n, "label": self.label, "unbiased": self.unbiased,
            "p": self.p.tolist(), "phi": None if self.phi is None else self.phi.tolist(),
            "c": self.c.tolist(), "Y": self.Y.tolist(), "tilde_w": self.tilde_w.tolist(),
            "w": self.w.tolist(), "alpha": coo(self.alpha), "A": coo(self.A),
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d):
        shape = (d["k"], d["n"])

        def csr(e):
            m = sparse.csr_array((np.array(e["val"], dtype=np.float64),
                                  (np.array(e["row"], dtype=np.int64), np.array(e["col"], dtype=np.int64))),
                                 shape=shape)
            m.sort_indices()
            return m

        arr = lambda key: np.array(d[key], dtype=np.float64)
        return cls(alpha=csr(d["alpha"]), Y=arr("Y"), A=csr(d["A"]), w=arr("w"),
                   tilde_w=arr("tilde_w"), c=arr("c"), p=arr("p"),
                   phi=None if d.get("phi") is None else arr("phi"),
                   unbiased=bool(d.get("unbiased", True)), label=d.get("label", ""),
                   meta=d.get("meta", {}))

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1)
            fh.write("\n")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def realize_code(alpha, profiles, rng=None, tilde_w=None, c=None, phi=None, label="optimal"):
    """Turn effective weights into physical encoding coefficients and decoders.

    Any nonzero tilde_w works; by default it is drawn from U[0.5, 1.5].
    """
    p = p_vector(profiles)
    if np.any(p >= 1):
        raise DegenerateWorker("straggler probability must be < 1")
    alpha = sparse.csr_array(alpha)
    alpha.sort_indices()
    k = alpha.shape[0]
    if tilde_w is None:
        tilde_w = rng.uniform(0.5, 1.5, size=k)
    tilde_w = np.asarray(tilde_w, dtype=np.float64)
    if np.any(tilde_w == 0):
        raise InvalidCost("effective decoders must be nonzero")
    A = sparse.csr_array(sparse.diags_array(1.0 / tilde_w) @ alpha)
    A.sort_indices()
    Y = np.asarray(alpha.sum(axis=1)).ravel()
    if c is None:
        c = np.full(k, np.nan)
    return CodeDesign(alpha=alpha, Y=Y, A=A, w=tilde_w / (1.0 - p), tilde_w=tilde_w,
                      c=np.asarray(c, dtype=np.float64), p=p,
                      phi=None if phi is None else np.asarray(phi, dtype=np.float64),
                      unbiased=True, label=label)


def optimal_design(profiles, n, z=None, l=None, rng=None, eta=1.0, tilde_w=None):
    """Minimum-residual design for the given bit widths (no quantization if z is None)."""
    p = p_vector(profiles)
    phi = np.zeros_like(p) if z is None else phi_vector(z, l)
    c = cost_coeff(p, phi, eta)
    Y = target_masses(c, n)
    alpha = segment_construction(Y, n)
    d = realize_code(alpha, profiles, rng, tilde_w=tilde_w, c=c,
                     phi=None if z is None else phi)
    return replace(d, meta={"eta": float(eta), "z": None if z is None else [int(v) for v in z]})


def residual_error_bound(c, n, C):
    c = np.asarray(c, dtype=np.float64)
    return n * n * C / float(np.sum(1.0 / c))


def estimator_second_moment_bound(c, n, C):
    c = np.asarray(c, dtype=np.float64)
    return n * n * C * (1.0 + 1.0 / float(np.sum(1.0 / c)))


def design_residual_bound(design, C):
    """C * sum_i c_i (sum_j alpha_ij)^2 with the true cost; valid for any unbiased design."""
    Y = (1.0 - design.p) * design.w * design.row_sums()
    return float(C * np.sum(design.true_cost() * Y * Y))


def structure_objective(alpha, c):
    rows = np.asarray(alpha.sum(axis=1)).ravel()
    return float(np.sum(np.asarray(c) * rows * rows))


def _phi_or_default(design, phi_vec):
    if phi_vec is not None:
        return np.asarray(phi_vec, dtype=np.float64)
    return np.zeros(design.k) if design.phi is None else design.phi


def two_track_decoder(design, phi_vec=None, Lambda=1.0):
    """Second-moment decoder minimizing Lambda*Bias(v) + Var(v).

    Workers with no assigned data get v_i = 0.
    """
    if Lambda < 0:
        raise InvalidCost(f"Lambda must be nonnegative, got {Lambda!r}")
    phi = _phi_or_default(design, phi_vec)
    p = design.p
    A = design.row_sums()
    active = A > 0
    noise = p + phi
    if np.any(noise[active] <= 0):
        raise InvalidCost("second-moment decoder needs p_i + phi_i > 0 on every active worker")
    S = float(np.sum((1.0 - p[active]) / noise[active]))
    v = np.zeros(design.k)
    v[active] = design.n * Lambda / (noise[active] * A[active] * (1.0 + Lambda * S))
    return v


def second_moment_objective(design, v, Lambda=None, phi_vec=None):
    """Return (bias, variance) of a second-moment decoder v.

    bias = [sum_j (1 - sum_i (1-p_i) v_i a_ij)]^2,
    variance = sum_i (1-p_i)(p_i+phi_i) v_i^2 (sum_j a_ij)^2.
    ``Lambda`` is accepted for symmetry with the weighted objective and unused.
    """
    phi = _phi_or_default(design, phi_vec)
    p = design.p
    v = np.asarray(v, dtype=np.float64)
    A = design.row_sums()
    col = np.asarray(design.A.T @ ((1.0 - p) * v)).ravel()
    bias = float(np.sum(1.0 - col)) ** 2
    var = float(np.sum((1.0 - p) * (p + phi) * v * v * A * A))
    return bias, var
