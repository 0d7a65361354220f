"""Residual-bit allocation across workers.

Every worker needs 2 bits per coordinate (sign plus one magnitude bit); the
remaining Z_res bits are split to maximize F(r) = sum_i h_i(r_i), where

    h_i(r) = (1 - p_i) / (p_i + eta * phi(r + 2)).

h_i is sigmoidal in r, so the problem is a non-concave separable knapsack.
``dp_allocate`` solves it exactly; ``proposed_allocate`` is the low-complexity
hybrid (top-kappa Lagrangian / equal candidates plus 1-bit swap refinement).
"""
import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from . import quantizer
from .errors import InstanceTooLarge, InvalidInput
from .stragglers import p_vector

LN2 = math.log(2.0)
BISECTION_STEPS = 60
ORACLE_LIMIT = 10**7


@dataclass(frozen=True, eq=False)
class BitAllocation:
    r: np.ndarray
    Z_res: int
    objective: float
    solver: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        r = np.asarray(self.r, dtype=np.int64).ravel()
        if np.any(r < 0):
            raise InvalidInput("residual bits must be nonnegative")
        if int(r.sum()) != self.Z_res:
            raise InvalidInput(f"allocation sums to {int(r.sum())}, budget is {self.Z_res}")
        r.setflags(write=False)
        object.__setattr__(self, "r", r)

    @property
    def z(self):
        return self.r + 2

    @property
    def Z_tot(self):
        return self.Z_res + 2 * self.r.size

    def __repr__(self):
        return f"BitAllocation(solver={self.solver!r}, r={self.r.tolist()}, F={self.objective:.6g})"


def utility(p, r, l, eta=1.0):
    return (1.0 - p) / (p + eta * quantizer.variance_coeff(int(r) + 2, l))


def utility_table(p, l, R, eta=1.0):
    """h_i(r) for r = 0..R as a (k, R+1) array; huge r saturate to (1-p)/p."""
    p = np.asarray(p, dtype=np.float64)
    with np.errstate(over="ignore"):
        s = np.exp2(np.arange(R + 1, dtype=np.float64) + 1.0) - 1.0
        phi = l / (4.0 * s * s)
    return (1.0 - p)[:, None] / (p[:, None] + eta * phi[None, :])


def objective(r, profiles, l, eta=1.0):
    p = p_vector(profiles)
    r = np.asarray(r, dtype=np.int64)
    table = utility_table(p, l, int(r.max(initial=0)), eta)
    return float(table[np.arange(p.size), r].sum())


def _result(r, profiles, l, Z_res, eta, solver, **meta):
    r = np.asarray(r, dtype=np.int64)
    return BitAllocation(r, int(Z_res), objective(r, profiles, l, eta), solver, meta)


def dp_allocate(profiles, l, Z_res, eta=1.0):
    """Exact optimum via V[i, r] = max_a V[i-1, r-a] + h_i(a); ties go to the smallest a."""
    p = p_vector(profiles)
    k, Z = p.size, int(Z_res)
    H = utility_table(p, l, Z, eta)
    back = np.empty((k, Z + 1), dtype=np.int64)
    back[0] = np.arange(Z + 1)
    V = H[0].copy()
    a = np.arange(Z + 1)
    # rows of (r, a) candidates are processed in blocks to bound memory
    block = max(1, (1 << 20) // (Z + 1))
    for i in range(1, k):
        newV = np.empty_like(V)
        for start in range(0, Z + 1, block):
            rr = np.arange(start, min(Z + 1, start + block))
            idx = rr[:, None] - a[None, :]
            cand = np.where(idx >= 0, V[np.maximum(idx, 0)] + H[i][None, :], -np.inf)
            best = np.argmax(cand, axis=1)
            back[i, rr] = best
            newV[rr] = cand[np.arange(rr.size), best]
        V = newV
    r = np.zeros(k, dtype=np.int64)
    rem = Z
    for i in range(k - 1, -1, -1):
        r[i] = back[i, rem]
        rem -= r[i]
    return _result(r, profiles, l, Z, eta, "dp")


def exhaustive_oracle(profiles, l, Z_res, eta=1.0):
    """Enumerate every weak composition of Z_res into k parts."""
    p = p_vector(profiles)
    k, Z = p.size, int(Z_res)
    count = math.comb(Z + k - 1, k - 1)
    if count > ORACLE_LIMIT:
        raise InstanceTooLarge(f"{count} compositions exceed the enumeration limit {ORACLE_LIMIT}")
    H = utility_table(p, l, Z, eta).tolist()
    best_f, best_r = -math.inf, None
    for bars in itertools.combinations(range(Z + k - 1), k - 1):
        edges = (-1,) + bars + (Z + k - 1,)
        r = [edges[i + 1] - edges[i] - 1 for i in range(k)]
        f = sum(H[i][r[i]] for i in range(k))
        if f > best_f:
            best_f, best_r = f, r
    return _result(best_r, profiles, l, Z, eta, "exhaustive")


def greedy_allocate(profiles, l, Z_res, eta=1.0):
    """Hand out bits one at a time to the largest marginal gain (ties: lowest index)."""
    p = p_vector(profiles)
    k, Z = p.size, int(Z_res)
    H = utility_table(p, l, Z, eta).tolist()
    r = [0] * k
    for _ in range(Z):
        gains = [H[i][r[i] + 1] - H[i][r[i]] for i in range(k)]
        i = max(range(k), key=gains.__getitem__)
        r[i] += 1
    return _result(r, profiles, l, Z, eta, "greedy")


def equal_allocate(subset, budget):
    """Spread ``budget`` over ``subset`` (sorted order); the first budget % kappa get one extra."""
    kappa = len(subset)
    q, extra = divmod(int(budget), kappa)
    return np.array([q + 1] * extra + [q] * (kappa - extra), dtype=np.int64)


class _Marginals:
    """Continuous extension of h_i over r >= 0 through s = 2^(r+1) - 1.

    h(s) = (1-p) 4 s^2 / (4 p s^2 + L) with L = eta*l, and
    dh/dr = K s (s+1) / (4 p s^2 + L)^2 with K = 8 (1-p) L ln 2.
    Works on any array shape of straggler probabilities.
    """

    def __init__(self, p, l, eta, budget):
        p = np.asarray(p, dtype=np.float64)
        self.p = np.maximum(p, 1e-300)
        self.L = float(eta) * l
        self.K = 8.0 * (1.0 - p) * self.L * LN2
        self.root_k = np.sqrt(self.K)
        # beyond ~120 residual bits phi is far below double precision
        self.s_max = 2.0 ** (min(budget, 120) + 1) - 1.0
        # dh/dr peaks where 8 p s^3 + 12 p s^2 - 2 L s - L = 0
        s = np.sqrt(self.L / (4.0 * self.p)) + 1.0
        for _ in range(100):
            f = 8 * self.p * s**3 + 12 * self.p * s**2 - 2 * self.L * s - self.L
            df = 24 * self.p * s**2 + 24 * self.p * s - 2 * self.L
            step = f / df
            s = s - step
            if np.all(np.abs(step) <= 1e-13 * s):
                break
        self.s_peak = np.minimum(np.maximum(s, 1.0), self.s_max)
        self.peak = self.deriv(self.s_peak)

    def deriv(self, s):
        t = 1.0 / s
        return self.K * (t * t + t * t * t) / (4.0 * self.p + self.L * t * t) ** 2

    def s_at(self, lam):
        """Concave-branch solution of dh/dr = lam (s = 1, i.e. r = 0, above the peak)."""
        p, L, K = self.p, self.L, self.K
        root_l = np.sqrt(lam)
        # sqrt of both sides with s(s+1) ~ (s+1/2)^2 gives a quadratic in s
        disc = np.maximum(K - 16.0 * p * root_l * (root_l * L - 0.5 * self.root_k), 0.0)
        s = (self.root_k + np.sqrt(disc)) / (8.0 * p * root_l)
        for _ in range(2):
            q = 4.0 * p * s * s + L
            g = K * s * (s + 1.0) - lam * q * q
            dg = K * (2.0 * s + 1.0) - 16.0 * lam * p * s * q
            s = s - g / np.where(dg < 0, dg, -np.inf)
        s = np.maximum(s, self.s_peak)
        s[lam >= self.peak] = 1.0
        return np.minimum(np.maximum(s, 1.0), self.s_max)

    def r_at(self, lam):
        return np.log2(self.s_at(lam) + 1.0) - 1.0


def _continuous_split_batch(p_sorted, l, budget, eta, kappas):
    """Water-filling points of the relaxation on nested top-kappa supports.

    Row m solves the relaxation over the first kappas[m] workers of
    ``p_sorted`` by bisection on log(lambda) inside [min_i h_i'(budget),
    max_i peak h_i'].  Returns a (len(kappas), k) array with zeros outside each
    support, plus a mask of rows where no valid bracket exists.
    """
    k = p_sorted.size
    kappas = np.asarray(kappas)
    rows = kappas.size
    active = np.arange(k)[None, :] < kappas[:, None]
    m = _Marginals(np.broadcast_to(p_sorted, (rows, k)), l, eta, budget)
    d_budget = m.deriv(np.full((rows, k), m.s_max))
    lo = np.where(active, d_budget, np.inf).min(axis=1)[:, None]
    hi = np.where(active, m.peak, 0.0).max(axis=1)[:, None]
    bad = ~(np.isfinite(lo) & (lo > 0) & (lo < hi)).ravel()
    lo = np.where(bad[:, None], 1.0, lo)
    hi = np.where(bad[:, None], 2.0, hi)

    def r_of(lam):
        return np.where(active, m.r_at(np.broadcast_to(lam, (rows, k)).copy()), 0.0)

    r_lo, r_hi = r_of(lo), np.zeros((rows, k))
    for _ in range(BISECTION_STEPS):
        mid = np.sqrt(lo * hi)
        r_mid = r_of(mid)
        over = (r_mid.sum(axis=1) >= budget)[:, None]
        lo = np.where(over, mid, lo)
        hi = np.where(over, hi, mid)
        r_lo = np.where(over, r_mid, r_lo)
        r_hi = np.where(over, r_hi, r_mid)
    # the relaxation can jump at a peak; keep the side closer to the budget
    use_hi = (budget - r_hi.sum(axis=1)) < (r_lo.sum(axis=1) - budget)
    return np.where(use_hi[:, None], r_hi, r_lo), bad


def _round_to_budget(r_cont, H, budget):
    """Largest-remainder rounding, then +/-1 fixes at the best/worst marginal worker."""
    kappa = r_cont.size
    r_cont = np.minimum(r_cont, budget)
    r = np.floor(r_cont + 1e-12).astype(np.int64)
    frac = r_cont - r
    deficit = budget - int(r.sum())
    if deficit > 0:
        take = np.argsort(-frac, kind="stable")[: min(deficit, kappa)]
        take = take[frac[take] > 0]
        r[take] += 1
        deficit -= take.size
    r = r.tolist()
    while deficit > 0:
        i = max(range(kappa), key=lambda i: H[i][r[i] + 1] - H[i][r[i]])
        r[i] += 1
        deficit -= 1
    while deficit < 0:
        donors = [i for i in range(kappa) if r[i] > 0]
        i = min(donors, key=lambda i: H[i][r[i]] - H[i][r[i] - 1])
        r[i] -= 1
        deficit += 1
    return np.array(r, dtype=np.int64)


def lagrangian_allocate(subset, l, budget, eta=1.0, table=None):
    """Integer allocation of ``budget`` over ``subset`` from the continuous relaxation.

    ``subset`` holds straggler probabilities (or profiles) in the order to be
    allocated.  Returns (r, fell_back) where fell_back marks the equal-split
    fallback used when no valid multiplier bracket exists.
    """
    p = p_vector(subset)
    budget = int(budget)
    if budget == 0:
        return np.zeros(p.size, dtype=np.int64), False
    H = table if table is not None else utility_table(p, l, budget + 1, eta).tolist()
    r_cont, bad = _continuous_split_batch(p, l, budget, eta, [p.size])
    if bad[0]:
        return equal_allocate(p, budget), True
    return _round_to_budget(r_cont[0], H, budget), False


def _steepest_swaps(r, H, max_rounds):
    """Apply the best positive 1-bit donor->receiver swap until none is left."""
    k = len(r)
    top = len(H[0]) - 1
    rounds = 0
    while rounds < max_rounds:
        up = [H[i][r[i] + 1] - H[i][r[i]] if r[i] < top else -math.inf for i in range(k)]
        down = [H[j][r[j] - 1] - H[j][r[j]] if r[j] > 0 else -math.inf for j in range(k)]
        order_up = sorted(range(k), key=lambda i: -up[i])[:2]
        order_down = sorted(range(k), key=lambda j: -down[j])[:2]
        best, pair = 0.0, None
        for i in order_up:
            for j in order_down:
                if i != j and up[i] + down[j] > best:
                    best, pair = up[i] + down[j], (i, j)
        if pair is None or best <= 1e-15 * abs(H[pair[0]][r[pair[0]]]):
            break
        r[pair[0]] += 1
        r[pair[1]] -= 1
        rounds += 1
    return r, rounds


def local_search_refine(r, profiles, l, eta=1.0):
    p = p_vector(profiles)
    r = [int(v) for v in r]
    Z = sum(r)
    H = utility_table(p, l, Z, eta).tolist()
    r, _ = _steepest_swaps(r, H, 10 * len(r) * Z)
    return _result(r, profiles, l, Z, eta, "local_search")


def proposed_allocate(profiles, l, Z_res, eta=1.0):
    """Low-complexity hybrid allocator.

    Workers are sorted by increasing straggler probability.  For each support
    size kappa, the better of the Lagrangian and equal splits over the kappa
    most reliable workers is refined by 1-bit swaps over all workers, and the
    best refined candidate across kappa is returned.
    """
    p = p_vector(profiles)
    k, Z = p.size, int(Z_res)
    if Z == 0:
        return _result(np.zeros(k, dtype=np.int64), profiles, l, 0, eta, "proposed", kappa=0)
    order = np.argsort(p, kind="stable")
    H = utility_table(p, l, Z, eta).tolist()
    H_sorted = [H[i] for i in order]
    cap = 10 * k * Z
    best_f, best_r, best_kappa = -math.inf, None, 0
    kappas = np.arange(1, min(k, Z) + 1)
    # the Lagrangian candidates for every support size are solved together
    r_cont, bad = _continuous_split_batch(p[order], l, Z, eta, kappas)
    for kappa in kappas:
        sub = order[:kappa]
        if bad[kappa - 1]:
            lag = equal_allocate(sub, Z)
        else:
            lag = _round_to_budget(r_cont[kappa - 1, :kappa], H_sorted[:kappa], Z)
        eq = equal_allocate(sub, Z)
        f_lag = sum(H_sorted[i][lag[i]] for i in range(kappa))
        f_eq = sum(H_sorted[i][eq[i]] for i in range(kappa))
        cand = [0] * k
        for pos, i in enumerate(sub):
            cand[i] = int(lag[pos] if f_lag >= f_eq else eq[pos])
        cand, _ = _steepest_swaps(cand, H, cap)
        f = sum(H[i][cand[i]] for i in range(k))
        if f > best_f:
            best_f, best_r, best_kappa = f, cand, kappa
    return _result(best_r, profiles, l, Z, eta, "proposed", kappa=int(best_kappa), fallbacks=int(bad.sum()))


def lagrangian_only_allocate(profiles, l, Z_res, eta=1.0):
    """Continuous relaxation over all workers plus rounding, with no refinement."""
    p = p_vector(profiles)
    Z = int(Z_res)
    order = np.argsort(p, kind="stable")
    r_sub, fell = lagrangian_allocate(p[order], l, Z, eta)
    r = np.zeros(p.size, dtype=np.int64)
    r[order] = r_sub
    return _result(r, profiles, l, Z, eta, "lagrangian", fallback=bool(fell))


def equal_bits(profiles, Z_res):
    """Equal split over all workers, extra bits to the most reliable ones."""
    p = p_vector(profiles)
    order = np.argsort(p, kind="stable")
    r = np.zeros(p.size, dtype=np.int64)
    r[order] = equal_allocate(order, Z_res)
    return r


def equal_allocate_all(profiles, l, Z_res, eta=1.0):
    return _result(equal_bits(profiles, Z_res), profiles, l, Z_res, eta, "equal")


SOLVERS = {
    "dp": dp_allocate,
    "proposed": proposed_allocate,
    "greedy": greedy_allocate,
    "lagrangian": lagrangian_only_allocate,
    "equal": equal_allocate_all,
}
