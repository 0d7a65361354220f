"""Seeded acceptance checks.

Each ``check_*`` function is deterministic for a given seed and returns a
:class:`CheckResult` carrying the measured value next to the bound it was
held to.  ``run_all`` drives them in order for the ``verify`` subcommand.
"""
import itertools
import time
from dataclasses import dataclass

import numpy as np

from . import bitalloc, quantizer
from .baselines import build_scheme
from .design import (
    optimal_design,
    residual_error_bound,
    second_moment_objective,
    segment_construction,
    target_masses,
    two_track_decoder,
)
from .losses import calibrate_C, make_logistic, make_quadratic
from .sim import (
    STREAM_CHECKS,
    TrainConfig,
    monte_carlo_residual,
    reference_min_loss,
    run_experiment,
    smooth_bound,
    stream_rng,
    strongly_convex_bound,
    uncoded_trajectory,
)
from .stragglers import sample_profiles

K, PSI_MIN, PSI_MAX, TAU_TH = 10, 0.1, 2.0, 1.1
N_PARTITIONS = 20


@dataclass
class CheckResult:
    name: str
    passed: bool
    measured: float
    bound: float
    detail: str = ""

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name}: measured {self.measured:.6g} vs bound {self.bound:.6g}  {self.detail}".rstrip()


def _rng(seed, check, *key):
    return stream_rng(seed, STREAM_CHECKS, check, *key)


def _defaults(rng, k=K):
    return sample_profiles(k, PSI_MIN, PSI_MAX, TAU_TH, rng)


def check_dp_optimality(seed=0):
    """DP objective equals brute force over a small grid."""
    start = time.perf_counter()
    worst, cases = 0.0, 0
    for k, Z, s, l in itertools.product(range(1, 5), range(13), range(50), (4, 36)):
        profiles = _defaults(_rng(seed, 1, k, s), k)
        dp = bitalloc.dp_allocate(profiles, l, Z)
        ex = bitalloc.exhaustive_oracle(profiles, l, Z)
        worst = max(worst, abs(dp.objective - ex.objective) / max(abs(ex.objective), 1e-300))
        cases += 1
    elapsed = time.perf_counter() - start
    ok = worst < 1e-12 and elapsed < 30.0
    return CheckResult("dp_optimality", ok, worst, 1e-12, f"{cases} cases in {elapsed:.1f}s (limit 30s)")


def _best_time(fn, repeats=3):
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def check_proposed_near_optimal(seed=0, l=1024):
    """Proposed solver within 1% of the DP optimum on at least 95 of 100 instances; faster at Z_res=50."""
    good, total, ratios = 0, 0, []
    t_prop = t_dp = 0.0
    bitalloc.proposed_allocate(_defaults(_rng(seed, 2, 0, 0)), l, 10)
    for Z in (10, 50):
        for s in range(50):
            profiles = _defaults(_rng(seed, 2, Z, s))
            dp = bitalloc.dp_allocate(profiles, l, Z)
            prop = bitalloc.proposed_allocate(profiles, l, Z)
            ratio = prop.objective / dp.objective
            ratios.append(ratio)
            good += ratio >= 0.99
            total += 1
            if Z == 50:
                t_dp += _best_time(lambda: bitalloc.dp_allocate(profiles, l, Z))
                t_prop += _best_time(lambda: bitalloc.proposed_allocate(profiles, l, Z))
    ok = good >= 95 and t_prop < t_dp
    detail = (f"{good}/{total} instances with F ratio >= 0.99 (min {min(ratios):.6f}); "
              f"Z_res=50 mean wall time proposed {1e3 * t_prop / 50:.3f} ms vs DP {1e3 * t_dp / 50:.3f} ms")
    return CheckResult("proposed_near_optimal", ok, good, 95, detail)


def check_design_structure(seed=0, instances=200):
    """Segment construction meets its mass, sparsity and load guarantees."""
    worst = 0.0
    fails = []
    for s in range(instances):
        rng = _rng(seed, 3, s)
        k = int(rng.integers(1, 21))
        n = int(rng.integers(1, 201))
        p = rng.uniform(0.0, 0.99, size=k)
        phi = rng.uniform(0.0, 2.0, size=k)
        c = (p + phi) / (1.0 - p)
        c = np.where(c > 0, c, 1e-3)
        Y = target_masses(c, n)
        alpha = segment_construction(Y, n)
        rows = np.asarray(alpha.sum(axis=1)).ravel()
        cols = np.asarray(alpha.sum(axis=0)).ravel()
        nnz = int(alpha.count_nonzero())
        err = max(np.max(np.abs(rows - Y)), np.max(np.abs(cols - 1.0)))
        ident = abs(np.sum(c * Y * Y) - n * n / np.sum(1.0 / c)) / (n * n / np.sum(1.0 / c))
        worst = max(worst, err, ident)
        if err >= 1e-9 or ident >= 1e-9 or nnz > n + k - 1 or nnz / n > 1 + (k - 1) / n + 1e-12:
            fails.append(s)
    return CheckResult("design_structure", not fails, worst, 1e-9,
                       f"{instances - len(fails)}/{instances} instances satisfy all structural bounds")


def _random_quantized_design(rng, l, n=N_PARTITIONS):
    profiles = _defaults(rng)
    Z_res = int(rng.integers(0, 3 * K + 1))
    z = bitalloc.proposed_allocate(profiles, l, Z_res).z
    return profiles, z, optimal_design(profiles, n, z=z, l=l, rng=rng)


def check_residual_bound(seed=0, designs=20, draws=10**5, l=64):
    """Monte Carlo residual below the closed form, with additive error split.

    Each design sees two gradient sets: independent rows, and rows sharing one
    direction (where the bound is nearly tight).
    """
    worst_ratio, worst_split = 0.0, 0.0
    ok = True
    for s in range(designs):
        rng = _rng(seed, 4, s)
        _, z, design = _random_quantized_design(rng, l)
        scales = rng.uniform(0.5, 2.0, size=(N_PARTITIONS, 1))
        families = (rng.standard_normal((N_PARTITIONS, l)) * scales,
                    rng.uniform(0.9, 1.0, size=(N_PARTITIONS, 1)) * rng.standard_normal(l))
        for G in families:
            C = float(np.max(np.sum(G * G, axis=1)))
            est = monte_carlo_residual(design, z, G, draws, rng)
            bound = residual_error_bound(design.c, N_PARTITIONS, C)
            worst_ratio = max(worst_ratio, (est.mean_sq_error - 3 * est.std_err) / bound)
            split = abs(est.split_gap) / est.split_se if est.split_se > 0 else 0.0
            worst_split = max(worst_split, split)
            ok &= est.mean_sq_error <= bound + 3 * est.std_err and split <= 4.0
    return CheckResult("residual_bound", ok, worst_ratio, 1.0,
                       f"worst (MC - 3se)/bound over {designs} designs x 2 gradient sets; "
                       f"worst split |gap|/se {worst_split:.2f} (limit 4)")


def check_quantizer(seed=0, vectors=20, draws=10**5, l=16):
    """Unbiasedness, variance and wire round trip for z = 2..8."""
    worst_z, worst_var = 0.0, 0.0
    wire_ok = True
    for z in range(2, 9):
        s = quantizer.levels_for(z)
        phi = quantizer.variance_coeff(z, l)
        for v in range(vectors):
            rng = _rng(seed, 5, z, v)
            x = rng.standard_normal(l) * rng.uniform(0.1, 10.0)
            Q = quantizer.quantize_rows(np.broadcast_to(x, (draws, l)), s, rng.random((draws, l)))
            mean = Q.mean(axis=0)
            se = Q.std(axis=0, ddof=1) / np.sqrt(draws)
            zs = np.where(se > 0, np.abs(mean - x) / np.where(se > 0, se, 1.0),
                          np.where(np.abs(mean - x) > 1e-12 * np.abs(x).max(), np.inf, 0.0))
            worst_z = max(worst_z, float(zs.max()))
            var = float(np.mean(np.sum((Q - x) ** 2, axis=1)))
            worst_var = max(worst_var, var / (phi * float(x @ x)))
            msg = quantizer.quantize(x, z, rng)
            back = quantizer.unpack(quantizer.pack(msg), z, l)
            wire_ok &= back == msg and np.array_equal(quantizer.dequantize(back), quantizer.dequantize(msg))
    ok = worst_z <= 4.0 and worst_var <= 1.05 and wire_ok
    return CheckResult("quantizer", ok, worst_z, 4.0,
                       f"worst variance / (phi ||x||^2) {worst_var:.4f} (limit 1.05); wire round trip "
                       + ("exact" if wire_ok else "MISMATCH"))


def _calibrated_C(loss, warmup, series):
    C = calibrate_C(loss, warmup)
    return max(C, 1.1 * series.meta["max_partition_grad_sq"])


def check_strongly_convex(seed=0, trials=50, l=32):
    """Distance to the optimum under the 1/(lambda t) schedule stays below the closed form."""
    grid = (10, 100, 1000, 10000)
    profiles = _defaults(_rng(seed, 6, 0))
    loss = make_quadratic(N_PARTITIONS, l, 1.0, _rng(seed, 6, 1))
    scheme = build_scheme("proposed", profiles, N_PARTITIONS, l, 3 * K, _rng(seed, 6, 2))
    config = TrainConfig(iterations=grid[-1], lr_schedule="inv_lambda_t", trials=trials, seed=seed, track_C=True)
    series = run_experiment(config, loss, scheme)
    lam = loss.strong_convexity
    warmup = uncoded_trajectory(loss, np.zeros(l), 200, lambda u: 1.0 / (lam * (u + 1)))
    C = _calibrated_C(loss, warmup, series)
    dist = series.mean("dist_sq")
    ratios = [dist[T] / strongly_convex_bound(N_PARTITIONS, C, lam, T, scheme.design.c) for T in grid]
    detail = ", ".join(f"T={T}: {r:.3g}" for T, r in zip(grid, ratios))
    return CheckResult("strongly_convex", max(ratios) <= 1.0, max(ratios), 1.0, f"dist/bound {detail}")


def check_smooth(seed=0, trials=50, l=16, samples=10):
    """Running-average gradient norm below the closed form for both square-root schedules, and shrinking."""
    profiles = _defaults(_rng(seed, 7, 0))
    loss = make_logistic(N_PARTITIONS, l, samples, _rng(seed, 7, 1))
    scheme = build_scheme("proposed", profiles, N_PARTITIONS, l, 3 * K, _rng(seed, 7, 2))
    beta0 = np.zeros(l)
    L_star = reference_min_loss(loss, beta0)
    gap = float(loss.loss(beta0)[0]) - L_star
    warmup = uncoded_trajectory(loss, beta0, 200, 1.0 / loss.smoothness)
    ok, parts, worst = True, [], 0.0
    runs = {}
    for schedule, T in (("const_sqrt", 100), ("const_sqrt", 1000), ("const_sqrt", 10000), ("decay_sqrt", 10000)):
        config = TrainConfig(iterations=T, lr_schedule=schedule, trials=trials, seed=seed, track_C=True)
        runs[schedule, T] = run_experiment(config, loss, scheme)
    for schedule, T in (("const_sqrt", 100), ("const_sqrt", 1000), ("decay_sqrt", 100), ("decay_sqrt", 1000)):
        # the decaying schedule does not depend on T, so one long run serves every horizon
        series = runs[schedule, T] if schedule == "const_sqrt" else runs["decay_sqrt", 10000]
        C = _calibrated_C(loss, warmup, series)
        bound = smooth_bound(schedule, gap, loss.smoothness, N_PARTITIONS, C, scheme.design.c, T)
        ratio = series.running_avg_grad_sq()[T] / bound
        worst = max(worst, ratio)
        ok &= ratio <= 1.0
        parts.append(f"{schedule} T={T} avg/bound {ratio:.3g}")
    decay = runs["decay_sqrt", 10000].running_avg_grad_sq()
    drops = {"decay_sqrt": decay[100] / decay[10000],
             "const_sqrt": runs["const_sqrt", 100].running_avg_grad_sq()[100]
             / runs["const_sqrt", 10000].running_avg_grad_sq()[10000]}
    for name, drop in drops.items():
        ok &= drop >= 2.0
        parts.append(f"{name} drop T=1e2->1e4 {drop:.3g}x (need 2x)")
    return CheckResult("smooth", ok, worst, 1.0, "; ".join(parts))


def check_two_track(seed=0, designs=50, draws=10**4, l=16):
    """The second-moment decoder never loses to the unbiased weights, in closed form or by simulation."""
    ok = True
    worst = 0.0
    for s in range(designs):
        rng = _rng(seed, 8, s)
        _, z, design = _random_quantized_design(rng, l)
        G = rng.standard_normal((N_PARTITIONS, l))
        F = design.dense_A() @ G
        svec = np.array([quantizer.levels_for(int(v)) for v in z], dtype=np.float64)
        alive = rng.random((draws, design.k)) >= design.p
        Q = quantizer.quantize_rows(np.broadcast_to(F, (draws, design.k, l)), svec, rng.random((draws, design.k, l)))
        _, var_w = second_moment_objective(design, design.w)
        mc_w = _mc_var(alive, design.w, Q)
        for Lambda in (0.1, 1.0, 10.0):
            v = two_track_decoder(design, Lambda=Lambda)
            bias_v, var_v = second_moment_objective(design, v)
            mc_v = _mc_var(alive, v, Q)
            tol = 1e-12 * var_w
            ok &= var_v <= var_w + tol and Lambda * bias_v + var_v <= var_w + tol and mc_v <= mc_w
            worst = max(worst, mc_v / mc_w)
    return CheckResult("two_track", bool(ok), worst, 1.0,
                       f"worst Monte Carlo variance ratio v*/w over {designs} designs x 3 Lambda")


def _mc_var(alive, v, Q):
    est = np.einsum("mk,mkl->ml", alive * v, Q)
    return float(np.sum(est.var(axis=0, ddof=1)))


ORDER_L = 4096
ORDER_LR = 0.05
ORDER_TRIALS = 5


def _order_instance(seed, l):
    profiles = _defaults(stream_rng(seed, STREAM_CHECKS, 9, 0))
    loss = make_quadratic(N_PARTITIONS, l, 1.0, stream_rng(seed, STREAM_CHECKS, 9, 1), diagonal=True)
    return profiles, loss


def check_ordering(seed=0, seeds=20, iterations=1000, l=ORDER_L, trials=ORDER_TRIALS, lr=ORDER_LR):
    """IDEAL <= PROPOSED <= OSGC_EQUALBITS and PROPOSED <= BGC after the run, per master seed."""
    names = ("ideal_sgd", "proposed", "osgc_equalbits", "bgc")
    wins = {}
    for Z_res in (K, 5 * K):
        count = 0
        for s in range(seed, seed + seeds):
            profiles, loss = _order_instance(s, l)
            final = {}
            for name in names:
                scheme = build_scheme(name, profiles, N_PARTITIONS, l, 2 * K + Z_res, stream_rng(s, STREAM_CHECKS, 9, 2))
                config = TrainConfig(iterations=iterations, lr=lr, trials=trials, seed=s)
                final[name] = run_experiment(config, loss, scheme).mean("loss")[-1]
            count += (final["ideal_sgd"] <= final["proposed"] <= final["osgc_equalbits"]
                      and final["proposed"] <= final["bgc"])
        wins[Z_res] = count
    frac = min(wins.values()) / seeds
    detail = ", ".join(f"Z_res={z}: {w}/{seeds}" for z, w in wins.items())
    return CheckResult("ordering", frac >= 0.8, frac, 0.8, detail)


def _at_bits(series, grid):
    cum = series.cum_bits()
    return np.interp(grid, cum[1:], series.mean("loss")[1:])


def check_bits(seed=0, seeds=20, iterations=1000, l=ORDER_L, trials=ORDER_TRIALS, lr=ORDER_LR, points=20):
    """Bit savings against uncompressed reports, and loss-per-bit dominance over BGC."""
    Z_tot = 4 * K
    wins, worst_ratio = 0, 0.0
    for s in range(seed, seed + seeds):
        profiles, loss = _order_instance(s, l)
        config = TrainConfig(iterations=iterations, lr=lr, trials=trials, seed=s)
        runs = {name: run_experiment(config, loss, build_scheme(name, profiles, N_PARTITIONS, l, Z_tot,
                                                                stream_rng(s, STREAM_CHECKS, 10, 2)))
                for name in ("proposed", "bgc", "ideal_sgd")}
        prop, bgc = runs["proposed"], runs["bgc"]
        worst_ratio = max(worst_ratio, prop.cum_bits()[-1] / runs["ideal_sgd"].cum_bits()[-1])
        lo = max(prop.cum_bits()[1], bgc.cum_bits()[1])
        hi = min(prop.cum_bits()[-1], bgc.cum_bits()[-1])
        grid = np.geomspace(lo, hi, points)
        wins += bool(np.all(_at_bits(prop, grid) <= _at_bits(bgc, grid)))
    ok = worst_ratio < 1.0 / 8.0 and wins >= 0.8 * seeds
    return CheckResult("bits", ok, worst_ratio, 1.0 / 8.0,
                       f"proposed/uncoded cumulative bits; loss-vs-bits dominance over BGC on {wins}/{seeds} seeds (need 80%)")


CHECKS = (
    check_dp_optimality,
    check_proposed_near_optimal,
    check_design_structure,
    check_residual_bound,
    check_quantizer,
    check_strongly_convex,
    check_smooth,
    check_two_track,
    check_ordering,
    check_bits,
)


def run_all(seed=0, report=print):
    results = []
    for check in CHECKS:
        result = check(seed)
        report(result.line())
        results.append(result)
    return results
