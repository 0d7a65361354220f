"""Parameter-server training simulator with coded, quantized, straggling workers.

Each iteration the master holds beta_t.  Worker i encodes f_i = sum_j a_ij g_j,
quantizes it at z_i bits per coordinate and reports unless it straggles.  The
master forms g_hat = sum_i I_i w_i Q(f_i) and takes an optimizer step.  Trials
run as a batch; trial b draws everything from its own stream keyed by
(master seed, b), so schemes sharing a seed see common random numbers.
"""
from dataclasses import dataclass, field

import numpy as np

from .design import two_track_decoder
from .errors import InvalidInput, NonFiniteGradient
from .quantizer import levels_for, quantize_rows

SCHEDULES = ("inv_lambda_t", "const_sqrt", "decay_sqrt", "fixed")
OPTIMIZERS = ("gd", "sgd", "adam")
NORM_BITS = 32

# spawn-key tags separating the independent streams derived from one master seed
STREAM_PROFILES, STREAM_LOSS, STREAM_DESIGN, STREAM_TRIALS, STREAM_CHECKS = range(5)


def stream_rng(seed, *key):
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key)))


def trial_rngs(seed, trials):
    return [stream_rng(seed, STREAM_TRIALS, b) for b in range(trials)]


@dataclass(frozen=True)
class AdamParams:
    Lambda: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    two_track: bool = True


@dataclass(frozen=True)
class TrainConfig:
    iterations: int
    lr_schedule: str = "fixed"
    lr: float = 0.01
    optimizer: str = "gd"
    batch_size: int | None = None
    adam: AdamParams = field(default_factory=AdamParams)
    trials: int = 1
    seed: int = 0
    beta0: np.ndarray | None = None
    track_C: bool = False

    def __post_init__(self):
        if self.lr_schedule not in SCHEDULES:
            raise InvalidInput(f"unknown schedule {self.lr_schedule!r}; choose from {SCHEDULES}")
        if self.optimizer not in OPTIMIZERS:
            raise InvalidInput(f"unknown optimizer {self.optimizer!r}; choose from {OPTIMIZERS}")
        if self.optimizer == "sgd" and not self.batch_size:
            raise InvalidInput("sgd needs a positive batch_size")
        if self.iterations < 0 or self.trials < 1:
            raise InvalidInput("iterations must be >= 0 and trials >= 1")


def step_size(config, update, lam=None):
    """Learning rate for the ``update``-th step (0-based)."""
    sched = config.lr_schedule
    if sched == "fixed":
        return config.lr
    if sched == "inv_lambda_t":
        if not lam or lam <= 0:
            raise InvalidInput("the 1/(lambda t) schedule needs a strongly convex loss")
        return 1.0 / (lam * (update + 1))
    if sched == "const_sqrt":
        return 1.0 / np.sqrt(config.iterations + 1.0)
    return 1.0 / np.sqrt(update + 1.0)


@dataclass
class SimState:
    beta: np.ndarray
    t: int = 0
    m: np.ndarray | None = None
    v: np.ndarray | None = None


@dataclass
class StepRecord:
    loss: np.ndarray
    grad_sq: np.ndarray
    dist_sq: np.ndarray | None
    bits: np.ndarray
    stragglers: np.ndarray
    max_part_sq: float | None = None


@dataclass
class MetricsSeries:
    """Per-trial metric arrays of shape (trials, iterations + 1).

    Column t describes beta_t; ``bits[:, t]`` is what the update producing
    beta_t transmitted (zero for t = 0).
    """

    scheme: str
    loss: np.ndarray
    grad_sq: np.ndarray
    dist_sq: np.ndarray | None
    bits: np.ndarray
    stragglers: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def trials(self):
        return self.loss.shape[0]

    @property
    def iterations(self):
        return self.loss.shape[1] - 1

    def mean(self, name):
        return getattr(self, name).mean(axis=0)

    def se(self, name):
        x = getattr(self, name)
        if x.shape[0] < 2:
            return np.zeros(x.shape[1])
        return x.std(axis=0, ddof=1) / np.sqrt(x.shape[0])

    def cum_bits(self):
        return np.cumsum(self.bits.mean(axis=0))

    def running_avg_grad_sq(self):
        """(1/(t+1)) sum_{u<=t} mean ||g(beta_u)||^2."""
        g = self.mean("grad_sq")
        return np.cumsum(g) / np.arange(1, g.size + 1)


def _check_finite(x, what, t):
    if not np.all(np.isfinite(x)):
        bad = int(np.argwhere(~np.isfinite(x).reshape(x.shape[0], -1).all(axis=1))[0][0])
        raise NonFiniteGradient(f"non-finite {what} at iteration {t} in trial {bad}; "
                                "the step size is probably too large for this loss")


def _batch_indices(loss, rngs, batch):
    return np.stack([rng.integers(0, loss.m, size=(loss.n, batch)) for rng in rngs])


def _group_sum(rows, counts):
    """Sum consecutive blocks of ``rows``; block b has ``counts[b]`` rows (possibly 0)."""
    out = np.zeros((counts.size, rows.shape[1]))
    nonempty = counts > 0
    if rows.shape[0]:
        starts = np.cumsum(counts) - counts
        out[nonempty] = np.add.reduceat(rows, starts[nonempty], axis=0)
    return out


def _received(F_rows, s_rows, uniforms):
    return F_rows if s_rows is None else quantize_rows(F_rows, s_rows, uniforms)


def coded_estimate(scheme, grads, rngs, second=None):
    """Aggregate coded, quantized, straggling reports for per-partition gradients.

    ``grads`` has shape (B, n, l).  Returns (g_hat, second_input, bits,
    stragglers).  ``second`` is an optional alternative decoder whose aggregate
    is returned as ``second_input``.
    """
    grads = np.asarray(grads, dtype=np.float64)

    def encode(W, tb):
        return np.einsum("rn,rnl->rl", W, grads[tb])

    return _aggregate(scheme, encode, lambda: grads.sum(axis=1), grads.shape[0], grads.shape[2], rngs, second)


def _aggregate(scheme, encode, total, B, l, rngs, second):
    # Only reports that arrive are quantized.  Each trial draws its straggler
    # indicators first, then one uniform per coordinate of each arriving report.
    design = scheme.design
    if design is None:
        # exact gradients, charged as k uncompressed 32-bit reports
        g = total()
        return g, g, np.full(B, float(scheme.k * 32 * l)), np.zeros(B)
    k = design.k
    alive = np.empty((B, k), dtype=bool)
    draws = []
    for b, rng in enumerate(rngs):
        alive[b] = rng.random(k) >= design.p
        draws.append(rng.random((int(alive[b].sum()), l)))
    tb, wi = np.nonzero(alive)
    counts = alive.sum(axis=1)
    F = encode(design.dense_A()[wi], tb)
    if scheme.z is None:
        received = F
    else:
        s = np.array([levels_for(int(z)) for z in scheme.z], dtype=np.float64)
        received = quantize_rows(F, s[wi], np.concatenate(draws))
    g_hat = _group_sum(design.w[wi, None] * received, counts)
    g2 = g_hat if second is None else _group_sum(np.asarray(second)[wi, None] * received, counts)
    assigned = design.row_sums() != 0
    z = np.full(k, 32) if scheme.z is None else np.asarray(scheme.z)
    per_worker = np.where(assigned, NORM_BITS + l * z, 0)
    bits = (alive * per_worker).sum(axis=1).astype(np.float64)
    return g_hat, g2, bits, (k - counts).astype(np.float64)


def adam_step_two_track(state, first_input, second_input, hyper, lr):
    """Adam update with separate first- and second-moment inputs, with bias correction."""
    b1, b2 = hyper.beta1, hyper.beta2
    t = state.t + 1
    m = b1 * state.m + (1.0 - b1) * first_input
    v = b2 * state.v + (1.0 - b2) * second_input * second_input
    m_hat = m / (1.0 - b1**t)
    v_hat = v / (1.0 - b2**t)
    beta = state.beta - lr * m_hat / (np.sqrt(v_hat) + hyper.eps)
    return SimState(beta, t, m, v)


def _metrics(loss, beta):
    g = loss.grad(beta)
    dist = None
    if loss.optimum is not None:
        diff = beta - loss.optimum
        dist = np.einsum("bl,bl->b", diff, diff)
    return loss.loss(beta), np.einsum("bl,bl->b", g, g), dist


def _max_part_sq(loss, beta):
    g = loss.partition_grads(beta)
    return float(np.max(np.einsum("bjl,bjl->bj", g, g)))


def train_step(state, scheme, loss, rngs, config, lam=None, second=None):
    """One synchronous iteration for every trial in the batch.

    Returns the next state and the record for the pre-update point.
    """
    batch = config.batch_size if config.optimizer == "sgd" else None
    _check_finite(state.beta, "iterate", state.t)
    f, gsq, dist = _metrics(loss, state.beta)
    part = None
    if batch:
        grads = loss.partition_grads(state.beta, _batch_indices(loss, rngs, batch))
        g_hat, g2, bits, stragglers = coded_estimate(scheme, grads, rngs, second)
        if config.track_C:
            part = _max_part_sq(loss, state.beta)
    else:
        beta = state.beta
        full = None
        if config.track_C or not hasattr(loss, "encoded_grads"):
            full = loss.partition_grads(beta)
            if config.track_C:
                part = float(np.max(np.einsum("bjl,bjl->bj", full, full)))

        def encode(W, tb):
            if full is None:
                return loss.encoded_grads(W, beta[tb])
            return np.einsum("rn,rnl->rl", W, full[tb])

        g_hat, g2, bits, stragglers = _aggregate(scheme, encode, lambda: loss.grad(beta),
                                                 beta.shape[0], beta.shape[1], rngs, second)
    lr = step_size(config, state.t, lam)
    if config.optimizer == "adam":
        new = adam_step_two_track(state, g_hat, g2, config.adam, lr)
    else:
        new = SimState(state.beta - lr * g_hat, state.t + 1)
    return new, StepRecord(f, gsq, dist, bits, stragglers, part)


def run_experiment(config, loss, scheme):
    """Run ``config.trials`` seeded trials in lockstep and collect per-trial metrics."""
    B, T, l = config.trials, config.iterations, loss.dim
    rngs = trial_rngs(config.seed, B)
    beta0 = np.zeros(l) if config.beta0 is None else np.asarray(config.beta0, dtype=np.float64)
    state = SimState(np.tile(beta0, (B, 1)))
    if config.optimizer == "adam":
        state.m, state.v = np.zeros((B, l)), np.zeros((B, l))
    second = None
    if config.optimizer == "adam" and config.adam.two_track and scheme.design is not None:
        second = two_track_decoder(scheme.design, Lambda=config.adam.Lambda)
    lam = loss.strong_convexity
    cols = {name: np.zeros((B, T + 1)) for name in ("loss", "grad_sq", "dist_sq", "bits", "stragglers")}
    max_part = 0.0
    for t in range(T):
        state, rec = train_step(state, scheme, loss, rngs, config, lam, second)
        if rec.max_part_sq is not None:
            max_part = max(max_part, rec.max_part_sq)
        cols["loss"][:, t] = rec.loss
        cols["grad_sq"][:, t] = rec.grad_sq
        if rec.dist_sq is not None:
            cols["dist_sq"][:, t] = rec.dist_sq
        cols["bits"][:, t + 1] = rec.bits
        cols["stragglers"][:, t + 1] = rec.stragglers
    _check_finite(state.beta, "iterate", T)
    f, gsq, dist = _metrics(loss, state.beta)
    cols["loss"][:, T], cols["grad_sq"][:, T] = f, gsq
    if dist is not None:
        cols["dist_sq"][:, T] = dist
    meta = {"seed": config.seed, "trials": B, "final_beta": state.beta}
    if config.track_C:
        meta["max_partition_grad_sq"] = max(max_part, _max_part_sq(loss, state.beta))
    return MetricsSeries(scheme.name, cols["loss"], cols["grad_sq"],
                         cols["dist_sq"] if loss.optimum is not None else None,
                         cols["bits"], cols["stragglers"], meta=meta)


def uncoded_trajectory(loss, beta0, steps, lr):
    """Exact full-gradient descent; ``lr`` is a constant or a function of the 0-based step."""
    beta = np.atleast_2d(np.asarray(beta0, dtype=np.float64)).copy()
    path = [beta[0].copy()]
    for u in range(steps):
        gamma = lr(u) if callable(lr) else lr
        beta = beta - gamma * loss.grad(beta)
        _check_finite(beta, "iterate", u)
        path.append(beta[0].copy())
    return np.array(path)


def reference_min_loss(loss, beta0, steps=100_000, lr=None):
    """Smallest loss seen on a long uncoded GD run with step 1/mu (stand-in for L(beta*))."""
    if loss.optimum is not None:
        return float(loss.loss(loss.optimum)[0])
    lr = 1.0 / loss.smoothness if lr is None else lr
    beta = np.atleast_2d(np.asarray(beta0, dtype=np.float64)).copy()
    best = float(loss.loss(beta)[0])
    for _ in range(steps):
        beta = beta - lr * loss.grad(beta)
        best = min(best, float(loss.loss(beta)[0]))
    return best


@dataclass
class ResidualEstimate:
    mean_sq_error: float
    std_err: float
    bias: np.ndarray
    bias_se: np.ndarray
    straggler_only: float
    straggler_se: float
    quant_only: float
    quant_se: float
    split_gap: float
    split_se: float
    trials: int

    def bias_z_scores(self):
        se = np.where(self.bias_se > 0, self.bias_se, np.inf)
        return np.abs(self.bias) / se


def monte_carlo_residual(design, z, gradients, trials, rng, chunk=2048):
    """Estimate E||g - g_hat||^2 and E[g_hat] - g for fixed partition gradients.

    Every draw also yields the straggler-only error (same indicators, exact
    reports) and the quantization-only error, so the additivity of the two
    sources can be tested on paired samples.  ``z=None`` disables quantization.
    """
    if trials < 1000:
        raise InvalidInput("use at least 1000 Monte Carlo draws")
    G = np.asarray(gradients, dtype=np.float64)
    g = G.sum(axis=0)
    F = design.dense_A() @ G
    k, l = F.shape
    s = None if z is None else np.array([levels_for(int(v)) for v in z], dtype=np.float64)
    acc = dict.fromkeys(("e", "e2", "s1", "s12", "q", "q2", "d", "d2"), 0.0)
    gsum = np.zeros(l)
    gsq = np.zeros(l)
    done = 0
    while done < trials:
        M = min(chunk, trials - done)
        alive = rng.random((M, k)) >= design.p
        coef = alive * design.w
        exact = coef @ F
        if s is None:
            g_hat = exact
        else:
            tm, wi = np.nonzero(alive)
            Q = quantize_rows(F[wi], s[wi], rng.random((wi.size, l)))
            g_hat = _group_sum(design.w[wi, None] * Q, alive.sum(axis=1))
        e = np.sum((g_hat - g) ** 2, axis=1)
        e_s = np.sum((exact - g) ** 2, axis=1)
        e_q = np.sum((g_hat - exact) ** 2, axis=1)
        gap = e - e_s - e_q
        for key, x in (("e", e), ("s1", e_s), ("q", e_q), ("d", gap)):
            acc[key] += x.sum()
            acc[key + "2"] += (x * x).sum()
        gsum += g_hat.sum(axis=0)
        gsq += (g_hat * g_hat).sum(axis=0)
        done += M

    def mean_se(total, total_sq):
        mean = total / trials
        var = max(total_sq / trials - mean * mean, 0.0) * trials / (trials - 1)
        return mean, np.sqrt(var / trials)

    mse, mse_se = mean_se(acc["e"], acc["e2"])
    s_only, s_se = mean_se(acc["s1"], acc["s12"])
    q_only, q_se = mean_se(acc["q"], acc["q2"])
    gap, gap_se = mean_se(acc["d"], acc["d2"])
    mean = gsum / trials
    var = np.maximum(gsq / trials - mean * mean, 0.0) * trials / (trials - 1)
    return ResidualEstimate(float(mse), float(mse_se), mean - g, np.sqrt(var / trials),
                            float(s_only), float(s_se), float(q_only), float(q_se),
                            float(gap), float(gap_se), trials)


def inverse_cost_sum(c):
    return float(np.sum(1.0 / np.asarray(c, dtype=np.float64)))


def strongly_convex_bound(n, C, lam, T, c):
    """4 n^2 C / (lambda^2 T) * (1 + 1/sum c^-1) for the 1/(lambda t) schedule."""
    return 4.0 * n * n * C / (lam * lam * T) * (1.0 + 1.0 / inverse_cost_sum(c))


def smooth_bound(schedule, gap, mu, n, C, c, T):
    """Bound on (1/(T+1)) sum_{t<=T} E||g_t||^2 for the two square-root schedules.

    ``gap`` is L(beta_0) - L(beta*).  The decaying variant uses the harmonic sum
    bound sum_{t<=T} 1/(t+1) <= 2 + log(T+1).
    """
    root = np.sqrt(T + 1.0)
    noise = mu * n * n * C * (1.0 + 1.0 / inverse_cost_sum(c))
    if schedule == "const_sqrt":
        return gap / root + noise / (2.0 * root)
    if schedule == "decay_sqrt":
        return gap / root + noise * (1.0 + 0.5 * np.log(T + 1.0)) / root
    raise InvalidInput(f"no smooth-loss bound for schedule {schedule!r}")
