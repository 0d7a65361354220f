"""Heterogeneous straggler model.

Worker i misses the iteration deadline independently with probability p_i.
Under a shifted-exponential latency model with rate psi_i and deadline tau_th,
p_i = exp(-psi_i * (tau_th - 1)).
"""
import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateWorker, InvalidInput, InvalidThreshold


def straggler_prob(psi, tau_th):
    if tau_th < 1:
        raise InvalidThreshold(f"deadline tau_th must be >= 1, got {tau_th!r}")
    if psi <= 0:
        raise InvalidThreshold(f"psi must be positive, got {psi!r}")
    return math.exp(-psi * (tau_th - 1.0))


@dataclass(frozen=True)
class WorkerProfile:
    id: int
    p: float
    psi: float | None = None

    def __post_init__(self):
        p = float(self.p)
        if not (0.0 <= p < 1.0):
            raise DegenerateWorker(
                f"worker {self.id}: straggler probability must lie in [0, 1), got {p!r}")
        object.__setattr__(self, "p", p)

    @classmethod
    def from_psi(cls, id, psi, tau_th):
        return cls(id=id, p=straggler_prob(psi, tau_th), psi=float(psi))


def sample_profiles(k, psi_min, psi_max, tau_th, rng):
    if tau_th <= 1:
        raise DegenerateWorker(f"tau_th must exceed 1 (got {tau_th!r}); every worker would always straggle")
    if not (0 < psi_min <= psi_max):
        raise InvalidThreshold(f"need 0 < psi_min <= psi_max, got {psi_min!r}, {psi_max!r}")
    psis = rng.uniform(psi_min, psi_max, size=k)
    return [WorkerProfile.from_psi(i + 1, psi, tau_th) for i, psi in enumerate(psis)]


def profiles_from_p(ps):
    return [WorkerProfile(id=i + 1, p=p) for i, p in enumerate(ps)]


def p_vector(profiles):
    """Straggler probabilities as an array; accepts profiles or plain numbers."""
    return np.array([getattr(w, "p", w) for w in profiles], dtype=np.float64)


def sample_indicators(profiles, rng, size=None):
    """Non-straggler indicators: True with probability 1 - p_i.

    ``size`` adds leading batch dimensions (one row per independent draw).
    """
    p = p_vector(profiles)
    shape = p.shape if size is None else tuple(np.atleast_1d(size)) + p.shape
    return rng.random(shape) >= p


def format_profiles(profiles):
    """Plain-text block, one ``id p psi`` line per worker."""
    lines = []
    for w in profiles:
        psi = "-" if w.psi is None else repr(w.psi)
        lines.append(f"{w.id} {w.p!r} {psi}")
    return "\n".join(lines) + "\n"


def parse_profiles(text):
    out = []
    for no, raw in enumerate(text.splitlines(), 1):
        raw = raw.split("#", 1)[0].strip()
        if not raw:
            continue
        try:
            wid, p, psi = raw.split()
            out.append(WorkerProfile(int(wid), float(p), None if psi == "-" else float(psi)))
        except ValueError as exc:
            raise InvalidInput(f"line {no}: expected 'id p psi', got {raw!r} ({exc})") from None
    return out
