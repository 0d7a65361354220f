"""Comparison coding schemes and the scheme registry used by the simulator."""
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import sparse

from . import bitalloc
from .design import CodeDesign, cost_coeff, optimal_design, phi_vector, realize_code, \
    segment_construction, target_masses
from .errors import InfeasibleBudget, InfeasibleDesign, InvalidInput
from .stragglers import p_vector

KINDS = ("IDEAL_SGD", "IS_SGD", "BGC", "SGC", "OSGC_EQUALBITS", "PROPOSED")
_ALIASES = {"ideal": "IDEAL_SGD", "issgd": "IS_SGD", "osgc": "OSGC_EQUALBITS"}
_UNSUPPORTED = {"EHD", "OD"}


@dataclass(frozen=True)
class SchemeSpec:
    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidInput(f"unknown scheme {self.kind!r}; choose from {', '.join(KINDS)}")
        params = dict(self.params)
        if self.kind in ("BGC", "SGC"):
            d = float(params.get("d", 2))
            if d <= 0:
                raise InvalidInput(f"{self.kind} needs d > 0, got {d!r}")
            params["d"] = d
        object.__setattr__(self, "params", params)

    @classmethod
    def parse(cls, text):
        """Parse ``kind[:key=value,...]``, e.g. ``bgc:d=2``."""
        name, _, rest = text.strip().partition(":")
        kind = name.strip().upper().replace("-", "_")
        kind = _ALIASES.get(name.strip().lower(), kind)
        if kind in _UNSUPPORTED:
            raise InvalidInput(f"scheme {kind} is not supported by this simulator")
        params = {}
        for item in filter(None, (s.strip() for s in rest.split(","))):
            key, eq, val = item.partition("=")
            if not eq:
                raise InvalidInput(f"bad scheme parameter {item!r} (expected key=value)")
            params[key.strip()] = float(val)
        return cls(kind, params)

    @property
    def name(self):
        if not self.params:
            return self.kind.lower()
        extra = ",".join(f"{k}={v:g}" for k, v in sorted(self.params.items()))
        return f"{self.kind.lower()}:{extra}"


def _physical(A, profiles, w, label, unbiased):
    p = p_vector(profiles)
    A = sparse.csr_array(A)
    A.sort_indices()
    w = np.asarray(w, dtype=np.float64)
    tilde_w = (1.0 - p) * w
    alpha = sparse.csr_array(sparse.diags_array(tilde_w) @ A)
    alpha.sort_indices()
    return CodeDesign(alpha=alpha, Y=np.asarray(alpha.sum(axis=1)).ravel(), A=A, w=w,
                      tilde_w=tilde_w, c=np.full(p.size, np.nan), p=p, unbiased=unbiased,
                      label=label)


def issgd_design(profiles, n):
    """Disjoint contiguous blocks, a = 1 and w = 1 (biased whenever p > 0)."""
    k = len(profiles)
    if k > n:
        raise InfeasibleDesign(f"disjoint assignment needs k <= n, got k={k}, n={n}")
    j = np.arange(1, n + 1)
    owner = -(-j * k // n) - 1
    A = sparse.csr_array((np.ones(n), (owner, j - 1)), shape=(k, n))
    return _physical(A, profiles, np.ones(k), "is_sgd", unbiased=False)


def bgc_design(profiles, n, d, rng):
    """Each a_ij ~ Bernoulli(d/k) independently, w = 1."""
    k = len(profiles)
    if not (0 < d <= k):
        raise InfeasibleDesign(f"need 0 < d <= k, got d={d}, k={k}")
    mask = rng.random((k, n)) < d / k
    return _physical(mask.astype(np.float64), profiles, np.ones(k), "bgc", unbiased=False)


def sgc_design(profiles, n, d_vec=None):
    """Partition j goes to workers (j + t) mod k, t < d_j, with a_ij = 1/(d_j (1 - p_i))."""
    p = p_vector(profiles)
    k = p.size
    d_vec = np.full(n, 2, dtype=np.int64) if d_vec is None else np.asarray(d_vec, dtype=np.int64)
    if d_vec.size != n or np.any(d_vec < 1) or np.any(d_vec > k):
        raise InfeasibleDesign(f"replication factors must lie in [1, k={k}]")
    rows, cols, vals = [], [], []
    for j in range(n):
        for t in range(d_vec[j]):
            i = (j + t) % k
            rows.append(i)
            cols.append(j)
            vals.append(1.0 / (d_vec[j] * (1.0 - p[i])))
    A = sparse.csr_array((vals, (rows, cols)), shape=(k, n))
    return _physical(A, profiles, np.ones(k), "sgc", unbiased=True)


def osgc_equalbits_design(profiles, n, Z_tot, l, rng):
    """Optimal structure for straggling alone (quantizer variance ignored), equal bit widths."""
    p = p_vector(profiles)
    k = p.size
    if Z_tot < 2 * k:
        raise InfeasibleBudget(f"Z_tot={Z_tot} is below 2k={2 * k}")
    z = bitalloc.equal_bits(profiles, Z_tot - 2 * k) + 2
    c = cost_coeff(p, np.zeros(k))
    alpha = segment_construction(target_masses(c, n), n)
    d = realize_code(alpha, profiles, rng, c=c, phi=phi_vector(z, l), label="osgc_equalbits")
    return d, z


@dataclass(frozen=True, eq=False)
class CodedScheme:
    """A ready-to-simulate scheme: design (None for exact GD) plus per-worker bit widths."""

    spec: SchemeSpec
    design: CodeDesign | None
    z: np.ndarray | None
    k: int
    allocation: object = None

    @property
    def name(self):
        return self.spec.name

    @property
    def quantized(self):
        return self.z is not None


def build_scheme(spec, profiles, n, l, Z_tot, rng, eta=1.0, solver="proposed"):
    if isinstance(spec, str):
        spec = SchemeSpec.parse(spec)
    k = len(profiles)
    if spec.kind == "IDEAL_SGD":
        return CodedScheme(spec, None, None, k)
    if Z_tot < 2 * k:
        raise InfeasibleBudget(f"Z_tot={Z_tot} is below 2k={2 * k}")
    Z_res = Z_tot - 2 * k
    if spec.kind == "PROPOSED":
        alloc = bitalloc.SOLVERS[solver](profiles, l, Z_res, eta)
        design = optimal_design(profiles, n, alloc.z, l, rng, eta=eta)
        return CodedScheme(spec, design, np.asarray(alloc.z), k, alloc)
    if spec.kind == "OSGC_EQUALBITS":
        design, z = osgc_equalbits_design(profiles, n, Z_tot, l, rng)
        return CodedScheme(spec, design, z, k)
    z = bitalloc.equal_bits(profiles, Z_res) + 2
    if spec.kind == "IS_SGD":
        design = issgd_design(profiles, n)
    elif spec.kind == "BGC":
        design = bgc_design(profiles, n, spec.params["d"], rng)
    else:
        design = sgc_design(profiles, n, np.full(n, int(round(spec.params["d"]))))
    return CodedScheme(spec, replace(design, phi=phi_vector(z, l)), z, k)
