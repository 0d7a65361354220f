"""Experiment configuration files.

INI-style text: ``key = value`` lines inside ``[section]`` headers, ``#`` or
``;`` comments (also trailing ones).  Every error names the file and line.
See ``configs/defaults.ini`` for an annotated configuration.
"""
import configparser
import re
from dataclasses import dataclass, field

from .baselines import SchemeSpec
from .errors import ConfigError, HetGCError
from .sim import OPTIMIZERS, SCHEDULES

SECTIONS = {
    "scenario": {"name", "seed"},
    "workers": {"k", "psi_min", "psi_max", "tau_th", "p"},
    "budget": {"l", "z_tot", "z_res", "eta"},
    "schemes": {"run", "solver"},
    "loss": {"kind", "partitions", "lambda", "structure", "rows", "samples", "ridge", "spread"},
    "optimizer": {"name", "schedule", "lr", "batch_size", "iterations", "trials",
                  "adam_lambda", "beta1", "beta2", "eps", "two_track"},
    "output": {"dir"},
}
SOLVER_NAMES = ("dp", "proposed", "greedy", "lagrangian", "equal")


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    seed: int = 0
    k: int = 10
    psi_min: float = 0.1
    psi_max: float = 2.0
    tau_th: float = 1.1
    p: list | None = None
    l: int = 1024
    Z_tot: list | None = None
    Z_res: list = field(default_factory=lambda: [10])
    eta: str = "1"
    schemes: list = field(default_factory=lambda: ["ideal_sgd", "proposed", "osgc_equalbits", "bgc:d=2"])
    solver: str = "proposed"
    loss: str = "quadratic"
    partitions: int = 20
    lam: float = 1.0
    structure: str = "diagonal"
    rows: int | None = None
    samples: int = 10
    ridge: float = 0.0
    spread: float = 1.0
    optimizer: str = "gd"
    schedule: str = "fixed"
    lr: float = 0.01
    batch_size: int | None = None
    iterations: int = 1000
    trials: int = 5
    adam_lambda: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    two_track: bool = True
    out_dir: str | None = None
    path: str | None = None

    @property
    def workers(self):
        return len(self.p) if self.p is not None else self.k

    def budgets(self):
        """Residual budgets Z_res, one per sweep point."""
        if self.Z_tot is not None:
            return [z - 2 * self.workers for z in self.Z_tot]
        return list(self.Z_res)

    def single_budget(self):
        budgets = self.budgets()
        if len(budgets) != 1:
            raise ConfigError(f"this command needs one budget, got {len(budgets)}", self.path)
        return budgets[0]


def _line_index(text):
    """Map (section, key) to the 1-based line where the key is set."""
    where, section = {}, None
    for no, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        m = re.match(r"\[([^\]]+)\]", line)
        if m:
            section = m.group(1).strip().lower()
            where[section, None] = no
            continue
        m = re.match(r"([^=:#;\s][^=:]*?)\s*[=:]", line)
        if m and section is not None:
            where[section, m.group(1).strip().lower()] = no
    return where


class _Reader:
    def __init__(self, parser, lines, path):
        self.parser, self.lines, self.path = parser, lines, path

    def error(self, section, key, message):
        line = self.lines.get((section, key), self.lines.get((section, None)))
        return ConfigError(f"[{section}] {key}: {message}" if key else message, self.path, line)

    def has(self, section, key):
        return self.parser.has_option(section, key) and self.parser.get(section, key).strip() != ""

    def raw(self, section, key):
        return self.parser.get(section, key).strip()

    def get(self, section, key, cast, default):
        if not self.has(section, key):
            return default
        text = self.raw(section, key)
        try:
            return cast(text)
        except (TypeError, ValueError) as exc:
            raise self.error(section, key, f"cannot read {text!r} ({exc})") from None

    def number_list(self, section, key, cast, default):
        if not self.has(section, key):
            return default
        return self.get(section, key, lambda t: [cast(x) for x in re.split(r"[,\s]+", t) if x], default)


def _bool(text):
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError("expected true or false")


def _int(text):
    value = float(text)
    if value != int(value):
        raise ValueError("expected an integer")
    return int(value)


def parse_config(text, path="<config>"):
    """Parse configuration text into an :class:`ExperimentConfig`."""
    if not text.strip():
        raise ConfigError("configuration is empty", path)
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), interpolation=None)
    try:
        parser.read_string(text, source=path)
    except configparser.MissingSectionHeaderError as exc:
        raise ConfigError("key outside of any [section]", path, exc.lineno) from None
    except configparser.DuplicateSectionError as exc:
        raise ConfigError(f"section [{exc.section}] appears twice", path, exc.lineno) from None
    except configparser.DuplicateOptionError as exc:
        raise ConfigError(f"[{exc.section}] {exc.option}: key set twice", path, exc.lineno) from None
    except configparser.ParsingError as exc:
        lineno = exc.errors[0][0] if exc.errors else None
        raise ConfigError("malformed line (expected key = value)", path, lineno) from None
    lines = _line_index(text)
    r = _Reader(parser, lines, path)
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"unknown section [{section}] (sections are lowercase)", path,
                              lines.get((section.lower(), None)))
        for key in parser.options(section):
            if key not in SECTIONS[section]:
                raise r.error(section, key, "unknown key")
    if not parser.sections():
        raise ConfigError("configuration has no sections", path)

    cfg = ExperimentConfig(path=path)
    cfg.name = r.get("scenario", "name", str, cfg.name)
    cfg.seed = r.get("scenario", "seed", _int, cfg.seed)
    cfg.k = r.get("workers", "k", _int, cfg.k)
    cfg.psi_min = r.get("workers", "psi_min", float, cfg.psi_min)
    cfg.psi_max = r.get("workers", "psi_max", float, cfg.psi_max)
    cfg.tau_th = r.get("workers", "tau_th", float, cfg.tau_th)
    cfg.p = r.number_list("workers", "p", float, None)
    cfg.l = r.get("budget", "l", _int, cfg.l)
    cfg.Z_tot = r.number_list("budget", "z_tot", _int, None)
    cfg.Z_res = r.number_list("budget", "z_res", _int, cfg.Z_res)
    cfg.eta = r.get("budget", "eta", str, cfg.eta)
    if r.has("schemes", "run"):
        cfg.schemes = _split_schemes(r.raw("schemes", "run"))
    cfg.solver = r.get("schemes", "solver", str, cfg.solver)
    cfg.loss = r.get("loss", "kind", str.lower, cfg.loss)
    cfg.partitions = r.get("loss", "partitions", _int, cfg.partitions)
    cfg.lam = r.get("loss", "lambda", float, cfg.lam)
    cfg.structure = r.get("loss", "structure", str.lower, cfg.structure)
    cfg.rows = r.get("loss", "rows", _int, cfg.rows)
    cfg.samples = r.get("loss", "samples", _int, cfg.samples)
    cfg.ridge = r.get("loss", "ridge", float, cfg.ridge)
    cfg.spread = r.get("loss", "spread", float, cfg.spread)
    cfg.optimizer = r.get("optimizer", "name", str.lower, cfg.optimizer)
    cfg.schedule = r.get("optimizer", "schedule", str.lower, cfg.schedule)
    cfg.lr = r.get("optimizer", "lr", float, cfg.lr)
    cfg.batch_size = r.get("optimizer", "batch_size", _int, cfg.batch_size)
    cfg.iterations = r.get("optimizer", "iterations", _int, cfg.iterations)
    cfg.trials = r.get("optimizer", "trials", _int, cfg.trials)
    cfg.adam_lambda = r.get("optimizer", "adam_lambda", float, cfg.adam_lambda)
    cfg.beta1 = r.get("optimizer", "beta1", float, cfg.beta1)
    cfg.beta2 = r.get("optimizer", "beta2", float, cfg.beta2)
    cfg.eps = r.get("optimizer", "eps", float, cfg.eps)
    cfg.two_track = r.get("optimizer", "two_track", _bool, cfg.two_track)
    cfg.out_dir = r.get("output", "dir", str, cfg.out_dir)
    _validate(cfg, r)
    return cfg


def _split_schemes(text):
    # scheme names may carry their own comma-separated parameters (bgc:d=2,...),
    # so schemes are separated by whitespace or by commas not followed by key=value
    parts = re.split(r"\s+|,(?![^,:\s]+=)", text)
    return [p for p in (x.strip() for x in parts) if p]


def _validate(cfg, r):
    def check(cond, section, key, message):
        if not cond:
            raise r.error(section, key, message)

    if cfg.p is not None:
        check(len(cfg.p) >= 1 and all(0.0 <= v < 1.0 for v in cfg.p), "workers", "p",
              "every straggling probability must lie in [0, 1)")
    else:
        check(cfg.k >= 1, "workers", "k", "need at least one worker")
        check(0 < cfg.psi_min <= cfg.psi_max, "workers", "psi_min", "need 0 < psi_min <= psi_max")
        check(cfg.tau_th > 1.0, "workers", "tau_th", "tau_th must exceed 1")
    check(cfg.l >= 1, "budget", "l", "dimension must be positive")
    quantized = any(SchemeSpec.parse(s).kind != "IDEAL_SGD" for s in cfg.schemes) if cfg.schemes else True
    key = "z_tot" if cfg.Z_tot is not None else "z_res"
    check(all(z >= 0 for z in cfg.budgets()) or not quantized, "budget", key,
          f"Z_tot must be at least 2k = {2 * cfg.workers} when a quantized scheme is selected")
    if cfg.eta not in ("1", "balance"):
        try:
            check(float(cfg.eta) > 0, "budget", "eta", "eta must be positive")
        except ValueError:
            raise r.error("budget", "eta", "expected 1, balance or a positive number") from None
    check(bool(cfg.schemes), "schemes", "run", "list at least one scheme")
    for s in cfg.schemes:
        try:
            SchemeSpec.parse(s)
        except HetGCError as exc:
            raise r.error("schemes", "run", str(exc)) from None
    check(cfg.solver in SOLVER_NAMES, "schemes", "solver", f"choose from {', '.join(SOLVER_NAMES)}")
    check(cfg.loss in ("quadratic", "logistic"), "loss", "kind", "choose quadratic or logistic")
    check(cfg.partitions >= 1, "loss", "partitions", "need at least one partition")
    check(cfg.lam > 0, "loss", "lambda", "lambda must be positive")
    check(cfg.structure in ("dense", "diagonal"), "loss", "structure", "choose dense or diagonal")
    check(cfg.rows is None or cfg.rows >= 1, "loss", "rows", "rows must be positive")
    check(cfg.samples >= 1, "loss", "samples", "samples must be positive")
    check(cfg.optimizer in OPTIMIZERS, "optimizer", "name", f"choose from {', '.join(OPTIMIZERS)}")
    check(cfg.schedule in SCHEDULES, "optimizer", "schedule", f"choose from {', '.join(SCHEDULES)}")
    check(cfg.optimizer != "sgd" or (cfg.batch_size or 0) >= 1, "optimizer", "batch_size",
          "sgd needs a positive batch_size")
    check(cfg.iterations >= 1, "optimizer", "iterations", "need at least one iteration")
    check(cfg.trials >= 1, "optimizer", "trials", "need at least one trial")


def load_config(path):
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read configuration ({exc.strerror})", path) from None
    return parse_config(text, str(path))
