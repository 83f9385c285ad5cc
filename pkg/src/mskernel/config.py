"""Run configuration stored as an INI file with flat ``key = value`` sections."""
from __future__ import annotations

import configparser
import io
import math
from dataclasses import dataclass, fields

from .geometry import Box, HierarchyParams
from .kernel import DEFAULT_KERNEL, KERNEL_NAMES
from .solver import INITIAL_GUESSES, INNER_SOLVERS, JACOBI_MODES, STOPPING_RULES, SolverConfig

DEFAULT_MAX_LEVELS = 8
DEFAULT_ANALYSIS_MAX = 5

# config key -> INI section
_SECTIONS = {
    "domain_lower": "hierarchy", "domain_upper": "hierarchy", "levels": "hierarchy",
    "mu": "hierarchy", "nu": "hierarchy", "c_h_expected": "hierarchy", "c_q_expected": "hierarchy",
    "gamma": "hierarchy",
    "kernel": "kernel", "c_phi": "kernel", "C_phi": "kernel",
    "target": "problem",
    "mode": "solver", "cg_tol": "solver", "cg_max_iter": "solver", "inner_tol": "solver",
    "inner_solver": "solver", "threshold_tol": "solver", "T": "solver", "jacobi_initial": "solver",
    "stopping": "solver",
    "T_list": "analysis", "analysis_max_levels": "analysis",
    "workers": "run", "deterministic": "run", "seed": "run", "output": "run", "max_levels": "run",
}


@dataclass(frozen=True)
class RunConfig:
    domain_lower: tuple = (0.0, 0.0)
    domain_upper: tuple = (1.0, 1.0)
    levels: int = 4
    mu: float = 0.5
    nu: float = 4.0
    c_h_expected: float = 1.0
    c_q_expected: float = 2.0
    gamma: float | None = None
    kernel: str = DEFAULT_KERNEL
    c_phi: float = 1.0
    C_phi: float = 1.0
    target: str = "franke"
    mode: str = "matrix_free"
    cg_tol: float = 1e-8
    cg_max_iter: int | None = None
    inner_tol: float | None = None
    inner_solver: str = "cg"
    threshold_tol: float = 1e-10
    T: str = "auto"
    jacobi_initial: str = "zero"
    stopping: str = "uniform"
    T_list: tuple = (1.0, 2.0, 3.0, 4.0, 5.0, 6.0)
    analysis_max_levels: int = DEFAULT_ANALYSIS_MAX
    workers: str = "1"
    deterministic: bool = True
    seed: int = 0
    output: str = "out"
    max_levels: int = DEFAULT_MAX_LEVELS

    def __post_init__(self):
        object.__setattr__(self, "domain_lower", tuple(float(v) for v in self.domain_lower))
        object.__setattr__(self, "domain_upper", tuple(float(v) for v in self.domain_upper))
        object.__setattr__(self, "T_list", tuple(float(v) for v in self.T_list))
        object.__setattr__(self, "workers", str(self.workers))
        object.__setattr__(self, "T", str(self.T))
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if self.kernel not in KERNEL_NAMES:
            raise ValueError(f"kernel must be one of {KERNEL_NAMES}")
        if self.mode not in JACOBI_MODES:
            raise ValueError(f"mode must be one of {JACOBI_MODES}")
        if self.jacobi_initial not in INITIAL_GUESSES:
            raise ValueError(f"jacobi_initial must be one of {INITIAL_GUESSES}")
        if self.inner_solver not in INNER_SOLVERS:
            raise ValueError(f"inner_solver must be one of {INNER_SOLVERS}")
        if self.stopping not in STOPPING_RULES:
            raise ValueError(f"stopping must be one of {STOPPING_RULES}")
        if self.T not in ("auto", "full"):
            if not float(self.T) > 0:
                raise ValueError("T must be 'auto', 'full' or a positive number")
        if self.workers != "auto" and int(self.workers) < 1:
            raise ValueError("workers must be 'auto' or a positive integer")

    @property
    def domain(self) -> Box:
        return Box(self.domain_lower, self.domain_upper)

    @property
    def d(self) -> int:
        return len(self.domain_lower)

    def hierarchy_params(self, tau: float) -> HierarchyParams:
        return HierarchyParams(d=self.d, mu=self.mu, nu=self.nu, c_h=self.c_h_expected,
                               c_q=self.c_q_expected, tau=tau, gamma=self.gamma)

    def solver_config(self, T_value: float | None = None) -> SolverConfig:
        return SolverConfig(
            cg_tol=self.cg_tol, cg_max_iter=self.cg_max_iter, jacobi_mode=self.mode,
            T=T_value if self.mode == "thresholded" else None, jacobi_initial=self.jacobi_initial,
            inner_tol=self.inner_tol, inner_solver=self.inner_solver, stopping=self.stopping,
            threshold_tol=self.threshold_tol, workers=self.workers_value, deterministic=self.deterministic,
        )

    @property
    def workers_value(self):
        return "auto" if self.workers == "auto" else int(self.workers)


def _fmt(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ", ".join(repr(float(v)) for v in value)
    return str(value)


def _parse_value(name: str, raw: str, default):
    raw = raw.strip()
    if raw.lower() == "none":
        return None
    if isinstance(default, bool):
        lowered = raw.lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{name}: expected a boolean, got {raw!r}")
    if isinstance(default, tuple):
        return tuple(float(v) for v in raw.split(",") if v.strip())
    if name in ("levels", "seed", "max_levels", "analysis_max_levels", "cg_max_iter"):
        return int(raw)
    if name in ("mu", "nu", "c_h_expected", "c_q_expected", "gamma", "c_phi", "C_phi",
                "cg_tol", "inner_tol", "threshold_tol"):
        return float(raw)
    return raw


def emit_config(cfg: RunConfig) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    for f in fields(cfg):
        section = _SECTIONS[f.name]
        if not parser.has_section(section):
            parser.add_section(section)
        parser.set(section, f.name, _fmt(getattr(cfg, f.name)))
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    """Parse INI text; missing keys keep the values of ``base`` (defaults if ``None``)."""
    base = base or RunConfig()
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    parser.read_string(text)
    known = {f.name: f for f in fields(RunConfig)}
    values = {}
    for section in parser.sections():
        for key, raw in parser.items(section):
            if key not in known:
                raise ValueError(f"unknown config key [{section}] {key}")
            if _SECTIONS[key] != section:
                raise ValueError(f"key {key} belongs in section [{_SECTIONS[key]}], found in [{section}]")
            values[key] = _parse_value(key, raw, getattr(RunConfig(), key))
    current = {f.name: getattr(base, f.name) for f in fields(base)}
    current.update(values)
    return RunConfig(**current)


def load_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def resolve_T(value: str):
    """``"full"`` maps to ``math.inf``; ``"auto"`` is returned unchanged for the caller."""
    if value == "full":
        return math.inf
    if value == "auto":
        return "auto"
    return float(value)
