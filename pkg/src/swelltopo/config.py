"""Problem configuration: TOML text in ``.cfg`` files, SI units spelled out in key names.

Parsing is schema-driven from the dataclasses below.  Every problem found
(missing keys, wrong types, unknown keys, inconsistent values, dangling set
references) is collected and raised together in one :class:`ConfigError`.
"""
from __future__ import annotations

import dataclasses
import sys
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib
import tomli_w

from .errors import ConfigError, OutputError

BUILTIN_SETS = ("left", "right", "bottom", "top", "bottom_left", "bottom_right", "top_left", "top_right", "all")
EDGE_SETS = ("left", "right", "bottom", "top")


@dataclass
class BoxSet:
    """Nodes inside an axis-aligned box (bounds inclusive, with a small tolerance)."""

    name: str
    x_min_m: float
    x_max_m: float
    y_min_m: float
    y_max_m: float


@dataclass
class MeshConfig:
    nx: int
    ny: int
    length_m: float
    height_m: float
    thickness_m: float = 1e-3
    node_sets: list[BoxSet] = field(default_factory=list)


@dataclass
class PhaseConfig:
    name: str
    G_pa: float
    chi: dict[str, float]
    fiber_stiffness_pa: float = 0.0


@dataclass
class SolventConfig:
    name: str
    mu_dry_j_per_mol: float = -1e5
    mu_wet_j_per_mol: float = -100.0
    mu0_j_per_mol: float = 0.0
    molar_volume_m3_per_mol: float = 1.8e-5
    temperature_k: float = 298.0


@dataclass
class DirichletConfig:
    set: str
    component: str
    value_m: float = 0.0


@dataclass
class TractionConfig:
    edge: str
    traction_pa: list[float]


@dataclass
class LoadCaseConfig:
    name: str
    solvent: str


@dataclass
class RegionConfig:
    phase: str
    x_min_m: float
    x_max_m: float
    y_min_m: float
    y_max_m: float


@dataclass
class LayoutConfig:
    """Crisp phase layout: element centroids inside a region get its phase (later regions win)."""

    default_phase: str
    regions: list[RegionConfig] = field(default_factory=list)
    fiber_angle_deg: float = 0.0


@dataclass
class PortConfig:
    """Output port: ``sign`` times the force component summed over the nodes of ``set``."""

    set: str
    component: str = "x"
    sign: float = 1.0


@dataclass
class ObjectiveConfig:
    kind: str = "none"            # "blocked_force", "shape" or "none"
    case: str = ""
    port: PortConfig | None = None
    sample_set: str = "all"


@dataclass
class ConstraintConfig:
    kind: str                     # "volume", "grayness" or "reaction_floor"
    name: str
    phases: list[str] = field(default_factory=list)
    bound: float = 1.0
    case: str = ""
    port: PortConfig | None = None
    floor_n: float = 20.0


@dataclass
class InterpolationConfig:
    q: float = 1.0


@dataclass
class ScheduleConfig:
    p_start: float = 1.0
    p_step: float = 0.05
    p_max: float = 3.0
    xi_start: float = 2.0
    xi_step: float = 0.05
    xi_min: float = 0.05
    tau_start: float = 3.0
    tau_growth: float = 1.03


@dataclass
class ProjectionConfig:
    enabled: bool = False
    beta_start: float = 1.0
    beta_step: float = 0.0
    beta_max: float = 1.0
    eta: float = 0.5


@dataclass
class NetworkConfig:
    num_fourier: int = 64
    sigma: float = 0.0            # 0 selects the mesh-based default bandwidth
    hidden: list[int] = field(default_factory=lambda: [40, 40])
    heads: list[str] = field(default_factory=lambda: ["rho"])


@dataclass
class OptimizerConfig:
    max_iterations: int = 250
    learning_rate: float = 5e-3
    clip_norm: float = 1.0
    loss_tol: float = 1e-3
    loss_window: int = 5


@dataclass
class SolverConfig:
    newton_tol: float = 1e-6
    newton_abs_floor_n: float = 1e-10
    newton_max_iterations: int = 30
    armijo: float = 1e-4
    backtrack: float = 0.5
    max_backtracks: int = 20
    load_steps: int = 20
    load_beta: float = 0.05


@dataclass
class OutputConfig:
    directory: str = "out"
    snapshot_every: int = 25
    resample_nx: int = 0          # 0 selects twice the mesh resolution
    resample_ny: int = 0


@dataclass
class FDCheckConfig:
    components: int = 20
    steps: list[float] = field(default_factory=lambda: [1e-4, 1e-5, 1e-6, 1e-7])
    seed: int = 0
    iteration: int = 10           # continuation values are taken at this iteration
    newton_tol: float = 1e-12


@dataclass
class ProblemConfig:
    name: str
    mode: str                     # "optimize" or "forward"
    mesh: MeshConfig
    phases: list[PhaseConfig]
    solvents: list[SolventConfig]
    load_cases: list[LoadCaseConfig]
    seed: int = 0
    dirichlet: list[DirichletConfig] = field(default_factory=list)
    tractions: list[TractionConfig] = field(default_factory=list)
    layout: LayoutConfig | None = None
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    constraints: list[ConstraintConfig] = field(default_factory=list)
    interpolation: InterpolationConfig = field(default_factory=InterpolationConfig)
    schedules: ScheduleConfig = field(default_factory=ScheduleConfig)
    projection: ProjectionConfig = field(default_factory=ProjectionConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    output: OutputConfig = field(default_factory=OutputConfig)
    fdcheck: FDCheckConfig = field(default_factory=FDCheckConfig)
    # keys filled from defaults while parsing; not part of the serialized form
    defaulted: list[str] = field(default_factory=list, compare=False, repr=False)


# ------------------------------------------------------------------ generic schema parsing

_INTERNAL = {"defaulted"}


def _strip_optional(tp):
    if typing.get_origin(tp) in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        return args[0], True
    return tp, False


def _convert(value, tp, where, errors, defaulted):
    tp, optional = _strip_optional(tp)
    if value is None and optional:
        return None
    origin = typing.get_origin(tp)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            errors.append(f"{where}: expected a table")
            return None
        return _build(tp, value, where, errors, defaulted)
    if origin is list:
        (item,) = typing.get_args(tp)
        if not isinstance(value, list):
            errors.append(f"{where}: expected a list")
            return []
        return [_convert(v, item, f"{where}[{i}]", errors, defaulted) for i, v in enumerate(value)]
    if origin is dict:
        _, vt = typing.get_args(tp)
        if not isinstance(value, dict):
            errors.append(f"{where}: expected a table")
            return {}
        return {str(k): _convert(v, vt, f"{where}.{k}", errors, defaulted) for k, v in value.items()}
    if tp is bool:
        if not isinstance(value, bool):
            errors.append(f"{where}: expected true/false")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            errors.append(f"{where}: expected an integer")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            errors.append(f"{where}: expected a number")
            return value
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            errors.append(f"{where}: expected a string")
        return value
    raise TypeError(f"unsupported schema type {tp!r}")  # pragma: no cover


def _build(cls, data, where, errors, defaulted):
    hints = typing.get_type_hints(cls)
    kwargs = {}
    names = set()
    for f in dataclasses.fields(cls):
        if f.name in _INTERNAL:
            continue
        names.add(f.name)
        key = f"{where}.{f.name}" if where else f.name
        if f.name in data:
            kwargs[f.name] = _convert(data[f.name], hints[f.name], key, errors, defaulted)
        elif f.default is not dataclasses.MISSING or f.default_factory is not dataclasses.MISSING:
            defaulted.append(key)
        else:
            errors.append(f"{key}: missing required key")
            kwargs[f.name] = None
    for k in data:
        if k not in names:
            errors.append(f"{where + '.' if where else ''}{k}: unknown key")
    try:
        return cls(**kwargs)
    except TypeError as exc:  # pragma: no cover
        errors.append(f"{where}: {exc}")
        return None


def to_dict(cfg):
    """Plain nested dict (TOML-serializable: ``None`` entries are dropped)."""
    out = {}
    for f in dataclasses.fields(cfg):
        if f.name in _INTERNAL:
            continue
        v = getattr(cfg, f.name)
        if v is None:
            continue
        if dataclasses.is_dataclass(v):
            v = to_dict(v)
        elif isinstance(v, list):
            v = [to_dict(x) if dataclasses.is_dataclass(x) else x for x in v]
        elif isinstance(v, dict):
            v = dict(v)
        out[f.name] = v
    return out


def dumps(cfg: ProblemConfig) -> str:
    return tomli_w.dumps(to_dict(cfg))


def loads(text, source="<string>") -> ProblemConfig:
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{source}: not valid TOML: {exc}") from None
    errors, defaulted = [], []
    cfg = _build(ProblemConfig, data, "", errors, defaulted)
    if not errors:
        cfg.defaulted = defaulted
        errors += validate(cfg)
    if errors:
        raise ConfigError([f"{source}: {e}" for e in errors])
    return cfg


def load_config(path) -> ProblemConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise OutputError(f"cannot read {path}: {exc}") from exc
    return loads(text, source=path.name)


# ------------------------------------------------------------------ semantic checks


def _positive(errors, where, value):
    if not value > 0:
        errors.append(f"{where}: must be > 0 (got {value})")


def validate(cfg: ProblemConfig) -> list[str]:
    """All semantic violations of an already well-typed config."""
    e = []
    if cfg.mode not in ("optimize", "forward"):
        e.append(f"mode: must be 'optimize' or 'forward' (got {cfg.mode!r})")
    m = cfg.mesh
    for k in ("nx", "ny"):
        if getattr(m, k) < 1:
            e.append(f"mesh.{k}: must be >= 1")
    for k in ("length_m", "height_m", "thickness_m"):
        _positive(e, f"mesh.{k}", getattr(m, k))
    sets = set(BUILTIN_SETS)
    for i, b in enumerate(m.node_sets):
        if b.name in sets:
            e.append(f"mesh.node_sets[{i}].name: {b.name!r} is already defined")
        if b.x_min_m > b.x_max_m or b.y_min_m > b.y_max_m:
            e.append(f"mesh.node_sets[{i}]: empty box (min > max)")
        sets.add(b.name)

    phase_names = [p.name for p in cfg.phases]
    solvent_names = [s.name for s in cfg.solvents]
    if not cfg.phases:
        e.append("phases: at least one phase is required")
    if len(set(phase_names)) != len(phase_names):
        e.append("phases: duplicate phase names")
    if len(set(solvent_names)) != len(solvent_names):
        e.append("solvents: duplicate solvent names")
    for i, p in enumerate(cfg.phases):
        _positive(e, f"phases[{i}].G_pa", p.G_pa)
        if p.fiber_stiffness_pa < 0:
            e.append(f"phases[{i}].fiber_stiffness_pa: must be >= 0")
        for s, chi in p.chi.items():
            _positive(e, f"phases[{i}].chi.{s}", chi)
            if s not in solvent_names:
                e.append(f"phases[{i}].chi.{s}: unknown solvent")
    for i, s in enumerate(cfg.solvents):
        if s.mu_dry_j_per_mol > s.mu_wet_j_per_mol:
            e.append(f"solvents[{i}]: mu_dry_j_per_mol ({s.mu_dry_j_per_mol:g}) exceeds "
                     f"mu_wet_j_per_mol ({s.mu_wet_j_per_mol:g})")
        _positive(e, f"solvents[{i}].molar_volume_m3_per_mol", s.molar_volume_m3_per_mol)
        _positive(e, f"solvents[{i}].temperature_k", s.temperature_k)

    if not cfg.load_cases:
        e.append("load_cases: at least one load case is required")
    case_names = [c.name for c in cfg.load_cases]
    if len(set(case_names)) != len(case_names):
        e.append("load_cases: duplicate names")
    for i, c in enumerate(cfg.load_cases):
        if c.solvent not in solvent_names:
            e.append(f"load_cases[{i}].solvent: unknown solvent {c.solvent!r}")
        else:
            for p in cfg.phases:
                if c.solvent not in p.chi:
                    e.append(f"phases: {p.name!r} has no chi for solvent {c.solvent!r}")

    for i, d in enumerate(cfg.dirichlet):
        if d.set not in sets:
            e.append(f"dirichlet[{i}].set: unknown node set {d.set!r}")
        if d.component not in ("x", "y"):
            e.append(f"dirichlet[{i}].component: must be 'x' or 'y'")
    for i, t in enumerate(cfg.tractions):
        if t.edge not in EDGE_SETS:
            e.append(f"tractions[{i}].edge: unknown edge {t.edge!r}")
        if len(t.traction_pa) != 2:
            e.append(f"tractions[{i}].traction_pa: needs two components")

    def check_port(where, port):
        if port is None:
            e.append(f"{where}: a port is required")
            return
        if port.set not in sets:
            e.append(f"{where}.set: unknown node set {port.set!r}")
        if port.component not in ("x", "y"):
            e.append(f"{where}.component: must be 'x' or 'y'")
        if port.sign == 0:
            e.append(f"{where}.sign: must be nonzero")

    def check_case(where, name):
        if name not in case_names:
            e.append(f"{where}: unknown load case {name!r}")

    if cfg.layout is not None:
        lay = cfg.layout
        for ph in [lay.default_phase] + [r.phase for r in lay.regions]:
            if ph not in phase_names:
                e.append(f"layout: unknown phase {ph!r}")

    o = cfg.objective
    if o.kind not in ("blocked_force", "shape", "none"):
        e.append(f"objective.kind: unknown objective {o.kind!r}")
    if o.kind != "none":
        check_case("objective.case", o.case)
    if o.kind == "blocked_force":
        check_port("objective.port", o.port)
    if o.kind == "shape":
        if o.sample_set not in sets:
            e.append(f"objective.sample_set: unknown node set {o.sample_set!r}")
        if cfg.layout is None:
            e.append("objective: a shape target needs a [layout] to generate it")
    if cfg.mode == "optimize" and o.kind == "none":
        e.append("objective.kind: optimize mode needs an objective")
    if cfg.mode == "forward" and cfg.layout is None:
        e.append("layout: forward mode needs a fixed layout")

    cnames = [c.name for c in cfg.constraints]
    if len(set(cnames)) != len(cnames):
        e.append("constraints: duplicate names")
    for i, c in enumerate(cfg.constraints):
        where = f"constraints[{i}]"
        if c.kind == "volume":
            if not c.phases:
                e.append(f"{where}.phases: empty phase set")
            for ph in c.phases:
                if ph not in phase_names:
                    e.append(f"{where}.phases: unknown phase {ph!r}")
            if not 0 <= c.bound <= 1:
                e.append(f"{where}.bound: must lie in [0, 1]")
        elif c.kind == "reaction_floor":
            check_case(f"{where}.case", c.case)
            check_port(f"{where}.port", c.port)
        elif c.kind != "grayness":
            e.append(f"{where}.kind: unknown constraint {c.kind!r}")

    s = cfg.schedules
    if s.p_start < 1 or s.p_max < s.p_start or s.p_step < 0:
        e.append("schedules: need 1 <= p_start <= p_max and p_step >= 0")
    if s.xi_min < 0 or s.xi_start < s.xi_min or s.xi_step < 0:
        e.append("schedules: need 0 <= xi_min <= xi_start and xi_step >= 0")
    _positive(e, "schedules.tau_start", s.tau_start)
    if s.tau_growth < 1:
        e.append("schedules.tau_growth: must be >= 1")
    pr = cfg.projection
    if not 0 < pr.eta < 1:
        e.append("projection.eta: must lie in (0, 1)")
    if pr.beta_start <= 0 or pr.beta_max < pr.beta_start or pr.beta_step < 0:
        e.append("projection: need 0 < beta_start <= beta_max and beta_step >= 0")
    _positive(e, "interpolation.q", cfg.interpolation.q)

    n = cfg.network
    if n.num_fourier < 1 or any(h < 1 for h in n.hidden) or not n.hidden:
        e.append("network: sizes must be positive")
    if n.sigma < 0:
        e.append("network.sigma: must be >= 0")
    if not n.heads or any(h not in ("rho", "theta") for h in n.heads) or len(set(n.heads)) != len(n.heads):
        e.append("network.heads: a non-empty subset of 'rho', 'theta'")
    if "rho" not in n.heads and cfg.layout is None and cfg.mode == "optimize":
        e.append("network.heads: without a 'rho' head a fixed [layout] is required")

    op = cfg.optimizer
    if op.max_iterations < 1:
        e.append("optimizer.max_iterations: must be >= 1")
    _positive(e, "optimizer.learning_rate", op.learning_rate)
    _positive(e, "optimizer.clip_norm", op.clip_norm)
    if op.loss_tol < 0:
        e.append("optimizer.loss_tol: must be >= 0")
    if op.loss_window < 1:
        e.append("optimizer.loss_window: must be >= 1")

    sv = cfg.solver
    _positive(e, "solver.newton_tol", sv.newton_tol)
    _positive(e, "solver.newton_abs_floor_n", sv.newton_abs_floor_n)
    _positive(e, "solver.armijo", sv.armijo)
    _positive(e, "solver.load_beta", sv.load_beta)
    if not 0 < sv.backtrack < 1:
        e.append("solver.backtrack: must lie in (0, 1)")
    for k in ("newton_max_iterations", "max_backtracks", "load_steps"):
        if getattr(sv, k) < 1:
            e.append(f"solver.{k}: must be >= 1")

    out = cfg.output
    if not out.directory:
        e.append("output.directory: must be non-empty")
    if out.snapshot_every < 0 or out.resample_nx < 0 or out.resample_ny < 0:
        e.append("output: cadence and resolution must be >= 0")
    fd = cfg.fdcheck
    if fd.components < 1 or not fd.steps or any(not h > 0 for h in fd.steps) or fd.iteration < 0:
        e.append("fdcheck: components >= 1, positive steps and iteration >= 0 required")
    _positive(e, "fdcheck.newton_tol", fd.newton_tol)
    return e
