"""Experiment configuration: flat `section.key = value` files.

The grammar is deliberately tiny: UTF-8 text, one `section.key = value`
per line, `#` starts a comment, blank lines are ignored. Unknown keys are
errors (typos must not be silently absorbed), and a config written with
write_config parses back to an equal ExperimentConfig.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

from .optimizer import ConstOverSqrtK, HyperParams, InvSqrtK
from .problems import (
    LogisticProblem,
    Mlp2Problem,
    QuadraticProblem,
    load_libsvm,
    synth_classification,
)
from .runtime import Fixed, PerWorkerFixed, RunConfig, UniformInt
from .staleness import StalenessPolicy
from .vectormath import BoxConstraint


class ConfigError(ValueError):
    pass


@dataclass
class ProblemSpec:
    kind: str = "logistic"  # logistic | mlp2 | quadratic
    data: str = ""  # libsvm path; empty means synthetic
    n_samples: int = 1000
    n_features: int = 100
    classes: int = 2
    separable: bool = False
    seed: int = 0
    l2: float = 0.0
    hidden: int = 50
    box_radius: float = 0.0  # > 0 builds the cube [-r, r]^n
    quad_a: tuple = (1.0, 2.0)
    quad_b: tuple = (1.0, 1.0)
    quad_samples: int = 1
    quad_noise: float = 0.0


@dataclass
class OptimizerSpec:
    beta1: float = 0.9
    beta2: float = 0.999
    alpha: float = 1e-3
    schedule: str = "const"  # const -> alpha/sqrt(K); invsqrt -> alpha/sqrt(k)
    eps: float = 0.0


@dataclass
class RunSpec:
    mode: str = "sim"
    workers: int = 1
    batch_size: int = 32
    iterations: int = 1000
    tau_max: int = 64
    read_mode: str = "consistent"
    delay: str = "fixed:0"  # fixed:T | uniform:T | perworker:T1,T2,...
    master_seed: int = 0
    wire_transport: str = "loopback"
    wire_latency: int = 0


@dataclass
class OutputSpec:
    trace: str = "trace.csv"


@dataclass
class AuditSpec:
    enabled: bool = False
    stride: int = 10


@dataclass
class ExperimentConfig:
    problem: ProblemSpec = field(default_factory=ProblemSpec)
    optimizer: OptimizerSpec = field(default_factory=OptimizerSpec)
    run: RunSpec = field(default_factory=RunSpec)
    output: OutputSpec = field(default_factory=OutputSpec)
    audit: AuditSpec = field(default_factory=AuditSpec)


_SECTIONS = {
    "problem": ProblemSpec,
    "optimizer": OptimizerSpec,
    "run": RunSpec,
    "output": OutputSpec,
    "audit": AuditSpec,
}


def _parse_value(kind, text: str, where: str):
    if kind is bool:
        low = text.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ConfigError(f"{where}: expected a boolean, got {text!r}")
    if kind is int:
        try:
            return int(text)
        except ValueError:
            raise ConfigError(f"{where}: expected an integer, got {text!r}") from None
    if kind is float:
        try:
            return float(text)
        except ValueError:
            raise ConfigError(f"{where}: expected a number, got {text!r}") from None
    if kind is tuple:
        try:
            return tuple(float(tok) for tok in text.split(",") if tok.strip() != "")
        except ValueError:
            raise ConfigError(f"{where}: expected comma-separated numbers, got {text!r}") from None
    return text


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(repr(float(v)) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _schema():
    out = {}
    for section, cls in _SECTIONS.items():
        for f in fields(cls):
            out[f"{section}.{f.name}"] = (section, f.name, f.type)
    return out


_SCHEMA = _schema()
# dataclass field types arrive as strings under `from __future__ import annotations`
_TYPE_NAMES = {"int": int, "float": float, "bool": bool, "str": str, "tuple": tuple}


def parse_config(path) -> ExperimentConfig:
    cfg = ExperimentConfig()
    key_lines: dict[str, int] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'section.key = value'")
            key, _, text = line.partition("=")
            key = key.strip()
            text = text.strip()
            if key not in _SCHEMA:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            section, name, type_name = _SCHEMA[key]
            kind = _TYPE_NAMES.get(type_name, str) if isinstance(type_name, str) else type_name
            value = _parse_value(kind, text, f"{path}:{lineno}")
            setattr(getattr(cfg, section), name, value)
            key_lines[key] = lineno
    _validate(cfg, path, key_lines)
    return cfg


def write_config(cfg: ExperimentConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for section, cls in _SECTIONS.items():
            obj = getattr(cfg, section)
            for f in fields(cls):
                fh.write(f"{section}.{f.name} = {_format_value(getattr(obj, f.name))}\n")


def _fail_at(path, key_lines, key, message):
    where = f"{path}:{key_lines[key]}" if key in key_lines else str(path)
    raise ConfigError(f"{where}: {message}")


def _validate(cfg: ExperimentConfig, path, key_lines) -> None:
    o = cfg.optimizer
    if not (0.0 <= o.beta1 < 1.0):
        _fail_at(path, key_lines, "optimizer.beta1", f"beta1 must be in [0,1), got {o.beta1}")
    if not (0.0 <= o.beta2 < 1.0):
        _fail_at(path, key_lines, "optimizer.beta2", f"beta2 must be in [0,1), got {o.beta2}")
    if o.alpha <= 0:
        _fail_at(path, key_lines, "optimizer.alpha", "alpha must be positive")
    if o.eps < 0:
        _fail_at(path, key_lines, "optimizer.eps", "eps must be nonnegative")
    if o.schedule not in ("const", "invsqrt"):
        _fail_at(path, key_lines, "optimizer.schedule", f"unknown schedule {o.schedule!r}")
    if cfg.problem.kind not in ("logistic", "mlp2", "quadratic"):
        _fail_at(path, key_lines, "problem.kind", f"unknown problem kind {cfg.problem.kind!r}")
    r = cfg.run
    if r.mode not in ("sim", "threads", "wire"):
        _fail_at(path, key_lines, "run.mode", f"unknown mode {r.mode!r}")
    if r.read_mode not in ("consistent", "inconsistent"):
        _fail_at(path, key_lines, "run.read_mode", f"unknown read mode {r.read_mode!r}")
    if r.workers < 1 or r.batch_size < 1 or r.iterations < 1 or r.tau_max < 0:
        _fail_at(path, key_lines, "run.workers", "workers/batch_size/iterations must be positive and tau_max nonnegative")
    try:
        parse_delay(r.delay)
    except ValueError as exc:
        _fail_at(path, key_lines, "run.delay", str(exc))


def parse_delay(spec: str):
    kind, _, rest = spec.partition(":")
    kind = kind.strip()
    rest = rest.strip()
    if kind == "fixed":
        return Fixed(int(rest or "0"))
    if kind == "uniform":
        return UniformInt(int(rest))
    if kind == "perworker":
        taus = tuple(int(t) for t in rest.split(",") if t.strip() != "")
        if not taus:
            raise ValueError("perworker delay needs at least one value")
        return PerWorkerFixed(taus)
    raise ValueError(f"unknown delay model {spec!r}")


def format_delay(model) -> str:
    if isinstance(model, Fixed):
        return f"fixed:{model.tau}"
    if isinstance(model, UniformInt):
        return f"uniform:{model.tau}"
    if isinstance(model, PerWorkerFixed):
        return "perworker:" + ",".join(str(t) for t in model.taus)
    raise ValueError(f"unknown delay model {model!r}")


def build_problem(spec: ProblemSpec):
    if spec.kind == "quadratic":
        dim = len(spec.quad_a)
        box = BoxConstraint.cube(dim, -spec.box_radius, spec.box_radius) if spec.box_radius > 0 else None
        return QuadraticProblem(
            spec.quad_a, spec.quad_b, n_samples=spec.quad_samples,
            noise_scale=spec.quad_noise, seed=spec.seed, box=box, init_seed=spec.seed,
        )
    if spec.data:
        ds = load_libsvm(spec.data)
    else:
        ds = synth_classification(
            spec.n_samples, spec.n_features, spec.separable, spec.seed,
            n_classes=spec.classes,
        )
    if spec.kind == "logistic":
        box = (
            BoxConstraint.cube(ds.n_features, -spec.box_radius, spec.box_radius)
            if spec.box_radius > 0 else None
        )
        return LogisticProblem(ds, l2=spec.l2, box=box, init_seed=spec.seed)
    prob = Mlp2Problem(ds, hidden=spec.hidden, seed=spec.seed)
    if spec.box_radius > 0:
        prob.box = BoxConstraint.cube(prob.dim, -spec.box_radius, spec.box_radius)
    return prob


def build_hyperparams(cfg: ExperimentConfig) -> HyperParams:
    o = cfg.optimizer
    if o.schedule == "const":
        sched = ConstOverSqrtK(o.alpha, cfg.run.iterations)
    else:
        sched = InvSqrtK(o.alpha)
    return HyperParams(beta1=o.beta1, beta2=o.beta2, schedule=sched, eps=o.eps)


def build_run_config(cfg: ExperimentConfig, master_seed: int | None = None) -> RunConfig:
    r = cfg.run
    return RunConfig(
        mode=r.mode,
        workers=r.workers,
        batch_size=r.batch_size,
        total_iterations=r.iterations,
        policy=StalenessPolicy(tau_max=r.tau_max, mode=r.read_mode),
        delay_model=parse_delay(r.delay),
        master_seed=r.master_seed if master_seed is None else master_seed,
        wire_transport=r.wire_transport,
        wire_latency=r.wire_latency,
    )
