"""Run configuration: a flat ``key = value`` text format with ``#`` comments.

Numeric values accept constant expressions (``2pi/3``, ``1/1.1``); arcs are
written ``[lo,hi];[lo,hi]``.  Serialization writes floats with ``repr`` so
``parse_config(serialize_config(c)) == c`` holds exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .expression import (
    BinOp,
    Call,
    EvaluationError,
    ExpressionSyntaxError,
    Neg,
    RadialTaper,
    ScalarField,
    Var,
    VectorField2,
    evaluate,
    parse_expression,
)
from .mesh import generate_ellipse_mesh
from .optimize import OptimConfig
from .shape import GRADIENT_FORMS
from .tresca import ProblemData

DEFAULT_ARCS = ((2 * math.pi / 3, 4 * math.pi / 3), (5 * math.pi / 3, 7 * math.pi / 3))
POSITIVITY_SAMPLES = 10_000


class ConfigError(ValueError):
    """Malformed or inconsistent configuration."""


@dataclass(frozen=True)
class RunConfig:
    a: float = 1.1
    b: float = 1 / 1.1
    h: float = 0.05
    gammaD: tuple = DEFAULT_ARCS
    mu: float = 0.5
    lam: float = 0.0
    f_x: str = "-5*x*exp(x)"
    f_y: str = "0.6*exp(x^2)"
    g: str = "1+sin(-y*pi/2)+1e-3"
    window_radius: float | None = None  # smooth far-field cutoff of f and g; off by default
    linear_tol: float = 1e-12
    switch_tol: float = 1e-10
    eps_slip: float = 1e-6
    max_switch: int = 200
    optim: OptimConfig = field(default_factory=OptimConfig)
    out: str = "out"
    seed: int = 0
    snapshot_every: int = 0  # VTK snapshot period of the optimizer; 0 writes only first and last

    def problem_data(self) -> ProblemData:
        f = VectorField2(self.f_x, self.f_y)
        g = ScalarField(self.g)
        if self.window_radius is not None:
            f, g = RadialTaper(f, self.window_radius), RadialTaper(g, self.window_radius)
        return ProblemData(
            f=f,
            g=g,
            mu=self.mu,
            lam=self.lam,
            linear_tol=self.linear_tol,
            switch_tol=self.switch_tol,
            eps_slip=self.eps_slip,
            max_switch=self.max_switch,
        )

    def mesh(self):
        return generate_ellipse_mesh(self.a, self.b, self.h, list(self.gammaD))


# ---------------------------------------------------------------------------
# value codecs


def constant(text: str) -> float:
    """Evaluate a constant expression (no ``x``/``y``)."""
    node = parse_expression(text)
    if _has_variable(node):
        raise ConfigError(f"expected a constant, got {text!r}")
    return float(evaluate(node))


def _has_variable(node) -> bool:
    if isinstance(node, Var):
        return True
    if isinstance(node, BinOp):
        return _has_variable(node.left) or _has_variable(node.right)
    if isinstance(node, Neg):
        return _has_variable(node.operand)
    if isinstance(node, Call):
        return _has_variable(node.arg)
    return False


def _parse_bool(text):
    low = text.lower()
    if low in ("true", "yes", "1"):
        return True
    if low in ("false", "no", "0"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


def _parse_arcs(text):
    arcs = []
    for chunk in text.split(";"):
        chunk = chunk.strip()
        if not (chunk.startswith("[") and chunk.endswith("]")):
            raise ConfigError(f"arc {chunk!r} must look like [lo,hi]")
        parts = chunk[1:-1].split(",")
        if len(parts) != 2:
            raise ConfigError(f"arc {chunk!r} needs two endpoints")
        arcs.append((constant(parts[0]), constant(parts[1])))
    return tuple(arcs)


def _format_arcs(arcs):
    return ";".join(f"[{lo!r},{hi!r}]" for lo, hi in arcs)


def _parse_pair(text):
    if text.lower() == "none":
        return None
    parts = text.split(",")
    if len(parts) != 2:
        raise ConfigError(f"expected 'inner,outer' or none, got {text!r}")
    return (constant(parts[0]), constant(parts[1]))


def _codec(name, annotation):
    """(parse, format) for a field, chosen by name and type annotation."""
    if name == "gammaD":
        return _parse_arcs, _format_arcs
    if name == "taper":
        return _parse_pair, lambda v: "none" if v is None else f"{v[0]!r},{v[1]!r}"
    ann = str(annotation)
    if ann == "bool":
        return _parse_bool, lambda v: "true" if v else "false"
    if ann == "int":
        return lambda t: int(t), str
    if ann == "float":
        return constant, repr
    if ann == "float | None":
        return (lambda t: None if t.lower() == "none" else constant(t)), (lambda v: "none" if v is None else repr(v))
    return (lambda t: t), str


_RUN_FIELDS = [f_ for f_ in fields(RunConfig) if f_.name != "optim"]
_OPT_FIELDS = list(fields(OptimConfig))
_KEYS = {f_.name: ("run", f_) for f_ in _RUN_FIELDS}
_KEYS.update({f_.name: ("optim", f_) for f_ in _OPT_FIELDS})


def serialize_config(cfg: RunConfig) -> str:
    lines = []
    for f_ in _RUN_FIELDS:
        lines.append(f"{f_.name} = {_codec(f_.name, f_.type)[1](getattr(cfg, f_.name))}")
    for f_ in _OPT_FIELDS:
        lines.append(f"{f_.name} = {_codec(f_.name, f_.type)[1](getattr(cfg.optim, f_.name))}")
    return "\n".join(lines) + "\n"


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    """Parse config text; keys not mentioned keep the values of ``base`` (defaults)."""
    base = base or RunConfig()
    run_values, opt_values = {}, {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        where, f_ = _KEYS[key]
        try:
            parsed = _codec(key, f_.type)[0](value)
        except (ExpressionSyntaxError, EvaluationError, ValueError) as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from exc
        (run_values if where == "run" else opt_values)[key] = parsed
    try:
        optim = replace(base.optim, **opt_values)
        cfg = replace(base, optim=optim, **run_values)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    validate_config(cfg)
    return cfg


def load_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def validate_config(cfg: RunConfig) -> None:
    """Check geometry, material and expressions; ``g`` must be positive on sampled points."""
    if not (cfg.a > 0 and cfg.b > 0 and cfg.h > 0):
        raise ConfigError("a, b and h must be positive")
    if not cfg.mu > 0 or cfg.lam < 0:
        raise ConfigError("need mu > 0 and lam >= 0")
    if cfg.optim.gradient_form not in GRADIENT_FORMS:
        raise ConfigError(f"unknown gradient form {cfg.optim.gradient_form!r}")
    try:
        pd = cfg.problem_data()
    except (ExpressionSyntaxError, ValueError) as exc:
        raise ConfigError(f"bad expression: {exc}") from exc
    pts = positivity_samples(cfg.a, cfg.b, POSITIVITY_SAMPLES, cfg.seed)
    try:
        gv = pd.g(pts)
        fv = pd.f(pts)
    except EvaluationError as exc:
        raise ConfigError(f"expression cannot be evaluated: {exc}") from exc
    if not np.all(np.isfinite(fv)):
        raise ConfigError("f is not finite on the domain")
    if not np.all(gv > 0):
        raise ConfigError("friction threshold g must be positive on the domain")


def positivity_samples(a, b, count, seed=0) -> np.ndarray:
    """Half boundary points, half uniform interior points of the ellipse."""
    rng = np.random.default_rng(seed)
    nb = count // 2
    t = np.linspace(0.0, 2 * np.pi, nb, endpoint=False)
    boundary = np.stack([a * np.cos(t), b * np.sin(t)], axis=1)
    r = np.sqrt(rng.uniform(size=count - nb))
    phi = rng.uniform(0.0, 2 * np.pi, size=count - nb)
    interior = np.stack([a * r * np.cos(phi), b * r * np.sin(phi)], axis=1)
    return np.concatenate([boundary, interior])


__all__ = [
    "ConfigError",
    "RunConfig",
    "constant",
    "load_config",
    "parse_config",
    "positivity_samples",
    "serialize_config",
    "validate_config",
]
