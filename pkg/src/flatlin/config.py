"""Project configuration files.

The format is INI-like (read with :mod:`configparser`): ``[section]``
headers, ``key = value`` lines, expressions as double-quoted strings and
lists as comma-separated values.  Sections:

``[system]``      coordinates, velocities, inputs, potential,
                  ``metric[i,j]`` and ``input[i,j]`` (1-based, missing = 0;
                  a metric entry given only above the diagonal is mirrored)
``[parameters]``  numeric constants; values may be expressions of earlier ones
``[definitions]`` expression macros usable in later expressions
``[promotion]``   ``input = coordinate`` pairs
``[flat]``        ``y1``, ``y2``... flat output, ``Fq.<coordinate>`` rows,
                  ``equilibrium`` (values of y at the reference rest point)
``[solver]``      numeric settings (see ``SOLVER_DEFAULTS``)
``[scenario]``    ``from`` / ``to`` names of equilibria for the default run
``[equilibria]``  named flat-output rest points
"""

import configparser
import io
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .errors import ConfigError, ExprError
from .expr import Const, evaluate, parse, substitute, simplify

SOLVER_DEFAULTS = {
    "max_order": 6,
    "dt": 1e-3,
    "T": 5.0,
    "boundary_order": 5,
    "sample_radius": 1e-2,
    "sample_count": 20,
    "newton_tol": 1e-10,
    "residual_tol": 1e-8,
    "check_points": 50,
    "strategy": "A",
    "seed": 0,
}

_INT_KEYS = {"max_order", "boundary_order", "sample_count", "check_points", "seed"}
_SECTIONS = ("system", "parameters", "definitions", "promotion", "flat",
             "solver", "scenario", "equilibria")
_INDEX_RE = re.compile(r"^(metric|input)\[\s*(\d+)\s*,\s*(\d+)\s*\]$")
BUILTINS = ("manipulator", "toy", "pendulum")


def _unquote(value):
    value = value.strip()
    if len(value) >= 2 and value[0] == value[-1] == '"':
        return value[1:-1]
    return value


def _names(value, path):
    items = [s.strip() for s in _unquote(value).split(",") if s.strip()]
    for s in items:
        if not re.fullmatch(r"[A-Za-z_][A-Za-z0-9_]*", s):
            raise ConfigError(f"invalid name {s!r}", path)
    return items


def _floats(value, path):
    try:
        return [float(s) for s in _unquote(value).split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"expected comma-separated numbers, got {value!r}", path) from None


@dataclass
class ProjectConfig:
    """Raw sections (ordered ``{key: text}``) plus the resolved model pieces."""

    sections: dict
    source: str = "<string>"
    q: list = field(default_factory=list)
    v: list = field(default_factory=list)
    u: list = field(default_factory=list)
    metric: list = field(default_factory=list)
    input_matrix: list = field(default_factory=list)
    potential: object = None
    parameters: dict = field(default_factory=dict)
    promotion: list = field(default_factory=list)
    flat_output: list = field(default_factory=list)
    Fq: list = field(default_factory=list)
    equilibrium: list = field(default_factory=list)
    solver: dict = field(default_factory=dict)
    scenario: dict = field(default_factory=dict)
    equilibria: dict = field(default_factory=dict)
    name: str = "system"

    @property
    def p(self):
        return len(self.q)

    @property
    def m(self):
        return len(self.u)

    def effective_text(self):
        """Config text with solver defaults filled in; re-parses to an
        equivalent config."""
        out = io.StringIO()
        for sec in _SECTIONS:
            items = dict(self.sections.get(sec, {}))
            if sec == "solver":
                items = {k: v if isinstance(v, str) else repr(v) for k, v in self.solver.items()}
            if not items:
                continue
            out.write(f"[{sec}]\n")
            for key, val in items.items():
                out.write(f"{key} = {val}\n")
            out.write("\n")
        return out.getvalue()

    def summary(self):
        """Comparable digest of the resolved configuration."""
        from .expr import to_string
        return {
            "q": list(self.q), "v": list(self.v), "u": list(self.u),
            "metric": [[to_string(e) for e in row] for row in self.metric],
            "input": [[to_string(e) for e in row] for row in self.input_matrix],
            "potential": to_string(self.potential),
            "promotion": list(self.promotion),
            "flat": [to_string(e) for e in self.flat_output],
            "Fq": [to_string(e) for e in self.Fq],
            "equilibrium": list(self.equilibrium),
            "solver": dict(self.solver),
            "scenario": dict(self.scenario),
            "equilibria": {k: list(v) for k, v in self.equilibria.items()},
        }


def _read_sections(text, source):
    cp = configparser.ConfigParser(delimiters=("=",), comment_prefixes=("#", ";"),
                                   interpolation=None, strict=True)
    cp.optionxform = str
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}".replace("\n", " "), source) from None
    unknown = [s for s in cp.sections() if s not in _SECTIONS]
    if unknown:
        raise ConfigError(f"unknown section(s) {unknown}", source)
    return {sec: dict(cp.items(sec)) for sec in cp.sections()}


def _expr(text, env, path, allowed=None):
    try:
        e = parse(_unquote(text))
    except ExprError as exc:
        raise ConfigError(f"cannot parse expression: {exc}", path) from None
    e = simplify(substitute(e, env)) if env else simplify(e)
    if allowed is not None:
        stray = e.free - set(allowed)
        if stray:
            raise ConfigError(f"unknown name(s) {sorted(stray)}", path)
    return e


def parse_config(text, source="<string>"):
    """Parse and validate config text into a :class:`ProjectConfig`."""
    sections = _read_sections(text, source)
    cfg = ProjectConfig(sections=sections, source=source)
    system = sections.get("system")
    if system is None:
        raise ConfigError("missing [system] section", source)
    for key in ("coordinates", "velocities", "inputs", "potential"):
        if key not in system:
            raise ConfigError("missing key", f"system.{key}")
    cfg.name = _unquote(system.get("name", "system"))
    cfg.q = _names(system["coordinates"], "system.coordinates")
    cfg.v = _names(system["velocities"], "system.velocities")
    cfg.u = _names(system["inputs"], "system.inputs")
    p, m = cfg.p, cfg.m
    if len(cfg.v) != p:
        raise ConfigError(f"{p} coordinates but {len(cfg.v)} velocities", "system.velocities")
    variables = cfg.q + cfg.v + cfg.u
    if len(set(variables)) != len(variables):
        raise ConfigError("duplicate variable names", "system")

    # parameters, then definitions, both resolved into an environment
    env = {}
    for key, val in sections.get("parameters", {}).items():
        path = f"parameters.{key}"
        if key in variables:
            raise ConfigError("parameter name clashes with a system variable", path)
        e = _expr(val, env, path)
        if e.free:
            raise ConfigError(f"parameter depends on unknown name(s) {sorted(e.free)}", path)
        value = evaluate(e, {})
        cfg.parameters[key] = value
        env[key] = Const(value)
    for key, val in sections.get("definitions", {}).items():
        path = f"definitions.{key}"
        if key in variables or key in cfg.parameters:
            raise ConfigError("definition name clashes with an existing name", path)
        env[key] = _expr(val, env, path)

    cfg.metric = [[Const(0.0)] * p for _ in range(p)]
    cfg.input_matrix = [[Const(0.0)] * m for _ in range(p)]
    given = set()
    for key, val in system.items():
        mt = _INDEX_RE.match(key)
        if mt is None:
            if key not in ("name", "coordinates", "velocities", "inputs", "potential"):
                raise ConfigError("unknown key", f"system.{key}")
            continue
        kind, i, j = mt.group(1), int(mt.group(2)) - 1, int(mt.group(3)) - 1
        cols = p if kind == "metric" else m
        if not (0 <= i < p and 0 <= j < cols):
            raise ConfigError("index out of range", f"system.{key}")
        e = _expr(val, env, f"system.{key}", cfg.q)
        if kind == "metric":
            cfg.metric[i][j] = e
            given.add((i, j))
        else:
            cfg.input_matrix[i][j] = e
    for i, j in list(given):
        if (j, i) not in given:
            cfg.metric[j][i] = cfg.metric[i][j]
    cfg.potential = _expr(system["potential"], env, "system.potential", cfg.q)

    for key, val in sections.get("promotion", {}).items():
        coord = _unquote(val)
        if key not in cfg.u:
            raise ConfigError(f"{key!r} is not an input", f"promotion.{key}")
        if coord not in cfg.q:
            raise ConfigError(f"{coord!r} is not a coordinate", f"promotion.{key}")
        cfg.promotion.append((key, coord))

    flat = sections.get("flat", {})
    ys = sorted((k for k in flat if re.fullmatch(r"y[1-9][0-9]*", k)), key=lambda k: int(k[1:]))
    if [int(k[1:]) for k in ys] != list(range(1, len(ys) + 1)):
        raise ConfigError("flat output components must be y1..ym without gaps", "flat")
    cfg.flat_output = [_expr(flat[k], env, f"flat.{k}", cfg.q) for k in ys]
    my = len(ys)
    from .jets import all_jet_names
    jet_vars = all_jet_names(my, int(sections.get("solver", {}).get("max_order", 6)))
    for coord in cfg.q:
        key = f"Fq.{coord}"
        if key not in flat:
            raise ConfigError("missing parameterization row", f"flat.{key}")
        cfg.Fq.append(_expr(flat[key], env, f"flat.{key}", jet_vars))
    for key in flat:
        if key not in ys and key != "equilibrium" and key not in (f"Fq.{c}" for c in cfg.q):
            raise ConfigError("unknown key", f"flat.{key}")
    cfg.equilibrium = _floats(flat.get("equilibrium", ",".join(["0"] * my)), "flat.equilibrium")
    if len(cfg.equilibrium) != my:
        raise ConfigError(f"expected {my} values", "flat.equilibrium")

    cfg.solver = dict(SOLVER_DEFAULTS)
    for key, val in sections.get("solver", {}).items():
        path = f"solver.{key}"
        if key not in SOLVER_DEFAULTS:
            raise ConfigError("unknown solver setting", path)
        val = _unquote(val)
        try:
            if isinstance(SOLVER_DEFAULTS[key], str):
                cfg.solver[key] = val
            elif key in _INT_KEYS:
                cfg.solver[key] = int(val)
            else:
                cfg.solver[key] = float(val)
        except ValueError:
            raise ConfigError(f"invalid value {val!r}", path) from None
    if cfg.solver["strategy"] not in ("A", "B"):
        raise ConfigError("strategy must be A or B", "solver.strategy")

    for key, val in sections.get("equilibria", {}).items():
        vals = _floats(val, f"equilibria.{key}")
        if len(vals) != my:
            raise ConfigError(f"expected {my} values", f"equilibria.{key}")
        cfg.equilibria[key] = vals
    for key, val in sections.get("scenario", {}).items():
        if key not in ("from", "to"):
            raise ConfigError("unknown key", f"scenario.{key}")
        name = _unquote(val)
        if name not in cfg.equilibria:
            raise ConfigError(f"unknown equilibrium {name!r}", f"scenario.{key}")
        cfg.scenario[key] = name
    return cfg


def load_config(path):
    """Load a config file; ``builtin:<name>`` selects a shipped example."""
    path = str(path)
    if path.startswith("builtin:"):
        name = path.split(":", 1)[1]
        if name not in BUILTINS:
            raise ConfigError(f"unknown built-in {name!r}; choose from {', '.join(BUILTINS)}", path)
        text = resources.files("flatlin.data").joinpath(f"{name}.cfg").read_text()
        return parse_config(text, path)
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", path) from None
    return parse_config(text, path)
