"""Plain-text experiment configuration.

One ``key = value`` per line; ``#`` starts a comment. Keys are dotted
(``grid.cells``); values are JSON literals, and anything that does not parse as
JSON is taken as a bare string. The canonical text (sorted keys, JSON values)
is what gets hashed, so two configs hash equal exactly when they round-trip to
the same settings.

Example::

    schema_version = 1
    experiment = simulate
    model_name = burgers
    grid.dim = 1
    grid.cells = 128
    solver.max_speed_estimate = 3.0
    noise.modes = [[1, 0.3], [2, 0.2, "sin"]]
    noise.seed = 7
    initial.u0.modes = [[1, 0.8, "sin"]]
    horizon.t_end = 1.0
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .averaging import rough_random_field
from .grid import Field, TorusGrid
from .model import FluxDiffusionModel, builtin_models, get_model, polynomial_model
from .noise import NoiseModel, make_sigma
from .solver import SolverConfig

SCHEMA_VERSION = 1
EXPERIMENTS = ("simulate", "couple", "kb_measure", "nondegeneracy", "averaging_check", "kinetic_check")
SECTIONS = ("model", "grid", "solver", "noise", "initial", "horizon", "params", "output")
TOP_LEVEL = ("schema_version", "experiment", "model_name")
SOLVER_KEYS = tuple(f.name for f in dataclasses.fields(SolverConfig))
GRID_KEYS = ("dim", "cells", "period")
NOISE_KEYS = ("modes", "seed")
HORIZON_KEYS = ("t_end",)
OUTPUT_KEYS = ("checkpoint_every", "snapshot_every")
MODEL_KEYS = ("flux", "diffusion")
FIELD_KEYS = ("constant", "modes", "rough_seed", "rough_amplitude", "rough_decay")
PARAM_KEYS = {
    "simulate": ("sobolev_s",),
    "couple": ("T", "kappa_hat", "kappa_tilde"),
    "kb_measure": ("T", "burn_in", "observables", "s", "q"),
    "nondegeneracy": ("lambdas", "beta", "epsilons"),
    "averaging_check": ("gamma", "theta", "beta", "kappa", "T", "family_seeds", "amplitude"),
    "kinetic_check": ("xi_cells",),
}
REQUIRED_PARAMS = {
    "couple": ("T", "kappa_hat", "kappa_tilde"),
    "nondegeneracy": ("lambdas", "beta"),
    "averaging_check": ("gamma", "theta", "beta", "kappa"),
}
NEEDS_HORIZON = ("simulate", "couple", "kb_measure", "kinetic_check")
OBSERVABLES = ("l1", "l2", "mean", "sobolev")


class ConfigError(ValueError):
    """Invalid configuration; the CLI maps it to exit status 2."""


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_text(text: str) -> dict:
    """Flat ``{dotted_key: value}`` mapping of a configuration text."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = _strip_comment(raw).strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = _parse_value(value)
    return out


def _strip_comment(line: str) -> str:
    """Drop a trailing ``#`` comment, ignoring ``#`` inside double quotes."""
    quoted = escaped = False
    for i, ch in enumerate(line):
        if escaped:
            escaped = False
        elif ch == "\\":
            escaped = quoted
        elif ch == '"':
            quoted = not quoted
        elif ch == "#" and not quoted:
            return line[:i]
    return line


def _nest(flat: dict) -> dict:
    tree: dict = {}
    for key, value in flat.items():
        parts = key.split(".")
        node = tree
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"key {key!r} conflicts with a scalar setting")
        if parts[-1] in node and isinstance(node[parts[-1]], dict):
            raise ConfigError(f"key {key!r} conflicts with a section")
        node[parts[-1]] = value
    return tree


def _flatten(tree: dict, prefix: str = "") -> dict:
    out = {}
    for key, value in tree.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict) and value:
            out.update(_flatten(value, name + "."))
        else:
            out[name] = value
    return out


def _check_keys(section: str, given: dict, allowed) -> None:
    unknown = sorted(set(given) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown {section} key(s) {unknown}; valid keys: {sorted(allowed)}")


def _number(value, name, positive=False, integer=False):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{name} must be a number, got {value!r}")
    if integer and not isinstance(value, int):
        raise ConfigError(f"{name} must be an integer, got {value!r}")
    if positive and not value > 0:
        raise ConfigError(f"{name} must be positive, got {value!r}")
    return value


@dataclass
class ExperimentConfig:
    experiment: str
    model_name: str
    grid: dict
    noise: dict
    solver: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    initial: dict = field(default_factory=dict)
    horizon: dict = field(default_factory=dict)
    params: dict = field(default_factory=dict)
    output: dict = field(default_factory=dict)
    schema_version: int = SCHEMA_VERSION

    # -- serialisation -----------------------------------------------------

    @classmethod
    def from_text(cls, text: str) -> "ExperimentConfig":
        tree = _nest(parse_text(text))
        _check_keys("top-level", tree, TOP_LEVEL + SECTIONS)
        for key in TOP_LEVEL:
            if key not in tree:
                raise ConfigError(f"missing required key {key!r}")
        for key in SECTIONS:
            if key in tree and not isinstance(tree[key], dict):
                raise ConfigError(f"{key!r} must be a section of dotted keys")
        cfg = cls(
            experiment=tree["experiment"],
            model_name=tree["model_name"],
            grid=tree.get("grid", {}),
            noise=tree.get("noise", {}),
            solver=tree.get("solver", {}),
            model=tree.get("model", {}),
            initial=tree.get("initial", {}),
            horizon=tree.get("horizon", {}),
            params=tree.get("params", {}),
            output=tree.get("output", {}),
            schema_version=tree["schema_version"],
        )
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_text(fh.read())

    def to_tree(self) -> dict:
        tree = {"schema_version": self.schema_version, "experiment": self.experiment, "model_name": self.model_name}
        for key in SECTIONS:
            value = getattr(self, key)
            if value:
                tree[key] = copy.deepcopy(value)
        return tree

    def to_text(self) -> str:
        flat = _flatten(self.to_tree())
        return "".join(f"{key} = {json.dumps(flat[key], sort_keys=True)}\n" for key in sorted(flat))

    def hash(self) -> bytes:
        return hashlib.sha256(self.to_text().encode("utf-8")).digest()

    def hexdigest(self) -> str:
        return self.hash().hex()

    # -- validation ----------------------------------------------------------

    def validate(self) -> None:
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {self.schema_version!r}; expected {SCHEMA_VERSION}")
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.experiment!r}; valid keys: {sorted(EXPERIMENTS)}")
        catalog = builtin_models()
        if self.model_name != "inline" and self.model_name not in catalog:
            raise ConfigError(f"unknown model {self.model_name!r}; valid keys: {sorted(catalog) + ['inline']}")
        _check_keys("model", self.model, MODEL_KEYS)
        if self.model_name == "inline" and "flux" not in self.model:
            raise ConfigError("inline models need model.flux")
        _check_keys("grid", self.grid, GRID_KEYS)
        _check_keys("solver", self.solver, SOLVER_KEYS)
        _check_keys("noise", self.noise, NOISE_KEYS)
        _check_keys("horizon", self.horizon, HORIZON_KEYS)
        _check_keys("output", self.output, OUTPUT_KEYS)
        _check_keys(f"params ({self.experiment})", self.params, PARAM_KEYS[self.experiment])
        _check_keys("initial", self.initial, ("u0", "v0"))
        for name, spec in self.initial.items():
            if not isinstance(spec, dict):
                raise ConfigError(f"initial.{name} must be a section")
            _check_keys(f"initial.{name}", spec, FIELD_KEYS)
        for key in ("dim", "cells"):
            if key not in self.grid:
                raise ConfigError(f"missing required key 'grid.{key}'")
        if "seed" not in self.noise:
            raise ConfigError("missing required key 'noise.seed' (seeds are mandatory)")
        _number(self.noise["seed"], "noise.seed", integer=True)
        if self.noise["seed"] < 0:
            raise ConfigError("noise.seed must be nonnegative")
        if self.experiment in NEEDS_HORIZON:
            if "t_end" not in self.horizon:
                raise ConfigError(f"experiment {self.experiment!r} needs horizon.t_end")
            _number(self.horizon["t_end"], "horizon.t_end", positive=True)
        for key in REQUIRED_PARAMS.get(self.experiment, ()):
            if key not in self.params:
                raise ConfigError(f"experiment {self.experiment!r} needs params.{key}")
        if self.experiment == "couple" and "v0" not in self.initial:
            raise ConfigError("experiment 'couple' needs initial.v0")
        for key in OUTPUT_KEYS:
            if key in self.output:
                _number(self.output[key], f"output.{key}", integer=True)
        for name in self.params.get("observables", []):
            if name not in OBSERVABLES:
                raise ConfigError(f"unknown observable {name!r}; valid keys: {list(OBSERVABLES)}")
        try:
            grid = self.build_grid()
            self.build_solver()
            model = self.build_model()
            self.build_noise(grid)
            for name in self.initial:
                self.build_field(grid, name)
        except ConfigError:
            raise
        except (ValueError, TypeError, KeyError) as exc:
            raise ConfigError(str(exc)) from exc
        if model.dim != grid.dim:
            raise ConfigError(f"model dimension {model.dim} does not match grid.dim {grid.dim}")

    # -- builders ------------------------------------------------------------

    def build_grid(self) -> TorusGrid:
        return TorusGrid(int(self.grid["dim"]), int(self.grid["cells"]), float(self.grid.get("period", 1.0)))

    def build_solver(self) -> SolverConfig:
        return SolverConfig(**self.solver)

    def build_model(self) -> FluxDiffusionModel:
        if self.model_name == "inline":
            model = polynomial_model(self.model["flux"], self.model.get("diffusion", ()))
            if not model.check_psd(np.linspace(-10.0, 10.0, 2001)):
                raise ConfigError("inline diffusion must be nonnegative on [-10, 10]")
            return model
        return get_model(self.model_name)

    def build_noise(self, grid: TorusGrid) -> NoiseModel:
        return make_sigma(grid, [tuple(m) for m in self.noise.get("modes", [])])

    @property
    def seed(self) -> int:
        return int(self.noise["seed"])

    @property
    def t_end(self) -> float:
        return float(self.horizon["t_end"])

    def build_field(self, grid: TorusGrid, name: str = "u0") -> Field:
        """Initial datum from ``constant + sum of modes + rough random part``."""
        spec = self.initial.get(name, {})
        values = np.full(grid.shape, float(spec.get("constant", 0.0)))
        if spec.get("modes"):
            values += make_sigma(grid, [tuple(m) for m in spec["modes"]]).sigma.values
        if "rough_seed" in spec:
            values += rough_random_field(grid, int(spec["rough_seed"]), float(spec.get("rough_amplitude", 0.3)),
                                         float(spec.get("rough_decay", 0.5))).values
        return Field(grid, values)


def config_diff(a_text: str, b_text: str) -> list[str]:
    """Keys whose settings differ between two canonical config texts."""
    a, b = parse_text(a_text), parse_text(b_text)
    lines = []
    for key in sorted(set(a) | set(b)):
        if a.get(key, "<unset>") != b.get(key, "<unset>"):
            lines.append(f"{key}: {json.dumps(a.get(key, '<unset>'))} -> {json.dumps(b.get(key, '<unset>'))}")
    return lines
