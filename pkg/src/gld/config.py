"""Scenario configuration: TOML grammar, validation, presets, bias signal.

A configuration document is TOML with the following shape (every key is
optional; omitted keys take scenario-specific defaults):

    scenario = "energy_stability"   # convergence_time | convergence_space |
                                    # energy_stability | hysteresis
    [mesh]
    width = 80e-9        # meters
    height = 40e-9
    nx = 16              # cells per direction of the base grid
    ny = 8
    levels = 4           # rows of a convergence table (convergence scenarios)
    adaptive = false     # estimator-driven refinement (hysteresis)
    fraction = 0.01      # fraction of cells refined per adaptation
    refine_every = 5     # steps between adaptations
    dirichlet_edges = ["bottom", "top"]
    neumann_edges = ["left", "right"]

    [discretization]
    degree = 1           # polynomial degree k, 1..3
    final_time = 160e-9  # seconds
    steps = 1000         # uniform steps, tau = final_time / steps

    [material]
    epsilon_r = 5.0      # relative permittivity (or absolute via `epsilon`)
    [material.component1]  # likewise component2
    property = "ferroelectric"   # or "dielectric"
    alpha = -1.54e9      # V m / C
    beta = -2.65e12
    gamma = 2.6e15
    g = 1e-8
    rho_v = 40.0

    [signal]             # contact bias, piecewise linear in time
    breakpoints = [0.0, 20e-9, 60e-9, 80e-9]   # seconds, strictly increasing
    values = [0.0, 100.0, -100.0, 0.0]         # volts
    periodic = true

    [output]
    directory = "gld-out"
    cadence = 0          # VTK snapshot every `cadence` steps (0: scenario default)

Validation is aggregated: every violation in the document is collected and
reported in a single ConfigurationError.
"""

import copy
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - python < 3.11
    import tomli as tomllib

from .errors import ConfigurationError
from .mesh import EDGE_NAMES
from .model import ComponentParams, ComponentProperty, MaterialParams

__all__ = [
    "VACUUM_PERMITTIVITY",
    "SCENARIOS",
    "BiasSignal",
    "bias_at",
    "MeshConfig",
    "DiscretizationConfig",
    "OutputConfig",
    "ScenarioConfig",
    "parse_config",
    "load_config",
    "preset_texts",
]

VACUUM_PERMITTIVITY = 8.8541878128e-12  # F/m

SCENARIOS = ("convergence_time", "convergence_space",
             "energy_stability", "hysteresis")


# ---------------------------------------------------------------------------
# bias signal

@dataclass(frozen=True)
class BiasSignal:
    """Piecewise-linear voltage waveform, optionally extended periodically."""

    breakpoints: Tuple[float, ...]
    values: Tuple[float, ...]
    periodic: bool = True

    @property
    def period(self) -> float:
        return self.breakpoints[-1] - self.breakpoints[0]

    def validate(self) -> List[str]:
        errs = []
        if len(self.breakpoints) != len(self.values):
            errs.append("signal: breakpoints and values differ in length")
        if len(self.breakpoints) < 2:
            errs.append("signal: need at least two breakpoints")
            return errs
        if any(b <= a for a, b in zip(self.breakpoints[:-1], self.breakpoints[1:])):
            errs.append("signal: breakpoints must be strictly increasing")
        if self.periodic:
            scale = max(abs(v) for v in self.values) or 1.0
            if abs(self.values[0] - self.values[-1]) > 1e-12 * scale:
                errs.append("signal: periodic extension is discontinuous "
                            f"({self.values[0]!r} != {self.values[-1]!r})")
        return errs


def bias_at(signal: BiasSignal, t):
    """Waveform value (volts) at time t (seconds; scalar or array)."""
    t = np.asarray(t, dtype=float)
    b0 = signal.breakpoints[0]
    if signal.periodic:
        s = b0 + np.mod(t - b0, signal.period)
    else:
        s = np.clip(t, signal.breakpoints[0], signal.breakpoints[-1])
    out = np.interp(s, signal.breakpoints, signal.values)
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# configuration blocks

@dataclass(frozen=True)
class MeshConfig:
    width: float
    height: float
    nx: int
    ny: int
    levels: int
    adaptive: bool
    fraction: float
    refine_every: int
    dirichlet_edges: Tuple[str, ...]
    neumann_edges: Tuple[str, ...]


@dataclass(frozen=True)
class DiscretizationConfig:
    degree: int
    final_time: float
    steps: int

    @property
    def tau(self) -> float:
        return self.final_time / self.steps


@dataclass(frozen=True)
class OutputConfig:
    directory: str
    cadence: int


@dataclass(frozen=True)
class ScenarioConfig:
    scenario: str
    mesh: MeshConfig
    discretization: DiscretizationConfig
    material: MaterialParams
    signal: BiasSignal
    output: OutputConfig


# ---------------------------------------------------------------------------
# defaults

_MONOLAYER_COMPONENT = {
    "property": "ferroelectric",
    "alpha": -1.54e9,
    "beta": -2.65e12,
    "gamma": 2.6e15,
    "g": 1e-8,
    "rho_v": 40.0,
}

_MANUFACTURED_COMPONENT = {
    "property": "ferroelectric",
    "alpha": -1.0,
    "beta": -1.0,
    "gamma": 1.0,
    "g": 1.0,
    "rho_v": 1.0,
}

_TRIANGLE_SIGNAL = {
    "breakpoints": [0.0, 20e-9, 60e-9, 80e-9],
    "values": [0.0, 100.0, -100.0, 0.0],
    "periodic": True,
}

_ZERO_SIGNAL = {
    "breakpoints": [0.0, 160e-9],
    "values": [0.0, 0.0],
    "periodic": False,
}

_MONOLAYER_BASE = {
    "mesh": {
        "width": 80e-9, "height": 40e-9, "nx": 16, "ny": 8,
        "levels": 4, "adaptive": False, "fraction": 0.01, "refine_every": 5,
        "dirichlet_edges": ["bottom", "top"],
        "neumann_edges": ["left", "right"],
    },
    "discretization": {"degree": 2, "final_time": 160e-9, "steps": 1000},
    "material": {
        "epsilon_r": 5.0,
        "component1": dict(_MONOLAYER_COMPONENT),
        "component2": dict(_MONOLAYER_COMPONENT),
    },
    "signal": dict(_ZERO_SIGNAL),
    "output": {"directory": "gld-out", "cadence": 0},
}

_MANUFACTURED_BASE = {
    "mesh": {
        "width": 1.0, "height": 1.0, "nx": 4, "ny": 4,
        "levels": 4, "adaptive": False, "fraction": 0.01, "refine_every": 5,
        "dirichlet_edges": ["bottom", "top"],
        "neumann_edges": ["left", "right"],
    },
    "discretization": {"degree": 1, "final_time": 0.1, "steps": 1},
    "material": {
        "epsilon_r": 1.0 / VACUUM_PERMITTIVITY,  # absolute permittivity 1
        "component1": dict(_MANUFACTURED_COMPONENT),
        "component2": dict(_MANUFACTURED_COMPONENT),
    },
    "signal": {"breakpoints": [0.0, 1.0], "values": [0.0, 0.0],
               "periodic": False},
    "output": {"directory": "gld-out", "cadence": 0},
}


def _defaults(scenario: str) -> Dict:
    if scenario in ("convergence_time", "convergence_space"):
        base = copy.deepcopy(_MANUFACTURED_BASE)
        if scenario == "convergence_time":
            # mesh fine enough that the spatial error does not pollute the
            # first-order-in-time rates
            base["mesh"]["nx"] = base["mesh"]["ny"] = 32
            base["discretization"]["steps"] = 1
        return base
    base = copy.deepcopy(_MONOLAYER_BASE)
    if scenario == "hysteresis":
        base["discretization"] = {"degree": 1, "final_time": 120e-9,
                                  "steps": 750}
        base["signal"] = dict(_TRIANGLE_SIGNAL)
        base["mesh"]["adaptive"] = True
    return base


# ---------------------------------------------------------------------------
# parsing

def _merge(defaults: Dict, doc: Dict, errs: List[str], prefix: str = "") -> Dict:
    """Defaults overridden by the document; unknown keys are violations."""
    out = copy.deepcopy(defaults)
    for key, val in doc.items():
        path = f"{prefix}{key}"
        if key not in defaults:
            errs.append(f"unknown key: {path}")
            continue
        if isinstance(defaults[key], dict):
            if not isinstance(val, dict):
                errs.append(f"{path}: expected a table")
                continue
            out[key] = _merge(defaults[key], val, errs, path + ".")
        else:
            out[key] = val
    return out


def _typed(tree: Dict, key: str, kind, errs: List[str], prefix: str = ""):
    val = tree[key]
    path = f"{prefix}{key}"
    if kind is float and isinstance(val, int) and not isinstance(val, bool):
        val = float(val)
    if kind is int and (isinstance(val, bool) or not isinstance(val, int)):
        errs.append(f"{path}: expected an integer, got {val!r}")
        return tree_default_of(kind)
    if not isinstance(val, kind):
        errs.append(f"{path}: expected {kind.__name__}, got {val!r}")
        return tree_default_of(kind)
    return val


def tree_default_of(kind):
    return {float: 1.0, int: 1, bool: False, str: "", list: []}[kind]


def _component(tree: Dict, errs: List[str], name: str) -> ComponentParams:
    prop_name = _typed(tree, "property", str, errs, f"material.{name}.")
    prop_map = {"ferroelectric": ComponentProperty.FE,
                "dielectric": ComponentProperty.DIELECTRIC}
    if prop_name not in prop_map:
        errs.append(f"material.{name}.property: must be one of "
                    f"{sorted(prop_map)}, got {prop_name!r}")
        prop = ComponentProperty.FE
    else:
        prop = prop_map[prop_name]
    vals = {k: _typed(tree, k, float, errs, f"material.{name}.")
            for k in ("alpha", "beta", "gamma", "g", "rho_v")}
    return ComponentParams(prop=prop, **vals)


def parse_config(text: str) -> ScenarioConfig:
    """Parse and validate a configuration document.

    Raises ConfigurationError listing every violation found (syntax errors
    abort immediately since nothing else can be checked).
    """
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigurationError([f"syntax: {exc}"]) from exc
    errs: List[str] = []

    scenario = doc.get("scenario", "energy_stability")
    if not isinstance(scenario, str) or scenario not in SCENARIOS:
        errs.append(f"scenario: must be one of {list(SCENARIOS)}, "
                    f"got {scenario!r}")
        scenario = "energy_stability"
    defaults = _defaults(scenario)
    defaults["scenario"] = scenario
    tree = _merge(defaults, doc, errs)

    mt = tree["mesh"]
    mesh = MeshConfig(
        width=_typed(mt, "width", float, errs, "mesh."),
        height=_typed(mt, "height", float, errs, "mesh."),
        nx=_typed(mt, "nx", int, errs, "mesh."),
        ny=_typed(mt, "ny", int, errs, "mesh."),
        levels=_typed(mt, "levels", int, errs, "mesh."),
        adaptive=_typed(mt, "adaptive", bool, errs, "mesh."),
        fraction=_typed(mt, "fraction", float, errs, "mesh."),
        refine_every=_typed(mt, "refine_every", int, errs, "mesh."),
        dirichlet_edges=tuple(_typed(mt, "dirichlet_edges", list, errs, "mesh.")),
        neumann_edges=tuple(_typed(mt, "neumann_edges", list, errs, "mesh.")),
    )
    if not mesh.width > 0:
        errs.append(f"mesh.width: must be positive, got {mesh.width!r}")
    if not mesh.height > 0:
        errs.append(f"mesh.height: must be positive, got {mesh.height!r}")
    if mesh.nx < 1 or mesh.ny < 1:
        errs.append(f"mesh.nx/ny: must be >= 1, got {mesh.nx}x{mesh.ny}")
    if mesh.levels < 1:
        errs.append(f"mesh.levels: must be >= 1, got {mesh.levels}")
    if not (0.0 < mesh.fraction <= 1.0):
        errs.append(f"mesh.fraction: must be in (0, 1], got {mesh.fraction!r}")
    if mesh.refine_every < 1:
        errs.append(f"mesh.refine_every: must be >= 1, got {mesh.refine_every}")
    edges = list(mesh.dirichlet_edges) + list(mesh.neumann_edges)
    if sorted(edges) != sorted(EDGE_NAMES):
        errs.append("mesh.dirichlet_edges/neumann_edges: together they must "
                    f"name each of {list(EDGE_NAMES)} exactly once, got "
                    f"{edges}")

    dt = tree["discretization"]
    disc = DiscretizationConfig(
        degree=_typed(dt, "degree", int, errs, "discretization."),
        final_time=_typed(dt, "final_time", float, errs, "discretization."),
        steps=_typed(dt, "steps", int, errs, "discretization."),
    )
    if disc.degree not in (1, 2, 3):
        errs.append("discretization.degree: must be one of [1, 2, 3], "
                    f"got {disc.degree}")
    if not disc.final_time > 0:
        errs.append("discretization.final_time: must be positive, "
                    f"got {disc.final_time!r}")
    if disc.steps < 1:
        errs.append(f"discretization.steps: must be >= 1, got {disc.steps}")

    mat_tree = tree["material"]
    if "epsilon" in doc.get("material", {}):
        epsilon = _typed({"epsilon": doc["material"]["epsilon"]}, "epsilon",
                         float, errs, "material.")
        # remove the unknown-key violation raised by _merge for `epsilon`
        errs[:] = [e for e in errs if e != "unknown key: material.epsilon"]
    else:
        epsilon = _typed(mat_tree, "epsilon_r", float, errs,
                         "material.") * VACUUM_PERMITTIVITY
    material = None
    try:
        material = MaterialParams(
            epsilon=epsilon,
            components=(_component(mat_tree["component1"], errs, "component1"),
                        _component(mat_tree["component2"], errs, "component2")))
    except ConfigurationError as exc:
        errs.extend(f"material: {v}" for v in exc.violations)

    st = tree["signal"]
    signal = BiasSignal(
        breakpoints=tuple(float(b) for b in _typed(st, "breakpoints", list,
                                                   errs, "signal.")),
        values=tuple(float(v) for v in _typed(st, "values", list, errs,
                                              "signal.")),
        periodic=_typed(st, "periodic", bool, errs, "signal."),
    )
    errs.extend(signal.validate())

    ot = tree["output"]
    output = OutputConfig(
        directory=_typed(ot, "directory", str, errs, "output."),
        cadence=_typed(ot, "cadence", int, errs, "output."),
    )
    if not output.directory:
        errs.append("output.directory: must be a non-empty path")
    if output.cadence < 0:
        errs.append(f"output.cadence: must be >= 0, got {output.cadence}")

    if errs:
        raise ConfigurationError(errs)
    return ScenarioConfig(scenario=scenario, mesh=mesh, discretization=disc,
                          material=material, signal=signal, output=output)


def load_config(path) -> ScenarioConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())


# ---------------------------------------------------------------------------
# presets

def _toml_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, str):
        return f'"{v}"'
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise TypeError(f"cannot serialize {v!r}")


def _emit(tree: Dict, prefix: str = "") -> List[str]:
    lines = []
    tables = []
    for key, val in tree.items():
        if isinstance(val, dict):
            tables.append((key, val))
        else:
            lines.append(f"{key} = {_toml_value(val)}")
    for key, val in tables:
        name = f"{prefix}{key}"
        lines.append("")
        lines.append(f"[{name}]")
        lines.extend(_emit(val, name + "."))
    return lines


def preset_texts() -> Dict[str, str]:
    """Complete, self-documenting TOML text for each packaged scenario."""
    out = {}
    for scenario in SCENARIOS:
        tree = _defaults(scenario)
        doc = {"scenario": scenario, **tree}
        out[scenario] = "\n".join(_emit(doc)) + "\n"
    return out
