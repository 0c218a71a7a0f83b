"""Scenario configuration documents.

A configuration is a TOML document with ``schema_version = 1``. Every
section is optional; missing keys fall back to the defaults for the
selected scenario. Unknown keys are errors, so a typo in a gain name can
never be silently ignored.
"""

from __future__ import annotations

import copy
import math
import os
import re
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping, Optional, Union

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .controllers import (PACAC, PACIC, AdmittancePDTerminal, AdmittanceStage,
                          ControllerConfigError, ImpedanceLaw, ImpedanceTerminal,
                          SecondOrderParams, SerialChain)
from .dynamics import IntegratorConfig
from .environment import (ContactModel, MinJerkSpec, ObstacleLaw, ObstacleLawKind,
                          ScenarioKind)
from .sensing import FilterConfig, SensorParams, VirtualForceGain

SCHEMA_VERSION = 1
SEED_ENV = "PREIMPACT_SEED"

Controller = Union[PACIC, PACAC, SerialChain]


class ConfigError(ValueError):
    def __init__(self, message: str, line: Optional[int] = None, source: Optional[str] = None):
        self.line = line
        self.source = source
        where = ""
        if source:
            where = f"{source}:{line}: " if line else f"{source}: "
        elif line:
            where = f"line {line}: "
        super().__init__(where + message)
        self.message = message


# Default gains: G_p 0.8; M_a 1, omega_a 5, zeta_a 1;
# m 0.5, omega_i 15, zeta_i 1.
_DEFAULT_ADMITTANCE = {"M": 1.0, "omega": 5.0, "zeta": 1.0}
_DEFAULT_IMPEDANCE = {"M": 0.5, "omega": 15.0, "zeta": 1.0}


def _default_controller(kind: str) -> dict:
    if kind == "pacic":
        return {"kind": "pacic", "law": "mi_equals_m",
                "admittance": dict(_DEFAULT_ADMITTANCE),
                "impedance": dict(_DEFAULT_IMPEDANCE)}
    if kind == "pacac":
        kp = 1e6
        return {"kind": "pacac", "kp": kp, "kd": 2.0 * math.sqrt(0.5 * kp),
                "admittance": dict(_DEFAULT_ADMITTANCE),
                "admittance2": dict(_DEFAULT_IMPEDANCE)}
    if kind == "chain":
        return {"kind": "chain",
                "stages": [dict(_DEFAULT_ADMITTANCE, source="proximity")],
                "terminal": dict(_DEFAULT_IMPEDANCE, kind="impedance", law="mi_equals_m")}
    raise ConfigError(f"unknown controller kind {kind!r}; expected pacic, pacac or chain")


def default_document(scenario: ScenarioKind | str, controller: str = "pacic") -> dict:
    kind = ScenarioKind(scenario)
    doc: dict[str, Any] = {
        "schema_version": SCHEMA_VERSION,
        "scenario": kind.value,
        "seed": 0,
        "plant": {"mass": 0.5},
        "controller": _default_controller(controller),
        "proximity": {"G_p": 0.8},
        "sensor": {"G_xi": 1.0, "alpha": 1.0, "psi": 1.0, "d_o": 5e-3, "n": 2.0,
                   "residual_offset": 0.0, "noise_std": 0.0},
        "filter": {"enabled": True, "order": 5, "cutoff_hz": 500.0},
        "contact": {"k_c": 1e5, "c_c": 50.0},
        "integrator": {"method": "rk4", "dt": 1e-4, "t_end": 1.0, "control_period": 0.0},
    }
    s = kind.normal
    if kind.obstacle_moves:
        # plant holds x_d = 0; obstacle starts 50 mm away moving at 0.3 m/s
        doc["trajectory"] = {"x0": 0.0, "xf": 0.0, "T": 1.0, "t0": 0.0}
        doc["obstacle"] = {"law": "approach", "position": -s * 0.05, "v0": s * 0.3,
                           "mass": 0.5, "friction": 0.0}
    else:
        # plant runs 100 mm in 0.5 s; obstacle 30 mm short of the end point.
        # The virtual damping slows the final approach to a creep, so contact
        # with reduction enabled comes only after about 4 s.
        doc["trajectory"] = {"x0": 0.0, "xf": -s * 0.1, "T": 0.5, "t0": 0.05}
        doc["obstacle"] = {"law": "fixed", "position": -s * 0.07, "mass": 0.5,
                           "friction": 0.0}
        doc["integrator"]["t_end"] = 6.0
    return doc


_ALLOWED = {
    "": {"schema_version", "scenario", "seed", "plant", "controller", "proximity", "sensor",
         "filter", "contact", "integrator", "trajectory", "obstacle"},
    "plant": {"mass"},
    "proximity": {"G_p", "saturation"},
    "sensor": {"G_xi", "alpha", "psi", "d_o", "n", "residual_offset", "noise_std"},
    "filter": {"enabled", "order", "cutoff_hz", "sample_hz"},
    "contact": {"k_c", "c_c"},
    "integrator": {"method", "dt", "t_end", "control_period"},
    "trajectory": {"x0", "xf", "T", "t0"},
    "obstacle": {"law", "position", "v0", "mass", "friction"},
}
_SECOND_ORDER_KEYS = {"M", "D", "K", "omega", "zeta"}
_CONTROLLER_KEYS = {
    "pacic": {"kind", "law", "model_mass", "admittance", "impedance"},
    "pacac": {"kind", "kp", "kd", "model_mass", "admittance", "admittance2"},
    "chain": {"kind", "model_mass", "stages", "terminal"},
}


@dataclass(frozen=True)
class ScenarioConfig:
    scenario: ScenarioKind
    plant_mass: float
    controller: Controller
    gain: VirtualForceGain
    sensor: SensorParams
    filter: FilterConfig
    contact: ContactModel
    obstacle: ObstacleLaw
    integrator: IntegratorConfig
    trajectory: MinJerkSpec
    seed: int = 0
    # the document as written (plus overrides) and after layering on defaults
    document: Optional[dict] = None
    resolved: Optional[dict] = None

    @property
    def normal(self) -> int:
        return self.scenario.normal

    def with_overrides(self, overrides: Mapping[str, Any]) -> "ScenarioConfig":
        if self.document is None:
            raise ConfigError("config has no source document to override")
        doc = copy.deepcopy(self.document)
        if "controller.kind" in overrides:
            doc["controller"] = {"kind": overrides["controller.kind"]}
        return from_document(apply_overrides(doc, overrides))

    @property
    def admittance_params(self) -> SecondOrderParams:
        """Parameters of the stage driven by the proximity force."""
        c = self.controller
        if isinstance(c, PACIC):
            return c.admittance
        if isinstance(c, PACAC):
            return c.admittance1
        return c.stages[0].params

    @property
    def contact_params(self) -> SecondOrderParams:
        """Parameters shaping the response to contact force."""
        c = self.controller
        if isinstance(c, PACIC):
            return c.impedance
        if isinstance(c, PACAC):
            return c.admittance2
        return c.terminal.params


def _second_order(section: Any, where: str) -> SecondOrderParams:
    if not isinstance(section, Mapping):
        raise ConfigError(f"{where} must be a table")
    keys = set(section) & _SECOND_ORDER_KEYS
    try:
        if keys == {"M", "D", "K"}:
            return SecondOrderParams(float(section["M"]), float(section["D"]), float(section["K"]))
        if keys == {"M", "omega", "zeta"}:
            return SecondOrderParams.from_natural(float(section["M"]), float(section["omega"]),
                                                  float(section["zeta"]))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None
    raise ConfigError(f"{where} needs either (M, D, K) or (M, omega, zeta), got {sorted(keys)}")


def _check_keys(section: Any, allowed: set, where: str):
    if not isinstance(section, Mapping):
        raise ConfigError(f"{where or 'document'} must be a table")
    for key in section:
        if key not in allowed:
            raise ConfigError(f"unknown key '{(where + '.') if where else ''}{key}'")


def _build_controller(sec: Mapping, mass: float) -> Controller:
    kind = sec.get("kind", "pacic")
    if kind not in _CONTROLLER_KEYS:
        raise ConfigError(f"unknown controller kind {kind!r}; expected pacic, pacac or chain")
    _check_keys(sec, _CONTROLLER_KEYS[kind], "controller")
    m = float(sec.get("model_mass", mass))
    try:
        if kind == "pacic":
            for name in ("admittance", "impedance"):
                _check_keys(sec.get(name, {}), _SECOND_ORDER_KEYS, f"controller.{name}")
            return PACIC(_second_order(sec.get("admittance"), "controller.admittance"),
                         _second_order(sec.get("impedance"), "controller.impedance"),
                         m, ImpedanceLaw(sec.get("law", "mi_equals_m")))
        if kind == "pacac":
            for name in ("admittance", "admittance2"):
                _check_keys(sec.get(name, {}), _SECOND_ORDER_KEYS, f"controller.{name}")
            if "kp" not in sec or "kd" not in sec:
                raise ConfigError("controller.kp and controller.kd are required for pacac")
            return PACAC(_second_order(sec.get("admittance"), "controller.admittance"),
                         _second_order(sec.get("admittance2"), "controller.admittance2"),
                         float(sec["kp"]), float(sec["kd"]), m)
        stages = []
        raw_stages = sec.get("stages", [])
        if not isinstance(raw_stages, list):
            raise ConfigError("controller.stages must be an array of tables")
        for k, st in enumerate(raw_stages):
            where = f"controller.stages[{k}]"
            _check_keys(st, _SECOND_ORDER_KEYS | {"source", "name", "reference"}, where)
            stages.append(AdmittanceStage(_second_order(st, where), st.get("source", "proximity"),
                                          st.get("name"), st.get("reference")))
        term = sec.get("terminal")
        if not isinstance(term, Mapping):
            raise ConfigError("controller.terminal is required for a chain")
        tkind = term.get("kind", "impedance")
        if tkind == "impedance":
            _check_keys(term, _SECOND_ORDER_KEYS | {"kind", "law"}, "controller.terminal")
            terminal = ImpedanceTerminal(_second_order(term, "controller.terminal"),
                                         ImpedanceLaw(term.get("law", "mi_equals_m")))
        elif tkind == "admittance_pd":
            _check_keys(term, _SECOND_ORDER_KEYS | {"kind", "source", "kp", "kd"},
                        "controller.terminal")
            if "kp" not in term or "kd" not in term:
                raise ConfigError("controller.terminal needs kp and kd for admittance_pd")
            terminal = AdmittancePDTerminal(_second_order(term, "controller.terminal"),
                                            float(term["kp"]), float(term["kd"]),
                                            term.get("source", "contact"))
        else:
            raise ConfigError(f"unknown terminal kind {tkind!r}; expected impedance or admittance_pd")
        return SerialChain(tuple(stages), terminal, m)
    except ControllerConfigError as exc:
        raise ConfigError(str(exc)) from None
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"controller: {exc}") from None


def from_document(doc: Mapping, source: Optional[str] = None) -> ScenarioConfig:
    """Validate a parsed document layered over the scenario defaults."""
    if not isinstance(doc, Mapping) or not doc:
        raise ConfigError("empty configuration", source=source)
    if "schema_version" not in doc:
        raise ConfigError("missing schema_version", source=source)
    if doc["schema_version"] != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {doc['schema_version']!r}; "
                          f"expected {SCHEMA_VERSION}", source=source)
    _check_keys(doc, _ALLOWED[""], "")
    try:
        kind = ScenarioKind(doc.get("scenario", "c"))
    except ValueError:
        raise ConfigError(f"unknown scenario {doc.get('scenario')!r}; expected a, b, c or d",
                          source=source) from None
    ctrl_kind = doc.get("controller", {}).get("kind", "pacic") \
        if isinstance(doc.get("controller"), Mapping) else "pacic"
    merged = _merge(default_document(kind, ctrl_kind), doc)
    for name, allowed in _ALLOWED.items():
        if name:
            _check_keys(merged[name], allowed, name)
    try:
        mass = float(merged["plant"]["mass"])
        if not mass > 0:
            raise ConfigError("plant.mass must be > 0")
        controller = _build_controller(merged["controller"], mass)
        prox = merged["proximity"]
        gain = VirtualForceGain(float(prox["G_p"]),
                                None if prox.get("saturation") is None else float(prox["saturation"]))
        sensor = SensorParams(**{k: float(v) for k, v in merged["sensor"].items()})
        integ = merged["integrator"]
        integrator = IntegratorConfig(dt=float(integ["dt"]), t_end=float(integ["t_end"]),
                                      method=integ["method"],
                                      control_period=float(integ.get("control_period", 0.0)))
        fsec = merged["filter"]
        filt = FilterConfig(int(fsec["order"]), float(fsec["cutoff_hz"]),
                            None if fsec.get("sample_hz") is None else float(fsec["sample_hz"]),
                            bool(fsec["enabled"])).validated(1.0 / integrator.dt)
        contact = ContactModel(**{k: float(v) for k, v in merged["contact"].items()})
        osec = dict(merged["obstacle"])
        law = ObstacleLaw(kind=ObstacleLawKind(osec.pop("law")),
                          **{k: float(v) for k, v in osec.items()})
        trajectory = MinJerkSpec(**{k: float(v) for k, v in merged["trajectory"].items()})
        seed = int(merged.get("seed", 0))
    except ConfigError as exc:
        raise ConfigError(exc.message, source=source) from None
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(str(exc), source=source) from None
    env_seed = os.environ.get(SEED_ENV)
    if env_seed not in (None, ""):
        try:
            seed = int(env_seed)
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env_seed!r}") from None
    _check_period(integrator)
    _check_scenario(kind, law, trajectory, source)
    return ScenarioConfig(kind, mass, controller, gain, sensor, filt, contact, law,
                          integrator, trajectory, seed, copy.deepcopy(dict(doc)), merged)


def _check_period(integ: IntegratorConfig):
    if integ.control_period > 0:
        ratio = integ.control_period / integ.dt
        if abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
            raise ConfigError("integrator.control_period must be a whole multiple of dt")


def _check_scenario(kind: ScenarioKind, law: ObstacleLaw, traj: MinJerkSpec,
                    source: Optional[str]):
    s = kind.normal
    if kind.obstacle_moves:
        if law.kind is not ObstacleLawKind.APPROACH:
            raise ConfigError(f"scenario {kind.value} needs an approaching obstacle", source=source)
        if traj.xf != traj.x0:
            raise ConfigError(f"scenario {kind.value} holds the plant still; "
                              "trajectory.xf must equal trajectory.x0", source=source)
        if not s * (traj.x0 - law.position) > 0:
            raise ConfigError(f"scenario {kind.value} places the obstacle on the "
                              f"{'negative' if s > 0 else 'positive'} side of the plant",
                              source=source)
        if not s * law.v0 > 0:
            raise ConfigError(f"scenario {kind.value}: obstacle.v0 must point towards the plant",
                              source=source)
    else:
        if law.kind is not ObstacleLawKind.FIXED:
            raise ConfigError(f"scenario {kind.value} needs a fixed obstacle", source=source)
        if not s * (traj.x0 - traj.xf) > 0:
            raise ConfigError(f"scenario {kind.value}: the trajectory must run towards the "
                              "obstacle side", source=source)
        lo, hi = sorted((traj.x0, traj.xf))
        if not lo < law.position < hi:
            raise ConfigError(f"scenario {kind.value}: obstacle.position must lie strictly "
                              "inside the trajectory span", source=source)


_NATURAL = {"omega", "zeta"}
_PHYSICAL = {"D", "K"}
_SECOND_ORDER_TABLES = {"admittance", "impedance", "admittance2", "terminal"}
_TERMINAL_ONLY = {"impedance": {"kp", "kd", "source"}, "admittance_pd": {"law"}}


def _merge(base: dict, top: Mapping, path: str = "") -> dict:
    """Layer ``top`` over ``base``.

    Second-order tables drop the default parameterisation the user did not
    choose, so (M, D, K) in the document never collides with a default
    (M, omega, zeta). Arrays of tables replace the default wholesale.
    """
    out = copy.deepcopy(base)
    if path.startswith("controller.") and path.split(".")[-1] in _SECOND_ORDER_TABLES:
        if set(top) & _PHYSICAL:
            out = {k: v for k, v in out.items() if k not in _NATURAL}
        if set(top) & _NATURAL:
            out = {k: v for k, v in out.items() if k not in _PHYSICAL}
        if path == "controller.terminal" and "kind" in top:
            drop = _TERMINAL_ONLY.get(top["kind"], set())
            out = {k: v for k, v in out.items() if k not in drop}
    for key, val in top.items():
        sub = f"{path}.{key}" if path else key
        if isinstance(val, Mapping) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], val, sub)
        else:
            out[key] = copy.deepcopy(val)
    return out


def parse_value(text: str) -> Any:
    """Parse an override value as a TOML value, falling back to a bare string."""
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def apply_overrides(doc: dict, overrides: Mapping[str, Any]) -> dict:
    doc = copy.deepcopy(doc)
    for dotted, value in overrides.items():
        parts = dotted.split(".")
        node = doc
        for p in parts[:-1]:
            m = re.fullmatch(r"(\w+)\[(\d+)\]", p)
            if m:
                seq = node.get(m.group(1))
                idx = int(m.group(2))
                if not isinstance(seq, list) or idx >= len(seq):
                    raise ConfigError(f"override {dotted!r} indexes a missing entry")
                node = seq[idx]
                continue
            nxt = node.setdefault(p, {})
            if not isinstance(nxt, dict):
                raise ConfigError(f"override {dotted!r} descends into a non-table")
            node = nxt
        node[parts[-1]] = value
    return doc


def build_config(kind: ScenarioKind | str, overrides: Mapping[str, Any]) -> ScenarioConfig:
    doc = {"schema_version": SCHEMA_VERSION, "scenario": ScenarioKind(kind).value}
    return from_document(apply_overrides(doc, overrides))


def _line_of(text: str, key: str) -> Optional[int]:
    leaf = key.split(".")[-1].split("[")[0]
    pat = re.compile(rf"^\s*(\"{re.escape(leaf)}\"|{re.escape(leaf)})\s*=")
    sect = re.compile(rf"^\s*\[+\s*{re.escape(leaf)}\s*\]+")
    for i, line in enumerate(text.splitlines(), start=1):
        if pat.match(line) or sect.match(line):
            return i
    return None


def load_config(path: Union[str, Path], overrides: Optional[Mapping[str, Any]] = None
                ) -> ScenarioConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", source=str(path)) from None
    if not text.strip():
        raise ConfigError("empty configuration", line=1, source=str(path))
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        m = re.search(r"line (\d+)", str(exc))
        raise ConfigError(str(exc), line=int(m.group(1)) if m else None,
                          source=str(path)) from None
    if overrides:
        doc = apply_overrides(doc, overrides)
    try:
        return from_document(doc, source=str(path))
    except ConfigError as exc:
        key = re.search(r"'([\w.\[\]]+)'", exc.message)
        line = _line_of(text, key.group(1)) if key else None
        raise ConfigError(exc.message, line=line, source=str(path)) from None


def dump_document(doc: Mapping) -> str:
    """Serialise a config document back to TOML (the subset this schema uses)."""
    lines = []
    tables = []
    for key, val in doc.items():
        if isinstance(val, Mapping):
            tables.append((key, val))
        else:
            lines.append(f"{key} = {_toml_value(val)}")
    for key, val in tables:
        _dump_table(key, val, lines)
    return "\n".join(lines) + "\n"


def _dump_table(prefix: str, table: Mapping, lines: list):
    lines.append("")
    lines.append(f"[{prefix}]")
    subtables = []
    arrays = []
    for key, val in table.items():
        if isinstance(val, Mapping):
            subtables.append((key, val))
        elif isinstance(val, list) and val and all(isinstance(v, Mapping) for v in val):
            arrays.append((key, val))
        elif val is not None:
            lines.append(f"{key} = {_toml_value(val)}")
    for key, val in subtables:
        _dump_table(f"{prefix}.{key}", val, lines)
    for key, items in arrays:
        for item in items:
            lines.append("")
            lines.append(f"[[{prefix}.{key}]]")
            for k, v in item.items():
                if v is not None:
                    lines.append(f"{k} = {_toml_value(v)}")


def _toml_value(val: Any) -> str:
    if isinstance(val, bool):
        return "true" if val else "false"
    if isinstance(val, int):
        return str(val)
    if isinstance(val, float):
        return repr(val)
    if isinstance(val, str):
        return '"' + val.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(val, list):
        return "[" + ", ".join(_toml_value(v) for v in val) + "]"
    raise TypeError(f"cannot serialise {type(val).__name__}")
