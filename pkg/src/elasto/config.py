"""Run configuration: YAML documents, presets and validation.

A configuration has the sections ``phantom`` (with a nested
``deformation``), ``solver`` (with ``method`` and nested ``dp`` / ``ncc``),
``strain``, ``metrics``, ``io`` and ``render``, plus an optional top-level
``preset``. Unknown keys are errors reported with their line number.
Values resolve in the order: defaults, preset, explicit keys.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field

import yaml

from .initializers import DpParams, NccParams
from .metrics import Rect, WindowSweepSpec
from .phantom import DeformationSpec, PhantomSpec
from .solver import METHODS, SolverParams
from .strain import LsqParams
from .types import ValidationError

TRACK_METHODS = tuple(METHODS) + ("ncc", "dp")
COLORMAPS = ("gray", "jet", "hot")
COMPONENTS = ("axial", "lateral", "s_yy", "s_xx", "nu", "samples")

PRESETS = {
    "sim": dict(eta_first=0.001, eta_second=0.0005, eta_m=0.001, alpha3=20.0, alpha3s=0.045),
    "phantom": dict(eta_first=0.0006, eta_second=0.0001, eta_m=0.0006, alpha3=80.0,
                    alpha3s=0.072),
    "invivo": dict(eta_first=0.008, eta_second=0.0013, eta_m=0.008, alpha3=5.0, alpha3s=0.1),
}

IO_KEYS = ("pre", "post", "estimate", "truth", "field", "out")


class ConfigError(ValidationError):
    """Invalid configuration; the message names the file and line when known."""


@dataclass(frozen=True)
class RenderSpec:
    colormap: str = "gray"
    range: tuple[float, float] | None = None
    component: str | None = None

    def __post_init__(self):
        if self.colormap not in COLORMAPS:
            raise ValidationError(f"colormap must be one of {COLORMAPS}")
        if self.range is not None:
            lo, hi = self.range
            if not lo < hi:
                raise ValidationError(f"render range must be increasing, got {self.range}")
        if self.component is not None and self.component not in COMPONENTS:
            raise ValidationError(f"component must be one of {COMPONENTS}")


@dataclass(frozen=True)
class MetricsSpec:
    sweep: WindowSweepSpec | None = None
    component: str | None = None
    margin: int = 0


@dataclass(frozen=True)
class RunConfig:
    phantom: PhantomSpec = field(default_factory=PhantomSpec)
    deformation: DeformationSpec = field(default_factory=DeformationSpec)
    method: str = "mechsoul"
    preset: str | None = None
    solver: SolverParams = field(default_factory=SolverParams)
    dp: DpParams = field(default_factory=DpParams)
    ncc: NccParams = field(default_factory=NccParams)
    strain: LsqParams = field(default_factory=LsqParams)
    metrics: MetricsSpec = field(default_factory=MetricsSpec)
    io: dict = field(default_factory=dict)
    render: RenderSpec = field(default_factory=RenderSpec)


# --- YAML with line numbers --------------------------------------------------

class _Mapping(dict):
    """dict that remembers the source line of itself and of each key."""

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.line = 0
        self.lines = {}


class _Loader(yaml.SafeLoader):
    pass


def _construct_mapping(loader, node):
    loader.flatten_mapping(node)
    out = _Mapping()
    out.line = node.start_mark.line + 1
    for key_node, value_node in node.value:
        key = loader.construct_object(key_node, deep=True)
        line = key_node.start_mark.line + 1
        if key in out:
            raise ConfigError(f"line {line}: duplicate key {key!r}")
        out[key] = loader.construct_object(value_node, deep=True)
        out.lines[key] = line
    return out


_Loader.add_constructor(yaml.resolver.BaseResolver.DEFAULT_MAPPING_TAG, _construct_mapping)


def _where(source, line):
    return f"{source}:{line}" if line else str(source)


def _line(mapping, key=None):
    if not isinstance(mapping, _Mapping):
        return 0
    return mapping.lines.get(key, mapping.line) if key is not None else mapping.line


def _section(doc, name, source):
    value = doc.get(name)
    if value is None:
        return _Mapping()
    if not isinstance(value, dict):
        raise ConfigError(f"{_where(source, _line(doc, name))}: section {name!r} "
                          "must be a mapping")
    return value


# --- coercion ---------------------------------------------------------------

def _coerce(value, annotation: str, where: str, key: str):
    """Convert a YAML scalar to the dataclass field type named by ``annotation``."""
    optional = "None" in annotation
    base = annotation.replace("| None", "").strip()
    if value is None:
        if optional:
            return None
        raise ConfigError(f"{where}: {key} may not be null")
    try:
        if base == "bool":
            if not isinstance(value, bool):
                raise TypeError
            return value
        if base == "int":
            if isinstance(value, bool) or float(value) != int(float(value)):
                raise TypeError
            return int(float(value))
        if base == "float":
            if isinstance(value, bool):
                raise TypeError
            return float(value)
        if base == "str":
            if not isinstance(value, str):
                raise TypeError
            return value
        if base.startswith("tuple"):
            if not isinstance(value, (list, tuple)) or len(value) != 2:
                raise TypeError
            return tuple(float(v) for v in value)
    except (TypeError, ValueError):
        raise ConfigError(f"{where}: {key} has invalid value {value!r} "
                          f"(expected {base})") from None
    return value


def _build(cls, mapping, source, section, base=None, skip=()):
    """Instantiate dataclass ``cls`` from ``mapping``, rejecting unknown keys."""
    known = {f.name: f for f in dataclasses.fields(cls)}
    values = {}
    for key, value in mapping.items():
        if key in skip:
            continue
        where = _where(source, _line(mapping, key))
        if key not in known:
            raise ConfigError(f"{where}: unknown key {key!r} in section {section!r}")
        values[key] = _coerce(value, str(known[key].type), where, key)
    try:
        return dataclasses.replace(base, **values) if base is not None else cls(**values)
    except (ValidationError, ValueError, TypeError) as exc:
        raise ConfigError(f"{_where(source, _line(mapping))}: section {section!r}: {exc}") \
            from None


def _rect(value, where):
    if not isinstance(value, (list, tuple)) or len(value) != 4:
        raise ConfigError(f"{where}: region must be [top, left, bottom, right] in mm")
    try:
        return Rect(*(float(v) for v in value))
    except (ValidationError, ValueError, TypeError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _metrics(mapping, source):
    known = ("window_size_mm", "background_window_count", "background_region",
             "target_regions", "component", "margin")
    for key in mapping:
        if key not in known:
            raise ConfigError(f"{_where(source, _line(mapping, key))}: unknown key {key!r} "
                              "in section 'metrics'")
    component = mapping.get("component")
    if component is not None and component not in COMPONENTS:
        raise ConfigError(f"{_where(source, _line(mapping, 'component'))}: component must "
                          f"be one of {COMPONENTS}")
    margin = _coerce(mapping.get("margin", 0), "int", _where(source, _line(mapping, "margin")),
                     "margin")
    if margin < 0:
        raise ConfigError(f"{_where(source, _line(mapping, 'margin'))}: margin must be >= 0")
    if "background_region" not in mapping:
        for key in ("window_size_mm", "background_window_count", "target_regions"):
            if key in mapping:
                raise ConfigError(f"{_where(source, _line(mapping, key))}: {key} needs "
                                  "a background_region")
        return MetricsSpec(None, component, margin)
    background = _rect(mapping["background_region"],
                       _where(source, _line(mapping, "background_region")))
    targets_raw = mapping.get("target_regions") or []
    where_t = _where(source, _line(mapping, "target_regions"))
    if not isinstance(targets_raw, list):
        raise ConfigError(f"{where_t}: target_regions must be a list of regions")
    targets = tuple(_rect(t, where_t) for t in targets_raw)
    extra = {}
    if "window_size_mm" in mapping:
        extra["window_size_mm"] = _coerce(mapping["window_size_mm"], "tuple",
                                          _where(source, _line(mapping, "window_size_mm")),
                                          "window_size_mm")
    if "background_window_count" in mapping:
        extra["background_window_count"] = _coerce(
            mapping["background_window_count"], "int",
            _where(source, _line(mapping, "background_window_count")),
            "background_window_count")
    try:
        sweep = WindowSweepSpec(background, targets, **extra)
    except ValidationError as exc:
        raise ConfigError(f"{_where(source, _line(mapping))}: section 'metrics': {exc}") \
            from None
    return MetricsSpec(sweep, component, margin)


def normalize_method(name: str) -> str:
    method = str(name).replace("-", "_")
    if method not in TRACK_METHODS:
        raise ConfigError(f"unknown method {name!r}; expected one of "
                          f"{', '.join(m.replace('_', '-') for m in TRACK_METHODS)}")
    return method


def from_mapping(doc, source="<config>", preset: str | None = None,
                 base_dir: str | None = None, check_paths: bool = True) -> RunConfig:
    """Validate a parsed document; ``preset`` overrides the document's own."""
    if doc is None:
        doc = _Mapping()
    if not isinstance(doc, dict):
        raise ConfigError(f"{source}: top level must be a mapping")
    sections = ("preset", "phantom", "solver", "strain", "metrics", "io", "render")
    for key in doc:
        if key not in sections:
            raise ConfigError(f"{_where(source, _line(doc, key))}: unknown section {key!r}")

    preset = preset if preset is not None else doc.get("preset")
    if preset is not None and preset not in PRESETS:
        raise ConfigError(f"{_where(source, _line(doc, 'preset'))}: unknown preset "
                          f"{preset!r}; expected one of {sorted(PRESETS)}")

    ph = _section(doc, "phantom", source)
    deformation_map = _section(ph, "deformation", source)
    phantom = _build(PhantomSpec, ph, source, "phantom", skip=("deformation",))
    deformation = _build(DeformationSpec, deformation_map, source, "phantom.deformation")

    sv = _section(doc, "solver", source)
    method = "mechsoul"
    if "method" in sv:
        try:
            method = normalize_method(sv["method"])
        except ConfigError as exc:
            raise ConfigError(f"{_where(source, _line(sv, 'method'))}: {exc}") from None
    solver_base = SolverParams(**PRESETS[preset]) if preset else SolverParams()
    solver = _build(SolverParams, sv, source, "solver", base=solver_base,
                    skip=("method", "dp", "ncc"))
    dp = _build(DpParams, _section(sv, "dp", source), source, "solver.dp")
    ncc = _build(NccParams, _section(sv, "ncc", source), source, "solver.ncc")
    strain = _build(LsqParams, _section(doc, "strain", source), source, "strain")
    metrics = _metrics(_section(doc, "metrics", source), source)
    render = _build(RenderSpec, _section(doc, "render", source), source, "render")

    io_map = _section(doc, "io", source)
    io = {}
    for key, value in io_map.items():
        where = _where(source, _line(io_map, key))
        if key not in IO_KEYS:
            raise ConfigError(f"{where}: unknown key {key!r} in section 'io'")
        if not isinstance(value, str):
            raise ConfigError(f"{where}: io.{key} must be a path string")
        path = value if os.path.isabs(value) or base_dir is None else os.path.join(base_dir, value)
        if check_paths and key != "out" and not os.path.exists(path):
            raise ConfigError(f"{where}: io.{key} path does not exist: {path}")
        io[key] = path

    return RunConfig(phantom=phantom, deformation=deformation, method=method, preset=preset,
                     solver=solver, dp=dp, ncc=ncc, strain=strain, metrics=metrics, io=io,
                     render=render)


def parse(text: str, source="<config>", **kwargs) -> RunConfig:
    try:
        doc = yaml.load(text, Loader=_Loader)
    except yaml.MarkedYAMLError as exc:
        line = exc.problem_mark.line + 1 if exc.problem_mark else 0
        raise ConfigError(f"{_where(source, line)}: YAML syntax error: {exc.problem}") \
            from None
    return from_mapping(doc, source, **kwargs)


def load(path, **kwargs) -> RunConfig:
    """Read and validate a YAML config file; relative io paths resolve beside it."""
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    kwargs.setdefault("base_dir", os.path.dirname(os.path.abspath(path)))
    return parse(text, source=str(path), **kwargs)


def default(preset: str | None = None) -> RunConfig:
    return from_mapping(None, preset=preset)
