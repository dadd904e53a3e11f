"""Structured-text configuration: one ``key = value`` per line.

Keys are dotted ``section.field`` names mapped onto the pipeline dataclasses
(``phantom.*`` -> PhantomSpec, ``beam.*`` -> BeamModel, ``optimizer.*`` ->
OptimizerConfig, ``sequencer.*`` -> SequencerParams) plus the arc and
objective sections defined here.  ``#`` starts a comment; unknown keys are
rejected with the offending line.  Triples are written as three
space-separated numbers.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import get_args, get_origin

from .dose import BeamModel
from .errors import ConfigError
from .optimizer import DEFAULT_APERTURE_MARGIN_MM, OptimizerConfig
from .phantom import PhantomSpec
from .sequencer import SequencerParams


@dataclass(frozen=True)
class ArcSettings:
    n_cp: int = 180
    start_angle: float = 0.0
    sad: float = 1000.0
    bev_spacing: float = 5.0
    bev_fov: float = 200.0


@dataclass(frozen=True)
class ObjectiveSettings:
    lambda_plus: float = 2.0
    lambda_minus: float = 1.0
    s_bladder: float = 0.0
    s_rectum: float = 0.0


@dataclass(frozen=True)
class PipelineSettings:
    phantom: PhantomSpec = field(default_factory=PhantomSpec)
    arc: ArcSettings = field(default_factory=ArcSettings)
    beam: BeamModel = field(default_factory=BeamModel)
    objective: ObjectiveSettings = field(default_factory=ObjectiveSettings)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    sequencer: SequencerParams = field(default_factory=SequencerParams)
    aperture_margin: float = DEFAULT_APERTURE_MARGIN_MM


_SECTIONS = {
    "phantom": PhantomSpec,
    "arc": ArcSettings,
    "beam": BeamModel,
    "objective": ObjectiveSettings,
    "optimizer": OptimizerConfig,
    "sequencer": SequencerParams,
}


def parse_config_text(text: str) -> dict[str, str]:
    entries: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        entries[key.strip()] = value.strip()
    return entries


def load_config(path) -> dict[str, str]:
    with open(path) as fh:
        return parse_config_text(fh.read())


def _convert(raw: str, annotation, key: str):
    origin = get_origin(annotation)
    if origin is tuple:
        args = get_args(annotation)
        parts = raw.replace(",", " ").split()
        elem = args[0]
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(elem(p) for p in parts)
        if len(parts) != len(args):
            raise ConfigError(f"{key}: expected {len(args)} values, got {len(parts)}")
        return tuple(a(p) for a, p in zip(args, parts))
    if annotation in (float, "float") or "float" in str(annotation):
        if raw.lower() in ("none", "auto"):
            return None
        return float(raw)
    if annotation in (int, "int") or str(annotation) == "int":
        return int(raw)
    if annotation in (bool, "bool"):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    return raw


def settings_from_entries(entries: dict[str, str]) -> PipelineSettings:
    """Build pipeline settings from dotted config keys; defaults fill the rest."""
    overrides: dict[str, dict[str, object]] = {name: {} for name in _SECTIONS}
    aperture_margin = DEFAULT_APERTURE_MARGIN_MM
    import typing

    hints = {
        name: typing.get_type_hints(cls) for name, cls in _SECTIONS.items()
    }
    for key, raw in entries.items():
        if key == "pipeline.aperture_margin":
            aperture_margin = float(raw)
            continue
        if "." not in key:
            raise ConfigError(f"unknown config key {key!r}")
        section, _, fname = key.partition(".")
        cls = _SECTIONS.get(section)
        if cls is None:
            raise ConfigError(f"unknown config section {section!r} in key {key!r}")
        names = {f.name for f in dataclasses.fields(cls)}
        if fname not in names:
            raise ConfigError(f"unknown config key {key!r}")
        overrides[section][fname] = _convert(raw, hints[section][fname], key)
    try:
        return PipelineSettings(
            phantom=PhantomSpec(**overrides["phantom"]),
            arc=ArcSettings(**overrides["arc"]),
            beam=BeamModel(**overrides["beam"]),
            objective=ObjectiveSettings(**overrides["objective"]),
            optimizer=OptimizerConfig(**overrides["optimizer"]),
            sequencer=SequencerParams(**overrides["sequencer"]),
            aperture_margin=aperture_margin,
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid configuration: {exc}") from exc


def load_settings(path=None, extra: dict[str, str] | None = None) -> PipelineSettings:
    entries = load_config(path) if path else {}
    if extra:
        entries.update(extra)
    return settings_from_entries(entries)


def settings_to_text(settings: PipelineSettings) -> str:
    """Render every setting (defaults included) as documented config lines."""
    lines = []
    for section, cls in _SECTIONS.items():
        obj = getattr(settings, section)
        for f in dataclasses.fields(cls):
            val = getattr(obj, f.name)
            if isinstance(val, tuple):
                out = " ".join(repr(float(v)) if isinstance(val[0], float) else str(v) for v in val)
            elif val is None:
                out = "auto"
            else:
                out = repr(val) if isinstance(val, float) else str(val)
            lines.append(f"{section}.{f.name} = {out}")
    lines.append(f"pipeline.aperture_margin = {settings.aperture_margin!r}")
    return "\n".join(lines) + "\n"
