"""Run configuration: defaults < key = value config file < command-line flags.

Config files hold one dotted key per line (``bank.n_scales = 8``), ``#``
comments allowed. Floats are written with repr so a config survives a
text round-trip unchanged, which keeps config hashes stable.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from engine import __version__
from engine.imagecore import WhiteningParams
from engine.loggabor import BankParams
from engine.priors import CoocParams
from engine.pursuit import PursuitParams
from engine.shl import SHLParams

logger = logging.getLogger(__name__)

TOOL_NAME = "sparselets"
SECTIONS = ("bank", "pursuit", "shl", "cooc", "whitening")
SCALARS = ("seed", "workers", "image_size", "corpus")


class ConfigError(ValueError):
    """Raised for an unknown key or an unparsable value."""
    def __init__(self, key: str, reason: str):
        super().__init__(f"config key {key!r}: {reason}")
        self.key = key
        self.reason = reason


@dataclass(frozen=True)
class RunConfig:
    bank: BankParams = field(default_factory=BankParams)
    pursuit: PursuitParams = field(default_factory=PursuitParams)
    shl: SHLParams = field(default_factory=SHLParams)
    cooc: CoocParams = field(default_factory=CoocParams)
    whitening: WhiteningParams = field(default_factory=WhiteningParams)
    seed: int = 0
    # 0 means one worker per available core
    workers: int = 0
    image_size: int = 128
    corpus: str = ""

    # -----------------------------------------------------------------------
    # Text form
    # -----------------------------------------------------------------------

    def items(self) -> list:
        """(dotted key, value) pairs in canonical order."""
        out = []
        for section in SECTIONS:
            params = getattr(self, section)
            for f in fields(params):
                out.append((f"{section}.{f.name}", getattr(params, f.name)))
        for name in SCALARS:
            out.append((name, getattr(self, name)))
        return out

    def to_text(self) -> str:
        lines = [f"# {TOOL_NAME} run configuration"]
        lines += [f"{key} = {_format_value(value)}" for key, value in self.items()]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        overrides = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ConfigError(raw.strip(), f"line {lineno} is not 'key = value'")
            overrides[key.strip()] = value.strip()
        return cls().with_overrides(overrides)

    def with_overrides(self, overrides: dict) -> "RunConfig":
        """Copy with dotted keys replaced; string values are parsed by the field's type."""
        changes = {}
        section_values = {}
        for key, value in overrides.items():
            if value is None:
                continue
            section, _, name = key.partition(".")
            if name:
                if section not in SECTIONS:
                    raise ConfigError(key, f"unknown section {section!r}")
                types = _field_types(getattr(self, section))
                if name not in types:
                    raise ConfigError(key, f"unknown field {name!r}")
                section_values.setdefault(section, {})[name] = _parse_value(key, value, types[name])
            else:
                if key not in SCALARS:
                    raise ConfigError(key, "unknown key")
                changes[key] = _parse_value(key, value, _field_types(self)[key])
        for section, values in section_values.items():
            try:
                changes[section] = replace(getattr(self, section), **values)
            except (TypeError, ValueError) as e:
                raise ConfigError(section, str(e)) from e
        return replace(self, **changes)

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()[:16]


def _field_types(obj) -> dict:
    return {f.name: f.type for f in fields(obj)}


def _format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (tuple, list)):
        return ", ".join(_format_value(v) for v in value)
    return str(value)


def _parse_scalar(text: str):
    try:
        return int(text)
    except ValueError:
        return float(text)


def _parse_value(key: str, value, type_name: str):
    if not isinstance(value, str):
        return value
    text = value.strip()
    try:
        if type_name == "int":
            return int(text)
        if type_name == "float":
            return float(text)
        if type_name == "bool":
            if text.lower() not in ("true", "false"):
                raise ValueError(text)
            return text.lower() == "true"
        if type_name == "tuple":
            if text.lower() == "none":
                return None
            return tuple(_parse_scalar(part.strip()) for part in text.split(",") if part.strip())
        return text
    except ValueError as e:
        raise ConfigError(key, f"cannot parse {text!r} as {type_name}") from e


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(str(path), "config file not found")
    cfg = RunConfig.from_text(path.read_text(encoding="utf-8"))
    logger.info("Loaded config %s (hash %s)", path, cfg.config_hash())
    return cfg


def save_config(path, cfg: RunConfig) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(cfg.to_text(), encoding="utf-8")


# ---------------------------------------------------------------------------
# Run metadata sidecars
# ---------------------------------------------------------------------------

def metadata_path(output) -> Path:
    output = Path(output)
    return output.with_name(output.name + ".meta.json")


def write_run_metadata(output, cfg: RunConfig, subcommand: str, inputs=(), extra: dict = None) -> Path:
    """Write X.meta.json next to output X. No timestamps: reruns give identical files."""
    meta = {
        "tool": TOOL_NAME,
        "version": __version__,
        "subcommand": subcommand,
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "inputs": [str(p) for p in inputs],
        "config": cfg.to_text(),
    }
    if extra:
        meta.update(extra)
    path = metadata_path(output)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
    logger.debug("Wrote run metadata %s", path)
    return path
