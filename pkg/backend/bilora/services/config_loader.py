"""
Flat dotted-key experiment config files.

Grammar: one `dotted.key = value` per line, `#` comments, blank lines
ignored. Values are TOML scalars or arrays, so every config file is a flat
TOML document and goes through tomllib. The public section names `lower`,
`upper` and `regularizers` address the bi-level optimizer and regularizer
sections; `bilevel.lower.*` etc. are accepted too.
"""

import json
import logging
import math
import tomllib
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Tuple

from pydantic import ValidationError

from bilora.exceptions import ArtifactError, ConfigError
from bilora.schemas import ExperimentConfig, GradcheckSpec

logger = logging.getLogger(__name__)

# public prefix -> schema path
SECTION_ALIASES = {
    "lower": "bilevel.lower",
    "upper": "bilevel.upper",
    "regularizers": "bilevel.gammas",
}


def canonical_key(key: str) -> str:
    """Map a public dotted key to its schema path."""
    head, _, rest = key.strip().partition(".")
    if head in SECTION_ALIASES and rest:
        return f"{SECTION_ALIASES[head]}.{rest}"
    return key.strip()


def public_key(key: str) -> str:
    """Inverse of canonical_key."""
    for alias, path in SECTION_ALIASES.items():
        if key.startswith(path + "."):
            return alias + key[len(path) :]
    return key


def _flatten(tree: Dict[str, Any], prefix: str = "") -> Dict[str, Any]:
    flat: Dict[str, Any] = {}
    for key, value in tree.items():
        path = f"{prefix}{key}"
        if isinstance(value, dict):
            flat.update(_flatten(value, path + "."))
        else:
            flat[path] = value
    return flat


def _nest(flat: Dict[str, Any]) -> Dict[str, Any]:
    tree: Dict[str, Any] = {}
    for key, value in flat.items():
        node = tree
        parts = key.split(".")
        for part in parts[:-1]:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigError(f"{key}: '{part}' is a value, not a section", key=key)
            node = child
        if isinstance(node.get(parts[-1]), dict):
            raise ConfigError(f"{key} is a section, not a value", key=key)
        node[parts[-1]] = value
    return tree


def parse_value(raw: str) -> Any:
    """Parse one value with the config grammar; unparsable text is a bare string."""
    try:
        return tomllib.loads(f"value = {raw.strip()}")["value"]
    except tomllib.TOMLDecodeError:
        return raw.strip()


def parse_config_text(text: str, source: str = "<config>") -> Dict[str, Any]:
    """Parse config text into a flat {schema.path: value} mapping."""
    try:
        tree = tomllib.loads(text)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{source}: {e}") from e
    return {canonical_key(k): v for k, v in _flatten(tree).items()}


def parse_assignment(assignment: str) -> Tuple[str, Any]:
    """Split a `key=value` override."""
    key, sep, raw = assignment.partition("=")
    if not sep or not key.strip():
        raise ConfigError(f"Override '{assignment}' must look like key=value")
    return canonical_key(key), parse_value(raw)


def apply_overrides(flat: Dict[str, Any], overrides: Iterable[str]) -> Dict[str, Any]:
    """Return a copy of flat with every `key=value` override applied in order."""
    merged = dict(flat)
    for assignment in overrides:
        key, value = parse_assignment(assignment)
        merged[key] = value
        logger.debug(f"Override {public_key(key)} = {value!r}")
    return merged


def build_config(flat: Dict[str, Any]) -> ExperimentConfig:
    """
    Validate a flat mapping into an ExperimentConfig.

    Raises:
        ConfigError: Naming the first offending dotted key
    """
    try:
        return ExperimentConfig.model_validate(_nest(flat))
    except ValidationError as e:
        error = e.errors()[0]
        key = public_key(".".join(str(part) for part in error["loc"])) or "<root>"
        raise ConfigError(f"{key}: {error['msg']}", key=key) from e


def load_config(path: Path, overrides: Iterable[str] = ()) -> ExperimentConfig:
    """Read, override and validate a config file."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"Can't read config {path}: {e}") from e
    flat = apply_overrides(parse_config_text(text, str(path)), overrides)
    config = build_config(flat)
    logger.info(f"Loaded {config.method.value} config from {path}")
    return config


def with_overrides(config: ExperimentConfig, assignments: Dict[str, Any]) -> ExperimentConfig:
    """Re-validate a config with already-parsed {key: value} overrides."""
    flat = config_to_flat(config)
    flat.update({canonical_key(k): v for k, v in assignments.items()})
    return build_config(flat)


def parse_axis(spec: str) -> Tuple[str, List[Any]]:
    """Parse a sweep axis `key=v1,v2,...`."""
    key, sep, raw = spec.partition("=")
    values = [parse_value(item) for item in raw.split(",") if item.strip()]
    if not sep or not key.strip():
        raise ConfigError(f"Sweep axis '{spec}' must look like key=v1,v2,...")
    if not values:
        raise ConfigError(f"Sweep axis {key.strip()} has no values", key=key.strip())
    return key.strip(), values


# =============================================================================
# Echo
# =============================================================================


def config_to_flat(config: ExperimentConfig) -> Dict[str, Any]:
    """Fully resolved config as {schema.path: value}; unset optionals are omitted."""
    flat = _flatten(config.model_dump(mode="json"))
    return {k: v for k, v in flat.items() if v is not None}


def _render_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        if math.isnan(value):
            return "nan"
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return repr(value)
    if isinstance(value, list):
        return "[" + ", ".join(_render_value(item) for item in value) + "]"
    return json.dumps(str(value))


def render_config(config: ExperimentConfig) -> str:
    """Render a config in the flat grammar with floats at round-trip precision."""
    lines = ["# bilora resolved config"]
    for key, value in config_to_flat(config).items():
        lines.append(f"{public_key(key)} = {_render_value(value)}")
    return "\n".join(lines) + "\n"


def write_config_echo(path: Path, config: ExperimentConfig) -> Path:
    try:
        path.write_text(render_config(config), encoding="utf-8")
    except OSError as e:
        raise ArtifactError(f"Failed to write config echo {path}: {e}") from e
    logger.info(f"Config echo written to {path}")
    return path


def load_gradcheck_spec(path: Optional[Path] = None, overrides: Iterable[str] = ()) -> GradcheckSpec:
    """
    Read only the gradcheck.* keys of a config file, plus overrides.

    Other sections are ignored, so any experiment config works here and
    `method` isn't required.
    """
    flat: Dict[str, Any] = {}
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigError(f"Can't read config {path}: {e}") from e
        flat = parse_config_text(text, str(path))
    flat = apply_overrides(flat, overrides)
    section = {
        key.removeprefix("gradcheck."): value
        for key, value in flat.items()
        if key.startswith("gradcheck.")
    }
    try:
        return GradcheckSpec.model_validate(_nest(section))
    except ValidationError as e:
        error = e.errors()[0]
        key = ".".join(["gradcheck", *(str(part) for part in error["loc"])])
        raise ConfigError(f"{key}: {error['msg']}", key=key) from e
