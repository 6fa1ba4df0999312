import logging
from pathlib import Path
from typing import Any

from pydantic import ValidationError

from control_gan.train_utils import TrainConfig

logger = logging.getLogger(__name__)

PATH_FIELDS = ("dataset_path", "label_file")


class ConfigError(ValueError):
    """Raised when a configuration file cannot be parsed or fails validation"""

    def __init__(self, message: str, line: int | None = None, field: str | None = None) -> None:
        super().__init__(message)
        self.line = line
        self.field = field


def parse_config_text(text: str, source: str = "<config>") -> tuple[dict[str, str], dict[str, int]]:
    """Parse flat ``key = value`` lines; ``#`` starts a comment. Returns (values, line numbers)"""
    values: dict[str, str] = {}
    lines: dict[str, int] = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, separator, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not separator or not key:
            raise ConfigError(f"{source}:{number}: expected 'key = value', got {raw.strip()!r}", line=number)
        if key in values:
            raise ConfigError(f"{source}:{number}: {key} is already set on line {lines[key]}", line=number, field=key)
        if key not in TrainConfig.model_fields:
            raise ConfigError(f"{source}:{number}: unknown key {key!r}", line=number, field=key)
        values[key], lines[key] = value, number
    return values, lines


def build_config(
    values: dict[str, Any], lines: dict[str, int] | None = None, source: str = "<config>"
) -> TrainConfig:
    """Validate raw values, naming the offending field (and line, when known) on failure"""
    lines = lines or {}
    # an empty value means "use the default"
    cleaned = {key: value for key, value in values.items() if value != ""}
    try:
        return TrainConfig.model_validate(cleaned)
    except ValidationError as e:
        error = e.errors()[0]
        field = str(error["loc"][0]) if error["loc"] else None
        line = lines.get(field) if field else None
        where = f"{source}:{line}" if line else source
        subject = f"{field}: " if field else ""
        raise ConfigError(f"{where}: {subject}{error['msg']}", line=line, field=field) from e


def load_config(path: str | Path, overrides: dict[str, Any] | None = None) -> TrainConfig:
    """Read a config file, apply command-line overrides and validate.

    Relative dataset paths are resolved against the config file's directory.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"Cannot read config file {path}: {e}") from e
    values: dict[str, Any]
    values, lines = parse_config_text(text, source=str(path))
    for key in PATH_FIELDS:
        if values.get(key) and not Path(values[key]).is_absolute():
            values[key] = str(path.parent / values[key])
    values.update({key: value for key, value in (overrides or {}).items() if value is not None})
    config = build_config(values, lines, source=str(path))
    logger.info(f"Loaded configuration from {path} (mode {config.mode}, seed {config.seed})")
    return config


def format_config(config: TrainConfig) -> str:
    """Render a config in the same flat format ``load_config`` reads"""
    lines = []
    for key, value in config.model_dump(mode="json").items():
        if value is None:
            continue
        if isinstance(value, list):
            value = ",".join(str(item) for item in value)
        elif isinstance(value, bool):
            value = str(value).lower()
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"
