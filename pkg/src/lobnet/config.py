"""Flat key-value run configuration with sections (INI syntax).

Command-line flags override config keys; config keys override defaults.
"""

from __future__ import annotations

import configparser


class ConfigError(Exception):
    operation = "cli.config"


class RunConfig:
    """Layered lookup: explicit override, then config file, then default."""

    def __init__(self, sections=None):
        self.sections = sections or {}

    @classmethod
    def load(cls, path):
        parser = configparser.ConfigParser()
        read = parser.read(path)
        if not read:
            raise ConfigError(f"config file not found: {path}")
        return cls({name: dict(parser[name]) for name in parser.sections()})

    def get(self, section, key, default=None, cast=str, override=None):
        if override is not None:
            return override
        raw = self.sections.get(section, {}).get(key)
        if raw is None:
            return default
        if cast is bool:
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ConfigError(f"[{section}] {key}: not a boolean: {raw!r}")
        try:
            return cast(raw)
        except ValueError as exc:
            raise ConfigError(f"[{section}] {key}: {exc}") from None
