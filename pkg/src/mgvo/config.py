"""Daemon configuration files.

Format: one ``key = value`` per line, ``#`` starts a comment, blank lines
are ignored. A repeated key keeps its last value and logs a warning.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError, MissingKey, UnreadableFile

log = logging.getLogger(__name__)


def parse_config(text: str, source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, eq, value = line.partition("=")
        key = key.strip()
        if not eq or not key:
            raise ConfigError(f"{source}:{n}: expected 'key = value'")
        if key in out:
            log.warning("%s:%d: duplicate key %r, last value wins", source, n, key)
        out[key] = value.strip()
    return out


def read_config(path) -> dict[str, str]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise UnreadableFile(f"{path}: {exc}") from None
    return parse_config(text, str(path))


def _require(values: dict, keys, path) -> None:
    for k in keys:
        if not values.get(k):
            raise MissingKey(f"{path}: missing {k}")


def _interval(values: dict, path) -> float:
    try:
        v = float(values.get("heartbeat_interval", "2.0"))
    except ValueError:
        raise ConfigError(f"{path}: heartbeat_interval must be a number") from None
    if v <= 0:
        raise ConfigError(f"{path}: heartbeat_interval must be positive")
    return v


@dataclass(frozen=True)
class NodeConfig:
    node_id: str
    site_id: str
    listen: str
    central: str
    data_dir: str
    node_secret: str
    vo_secret: str
    node_token: str
    heartbeat_interval: float = 2.0


@dataclass(frozen=True)
class CentralConfig:
    listen: str
    vo_secret: str
    heartbeat_interval: float = 2.0


NODE_KEYS = ("node_id", "site_id", "listen", "central", "data_dir", "node_secret", "vo_secret", "node_token")


def load_config(path) -> NodeConfig:
    values = read_config(path)
    _require(values, NODE_KEYS, path)
    return NodeConfig(**{k: values[k] for k in NODE_KEYS}, heartbeat_interval=_interval(values, path))


def load_central_config(path) -> CentralConfig:
    values = read_config(path)
    _require(values, ("listen", "vo_secret"), path)
    return CentralConfig(values["listen"], values["vo_secret"], _interval(values, path))
