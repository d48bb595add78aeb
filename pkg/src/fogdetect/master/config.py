"""Master configuration file.

TOML with one key per command-line flag (dashes become underscores)::

    listen_http = "0.0.0.0:8080"
    listen_worker = "0.0.0.0:9090"
    mode_default = "accuracy"
    target_long_side = 200
    heartbeat_interval_ms = 2000
    heartbeat_timeout_intervals = 3
    queue_wait_timeout_ms = 10000
    max_attempts = 5
    max_frame_bytes = 67108864
    transition_log = "transitions.log"   # omit to log transitions to stderr

Flags given on the command line override the file.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Any

from ..preprocess import DEFAULT_TARGET_LONG_SIDE, Mode
from ..protocol import DEFAULT_MAX_FRAME
from .scheduler import MasterConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


@dataclass(frozen=True)
class MasterSettings:
    listen_http: str = "127.0.0.1:8080"
    listen_worker: str = "127.0.0.1:9090"
    mode_default: str = "accuracy"
    target_long_side: int = DEFAULT_TARGET_LONG_SIDE
    heartbeat_interval_ms: int = 2000
    heartbeat_timeout_intervals: int = 3
    queue_wait_timeout_ms: int = 10_000
    max_attempts: int = 5
    max_frame_bytes: int = DEFAULT_MAX_FRAME
    transition_log: str | None = None

    def scheduler_config(self) -> MasterConfig:
        return MasterConfig(
            heartbeat_interval_ms=self.heartbeat_interval_ms,
            heartbeat_timeout_intervals=self.heartbeat_timeout_intervals,
            queue_wait_timeout_ms=self.queue_wait_timeout_ms,
            max_attempts=self.max_attempts,
            target_long_side=self.target_long_side,
            mode_default=Mode.parse(self.mode_default),
        )

    def merged(self, overrides: dict[str, Any]) -> "MasterSettings":
        """Apply the non-None entries of ``overrides``."""
        return replace(self, **{k: v for k, v in overrides.items() if v is not None})


KNOWN_KEYS = frozenset(f.name for f in fields(MasterSettings))


def load_master_settings(path: str | Path) -> MasterSettings:
    with open(path, "rb") as fh:
        doc = tomllib.load(fh)
    unknown = set(doc) - KNOWN_KEYS
    if unknown:
        raise ValueError(f"unknown master config keys: {', '.join(sorted(unknown))}")
    settings = MasterSettings(**doc)
    settings.scheduler_config()  # validates the mode string early
    return settings
