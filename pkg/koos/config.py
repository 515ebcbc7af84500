"""Runtime configuration for the koos grading pipeline."""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass

import psutil
from dotenv import load_dotenv

load_dotenv(dotenv_path=os.getenv("KOOS_ENV_FILE", ".env"))

_LOG_LEVELS = {"DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"}


def _default_threads() -> int:
    return psutil.cpu_count(logical=False) or 1


@dataclass(frozen=True)
class RuntimeConfig:
    """Parallelism and logging knobs; none of them changes a result byte."""

    threads_raw: str = os.getenv("KOOS_THREADS", "")
    log_level: str = os.getenv("KOOS_LOG_LEVEL", "INFO").strip().upper()

    @property
    def threads(self) -> int:
        if not self.threads_raw.strip():
            return _default_threads()
        return int(self.threads_raw)

    @property
    def log_level_value(self) -> int:
        return getattr(logging, self.log_level)


runtime_config = RuntimeConfig()


def validate_config(config: RuntimeConfig | None = None) -> None:
    config = config or runtime_config
    raw = config.threads_raw.strip()
    if raw:
        try:
            threads = int(raw)
        except ValueError as exc:
            raise ValueError(
                f"KOOS_THREADS must be a positive integer; got {raw!r}"
            ) from exc
        if threads < 1:
            raise ValueError(f"KOOS_THREADS must be a positive integer; got {raw!r}")
    if config.log_level not in _LOG_LEVELS:
        raise ValueError(
            f"KOOS_LOG_LEVEL must be one of {sorted(_LOG_LEVELS)}; "
            f"got {config.log_level!r}"
        )
