"""Key=value run configuration: file parsing, flag overrides, resolved output.

Precedence is flags > config file > defaults. Unknown keys are rejected so
typos fail loudly, and every run writes its fully resolved configuration
next to its outputs for reproducibility.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .common import UsageError


def parse_kv_file(path: str | Path) -> dict[str, str]:
    path = Path(path)
    if not path.exists():
        raise UsageError(f"config file not found: {path}")
    out: dict[str, str] = {}
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out


def coerce(value: str, default: Any) -> Any:
    if isinstance(default, bool):
        lowered = value.lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"expected a boolean, got {value!r}")
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    if isinstance(default, tuple):
        parts = value.replace(",", " ").split()
        return tuple(type(default[0])(p) for p in parts)
    return value


@dataclass
class RunConfig:
    """Resolved configuration of one command invocation."""

    command: str
    values: dict[str, Any]
    seed: int = 0

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def write_resolved(self, out_dir: str | Path) -> Path:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / "resolved_config.txt"
        lines = [f"command={self.command}", f"seed={self.seed}"]
        for key in sorted(self.values):
            lines.append(f"{key}={self.values[key]}")
        path.write_text("\n".join(lines) + "\n")
        return path


def resolve(command: str, defaults: dict[str, Any], config_file: str | None,
            overrides: dict[str, Any], seed: int = 0) -> RunConfig:
    """Merge defaults, an optional key=value file, and explicit flag overrides."""
    values = dict(defaults)
    if config_file:
        for key, raw in parse_kv_file(config_file).items():
            if key == "seed":
                seed = int(raw)
                continue
            if key not in defaults:
                raise UsageError(f"unknown config key {key!r} for command {command!r}; "
                                 f"known keys: {', '.join(sorted(defaults))}")
            values[key] = coerce(raw, defaults[key])
    for key, value in overrides.items():
        if value is None:
            continue
        if key not in defaults:
            raise UsageError(f"unknown option {key!r} for command {command!r}")
        values[key] = value
    return RunConfig(command=command, values=values, seed=seed)
