"""Flat key = value config files and CLI override plumbing.

A config file is plain text: one `key = value` per line, '#' comments, no
sections.  Keys use the same names as the CLI long options (dashes become
underscores).  Precedence is CLI flag > config file > built-in default.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .agent import MODES, AgentConfig
from .latent import EncoderConfig
from .priors import PriorConfig
from .shield import ShieldConfig


def read_config_file(path) -> dict[str, str]:
    values: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(
                    f"{path}:{lineno}: expected 'key = value', got {raw!r}")
            key, value = line.split("=", 1)
            values[key.strip().replace("-", "_")] = value.strip()
    return values


def resolve(cli_value, file_values: dict[str, str], key: str, convert,
            default):
    """Single-option precedence: CLI beats file beats default."""
    if cli_value is not None:
        return cli_value
    if key in file_values:
        return convert(file_values[key])
    return default


def parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def parse_int_list(text: str) -> list[int]:
    return [int(tok) for tok in text.replace(";", ",").split(",") if tok]


def parse_str_list(text: str) -> list[str]:
    return [tok.strip() for tok in text.replace(";", ",").split(",")
            if tok.strip()]


@dataclass
class ExperimentConfig:
    """Fully resolved description of one `run` invocation."""

    map_path: str
    modes: list[str]
    seeds: list[int]
    steps: int
    outdir: str
    qp_path: str | None = None
    encoder_path: str | None = None
    workers: int = 1
    agent: AgentConfig = field(default_factory=AgentConfig)
    shield: ShieldConfig = field(default_factory=ShieldConfig)

    def validate(self) -> None:
        if not self.seeds:
            raise ValueError("seed list must not be empty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ValueError("seed list has duplicates")
        for mode in self.modes:
            if mode not in MODES:
                raise ValueError(f"unknown mode {mode!r}; pick from {MODES}")
        if not self.modes:
            raise ValueError("mode list must not be empty")
        if self.workers < 1:
            raise ValueError("workers must be positive")
        self.agent.validate()
        if self.shield.sample_size < 1:
            raise ValueError("shield sample size must be positive")
        if self.shield.buffer_capacity < 1:
            raise ValueError("shield buffer capacity must be positive")
        needs_prior = any(m != "vanilla" for m in self.modes)
        if needs_prior and self.qp_path is None:
            raise ValueError("shielded modes need --qp")
        if "state-checked-priors" in self.modes and self.encoder_path is None:
            raise ValueError("state-checked-priors needs --encoder")


def provenance(command: str, resolved: dict) -> dict:
    """Header fields embedded into every output file of a command."""
    fields = {"tool": "lavashield", "command": command}
    for key in sorted(resolved):
        value = resolved[key]
        if isinstance(value, (list, tuple)):
            value = ",".join(str(v) for v in value)
        fields[key] = value
    return fields


__all__ = [
    "AgentConfig", "EncoderConfig", "ExperimentConfig", "PriorConfig",
    "ShieldConfig", "parse_bool", "parse_int_list", "parse_str_list",
    "provenance", "read_config_file", "resolve",
]
