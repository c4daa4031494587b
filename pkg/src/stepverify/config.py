"""Sectioned key-value run configuration with strict key validation."""

from __future__ import annotations

import configparser
import shlex
from dataclasses import dataclass, field, fields
from importlib import resources
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    """Unusable configuration: unknown keys, bad values, missing files."""


def resolve_path(value: str) -> str:
    """Resolve a path, letting ``pkg:`` prefixes point at bundled fixtures."""
    if value.startswith("pkg:"):
        return str(resources.files("stepverify") / value[len("pkg:") :])
    return value


@dataclass
class BackendsConfig:
    mode: str = "mock"  # mock | live
    mock_script: str = ""
    endpoint_url: str = ""
    api_key_env: str = "OPENAI_API_KEY"
    reasoning_model: str = "mock-reasoner"
    formalizer_model: str = "mock-formalizer"
    prover_model: str = "mock-prover"
    timeout_seconds: float = 60.0
    max_retries: int = 2
    backoff_seconds: float = 0.5
    max_concurrency: int = 8
    temperature: float = 0.7
    max_tokens: int = 1024


@dataclass
class PrmConfig:
    mode: str = "constant"  # constant | mock | remote
    constant_value: float = 1.0
    scores_file: str = ""
    endpoint_url: str = ""
    timeout_seconds: float = 60.0
    reduce: str = "last"  # last | min
    on_error: str = "fail"  # fail | fallback


@dataclass
class ReplConfig:
    mode: str = "fake"  # fake | live
    launch_command: str = ""
    project_root: str = ""
    init_commands: str = ""  # ';'-separated, run once per worker
    statement_timeout: float = 60.0
    proof_timeout: float = 120.0
    pool_size: int = 0  # 0 means one per physical core
    max_commands_per_worker: int = 200


@dataclass
class BudgetsConfig:
    formalize_attempts: int = 3
    prove_budget: int = 16


@dataclass
class ScoringConfig:
    alpha: float = 0.5
    strategy: str = "weighted_mul"
    majority_tie_break: str = "first"


@dataclass
class RunSection:
    seed: int = 0
    parallelism: int = 4
    decomposition: str = "heuristic"  # heuristic | llm
    out_dir: str = "runs/default"
    samples_per_problem: int = 5


@dataclass
class RunConfig:
    backends: BackendsConfig = field(default_factory=BackendsConfig)
    prm: PrmConfig = field(default_factory=PrmConfig)
    repl: ReplConfig = field(default_factory=ReplConfig)
    budgets: BudgetsConfig = field(default_factory=BudgetsConfig)
    scoring: ScoringConfig = field(default_factory=ScoringConfig)
    run: RunSection = field(default_factory=RunSection)

    def snapshot(self) -> dict[str, Any]:
        out: dict[str, Any] = {}
        for section_field in fields(self):
            section = getattr(self, section_field.name)
            out[section_field.name] = {
                f.name: getattr(section, f.name) for f in fields(section)
            }
        return out

    def identity(self) -> dict[str, Any]:
        """Config subset that determines run outputs.

        Resource and transport knobs (parallelism, pool sizing, retries,
        HTTP timeouts, output location) are excluded: two runs differing
        only in those produce identical records and should share a run id.
        """
        excluded = {
            ("backends", "api_key_env"),
            ("backends", "timeout_seconds"),
            ("backends", "max_retries"),
            ("backends", "backoff_seconds"),
            ("backends", "max_concurrency"),
            ("prm", "timeout_seconds"),
            ("repl", "pool_size"),
            ("repl", "max_commands_per_worker"),
            ("run", "parallelism"),
            ("run", "out_dir"),
        }
        full = self.snapshot()
        return {
            section: {
                key: value
                for key, value in body.items()
                if (section, key) not in excluded
            }
            for section, body in full.items()
        }

    def repl_launch_command(self) -> list[str]:
        if self.repl.mode == "fake":
            from .repl import fake_launch_command

            return fake_launch_command()
        if not self.repl.launch_command:
            raise ConfigError("repl.mode is 'live' but repl.launch_command is empty")
        return shlex.split(self.repl.launch_command)


_SECTIONS = {
    "backends": BackendsConfig,
    "prm": PrmConfig,
    "repl": ReplConfig,
    "budgets": BudgetsConfig,
    "scoring": ScoringConfig,
    "run": RunSection,
}


def _coerce(raw: str, target_type: type) -> Any:
    if target_type is bool:
        lowered = raw.strip().lower()
        if lowered in ("true", "yes", "1", "on"):
            return True
        if lowered in ("false", "no", "0", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    return target_type(raw)


def load_config(path: str | Path | None) -> RunConfig:
    """Parse an INI-style config into a RunConfig.

    Unknown sections or keys are rejected outright rather than ignored; a
    missing path yields all defaults.
    """
    config = RunConfig()
    if path is None:
        return config
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read(path, encoding="utf-8")
    except configparser.Error as exc:
        raise ConfigError(f"could not parse {path}: {exc}") from exc
    for section_name in parser.sections():
        if section_name not in _SECTIONS:
            raise ConfigError(f"unknown config section [{section_name}]")
        section = getattr(config, section_name)
        known = {f.name for f in fields(type(section))}
        for key, raw in parser.items(section_name):
            if key not in known:
                raise ConfigError(f"unknown key {key!r} in section [{section_name}]")
            current = getattr(section, key)
            try:
                setattr(section, key, _coerce(raw, type(current)))
            except (TypeError, ValueError) as exc:
                raise ConfigError(
                    f"bad value for {section_name}.{key}: {raw!r} ({exc})"
                ) from exc
    return config


def apply_overrides(config: RunConfig, overrides: dict[str, Any]) -> None:
    """Apply flag values (dotted section.key names) over file values."""
    for dotted, value in overrides.items():
        if value is None:
            continue
        section_name, _, key = dotted.partition(".")
        section = getattr(config, section_name)
        setattr(section, key, value)
