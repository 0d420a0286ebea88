"""Run configuration: a single versioned JSON file, strictly validated.

Unknown keys are rejected so typos fail loudly. CLI flags override file
values; the effective config is snapshotted into every run record.
"""

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .attacks import AttackConfig
from .corpus import TASKS
from .errors import UsageError

SCHEMA_VERSION = 1

OUTPUT_ROOT_ENV = "DYNVLA_OUTPUT_ROOT"


@dataclass
class HarnessConfig:
    images: int = 128
    runs: int = 3
    run_seeds: list | None = None
    task: str = "classification"
    match_mode: str = "exact"
    target_text: str = "unknown"
    methods: list = field(default_factory=lambda: ["pgd", "dynvla"])
    prompt_seed: int = 33
    jobs: int = 1
    compute_threads: int = 1

    def validate(self):
        if self.images < 1:
            raise UsageError("harness.images must be >= 1")
        if self.runs < 1:
            raise UsageError("harness.runs must be >= 1")
        if self.task not in TASKS:
            raise UsageError(f"harness.task must be one of {TASKS}, got {self.task!r}")
        if self.match_mode not in ("exact", "first_sentence"):
            raise UsageError(f"harness.match_mode must be exact|first_sentence")
        if self.jobs < 1 or self.compute_threads < 1:
            raise UsageError("harness.jobs and harness.compute_threads must be >= 1")


@dataclass
class CorpusConfig:
    size: int = 3000
    seed: int = 7


@dataclass
class RunConfig:
    version: int = SCHEMA_VERSION
    output_root: str = "runs"
    zoo_dir: str = "zoo"
    zoo_manifest: str | None = None  # path; None = built-in default manifest
    epochs: int = 30
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    harness: HarnessConfig = field(default_factory=HarnessConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)

    def validate(self):
        if self.version != SCHEMA_VERSION:
            raise UsageError(
                f"config version {self.version} unsupported; expected {SCHEMA_VERSION}"
            )
        if self.epochs < 1:
            raise UsageError("epochs must be >= 1")
        self.harness.validate()

    def resolved_output_root(self) -> Path:
        return Path(os.environ.get(OUTPUT_ROOT_ENV, self.output_root))

    def snapshot(self) -> dict:
        return dataclasses.asdict(self)


def _build(cls, payload: dict, path: str):
    field_names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(payload) - field_names
    if unknown:
        raise UsageError(f"unknown config keys at {path}: {sorted(unknown)}")
    return payload


def load_run_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Load and validate a config file; apply flat overrides like
    {"attack.steps": 100}. Missing file fields keep their defaults."""
    payload = {}
    if path is not None:
        try:
            payload = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise UsageError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(payload, dict):
        raise UsageError("config root must be a JSON object")

    _build(RunConfig, payload, "$")
    corpus_payload = _build(CorpusConfig, payload.get("corpus", {}), "$.corpus")
    harness_payload = _build(HarnessConfig, payload.get("harness", {}), "$.harness")
    attack_payload = _build_attack(payload.get("attack", {}))

    cfg = RunConfig(
        **{
            k: v
            for k, v in payload.items()
            if k not in ("corpus", "harness", "attack")
        },
        corpus=CorpusConfig(**corpus_payload),
        harness=HarnessConfig(**harness_payload),
        attack=attack_payload,
    )
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    cfg.validate()
    return cfg


def _build_attack(payload: dict) -> AttackConfig:
    field_names = {f.name for f in dataclasses.fields(AttackConfig)}
    unknown = set(payload) - field_names
    if unknown:
        raise UsageError(f"unknown config keys at $.attack: {sorted(unknown)}")
    coerced = dict(payload)
    for key in ("kernel_size_range", "kernel_sigma_range"):
        if key in coerced and isinstance(coerced[key], list):
            coerced[key] = tuple(coerced[key])
    from .errors import ValidationError

    try:
        return AttackConfig(**coerced)
    except ValidationError as exc:
        raise UsageError(f"invalid attack config: {exc}") from None


def apply_overrides(cfg: RunConfig, overrides: dict) -> RunConfig:
    """Dotted-path overrides, e.g. {"attack.steps": 50, "harness.jobs": 2}.
    None values mean "not overridden"."""
    from .errors import ValidationError

    attack_updates = {}
    for dotted, value in overrides.items():
        if value is None:
            continue
        parts = dotted.split(".")
        if parts[0] == "attack" and len(parts) == 2:
            attack_updates[parts[1]] = value
        elif len(parts) == 2 and hasattr(cfg, parts[0]) and hasattr(getattr(cfg, parts[0]), parts[1]):
            setattr(getattr(cfg, parts[0]), parts[1], value)
        elif len(parts) == 1 and parts[0] != "attack" and hasattr(cfg, parts[0]):
            setattr(cfg, parts[0], value)
        else:
            raise UsageError(f"unknown config path {dotted!r}")
    if attack_updates:
        try:
            cfg.attack = dataclasses.replace(cfg.attack, **attack_updates)
        except (ValidationError, TypeError) as exc:
            raise UsageError(f"invalid attack override: {exc}") from None
    return cfg
