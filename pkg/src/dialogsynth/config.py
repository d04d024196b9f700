"""YAML run configuration shared by the CLI commands."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import yaml

from .errors import PreconditionError
from .gateway import BackendConfig

ENV_PREFIX = "DIALOGSYNTH"
BACKEND_SECTIONS = ("generator", "critic", "judge", "embedder")
_PATH_KEYS = ("ontology", "lexicon", "rules", "labels", "templates")
_KNOWN = set(BACKEND_SECTIONS) | set(_PATH_KEYS) | {
    "exemplars",
    "loop",
    "workers",
    "seed",
    "similarity_threshold",
    "temperature",
    "allowed_tags",
}


@dataclass
class RunConfig:
    generator: BackendConfig | None = None
    critic: BackendConfig | None = None
    judge: BackendConfig | None = None
    embedder: BackendConfig | None = None
    ontology: Path | None = None
    lexicon: Path | None = None
    rules: Path | None = None
    labels: Path | None = None
    templates: Path | None = None
    exemplars: list[Path] = field(default_factory=list)
    loop: dict[str, int] = field(default_factory=dict)
    allowed_tags: list[str] | None = None
    workers: int = 1
    seed: int = 0
    similarity_threshold: float = 0.8
    temperature: float = 0.7

    def __post_init__(self):
        if self.workers < 1:
            raise PreconditionError("workers must be >= 1")
        for key in _PATH_KEYS:
            p = getattr(self, key)
            if p is not None and not p.exists():
                raise PreconditionError(f"{key}: {p} does not exist")
        for p in self.exemplars:
            if not p.is_file():
                raise PreconditionError(f"exemplars: {p} does not exist")

    def backend(self, section: str) -> BackendConfig | None:
        return getattr(self, section)


def _env_backend(section: str) -> BackendConfig | None:
    prefix = f"{ENV_PREFIX}_{section.upper()}"
    if os.environ.get(f"{prefix}_ENDPOINT"):
        return BackendConfig.from_mapping({}, prefix)
    return None


def load_run_config(path: str | Path | None = None, overrides: Mapping[str, Any] | None = None) -> RunConfig:
    """Config file, then non-None ``overrides`` (CLI flags), then ``DIALOGSYNTH_<SECTION>_*`` env vars."""
    doc: dict[str, Any] = {}
    base = Path.cwd()
    if path is not None:
        path = Path(path)
        try:
            loaded = yaml.safe_load(path.read_text("utf-8"))
        except OSError as exc:
            raise PreconditionError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise PreconditionError(f"config {path} is not valid YAML: {exc}") from exc
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise PreconditionError(f"config {path} must be a mapping")
        doc = loaded
        base = path.parent
    unknown = set(doc) - _KNOWN
    if unknown:
        raise PreconditionError(f"unknown config key(s): {sorted(unknown)}")
    for k, v in (overrides or {}).items():
        if v is not None:
            doc[k] = v

    kwargs: dict[str, Any] = {}
    for section in BACKEND_SECTIONS:
        sub = doc.get(section)
        prefix = f"{ENV_PREFIX}_{section.upper()}"
        if sub is not None:
            if not isinstance(sub, dict):
                raise PreconditionError(f"{section} must be a mapping")
            kwargs[section] = BackendConfig.from_mapping(sub, prefix)
        else:
            kwargs[section] = _env_backend(section)

    def resolve(p: str) -> Path:
        q = Path(os.path.expanduser(p))
        return q if q.is_absolute() else base / q

    for key in _PATH_KEYS:
        if doc.get(key) is not None:
            kwargs[key] = resolve(str(doc[key]))
    ex = doc.get("exemplars") or []
    if isinstance(ex, str):
        ex = [ex]
    kwargs["exemplars"] = [resolve(str(p)) for p in ex]
    for key in ("loop", "allowed_tags", "workers", "seed", "similarity_threshold", "temperature"):
        if doc.get(key) is not None:
            kwargs[key] = doc[key]
    return RunConfig(**kwargs)
