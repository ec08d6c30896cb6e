import logging
import os
from collections.abc import Mapping
from pathlib import Path
from typing import Any, Literal

import pydantic
import yaml
from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field

from prmforge.errors import ValidationError
from prmforge.models import AggregationMethod

__all__ = [
    "BackendSettings",
    "ENV_API_BASE",
    "ENV_API_KEY",
    "RunConfig",
    "SamplingParams",
    "ScorerSettings",
    "SearchSettings",
    "load_config",
]

logger = logging.getLogger(__name__)

ENV_API_BASE = "PRM_FORGE_API_BASE"
ENV_API_KEY = "PRM_FORGE_API_KEY"

DEFAULT_SYSTEM_PROMPT = (
    "Solve the problem step by step. Wrap every reasoning step in "
    "<step></step> tags and the final answer in <answer></answer> tags."
)


class SamplingParams(BaseModel):
    """Sampling settings sent with every generation request."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    temperature: float = Field(1.0, ge=0.0)
    top_k: int = Field(50, ge=1)
    top_p: float = Field(0.9, gt=0.0, le=1.0)
    max_tokens: int = Field(2048, ge=1)
    seed: int | None = None


class BackendSettings(BaseModel):
    """Where completions come from: a chat-completion endpoint or the mock."""

    model_config = ConfigDict(extra="forbid")

    kind: Literal["remote", "mock"] = "remote"
    api_base: str | None = None
    api_key_env: str = ENV_API_KEY
    api_key: str | None = Field(None, repr=False)
    model: str = "policy"
    mock_script: Path | None = None
    timeout: float = Field(120.0, gt=0.0)
    max_retries: int = Field(4, ge=1)
    retry_base_delay: float = Field(1.0, ge=0.0)
    top_k_supported: bool = True
    system_prompt: str = DEFAULT_SYSTEM_PROMPT


class ScorerSettings(BaseModel):
    """Which step scorer the reranker uses."""

    model_config = ConfigDict(extra="forbid")

    kind: Literal["oracle", "constant", "random", "remote"] = "oracle"
    url: str | None = None
    constant: float = Field(0.5, ge=0.0, le=1.0)
    timeout: float = Field(60.0, gt=0.0)
    max_retries: int = Field(4, ge=1)


class SearchSettings(BaseModel):
    """Per-problem search limits and selection constants."""

    model_config = ConfigDict(extra="forbid")

    max_search_steps: int = Field(200, ge=0)
    max_rollouts: int = Field(1000, ge=0)
    k: int = Field(8, ge=1)
    c_puct: float = Field(0.125, ge=0.0)
    pool_on_revisit: bool = True


class RunConfig(BaseModel):
    """Everything one command invocation needs."""

    model_config = ConfigDict(extra="forbid")

    backend: BackendSettings = Field(default_factory=BackendSettings)
    sampling: SamplingParams = Field(default_factory=SamplingParams)
    search: SearchSettings = Field(default_factory=SearchSettings)
    scorer: ScorerSettings = Field(default_factory=ScorerSettings)
    workers: int = Field(1, ge=1)
    rollout_workers: int = Field(1, ge=1)
    seed: int = 0
    problems: Path | None = None
    out: Path | None = None
    report_out: Path | None = None
    tree_out: Path | None = None
    candidates: Path | None = None
    candidates_out: Path | None = None
    n: list[int] = Field(default_factory=lambda: [16])
    methods: list[AggregationMethod] = Field(
        default_factory=lambda: list(AggregationMethod)
    )
    label_mode: Literal["soft", "hard"] = "soft"
    hard_threshold: float = Field(0.0, ge=0.0, lt=1.0)
    progress_interval: float = Field(30.0, gt=0.0)
    log_level: str = "INFO"


def _deep_merge(base: dict[str, Any], layer: Mapping[str, Any]) -> dict[str, Any]:
    """Overlay ``layer`` on ``base``; nested mappings merge, None values are skipped."""
    merged = dict(base)
    for key, value in layer.items():
        if value is None:
            continue
        if isinstance(value, Mapping) and isinstance(merged.get(key), Mapping):
            merged[key] = _deep_merge(dict(merged[key]), value)
        else:
            merged[key] = value
    return merged


def _env_layer(environ: Mapping[str, str]) -> dict[str, Any]:
    """Settings taken from the environment, shaped like a config file."""
    backend: dict[str, Any] = {}
    if api_base := environ.get(ENV_API_BASE, "").strip():
        backend["api_base"] = api_base
    return {"backend": backend} if backend else {}


def load_config(
    path: Path | None = None,
    overrides: Mapping[str, Any] | None = None,
    environ: Mapping[str, str] | None = None,
) -> RunConfig:
    """
    Build a RunConfig from, in increasing precedence: built-in defaults, the
    environment, the YAML config file and explicit overrides (command-line
    flags). ``None`` values in a layer never override a lower layer.

    When ``environ`` is not given, a ``.env`` file is loaded into the process
    environment first.

    Raises:
        ValidationError: If the file cannot be read or the merged settings are
            invalid.
    """
    if environ is None:
        load_dotenv()
        environ = os.environ

    layers: dict[str, Any] = _env_layer(environ)

    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                from_file = yaml.safe_load(fh) or {}
        except (OSError, yaml.YAMLError) as err:
            raise ValidationError(f"cannot read config file {path}: {err}") from err
        if not isinstance(from_file, Mapping):
            raise ValidationError(f"config file {path} must hold a mapping")
        layers = _deep_merge(layers, from_file)

    layers = _deep_merge(layers, overrides or {})

    try:
        config = RunConfig.model_validate(layers)
    except pydantic.ValidationError as err:
        raise ValidationError(str(err)) from err

    if config.backend.api_key is None:
        if api_key := environ.get(config.backend.api_key_env, "").strip():
            config.backend.api_key = api_key

    logger.debug("Loaded configuration", extra={"config_file": str(path or "")})
    return config
