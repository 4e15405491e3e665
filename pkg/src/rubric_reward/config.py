"""Run configuration: which endpoints play which role, plus training defaults."""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigError
from .gateway import EndpointConfig, Gateway, endpoints_from_tables, load_endpoints, tomllib
from .grpo import GrpoConfig
from .rubrics import SynthesisConfig, default_threshold
from .store import Store


@dataclass
class RunConfig:
    endpoints: list[EndpointConfig]
    committee: list[str]
    rubric_writer: str
    judge: str
    evaluator: str
    likert_judge: str | None = None
    student: str | None = None
    consensus_threshold: int | str = "auto"
    max_items: int = 12
    grpo: GrpoConfig = field(default_factory=GrpoConfig)
    store: str = "store"
    seed: int = 0

    def __post_init__(self):
        if not self.committee:
            raise ConfigError("committee must name at least one endpoint")
        names = {e.name for e in self.endpoints}
        roles = [*self.committee, self.rubric_writer, self.judge, self.evaluator]
        roles += [r for r in (self.likert_judge, self.student) if r]
        missing = sorted({r for r in roles if r not in names})
        if missing:
            raise ConfigError(f"config names unknown endpoints: {', '.join(missing)}")
        if self.consensus_threshold != "auto":
            if not isinstance(self.consensus_threshold, int) or self.consensus_threshold < 1:
                raise ConfigError("consensus_threshold must be 'auto' or a positive integer")

    @property
    def threshold(self) -> int:
        if self.consensus_threshold == "auto":
            return default_threshold(len(self.committee))
        return int(self.consensus_threshold)

    def synthesis_config(self) -> SynthesisConfig:
        return SynthesisConfig(
            rubric_writer=self.rubric_writer,
            consensus_threshold=self.threshold,
            max_items=self.max_items,
            teacher_max_tokens=self.grpo.max_completion_tokens,
        )

    def open_store(self) -> Store:
        return Store(self.store)

    def gateway(self, store: Store | None = None) -> Gateway:
        return Gateway(self.endpoints, store=store)


def load_run_config(path: str | os.PathLike) -> RunConfig:
    path = Path(path)
    try:
        data = tomllib.loads(path.read_text(encoding="utf-8"))
    except (OSError, tomllib.TOMLDecodeError) as e:
        raise ConfigError(f"{path}: {e}") from e
    base = path.parent
    endpoints: list[EndpointConfig] = []
    if "endpoints_file" in data:
        endpoints += load_endpoints(base / data.pop("endpoints_file"))
    if "endpoints" in data:
        endpoints += endpoints_from_tables(data.pop("endpoints"), base, str(path))
    names = [e.name for e in endpoints]
    if len(names) != len(set(names)):
        raise ConfigError(f"{path}: duplicate endpoint names")
    try:
        grpo = GrpoConfig(**data.pop("grpo", {}))
    except TypeError as e:
        raise ConfigError(f"{path}: [grpo]: {e}") from e
    if "store" in data:
        data["store"] = str(base / data["store"])
    allowed = {f.name for f in fields(RunConfig)} - {"endpoints", "grpo"}
    unknown = set(data) - allowed
    if unknown:
        raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
    try:
        return RunConfig(endpoints=endpoints, grpo=grpo, **data)
    except TypeError as e:
        raise ConfigError(f"{path}: {e}") from e

