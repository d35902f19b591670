"""Flat ``key=value`` run configuration shared by every CLI command.

Keys are the fields of :class:`OptimConfig`, :class:`ModelConfig` and
:class:`FinetuneConfig` (the latter prefixed ``finetune_``), plus loss
switches and protocol parameters. Tuples are written comma-separated.
Blank lines and ``#`` comments are ignored; unknown keys are an error.
"""

from __future__ import annotations

import dataclasses
import json
from typing import Any, Dict, Iterable, Optional

from .evaluation import FinetuneConfig
from .exceptions import PreconditionError
from .model import ModelConfig
from .train import LOSS_COMPONENTS, OptimConfig

PROTOCOL_DEFAULTS: Dict[str, Any] = {
    "loss": LOSS_COMPONENTS,
    "n_pos": 300,
    "n_neg": 300,
    "pair_seed": 7,
    "ranks": (1, 5, 10),
    "ablation_seeds": (7, 8, 9),
}


def _defaults() -> Dict[str, Any]:
    out: Dict[str, Any] = {}
    for f in dataclasses.fields(OptimConfig):
        out[f.name] = getattr(OptimConfig(), f.name)
    for f in dataclasses.fields(ModelConfig):
        out[f.name] = getattr(ModelConfig(), f.name)
    for f in dataclasses.fields(FinetuneConfig):
        out["finetune_" + f.name] = getattr(FinetuneConfig(), f.name)
    out.update(PROTOCOL_DEFAULTS)
    return out


DEFAULTS = _defaults()


def _coerce(key: str, raw: Any) -> Any:
    default = DEFAULTS[key]
    if not isinstance(raw, str):
        return tuple(raw) if isinstance(default, tuple) else type(default)(raw)
    text = raw.strip()
    try:
        if isinstance(default, tuple):
            parts = [p.strip() for p in text.split(",") if p.strip()]
            kind = type(default[0]) if default else str
            return tuple(kind(p) for p in parts)
        if isinstance(default, bool):
            if text.lower() not in ("true", "false", "1", "0"):
                raise ValueError(text)
            return text.lower() in ("true", "1")
        return type(default)(text)
    except ValueError:
        raise PreconditionError(f"config key {key!r}: cannot parse {raw!r} as {type(default).__name__}") from None


@dataclasses.dataclass
class RunConfig:
    values: Dict[str, Any] = dataclasses.field(default_factory=lambda: dict(DEFAULTS))

    def __post_init__(self):
        merged = dict(DEFAULTS)
        for k, v in self.values.items():
            if k not in DEFAULTS:
                raise PreconditionError(f"unknown config key {k!r}")
            merged[k] = _coerce(k, v)
        self.values = merged
        # construct once so invariants fail early
        self.optim()
        self.model()
        self.finetune()

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def updated(self, overrides: Dict[str, Any]) -> "RunConfig":
        return RunConfig({**self.values, **overrides})

    def optim(self) -> OptimConfig:
        return OptimConfig(**{f.name: self.values[f.name] for f in dataclasses.fields(OptimConfig)})

    def model(self) -> ModelConfig:
        return ModelConfig(**{f.name: self.values[f.name] for f in dataclasses.fields(ModelConfig)})

    def finetune(self) -> FinetuneConfig:
        return FinetuneConfig(**{f.name: self.values["finetune_" + f.name] for f in dataclasses.fields(FinetuneConfig)})

    def to_dict(self) -> Dict[str, Any]:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in sorted(self.values.items())}

    def to_text(self) -> str:
        lines = []
        for k, v in sorted(self.values.items()):
            shown = ",".join(str(x) for x in v) if isinstance(v, tuple) else str(v)
            lines.append(f"{k}={shown}")
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def parse_pairs(lines: Iterable[str], where: str = "config") -> Dict[str, str]:
    out: Dict[str, str] = {}
    for lineno, line in enumerate(lines, 1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise PreconditionError(f"{where}:{lineno}: expected key=value, got {line.strip()!r}")
        key, value = (s.strip() for s in text.split("=", 1))
        if key not in DEFAULTS:
            raise PreconditionError(f"{where}:{lineno}: unknown config key {key!r}")
        out[key] = value
    return out


def load_run_config(path: Optional[str] = None, overrides: Iterable[str] = ()) -> RunConfig:
    """Defaults, then the file at ``path``, then ``key=value`` override strings."""
    values: Dict[str, Any] = {}
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            values.update(parse_pairs(fh, where=path))
    values.update(parse_pairs(overrides, where="--set"))
    return RunConfig(values)
