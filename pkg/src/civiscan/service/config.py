"""Key-value service configuration.

Plain `key = value` lines, `#` comments. Proposer settings use a flat
`proposer.` prefix. CIVISCAN_DATA_DIR overrides the configured data
directory.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields
from pathlib import Path

from ..regions import ProposerSettings, serving_proposer
from ..workflow import DEFAULT_TRIAGE_THRESHOLD


class ConfigError(ValueError):
    pass


@dataclass
class ServiceConfig:
    data_dir: str = "./data"
    checkpoint: str = ""
    rule_table: str = ""
    templates_dir: str | None = None
    ui_dir: str | None = None
    threshold: float = DEFAULT_TRIAGE_THRESHOLD
    workers: int = 1
    host: str = "127.0.0.1"
    port: int = 8321
    blur_sigma: float = 1.0
    standard_size: int = 256
    pipeline_delay_ms: int = 0  # artificial per-case delay, for load experiments
    proposer: ProposerSettings = field(default_factory=serving_proposer)

    def resolve(self, base: Path) -> "ServiceConfig":
        if os.environ.get("CIVISCAN_DATA_DIR"):
            self.data_dir = os.environ["CIVISCAN_DATA_DIR"]
        self.data_dir = str((base / self.data_dir).resolve())
        if self.checkpoint:
            self.checkpoint = str((base / self.checkpoint).resolve())
        if self.rule_table:
            self.rule_table = str((base / self.rule_table).resolve())
        if self.templates_dir:
            self.templates_dir = str((base / self.templates_dir).resolve())
        if self.ui_dir:
            self.ui_dir = str((base / self.ui_dir).resolve())
        return self


def _set_typed(obj, name, raw, where):
    for f in fields(obj):
        if f.name == name:
            current = getattr(obj, name)
            caster = type(current) if isinstance(current, (int, float, str)) and not isinstance(current, bool) else None
            try:
                value = caster(raw) if caster else raw
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"{where}: bad value for {name}: {raw!r}") from exc
            setattr(obj, name, value)
            return
    raise ConfigError(f"{where}: unknown setting {name!r}")


def load_config(path) -> ServiceConfig:
    path = Path(path)
    cfg = ServiceConfig()
    for line_no, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{line_no}: expected key = value")
        key, _, raw = line.partition("=")
        key = key.strip()
        raw = raw.strip()
        where = f"{path}:{line_no}"
        if key.startswith("proposer."):
            _set_typed(cfg.proposer, key[len("proposer.") :], raw, where)
        elif key in ("templates_dir", "ui_dir"):
            setattr(cfg, key, raw or None)
        else:
            _set_typed(cfg, key, raw, where)
    return cfg.resolve(path.parent)
