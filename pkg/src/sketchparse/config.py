"""Training configuration and its flat ``key = value`` file format."""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, fields

from .data import task_kind
from .sketch import CODE, LAMBDA, SQL


@dataclass
class TrainConfig:
    kind: str = LAMBDA
    n: int | None = None            # 250, or 300 for SQL (column vectors need n % 4 == 0)
    emb: int = 150
    dropout: float = 0.3
    eps: float | None = None        # label smoothing; 0.1 for lambda, 0 otherwise
    lr: float = 0.005
    batch_size: int | None = None   # 200 for SQL, 64 otherwise
    scorer_hidden: int = 64
    max_epochs: int = 100
    patience: int | None = 5        # epochs without dev improvement; None disables
    target_acc: float = 1.0         # stop once dev exact match reaches this
    seed: int = 1
    rho: float = 0.95
    rms_eps: float = 1e-8
    clip: float = 5.0
    min_freq: int = 1
    tgt_min_freq: int | None = None
    max_len: int = 100
    parent_feed: bool = True
    copy: bool | None = None        # defaults to on for code only
    sketch_encoder: bool = True
    table_aware: bool = True
    onestage: bool = False
    use_pos: bool = True

    def resolved(self) -> "TrainConfig":
        c = dataclasses.replace(self, kind=task_kind(self.kind))
        if c.n is None:
            c.n = 300 if c.kind == SQL else 250
        if c.eps is None:
            c.eps = 0.1 if c.kind == LAMBDA else 0.0
        if c.batch_size is None:
            c.batch_size = 200 if c.kind == SQL else 64
        if c.copy is None:
            c.copy = c.kind == CODE
        if c.n % 2:
            raise ValueError("hidden size n must be even")
        if c.kind == SQL and c.n % 4:
            raise ValueError("SQL models need n divisible by 4")
        if not 0 <= c.dropout < 1 or not 0 <= c.eps < 1:
            raise ValueError("dropout and eps must lie in [0, 1)")
        return c

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


def _convert(field, raw: str):
    raw = raw.strip()
    if raw.lower() in ("none", ""):
        return None
    tp = str(field.type)
    if "bool" in tp:
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{field.name}: not a boolean: {raw!r}")
    if "int" in tp:
        return int(raw)
    if "float" in tp:
        return float(raw)
    return raw


def parse_config_text(text: str) -> dict:
    """Parse ``key = value`` lines (``#`` comments allowed) into typed values."""
    cp = configparser.ConfigParser(inline_comment_prefixes=("#",))
    cp.read_string("[config]\n" + text)
    by_name = {f.name: f for f in fields(TrainConfig)}
    out = {}
    for key, raw in cp["config"].items():
        if key not in by_name:
            raise ValueError(f"unknown config key {key!r}")
        out[key] = _convert(by_name[key], raw)
    return out


def load_config(path) -> dict:
    with open(path, encoding="utf-8") as f:
        return parse_config_text(f.read())


def dump_config(cfg: TrainConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in cfg.to_dict().items())
