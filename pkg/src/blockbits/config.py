"""Run configuration: defaults, strict JSON loading, flag overrides."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .allocator import SearchConfig
from .errors import ConfigError
from .quantizer import QuantConfig
from .toymodel import ModelSpec


@dataclass
class RunConfig:
    # model
    vocab: int = 256
    d_model: int = 64
    n_layers: int = 8
    n_heads: int = 4
    d_ff: int = 128
    seq_len: int = 64
    model_seed: int = 7
    # data
    corpus_len: int = 200_000
    corpus_seed: int = 0
    corpus_path: str | None = None
    calib_seqs: int = 128
    calib_len: int = 64
    calib_seed: int = 1
    # pretraining
    pretrain_steps: int = 2000
    lr: float = 1.0
    train_batch: int = 4
    train_seed: int = 0
    checkpoint: str | None = None
    # quantization
    group_size: int = 32
    bit_min: int = 1
    bit_max: int = 8
    symmetric: bool = False
    block_rows: int = 16
    block_cols: int = 32
    # search
    budget: float = 2.5
    sweep: list = field(default_factory=lambda: [2.0, 2.5, 3.0, 3.5, 4.0])
    gamma0: float = 0.05
    gamma_t: float = 0.02
    max_iters: int = 200
    batch_seqs: int = 8
    search_seed: int = 0
    reorder: bool = True
    adaptive: bool = True
    signed_up: bool = True
    # output
    out_dir: str = "runs/default"

    def validate(self) -> "RunConfig":
        if not 0 <= self.bit_min <= self.bit_max <= 8:
            raise ConfigError(f"need 0 <= bit_min <= bit_max <= 8, got {self.bit_min}..{self.bit_max}", key="bit_min")
        for key in ("budget",):
            if not self.bit_min <= getattr(self, key) <= self.bit_max:
                raise ConfigError(f"{key}={getattr(self, key)} outside [{self.bit_min}, {self.bit_max}]", key=key)
        for b in self.sweep:
            if not self.bit_min <= b <= self.bit_max:
                raise ConfigError(f"sweep budget {b} outside [{self.bit_min}, {self.bit_max}]", key="sweep")
        if not 0 < self.gamma_t <= self.gamma0 <= 1:
            raise ConfigError("need 0 < gamma_t <= gamma0 <= 1", key="gamma_t")
        if self.block_cols % self.group_size:
            raise ConfigError(f"block_cols={self.block_cols} is not a multiple of group_size={self.group_size}",
                              key="block_cols")
        for key in ("calib_seqs", "calib_len", "batch_seqs", "group_size", "block_rows", "block_cols"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be positive", key=key)
        if self.calib_len > self.seq_len:
            raise ConfigError(f"calib_len={self.calib_len} exceeds seq_len={self.seq_len}", key="calib_len")
        return self

    def model_spec(self) -> ModelSpec:
        return ModelSpec(self.vocab, self.d_model, self.n_layers, self.n_heads, self.d_ff, self.seq_len,
                         self.model_seed)

    def quant_config(self) -> QuantConfig:
        return QuantConfig(self.group_size, self.bit_min, self.bit_max, 16, self.symmetric)

    def search_config(self) -> SearchConfig:
        return SearchConfig(self.gamma0, self.gamma_t, self.bit_min, self.bit_max, self.max_iters,
                            self.batch_seqs, self.adaptive, self.signed_up, self.search_seed)

    def to_dict(self) -> dict:
        return asdict(self)


FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key, value):
    default = getattr(RunConfig(), key)
    kind = FIELD_TYPES[key]
    try:
        if isinstance(default, bool):
            if isinstance(value, str):
                if value.lower() in ("1", "true", "yes", "on"):
                    return True
                if value.lower() in ("0", "false", "no", "off"):
                    return False
                raise ValueError(value)
            if not isinstance(value, bool):
                raise ValueError(value)
            return value
        if isinstance(default, list):
            if isinstance(value, str):
                value = [v for v in value.replace(",", " ").split()]
            return [float(v) for v in value]
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if isinstance(default, float):
            return float(value)
        if "str" in str(kind):
            return None if value is None else str(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {key!r}: {value!r}", key=key) from exc
    return value


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then the JSON file (if any), then ``overrides``; unknown keys are errors."""
    values = {}
    if path is not None:
        text = Path(path).read_text()
        if text.strip():
            try:
                raw = json.loads(text)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"malformed JSON in {path}: {exc}") from exc
            if not isinstance(raw, dict):
                raise ConfigError(f"{path} must contain a JSON object")
            values.update(raw)
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    for key in values:
        if key not in FIELD_TYPES:
            raise ConfigError(f"unknown config key {key!r}", key=key)
    cfg = RunConfig(**{k: _coerce(k, v) for k, v in values.items()})
    return cfg.validate()
