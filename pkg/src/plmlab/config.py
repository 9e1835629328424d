"""Model configuration records and presets, loadable from JSON."""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass
from pathlib import Path

ATTENTION_KINDS = ("mla", "gqa", "mqa", "mha")
ACTIVATIONS = ("relu2", "swiglu")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    """Architectural hyperparameters of a decoder-only model.

    Per-head widths: ``d_nope`` is the content part and ``d_rope`` the rotary
    part, so the attention head dimension is ``d_nope + d_rope`` for both MLA
    and GQA.  GQA applies RoPE across the whole head.
    """

    n_layers: int
    d_model: int
    n_heads: int
    n_kv_heads: int
    attention_kind: str
    d_nope: int
    d_rope: int
    kv_rank: int
    d_ffn: int
    vocab_size: int
    max_seq_len: int
    activation: str = "relu2"
    q_rank: int | None = None
    tie_embeddings: bool = True

    def __post_init__(self):
        validate(self)

    @property
    def d_head(self) -> int:
        return self.d_nope + self.d_rope

    @property
    def is_mla(self) -> bool:
        return self.attention_kind == "mla"

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def validate(cfg: ModelConfig) -> None:
    for name in ("n_layers", "d_model", "n_heads", "n_kv_heads", "d_nope", "d_ffn",
                 "vocab_size", "max_seq_len"):
        v = getattr(cfg, name)
        if not isinstance(v, int) or isinstance(v, bool) or v <= 0:
            raise ConfigError(f"{name} must be a positive integer, got {v!r}")
    if not isinstance(cfg.d_rope, int) or cfg.d_rope < 0 or cfg.d_rope % 2:
        raise ConfigError(f"d_rope must be a non-negative even integer, got {cfg.d_rope!r}")
    if cfg.attention_kind not in ATTENTION_KINDS:
        raise ConfigError(f"attention_kind must be one of {ATTENTION_KINDS}")
    if cfg.activation not in ACTIVATIONS:
        raise ConfigError(f"activation must be one of {ACTIVATIONS}")
    if cfg.attention_kind == "mla":
        if not isinstance(cfg.kv_rank, int) or cfg.kv_rank <= 0:
            raise ConfigError("mla requires kv_rank > 0")
        if cfg.d_rope <= 0:
            raise ConfigError("mla requires d_rope > 0")
        if cfg.q_rank is not None and (not isinstance(cfg.q_rank, int) or cfg.q_rank <= 0):
            raise ConfigError("q_rank must be a positive integer or null")
    else:
        if cfg.n_heads % cfg.n_kv_heads:
            raise ConfigError("n_heads must be divisible by n_kv_heads")
        if cfg.attention_kind == "mqa" and cfg.n_kv_heads != 1:
            raise ConfigError("mqa requires n_kv_heads = 1")
        if cfg.attention_kind == "mha" and cfg.n_kv_heads != cfg.n_heads:
            raise ConfigError("mha requires n_kv_heads = n_heads")
        if cfg.d_head % 2:
            raise ConfigError("gqa head dimension must be even for RoPE")


def config_from_dict(data: dict) -> ModelConfig:
    fields = {f.name for f in dataclasses.fields(ModelConfig)}
    unknown = set(data) - fields
    if unknown:
        raise ConfigError(f"unknown config fields: {sorted(unknown)}")
    try:
        return ModelConfig(**data)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def canonical_json(cfg: ModelConfig) -> str:
    return json.dumps(cfg.to_dict(), sort_keys=True, separators=(",", ":"))


def load_config(path) -> ModelConfig:
    with open(path) as fh:
        return config_from_dict(json.load(fh))


QWEN2_VOCAB = 151936

PRESETS: dict[str, ModelConfig] = {
    "plm-1.8b": ModelConfig(
        n_layers=32, d_model=2048, n_heads=16, n_kv_heads=16, attention_kind="mla",
        d_nope=128, d_rope=64, kv_rank=512, d_ffn=8192, vocab_size=QWEN2_VOCAB,
        max_seq_len=4096, activation="relu2"),
    # GQA twin of plm-1.8b with 16 kv heads of width 192, for cache comparisons
    "plm-1.8b-gqa": ModelConfig(
        n_layers=32, d_model=2048, n_heads=16, n_kv_heads=16, attention_kind="gqa",
        d_nope=128, d_rope=64, kv_rank=0, d_ffn=8192, vocab_size=QWEN2_VOCAB,
        max_seq_len=4096, activation="relu2"),
    "plm-micro": ModelConfig(
        n_layers=4, d_model=128, n_heads=4, n_kv_heads=4, attention_kind="mla",
        d_nope=16, d_rope=8, kv_rank=32, d_ffn=512, vocab_size=512,
        max_seq_len=1024, activation="relu2"),
    "gqa-micro": ModelConfig(
        n_layers=4, d_model=128, n_heads=4, n_kv_heads=2, attention_kind="gqa",
        d_nope=16, d_rope=8, kv_rank=0, d_ffn=512, vocab_size=512,
        max_seq_len=1024, activation="relu2"),
    "swiglu-micro": ModelConfig(
        n_layers=4, d_model=128, n_heads=4, n_kv_heads=2, attention_kind="gqa",
        d_nope=16, d_rope=8, kv_rank=0, d_ffn=512, vocab_size=512,
        max_seq_len=1024, activation="swiglu"),
}

# Architecture-search sandbox candidates: (n_layer, d_model, n_head, d_head,
# d_ffn, kv_rank, q_rank, d_rope), all with compressed queries.
_CANDIDATE_ROWS = [
    (28, 2816, 44, 64, 7040, 256, 768, 32),
    (32, 2304, 36, 64, 5760, 256, 768, 32),
    (32, 2560, 40, 64, 6400, 256, 768, 32),
    (36, 2304, 36, 64, 5760, 256, 768, 32),
    (40, 2304, 36, 64, 5760, 256, 768, 32),
    (36, 2048, 32, 64, 8192, 256, 768, 32),
    (32, 2048, 16, 128, 8192, 512, 1536, 64),
]
CANDIDATES: dict[str, ModelConfig] = {}
for _i, (_l, _d, _h, _dh, _f, _kv, _q, _r) in enumerate(_CANDIDATE_ROWS, start=1):
    CANDIDATES[f"cand-{_i}"] = ModelConfig(
        n_layers=_l, d_model=_d, n_heads=_h, n_kv_heads=_h, attention_kind="mla",
        d_nope=_dh, d_rope=_r, kv_rank=_kv, q_rank=_q, d_ffn=_f,
        vocab_size=QWEN2_VOCAB, max_seq_len=4096, activation="relu2")
PRESETS.update(CANDIDATES)

MICRO_PRESETS = ("plm-micro", "gqa-micro", "swiglu-micro")


def get_preset(name: str) -> ModelConfig:
    """Look up a preset, preferring ``$PLM_LAB_PRESET_DIR/<name>.json`` when present."""
    preset_dir = os.environ.get("PLM_LAB_PRESET_DIR")
    if preset_dir:
        path = Path(preset_dir) / f"{name}.json"
        if path.is_file():
            return load_config(path)
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; known: {', '.join(sorted(PRESETS))}") from None
