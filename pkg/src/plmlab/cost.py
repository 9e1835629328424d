"""Closed-form compute and cache model for MLA and GQA decoders.

Every term is the exact multiply-accumulate count of one kernel the runtime
executes, so the totals must equal ``OpCounter.macs`` to the integer:

* linear projections: in_features * out_features per token
* RoPE: 2 MACs per rotated element
* attention: q.k over the full head width plus p.v over the value width, for
  every (query, key) pair the kernel touches; prefill computes the full N x N
  score matrix before masking
* MLA decode re-expands all N cached latents every step

Norms, softmax, activations and embedding lookups are counted as zero.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from fractions import Fraction

from .attention import gqa_cache_bytes, mla_cache_bytes
from .config import ModelConfig
from .model import count_params


class IncomparableConfigs(ValueError):
    pass


@dataclass(frozen=True)
class HardwareProfile:
    name: str
    io_bytes_per_sec: float
    flops_per_sec: float

    def __post_init__(self):
        if self.io_bytes_per_sec <= 0 or self.flops_per_sec <= 0:
            raise ValueError("hardware speeds must be positive")


@dataclass
class CostReport:
    phase: str
    n: int
    macs: int
    flops: int
    cache_bytes: int
    io_seconds: float | None = None
    compute_seconds: float | None = None
    dominant: str | None = None
    breakdown: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


# -- per-layer attention terms ------------------------------------------------

def _mla_query_macs(cfg: ModelConfig) -> int:
    H, d = cfg.n_heads, cfg.d_model
    if cfg.q_rank is None:
        return H * (cfg.d_nope + cfg.d_rope) * d
    return cfg.q_rank * d + cfg.q_rank * H * (cfg.d_nope + cfg.d_rope)


def _mla_token_macs(cfg: ModelConfig) -> int:
    """Per-token work independent of context: latent, rotary key, queries, RoPE, output."""
    H, d = cfg.n_heads, cfg.d_model
    return (2 * (H + 1) * cfg.d_rope + cfg.kv_rank * d + cfg.d_rope * d
            + _mla_query_macs(cfg) + d * H * cfg.d_nope)


def mla_attention_prefill_macs(cfg: ModelConfig, n: int) -> int:
    H = cfg.n_heads
    linear = _mla_token_macs(cfg) + 2 * H * cfg.kv_rank * cfg.d_nope
    return linear * n + H * (cfg.d_rope + 2 * cfg.d_nope) * n * n


def mla_attention_generate_macs(cfg: ModelConfig, n: int) -> int:
    H = cfg.n_heads
    return _mla_token_macs(cfg) + H * (cfg.d_rope + 2 * cfg.d_nope + 2 * cfg.kv_rank * cfg.d_nope) * n


def _gqa_token_macs(cfg: ModelConfig) -> int:
    H, G, dh, d = cfg.n_heads, cfg.n_kv_heads, cfg.d_head, cfg.d_model
    return 2 * (H + G) * dh + 2 * H * dh * d + 2 * G * dh * d


def gqa_attention_prefill_macs(cfg: ModelConfig, n: int) -> int:
    return _gqa_token_macs(cfg) * n + 2 * cfg.n_heads * cfg.d_head * n * n


def gqa_attention_generate_macs(cfg: ModelConfig, n: int) -> int:
    return _gqa_token_macs(cfg) + 2 * cfg.n_heads * cfg.d_head * n


def ffn_token_macs(cfg: ModelConfig) -> int:
    return (3 if cfg.activation == "swiglu" else 2) * cfg.d_model * cfg.d_ffn


def cache_bytes_for(cfg: ModelConfig, n_tokens: int, bit_width: int = 16) -> int:
    """Whole-model KV cache holding ``n_tokens`` tokens."""
    if cfg.is_mla:
        return mla_cache_bytes(cfg.n_layers, cfg.d_rope, cfg.kv_rank, bit_width, n_tokens)
    return gqa_cache_bytes(cfg.n_layers, cfg.n_kv_heads, cfg.d_head, bit_width, n_tokens)


# -- reports --------------------------------------------------------------------

def _report(cfg, phase, n, attn_layer, tokens, cache, profile, include_head):
    breakdown = {
        "attention": cfg.n_layers * attn_layer,
        "ffn": cfg.n_layers * ffn_token_macs(cfg) * tokens,
        "lm_head": cfg.d_model * cfg.vocab_size * tokens if include_head else 0,
    }
    macs = sum(breakdown.values())
    rep = CostReport(phase, n, macs, 2 * macs, cache, breakdown=breakdown)
    if profile is not None:
        rep.io_seconds = cache / profile.io_bytes_per_sec
        rep.compute_seconds = rep.flops / profile.flops_per_sec
        rep.dominant = "io" if rep.io_seconds > rep.compute_seconds else "compute"
    return rep


def _require(cfg, mla: bool):
    if cfg.is_mla != mla:
        raise ValueError(f"config has attention_kind={cfg.attention_kind}")


def prefill_cost_mla(cfg: ModelConfig, n: int, *, bit_width: int = 16,
                     profile: HardwareProfile | None = None, include_head: bool = False) -> CostReport:
    """Prompt of N tokens. ``include_head`` adds the logit projection for every position."""
    _require(cfg, True)
    if n < 1:
        raise ValueError("N must be >= 1")
    return _report(cfg, "prefill", n, mla_attention_prefill_macs(cfg, n), n,
                   cache_bytes_for(cfg, n, bit_width), profile, include_head)


def generate_cost_mla(cfg: ModelConfig, n: int, *, bit_width: int = 16,
                      profile: HardwareProfile | None = None, include_head: bool = False) -> CostReport:
    """Generating the token at position N (1-based) with N-1 tokens already cached."""
    _require(cfg, True)
    if n < 1:
        raise ValueError("N must be >= 1")
    return _report(cfg, "decode", n, mla_attention_generate_macs(cfg, n), 1,
                   cache_bytes_for(cfg, n - 1, bit_width), profile, include_head)


def prefill_cost_gqa(cfg: ModelConfig, n: int, *, bit_width: int = 16,
                     profile: HardwareProfile | None = None, include_head: bool = False) -> CostReport:
    _require(cfg, False)
    if n < 1:
        raise ValueError("N must be >= 1")
    return _report(cfg, "prefill", n, gqa_attention_prefill_macs(cfg, n), n,
                   cache_bytes_for(cfg, n, bit_width), profile, include_head)


def generate_cost_gqa(cfg: ModelConfig, n: int, *, bit_width: int = 16,
                      profile: HardwareProfile | None = None, include_head: bool = False) -> CostReport:
    _require(cfg, False)
    if n < 1:
        raise ValueError("N must be >= 1")
    return _report(cfg, "decode", n, gqa_attention_generate_macs(cfg, n), 1,
                   cache_bytes_for(cfg, n - 1, bit_width), profile, include_head)


def prefill_cost(cfg: ModelConfig, n: int, **kw) -> CostReport:
    return (prefill_cost_mla if cfg.is_mla else prefill_cost_gqa)(cfg, n, **kw)


def generate_cost(cfg: ModelConfig, n: int, **kw) -> CostReport:
    return (generate_cost_mla if cfg.is_mla else generate_cost_gqa)(cfg, n, **kw)


def generation_macs(cfg: ModelConfig, prompt_len: int, n_new: int, include_head: bool = True) -> tuple[int, int]:
    """(prefill MACs, decode MACs) of a greedy run that takes n_new - 1 decode steps."""
    pre = prefill_cost(cfg, prompt_len, include_head=include_head).macs
    dec = sum(generate_cost(cfg, prompt_len + k, include_head=include_head).macs
              for k in range(1, n_new))
    return pre, dec


# -- MLA vs GQA ----------------------------------------------------------------

@dataclass
class DecodeDifference:
    n: int
    mac_delta: int          # MLA minus GQA, attention over all layers
    cache_delta: int        # GQA minus MLA bytes (positive when MLA caches less)
    mac_slope: int          # d(mac_delta)/dN
    cache_slope: Fraction   # d(cache_delta)/dN, bytes per token


def _check_comparable(cfg_mla, cfg_gqa):
    if not cfg_mla.is_mla or cfg_gqa.is_mla:
        raise IncomparableConfigs("need one MLA and one GQA-family config")
    for f in ("d_model", "n_heads", "n_layers"):
        if getattr(cfg_mla, f) != getattr(cfg_gqa, f):
            raise IncomparableConfigs(f"{f} differs")


def decode_cost_difference(cfg_mla: ModelConfig, cfg_gqa: ModelConfig, n: int,
                           bit_width: int = 16) -> DecodeDifference:
    _check_comparable(cfg_mla, cfg_gqa)
    L, H = cfg_mla.n_layers, cfg_mla.n_heads
    mac_delta = L * (mla_attention_generate_macs(cfg_mla, n) - gqa_attention_generate_macs(cfg_gqa, n))
    cache_delta = cache_bytes_for(cfg_gqa, n - 1, bit_width) - cache_bytes_for(cfg_mla, n - 1, bit_width)
    mac_slope = L * (H * (cfg_mla.d_rope + 2 * cfg_mla.d_nope + 2 * cfg_mla.kv_rank * cfg_mla.d_nope)
                     - 2 * H * cfg_gqa.d_head)
    per_token = 2 * cfg_gqa.n_kv_heads * cfg_gqa.d_head - cfg_mla.kv_rank - cfg_mla.d_rope
    cache_slope = Fraction(L * per_token * bit_width, 8)
    return DecodeDifference(n, mac_delta, cache_delta, mac_slope, cache_slope)


def decode_latency(cfg: ModelConfig, n: int, profile: HardwareProfile, bit_width: int = 16) -> Fraction:
    """Exact io + compute seconds for one decode step (attention and FFN, no head)."""
    rep = generate_cost(cfg, n, bit_width=bit_width)
    return (Fraction(rep.cache_bytes) / Fraction(profile.io_bytes_per_sec)
            + Fraction(rep.flops) / Fraction(profile.flops_per_sec))


def latency_crossover(cfg_mla: ModelConfig, cfg_gqa: ModelConfig, profile: HardwareProfile,
                      bit_width: int = 16, n_max: int = 1 << 20):
    """First N in [2, n_max] where the faster of the two decoders differs from N=1, else None.

    Both latencies are affine in N, so the difference changes sign at most once.
    """
    _check_comparable(cfg_mla, cfg_gqa)

    def delta(n):
        return decode_latency(cfg_mla, n, profile, bit_width) - decode_latency(cfg_gqa, n, profile, bit_width)

    d1, d2 = delta(1), delta(2)
    slope = d2 - d1
    if d1 == 0 or slope == 0 or (d1 > 0) == (slope > 0):
        return None
    # smallest integer N with sign(delta(N)) != sign(delta(1))
    root = 1 + (-d1) / slope
    n = int(root) if root.denominator == 1 else int(root) + 1
    while n > 1 and (delta(n - 1) > 0) != (d1 > 0):
        n -= 1
    while (delta(n) > 0) == (d1 > 0) and delta(n) != 0:
        n += 1
    return n if n <= n_max else None


# -- architecture ranking --------------------------------------------------------

RANK_KEYS = ("params_nonemb", "macs", "flops", "macs_per_param", "cache_bytes")


def rank_architectures(candidates, n: int = 128, profile: HardwareProfile | None = None,
                       sort_key: str = "macs", bit_width: int = 16, descending: bool = False):
    """Prefill cost of each candidate at N tokens, head excluded, ranked by ``sort_key``.

    ``candidates`` is a mapping name -> config or a list of configs.
    macs_per_param divides by all parameters, embeddings included.
    """
    if sort_key not in RANK_KEYS:
        raise ValueError(f"sort_key must be one of {RANK_KEYS}")
    items = list(candidates.items()) if isinstance(candidates, dict) else [
        (f"cand-{i + 1}", c) for i, c in enumerate(candidates)]
    if not items:
        raise ValueError("need at least one candidate")
    rows = []
    for idx, (name, cfg) in enumerate(items):
        emb, non_emb = count_params(cfg)
        rep = prefill_cost(cfg, n, bit_width=bit_width, profile=profile)
        row = {"name": name, "params_nonemb": non_emb, "macs": rep.macs, "flops": rep.flops,
               "macs_per_param": rep.macs / (emb + non_emb),
               "cache_bytes": cache_bytes_for(cfg, n, bit_width), "_index": idx}
        if profile is not None:
            row["latency_s"] = rep.io_seconds + rep.compute_seconds
        rows.append(row)
    sign = -1 if descending else 1
    rows.sort(key=lambda r: (sign * r[sort_key], r["_index"]))
    for rank, row in enumerate(rows, start=1):
        row["rank"] = rank
        del row["_index"]
    return rows
