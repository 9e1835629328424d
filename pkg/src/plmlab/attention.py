"""Executable MLA and GQA/MQA/MHA attention layers with exact KV-cache accounting.

Weights are stored torch-style as (out_features, in_features) and applied as
``x @ W.T``.  A single ``_mla_attend`` / ``_gqa_attend`` core serves both
prefill (empty cache, N rows) and decode (one row), which keeps the two paths
structurally identical.

MLA decode is the naive variant: every step re-expands all cached latents to
per-head keys and values.  That is the cost the analytic model describes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import (F32, ROPE_THETA, OpCounter, ShapeError, apply_rope, batched_matmul,
                     matmul, normal_matrix, softmax_rows)


class CacheOrderError(ValueError):
    pass


@dataclass(frozen=True)
class MlaLayerConfig:
    d_model: int
    n_heads: int
    d_nope: int
    d_rope: int
    kv_rank: int
    q_rank: int | None = None

    def __post_init__(self):
        for name in ("d_model", "n_heads", "d_nope", "d_rope", "kv_rank"):
            if getattr(self, name) <= 0:
                raise ShapeError(f"{name} must be positive")
        if self.d_rope % 2:
            raise ShapeError("d_rope must be even")
        if self.q_rank is not None and self.q_rank <= 0:
            raise ShapeError("q_rank must be positive when set")

    @property
    def d_head(self) -> int:
        return self.d_nope + self.d_rope


@dataclass(frozen=True)
class GqaLayerConfig:
    d_model: int
    n_heads: int
    n_kv_heads: int
    d_head: int

    def __post_init__(self):
        if min(self.d_model, self.n_heads, self.n_kv_heads, self.d_head) <= 0:
            raise ShapeError("GQA dimensions must be positive")
        if self.n_heads % self.n_kv_heads:
            raise ShapeError("n_heads must be divisible by n_kv_heads")
        if self.d_head % 2:
            raise ShapeError("d_head must be even for RoPE")


def layer_config(cfg):
    """Attention layer config for a ``ModelConfig``."""
    if cfg.attention_kind == "mla":
        return MlaLayerConfig(cfg.d_model, cfg.n_heads, cfg.d_nope, cfg.d_rope,
                              cfg.kv_rank, cfg.q_rank)
    return GqaLayerConfig(cfg.d_model, cfg.n_heads, cfg.n_kv_heads, cfg.d_head)


# -- caches -----------------------------------------------------------------

class _Rows:
    """Append-only 2-D float32 buffer with amortised growth."""

    def __init__(self, width: int):
        self.width = width
        self._buf = np.zeros((8, width), dtype=F32)
        self.n = 0

    def extend(self, rows: np.ndarray) -> None:
        rows = np.asarray(rows, dtype=F32).reshape(-1, self.width)
        need = self.n + len(rows)
        if need > len(self._buf):
            cap = max(need, 2 * len(self._buf))
            grown = np.zeros((cap, self.width), dtype=F32)
            grown[:self.n] = self._buf[:self.n]
            self._buf = grown
        self._buf[self.n:need] = rows
        self.n = need

    @property
    def data(self) -> np.ndarray:
        return self._buf[:self.n]


def _packed_bytes(entries: int, bit_width: int) -> int:
    return (entries * bit_width + 7) // 8


def mla_cache_bytes(n_layers: int, d_rope: int, kv_rank: int, bit_width: int, n_tokens: int) -> int:
    """n_layers * (d_rope + d_c) * bit_width/8 * N."""
    return n_layers * _packed_bytes((d_rope + kv_rank) * n_tokens, bit_width)


def gqa_cache_bytes(n_layers: int, n_kv_heads: int, d_head: int, bit_width: int, n_tokens: int) -> int:
    """n_layers * 2 * n_kv_heads * d_h * bit_width/8 * N."""
    return n_layers * _packed_bytes(2 * n_kv_heads * d_head * n_tokens, bit_width)


@dataclass
class MlaKvCache:
    """Per-token joint latent c^KV (width d_c) and shared rotary key k^R (width d_rope)."""

    kv_rank: int
    d_rope: int
    positions: list = field(default_factory=list)

    def __post_init__(self):
        self._latents = _Rows(self.kv_rank)
        self._rope_keys = _Rows(self.d_rope)

    @property
    def n_tokens(self) -> int:
        return len(self.positions)

    @property
    def latents(self) -> np.ndarray:
        return self._latents.data

    @property
    def rope_keys(self) -> np.ndarray:
        return self._rope_keys.data

    def append(self, latents, rope_keys, positions) -> None:
        _check_order(self.positions, positions)
        self._latents.extend(latents)
        self._rope_keys.extend(rope_keys)
        self.positions.extend(int(p) for p in positions)

    def entries(self) -> int:
        return self.latents.size + self.rope_keys.size

    def nbytes(self, bit_width: int) -> int:
        return _packed_bytes(self.entries(), bit_width)


@dataclass
class GqaKvCache:
    """Per-token keys and values for each kv head, stored as (N, n_kv_heads * d_head)."""

    n_kv_heads: int
    d_head: int
    positions: list = field(default_factory=list)

    def __post_init__(self):
        self._keys = _Rows(self.n_kv_heads * self.d_head)
        self._values = _Rows(self.n_kv_heads * self.d_head)

    @property
    def n_tokens(self) -> int:
        return len(self.positions)

    @property
    def keys(self) -> np.ndarray:
        return self._keys.data

    @property
    def values(self) -> np.ndarray:
        return self._values.data

    def append(self, keys, values, positions) -> None:
        _check_order(self.positions, positions)
        self._keys.extend(keys)
        self._values.extend(values)
        self.positions.extend(int(p) for p in positions)

    def entries(self) -> int:
        return self.keys.size + self.values.size

    def nbytes(self, bit_width: int) -> int:
        return _packed_bytes(self.entries(), bit_width)


def _check_order(cached, new):
    new = [int(p) for p in new]
    last = cached[-1] if cached else -1
    for p in new:
        if p <= last:
            raise CacheOrderError(f"position {p} does not follow last cached position {last}")
        last = p


def new_cache(lcfg):
    if isinstance(lcfg, MlaLayerConfig):
        return MlaKvCache(lcfg.kv_rank, lcfg.d_rope)
    return GqaKvCache(lcfg.n_kv_heads, lcfg.d_head)


def cache_bytes(cache, bit_width: int, n_layers: int = 1) -> int:
    """Bytes held by ``n_layers`` caches shaped like ``cache`` (or by a list of caches)."""
    if isinstance(cache, (list, tuple)):
        return sum(c.nbytes(bit_width) for c in cache)
    return n_layers * cache.nbytes(bit_width)


# -- weights ----------------------------------------------------------------

def mla_weight_shapes(lcfg: MlaLayerConfig) -> dict[str, tuple[int, int]]:
    d, h = lcfg.d_model, lcfg.n_heads
    shapes = {
        "w_dkv": (lcfg.kv_rank, d),
        "w_kr": (lcfg.d_rope, d),
        "w_uk": (h * lcfg.d_nope, lcfg.kv_rank),
        "w_uv": (h * lcfg.d_nope, lcfg.kv_rank),
    }
    if lcfg.q_rank is None:
        shapes["w_q"] = (h * lcfg.d_nope, d)
        shapes["w_qr"] = (h * lcfg.d_rope, d)
    else:
        shapes["w_dq"] = (lcfg.q_rank, d)
        shapes["w_uq"] = (h * lcfg.d_nope, lcfg.q_rank)
        shapes["w_qr"] = (h * lcfg.d_rope, lcfg.q_rank)
    shapes["w_o"] = (d, h * lcfg.d_nope)
    return shapes


def gqa_weight_shapes(lcfg: GqaLayerConfig) -> dict[str, tuple[int, int]]:
    d = lcfg.d_model
    return {
        "w_q": (lcfg.n_heads * lcfg.d_head, d),
        "w_k": (lcfg.n_kv_heads * lcfg.d_head, d),
        "w_v": (lcfg.n_kv_heads * lcfg.d_head, d),
        "w_o": (d, lcfg.n_heads * lcfg.d_head),
    }


def weight_shapes(lcfg) -> dict[str, tuple[int, int]]:
    if isinstance(lcfg, MlaLayerConfig):
        return mla_weight_shapes(lcfg)
    return gqa_weight_shapes(lcfg)


def init_weights(lcfg, rng, std: float = 0.008) -> dict[str, np.ndarray]:
    return {name: normal_matrix(rng, *shape, std=std) for name, shape in weight_shapes(lcfg).items()}


def _check_weights(lcfg, w):
    for name, shape in weight_shapes(lcfg).items():
        if name not in w:
            raise ShapeError(f"missing weight {name}")
        if tuple(w[name].shape) != shape:
            raise ShapeError(f"{name} has shape {w[name].shape}, expected {shape}")


# -- MLA --------------------------------------------------------------------

def _mla_attend(lcfg: MlaLayerConfig, w, h, positions, cache: MlaKvCache,
                counter, layer, theta):
    h = np.asarray(h, dtype=F32)
    if h.ndim != 2 or h.shape[1] != lcfg.d_model:
        raise ShapeError(f"hidden states must be (N, {lcfg.d_model}), got {h.shape}")
    if len(positions) != len(h):
        raise ShapeError("one position per row required")
    _check_order(cache.positions, positions)
    proj, rope, attn = (layer, "attn_proj"), (layer, "rope"), (layer, "attn_scores")
    H, dn, dr = lcfg.n_heads, lcfg.d_nope, lcfg.d_rope

    c_kv = matmul(h, w["w_dkv"].T, counter, proj)
    k_rope = apply_rope(matmul(h, w["w_kr"].T, counter, proj), positions, theta, counter, rope)
    cache.append(c_kv, k_rope, positions)

    if lcfg.q_rank is None:
        q_src = h
        q_nope = matmul(h, w["w_q"].T, counter, proj)
    else:
        q_src = matmul(h, w["w_dq"].T, counter, proj)
        q_nope = matmul(q_src, w["w_uq"].T, counter, proj)
    q_pe = matmul(q_src, w["w_qr"].T, counter, proj)
    m = len(h)
    q_pe = apply_rope(q_pe.reshape(m * H, dr), np.repeat(positions, H), theta,
                      counter, rope).reshape(m, H * dr)

    latents = cache.latents
    # one pass over the latents for both up-projections; columns stay independent
    kv = matmul(latents, np.concatenate([w["w_uk"], w["w_uv"]]).T, counter, proj)
    k_nope, v = kv[:, :H * dn], kv[:, H * dn:]
    k_shared = cache.rope_keys

    n = len(latents)
    q = np.concatenate([q_nope.reshape(m, H, dn), q_pe.reshape(m, H, dr)], axis=2)
    k = np.concatenate([k_nope.reshape(n, H, dn),
                        np.broadcast_to(k_shared[:, None, :], (n, H, dr))], axis=2)
    scores = batched_matmul(q.transpose(1, 0, 2), k.transpose(1, 2, 0), counter, attn)
    p = softmax_rows(scores, 1.0 / math.sqrt(lcfg.d_head), causal_mask=True)
    heads = batched_matmul(p, v.reshape(n, H, dn).transpose(1, 0, 2), counter, attn)
    return matmul(heads.transpose(1, 0, 2).reshape(m, H * dn), w["w_o"].T, counter, proj)


def mla_prefill(lcfg: MlaLayerConfig, w, h, positions=None, *, counter: OpCounter | None = None,
                layer: int = 0, theta: float = ROPE_THETA):
    """Causal MLA over N rows. Returns (out (N, d), fresh cache holding all N tokens)."""
    _check_weights(lcfg, w)
    positions = list(range(len(h))) if positions is None else list(positions)
    cache = MlaKvCache(lcfg.kv_rank, lcfg.d_rope)
    out = _mla_attend(lcfg, w, h, positions, cache, counter, layer, theta)
    return out, cache


def mla_decode_step(lcfg: MlaLayerConfig, w, h_n, cache: MlaKvCache, position: int, *,
                    counter: OpCounter | None = None, layer: int = 0, theta: float = ROPE_THETA):
    """One new token against ``cache`` (mutated in place). Returns (out (d,), cache)."""
    _check_weights(lcfg, w)
    h_n = np.asarray(h_n, dtype=F32).reshape(1, -1)
    out = _mla_attend(lcfg, w, h_n, [position], cache, counter, layer, theta)
    return out[0], cache


# -- GQA / MQA / MHA --------------------------------------------------------

def _gqa_attend(lcfg: GqaLayerConfig, w, h, positions, cache: GqaKvCache,
                counter, layer, theta):
    h = np.asarray(h, dtype=F32)
    if h.ndim != 2 or h.shape[1] != lcfg.d_model:
        raise ShapeError(f"hidden states must be (N, {lcfg.d_model}), got {h.shape}")
    if len(positions) != len(h):
        raise ShapeError("one position per row required")
    _check_order(cache.positions, positions)
    proj, rope, attn = (layer, "attn_proj"), (layer, "rope"), (layer, "attn_scores")
    H, G, dh = lcfg.n_heads, lcfg.n_kv_heads, lcfg.d_head
    m = len(h)

    q = matmul(h, w["w_q"].T, counter, proj)
    k = matmul(h, w["w_k"].T, counter, proj)
    v = matmul(h, w["w_v"].T, counter, proj)
    q = apply_rope(q.reshape(m * H, dh), np.repeat(positions, H), theta, counter, rope).reshape(m, H * dh)
    k = apply_rope(k.reshape(m * G, dh), np.repeat(positions, G), theta, counter, rope).reshape(m, G * dh)
    cache.append(k, v, positions)
    keys, values = cache.keys, cache.values

    n = len(keys)
    kv_of = np.arange(H) % G
    k_h = keys.reshape(n, G, dh)[:, kv_of].transpose(1, 2, 0)
    v_h = values.reshape(n, G, dh)[:, kv_of].transpose(1, 0, 2)
    scores = batched_matmul(q.reshape(m, H, dh).transpose(1, 0, 2), k_h, counter, attn)
    p = softmax_rows(scores, 1.0 / math.sqrt(dh), causal_mask=True)
    heads = batched_matmul(p, v_h, counter, attn)
    return matmul(heads.transpose(1, 0, 2).reshape(m, H * dh), w["w_o"].T, counter, proj)


def gqa_prefill(lcfg: GqaLayerConfig, w, h, positions=None, *, counter: OpCounter | None = None,
                layer: int = 0, theta: float = ROPE_THETA):
    """Causal grouped-query attention; query head i reads kv head ``i % n_kv_heads``."""
    _check_weights(lcfg, w)
    positions = list(range(len(h))) if positions is None else list(positions)
    cache = GqaKvCache(lcfg.n_kv_heads, lcfg.d_head)
    out = _gqa_attend(lcfg, w, h, positions, cache, counter, layer, theta)
    return out, cache


def gqa_decode_step(lcfg: GqaLayerConfig, w, h_n, cache: GqaKvCache, position: int, *,
                    counter: OpCounter | None = None, layer: int = 0, theta: float = ROPE_THETA):
    _check_weights(lcfg, w)
    h_n = np.asarray(h_n, dtype=F32).reshape(1, -1)
    out = _gqa_attend(lcfg, w, h_n, [position], cache, counter, layer, theta)
    return out[0], cache


def attend(lcfg, w, h, positions, cache, *, counter=None, layer=0, theta=ROPE_THETA):
    """Run the layer over new rows ``h`` against an existing cache."""
    if isinstance(lcfg, MlaLayerConfig):
        return _mla_attend(lcfg, w, h, list(positions), cache, counter, layer, theta)
    return _gqa_attend(lcfg, w, h, list(positions), cache, counter, layer, theta)


def mha_reference(d_model: int, n_heads: int, w, h, positions=None, *,
                  rope_theta: float | None = ROPE_THETA, scale: float | None = None) -> np.ndarray:
    """Textbook causal multi-head attention, kept deliberately plain for use as a test oracle.

    ``w`` holds w_q, w_k, w_v of shape (n_heads * d_head, d_model) and w_o of
    shape (d_model, n_heads * d_head).  ``rope_theta=None`` disables RoPE.
    """
    h = np.asarray(h, dtype=F32)
    if h.ndim != 2 or h.shape[1] != d_model:
        raise ShapeError(f"hidden states must be (N, {d_model}), got {h.shape}")
    width = w["w_q"].shape[0]
    if width % n_heads:
        raise ShapeError("projection width not divisible by n_heads")
    for name in ("w_q", "w_k", "w_v"):
        if w[name].shape != (width, d_model):
            raise ShapeError(f"{name} must be ({width}, {d_model})")
    if w["w_o"].shape != (d_model, width):
        raise ShapeError(f"w_o must be ({d_model}, {width})")
    dh = width // n_heads
    n = len(h)
    positions = list(range(n)) if positions is None else list(positions)
    if scale is None:
        scale = 1.0 / math.sqrt(dh)
    outs = []
    for i in range(n_heads):
        cols = slice(i * dh, (i + 1) * dh)
        q = matmul(h, w["w_q"][cols].T)
        k = matmul(h, w["w_k"][cols].T)
        v = matmul(h, w["w_v"][cols].T)
        if rope_theta is not None:
            q = apply_rope(q, positions, rope_theta)
            k = apply_rope(k, positions, rope_theta)
        p = softmax_rows(matmul(q, k.T), scale, causal_mask=True)
        outs.append(matmul(p, v))
    return matmul(np.concatenate(outs, axis=1), w["w_o"].T)
