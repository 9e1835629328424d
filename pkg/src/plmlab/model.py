"""Decoder-only transformer assembled from the attention and FFN layers.

Pre-norm residual blocks (RMS norm, eps 1e-6), tied input/output embeddings
by default, greedy decoding only.
"""

from __future__ import annotations

import json
import struct
import time
from dataclasses import dataclass, field

import numpy as np

from . import attention as attn
from .config import ConfigError, ModelConfig, canonical_json, config_from_dict
from .ffn import FfnConfig, ffn_forward, ffn_weight_shapes
from .tensor import F32, OpCounter, log_softmax, make_rng, matmul, normal_matrix, rms_norm

INIT_STD = 0.008
NORM_EPS = 1e-6


class SequenceLengthError(ValueError):
    pass


class WeightFileError(ValueError):
    pass


def ffn_config(cfg: ModelConfig) -> FfnConfig:
    return FfnConfig(cfg.d_model, cfg.d_ffn, cfg.activation)


def weight_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    """Every allocated tensor, in initialisation order. The tied head is not listed."""
    d = cfg.d_model
    lcfg = attn.layer_config(cfg)
    shapes = {"embed": (cfg.vocab_size, d)}
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        shapes[p + "attn_norm"] = (d,)
        for name, s in attn.weight_shapes(lcfg).items():
            shapes[p + "attn." + name] = s
        shapes[p + "ffn_norm"] = (d,)
        for name, s in ffn_weight_shapes(ffn_config(cfg)).items():
            shapes[p + "ffn." + name] = s
    shapes["final_norm"] = (d,)
    if not cfg.tie_embeddings:
        shapes["lm_head"] = (cfg.vocab_size, d)
    return shapes


def count_params(cfg: ModelConfig) -> tuple[int, int]:
    """(embedding, non_embedding) parameter counts in closed form.

    An untied output head is counted with the embeddings.  Norm gains are
    non-embedding parameters.
    """
    d, H = cfg.d_model, cfg.n_heads
    if cfg.is_mla:
        attn_p = cfg.kv_rank * d + cfg.d_rope * d + 2 * H * cfg.d_nope * cfg.kv_rank
        if cfg.q_rank is None:
            attn_p += H * (cfg.d_nope + cfg.d_rope) * d
        else:
            attn_p += cfg.q_rank * d + cfg.q_rank * H * (cfg.d_nope + cfg.d_rope)
        attn_p += d * H * cfg.d_nope
    else:
        attn_p = 2 * H * cfg.d_head * d + 2 * cfg.n_kv_heads * cfg.d_head * d
    n_mats = 3 if cfg.activation == "swiglu" else 2
    per_layer = attn_p + n_mats * d * cfg.d_ffn + 2 * d
    embedding = cfg.vocab_size * d * (1 if cfg.tie_embeddings else 2)
    return embedding, cfg.n_layers * per_layer + d


@dataclass
class Model:
    cfg: ModelConfig
    weights: dict = field(repr=False)

    def __post_init__(self):
        self.lcfg = attn.layer_config(self.cfg)
        self.fcfg = ffn_config(self.cfg)

    def layer(self, i: int):
        """(attention weights, ffn weights, attn_norm, ffn_norm) for layer i."""
        p = f"layers.{i}."
        w = self.weights
        a = {k[len(p) + 5:]: v for k, v in w.items() if k.startswith(p + "attn.")}
        f = {k[len(p) + 4:]: v for k, v in w.items() if k.startswith(p + "ffn.")}
        return a, f, w[p + "attn_norm"], w[p + "ffn_norm"]

    @property
    def lm_head(self) -> np.ndarray:
        return self.weights["embed"] if self.cfg.tie_embeddings else self.weights["lm_head"]

    def unique_tensors(self) -> list[np.ndarray]:
        seen, out = set(), []
        for v in self.weights.values():
            if id(v) not in seen:
                seen.add(id(v))
                out.append(v)
        return out

    def n_allocated(self) -> int:
        return sum(v.size for v in self.unique_tensors())

    def new_caches(self) -> list:
        return [attn.new_cache(self.lcfg) for _ in range(self.cfg.n_layers)]


def build_model(cfg: ModelConfig, seed: int = 0, std: float = INIT_STD) -> Model:
    """Weights ~ N(0, std^2), norm gains 1; the output head aliases the embedding when tied."""
    rng = make_rng(seed)
    weights = {}
    for name, shape in weight_shapes(cfg).items():
        if len(shape) == 1:
            weights[name] = np.ones(shape, dtype=F32)
        else:
            weights[name] = normal_matrix(rng, *shape, std=std)
    if cfg.tie_embeddings:
        weights["lm_head"] = weights["embed"]
    return Model(cfg, weights)


def _check_tokens(model: Model, tokens):
    toks = np.asarray(tokens, dtype=np.int64).reshape(-1)
    if toks.size and (toks.min() < 0 or toks.max() >= model.cfg.vocab_size):
        raise ValueError(f"token id out of range [0, {model.cfg.vocab_size})")
    return toks


def _blocks(model: Model, tokens, positions, caches, counter, act_hook):
    x = model.weights["embed"][tokens].astype(F32)
    for i in range(model.cfg.n_layers):
        a_w, f_w, n1, n2 = model.layer(i)
        x = x + attn.attend(model.lcfg, a_w, rms_norm(x, n1, NORM_EPS), positions, caches[i],
                            counter=counter, layer=i)
        x = x + ffn_forward(model.fcfg, f_w, rms_norm(x, n2, NORM_EPS), counter, i, act_hook)
    return rms_norm(x, model.weights["final_norm"], NORM_EPS)


def logits_for(model: Model, hidden, counter=None) -> np.ndarray:
    return matmul(hidden, model.lm_head.T, counter, (-1, "lm_head"))


@dataclass
class PrefillResult:
    logits: np.ndarray
    caches: list
    counter: OpCounter
    seconds: float


def prefill(model: Model, tokens, *, counter: OpCounter | None = None, act_hook=None) -> PrefillResult:
    """Causal forward over the prompt; logits for every position."""
    toks = _check_tokens(model, tokens)
    n = len(toks)
    if n == 0:
        raise ValueError("empty prompt")
    if n > model.cfg.max_seq_len:
        raise SequenceLengthError(f"{n} tokens exceed max_seq_len {model.cfg.max_seq_len}")
    counter = OpCounter() if counter is None else counter
    caches = model.new_caches()
    t0 = time.perf_counter()
    hidden = _blocks(model, toks, list(range(n)), caches, counter, act_hook)
    logits = logits_for(model, hidden, counter)
    return PrefillResult(logits, caches, counter, time.perf_counter() - t0)


def decode_step(model: Model, token: int, caches: list, position: int, *,
                counter: OpCounter | None = None) -> np.ndarray:
    """Feed one token at ``position``; caches grow by one entry per layer. Returns logits (V,)."""
    if position >= model.cfg.max_seq_len:
        raise SequenceLengthError(f"position {position} exceeds max_seq_len")
    toks = _check_tokens(model, [token])
    hidden = _blocks(model, toks, [position], caches, counter, None)
    return logits_for(model, hidden, counter)[0]


@dataclass
class GenerateResult:
    tokens: list
    prompt_len: int
    prefill_seconds: float
    decode_seconds: float
    decode_steps: int
    counter: OpCounter
    prefill_macs: int
    decode_macs: int
    caches: list

    @property
    def prefill_tps(self) -> float:
        if self.prefill_seconds <= 0:
            return float("nan")
        return self.prompt_len / self.prefill_seconds

    @property
    def decode_tps(self) -> float:
        if self.decode_steps == 0:
            return float("nan")
        return self.decode_steps / self.decode_seconds if self.decode_seconds > 0 else float("inf")


def generate(model: Model, prompt, n_new: int) -> GenerateResult:
    """Greedy continuation.

    The prompt's prefill yields the first new token; each further token costs
    one decode step, so ``n_new`` tokens take ``n_new - 1`` decode steps.
    """
    prompt = [int(t) for t in prompt]
    if not prompt:
        raise ValueError("prompt must be non-empty")
    if n_new < 0:
        raise ValueError("n_new must be >= 0")
    if len(prompt) + n_new > model.cfg.max_seq_len:
        raise SequenceLengthError("prompt + n_new exceeds max_seq_len")
    counter = OpCounter()
    if n_new == 0:
        return GenerateResult(prompt, len(prompt), 0.0, 0.0, 0, counter, 0, 0, [])
    pre = prefill(model, prompt, counter=counter)
    prefill_macs = counter.macs
    tokens = prompt + [int(np.argmax(pre.logits[-1]))]
    caches = pre.caches
    t0 = time.perf_counter()
    for _ in range(n_new - 1):
        logits = decode_step(model, tokens[-1], caches, len(tokens) - 1, counter=counter)
        tokens.append(int(np.argmax(logits)))
    decode_seconds = time.perf_counter() - t0
    return GenerateResult(tokens, len(prompt), pre.seconds, decode_seconds, n_new - 1, counter,
                          prefill_macs, counter.macs - prefill_macs, caches)


def mean_nll(model: Model, stream, act_hook=None) -> float:
    toks = _check_tokens(model, stream)
    if len(toks) < 2:
        raise ValueError("perplexity needs at least two tokens")
    logits = prefill(model, toks, act_hook=act_hook).logits
    lp = log_softmax(logits[:-1])
    return float(-lp[np.arange(len(toks) - 1), toks[1:]].mean())


def perplexity(model: Model, stream, act_hook=None) -> float:
    """exp(mean next-token negative log-likelihood), natural log."""
    return float(np.exp(mean_nll(model, stream, act_hook)))


# -- persistence ------------------------------------------------------------

MAGIC = b"PLMLABW\x00"
FORMAT_VERSION = 1


def _stored_names(model: Model) -> list[str]:
    return sorted(n for n in model.weights if not (n == "lm_head" and model.cfg.tie_embeddings))


def save_weights(model: Model, path) -> int:
    """Little-endian: magic, u32 version, u32-prefixed canonical config JSON, then tensors.

    Each tensor is u32 name length, name, u32 rank, u64 dims, raw f32 data.
    Returns bytes written.
    """
    cfg_blob = canonical_json(model.cfg).encode()
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION), struct.pack("<I", len(cfg_blob)), cfg_blob]
    for name in _stored_names(model):
        arr = np.ascontiguousarray(model.weights[name], dtype="<f4")
        nb = name.encode()
        parts.append(struct.pack("<I", len(nb)) + nb + struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    blob = b"".join(parts)
    with open(path, "wb") as fh:
        fh.write(blob)
    return len(blob)


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise WeightFileError("truncated weight file")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    @property
    def done(self) -> bool:
        return self.pos == len(self.data)


def load_weights(path) -> Model:
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    if r.take(len(MAGIC)) != MAGIC:
        raise WeightFileError("bad magic; not a plmlab weight file")
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise WeightFileError(f"unsupported format version {version}")
    (cfg_len,) = r.unpack("<I")
    try:
        cfg = config_from_dict(json.loads(r.take(cfg_len).decode()))
    except (ValueError, ConfigError) as exc:
        raise WeightFileError(f"corrupt config header: {exc}") from None
    expected = weight_shapes(cfg)
    weights = {}
    while not r.done:
        (name_len,) = r.unpack("<I")
        name = r.take(name_len).decode()
        (rank,) = r.unpack("<I")
        dims = r.unpack(f"<{rank}Q")
        if name not in expected:
            raise WeightFileError(f"unexpected tensor {name!r}")
        if tuple(dims) != tuple(expected[name]):
            raise WeightFileError(f"tensor {name} has shape {dims}, expected {expected[name]}")
        count = int(np.prod(dims)) if rank else 1
        weights[name] = np.frombuffer(r.take(4 * count), dtype="<f4").astype(F32).reshape(dims)
    missing = set(expected) - set(weights)
    if missing:
        raise WeightFileError(f"missing tensors: {sorted(missing)[:5]}")
    if cfg.tie_embeddings:
        weights["lm_head"] = weights["embed"]
    return Model(cfg, weights)
