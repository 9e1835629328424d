"""Gate-free ReLU^2 feed-forward layer with activation masking, plus a SwiGLU baseline."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import F32, OpCounter, ShapeError, ceil_fraction, matmul, normal_matrix


@dataclass(frozen=True)
class FfnConfig:
    d_model: int
    d_ffn: int
    activation: str = "relu2"

    def __post_init__(self):
        if self.d_model <= 0 or self.d_ffn <= 0:
            raise ShapeError("FFN dimensions must be positive")
        if self.activation not in ("relu2", "swiglu"):
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def gated(self) -> bool:
        return self.activation == "swiglu"


def relu2(x):
    """(max(0, x))**2, elementwise."""
    r = np.maximum(x, 0)
    return r * r


def relu2_grad(x):
    return 2 * np.maximum(x, 0)


def silu(x):
    x64 = np.asarray(x, dtype=np.float64)
    return x64 / (1.0 + np.exp(-x64))


def ffn_weight_shapes(cfg: FfnConfig) -> dict[str, tuple[int, int]]:
    shapes = {"up": (cfg.d_ffn, cfg.d_model), "down": (cfg.d_model, cfg.d_ffn)}
    if cfg.gated:
        shapes = {"gate": (cfg.d_ffn, cfg.d_model), **shapes}
    return shapes


def init_ffn_weights(cfg: FfnConfig, rng, std: float = 0.008) -> dict[str, np.ndarray]:
    return {k: normal_matrix(rng, *s, std=std) for k, s in ffn_weight_shapes(cfg).items()}


def ffn_activations(cfg: FfnConfig, w, h, counter: OpCounter | None = None, layer: int = 0):
    """Post-activation hidden units: act(up(h)), or silu(gate(h)) * up(h) when gated."""
    h = np.asarray(h, dtype=F32)
    if h.ndim != 2 or h.shape[1] != cfg.d_model:
        raise ShapeError(f"FFN input must be (N, {cfg.d_model}), got {h.shape}")
    for name, shape in ffn_weight_shapes(cfg).items():
        if name not in w or tuple(w[name].shape) != shape:
            raise ShapeError(f"FFN weight {name} missing or not {shape}")
    where = (layer, "ffn")
    up = matmul(h, w["up"].T, counter, where)
    if cfg.gated:
        gate = matmul(h, w["gate"].T, counter, where)
        return (silu(gate) * up.astype(np.float64)).astype(F32)
    return relu2(up)


def ffn_forward(cfg: FfnConfig, w, h, counter: OpCounter | None = None, layer: int = 0,
                act_hook=None) -> np.ndarray:
    """down(activations(h)); ``act_hook(layer, x)`` may rewrite the activations first."""
    x = ffn_activations(cfg, w, h, counter, layer)
    if act_hook is not None:
        x = act_hook(layer, x)
    return matmul(x, w["down"].T, counter, (layer, "ffn"))


def mask_smallest(x, r: float):
    """Zero the ceil(r * len) entries of smallest magnitude; ties go to the lower index.

    Returns (masked x, threshold T_r, mask) where mask is 1 for kept entries.
    T_r is the largest masked magnitude, or -inf when nothing is masked.
    """
    if not 0.0 <= r <= 1.0:
        raise ValueError("rate must lie in [0, 1]")
    x = np.asarray(x)
    flat = x.reshape(-1)
    k = ceil_fraction(r, flat.size)
    mask = np.ones(flat.size, dtype=np.int8)
    if k == 0:
        return x.copy(), float("-inf"), mask.reshape(x.shape)
    order = np.argsort(np.abs(flat), kind="stable")
    mask[order[:k]] = 0
    threshold = float(np.abs(flat[order[k - 1]]))
    masked = np.where(mask.astype(bool), flat, 0).astype(x.dtype)
    return masked.reshape(x.shape), threshold, mask.reshape(x.shape)


def zero_fraction(x) -> float:
    x = np.asarray(x)
    if x.size == 0:
        raise ValueError("empty activation array")
    return float(np.count_nonzero(x == 0)) / x.size
