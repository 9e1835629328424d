"""Latency benchmark: prefill then greedy generation, with optional per-layer offload.

Quantized runs store every weight tensor as a per-row ``QuantizedMatrix``;
``peak_resident_bytes`` counts that packed storage.  Arithmetic runs on the
dequantized float32 values, so timings compare protocols rather than kernels.
"""

from __future__ import annotations

import csv
import json
import os
import statistics
import tempfile
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .config import ModelConfig, get_preset, load_config
from .cost import cache_bytes_for, generation_macs
from .model import Model, build_model, generate, weight_shapes
from .tensor import QuantizedMatrix, dequantize, make_rng, quantize

QUANT_BITS = {"fp16": 16, "q8": 8, "q4": 4}
CACHE_BITS = 16
CSV_COLUMNS = ("model", "quant", "phase", "tokens", "tps_mean", "tps_std", "peak_bytes", "macs",
               "cache_bytes")


class CapacityError(MemoryError):
    pass


@dataclass
class BenchSpec:
    config: str = "plm-micro"       # preset name or path to a JSON config
    quant: str = "fp16"
    prefill_tokens: int = 512
    gen_tokens: int = 128
    trials: int = 5
    warmup_trials: int = 1
    offload_layers: int = 0         # the last k layers are re-read from storage before use
    seed: int = 0
    storage_dir: str | None = None  # where offloaded layers live; a temp dir when unset

    def __post_init__(self):
        if self.quant not in QUANT_BITS:
            raise ValueError(f"quant must be one of {sorted(QUANT_BITS)}")
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if self.warmup_trials < 0:
            raise ValueError("warmup_trials must be >= 0")
        if self.prefill_tokens < 1:
            raise ValueError("prefill_tokens must be >= 1")
        if self.gen_tokens < 0:
            raise ValueError("gen_tokens must be >= 0")
        if self.offload_layers < 0:
            raise ValueError("offload_layers must be >= 0")


@dataclass
class BenchRecord:
    model: str
    quant: str
    prefill_tokens: int
    gen_tokens: int
    trials: int
    warmup_trials: int
    offload_layers: int
    seed: int
    prefill_tps_mean: float
    prefill_tps_std: float
    decode_tps_mean: float
    decode_tps_std: float
    peak_resident_bytes: int
    weight_bytes: int
    cache_bytes_prefill: int
    cache_bytes_final: int
    prefill_macs: int
    decode_macs: int
    macs_total: int
    io_bytes_per_step: int
    io_bytes_total: int
    output_tokens: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "BenchRecord":
        return cls(**{f.name: data[f.name] for f in fields(cls)})


def resolve_config(name: str) -> tuple[str, ModelConfig]:
    """(label, config) for a preset name or a JSON file path."""
    path = Path(name)
    if name.endswith(".json") or path.is_file():
        return path.stem, load_config(path)
    return name, get_preset(name)


def available_memory() -> int | None:
    try:
        return os.sysconf("SC_AVPHYS_PAGES") * os.sysconf("SC_PAGE_SIZE")
    except (ValueError, OSError, AttributeError):
        return None


def check_capacity(cfg: ModelConfig, budget: int | None = None) -> None:
    """Raise CapacityError naming the first tensor that would not fit in float32."""
    budget = available_memory() if budget is None else budget
    if budget is None:
        return
    used = 0
    for name, shape in weight_shapes(cfg).items():
        used += 4 * int(np.prod(shape))
        if used > budget:
            raise CapacityError(f"tensor {name} {shape} brings float32 weights to {used} bytes, "
                                f"over the {budget} bytes available")


# -- quantized weights ------------------------------------------------------

def quantize_weights(model: Model, quant: str) -> dict[str, QuantizedMatrix]:
    """Packed storage for every allocated tensor; the tied head shares the embedding."""
    bits = QUANT_BITS[quant]
    out = {}
    for name, w in model.weights.items():
        if name == "lm_head" and model.cfg.tie_embeddings:
            continue
        out[name] = quantize(w, bits)
    return out


def dequantized_model(model: Model, packed: dict[str, QuantizedMatrix]) -> Model:
    weights = {}
    for name, q in packed.items():
        w = dequantize(q)
        weights[name] = w.reshape(model.weights[name].shape)
    if model.cfg.tie_embeddings:
        weights["lm_head"] = weights["embed"]
    return Model(model.cfg, weights)


def packed_bytes(packed: dict[str, QuantizedMatrix], names=None) -> int:
    names = packed if names is None else names
    return sum(packed[n].nbytes for n in names)


def _layer_names(packed, i: int) -> list[str]:
    p = f"layers.{i}."
    return sorted(n for n in packed if n.startswith(p))


# -- offloading -------------------------------------------------------------

class OffloadedModel(Model):
    """Model whose offloaded layers are re-read from per-layer files on every use."""

    def __init__(self, base: Model, packed, offloaded: list[int], storage: Path):
        resident = {n: w for n, w in base.weights.items()
                    if not any(n.startswith(f"layers.{i}.") for i in offloaded)}
        super().__init__(base.cfg, resident)
        self.offloaded = set(offloaded)
        self.files = {}
        self.io_bytes = 0
        self.loads = 0
        for i in offloaded:
            path = storage / f"layer{i:04d}.npz"
            arrays = {}
            for n in _layer_names(packed, i):
                q = packed[n]
                key = n[len(f"layers.{i}."):]
                arrays[key + ".payload"] = q.payload
                arrays[key + ".scales"] = q.scales
                arrays[key + ".meta"] = np.array([q.rows, q.cols, q.bit_width], dtype=np.int64)
            np.savez(path, **arrays)
            self.files[i] = path

    def layer_file_bytes(self) -> int:
        return sum(p.stat().st_size for p in self.files.values())

    def _load(self, i: int) -> dict[str, np.ndarray]:
        path = self.files[i]
        if not path.is_file():
            raise FileNotFoundError(f"offloaded weight file missing: {path}")
        self.io_bytes += path.stat().st_size
        self.loads += 1
        out = {}
        with np.load(path) as z:
            for key in z.files:
                if not key.endswith(".meta"):
                    continue
                base = key[:-len(".meta")]
                rows, cols, bits = (int(v) for v in z[key])
                q = QuantizedMatrix(rows, cols, bits, z[base + ".scales"], z[base + ".payload"])
                shape = (cols,) if base.endswith("norm") else (rows, cols)
                out[f"layers.{i}." + base] = dequantize(q).reshape(shape)
        return out

    def layer(self, i: int):
        if i not in self.offloaded:
            return super().layer(i)
        w = self._load(i)
        p = f"layers.{i}."
        a = {k[len(p) + 5:]: v for k, v in w.items() if k.startswith(p + "attn.")}
        f = {k[len(p) + 4:]: v for k, v in w.items() if k.startswith(p + "ffn.")}
        return a, f, w[p + "attn_norm"], w[p + "ffn_norm"]


# -- runs -------------------------------------------------------------------

def _mean_std(values: list[float]) -> tuple[float, float]:
    """Mean and sample (n - 1) standard deviation; a single trial reports std 0."""
    mean = statistics.fmean(values)
    return mean, (statistics.stdev(values) if len(values) > 1 else 0.0)


def prompt_tokens(cfg: ModelConfig, n: int, seed: int) -> list[int]:
    return [int(t) for t in make_rng(seed + 1).integers(0, cfg.vocab_size, size=n)]


def _run(spec: BenchSpec, model: Model, packed, label: str, offload: OffloadedModel | None):
    cfg = model.cfg
    if spec.prefill_tokens + spec.gen_tokens + 1 > cfg.max_seq_len:
        raise ValueError("prefill_tokens + gen_tokens exceeds max_seq_len")
    runner = offload if offload is not None else model
    prompt = prompt_tokens(cfg, spec.prefill_tokens, spec.seed)
    pre_tps, dec_tps, outputs, result = [], [], None, None
    for trial in range(spec.warmup_trials + spec.trials):
        if offload is not None:
            offload.io_bytes = offload.loads = 0
        res = generate(runner, prompt, spec.gen_tokens + 1)
        if outputs is None:
            outputs = res.tokens[len(prompt):]
        elif res.tokens[len(prompt):] != outputs:
            raise RuntimeError("greedy outputs differ between trials")
        if trial >= spec.warmup_trials:
            pre_tps.append(res.prefill_tps)
            if spec.gen_tokens:
                dec_tps.append(res.decode_tps)
        result = res
    weight_bytes = packed_bytes(packed)
    cache_pre = cache_bytes_for(cfg, spec.prefill_tokens, CACHE_BITS)
    cache_final = cache_bytes_for(cfg, spec.prefill_tokens + spec.gen_tokens, CACHE_BITS)
    if offload is None:
        peak = weight_bytes + cache_final
        io_step = io_total = 0
    else:
        layers = sorted(offload.offloaded)
        per_layer = [packed_bytes(packed, _layer_names(packed, i)) for i in layers]
        resident = weight_bytes - sum(per_layer)
        peak = resident + max(per_layer) + cache_final
        io_step = offload.layer_file_bytes()
        io_total = offload.io_bytes
    pm, ps = _mean_std(pre_tps)
    dm, ds = _mean_std(dec_tps) if dec_tps else (float("nan"), 0.0)
    return BenchRecord(
        model=label, quant=spec.quant, prefill_tokens=spec.prefill_tokens,
        gen_tokens=spec.gen_tokens, trials=spec.trials, warmup_trials=spec.warmup_trials,
        offload_layers=spec.offload_layers, seed=spec.seed,
        prefill_tps_mean=pm, prefill_tps_std=ps, decode_tps_mean=dm, decode_tps_std=ds,
        peak_resident_bytes=peak, weight_bytes=weight_bytes, cache_bytes_prefill=cache_pre,
        cache_bytes_final=cache_final, prefill_macs=result.prefill_macs,
        decode_macs=result.decode_macs, macs_total=result.prefill_macs + result.decode_macs,
        io_bytes_per_step=io_step, io_bytes_total=io_total, output_tokens=outputs)


def _prepare(spec: BenchSpec):
    label, cfg = resolve_config(spec.config)
    check_capacity(cfg)
    base = build_model(cfg, spec.seed)
    packed = quantize_weights(base, spec.quant)
    return label, dequantized_model(base, packed), packed


def run_latency_bench(spec: BenchSpec) -> BenchRecord:
    if spec.offload_layers:
        return run_offload_bench(spec)
    label, model, packed = _prepare(spec)
    return _run(spec, model, packed, label, None)


def run_offload_bench(spec: BenchSpec) -> BenchRecord:
    """Re-read the last ``offload_layers`` layers from per-layer files before each use."""
    label, model, packed = _prepare(spec)
    if spec.offload_layers == 0:
        return _run(spec, model, packed, label, None)
    k = min(spec.offload_layers, model.cfg.n_layers)
    layers = list(range(model.cfg.n_layers - k, model.cfg.n_layers))
    if spec.storage_dir is not None:
        storage = Path(spec.storage_dir)
        storage.mkdir(parents=True, exist_ok=True)
        return _run(spec, model, packed, label, OffloadedModel(model, packed, layers, storage))
    with tempfile.TemporaryDirectory(prefix="plmlab-offload-") as tmp:
        return _run(spec, model, packed, label, OffloadedModel(model, packed, layers, Path(tmp)))


def predicted_macs(cfg: ModelConfig, spec: BenchSpec) -> int:
    """Cost-model total for one trial: prefill plus ``gen_tokens`` decode steps, head included."""
    pre, dec = generation_macs(cfg, spec.prefill_tokens, spec.gen_tokens + 1, include_head=True)
    return pre + dec


# -- reports ----------------------------------------------------------------

def csv_rows(records) -> list[dict]:
    rows = []
    for r in records:
        rows.append({"model": r.model, "quant": r.quant, "phase": "prefill", "tokens": r.prefill_tokens,
                     "tps_mean": r.prefill_tps_mean, "tps_std": r.prefill_tps_std,
                     "peak_bytes": r.peak_resident_bytes, "macs": r.prefill_macs,
                     "cache_bytes": r.cache_bytes_prefill})
        rows.append({"model": r.model, "quant": r.quant, "phase": "decode", "tokens": r.gen_tokens,
                     "tps_mean": r.decode_tps_mean, "tps_std": r.decode_tps_std,
                     "peak_bytes": r.peak_resident_bytes, "macs": r.decode_macs,
                     "cache_bytes": r.cache_bytes_final})
    return rows


def emit_report(records, fmt: str, path) -> Path:
    records = list(records)
    if not records:
        raise ValueError("need at least one record")
    if fmt not in ("json", "csv"):
        raise ValueError("format must be json or csv")
    path = Path(path)
    try:
        with open(path, "w", newline="") as fh:
            if fmt == "csv":
                writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, lineterminator="\n")
                writer.writeheader()
                writer.writerows(csv_rows(records))
            else:
                json.dump([r.to_dict() for r in records], fh, indent=2)
                fh.write("\n")
    except OSError as exc:
        raise OSError(f"cannot write report to {path}: {exc.strerror}") from exc
    return path


def load_report(path) -> list[BenchRecord]:
    with open(path) as fh:
        return [BenchRecord.from_dict(d) for d in json.load(fh)]


TIMING_FIELDS = ("prefill_tps_mean", "prefill_tps_std", "decode_tps_mean", "decode_tps_std")


def without_timings(record: BenchRecord) -> dict:
    return {k: v for k, v in record.to_dict().items() if k not in TIMING_FIELDS}
