"""Activation sparsity measurement, plus threshold calibration for the rate search.

Masking follows the rule ``x_i -> 0 if |x_i| <= T_r``.  T_r is calibrated per
layer from one unmasked pass over the evaluation data: it is the magnitude of
the ceil(r * n)-th smallest post-activation entry of that layer.
"""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field

import numpy as np

from .config import ModelConfig
from .model import Model, count_params, prefill
from .tensor import ceil_fraction, log_softmax

DEFAULT_RATES = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)
SWEEP_COLUMNS = ("r", "threshold", "ppl", "ppl_delta", "zero_fraction",
                 "masked_params", "executed_params")


@dataclass
class SparsityReport:
    rate: float
    threshold: float            # largest per-layer T_r
    baseline_ppl: float
    masked_ppl: float
    zero_fraction: float        # exact zeros after masking, over tokens and layers
    masked_params: int
    executed_params: int
    executed_ratio: float
    layer_thresholds: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def _as_dataset(dataset) -> list[np.ndarray]:
    """A single token stream or a list of streams."""
    if dataset is None:
        raise ValueError("empty dataset")
    seqs = list(dataset)
    if seqs and np.ndim(seqs[0]) == 0:
        seqs = [seqs]
    seqs = [np.asarray(s, dtype=np.int64) for s in seqs]
    if not seqs or all(len(s) == 0 for s in seqs):
        raise ValueError("empty dataset")
    return seqs


def dataset_nll(model: Model, dataset, act_hook=None) -> float:
    """Mean next-token NLL over every predicted position of every sequence."""
    total, count = 0.0, 0
    for seq in _as_dataset(dataset):
        if len(seq) < 2:
            continue
        lp = log_softmax(prefill(model, seq, act_hook=act_hook).logits[:-1])
        total += float(-lp[np.arange(len(seq) - 1), seq[1:]].sum())
        count += len(seq) - 1
    if count == 0:
        raise ValueError("perplexity needs a sequence of at least two tokens")
    return total / count


def dataset_ppl(model: Model, dataset, act_hook=None) -> float:
    return float(np.exp(dataset_nll(model, dataset, act_hook)))


def collect_activations(model: Model, dataset) -> list[np.ndarray]:
    """Post-activation FFN inputs per layer, rows concatenated over the dataset."""
    per_layer = [[] for _ in range(model.cfg.n_layers)]

    def hook(layer, x):
        per_layer[layer].append(x)
        return x

    for seq in _as_dataset(dataset):
        if len(seq):
            prefill(model, seq, act_hook=hook)
    return [np.concatenate(chunks, axis=0) for chunks in per_layer]


def activation_sparsity_measure(model: Model, token_stream) -> float:
    """Fraction of post-activation entries that are exactly zero."""
    acts = collect_activations(model, token_stream)
    zeros = sum(int(np.count_nonzero(a == 0)) for a in acts)
    return zeros / sum(a.size for a in acts)


def layer_thresholds(acts: list[np.ndarray], rate: float) -> list[float]:
    """Per-layer T_r: at least ceil(rate * n) entries satisfy |x| <= T_r; -inf when rate masks none."""
    out = []
    for a in acts:
        mags = np.sort(np.abs(a), axis=None)
        k = ceil_fraction(rate, mags.size)
        out.append(float(mags[k - 1]) if k else float("-inf"))
    return out


def threshold_hook(thresholds, record=None):
    """act_hook that zeroes |x| <= T for each layer; ``record`` collects masked activations."""

    def hook(layer, x):
        t = thresholds[layer]
        y = x if t == float("-inf") else np.where(np.abs(x) <= t, np.zeros_like(x), x)
        if record is not None:
            record.append(y)
        return y

    return hook


def executed_params(cfg: ModelConfig, rate: float, total: int | None = None) -> tuple[int, int, float]:
    """(masked, executed, executed / total) when a ``rate`` share of FFN activations is zero.

    A zero activation lets one row of the down-projection be skipped, so the
    masked count is rate * n_layers * d_ffn * d_model.  ``total`` defaults to
    every parameter including embeddings.
    """
    if not 0.0 <= rate <= 1.0:
        raise ValueError("rate must lie in [0, 1]")
    if total is None:
        total = sum(count_params(cfg))
    masked = int(round(rate * cfg.n_layers * cfg.d_ffn * cfg.d_model))
    executed = total - masked
    return masked, executed, executed / total


def _evaluate(model, dataset, acts, rate, baseline_ppl):
    thresholds = layer_thresholds(acts, rate)
    masked_acts = []
    ppl = dataset_ppl(model, dataset, threshold_hook(thresholds, masked_acts))
    zeros = sum(int(np.count_nonzero(a == 0)) for a in masked_acts)
    zf = zeros / sum(a.size for a in masked_acts)
    masked, executed, ratio = executed_params(model.cfg, rate)
    return SparsityReport(rate, max(thresholds), baseline_ppl, ppl, zf, masked, executed, ratio,
                          thresholds)


def _check_rates(rates):
    rates = [float(r) for r in rates]
    if not rates:
        raise ValueError("need at least one candidate rate")
    if any(not 0.0 <= r <= 1.0 for r in rates):
        raise ValueError("candidate rates must lie in [0, 1]")
    if any(b < a for a, b in zip(rates, rates[1:])):
        raise ValueError("candidate rates must be ascending")
    return rates


def sparsity_sweep(model: Model, dataset, candidate_rates=DEFAULT_RATES) -> list[SparsityReport]:
    """One report per candidate rate, sharing a single calibration pass."""
    rates = _check_rates(candidate_rates)
    acts = collect_activations(model, dataset)
    base = dataset_ppl(model, dataset)
    return [_evaluate(model, dataset, acts, r, base) for r in rates]


def determine_sparsity_rate(model: Model, dataset, delta_ppl: float = 1.0,
                            candidate_rates=DEFAULT_RATES, literal: bool = False):
    """Largest candidate rate whose perplexity rises by at most ``delta_ppl``, else None.

    ``literal=True`` instead returns the first rate with
    ppl_base - ppl_r >= delta_ppl, i.e. one that lowers perplexity.
    """
    reports = sparsity_sweep(model, dataset, candidate_rates)
    if literal:
        for rep in reports:
            if rep.baseline_ppl - rep.masked_ppl >= delta_ppl:
                return rep
        return None
    ok = [rep for rep in reports if rep.masked_ppl - rep.baseline_ppl <= delta_ppl]
    return ok[-1] if ok else None


def sweep_rows(reports) -> list[dict]:
    return [{"r": rep.rate, "threshold": rep.threshold, "ppl": rep.masked_ppl,
             "ppl_delta": rep.masked_ppl - rep.baseline_ppl, "zero_fraction": rep.zero_fraction,
             "masked_params": rep.masked_params, "executed_params": rep.executed_params}
            for rep in reports]


def sweep_csv(reports) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=SWEEP_COLUMNS, lineterminator="\n")
    writer.writeheader()
    writer.writerows(sweep_rows(reports))
    return buf.getvalue()


def with_dead_units(model: Model, fraction: float) -> Model:
    """Copy of ``model`` whose first ceil(fraction * d_ffn) up-projection rows are zero.

    Those units always emit relu2(0) = 0, so at least that share of every
    layer's activations is exactly zero.
    """
    if model.cfg.activation != "relu2":
        raise ValueError("dead units need an ungated relu2 FFN")
    k = ceil_fraction(fraction, model.cfg.d_ffn)
    weights = dict(model.weights)
    for i in range(model.cfg.n_layers):
        name = f"layers.{i}.ffn.up"
        w = weights[name].copy()
        w[:k] = 0
        weights[name] = w
    if model.cfg.tie_embeddings:
        weights["lm_head"] = weights["embed"]
    return Model(model.cfg, weights)

