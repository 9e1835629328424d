import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from plmlab.config import ModelConfig, get_preset
from plmlab.ffn import (FfnConfig, ffn_forward, init_ffn_weights, mask_smallest, relu2,
                        relu2_grad, zero_fraction)
from plmlab.model import build_model, count_params, prefill
from plmlab.sparsity import (DEFAULT_RATES, SWEEP_COLUMNS, activation_sparsity_measure, collect_activations,
                             dataset_ppl, determine_sparsity_rate, executed_params, layer_thresholds,
                             sparsity_sweep, sweep_csv, threshold_hook, with_dead_units)
from plmlab.tensor import ShapeError, make_rng


def normal_cdf(x):
    return 0.5 * (1 + math.erf(x / math.sqrt(2)))


def stream(seed, n, vocab):
    return make_rng(seed).integers(0, vocab, size=n)


# -- relu2 ------------------------------------------------------------------

@pytest.mark.parametrize("x,y", [(3.0, 9.0), (-2.0, 0.0), (0.5, 0.25), (0.0, 0.0)])
def test_relu2_examples(x, y):
    assert relu2(np.float64(x)) == y


@given(st.floats(0.01, 100))
def test_relu2_gradient_finite_difference(x):
    eps = 1e-6 * max(1.0, x)
    fd = (relu2(x + eps) - relu2(x - eps)) / (2 * eps)
    assert abs(fd - relu2_grad(x)) <= 1e-4 * abs(relu2_grad(x))
    assert relu2_grad(x) == 2 * x


def test_relu2_nonnegative(rng):
    assert (relu2(rng.standard_normal(10_000) * 10) >= 0).all()


def test_gaussian_zero_fraction(rng):
    z = zero_fraction(relu2(rng.standard_normal(200_000)))
    assert abs(z - 0.5) <= 0.02


def test_biased_zero_fraction_matches_normal_cdf(rng):
    z = zero_fraction(relu2(rng.normal(-2.0, 1.0, 200_000)))
    assert abs(z - normal_cdf(2.0)) <= 0.005


# -- FFN forward ------------------------------------------------------------

def blas_ffn(cfg, w, h):
    h = h.astype(np.float64)
    up = h @ w["up"].T.astype(np.float64)
    if cfg.gated:
        g = h @ w["gate"].T.astype(np.float64)
        x = g / (1 + np.exp(-g)) * up
    else:
        x = np.maximum(up, 0) ** 2
    return x @ w["down"].T.astype(np.float64)


@pytest.mark.parametrize("act", ["relu2", "swiglu"])
def test_ffn_matches_two_matmul_oracle(act):
    cfg = FfnConfig(8, 24, act)
    w = init_ffn_weights(cfg, make_rng(3), std=0.3)
    h = make_rng(4).standard_normal((5, 8)).astype(np.float32)
    np.testing.assert_allclose(ffn_forward(cfg, w, h), blas_ffn(cfg, w, h), atol=1e-6)


def test_ffn_zero_input_and_full_deactivation():
    cfg = FfnConfig(4, 6)
    w = init_ffn_weights(cfg, make_rng(5), std=0.3)
    assert not ffn_forward(cfg, w, np.zeros((2, 4), np.float32)).any()
    h = np.ones((1, 4), np.float32)
    w_neg = dict(w, up=-np.abs(w["up"]))
    assert not ffn_forward(cfg, w_neg, h).any()


def test_ffn_shape_errors():
    cfg = FfnConfig(4, 6)
    w = init_ffn_weights(cfg, make_rng(5))
    with pytest.raises(ShapeError):
        ffn_forward(cfg, w, np.zeros((2, 5), np.float32))
    with pytest.raises(ShapeError):
        ffn_forward(FfnConfig(4, 6, "swiglu"), w, np.zeros((2, 4), np.float32))
    with pytest.raises(ValueError):
        FfnConfig(4, 6, "gelu")


# -- masking ----------------------------------------------------------------

def test_mask_smallest_examples():
    x = np.array([0.1, -0.5, 2.0, 0.0])
    masked, t, m = mask_smallest(x, 0.5)
    assert masked.tolist() == [0, -0.5, 2.0, 0]
    assert t == 0.1 and m.tolist() == [0, 1, 1, 0]
    assert mask_smallest(x, 0.0)[0].tolist() == x.tolist()
    assert not mask_smallest(x, 1.0)[0].any()
    with pytest.raises(ValueError):
        mask_smallest(x, 1.5)


def test_mask_smallest_ties_lower_index_first():
    _, _, m = mask_smallest(np.array([1.0, -1.0, 1.0, 3.0]), 0.5)
    assert m.tolist() == [0, 0, 1, 1]
    _, _, m = mask_smallest(np.array([1.0, -1.0, 1.0, 3.0]), 0.25)
    assert m.tolist() == [0, 1, 1, 1]


@given(arrays(np.float64, st.integers(1, 40), elements=st.floats(-5, 5)), st.floats(0, 1))
def test_mask_smallest_against_sort_oracle(x, r):
    masked, _, m = mask_smallest(x, r)
    k = math.ceil(r * len(x) - 1e-12)
    # oracle: sort (|x|, index) pairs and take the first k
    chosen = {i for _, i in sorted((abs(v), i) for i, v in enumerate(x))[:k]}
    assert {i for i in range(len(x)) if m[i] == 0} == chosen
    assert all(masked[i] == 0 for i in chosen)
    assert all(masked[i] == x[i] for i in range(len(x)) if i not in chosen)
    again, _, _ = mask_smallest(masked, r)
    assert np.array_equal(again, masked)


# -- sparsity measurement ---------------------------------------------------

def test_measure_random_relu2_near_half(micro_model):
    z = activation_sparsity_measure(micro_model, stream(1, 64, micro_model.cfg.vocab_size))
    assert abs(z - 0.5) <= 0.02


def test_measure_swiglu_near_zero():
    model = build_model(get_preset("swiglu-micro"), seed=0)
    assert activation_sparsity_measure(model, stream(1, 32, model.cfg.vocab_size)) <= 0.01


def test_measure_empty_stream(micro_model):
    with pytest.raises(ValueError):
        activation_sparsity_measure(micro_model, [])


def test_layer_thresholds_count(rng):
    acts = [rng.standard_normal((4, 10)), rng.standard_normal((2, 5))]
    for r in (0.0, 0.3, 0.9, 1.0):
        ts = layer_thresholds(acts, r)
        for a, t in zip(acts, ts):
            assert np.count_nonzero(np.abs(a) <= t) >= math.ceil(r * a.size - 1e-12)


# -- rate search --------------------------------------------------------------

@pytest.fixture(scope="module")
def dead_model():
    return with_dead_units(build_model(get_preset("plm-micro"), seed=3), 0.9)


@pytest.fixture(scope="module")
def eval_set():
    return [stream(s, 24, 512) for s in (10, 11)]


def test_dead_model_zero_fraction(dead_model, eval_set):
    assert activation_sparsity_measure(dead_model, eval_set) >= 0.9


def test_toy_algorithm_returns_at_least_09(dead_model, eval_set):
    rep = determine_sparsity_rate(dead_model, eval_set, 1.0)
    assert rep.rate >= 0.9
    assert abs(rep.masked_ppl - rep.baseline_ppl) < 1e-9


def test_masking_exact_zeros_is_bit_identical(dead_model, eval_set):
    acts = collect_activations(dead_model, eval_set)
    hook = threshold_hook(layer_thresholds(acts, 0.9))
    for seq in eval_set:
        assert np.array_equal(prefill(dead_model, seq).logits, prefill(dead_model, seq, act_hook=hook).logits)


def test_sweep_properties(micro_model, eval_set):
    reps = sparsity_sweep(micro_model, eval_set)
    assert [r.rate for r in reps] == list(DEFAULT_RATES)
    assert reps[0].masked_ppl == reps[0].baseline_ppl == dataset_ppl(micro_model, eval_set)
    inf = determine_sparsity_rate(micro_model, eval_set, float("inf"))
    assert inf.rate == DEFAULT_RATES[-1]
    zf = [r.zero_fraction for r in reps]
    assert zf == sorted(zf)


def test_literal_flag_and_none(micro_model, eval_set):
    # the literal test needs masking to lower perplexity by delta; a huge delta can never pass
    assert determine_sparsity_rate(micro_model, eval_set, 1e6, literal=True) is None
    assert determine_sparsity_rate(micro_model, eval_set, -1e6) is None
    with pytest.raises(ValueError):
        determine_sparsity_rate(micro_model, eval_set, 1.0, candidate_rates=[0.5, 0.2])


def test_sweep_csv_header(micro_model, eval_set):
    text = sweep_csv(sparsity_sweep(micro_model, eval_set, [0.0, 0.5]))
    lines = text.splitlines()
    assert lines[0] == ",".join(SWEEP_COLUMNS)
    assert len(lines) == 3


# -- executed parameters ----------------------------------------------------

def test_executed_params_toy():
    cfg = ModelConfig(n_layers=1, d_model=4, n_heads=1, n_kv_heads=1, attention_kind="mha", d_nope=4,
                      d_rope=0, kv_rank=0, d_ffn=8, vocab_size=8, max_seq_len=8)
    assert executed_params(cfg, 1.0, total=100) == (32, 68, 0.68)
    assert executed_params(cfg, 0.0, total=100) == (0, 100, 1.0)


def test_executed_params_plm():
    cfg = get_preset("plm-1.8b")
    masked, executed, ratio = executed_params(cfg, 0.909)
    assert abs(masked - 0.4832e9) / 0.4832e9 <= 0.02
    assert masked + executed == sum(count_params(cfg))
    assert ratio == executed / sum(count_params(cfg))


@given(st.floats(0, 1), st.floats(0, 1))
def test_executed_params_monotone(a, b):
    cfg = get_preset("plm-1.8b")
    lo, hi = sorted((a, b))
    assert executed_params(cfg, lo)[1] >= executed_params(cfg, hi)[1]
