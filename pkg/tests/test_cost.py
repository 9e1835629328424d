from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from plmlab.config import CANDIDATES, ModelConfig, get_preset
from plmlab.cost import (HardwareProfile, IncomparableConfigs, cache_bytes_for, decode_cost_difference,
                         decode_latency, generate_cost, latency_crossover, prefill_cost, rank_architectures)
from plmlab.model import build_model, count_params, decode_step, prefill
from plmlab.tensor import OpCounter

# published architecture-search candidates 1..7: non-embedding params (B), MACs at N=128 (G)
PUBLISHED_PARAMS_B = (1.54, 1.21, 1.47, 1.36, 1.51, 1.55, 1.54)
PUBLISHED_GMACS = (206, 164, 198, 184, 205, 207, 203)


@st.composite
def tiny_configs(draw, kind):
    heads = draw(st.integers(1, 3))
    kw = dict(n_layers=draw(st.integers(1, 2)), d_model=draw(st.sampled_from([4, 6, 8])), n_heads=heads,
              d_nope=draw(st.sampled_from([2, 4])), d_rope=draw(st.sampled_from([2, 4])),
              d_ffn=draw(st.integers(1, 12)), vocab_size=draw(st.integers(2, 20)), max_seq_len=32,
              activation=draw(st.sampled_from(["relu2", "swiglu"])),
              tie_embeddings=draw(st.booleans()))
    if kind == "mla":
        return ModelConfig(attention_kind="mla", n_kv_heads=heads, kv_rank=draw(st.integers(1, 6)),
                           q_rank=draw(st.one_of(st.none(), st.integers(1, 5))), **kw)
    kv = draw(st.sampled_from([g for g in (1, 2, 3) if heads % g == 0]))
    return ModelConfig(attention_kind="gqa", n_kv_heads=kv, kv_rank=0, **kw)


@settings(max_examples=25)
@given(st.sampled_from(["mla", "gqa"]).flatmap(tiny_configs), st.integers(1, 16), st.integers(0, 99))
def test_analytic_macs_equal_op_counter(cfg, n, seed):
    model = build_model(cfg, seed=seed)
    toks = [i % cfg.vocab_size for i in range(n)]
    c = OpCounter()
    res = prefill(model, toks, counter=c)
    assert c.macs == prefill_cost(cfg, n, include_head=True).macs
    assert c.layer_macs(-1) == 0 or c.layer_macs(-1) == n * cfg.d_model * cfg.vocab_size
    step = OpCounter()
    decode_step(model, 0, res.caches, n, counter=step)
    # the new token sits at position n + 1 (1-based) with n tokens cached
    assert step.macs == generate_cost(cfg, n + 1, include_head=True).macs
    assert step.macs - step.layer_macs(-1) == generate_cost(cfg, n + 1).macs


def test_mla_quadratic_term_at_one():
    cfg = get_preset("plm-micro")
    H = cfg.n_heads
    # with one token, prefill and a decode step from an empty cache do the same work
    assert prefill_cost(cfg, 1).macs - generate_cost(cfg, 1).macs == 0
    quad = prefill_cost(cfg, 3).macs - 3 * prefill_cost(cfg, 1).macs
    assert quad == cfg.n_layers * H * (cfg.d_rope + 2 * cfg.d_nope) * (9 - 3)


def test_flops_double_macs_and_shapes_in_n():
    for cfg in (get_preset("plm-1.8b"), get_preset("plm-1.8b-gqa"), *CANDIDATES.values()):
        p = [prefill_cost(cfg, n).macs for n in (1, 2, 3, 4)]
        g = [generate_cost(cfg, n).macs for n in (1, 2, 3, 4)]
        assert all(prefill_cost(cfg, n).flops == 2 * prefill_cost(cfg, n).macs for n in (1, 7))
        # generate is affine in N, prefill quadratic with a positive leading coefficient
        assert g[1] - g[0] == g[2] - g[1] == g[3] - g[2]
        second = (p[2] - 2 * p[1] + p[0])
        assert second > 0 and second == p[3] - 2 * p[2] + p[1]


def test_cache_values():
    plm, gqa = get_preset("plm-1.8b"), get_preset("plm-1.8b-gqa")
    assert generate_cost(plm, 4096).cache_bytes == 32 * 576 * 2 * 4095 == 150_958_080
    assert generate_cost(plm, 1).cache_bytes == 0
    assert cache_bytes_for(gqa, 4096) == 1_610_612_736
    ratio = cache_bytes_for(gqa, 4096) / cache_bytes_for(plm, 4096)
    assert abs(ratio - 2 * 16 * 192 / 576) <= 1e-9
    for bits in (4, 8):
        assert cache_bytes_for(plm, 100, 2 * bits) == 2 * cache_bytes_for(plm, 100, bits)


def test_gqa_kv_head_terms():
    mha = get_preset("plm-1.8b-gqa")
    half = mha.replace(n_kv_heads=8)
    d, dh, L = mha.d_model, mha.d_head, mha.n_layers
    for n in (1, 5):
        diff = generate_cost(mha, n).macs - generate_cost(half, n).macs
        # 2 kv projections of 8 heads, plus RoPE on 8 fewer key heads
        assert diff == L * (2 * 8 * dh * d + 2 * 8 * dh)
    assert cache_bytes_for(mha, 10) == 2 * cache_bytes_for(half, 10)


def test_decode_difference():
    plm, gqa = get_preset("plm-1.8b"), get_preset("plm-1.8b-gqa")
    for n in (1, 2, 100):
        diff = decode_cost_difference(plm, gqa, n)
        assert diff.cache_delta == cache_bytes_for(gqa, n - 1) - cache_bytes_for(plm, n - 1)
        assert diff.cache_slope == Fraction(32 * (2 * 16 * 192 - 512 - 64) * 16, 8)
        nxt = decode_cost_difference(plm, gqa, n + 1)
        assert nxt.mac_delta - diff.mac_delta == diff.mac_slope
        assert nxt.cache_delta - diff.cache_delta == diff.cache_slope
    # latent width equal to the GQA per-token width: no cache difference
    matched = gqa.replace(n_kv_heads=1, d_nope=224)  # 2 * 288 = 512 + 64
    assert decode_cost_difference(plm, matched, 50).cache_delta == 0
    with pytest.raises(IncomparableConfigs):
        decode_cost_difference(plm, get_preset("gqa-micro"), 4)
    with pytest.raises(IncomparableConfigs):
        decode_cost_difference(gqa, plm, 4)


def grid_crossover(m, g, profile, n_max):
    def sign(n):
        d = decode_latency(m, n, profile) - decode_latency(g, n, profile)
        return (d > 0) - (d < 0)

    s1 = sign(1)
    for n in range(2, n_max + 1):
        s = sign(n)
        if s != s1:
            return n
    return None


@pytest.mark.parametrize("pair", [("plm-1.8b", "plm-1.8b-gqa"), ("plm-micro", "gqa-micro")])
@pytest.mark.parametrize("io", [1e6, 1e9, 1e10, 3e10, 1e11])
def test_crossover_matches_grid(pair, io):
    m, g = (get_preset(p) for p in pair)
    prof = HardwareProfile("synthetic", io, 1e12)
    got = latency_crossover(m, g, prof, n_max=400)
    assert got == grid_crossover(m, g, prof, 400)


def test_crossover_found_for_fast_io():
    prof = HardwareProfile("synthetic", 1e11, 1e12)
    assert latency_crossover(get_preset("plm-1.8b"), get_preset("plm-1.8b-gqa"), prof) is not None


def test_profile_and_dominant():
    with pytest.raises(ValueError):
        HardwareProfile("bad", 0, 1)
    cfg = get_preset("plm-1.8b")
    for io, fl in ((1.0, 1e30), (1e30, 1.0)):
        rep = generate_cost(cfg, 64, profile=HardwareProfile("x", io, fl))
        assert rep.io_seconds == rep.cache_bytes / io
        assert rep.compute_seconds == rep.flops / fl
        assert rep.dominant == ("io" if rep.io_seconds > rep.compute_seconds else "compute")


def test_search_candidates_params_and_macs():
    for i, name in enumerate(sorted(CANDIDATES)):
        cfg = CANDIDATES[name]
        _, non = count_params(cfg)
        assert abs(non / 1e9 - PUBLISHED_PARAMS_B[i]) / PUBLISHED_PARAMS_B[i] <= 0.03, name
        rep = prefill_cost(cfg, 128)
        assert abs(rep.macs / 1e9 - PUBLISHED_GMACS[i]) / PUBLISHED_GMACS[i] <= 0.03, name
        assert rep.flops == 2 * rep.macs


def test_rank_architectures():
    rows = rank_architectures(CANDIDATES)
    assert [r["rank"] for r in rows] == list(range(1, 8))
    assert [r["macs"] for r in rows] == sorted(r["macs"] for r in rows)
    assert all(r["flops"] == 2 * r["macs"] for r in rows)
    assert rows[0]["name"] == "cand-2"
    one = rank_architectures([get_preset("plm-micro")])
    assert one[0]["rank"] == 1 and one[0]["name"] == "cand-1"
    # identical candidates keep input order
    same = rank_architectures({"b": CANDIDATES["cand-1"], "a": CANDIDATES["cand-1"]})
    assert [r["name"] for r in same] == ["b", "a"]
    with pytest.raises(ValueError):
        rank_architectures([])
    with pytest.raises(ValueError):
        rank_architectures(CANDIDATES, sort_key="speed")
