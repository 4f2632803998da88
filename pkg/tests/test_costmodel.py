import math

import pytest
from hypothesis import given, settings, strategies as st

from shotpack.costmodel import (CITED_CONSTANTS, CostError, CostParams, TYPICAL, attention_pairs,
                                cost_report, format_table, humanize, inference_complexity,
                                task_level_tokens, training_tokens)

# frozen from an independent hand computation with K = 1000
FROZEN = {
    "mask_all": 70_000 * 32_000,                     # 2.24e9
    "mask_last_full_window": 70_000 * 32_000 * 106,  # 2.3744e11
    "mask_last_exact": 70_000 * 32_000 * 107 / 2,
    "task_level": 1_000 * 4_000 * 8_000,             # 3.2e10
}


def test_typical_training_tokens():
    assert training_tokens("mask_all", TYPICAL) == FROZEN["mask_all"]
    assert training_tokens("autoregressive", TYPICAL) == FROZEN["mask_all"]
    assert training_tokens("mask_last", TYPICAL) == FROZEN["mask_last_full_window"]
    assert training_tokens("mask_last", TYPICAL, "exact") == FROZEN["mask_last_exact"]
    assert task_level_tokens(TYPICAL) == FROZEN["task_level"]


def test_typical_report_strings_and_ratios():
    r = cost_report(TYPICAL)
    h = r["training_tokens_human"]
    assert (h["mask_all"], h["mask_last_full_window"], r["task_level_tokens_human"]) == \
        ("2.2B", "237B", "32B")
    red = r["reduction_factors"]
    assert red["mask_last_full_window_over_mask_all"] == 106
    assert math.isclose(red["task_level_over_mask_all"], 3.2e10 / 2.24e9)
    assert round(red["task_level_over_mask_all"], 1) == 14.3
    assert r["inference"]["few"]["relative"] == 0.0025
    assert r["inference"]["many_cache"]["relative"] == 0.01
    assert r["inference"]["many_no_cache"]["relative"] == 1.0
    assert round(r["development_hours"]["ratio"], 1) == 14.3
    assert r["adapters"] == {"task_level_sft": 1000.0, "many_shot_meta_sft": 1}
    assert r["cited_constants"] == CITED_CONSTANTS
    assert r["relative_inference_time"] == {"task_level_sft": 1.0, "many_shot_meta_sft": 0.8}
    assert any("n=100" in n for n in r["notes"])
    assert "237B" in format_table(r)


def test_binary_k():
    p = CostParams(binary_k=True)
    assert training_tokens("mask_all", p) == 70 * 1024 * 32 * 1024


def test_humanize():
    assert [humanize(x) for x in (2.24e9, 2.3744e11, 3.2e10, 950, 1.5e3, 1e12)] == \
        ["2.2B", "237B", "32B", "950", "1.5K", "1.0T"]


def test_errors_and_warnings():
    with pytest.raises(CostError):
        training_tokens("nope", TYPICAL)
    with pytest.raises(CostError):
        training_tokens("mask_last", TYPICAL, "nope")
    with pytest.raises(CostError):
        training_tokens("mask_last", CostParams(n=None))
    with pytest.raises(CostError):
        CostParams(n_w=-1)
    with pytest.raises(CostError):
        inference_complexity("nope", TYPICAL)
    assert CostParams(k=30, n=10).regime_warnings() == [
        "k=30 is outside the few-shot range (1..20)", "n=10 is not many-shot (needs n > 20)"]
    r = cost_report(CostParams(n=None, n_inference=None))
    assert "mask_last_full_window" not in r["training_tokens"] and r["inference"] == {}


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 300), st.integers(0, 300))
def test_attention_pair_formulas(n1, n2):
    # brute-force count of (query, key) pairs with key <= query
    def count(queries, offset):
        return sum(offset + i + 1 for i in range(queries))

    assert attention_pairs(n1, n2, cached=True) == count(n2, n1)
    assert attention_pairs(n1, n2, cached=False) == count(n1 + n2, 0)
    assert attention_pairs(n1, n2, True) <= attention_pairs(n1, n2, False)


@settings(max_examples=50, deadline=None)
@given(st.floats(1, 1e3), st.floats(1, 1e3), st.integers(1, 500))
def test_mask_last_scales_with_shots(n_meta, n_w, n):
    p = CostParams(n_meta=n_meta, n_w=n_w, n=n)
    assert math.isclose(training_tokens("mask_last", p) / training_tokens("mask_all", p), n)
    assert training_tokens("mask_last", p, "exact") <= training_tokens("mask_last", p) or n == 1
