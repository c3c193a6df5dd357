import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from latentfold.linalg import Rng
from latentfold.metrics import (
    MetricError,
    MetricsReport,
    ReorderPairing,
    activation_sparsity,
    attention_head_utilization,
    intra_layer_variance,
    mean_nll,
    perplexity,
    token_reordering_frequency,
    trace_metrics,
    training_overhead,
)
from latentfold.model import ForwardTrace, ModelConfig, _forward, init_params, loss


def make_trace(residual=None, heads=None, ffn=None):
    wrap = lambda a: [np.asarray(a, dtype=float)] if a is not None else [np.zeros((2, 2))]
    return ForwardTrace(residual=wrap(residual), attention=[], head_outputs=wrap(heads), ffn=wrap(ffn),
                        logits=np.zeros((1, 1)))


def zero_model(vocab=256, max_seq=16):
    cfg = ModelConfig(vocab_size=vocab, d_model=8, n_layers=1, n_heads=2, d_ff=8, max_seq=max_seq)
    params = init_params(cfg)
    with torch.no_grad():
        for t in params.values():
            t.zero_()
    return params, cfg


# -- variance ---------------------------------------------------------------

def test_variance_examples():
    assert intra_layer_variance(make_trace(residual=np.ones((5, 3)) * 2.5), 0) == 0.0
    assert intra_layer_variance(make_trace(residual=[[1.0, 0.0], [-1.0, 0.0]]), 0) == pytest.approx(0.5, abs=1e-15)
    X = Rng(0).gaussian((9, 4))
    v = intra_layer_variance(make_trace(residual=X), 0)
    assert abs(intra_layer_variance(make_trace(residual=2 * X), 0) - 4 * v) < 1e-10
    with pytest.raises(MetricError):
        intra_layer_variance(make_trace(residual=[[1.0, 2.0]]), 0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(-100, 100))
def test_variance_translation_invariant(seed, shift):
    X = Rng(seed).gaussian((7, 3))
    a = intra_layer_variance(make_trace(residual=X), 0)
    b = intra_layer_variance(make_trace(residual=X + shift), 0)
    assert abs(a - b) < 1e-10


def test_variance_matches_direct_formula():
    X = Rng(1).gaussian((6, 5))
    mean = X.mean(axis=0)
    direct = sum(float(np.sum((x - mean) ** 2)) for x in X) / X.size
    assert intra_layer_variance(make_trace(residual=X), 0) == pytest.approx(direct, rel=1e-13)


# -- head utilisation -------------------------------------------------------

def test_head_utilization_examples():
    same = np.tile(Rng(2).gaussian((1, 5, 4)), (4, 1, 1))
    assert attention_head_utilization(make_trace(heads=same), 0, 1.0) == 100.0
    one = np.zeros((8, 5, 4))
    one[3] = Rng(3).gaussian((5, 4))
    assert attention_head_utilization(make_trace(heads=one), 0, 0.5) == 12.5
    assert attention_head_utilization(make_trace(heads=Rng(4).gaussian((6, 5, 4))), 0, 1e-9) == 100.0
    with pytest.raises(ValueError):
        attention_head_utilization(make_trace(heads=same), 0, 0.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_head_utilization_monotone_in_tau(seed):
    rng = Rng(seed)
    heads = rng.gaussian((8, 6, 4)) * rng.uniform((8, 1, 1)) * 3
    vals = [attention_head_utilization(make_trace(heads=heads), 0, t) for t in np.linspace(0.05, 1, 20)]
    assert all(b <= a for a, b in zip(vals, vals[1:]))
    assert all(0 <= v <= 100 for v in vals)


# -- sparsity ---------------------------------------------------------------

def test_sparsity_examples():
    pre = -np.abs(Rng(5).gaussian((4, 6))) - 0.1
    assert activation_sparsity(make_trace(ffn=np.maximum(pre, 0)), 0) == 1.0
    assert activation_sparsity(make_trace(ffn=np.zeros((3, 3))), 0) == 1.0
    assert activation_sparsity(make_trace(ffn=np.ones((3, 3))), 0, 1e-3) == 0.0
    half = np.array([[0.0, 1.0], [1.0, 0.0], [0.0, 1.0]])
    assert activation_sparsity(make_trace(ffn=half), 0) == 0.5
    with pytest.raises(ValueError):
        activation_sparsity(make_trace(ffn=half), 0, 0.0)


# -- perplexity -------------------------------------------------------------

def test_uniform_model_perplexity_is_vocab_size():
    params, cfg = zero_model()
    corpus = Rng(0).integers(256, 100)
    assert abs(perplexity(params, cfg, corpus) - 256.0) <= 1e-9 * 256


def test_perplexity_equals_exp_loss_on_same_windows():
    cfg = ModelConfig(vocab_size=32, d_model=8, n_layers=1, n_heads=2, d_ff=8, max_seq=8, seed=3)
    params = init_params(cfg)
    corpus = Rng(1).integers(32, 8 * 5 + 1)  # five full windows, no ragged tail
    wins = torch.as_tensor(np.stack([corpus[s:s + 9] for s in range(0, 40, 8)]))
    with torch.no_grad():
        logits, _ = _forward(params, cfg, wins[:, :-1])
    expected = math.exp(float(loss(logits, wins[:, 1:])))
    assert abs(perplexity(params, cfg, corpus) - expected) <= 1e-12 * expected


def test_perplexity_token_weighted_with_tail():
    cfg = ModelConfig(vocab_size=32, d_model=8, n_layers=1, n_heads=2, d_ff=8, max_seq=8, seed=4)
    params = init_params(cfg)
    corpus = Rng(2).integers(32, 21)
    total, n = 0.0, 0
    for s in range(0, 20, 8):
        w = torch.as_tensor(corpus[s:s + 9])[None]
        with torch.no_grad():
            logits, _ = _forward(params, cfg, w[:, :-1])
        total += float(loss(logits, w[:, 1:])) * (w.shape[1] - 1)
        n += w.shape[1] - 1
    assert n == 20
    assert mean_nll(params, cfg, corpus) == pytest.approx(total / n, rel=1e-12)
    with pytest.raises(MetricError):
        perplexity(params, cfg, [3])


# -- reordering -------------------------------------------------------------

def test_reordering_examples():
    a, b, c = 1, 2, 3
    assert token_reordering_frequency([a, b, c, a], [a, b, c, a]) == 0.0
    assert token_reordering_frequency([a, b], [b, a]) == 100.0
    assert token_reordering_frequency([a, b, c], [a, c, b]) == pytest.approx(100 / 3, abs=0.01)
    assert token_reordering_frequency([a], [a, b]) == 0.0
    with pytest.raises(ValueError):
        token_reordering_frequency([], [a])


def test_pairing_uses_occurrence_index():
    p = ReorderPairing.match([5, 5, 7, 5], [5, 7, 5])
    assert p.pairs == [(0, 0), (1, 2), (2, 1)]
    assert len({i for i, _ in p.pairs}) == len(p.pairs) == len({j for _, j in p.pairs})


def brute_inversions(A, B):
    pairs = ReorderPairing.match(A, B).pairs
    return sum(1 for x in range(len(pairs)) for y in range(x + 1, len(pairs))
               if (pairs[x][0] - pairs[y][0]) * (pairs[x][1] - pairs[y][1]) < 0)


seqs = st.lists(st.integers(0, 5), min_size=1, max_size=20)


@settings(max_examples=80, deadline=None)
@given(seqs, seqs)
def test_reordering_symmetric_and_bounded(A, B):
    f = token_reordering_frequency(A, B)
    assert f == token_reordering_frequency(B, A)
    assert 0.0 <= f <= 100.0
    assert ReorderPairing.match(A, B).inversions() == brute_inversions(A, B)


@settings(max_examples=80, deadline=None)
@given(seqs, seqs, st.lists(st.integers(10, 15), max_size=8))
def test_common_fresh_suffix_adds_no_inversions(A, B, suffix):
    # a suffix of tokens absent from both sequences is matched in place and never inverted
    base = ReorderPairing.match(A, B).inversions()
    assert ReorderPairing.match(A + suffix, B + suffix).inversions() == base


# -- overhead / report ------------------------------------------------------

def test_overhead_examples():
    assert training_overhead([3.0, 3.0], [3.0, 3.0]) == 0.0
    assert training_overhead([100.0, 100.0], [104.7, 104.7]) == pytest.approx(4.7, abs=1e-9)
    assert training_overhead([10.0], [9.0]) < 0
    with pytest.raises(MetricError):
        training_overhead([0.0], [1.0])
    with pytest.raises(ValueError):
        training_overhead([1.0], [1.0, 2.0])


def test_trace_metrics_and_report_ranges():
    from latentfold.model import forward

    cfg = ModelConfig(vocab_size=64, d_model=16, n_layers=2, n_heads=4, d_ff=32, max_seq=16)
    params = init_params(cfg)
    traces = [forward(params, cfg, Rng(s).integers(64, 16))[1] for s in range(3)]
    tm = trace_metrics(traces, 2, 0.5, 1e-3)
    assert tm == trace_metrics(traces, 2, 0.5, 1e-3)
    report = MetricsReport(variance=tm["variance"], head_utilization=tm["head_utilization"],
                           sparsity=tm["sparsity"], perplexity={"x": 60.0}, reordering={"x": None})
    report.validate()
    with pytest.raises(AssertionError):
        MetricsReport(sparsity=[1.5]).validate()
