"""Measurements over forward traces and trained models."""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from .model import ForwardTrace, ModelConfig, _forward, loss


class MetricError(ValueError):
    """Raised when a metric is undefined for its input."""


@dataclass
class MetricsReport:
    variance: list = field(default_factory=list)  # per layer
    head_utilization: list = field(default_factory=list)  # per layer, percent
    sparsity: list = field(default_factory=list)  # per layer, fraction
    perplexity: dict = field(default_factory=dict)  # per corpus category
    reordering: dict = field(default_factory=dict)  # per category, percent
    epoch_seconds: list = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def validate(self):
        for p in self.head_utilization:
            assert 0.0 <= p <= 100.0, p
        for f in self.sparsity:
            assert 0.0 <= f <= 1.0, f
        for v in self.perplexity.values():
            assert v >= 1.0 or math.isclose(v, 1.0), v
        for p in self.reordering.values():
            if p is None:
                continue
            assert 0.0 <= p <= 100.0, p
        return self


def intra_layer_variance(trace: ForwardTrace, layer: int) -> float:
    """Mean squared distance of token activations to their centroid, per feature."""
    X = np.asarray(trace.residual[layer])
    n, d = X.shape
    if n < 2:
        raise MetricError("variance needs at least two tokens")
    C = X - X.mean(axis=0)
    return float(np.sum(C * C) / (n * d))


def attention_head_utilization(trace: ForwardTrace, layer: int, tau: float = 0.5) -> float:
    """Percentage of heads whose mean share of per-token output norm is >= tau / H."""
    if not 0 < tau <= 1:
        raise ValueError("tau must lie in (0, 1]")
    heads = np.asarray(trace.head_outputs[layer])  # H, T, d
    H = heads.shape[0]
    norms = np.linalg.norm(heads, axis=-1)  # H, T
    total = norms.sum(axis=0)
    live = total > 0
    if not live.any():
        return 0.0
    share = (norms[:, live] / total[live]).mean(axis=1)
    active = int(np.sum(share >= (tau / H) * (1 - 1e-12)))
    return 100.0 * active / H


def activation_sparsity(trace: ForwardTrace, layer: int, eps: float = 1e-3) -> float:
    if not eps > 0:
        raise ValueError("eps must be positive")
    a = np.asarray(trace.ffn[layer])
    return float(np.mean(np.abs(a) < eps))


def perplexity(params: dict, cfg: ModelConfig, corpus: Sequence[int], stride: int | None = None,
               batch_size: int = 16) -> float:
    """exp of the token-averaged next-token NLL over windows of ``max_seq`` inputs.

    Windows start every ``stride`` tokens (default ``max_seq``, so each target
    is scored exactly once); the last window may be shorter.
    """
    ids = np.asarray(corpus, dtype=np.int64)
    if ids.size < 2:
        raise MetricError("perplexity needs at least two tokens")
    return math.exp(mean_nll(params, cfg, ids, stride, batch_size))


def mean_nll(params, cfg, ids, stride=None, batch_size=16) -> float:
    T = cfg.max_seq
    stride = stride or T
    by_len = defaultdict(list)
    for s in range(0, ids.size - 1, stride):
        w = ids[s:s + T + 1]
        if w.size >= 2:
            by_len[w.size].append(w)
    total, count = 0.0, 0
    with torch.no_grad():
        for length in sorted(by_len):
            wins = np.stack(by_len[length])
            for k in range(0, len(wins), batch_size):
                chunk = torch.as_tensor(wins[k:k + batch_size])
                logits, _ = _forward(params, cfg, chunk[:, :-1])
                n = chunk[:, 1:].numel()
                total += float(loss(logits, chunk[:, 1:])) * n
                count += n
    return total / count


@dataclass
class ReorderPairing:
    """Matched positions (pos_a, pos_b): k-th occurrence of a token id in A with k-th in B."""

    pairs: list

    @classmethod
    def match(cls, seq_a, seq_b) -> "ReorderPairing":
        where_b = defaultdict(list)
        for j, t in enumerate(seq_b):
            where_b[int(t)].append(j)
        seen = defaultdict(int)
        pairs = []
        for i, t in enumerate(seq_a):
            t = int(t)
            k = seen[t]
            if k < len(where_b[t]):
                pairs.append((i, where_b[t][k]))
            seen[t] += 1
        return cls(pairs)

    def inversions(self) -> int:
        if len(self.pairs) < 2:
            return 0
        P = np.asarray(self.pairs)
        da = np.sign(P[:, None, 0] - P[None, :, 0])
        db = np.sign(P[:, None, 1] - P[None, :, 1])
        return int(np.sum(np.triu(da * db < 0, 1)))


def token_reordering_frequency(seq_a, seq_b) -> float:
    """Percentage of matched token pairs whose relative order differs."""
    if not len(seq_a) or not len(seq_b):
        raise ValueError("sequences must be nonempty")
    pairing = ReorderPairing.match(seq_a, seq_b)
    m = len(pairing.pairs)
    if m < 2:
        return 0.0
    return 100.0 * pairing.inversions() / (m * (m - 1) / 2)


def training_overhead(baseline_epochs, folding_epochs) -> float:
    base, fold = list(baseline_epochs), list(folding_epochs)
    if not base or len(base) != len(fold):
        raise ValueError("need equal, nonzero epoch counts")
    mb = float(np.mean(base))
    if mb == 0:
        raise MetricError("baseline epoch time is zero")
    return 100.0 * (float(np.mean(fold)) - mb) / mb


def trace_metrics(traces: Sequence[ForwardTrace], n_layers: int, tau: float, eps: float) -> dict:
    """Per-layer variance, head utilisation and sparsity averaged over traces."""
    out = {"variance": [], "head_utilization": [], "sparsity": []}
    for l in range(n_layers):
        out["variance"].append(float(np.mean([intra_layer_variance(t, l) for t in traces])))
        out["head_utilization"].append(float(np.mean([attention_head_utilization(t, l, tau) for t in traces])))
        out["sparsity"].append(float(np.mean([activation_sparsity(t, l, eps) for t in traces])))
    return out
