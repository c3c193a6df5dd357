"""Baseline-vs-folding experiment runner and its file outputs."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from . import metrics as M
from .folding import ConfigError
from .linalg import Rng, pca_project
from .model import (
    ModelConfig,
    OptimizerState,
    TrainingError,
    forward,
    generate,
    init_params,
    logits_batch,
    save_params,
    train_step,
)

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
ABLATIONS = ("attraction", "cohesion", "laplacian", "gate")


@dataclass
class TrainingConfig:
    epochs: int = 3
    batch_size: int = 16
    window: int = 128
    seed: int = 0
    lr: float = 1e-3
    clip_norm: float = 1.0
    center_refresh: int = 50


@dataclass
class MetricsConfig:
    tau: float = 0.5
    eps: float = 1e-3
    stride: Optional[int] = None
    eval_windows: int = 8
    reorder_prompts: list = field(default_factory=list)  # strings; empty = drawn from held-out text
    reorder_prompt_len: int = 32
    reorder_count: int = 4
    reorder_new: int = 48


@dataclass
class RunConfig:
    model: ModelConfig
    data: dict  # category -> file or directory
    training: TrainingConfig = field(default_factory=TrainingConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    output_dir: str = "out"
    ablation: Optional[str] = None

    def __post_init__(self):
        if not self.data:
            raise ConfigError("at least one corpus category is required")
        if self.training.window > self.model.max_seq:
            raise ConfigError("training window exceeds model max_seq")
        if self.ablation is not None and self.ablation not in ABLATIONS:
            raise ConfigError(f"unknown ablation {self.ablation!r}; choose from {ABLATIONS}")

    @classmethod
    def from_dict(cls, raw: dict, base_dir=".") -> "RunConfig":
        if raw.get("schema_version") != SCHEMA_VERSION:
            raise ConfigError(f"schema_version must be {SCHEMA_VERSION}")
        if "seed" not in raw.get("training", {}):
            raise ConfigError("training.seed is required")
        base = Path(base_dir)
        data = {k: str(base / v) for k, v in raw.get("data", {}).items()}
        model = ModelConfig.from_dict(raw.get("model", {}))
        training = TrainingConfig(**raw["training"])
        cfg = cls(model=model, data=data, training=training,
                  metrics=MetricsConfig(**raw.get("metrics", {})),
                  output_dir=str(base / raw.get("output_dir", "out")),
                  ablation=raw.get("ablation"))
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        with open(path) as fh:
            raw = json.load(fh)
        return cls.from_dict(raw, path.parent)

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "model": self.model.to_dict(),
            "data": dict(sorted(self.data.items())),
            "training": vars(self.training).copy(),
            "metrics": vars(self.metrics).copy(),
            "output_dir": self.output_dir,
            "ablation": self.ablation,
        }

    def with_overrides(self, seed=None, out=None, ablate=None) -> "RunConfig":
        cfg = self
        if seed is not None:
            cfg = replace(cfg, model=replace(cfg.model, seed=seed),
                          training=replace(cfg.training, seed=seed))
        if out is not None:
            cfg = replace(cfg, output_dir=str(out))
        if ablate is not None:
            cfg = replace(cfg, ablation=ablate)
        return cfg

    def variant(self, fold: bool) -> ModelConfig:
        """Model config for the baseline (fold=False) or folding run, ablation applied."""
        m = replace(self.model, fold_enabled=fold)
        if not fold or self.ablation is None:
            return m
        f = m.folding
        if self.ablation == "attraction":
            return replace(m, folding=replace(f, alpha=0.0))
        if self.ablation == "cohesion":
            return replace(m, folding=replace(f, gamma=0.0))
        if self.ablation == "laplacian":
            return replace(m, folding=replace(f, beta=0.0))
        return replace(m, frozen_gate=1.0)


@dataclass
class Dataset:
    train: np.ndarray
    heldout: np.ndarray


def _read_source(path: Path) -> bytes:
    if path.is_dir():
        files = sorted(p for p in path.rglob("*") if p.is_file())
        return b"".join(p.read_bytes() for p in files)
    return path.read_bytes()


def load_corpus(paths: dict) -> dict:
    """Byte-tokenise each category and split 90/10 (held-out = contiguous suffix)."""
    out = {}
    for cat in sorted(paths):
        p = Path(paths[cat])
        if not p.exists():
            raise FileNotFoundError(f"corpus path not found: {p}")
        ids = np.frombuffer(_read_source(p), dtype=np.uint8).astype(np.int64)
        if ids.size == 0:
            raise ConfigError(f"corpus {cat!r} at {p} is empty")
        cut = ids.size * 9 // 10
        out[cat] = Dataset(ids[:cut], ids[cut:])
    return out


def make_windows(ids: np.ndarray, window: int) -> np.ndarray:
    n = (ids.size - 1) // window
    if n <= 0:
        return np.zeros((0, window + 1), dtype=np.int64)
    return np.stack([ids[i * window:i * window + window + 1] for i in range(n)])


def batch_schedule(windows: np.ndarray, batch_size: int, seed: int, epoch: int):
    """Deterministic shuffled batches for one epoch; identical for every variant."""
    perm = Rng(seed * 1_000_003 + epoch).permutation(len(windows))
    for s in range(0, len(perm), batch_size):
        yield windows[perm[s:s + batch_size]]


@dataclass
class ComparisonResult:
    baseline: M.MetricsReport
    folding: M.MetricsReport
    deltas: dict
    extras: dict = field(default_factory=dict)
    timing: dict = field(default_factory=dict)
    partial: bool = False


def _pct_change(base, new):
    if base is None or new is None or not math.isfinite(base) or not math.isfinite(new) or base == 0:
        return None
    return 100.0 * (new - base) / base


def _eval_windows(data: dict, window: int, count: int) -> list:
    wins = []
    for cat in sorted(data):
        ho = data[cat].heldout
        for k in range(count):
            w = ho[k * window:(k + 1) * window]
            if w.size >= 2:
                wins.append(w)
    return wins


def _reorder_prompts(cfg: RunConfig, data: dict) -> dict:
    """Per category: list of (prompt ids, reference continuation ids)."""
    mc = cfg.metrics
    out = {}
    for cat in sorted(data):
        ho = data[cat].heldout
        items = []
        if mc.reorder_prompts:
            for text in mc.reorder_prompts:
                items.append((list(text.encode("utf-8")), []))
        else:
            span = mc.reorder_prompt_len + mc.reorder_new
            for k in range(mc.reorder_count):
                seg = ho[k * span:(k + 1) * span]
                if seg.size < mc.reorder_prompt_len + 2:
                    break
                items.append((seg[:mc.reorder_prompt_len].tolist(), seg[mc.reorder_prompt_len:].tolist()))
        out[cat] = items
    return out


def _report(params, mcfg: ModelConfig, cfg: RunConfig, data: dict, evals: list) -> M.MetricsReport:
    traces = [forward(params, mcfg, w)[1] for w in evals]
    tm = M.trace_metrics(traces, mcfg.n_layers, cfg.metrics.tau, cfg.metrics.eps)
    ppl = {cat: M.perplexity(params, mcfg, data[cat].heldout, cfg.metrics.stride) for cat in sorted(data)}
    return M.MetricsReport(variance=tm["variance"], head_utilization=tm["head_utilization"],
                           sparsity=tm["sparsity"], perplexity=ppl, config=mcfg.to_dict())


def _continuations(params, mcfg, prompts: dict, n_new: int) -> dict:
    return {cat: [generate(params, mcfg, p, n_new)[len(p):] for p, _ in items]
            for cat, items in prompts.items()}


def _reorder_vs_reference(conts: dict, prompts: dict) -> dict:
    out = {}
    for cat, items in prompts.items():
        vals = [M.token_reordering_frequency(c, ref) for c, (_, ref) in zip(conts[cat], items) if ref and c]
        out[cat] = float(np.mean(vals)) if vals else None
    return out


def run_experiment(cfg: RunConfig, write: bool = True) -> ComparisonResult:
    """Train baseline and folding models on identical batches and compare them.

    Epochs of the two variants are interleaved so that machine-load drift
    affects both timings alike.
    """
    tc = cfg.training
    data = load_corpus(cfg.data)
    windows = np.concatenate([make_windows(d.train, tc.window) for d in data.values()])
    if len(windows) == 0:
        raise ConfigError("training split is shorter than one window")
    evals = _eval_windows(data, tc.window, cfg.metrics.eval_windows)
    prompts = _reorder_prompts(cfg, data)

    variants = {"baseline": cfg.variant(False), "folding": cfg.variant(True)}
    params = {k: init_params(m) for k, m in variants.items()}
    opts = {k: OptimizerState(lr=tc.lr, clip_norm=tc.clip_norm, center_refresh=tc.center_refresh)
            for k in variants}
    hashes = {k: hashlib.sha256() for k in variants}
    seconds = {k: [] for k in variants}
    history = {k: [] for k in variants}

    init_diff = max(
        float((logits_batch(params["baseline"], variants["baseline"], w)
               - logits_batch(params["folding"], variants["folding"], w)).abs().max())
        for w in evals) if evals else 0.0

    partial, error = False, None
    try:
        for epoch in range(tc.epochs):
            for name, mcfg in variants.items():
                p, opt = params[name], opts[name]
                losses = []
                start = time.perf_counter()
                for batch in batch_schedule(windows, tc.batch_size, tc.seed, epoch):
                    hashes[name].update(batch.tobytes())
                    _, value = train_step(p, mcfg, torch.as_tensor(batch), opt)
                    losses.append(value)
                seconds[name].append(time.perf_counter() - start)
                heldout = {cat: M.mean_nll(p, mcfg, data[cat].heldout, cfg.metrics.stride) for cat in sorted(data)}
                history[name].append({"epoch": epoch + 1, "train_nll": float(np.mean(losses)),
                                      "heldout_nll": heldout})
                log.info("%s epoch %d: train nll %.4f (%.1fs)", name, epoch + 1,
                         np.mean(losses), seconds[name][-1])
    except TrainingError as exc:
        partial, error = True, str(exc)
        log.error("training aborted: %s", exc)

    reports = {k: _report(params[k], variants[k], cfg, data, evals) for k in variants}
    conts = {k: _continuations(params[k], variants[k], prompts, cfg.metrics.reorder_new) for k in variants}
    for k in variants:
        reports[k].reordering = _reorder_vs_reference(conts[k], prompts)
        reports[k].epoch_seconds = seconds[k]
        reports[k].validate()
    cross = {}
    for cat in prompts:
        vals = [M.token_reordering_frequency(a, b)
                for a, b in zip(conts["baseline"][cat], conts["folding"][cat]) if a and b]
        cross[cat] = float(np.mean(vals)) if vals else None

    b, f = reports["baseline"], reports["folding"]
    deltas = {
        "variance_change_pct": [_pct_change(x, y) for x, y in zip(b.variance, f.variance)],
        "head_utilization_change_pct": [_pct_change(x, y) for x, y in zip(b.head_utilization, f.head_utilization)],
        "sparsity_change_pct": [_pct_change(x, y) for x, y in zip(b.sparsity, f.sparsity)],
        "perplexity_delta": {c: f.perplexity[c] - b.perplexity[c] for c in b.perplexity},
        "perplexity_change_pct": {c: _pct_change(b.perplexity[c], f.perplexity[c]) for c in b.perplexity},
        "reordering_change_pct": {c: _pct_change(b.reordering[c], f.reordering[c]) for c in b.reordering},
    }
    digests = {k: h.hexdigest() for k, h in hashes.items()}
    extras = {
        "ablation": cfg.ablation or "none",
        "init_logit_max_abs_diff": init_diff,
        "batch_digest": digests,
        "same_batches": digests["baseline"] == digests["folding"],
        "cross_model_reordering": cross,
        "history": history,
        "gates": {name: float(t.detach()) for name, t in params["folding"].items() if name.endswith("fold.gate")},
        "config": cfg.to_dict(),
    }
    if error:
        extras["error"] = error
    timing = {"baseline_epoch_seconds": seconds["baseline"], "folding_epoch_seconds": seconds["folding"]}
    if seconds["baseline"] and len(seconds["baseline"]) == len(seconds["folding"]):
        timing["overhead_pct"] = M.training_overhead(seconds["baseline"], seconds["folding"])
    result = ComparisonResult(b, f, deltas, extras, timing, partial)
    if write:
        out = Path(cfg.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        emit_tables(result, out)
        for k in variants:
            save_params(params[k], variants[k], out / f"{k}.ckpt")
    if error:
        raise TrainingError(error)
    return result


# ---- serialisation -------------------------------------------------------

def _fmt(x) -> str:
    if isinstance(x, bool) or x is None:
        return json.dumps(x)
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        x = float(x)
        if not math.isfinite(x):
            return "null"
        s = f"{x:.6f}"
        return "0.000000" if s == "-0.000000" else s
    if isinstance(x, str):
        return json.dumps(x)
    if isinstance(x, dict):
        items = [f"{json.dumps(str(k))}: {_fmt(v)}" for k, v in sorted(x.items(), key=lambda kv: str(kv[0]))]
        return "{" + ", ".join(items) + "}"
    if isinstance(x, (list, tuple)):
        return "[" + ", ".join(_fmt(v) for v in x) + "]"
    raise TypeError(f"cannot serialise {type(x).__name__}")


def dumps_fixed(obj) -> str:
    """JSON with sorted keys and every float printed with exactly six decimals."""
    return _fmt(obj) + "\n"


def _csv_rows(keys, base, hfu, warnings, table):
    rows = ["{},baseline,hfu,change_pct".format("layer" if table != "reorder" else "category")]
    for k, x, y in zip(keys, base, hfu):
        change = _pct_change(x, y)
        if x is None or y is None or change is None:
            warnings.append({"table": table, "row": str(k), "reason": "metric undefined"})
            continue
        rows.append(f"{k},{x:.6f},{y:.6f},{change:.6f}")
    return "\n".join(rows) + "\n"


def emit_tables(result: ComparisonResult, out_dir) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    b, f = result.baseline, result.folding
    warnings = []
    layers = list(range(len(b.variance)))
    cats = sorted(b.reordering)
    files = {
        "variance.csv": _csv_rows(layers, b.variance, f.variance, warnings, "variance"),
        "heads.csv": _csv_rows(layers, b.head_utilization, f.head_utilization, warnings, "heads"),
        "sparsity.csv": _csv_rows(layers, b.sparsity, f.sparsity, warnings, "sparsity"),
        "reorder.csv": _csv_rows(cats, [b.reordering[c] for c in cats], [f.reordering[c] for c in cats],
                                 warnings, "reorder"),
        "perplexity.csv": _csv_rows(sorted(b.perplexity), [b.perplexity[c] for c in sorted(b.perplexity)],
                                    [f.perplexity[c] for c in sorted(f.perplexity)], warnings, "perplexity"),
    }
    files["perplexity.csv"] = files["perplexity.csv"].replace("layer,", "category,", 1)
    doc = {
        "baseline": _report_dict(b),
        "folding": _report_dict(f),
        "deltas": result.deltas,
        "partial": result.partial,
        "warnings": warnings,
        **result.extras,
    }
    files["metrics.json"] = dumps_fixed(doc)
    files["timing.json"] = dumps_fixed(result.timing)
    paths = {}
    for name, text in files.items():
        (out / name).write_text(text)
        paths[name] = out / name
    return paths


def _report_dict(r: M.MetricsReport) -> dict:
    return {"variance": r.variance, "head_utilization": r.head_utilization, "sparsity": r.sparsity,
            "perplexity": r.perplexity, "reordering": r.reordering}


def read_table(path) -> list[dict]:
    """Parse one of the emitted CSV tables back into rows of floats."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        key = reader.fieldnames[0]
        return [{k: (v if k == key else float(v)) for k, v in row.items()} for row in reader]


def export_projection(trace, layer: int, path) -> Path:
    """Write the 2-D PCA projection of a layer's residual activations as CSV."""
    X = np.asarray(trace.residual[layer])
    if X.shape[0] < 2:
        raise M.MetricError("projection needs at least two tokens")
    P = pca_project(X, 2)
    tokens = trace.tokens if trace.tokens is not None else list(range(X.shape[0]))
    lines = ["token,x,y"] + [f"{int(t)},{x:.6f},{y:.6f}" for t, (x, y) in zip(tokens, P)]
    path = Path(path)
    path.write_text("\n".join(lines) + "\n")
    return path
