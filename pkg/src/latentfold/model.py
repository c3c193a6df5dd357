"""Small pre-norm decoder-only transformer with gated folding modules.

Parameters live in a flat ``dict[str, torch.Tensor]`` (float64). The same
code path serves the baseline (``fold_enabled=False``) and the folding
variant; folding modules sit on the residual stream right after the
feed-forward addition of each selected layer and start out as the identity
(gate 0).
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .folding import FoldingConfig, FoldingLayer, assign_clusters, update_centers
from .linalg import NORM_GUARD, Rng

DTYPE = torch.float64
INIT_STD = 0.02
FOLD_SEED_SALT = 0x9E3779B97F4A7C15


class LengthError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


class FormatError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 256
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 256
    max_seq: int = 128
    fold_enabled: bool = False
    fold_layers: Optional[tuple] = None  # None = first interior layer
    folding: FoldingConfig = field(default_factory=FoldingConfig)
    seed: int = 0
    frozen_gate: Optional[float] = None  # pin gates to this value (ablation)
    fold_reg: float = 0.01  # weight of the structural penalty on fold-layer outputs

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.fold_layers is not None:
            layers = tuple(sorted({int(i) for i in self.fold_layers}))
            if any(not 0 <= i < self.n_layers for i in layers):
                raise ValueError(f"fold_layers must lie in [0, {self.n_layers})")
            object.__setattr__(self, "fold_layers", layers)

    @property
    def folded(self) -> tuple:
        if not self.fold_enabled:
            return ()
        if self.fold_layers is not None:
            return self.fold_layers
        return (1,) if self.n_layers > 2 else (0,)

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size, "d_model": self.d_model,
            "n_layers": self.n_layers, "n_heads": self.n_heads, "d_ff": self.d_ff,
            "max_seq": self.max_seq, "fold_enabled": self.fold_enabled,
            "fold_layers": None if self.fold_layers is None else list(self.fold_layers),
            "folding": self.folding.to_dict(), "seed": self.seed,
            "frozen_gate": self.frozen_gate, "fold_reg": self.fold_reg,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if "folding" in d:
            d["folding"] = FoldingConfig.from_dict(d["folding"])
        if d.get("fold_layers") is not None:
            d["fold_layers"] = tuple(d["fold_layers"])
        return cls(**d)


@dataclass
class ForwardTrace:
    residual: list  # per layer, (T, d_model)
    attention: list  # per layer, (H, T, T)
    head_outputs: list  # per layer, (H, T, d_model): each head's write to the residual
    ffn: list  # per layer, (T, d_ff) post-activation
    logits: np.ndarray  # (T, vocab)
    tokens: Optional[list] = None


def _gaussian(rng: Rng, shape, std=INIT_STD):
    return torch.tensor(rng.gaussian(shape) * std, dtype=DTYPE)


def init_params(cfg: ModelConfig) -> dict:
    """Seeded initialisation.

    The backbone is drawn from ``cfg.seed`` alone, so baseline and folding
    models built from the same seed share identical backbone weights.
    """
    rng = Rng(cfg.seed)
    d, f = cfg.d_model, cfg.d_ff
    resid_std = INIT_STD / math.sqrt(2 * cfg.n_layers)
    p = {"embed": _gaussian(rng, (cfg.vocab_size, d)), "pos": _gaussian(rng, (cfg.max_seq, d))}
    for i in range(cfg.n_layers):
        pre = f"layers.{i}."
        p[pre + "ln1.g"] = torch.ones(d, dtype=DTYPE)
        p[pre + "ln1.b"] = torch.zeros(d, dtype=DTYPE)
        for name in ("q", "k", "v"):
            p[pre + f"attn.{name}"] = _gaussian(rng, (d, d))
        p[pre + "attn.o"] = _gaussian(rng, (d, d), resid_std)
        p[pre + "ln2.g"] = torch.ones(d, dtype=DTYPE)
        p[pre + "ln2.b"] = torch.zeros(d, dtype=DTYPE)
        p[pre + "ff.w1"] = _gaussian(rng, (f, d))
        p[pre + "ff.b1"] = torch.zeros(f, dtype=DTYPE)
        p[pre + "ff.w2"] = _gaussian(rng, (d, f), resid_std)
        p[pre + "ff.b2"] = torch.zeros(d, dtype=DTYPE)
    p["ln_f.g"] = torch.ones(d, dtype=DTYPE)
    p["ln_f.b"] = torch.zeros(d, dtype=DTYPE)

    fold_rng = Rng(cfg.seed ^ FOLD_SEED_SALT)
    K = cfg.folding.clusters
    for i in cfg.folded:
        pre = f"layers.{i}."
        rows = fold_rng.choice_distinct(cfg.vocab_size, K)
        p[pre + "fold.W"] = torch.eye(d, dtype=DTYPE)
        p[pre + "fold.b"] = torch.zeros(d, dtype=DTYPE)
        p[pre + "fold.centers"] = p["embed"][torch.as_tensor(rows)].clone()
        gate = 0.0 if cfg.frozen_gate is None else cfg.frozen_gate
        p[pre + "fold.gate"] = torch.tensor(gate, dtype=DTYPE)
        p[pre + "post.g"] = torch.ones(d, dtype=DTYPE)
        p[pre + "post.b"] = torch.zeros(d, dtype=DTYPE)
    for t in p.values():
        t.requires_grad_(True)
    return p


def _layer_norm(x, g, b, eps=1e-5):
    return F.layer_norm(x, (x.shape[-1],), g, b, eps)


def _affinity(X, causal=False):
    """exp(-|x_i - x_j|^2) over the last two dims.

    The diagonal is left at exp(0) = 1 because it cancels inside the
    Laplacian. ``causal`` keeps only j <= i, so a token is never smoothed
    toward later positions.
    """
    sq = (X * X).sum(-1, keepdim=True)
    D2 = torch.baddbmm(sq + sq.transpose(-1, -2), X, X.transpose(-1, -2), alpha=-2)
    W = torch.exp(-D2)
    return W.tril_() if causal else W


def _d2_backward(X, S):
    """Pull a gradient S w.r.t. the squared-distance matrix back onto X."""
    St = S.transpose(-1, -2)
    return 2 * (S.sum(-1, keepdim=True) + St.sum(-1, keepdim=True)) * X - 2 * ((S + St) @ X)


class _GaussianLaplacian(torch.autograd.Function):
    """L_i = sum_j w_ij (x_j - x_i) with w_ij = exp(-|x_i - x_j|^2).

    Hand-written backward: autograd through the (T, T) affinity would
    materialise several extra T x T temporaries per step.
    """

    @staticmethod
    def forward(ctx, X, causal):
        W = _affinity(X, causal)
        deg = W.sum(-1, keepdim=True)
        ctx.save_for_backward(X, W, deg)
        return W @ X - deg * X

    @staticmethod
    def backward(ctx, G):
        X, W, deg = ctx.saved_tensors
        Wt = W.transpose(-1, -2)
        direct = Wt @ G - deg * G
        # dW_ij = G_i . (x_j - x_i); chain through exp(-D2)
        dW = G @ X.transpose(-1, -2) - (G * X).sum(-1, keepdim=True)
        return direct + _d2_backward(X, -W * dW), None


class _GaussianCohesion(torch.autograd.Function):
    """Per-sequence sum over ordered pairs i != j of exp(-|x_i - x_j|^2)."""

    @staticmethod
    def forward(ctx, X):
        W = _affinity(X.unsqueeze(0) if X.ndim == 2 else X)
        ctx.save_for_backward(X, W)
        total = W.sum((-1, -2)) - X.shape[-2]
        return total[0] if X.ndim == 2 else total

    @staticmethod
    def backward(ctx, g):
        X, W = ctx.saved_tensors
        Xb = X.unsqueeze(0) if X.ndim == 2 else X
        g = g.reshape(-1, 1, 1)
        grad = 4 * g * (W @ Xb - Xb * W.sum(-1, keepdim=True))  # d/dx_i = -4 sum_j w_ij (x_i - x_j)
        return grad[0] if X.ndim == 2 else grad


def _laplacian(X, causal=False):
    if X.ndim == 2:
        return _GaussianLaplacian.apply(X.unsqueeze(0), causal)[0]
    return _GaussianLaplacian.apply(X, causal)


def fold_core(X, W_f, b_f, centers, fcfg: FoldingConfig, causal=True):
    """Differentiable fold step over the last two dims of ``X`` (..., T, d).

    With ``causal=False`` this matches ``folding.fold_step`` (full token
    graph); the language model uses the causal variant. Returns the folded
    rows and the affine output before adjustment (the buffer used for center
    refreshes).
    """
    X1 = X @ W_f.T + b_f
    if fcfg.lam > 0:
        X1 = X1 + fcfg.lam * _laplacian(X, causal)
    affine_out = X1
    with torch.no_grad():
        C = centers.detach()
        assignment = ((C * C).sum(-1) - 2 * X1.detach() @ C.T).argmin(-1)
    for _ in range(fcfg.inner_steps):
        # -grad(objective) + beta * laplacian, with grad = 2a(x - c) - 4g * laplacian
        step = 2 * fcfg.alpha * (centers[assignment] - X1)
        if fcfg.gamma or fcfg.beta:
            step = step + (4 * fcfg.gamma + fcfg.beta) * _laplacian(X1, causal)
        X1 = X1 + fcfg.eta * step
    norm = X1.norm(dim=-1, keepdim=True)
    return X1 / torch.where(norm >= NORM_GUARD, norm, torch.ones_like(norm)), affine_out


def structural_penalty(x, centers, fcfg: FoldingConfig):
    """Per-token structural objective: a * |x - c|^2 - g * sum_j w_ij, batch mean."""
    with torch.no_grad():
        C = centers.detach()
        assignment = ((C * C).sum(-1) - 2 * x.detach() @ C.T).argmin(-1)
    attraction = ((x - centers[assignment]) ** 2).sum(-1).mean()
    if not fcfg.gamma:
        return fcfg.alpha * attraction
    cohesion = _GaussianCohesion.apply(x).sum() / (x.numel() // x.shape[-1])
    return fcfg.alpha * attraction - fcfg.gamma * cohesion


def _post_norm(Y, ref, g, b):
    """Rescale each row of ``Y`` to the norm of the matching row of ``ref``, then scale/shift."""
    ny = Y.norm(dim=-1, keepdim=True)
    ratio = torch.where(ny >= NORM_GUARD, ref.norm(dim=-1, keepdim=True) / ny.clamp_min(NORM_GUARD),
                        torch.ones_like(ny))
    return g * (Y * ratio) + b


def _fold_module(x, W_f, b_f, centers, gate, post_g, post_b, fcfg: FoldingConfig, causal=True):
    folded, affine_out = fold_core(x, W_f, b_f, centers, fcfg, causal)
    Y = x + gate * (folded - x)
    return _post_norm(Y, x, post_g, post_b), affine_out


def folding_module_apply(X, layer: FoldingLayer, cfg: FoldingConfig, post_g=None, post_b=None,
                         causal=False) -> np.ndarray:
    """Gated folding on a residual stream ``X`` (T, d).

    ``out = post_norm(X + s * (fold(X) - X))``. The stabilising normalisation
    restores every token's pre-fold norm and then applies a scale/shift, so
    folding changes directions only; a fresh layer (s = 0, scale 1, shift 0)
    returns X unchanged.
    """
    d = layer.W.shape[0]
    t = lambda a: torch.as_tensor(np.asarray(a, dtype=np.float64))
    g = torch.ones(d, dtype=DTYPE) if post_g is None else t(post_g)
    b = torch.zeros(d, dtype=DTYPE) if post_b is None else t(post_b)
    with torch.no_grad():
        out, _ = _fold_module(t(X), t(layer.W), t(layer.b), t(layer.centers),
                              torch.tensor(float(layer.gate), dtype=DTYPE), g, b, cfg, causal)
    return out.numpy()


def _as_batch(tokens) -> torch.Tensor:
    idx = torch.as_tensor(np.asarray(tokens), dtype=torch.long)
    if idx.ndim == 1:
        idx = idx[None, :]
    return idx


def _forward(params: dict, cfg: ModelConfig, idx: torch.Tensor, capture=False, fold_buffer=None,
             penalties=None):
    B, T = idx.shape
    if T > cfg.max_seq:
        raise LengthError(f"{T} tokens exceed max_seq={cfg.max_seq}")
    H, d = cfg.n_heads, cfg.d_model
    dh = d // H
    folded = set(cfg.folded)
    mask = torch.ones(T, T, dtype=torch.bool).triu(1)
    x = params["embed"][idx] + params["pos"][:T]
    trace = {"residual": [], "attention": [], "head_outputs": [], "ffn": []}
    for i in range(cfg.n_layers):
        pre = f"layers.{i}."
        h = _layer_norm(x, params[pre + "ln1.g"], params[pre + "ln1.b"])
        q = (h @ params[pre + "attn.q"].T).view(B, T, H, dh).transpose(1, 2)
        k = (h @ params[pre + "attn.k"].T).view(B, T, H, dh).transpose(1, 2)
        v = (h @ params[pre + "attn.v"].T).view(B, T, H, dh).transpose(1, 2)
        scores = (q @ k.transpose(-1, -2)) / math.sqrt(dh)
        att = torch.softmax(scores.masked_fill(mask, float("-inf")), dim=-1)
        z = att @ v  # B, H, T, dh
        Wo = params[pre + "attn.o"].view(d, H, dh)
        heads = torch.einsum("bhtk,dhk->bhtd", z, Wo)
        x = x + heads.sum(1)
        h = _layer_norm(x, params[pre + "ln2.g"], params[pre + "ln2.b"])
        act = torch.relu(h @ params[pre + "ff.w1"].T + params[pre + "ff.b1"])
        x = x + act @ params[pre + "ff.w2"].T + params[pre + "ff.b2"]
        if i in folded:
            gate = params[pre + "fold.gate"]
            if cfg.frozen_gate is not None:
                gate = gate.detach()
            x, affine_out = _fold_module(
                x, params[pre + "fold.W"], params[pre + "fold.b"], params[pre + "fold.centers"], gate,
                params[pre + "post.g"], params[pre + "post.b"], cfg.folding)
            if fold_buffer is not None:
                fold_buffer[i] = affine_out.detach().reshape(-1, d)
            if penalties is not None:
                penalties.append(structural_penalty(x, params[pre + "fold.centers"], cfg.folding))
        if capture:
            trace["residual"].append(x.detach())
            trace["attention"].append(att.detach())
            trace["head_outputs"].append(heads.detach())
            trace["ffn"].append(act.detach())
    xf = _layer_norm(x, params["ln_f.g"], params["ln_f.b"])
    logits = xf @ params["embed"].T
    return logits, (trace if capture else None)


def forward(params: dict, cfg: ModelConfig, tokens):
    """Logits (T, vocab) for one token sequence plus a numpy ForwardTrace."""
    with torch.no_grad():
        logits, raw = _forward(params, cfg, _as_batch(tokens), capture=True)
    tr = ForwardTrace(
        residual=[r[0].numpy() for r in raw["residual"]],
        attention=[a[0].numpy() for a in raw["attention"]],
        head_outputs=[h[0].numpy() for h in raw["head_outputs"]],
        ffn=[f[0].numpy() for f in raw["ffn"]],
        logits=logits[0].numpy(),
        tokens=[int(t) for t in np.asarray(tokens).reshape(-1)],
    )
    return tr.logits, tr


def logits_batch(params: dict, cfg: ModelConfig, idx) -> torch.Tensor:
    with torch.no_grad():
        return _forward(params, cfg, _as_batch(idx))[0]


def loss(logits, targets) -> float | torch.Tensor:
    """Mean next-token negative log-likelihood in nats."""
    as_tensor = torch.is_tensor(logits)
    lg = logits if as_tensor else torch.as_tensor(np.asarray(logits), dtype=DTYPE)
    tg = torch.as_tensor(np.asarray(targets) if not torch.is_tensor(targets) else targets, dtype=torch.long)
    if lg.shape[:-1] != tg.shape:
        raise ValueError(f"logits {tuple(lg.shape)} do not match targets {tuple(tg.shape)}")
    out = F.cross_entropy(lg.reshape(-1, lg.shape[-1]), tg.reshape(-1))
    return out if as_tensor else float(out)


def batch_loss(params: dict, cfg: ModelConfig, batch, fold_buffer=None):
    """Training objective on windows of length T+1 (inputs [:, :-1], targets [:, 1:]).

    Returns ``(objective, nll)``: the objective adds ``fold_reg`` times the
    structural penalty of every fold-layer output to the next-token NLL.
    """
    batch = _as_batch(batch)
    penalties = [] if cfg.fold_reg and cfg.folded else None
    logits, _ = _forward(params, cfg, batch[:, :-1], fold_buffer=fold_buffer, penalties=penalties)
    nll = loss(logits, batch[:, 1:])
    objective = nll + cfg.fold_reg * sum(penalties) if penalties else nll
    return objective, nll


@dataclass
class OptimizerState:
    """Adam moments plus the schedule for center refreshes."""

    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    clip_norm: float = 1.0
    center_refresh: int = 50
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def _gate_names(params):
    return [n for n in params if n.endswith("fold.gate")]


def train_step(params: dict, cfg: ModelConfig, batch, opt: OptimizerState):
    """One Adam step on ``batch`` (B, T+1); updates ``params`` in place.

    Returns ``(params, loss_value)``.
    """
    fold_buffer = {} if cfg.folded else None
    for t in params.values():
        t.grad = None
    objective, value = batch_loss(params, cfg, batch, fold_buffer)
    if not torch.isfinite(objective):
        raise TrainingError(f"non-finite loss at step {opt.step}")
    objective.backward()
    grads = {n: (t.grad if t.grad is not None else torch.zeros_like(t)) for n, t in params.items()}
    if cfg.frozen_gate is not None:
        for n in _gate_names(params):
            grads[n] = torch.zeros_like(grads[n])
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if not math.isfinite(total):
        raise TrainingError(f"non-finite gradient at step {opt.step}")
    scale = min(1.0, opt.clip_norm / (total + 1e-6)) if opt.clip_norm else 1.0
    opt.step += 1
    b1, b2 = opt.betas
    c1, c2 = 1 - b1 ** opt.step, 1 - b2 ** opt.step
    with torch.no_grad():
        for n, t in params.items():
            g = grads[n] * scale
            m = opt.m.get(n)
            if m is None:
                m = opt.m[n] = torch.zeros_like(t)
                opt.v[n] = torch.zeros_like(t)
            v = opt.v[n]
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            if opt.lr:
                t.sub_(opt.lr * (m / c1) / ((v / c2).sqrt() + opt.eps))
        for n in _gate_names(params):
            params[n].clamp_(0.0, 1.0)
        if fold_buffer and opt.center_refresh and opt.step % opt.center_refresh == 0:
            refresh_centers(params, cfg, fold_buffer)
    return params, float(value.detach())


def refresh_centers(params: dict, cfg: ModelConfig, fold_buffer: dict):
    """k-means style refresh of each fold layer's centers from buffered tokens."""
    K = cfg.folding.clusters
    with torch.no_grad():
        for i, X in fold_buffer.items():
            name = f"layers.{i}.fold.centers"
            Xn = X.numpy()
            C = params[name].detach().numpy()
            C = update_centers(Xn, assign_clusters(Xn, C), K, C)
            params[name].copy_(torch.as_tensor(C))


def generate(params: dict, cfg: ModelConfig, prompt: Sequence[int], max_new: int,
             mode: str = "greedy", seed: int = 0, temperature: float = 1.0) -> list[int]:
    """Greedy (ties to the lowest id) or seeded sampled continuation."""
    if not len(prompt):
        raise ValueError("prompt must be nonempty")
    out = [int(t) for t in prompt]
    rng = Rng(seed) if mode == "sampled" else None
    for _ in range(max_new):
        ctx = out[-cfg.max_seq:]
        logits = logits_batch(params, cfg, ctx)[0, -1].numpy()
        if mode == "greedy":
            nxt = int(np.argmax(logits))
        elif mode == "sampled":
            z = logits / temperature
            p = np.exp(z - z.max())
            cdf = np.cumsum(p / p.sum())
            nxt = int(min(np.searchsorted(cdf, rng.uniform(), side="right"), len(cdf) - 1))
        else:
            raise ValueError(f"unknown mode {mode!r}")
        out.append(nxt)
    return out


MAGIC = b"FOLDLM1"
FORMAT_VERSION = 1


def _encode(params: dict, cfg: ModelConfig) -> bytes:
    chunks = [MAGIC, struct.pack("<I", FORMAT_VERSION)]
    conf = json.dumps(cfg.to_dict(), sort_keys=True).encode()
    chunks += [struct.pack("<I", len(conf)), conf, struct.pack("<I", len(params))]
    for name, t in params.items():
        arr = np.ascontiguousarray(t.detach().numpy(), dtype="<f8")
        raw = name.encode()
        chunks += [struct.pack("<H", len(raw)), raw, struct.pack("<B", arr.ndim)]
        chunks += [struct.pack("<Q", s) for s in arr.shape]
        chunks.append(arr.tobytes())
    return b"".join(chunks)


def save_params(params: dict, cfg: ModelConfig, path) -> None:
    """Checkpoint: magic, version, JSON config block, then named float64 tensors."""
    data = _encode(params, cfg)
    with open(path, "wb") as fh:
        fh.write(data)


def load_params(path) -> tuple[dict, ModelConfig]:
    with open(path, "rb") as fh:
        data = fh.read()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise FormatError("checkpoint is truncated")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    if take(len(MAGIC)) != MAGIC:
        raise FormatError("bad checkpoint magic")
    (version,) = struct.unpack("<I", take(4))
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    (clen,) = struct.unpack("<I", take(4))
    try:
        cfg = ModelConfig.from_dict(json.loads(take(clen)))
    except (ValueError, TypeError) as exc:
        raise FormatError(f"bad config block: {exc}") from exc
    (count,) = struct.unpack("<I", take(4))
    params = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode()
        (ndim,) = struct.unpack("<B", take(1))
        shape = tuple(struct.unpack("<Q", take(8))[0] for _ in range(ndim))
        size = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(take(8 * size), dtype="<f8").reshape(shape)
        params[name] = torch.tensor(arr.astype(np.float64), dtype=DTYPE, requires_grad=True)
    if pos != len(data):
        raise FormatError("trailing bytes after last tensor")
    return params, cfg


def params_digest(params: dict) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(params[name].detach().numpy().tobytes())
    return h.hexdigest()
