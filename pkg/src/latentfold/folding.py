"""Hierarchical latent space folding on a set of token embeddings.

One folding layer applies an affine map to every token, nudges the result
down the structural objective (attraction to cluster centers plus pairwise
Gaussian cohesion) together with graph-Laplacian smoothing, and projects
the rows back onto the unit sphere. ``fold`` chains layers and refreshes
the cluster centers between them.

The energy ``energy`` and its explicit-Euler flow ``flow_step`` are the
continuous-time counterpart used for analysis and for the demo.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .linalg import (
    NumericalError,
    Rng,
    ShapeError,
    as_mat,
    gaussian_affinity,
    laplacian_apply,
    row_normalize,
    sq_distances,
)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class FoldingConfig:
    alpha: float = 0.5  # attraction to centers
    beta: float = 0.1  # Laplacian diffusion
    gamma: float = 0.1  # pairwise cohesion
    lam: float = 0.0  # Laplacian perturbation inside the affine map
    eta: float = 0.1
    depth: int = 3
    clusters: int = 4
    sigma: Optional[tuple] = None  # per-feature diffusion scale, None = ones
    flow_dt: float = 1e-2
    inner_steps: int = 1

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma", "lam", "eta"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                raise ConfigError(f"{name} must be finite and non-negative, got {v}")
        if self.depth < 1 or self.clusters < 1 or self.inner_steps < 1:
            raise ConfigError("depth, clusters and inner_steps must be >= 1")
        if not self.flow_dt > 0:
            raise ConfigError("flow_dt must be positive")
        if self.sigma is not None:
            s = np.asarray(self.sigma, dtype=np.float64)
            if s.ndim != 1 or not np.all(s > 0) or not np.all(np.isfinite(s)):
                raise ConfigError("sigma entries must be positive and finite")
            object.__setattr__(self, "sigma", tuple(float(v) for v in s))

    def sigma_vector(self, d: int) -> np.ndarray:
        if self.sigma is None:
            return np.ones(d)
        if len(self.sigma) != d:
            raise ShapeError(f"sigma has {len(self.sigma)} entries for {d} features")
        return np.asarray(self.sigma)

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha, "beta": self.beta, "gamma": self.gamma,
            "lam": self.lam, "eta": self.eta, "depth": self.depth,
            "clusters": self.clusters,
            "sigma": None if self.sigma is None else list(self.sigma),
            "flow_dt": self.flow_dt, "inner_steps": self.inner_steps,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FoldingConfig":
        d = dict(d)
        if d.get("sigma") is not None:
            d["sigma"] = tuple(d["sigma"])
        return cls(**d)


@dataclass
class FoldingLayer:
    W: np.ndarray
    b: np.ndarray
    centers: np.ndarray
    gate: float = 0.0

    @classmethod
    def identity(cls, d: int, centers) -> "FoldingLayer":
        centers = as_mat(centers)
        if centers.shape[1] != d:
            raise ShapeError("centers must have d columns")
        return cls(np.eye(d), np.zeros(d), centers.copy(), 0.0)


@dataclass
class FoldTrace:
    embeddings: list = field(default_factory=list)
    objectives: list = field(default_factory=list)
    energies: list = field(default_factory=list)
    layers: list = field(default_factory=list)


def init_centers(X, K: int, rng: Rng) -> np.ndarray:
    """Pick K distinct token rows as starting centers."""
    X = as_mat(X)
    if K > X.shape[0]:
        raise ConfigError(f"cannot draw {K} distinct centers from {X.shape[0]} tokens")
    return X[rng.choice_distinct(X.shape[0], K)].copy()


def affine_transform(X, layer: FoldingLayer, lam: float = 0.0) -> np.ndarray:
    X = as_mat(X)
    if X.shape[1] != layer.W.shape[1]:
        raise ShapeError(f"embeddings have {X.shape[1]} features, layer expects {layer.W.shape[1]}")
    out = X @ layer.W.T + layer.b
    if lam > 0:
        out = out + lam * laplacian_apply(X)
    return out


def assign_clusters(X, centers) -> np.ndarray:
    """Nearest center per token; ties go to the lowest index."""
    X, centers = as_mat(X), np.asarray(centers, dtype=np.float64)
    if centers.size == 0:
        raise ConfigError("no cluster centers")
    if centers.shape[1] != X.shape[1]:
        raise ShapeError("centers and embeddings differ in width")
    diff = X[:, None, :] - centers[None, :, :]
    return np.argmin(np.einsum("ikd,ikd->ik", diff, diff), axis=1)


def update_centers(X, assignment, K: int, previous) -> np.ndarray:
    X = as_mat(X)
    assignment = np.asarray(assignment)
    if assignment.shape[0] != X.shape[0]:
        raise ShapeError("assignment length must equal the number of tokens")
    out = np.array(previous, dtype=np.float64, copy=True)
    for k in range(K):
        members = X[assignment == k]
        if len(members):
            out[k] = members.mean(axis=0)
    return out


def structural_objective(X, centers, assignment, cfg: FoldingConfig) -> float:
    X = as_mat(X)
    resid = X - np.asarray(centers)[np.asarray(assignment)]
    attraction = float(np.sum(resid * resid))
    cohesion = float(gaussian_affinity(X).sum())
    return cfg.alpha * attraction - cfg.gamma * cohesion


def objective_gradient(X, centers, assignment, cfg: FoldingConfig) -> np.ndarray:
    X = as_mat(X)
    W = gaussian_affinity(X)
    pull = W.sum(axis=1)[:, None] * X - W @ X
    return 2 * cfg.alpha * (X - np.asarray(centers)[np.asarray(assignment)]) + 4 * cfg.gamma * pull


def _finite(X, stage):
    if not np.all(np.isfinite(X)):
        raise NumericalError(f"non-finite values after {stage}")
    return X


def adjust(X1, centers, assignment, cfg: FoldingConfig) -> np.ndarray:
    """Gradient adjustment before normalisation: X1 + eta * (-grad F + beta * Laplacian)."""
    X1 = as_mat(X1)
    for _ in range(cfg.inner_steps):
        delta = -objective_gradient(X1, centers, assignment, cfg)
        if cfg.beta:
            delta = delta + cfg.beta * laplacian_apply(X1)
        _finite(delta, "differential adjustment")
        X1 = _finite(X1 + cfg.eta * delta, "hierarchical adjustment")
    return X1


def fold_step(X, layer: FoldingLayer, cfg: FoldingConfig) -> np.ndarray:
    X1 = _finite(affine_transform(X, layer, cfg.lam), "affine transform")
    X1 = adjust(X1, layer.centers, assign_clusters(X1, layer.centers), cfg)
    return row_normalize(X1)


def fold(X, layers: Sequence[FoldingLayer], cfg: FoldingConfig) -> FoldTrace:
    if len(layers) != cfg.depth:
        raise ConfigError(f"expected {cfg.depth} layers, got {len(layers)}")
    X = as_mat(X)
    trace = FoldTrace(embeddings=[X])
    for l, layer in enumerate(layers):
        assignment = assign_clusters(X, layer.centers)
        centers = update_centers(X, assignment, cfg.clusters, layer.centers)
        layer = replace(layer, centers=centers)
        if l == 0:
            a0 = assign_clusters(X, centers)
            trace.objectives.append(structural_objective(X, centers, a0, cfg))
            trace.energies.append(energy(X, centers, a0, cfg))
        X = fold_step(X, layer, cfg)
        a = assign_clusters(X, centers)
        trace.embeddings.append(X)
        trace.objectives.append(structural_objective(X, centers, a, cfg))
        trace.energies.append(energy(X, centers, a, cfg))
        trace.layers.append(layer)
    return trace


def energy(X, centers, assignment, cfg: FoldingConfig) -> float:
    X = as_mat(X)
    D2 = sq_distances(X)
    W = np.exp(-D2)
    np.fill_diagonal(W, 0.0)
    smooth = 0.25 * float(np.sum(W * D2))  # 1/2 over unordered pairs
    resid = X - np.asarray(centers)[np.asarray(assignment)]
    return smooth + cfg.alpha * float(np.sum(resid * resid))


def energy_gradient(X, centers, assignment, cfg: FoldingConfig) -> np.ndarray:
    X = as_mat(X)
    D2 = sq_distances(X)
    G = np.exp(-D2) * (1.0 - D2)
    np.fill_diagonal(G, 0.0)
    pair = G.sum(axis=1)[:, None] * X - G @ X
    return pair + 2 * cfg.alpha * (X - np.asarray(centers)[np.asarray(assignment)])


def flow_step(X, centers, assignment, cfg: FoldingConfig, dt: Optional[float] = None) -> np.ndarray:
    """One explicit-Euler step of dX/dt = -grad E + beta * div(sigma grad X)."""
    X = as_mat(X)
    dt = cfg.flow_dt if dt is None else dt
    if not dt > 0:
        raise ConfigError("flow time step must be positive")
    rate = -energy_gradient(X, centers, assignment, cfg)
    if cfg.beta:
        rate = rate + cfg.beta * laplacian_apply(X, cfg.sigma_vector(X.shape[1]))
    out = X + dt * rate
    if not np.all(np.isfinite(out)):
        raise NumericalError("non-finite values after flow step")
    return out


@dataclass
class FlowResult:
    X: np.ndarray
    energies: list
    dts: list
    halvings: int


def run_flow(X, centers, assignment, cfg: FoldingConfig, steps: int,
             slack: float = 1e-9, max_halvings: int = 30) -> FlowResult:
    """Integrate the flow, halving dt whenever a step would raise the energy.

    A step is retried with dt/2 until E does not grow by more than ``slack``;
    the reduced dt is kept for the following steps.
    """
    X = as_mat(X)
    dt = cfg.flow_dt
    E = energy(X, centers, assignment, cfg)
    energies, dts, halvings = [E], [], 0
    for _ in range(steps):
        for _ in range(max_halvings + 1):
            Xn = flow_step(X, centers, assignment, cfg, dt)
            En = energy(Xn, centers, assignment, cfg)
            if En <= E + slack:
                break
            dt /= 2
            halvings += 1
        else:
            raise NumericalError(f"energy kept increasing after {max_halvings} halvings")
        X, E = Xn, En
        energies.append(E)
        dts.append(dt)
    return FlowResult(X, energies, dts, halvings)


def fold_loss(X, cfg: FoldingConfig) -> float:
    X = as_mat(X)
    curvature = laplacian_apply(X)
    return float(np.sum(curvature * curvature)) - cfg.gamma * float(gaussian_affinity(X).sum())


def synthetic_clusters(n: int, d: int, k: int, rng: Rng, spread: float = 0.3,
                       separation: float = 2.0) -> tuple[np.ndarray, np.ndarray]:
    """Gaussian blobs around k random means; returns (points, true labels)."""
    means = rng.gaussian((k, d)) * separation / np.sqrt(d)
    labels = np.arange(n) % k
    X = means[labels] + spread * rng.gaussian((n, d)) / np.sqrt(d)
    return X, labels
