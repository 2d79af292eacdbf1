"""Desk-scale synthetic workloads.

Per-worker stochastic matrix gradients with controllable spectrum, noise and
rank: a planted low-rank least-squares block for linear layers, a Zipf-
sampled row-sparse pull for embedding layers, and a dense quadratic for
non-matrix parameters.  Every gradient is a pure function of (data seed,
worker, step) and the current weights, so runs replay exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum

import numpy as np

from .linalg import SeededRng, as_matrix, orth

__all__ = [
    "GradientSource",
    "LayerKind",
    "LayerSpec",
    "TaskSpec",
    "make_embedding_task",
    "make_lowrank_regression",
    "run_worker_step",
]

# spawn_key tags keeping per-purpose random streams disjoint
_TAG_STATIC = 0
_TAG_TOKENS = 2


class LayerKind(Enum):
    LINEAR = "linear"
    EMBEDDING = "embedding"
    NON_MATRIX = "nonmatrix"


@dataclass(frozen=True)
class LayerSpec:
    name: str
    rows: int
    cols: int
    kind: LayerKind = LayerKind.LINEAR
    rank: int = 0              # 0 = use the run-level rank for this kind
    refresh_interval: int = 0  # 0 = use the run-level interval for this kind

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ValueError(f"layer {self.name}: bad shape {self.rows}x{self.cols}")
        if self.kind is not LayerKind.NON_MATRIX and self.rank > min(self.rows, self.cols):
            raise ValueError(
                f"layer {self.name}: rank {self.rank} exceeds min{self.rows, self.cols}")

    @property
    def is_matrix(self) -> bool:
        return self.kind is not LayerKind.NON_MATRIX


@dataclass(frozen=True)
class TaskSpec:
    layers: tuple[LayerSpec, ...]
    workers: int = 1
    noise_std: float = 0.0
    target_rank: int = 4
    minibatch: int = 32
    data_seed: int = 0

    def __post_init__(self):
        if not self.layers:
            raise ValueError("task needs at least one layer")
        if self.workers < 1:
            raise ValueError(f"workers must be >= 1, got {self.workers}")
        if self.minibatch < 1:
            raise ValueError(f"minibatch must be >= 1, got {self.minibatch}")
        if self.noise_std < 0:
            raise ValueError(f"noise_std must be >= 0, got {self.noise_std}")
        if self.target_rank < 1:
            raise ValueError(f"target_rank must be >= 1, got {self.target_rank}")
        matrix_caps = [min(s.rows, s.cols) for s in self.layers if s.is_matrix]
        if matrix_caps and self.target_rank > min(matrix_caps):
            raise ValueError(
                f"target_rank {self.target_rank} exceeds min matrix dimension "
                f"{min(matrix_caps)}")
        names = [s.name for s in self.layers]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate layer names in {names}")


def _plane_rotate(M: np.ndarray, angle: float) -> np.ndarray:
    """Rotate rows of M in the (0,1) and, when present, (2,3) coordinate planes."""
    out = M.copy()
    c, s = np.cos(angle), np.sin(angle)
    for i, j in ((0, 1), (2, 3)):
        if j < out.shape[0]:
            ri = out[i].copy()
            out[i] = c * ri - s * out[j]
            out[j] = s * ri + c * out[j]
    return out


class GradientSource:
    """Synthetic multi-layer objective with per-worker stochastic gradients.

    The loss is a sum of independent per-layer blocks:

    * linear ``W``: least squares against a planted rank-r* target,
      ``|X W - Y|^2 / (2 Ns)`` with a fixed design ``X`` and labels
      ``Y = X W* + noise`` (label noise frozen at build); design rows are
      partitioned round-robin across workers, so the worker mean equals the
      full-batch gradient exactly;
    * embedding ``E``: by default an expected pull toward a planted low-rank
      row target under a Zipf token distribution, with row-sparse sampled
      minibatch gradients; with ``embedding_objective="quadratic"`` the block
      is a plain planted quadratic whose workers carry frozen offsets,
      keeping the regression structure but the embedding refresh schedule;
    * non-matrix ``w``: quadratic ``|w - w*|^2 / 2``, workers carrying frozen
      noise offsets, always synchronized dense.

    ``drift_angle`` rotates the planted linear targets by a fixed small angle
    per step, which makes the dominant gradient subspace move over time.
    """

    def __init__(self, spec: TaskSpec, *, orthonormal_design: bool = False,
                 drift_angle: float = 0.0, zipf_s: float = 1.1,
                 embedding_objective: str = "zipf"):
        if embedding_objective not in ("zipf", "quadratic"):
            raise ValueError(f"unknown embedding_objective {embedding_objective!r}")
        self.spec = spec
        self.drift_angle = float(drift_angle)
        self.zipf_s = float(zipf_s)
        self.embedding_objective = embedding_objective
        self._linear: dict[str, dict] = {}
        self._embedding: dict[str, dict] = {}
        self._quadratic: dict[str, dict] = {}

        n_samples = spec.workers * spec.minibatch
        for idx, layer in enumerate(spec.layers):
            rng = SeededRng.derive(spec.data_seed, _TAG_STATIC, idx)
            if layer.kind is LayerKind.LINEAR:
                r = spec.target_rank
                W_star = (rng.normal(layer.rows, r) @ rng.normal(layer.cols, r).T) / np.sqrt(r)
                X = rng.normal(n_samples, layer.rows)
                if orthonormal_design:
                    if n_samples < layer.rows:
                        raise ValueError(
                            f"layer {layer.name}: orthonormal design needs at least "
                            f"{layer.rows} samples, got {n_samples}")
                    X = orth(X)
                noise = (rng.normal(n_samples, layer.cols)
                         if spec.noise_std > 0 else None)
                self._linear[layer.name] = {
                    "X": X,
                    "gram": X.T @ X,
                    "W_star": W_star,
                    "noise": noise,
                    "index": idx,
                }
            elif (layer.kind is LayerKind.EMBEDDING
                  and embedding_objective == "zipf"):
                r = spec.target_rank
                T = (rng.normal(layer.rows, r) @ rng.normal(layer.cols, r).T) / np.sqrt(r)
                probs = 1.0 / np.arange(1, layer.rows + 1, dtype=np.float64) ** self.zipf_s
                probs /= probs.sum()
                self._embedding[layer.name] = {"T": T, "probs": probs, "index": idx}
            else:
                # quadratic block: planted target (low rank for embeddings,
                # dense for non-matrix parameters) plus frozen worker offsets
                if layer.kind is LayerKind.EMBEDDING:
                    r = spec.target_rank
                    target = (rng.normal(layer.rows, r)
                              @ rng.normal(layer.cols, r).T) / np.sqrt(r)
                else:
                    target = rng.normal(layer.rows, layer.cols)
                offsets = (np.stack([rng.normal(layer.rows, layer.cols)
                                     for _ in range(spec.workers)])
                           if spec.noise_std > 0 else None)
                self._quadratic[layer.name] = {"target": target,
                                               "offsets": offsets}

        self.weights = self.init_weights()

    # -- weights and targets -------------------------------------------------

    def init_weights(self) -> dict[str, np.ndarray]:
        return {s.name: np.zeros((s.rows, s.cols)) for s in self.spec.layers}

    def target_weights(self, step: int = 0) -> dict[str, np.ndarray]:
        """The per-layer optimum of the noise-free objective at a given step."""
        out = {}
        for layer in self.spec.layers:
            if layer.name in self._linear:
                out[layer.name] = self._target_linear(layer.name, step)
            elif layer.name in self._embedding:
                out[layer.name] = self._embedding[layer.name]["T"].copy()
            else:
                out[layer.name] = self._quadratic[layer.name]["target"].copy()
        return out

    def _target_linear(self, name: str, step: int) -> np.ndarray:
        W_star = self._linear[name]["W_star"]
        if self.drift_angle == 0.0 or step == 0:
            return W_star
        angle = self.drift_angle * step
        rotated = _plane_rotate(W_star, angle)
        return _plane_rotate(rotated.T, angle).T

    # -- gradients ------------------------------------------------------------

    def local_gradient(self, worker: int, step: int) -> dict[str, np.ndarray]:
        """Exact minibatch gradient for one worker at one step."""
        if not 0 <= worker < self.spec.workers:
            raise ValueError(f"worker {worker} out of range [0, {self.spec.workers})")
        spec = self.spec
        grads = {}
        for layer in spec.layers:
            W = self.weights[layer.name]
            if layer.name in self._linear:
                blk = self._linear[layer.name]
                rows = np.arange(worker, spec.workers * spec.minibatch, spec.workers)
                Xi = blk["X"][rows]
                resid = Xi @ (W - self._target_linear(layer.name, step))
                if blk["noise"] is not None:
                    resid = resid - spec.noise_std * blk["noise"][rows]
                grads[layer.name] = Xi.T @ resid / len(rows)
            elif layer.name in self._embedding:
                blk = self._embedding[layer.name]
                trng = SeededRng.derive(spec.data_seed, _TAG_TOKENS,
                                        blk["index"], step, worker)
                ids = trng.generator.choice(layer.rows, size=spec.minibatch,
                                            p=blk["probs"])
                G = np.zeros((layer.rows, layer.cols))
                np.add.at(G, ids, W[ids] - blk["T"][ids])
                grads[layer.name] = G / spec.minibatch
            else:
                blk = self._quadratic[layer.name]
                g = W - blk["target"]
                if blk["offsets"] is not None:
                    g = g + spec.noise_std * blk["offsets"][worker]
                grads[layer.name] = g
        return grads

    def true_gradient(self, step: int = 0) -> dict[str, np.ndarray]:
        """Noise-free full-batch gradient at the current weights."""
        grads = {}
        for layer in self.spec.layers:
            W = self.weights[layer.name]
            if layer.name in self._linear:
                blk = self._linear[layer.name]
                n_samples = blk["X"].shape[0]
                grads[layer.name] = blk["gram"] @ (W - self._target_linear(layer.name, step)) / n_samples
            elif layer.name in self._embedding:
                blk = self._embedding[layer.name]
                grads[layer.name] = blk["probs"][:, None] * (W - blk["T"])
            else:
                grads[layer.name] = W - self._quadratic[layer.name]["target"]
        return grads

    def loss(self, step: int = 0) -> float:
        """Noise-free full-batch objective at the current weights."""
        total = 0.0
        for layer in self.spec.layers:
            W = self.weights[layer.name]
            if layer.name in self._linear:
                blk = self._linear[layer.name]
                n_samples = blk["X"].shape[0]
                D = W - self._target_linear(layer.name, step)
                total += float((D * (blk["gram"] @ D)).sum()) / (2.0 * n_samples)
            elif layer.name in self._embedding:
                blk = self._embedding[layer.name]
                D = W - blk["T"]
                total += 0.5 * float((blk["probs"][:, None] * D * D).sum())
            else:
                D = W - self._quadratic[layer.name]["target"]
                total += 0.5 * float((D * D).sum())
        return total


def make_lowrank_regression(spec: TaskSpec, *, orthonormal_design: bool = False,
                            drift_angle: float = 0.0, zipf_s: float = 1.1,
                            embedding_objective: str = "zipf") -> GradientSource:
    """Planted low-rank synthetic workload covering every layer kind in the spec."""
    return GradientSource(spec, orthonormal_design=orthonormal_design,
                          drift_angle=drift_angle, zipf_s=zipf_s,
                          embedding_objective=embedding_objective)


def make_embedding_task(vocab: int, dim: int, tokens_per_batch: int,
                        spec: TaskSpec, *, zipf_s: float = 1.1) -> GradientSource:
    """Single embedding-layer workload: Zipf-sampled token ids produce
    row-sparse gradients on a vocab x dim matrix."""
    layer = LayerSpec("embedding", vocab, dim, LayerKind.EMBEDDING)
    emb_spec = replace(spec, layers=(layer,), minibatch=tokens_per_batch)
    return GradientSource(emb_spec, zipf_s=zipf_s)


def run_worker_step(source: GradientSource, worker_index: int, step: int) -> dict[str, np.ndarray]:
    """One worker's per-layer gradients; deterministic in (seed, worker, step)."""
    if not 0 <= worker_index < source.spec.workers:
        raise ValueError(
            f"worker_index {worker_index} out of range [0, {source.spec.workers})")
    grads = source.local_gradient(worker_index, step)
    for name, g in grads.items():
        as_matrix(g, f"gradient for layer {name}")
    return grads
