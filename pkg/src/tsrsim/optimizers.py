"""Optimizer family: dense Adam with decoupled weight decay, the two-sided
core-space Adam and momentum-SGD variants, and a one-sided low-rank baseline.

Core-space methods keep their moment state at r x r (or r x n for the
one-sided baseline); weight decay always applies to the full-rank weights,
never to core states.  All step functions are pure: they return new weight
and state objects and leave their inputs untouched.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .collective import CommLedger, CommObjectKind, all_reduce_mean
from .linalg import as_matrix

__all__ = [
    "AdamHyperparams",
    "CoreMoments",
    "DenseMoments",
    "ProjectionPair",
    "dense_adamw_step",
    "one_sided_step",
    "realign_core",
    "reconstruct",
    "tsr_adam_step",
    "tsr_project_core",
    "tsr_sgd_step",
]


@dataclass(frozen=True)
class AdamHyperparams:
    eta: float = 0.01
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    scale: float = 1.0  # multiplier on the lifted core update only

    def __post_init__(self):
        if self.eta <= 0:
            raise ValueError(f"eta must be positive, got {self.eta}")
        if self.epsilon <= 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        for name, b in (("beta1", self.beta1), ("beta2", self.beta2)):
            if not 0.0 <= b < 1.0:
                raise ValueError(f"{name} must be in [0, 1), got {b}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")


@dataclass
class DenseMoments:
    """First/second Adam moments at the full gradient shape."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, rows: int, cols: int) -> "DenseMoments":
        return cls(np.zeros((rows, cols)), np.zeros((rows, cols)), 0)


@dataclass
class CoreMoments:
    """Adam moments living in the r x r core space."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, rank: int) -> "CoreMoments":
        return cls(np.zeros((rank, rank)), np.zeros((rank, rank)), 0)


@dataclass
class ProjectionPair:
    """Orthonormal left/right bases for the two-sided projection."""

    U: np.ndarray
    V: np.ndarray
    last_refresh_step: int = 0

    @property
    def rank(self) -> int:
        return self.U.shape[1]

    def orthonormality_defect(self) -> float:
        du = self.U.T @ self.U - np.eye(self.U.shape[1])
        dv = self.V.T @ self.V - np.eye(self.V.shape[1])
        return float(max(np.abs(du).max(initial=0.0), np.abs(dv).max(initial=0.0)))

    def check_orthonormal(self, tol: float = 1e-8):
        defect = self.orthonormality_defect()
        if defect > tol:
            raise ValueError(f"projection bases not orthonormal (defect {defect:.3e})")

    @classmethod
    def identity(cls, rows: int, cols: int, rank: int) -> "ProjectionPair":
        U = np.zeros((rows, rank))
        U[:rank, :rank] = np.eye(rank)
        V = np.zeros((cols, rank))
        V[:rank, :rank] = np.eye(rank)
        return cls(U, V, 0)


def _adam_direction(m, v, g, hp: AdamHyperparams, t_new: int):
    """Shared moment update with bias correction; returns (m', v', direction)."""
    m_new = hp.beta1 * m + (1.0 - hp.beta1) * g
    v_new = hp.beta2 * v + (1.0 - hp.beta2) * (g * g)
    m_hat = m_new / (1.0 - hp.beta1 ** t_new)
    v_hat = v_new / (1.0 - hp.beta2 ** t_new)
    return m_new, v_new, m_hat / (np.sqrt(v_hat) + hp.epsilon)


def dense_adamw_step(W, g_bar, st: DenseMoments, hp: AdamHyperparams):
    """One dense Adam step with decoupled weight decay on the synchronized
    gradient; increments the per-layer step counter used for bias correction."""
    W = as_matrix(W, "weights")
    g_bar = as_matrix(g_bar, "gradient")
    if W.shape != g_bar.shape:
        raise ValueError(f"weights {W.shape} vs gradient {g_bar.shape}")
    t_new = st.t + 1
    m, v, d = _adam_direction(st.m, st.v, g_bar, hp, t_new)
    # factored decay form of W - eta*(d + wd*W): exact geometric decay on a
    # zero-gradient stream
    W_new = (1.0 - hp.eta * hp.weight_decay) * W - hp.eta * d
    return W_new, DenseMoments(m, v, t_new)


def tsr_project_core(G, P: ProjectionPair) -> np.ndarray:
    """Local two-sided core U^T G V."""
    G = as_matrix(G, "gradient")
    if P.U.shape[0] != G.shape[0] or P.V.shape[0] != G.shape[1]:
        raise ValueError(
            f"projection bases {P.U.shape}/{P.V.shape} do not conform to gradient {G.shape}")
    return P.U.T @ G @ P.V


def reconstruct(P: ProjectionPair, C) -> np.ndarray:
    """Lift a core back to full shape: U C V^T."""
    C = as_matrix(C, "core")
    return P.U @ C @ P.V.T


def tsr_adam_step(W, C_bar, st: CoreMoments, P: ProjectionPair, hp: AdamHyperparams):
    """Adam step driven by the synchronized core: moments update at r x r,
    the normalized direction is lifted through the bases, and decoupled decay
    applies to the full weights."""
    W = as_matrix(W, "weights")
    C_bar = as_matrix(C_bar, "core")
    t_new = st.t + 1
    m, v, d = _adam_direction(st.m, st.v, C_bar, hp, t_new)
    dW = P.U @ d @ P.V.T
    W_new = (1.0 - hp.eta * hp.weight_decay) * W - hp.eta * hp.scale * dW
    return W_new, CoreMoments(m, v, t_new)


def tsr_sgd_step(W, C_bar, momentum, P: ProjectionPair, eta: float, beta: float):
    """Momentum SGD in core space (no weight decay):
    momentum' = beta*momentum + (1-beta)*C_bar, then W -= eta * U momentum' V^T."""
    W = as_matrix(W, "weights")
    C_bar = as_matrix(C_bar, "core")
    momentum = as_matrix(momentum, "momentum")
    m_new = beta * momentum + (1.0 - beta) * C_bar
    W_new = W - eta * (P.U @ m_new @ P.V.T)
    return W_new, m_new


def one_sided_step(W, G_locals, U, st: DenseMoments, hp: AdamHyperparams, *,
                   step: int, layer: str, ledger: CommLedger):
    """One-sided low-rank baseline: workers project their local gradients to
    U^T G (r x n), the factor is all-reduced and charged to the ledger, Adam
    moments stay at r x n, and the update lifts through U only."""
    W = as_matrix(W, "weights")
    U = as_matrix(U, "left basis")
    factors = [U.T @ as_matrix(G, "local gradient") for G in G_locals]
    C = all_reduce_mean(factors, step=step, layer=layer,
                        kind=CommObjectKind.ONE_SIDED_FACTOR, ledger=ledger)
    t_new = st.t + 1
    m, v, d = _adam_direction(st.m, st.v, C, hp, t_new)
    W_new = (1.0 - hp.eta * hp.weight_decay) * W - hp.eta * (U @ d)
    return W_new, DenseMoments(m, v, t_new)


def realign_core(core, P_old: ProjectionPair, P_new: ProjectionPair) -> np.ndarray:
    """Re-express a core-space matrix in refreshed bases so the lifted value
    equals the doubly-projected previous lifted value:
    core' = (U_new^T U_old) core (V_old^T V_new)."""
    return (P_new.U.T @ P_old.U) @ as_matrix(core, "core") @ (P_old.V.T @ P_new.V)
