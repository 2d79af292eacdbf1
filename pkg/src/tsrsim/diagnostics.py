"""Pure observers for the subspace-tracking quantities of the convergence
analysis: subspace approximation error, momentum tracking error, across-worker
core variance, and the basis-swap mismatch at refresh steps.

None of these touch the ledger or any optimizer state, so enabling them never
changes a run's iterates or byte counts.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .linalg import as_matrix
from .optimizers import ProjectionPair

__all__ = [
    "DiagnosticsLog",
    "DiagnosticsSample",
    "projected_variance",
    "refresh_mismatch",
    "subspace_error",
    "tracking_error",
]

CSV_HEADER = ["step", "layer", "E_t", "Delta_t", "sigma2_hat", "R_t", "loss"]


@dataclass(frozen=True)
class DiagnosticsSample:
    step: int
    layer: str
    tracking_error: float      # CSV column E_t
    subspace_error: float      # CSV column Delta_t
    projected_variance: float  # CSV column sigma2_hat
    refresh_mismatch: float    # CSV column R_t, exactly 0 off refresh steps
    loss: float


def subspace_error(true_grad, pair: ProjectionPair) -> float:
    """Squared Frobenius distance between the doubly-projected noise-free
    gradient and the gradient itself: |U U^T G V V^T - G|_F^2."""
    G = as_matrix(true_grad, "true gradient")
    proj = pair.U @ (pair.U.T @ G @ pair.V) @ pair.V.T
    d = proj - G
    return float((d * d).sum())


def tracking_error(lifted_moment, true_grad) -> float:
    """|lifted momentum - noise-free gradient|_F^2 for the current step."""
    M = as_matrix(lifted_moment, "lifted moment")
    G = as_matrix(true_grad, "true gradient")
    if M.shape != G.shape:
        raise ValueError(f"lifted moment {M.shape} vs gradient {G.shape}")
    d = M - G
    return float((d * d).sum())


def projected_variance(cores) -> tuple[float, bool]:
    """Unbiased sample variance of the per-worker cores around their mean,
    summed over entries.  The orthonormal lift preserves Frobenius norms, so
    this is computed directly in core space.  A single worker gives no
    estimate: returns (0.0, False).
    """
    mats = [as_matrix(c, f"core {i}") for i, c in enumerate(cores)]
    n = len(mats)
    if n == 0:
        raise ValueError("projected_variance needs at least one core")
    if n == 1:
        return 0.0, False
    # shifting by the first core is variance-invariant and keeps identical
    # inputs at exactly zero
    shifted = [m - mats[0] for m in mats]
    mean = shifted[0].copy()
    for m in shifted[1:]:
        mean += m
    mean /= n
    total = 0.0
    for m in shifted:
        d = m - mean
        total += float((d * d).sum())
    return total / (n - 1), True


def refresh_mismatch(pair_new: ProjectionPair, pair_old: ProjectionPair, m_prev) -> float:
    """Squared change in the lifted momentum caused purely by swapping bases:
    |U_new m V_new^T - U_old m V_old^T|_F^2."""
    if pair_new.rank != pair_old.rank:
        raise ValueError(f"rank mismatch: {pair_new.rank} vs {pair_old.rank}")
    m_prev = as_matrix(m_prev, "previous momentum")
    a = pair_new.U @ m_prev @ pair_new.V.T
    b = pair_old.U @ m_prev @ pair_old.V.T
    d = a - b
    return float((d * d).sum())


class DiagnosticsLog:
    def __init__(self):
        self.samples: list[DiagnosticsSample] = []

    def add(self, sample: DiagnosticsSample):
        self.samples.append(sample)

    def for_layer(self, layer: str) -> list[DiagnosticsSample]:
        return [s for s in self.samples if s.layer == layer]

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_HEADER)
            for s in self.samples:
                w.writerow([s.step, s.layer, repr(s.tracking_error),
                            repr(s.subspace_error), repr(s.projected_variance),
                            repr(s.refresh_mismatch), repr(s.loss)])
