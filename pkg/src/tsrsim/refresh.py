"""Projection-pair refresh procedures.

The default path is a sketch-based randomized range finder with optional
power iterations: workers share one Gaussian probe, build local orthonormal
sketches, and only the k x n reduced matrix and the m x k basis average cross
the wire.  The baseline path synchronizes the full dense gradient and takes
an exact SVD, which is what the sketches are meant to beat on peak bytes.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

from .collective import CommLedger, CommObjectKind, all_reduce_mean
from .linalg import SeededRng, as_matrix, gaussian_matrix, orth, svd_small
from .optimizers import ProjectionPair

__all__ = [
    "RefreshConfig",
    "RefreshMode",
    "exact_refresh",
    "randomized_refresh",
]


class RefreshMode(Enum):
    RANDOMIZED = "randomized"
    EXACT = "exact"


@dataclass(frozen=True)
class RefreshConfig:
    rank: int
    oversample: int = 4
    power_iters: int = 1
    interval: int = 1
    mode: RefreshMode = RefreshMode.RANDOMIZED
    reorthonormalize_qbar: bool = True

    def __post_init__(self):
        if self.rank < 1:
            raise ValueError(f"rank must be >= 1, got {self.rank}")
        if self.oversample < 0:
            raise ValueError(f"oversample must be >= 0, got {self.oversample}")
        if self.power_iters < 0:
            raise ValueError(f"power_iters must be >= 0, got {self.power_iters}")
        if self.interval < 1:
            raise ValueError(f"interval must be >= 1, got {self.interval}")

    @property
    def sketch_width(self) -> int:
        return self.rank + self.oversample

    def validate_shape(self, rows: int, cols: int):
        if self.sketch_width > min(rows, cols):
            raise ValueError(
                f"sketch width {self.sketch_width} exceeds min{rows, cols} "
                f"for a {rows}x{cols} layer")


def randomized_refresh(G_locals, cfg: RefreshConfig, rng: SeededRng, *,
                       step: int, layer: str, ledger: CommLedger) -> ProjectionPair:
    """Sketch-based refresh of the two-sided bases.

    Every worker uses the same probe drawn from the shared-seed stream, so
    local sketches are comparable; sketches are padded to full width k, which
    keeps shapes uniform across workers (and byte charges exactly m*k + k*n)
    even for rank-deficient or zero gradients.
    """
    mats = [as_matrix(G, "local gradient") for G in G_locals]
    if not mats:
        raise ValueError("randomized_refresh needs at least one worker gradient")
    m, n = mats[0].shape
    cfg.validate_shape(m, n)
    k = cfg.sketch_width

    omega = gaussian_matrix(rng, n, k)

    qs = []
    for G in mats:
        Q = orth(G @ omega, pad=True)
        for _ in range(cfg.power_iters):
            Q_row = orth(G.T @ Q, pad=True)
            Q = orth(G @ Q_row, pad=True)
        qs.append(Q)
    bs = [Q.T @ G for Q, G in zip(qs, mats)]

    B_bar = all_reduce_mean(bs, step=step, layer=layer,
                            kind=CommObjectKind.SKETCH_B, ledger=ledger)
    Q_bar = all_reduce_mean(qs, step=step, layer=layer,
                            kind=CommObjectKind.SKETCH_Q, ledger=ledger)
    if cfg.reorthonormalize_qbar:
        Q_bar = orth(Q_bar, pad=True)

    U_tilde, _sigma, V_tilde = svd_small(B_bar)
    pair = ProjectionPair(U=Q_bar @ U_tilde[:, :cfg.rank],
                          V=V_tilde[:, :cfg.rank],
                          last_refresh_step=step)
    if cfg.reorthonormalize_qbar:
        pair.check_orthonormal(1e-8)
    return pair


def exact_refresh(G_locals, rank: int, *, step: int, layer: str,
                  ledger: CommLedger) -> ProjectionPair:
    """Baseline refresh: synchronize the full dense gradient (the peak-byte
    cost this module otherwise avoids) and keep the top-r singular vectors."""
    mats = [as_matrix(G, "local gradient") for G in G_locals]
    if not mats:
        raise ValueError("exact_refresh needs at least one worker gradient")
    m, n = mats[0].shape
    if rank > min(m, n):
        raise ValueError(f"rank {rank} exceeds min{m, n}")

    G_bar = all_reduce_mean(mats, step=step, layer=layer,
                            kind=CommObjectKind.DENSE_GRAD, ledger=ledger)
    U_full, _sigma, V_full = svd_small(G_bar)
    pair = ProjectionPair(U=U_full[:, :rank].copy(), V=V_full[:, :rank].copy(),
                          last_refresh_step=step)
    pair.check_orthonormal(1e-8)
    return pair
