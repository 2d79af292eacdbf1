"""Dense linear-algebra kernels used by every other module.

Thin Householder QR orthonormalization with rank detection, a one-sided
Jacobi SVD for small matrices, a seeded Gaussian sampler, and the handful of
products/norms the rest of the package is written in terms of.

All kernels operate on 2-D float64 C-order numpy arrays, never mutate their
inputs, and are pure: equal inputs give bitwise-equal outputs.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "SeededRng",
    "as_matrix",
    "frob_norm",
    "gaussian_matrix",
    "hadamard",
    "matmul",
    "matmul_nt",
    "matmul_tn",
    "orth",
    "scale_add",
    "svd_small",
]

# Columns whose remaining norm falls below RANK_TOL times the largest column
# norm of the input are treated as numerically dependent and dropped.
RANK_TOL = 1e-12

# Relative threshold below which a singular value is treated as zero and its
# left vector replaced by an orthonormal-complement fill.
SVD_NULL_TOL = 1e-13

# One-sided Jacobi stops once every column pair satisfies
# |a_i . a_j| <= JACOBI_TOL * |a_i| |a_j|.
JACOBI_TOL = 1e-14
_JACOBI_MAX_SWEEPS = 60


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Validate and normalize an input to a finite 2-D float64 C-order array."""
    m = np.ascontiguousarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got ndim={m.ndim}")
    if m.size and not np.isfinite(m).all():
        raise ValueError(f"{name} contains non-finite entries")
    return m


class SeededRng:
    """Deterministic Gaussian stream: same seed, same sample sequence.

    A ``spawn_key`` derives independent sub-streams (per layer, per step)
    from one root seed, so shared draws can be replayed by every worker.
    """

    def __init__(self, seed: int, spawn_key: tuple[int, ...] = ()):
        self.seed = int(seed)
        self.spawn_key = tuple(int(k) for k in spawn_key)
        self.position = 0
        ss = np.random.SeedSequence(self.seed, spawn_key=self.spawn_key)
        self.generator = np.random.Generator(np.random.PCG64(ss))

    @classmethod
    def derive(cls, seed: int, *key: int) -> "SeededRng":
        return cls(seed, spawn_key=key)

    def normal(self, rows: int, cols: int) -> np.ndarray:
        self.position += 1
        return self.generator.standard_normal((rows, cols))


def gaussian_matrix(rng: SeededRng, rows: int, cols: int) -> np.ndarray:
    """i.i.d. standard-normal matrix drawn from the seeded stream."""
    if rows < 1 or cols < 1:
        raise ValueError(f"gaussian_matrix needs positive shape, got {rows}x{cols}")
    return rng.normal(rows, cols)


def _fill_orthonormal(basis: np.ndarray, target: int) -> np.ndarray:
    """Pad a matrix with orthonormal columns up to ``target`` columns.

    Fill directions come from the standard basis in index order, each
    orthogonalized (twice, for robustness) against the columns so far.
    """
    m, have = basis.shape
    if target > m:
        raise ValueError(f"cannot fit {target} orthonormal columns in R^{m}")
    out = np.zeros((m, target))
    out[:, :have] = basis
    e = 0
    while have < target:
        v = np.zeros(m)
        v[e] = 1.0
        for _ in range(2):
            v -= out[:, :have] @ (out[:, :have].T @ v)
        nv = np.sqrt((v * v).sum())
        if nv > 1e-6:
            out[:, have] = v / nv
            have += 1
        e += 1
    return out


def orth(M, pad: bool = False) -> np.ndarray:
    """Orthonormal basis for the column space of M via Householder thin QR.

    Columns whose remaining diagonal entry of R falls below tolerance are
    numerically dependent and dropped, so the result always has orthonormal
    columns; its width is the numerical column rank of M.

    With ``pad=True`` the basis is padded back to min(m, k) columns with
    standard-basis directions orthogonalized against the computed ones; an
    all-zero input then yields the leading columns of the identity.  The
    subspace-refresh path uses this so every worker's sketch keeps a fixed,
    nonempty shape.
    """
    M = as_matrix(M, "orth input")
    m, k = M.shape
    if m < 1 or k < 1:
        raise ValueError(f"orth needs a nonempty matrix, got {m}x{k}")

    R = M.copy()
    col_scale = float(np.sqrt((M * M).sum(axis=0)).max())
    tol = RANK_TOL * col_scale
    reflectors: list[tuple[int, np.ndarray, float]] = []
    diag_signs: list[float] = []

    p = 0  # rows consumed == columns kept so far
    for j in range(k):
        if p >= m:
            break
        x = R[p:, j]
        nx = float(np.sqrt((x * x).sum()))
        if nx <= tol:
            continue  # dependent (or zero) column: dropped
        # Householder vector with the sign choice that avoids cancellation.
        alpha = -nx if x[0] >= 0 else nx
        v = x.copy()
        v[0] -= alpha
        vn2 = float((v * v).sum())
        R[p:, j:] -= np.outer(v, (2.0 / vn2) * (v @ R[p:, j:]))
        reflectors.append((p, v, vn2))
        diag_signs.append(1.0 if alpha >= 0 else -1.0)
        p += 1

    rank = p
    Q = np.zeros((m, rank))
    Q[:rank, :rank] = np.eye(rank)
    for off, v, vn2 in reversed(reflectors):
        block = Q[off:, :]
        block -= np.outer(v, (2.0 / vn2) * (v @ block))
    # Flip columns so the implied R diagonal is positive; orth is then the
    # identity on matrices that already have orthonormal columns.
    for j, sign in enumerate(diag_signs):
        if sign < 0:
            Q[:, j] = -Q[:, j]

    if pad:
        return _fill_orthonormal(Q, min(m, k))
    return Q


def _round_robin_rounds(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Round-robin schedule covering all column pairs with disjoint rounds."""
    players = list(range(n))
    if n % 2:
        players.append(-1)  # bye
    half = len(players) // 2
    rounds = []
    for _ in range(len(players) - 1):
        left = [players[i] for i in range(half)]
        right = [players[-1 - i] for i in range(half)]
        pairs = [(a, b) if a < b else (b, a)
                 for a, b in zip(left, right) if a >= 0 and b >= 0]
        pairs.sort()
        rounds.append((np.array([p[0] for p in pairs], dtype=np.intp),
                       np.array([p[1] for p in pairs], dtype=np.intp)))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def _jacobi_svd_tall(A: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One-sided Jacobi SVD of a tall matrix A (m >= n): A = U diag(s) V^T.

    Rotations run in a fixed round-robin parallel ordering: pairs within a
    round are disjoint, so each round is one batched update on row-major
    transposed storage, touching only the pairs still out of tolerance.
    """
    m, n = A.shape
    WT = np.ascontiguousarray(A.T)  # rows are the columns being orthogonalized
    VT = np.eye(n)
    rounds = _round_robin_rounds(n)

    for _ in range(_JACOBI_MAX_SWEEPS):
        rotated = False
        for idx_i, idx_j in rounds:
            if idx_i.size == 0:
                continue
            WI = WT[idx_i]
            WJ = WT[idx_j]
            aii = np.einsum("ij,ij->i", WI, WI)
            ajj = np.einsum("ij,ij->i", WJ, WJ)
            aij = np.einsum("ij,ij->i", WI, WJ)
            active = np.abs(aij) > JACOBI_TOL * np.sqrt(aii * ajj)
            if not active.any():
                continue
            rotated = True
            if not active.all():
                sel = np.flatnonzero(active)
                idx_i, idx_j = idx_i[sel], idx_j[sel]
                WI, WJ = WI[sel], WJ[sel]
                aii, ajj, aij = aii[sel], ajj[sel], aij[sel]
            zeta = (ajj - aii) / (2.0 * aij)
            t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            c = (1.0 / np.sqrt(1.0 + t * t))[:, None]
            s = (c.ravel() * t)[:, None]
            WT[idx_i] = c * WI - s * WJ
            WT[idx_j] = s * WI + c * WJ
            VI = VT[idx_i]
            VJ = VT[idx_j]
            VT[idx_i] = c * VI - s * VJ
            VT[idx_j] = s * VI + c * VJ
        if not rotated:
            break

    norms = np.sqrt(np.einsum("ij,ij->i", WT, WT))
    order = np.argsort(-norms, kind="stable")
    sigma = norms[order].copy()

    null_tol = SVD_NULL_TOL * sigma[0] if sigma[0] > 0 else 0.0
    rank = int((sigma > null_tol).sum())
    sigma[rank:] = 0.0
    U_cols = (WT[order[:rank]] / sigma[:rank, None]).T if rank else np.zeros((m, 0))
    U = _fill_orthonormal(U_cols, n)
    V = np.ascontiguousarray(VT[order].T)
    return U, sigma, V


def _svd_tall(A: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """SVD of a tall matrix (m >= n): thin-QR reduction, then one-sided Jacobi
    on the transposed reduced factor.  The reduction is exact (orthogonal), so
    rank-deficient inputs collapse to a rank-sized rotation problem."""
    m, n = A.shape
    Q = orth(A)
    r = Q.shape[1]
    if r == 0:
        return _fill_orthonormal(np.zeros((m, 0)), n), np.zeros(n), np.eye(n)
    R = Q.T @ A  # r x n reduced matrix
    U2, sigma, V2 = _jacobi_svd_tall(np.ascontiguousarray(R.T))  # R^T = U2 s V2^T
    U_full = Q @ V2  # R = V2 s U2^T, so A = (Q V2) s U2^T
    V_full = U2
    if r < n:
        U_full = _fill_orthonormal(U_full, n)
        V_full = _fill_orthonormal(V_full, n)
        sigma = np.concatenate([sigma, np.zeros(n - r)])
    return U_full, sigma, V_full


def svd_small(B) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Full SVD of a small dense matrix: thin-QR reduction followed by
    one-sided Jacobi rotations on the reduced matrix.

    Returns (U, sigma, V) with B = U @ diag(sigma) @ V.T, sigma non-negative
    and descending, and both factors orthonormal-columned; for an a x b input
    U is a x s and V is b x s with s = min(a, b).  Wide inputs are transposed
    internally so the reduction always runs on the tall side.

    Sign convention: the largest-magnitude entry of each column of U is made
    non-negative (ties resolved to the lowest row index), negating the
    matching column of V in tandem, so factors are reproducible across runs.
    """
    B = as_matrix(B, "svd_small input")
    a, b = B.shape
    if a < 1 or b < 1:
        raise ValueError(f"svd_small needs a nonempty matrix, got {a}x{b}")

    if a <= b:
        right, sigma, left = _svd_tall(np.ascontiguousarray(B.T))
        U, V = left, right
    else:
        U, sigma, V = _svd_tall(B)

    for j in range(sigma.size):
        col = U[:, j]
        i = int(np.argmax(np.abs(col)))
        if col[i] < 0:
            U[:, j] = -col
            V[:, j] = -V[:, j]
    return U, sigma, V


def _check_shapes(A: np.ndarray, B: np.ndarray, da: int, db: int, op: str):
    if A.shape[da] != B.shape[db]:
        raise ValueError(f"{op}: shapes {A.shape} and {B.shape} do not conform")


def matmul(A, B) -> np.ndarray:
    A = as_matrix(A, "matmul lhs")
    B = as_matrix(B, "matmul rhs")
    _check_shapes(A, B, 1, 0, "matmul")
    return A @ B


def matmul_tn(A, B) -> np.ndarray:
    """A^T @ B."""
    A = as_matrix(A, "matmul_tn lhs")
    B = as_matrix(B, "matmul_tn rhs")
    _check_shapes(A, B, 0, 0, "matmul_tn")
    return A.T @ B


def matmul_nt(A, B) -> np.ndarray:
    """A @ B^T."""
    A = as_matrix(A, "matmul_nt lhs")
    B = as_matrix(B, "matmul_nt rhs")
    _check_shapes(A, B, 1, 1, "matmul_nt")
    return A @ B.T


def frob_norm(A) -> float:
    A = as_matrix(A, "frob_norm input")
    return float(np.sqrt((A * A).sum()))


def hadamard(A, B) -> np.ndarray:
    A = as_matrix(A, "hadamard lhs")
    B = as_matrix(B, "hadamard rhs")
    if A.shape != B.shape:
        raise ValueError(f"hadamard: shapes {A.shape} and {B.shape} differ")
    return A * B


def scale_add(A, alpha: float, B, beta: float) -> np.ndarray:
    """alpha*A + beta*B."""
    A = as_matrix(A, "scale_add lhs")
    B = as_matrix(B, "scale_add rhs")
    if A.shape != B.shape:
        raise ValueError(f"scale_add: shapes {A.shape} and {B.shape} differ")
    return alpha * A + beta * B
