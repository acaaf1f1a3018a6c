"""SVD-based geometry of linear equality constraints.

A constraint matrix ``A`` is decomposed once into its pseudo-inverse and
orthonormal bases of the row space (``range_basis``) and null space
(``null_basis``).  Projection onto ``{y | A y = b}`` is then
``(I - A^+ A) v + A^+ b``, evaluated as ``V2 (V2^T v) + A^+ b``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np

from .errors import InfeasibleError, InputError

FEASIBILITY_TOL = 1e-8


def _fix_signs(vectors: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    """Flip columns so the first entry with magnitude above ``tol`` is positive."""
    if vectors.size == 0:
        return vectors
    signs = np.ones(vectors.shape[1])
    for j in range(vectors.shape[1]):
        nz = np.flatnonzero(np.abs(vectors[:, j]) > tol)
        if nz.size and vectors[nz[0], j] < 0:
            signs[j] = -1.0
    return vectors * signs


@dataclass(frozen=True, eq=False)
class SubspaceDecomposition:
    matrix: np.ndarray
    rank: int
    pinv: np.ndarray
    range_basis: np.ndarray
    null_basis: np.ndarray
    singular_values: np.ndarray
    rank_tolerance: float

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def project_null(self, v: np.ndarray) -> np.ndarray:
        """Orthogonal projection onto Ker(A), i.e. ``V2 V2^T v``."""
        V2 = self.null_basis
        return V2 @ (V2.T @ v)

    def to_null_coords(self, v: np.ndarray) -> np.ndarray:
        return self.null_basis.T @ v

    def from_null_coords(self, z: np.ndarray) -> np.ndarray:
        return self.null_basis @ z


def decompose(A, rank_tolerance: float = 0.0) -> SubspaceDecomposition:
    """Decompose ``A`` (m x d) by SVD.

    ``rank_tolerance = 0`` selects the usual numerical-rank threshold
    ``max(m, d) * eps * sigma_max``.  Singular vectors are sign-normalised so
    the output is deterministic.
    """
    A = np.array(A, dtype=float)
    if A.ndim == 1:
        A = A[None, :]
    if A.ndim != 2:
        raise InputError(f"constraint matrix must be 2-D, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise InputError("constraint matrix has non-finite entries")
    if rank_tolerance < 0:
        raise InputError("rank_tolerance must be nonnegative")
    m, d = A.shape
    if m == 0 or not np.any(A):
        return SubspaceDecomposition(
            matrix=A,
            rank=0,
            pinv=np.zeros((d, m)),
            range_basis=np.zeros((d, 0)),
            null_basis=np.eye(d),
            singular_values=np.zeros(min(m, d)),
            rank_tolerance=float(rank_tolerance),
        )

    U, s, Vt = np.linalg.svd(A, full_matrices=True)
    tol = rank_tolerance or max(m, d) * np.finfo(float).eps * s[0]
    r = int(np.sum(s > tol))
    V = Vt.T
    V1 = _fix_signs(V[:, :r])
    # keep A = U S V^T consistent with the flipped right vectors
    flips = np.sign(np.sum(V1 * V[:, :r], axis=0))
    U1 = U[:, :r] * flips
    V2 = _fix_signs(V[:, r:])
    pinv = (V1 / s[:r]) @ U1.T
    return SubspaceDecomposition(
        matrix=A,
        rank=r,
        pinv=pinv,
        range_basis=V1,
        null_basis=V2,
        singular_values=s,
        rank_tolerance=float(tol),
    )


@dataclass(frozen=True, eq=False)
class ConsensusDecomposition(SubspaceDecomposition):
    """Decomposition of the chained-difference consensus matrix.

    Projection onto the null space is block averaging, computed with
    :func:`server_average` so a simulated server and the lifted problem
    perform identical arithmetic.
    """

    n_blocks: int = 0
    block_dim: int = 0

    def project_null(self, v: np.ndarray) -> np.ndarray:
        M, d = self.n_blocks, self.block_dim
        if v.ndim == 1:
            mean = server_average(list(v.reshape(M, d)))
            return np.tile(mean, M)
        # column-wise for matrix arguments
        return np.column_stack([self.project_null(col) for col in v.T])


def server_average(blocks: Sequence[np.ndarray]) -> np.ndarray:
    """Arithmetic mean of equally sized client vectors."""
    if len(blocks) == 0:
        raise InputError("server_average needs at least one block")
    stacked = np.stack([np.asarray(b, dtype=float) for b in blocks])
    return np.add.reduce(stacked, axis=0) / len(blocks)


def consensus_matrix(M: int, d: int) -> np.ndarray:
    if M < 2:
        raise InputError("consensus needs M >= 2 clients")
    D = np.zeros((M - 1, M))
    idx = np.arange(M - 1)
    D[idx, idx] = 1.0
    D[idx, idx + 1] = -1.0
    return np.kron(D, np.eye(d))


def consensus_constraints(M: int, d: int) -> tuple[np.ndarray, ConsensusDecomposition]:
    """Consensus matrix ``[1 -1 ...] (x) I_d`` with null basis ``1_M/sqrt(M) (x) I_d``."""
    A = consensus_matrix(M, d)
    base = decompose(A)
    # the null space is known exactly; use the Kronecker basis rather than the SVD one
    V2 = np.kron(np.ones((M, 1)) / np.sqrt(M), np.eye(d))
    dec = ConsensusDecomposition(
        matrix=A,
        rank=base.rank,
        pinv=base.pinv,
        range_basis=base.range_basis,
        null_basis=V2,
        singular_values=base.singular_values,
        rank_tolerance=base.rank_tolerance,
        n_blocks=M,
        block_dim=d,
    )
    return A, dec


@dataclass(frozen=True, eq=False)
class AffineConstraint:
    """The set ``{v | A v = target}``."""

    decomposition: SubspaceDecomposition
    target: np.ndarray
    tol: float = field(default=FEASIBILITY_TOL)

    @cached_property
    def offset(self) -> np.ndarray:
        return self.decomposition.pinv @ self.target

    @cached_property
    def residual(self) -> float:
        A = self.decomposition.matrix
        return float(np.linalg.norm(A @ self.offset - self.target))

    @property
    def feasible(self) -> bool:
        return self.residual <= self.tol * (1.0 + float(np.linalg.norm(self.target)))

    def project(self, v: np.ndarray) -> np.ndarray:
        if not self.feasible:
            raise InfeasibleError(self.residual)
        if v.shape[0] != self.decomposition.dim:
            raise InputError(f"vector length {v.shape[0]} != {self.decomposition.dim}")
        return self.decomposition.project_null(v) + self.offset


def project(constraint: AffineConstraint, v: np.ndarray) -> np.ndarray:
    return constraint.project(np.asarray(v, dtype=float))


def check_feasible(constraint: AffineConstraint) -> tuple[bool, float]:
    return constraint.feasible, constraint.residual


def weighted_norm_sq(dec: SubspaceDecomposition, v: np.ndarray) -> float:
    """``v^T (I - A^+ A) v``, the squared norm of the null-space component."""
    v = np.asarray(v, dtype=float)
    if v.shape[0] != dec.dim:
        raise InputError(f"vector length {v.shape[0]} != {dec.dim}")
    pv = dec.project_null(v)
    return float(pv @ pv)
