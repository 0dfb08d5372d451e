"""Exact Strassen triples and the two initialization families.

The classic seven-product decomposition of 2x2 matrix multiplication is
composed with itself (blocks of blocks) to get an exact rank-49 triple for
4x4 tiles.  Training runs start either from a random row subset of that
triple or from i.i.d. Gaussian factors.

Vectorization convention: 4x4 tiles are vectorized row-major everywhere,
so the two-level factors are Kronecker products of the 2x2-level factors
conjugated by the fixed permutation taking row-major order to block-major
order (outer 2x2 block index first, position inside the block second).
"""

from __future__ import annotations

import numpy as np

from .dense_core import ShapeError, matmul
from .snf_operator import SnfTriple


class ConstructionError(RuntimeError):
    """The construction-time exactness self-check failed."""


# Seven products, operand coefficients over row-major [m11, m12, m21, m22]:
#   p1 = (a11 + a22)(b11 + b22)      p5 = (a11 + a12) b22
#   p2 = (a21 + a22) b11             p6 = (a21 - a11)(b11 + b12)
#   p3 = a11 (b12 - b22)             p7 = (a12 - a22)(b21 + b22)
#   p4 = a22 (b21 - b11)
# and the output combinations
#   c11 = p1 + p4 - p5 + p7          c21 = p2 + p4
#   c12 = p3 + p5                    c22 = p1 - p2 + p3 + p6
_EX7 = np.array(
    [
        [1, 0, 0, 1],
        [0, 0, 1, 1],
        [1, 0, 0, 0],
        [0, 0, 0, 1],
        [1, 1, 0, 0],
        [-1, 0, 1, 0],
        [0, 1, 0, -1],
    ],
    dtype=np.float64,
)
_EW7 = np.array(
    [
        [1, 0, 0, 1],
        [1, 0, 0, 0],
        [0, 1, 0, -1],
        [-1, 0, 1, 0],
        [0, 0, 0, 1],
        [1, 1, 0, 0],
        [0, 0, 1, 1],
    ],
    dtype=np.float64,
)
_D7 = np.array(
    [
        [1, 0, 0, 1],
        [0, 0, 1, -1],
        [0, 1, 0, 1],
        [1, 0, 1, 0],
        [-1, 1, 0, 0],
        [0, 0, 0, 1],
        [1, 0, 0, 0],
    ],
    dtype=np.float64,
)


def strassen_rank7() -> SnfTriple:
    """The canonical rank-7 triple computing exact 2x2 matmul (t=2)."""
    return SnfTriple(2, 7, _EX7.copy(), _EW7.copy(), _D7.copy())


def _block_major_permutation() -> np.ndarray:
    """16x16 permutation P with P @ vec_rowmajor(4x4) = vec_blockmajor(4x4).

    Block-major order lists the four 2x2 blocks row-major, each block
    itself vectorized row-major.
    """
    p = np.zeros((16, 16))
    for i in range(4):
        for j in range(4):
            rm = 4 * i + j
            bm = 4 * (2 * (i // 2) + (j // 2)) + 2 * (i % 2) + (j % 2)
            p[bm, rm] = 1.0
    return p


def _matmul_tensor(t: int) -> np.ndarray:
    """tensor[a, b, :] = vec(E_a @ E_b) over all elementary t x t pairs."""
    n = t * t
    tensor = np.zeros((n, n, n))
    for a in range(n):
        for b in range(n):
            ea = np.zeros((t, t))
            eb = np.zeros((t, t))
            ea[a // t, a % t] = 1.0
            eb[b // t, b % t] = 1.0
            tensor[a, b] = matmul(ea, eb).reshape(-1)
    return tensor


def _triple_tensor(snf: SnfTriple) -> np.ndarray:
    # tensor[a, b, :] = d.T @ (e_x[:, a] * e_w[:, b])
    return np.einsum("pa,pb,pi->abi", snf.e_x, snf.e_w, snf.d)


def strassen_rank49() -> SnfTriple:
    """Exact rank-49 triple for 4x4 tiles via two-level composition.

    Each factor is kron(F, F) of the rank-7 factor, composed with the
    row-major-to-block-major permutation; entries stay in {-1, 0, 1}.
    Exactness over all 256 elementary pairs is checked at construction
    and a failure raises immediately.
    """
    perm = _block_major_permutation()
    triple = SnfTriple(
        4,
        49,
        np.kron(_EX7, _EX7) @ perm,
        np.kron(_EW7, _EW7) @ perm,
        np.kron(_D7, _D7) @ perm,
    )
    if not np.array_equal(_triple_tensor(triple), _matmul_tensor(4)):
        raise ConstructionError("composed rank-49 triple failed the exactness check")
    return triple


def pruned_subset_init(full: SnfTriple, r: int, rng: np.random.Generator) -> SnfTriple:
    """Extract the same r rows (uniform, without replacement) from all three factors."""
    if not 1 <= r <= full.r:
        raise ValueError(f"subset rank must be in [1, {full.r}], got {r}")
    rows = np.sort(rng.choice(full.r, size=r, replace=False))
    return SnfTriple(full.t, r, full.e_x[rows], full.e_w[rows], full.d[rows])


def nested_subset_chain(rng: np.random.Generator, size: int = 49) -> np.ndarray:
    """A seeded permutation whose first-r prefixes form nested row subsets."""
    return rng.permutation(size)


def subset_triple(full: SnfTriple, rows) -> SnfTriple:
    """Triple built from an explicit row subset (kept in the given order)."""
    rows = np.asarray(rows, dtype=int)
    if rows.ndim != 1 or rows.size < 1 or np.unique(rows).size != rows.size:
        raise ValueError("row subset must be a nonempty list of distinct indices")
    if rows.min() < 0 or rows.max() >= full.r:
        raise ValueError(f"row indices must lie in [0, {full.r})")
    return SnfTriple(full.t, rows.size, full.e_x[rows], full.e_w[rows], full.d[rows])


def random_gaussian_init(
    t: int, r: int, rng: np.random.Generator, scale: float = 1.0
) -> SnfTriple:
    """Three independent r x t^2 factors with i.i.d. N(0, scale^2) entries."""
    if t < 1 or r < 1:
        raise ShapeError(f"need t >= 1 and r >= 1, got t={t}, r={r}")
    shape = (r, t * t)
    return SnfTriple(
        t,
        r,
        scale * rng.standard_normal(shape),
        scale * rng.standard_normal(shape),
        scale * rng.standard_normal(shape),
    )
