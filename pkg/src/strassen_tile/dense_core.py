"""Dense linear algebra and randomness foundation.

Matrices are plain 2-D float64 numpy arrays in row-major (C) order; this
module provides the small set of primitives everything else is built on:
a fixed-order reference matmul, tile vectorization, least squares,
singular values, seeded Gaussian sampling, and lossless serialization.

Conventions fixed here and used throughout the package:

* tiles are vectorized row-major (``vec_tile``),
* the reference ``matmul`` accumulates over the contraction index in
  ascending order, so its result is reproducible bit-for-bit,
* randomness comes from numpy's PCG64 generator seeded with a 64-bit
  integer; identical seeds give identical streams.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MATRIX_MAGIC = b"STLM"
MATRIX_VERSION = 1

SINGULAR_COND_LIMIT = 1e12


class ShapeError(ValueError):
    """Operand shapes are incompatible or a matrix is not tileable."""


class SingularSystemError(ValueError):
    """A linear system is numerically singular; carries a condition estimate."""

    def __init__(self, message: str, cond: float | None = None):
        super().__init__(message)
        self.cond = cond


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Coerce to a finite, C-contiguous float64 2-D array."""
    m = np.ascontiguousarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got ndim={m.ndim}")
    if m.size and not np.all(np.isfinite(m)):
        raise ValueError(f"{name} contains non-finite entries")
    return m


def matmul(a, b) -> np.ndarray:
    """Reference matrix product with a fixed ascending contraction order.

    Accumulates rank-1 updates over the shared index k in ascending order,
    which makes the per-entry rounding sequence identical to a scalar
    triple loop with the k loop innermost.  Used as the exactness baseline;
    performance-critical paths use ordinary BLAS products instead.
    """
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} x {b.shape}")
    out = np.zeros((a.shape[0], b.shape[1]))
    for k in range(a.shape[1]):
        out += np.outer(a[:, k], b[k, :])
    return out


def _check_tileable(m: np.ndarray, t: int) -> None:
    if t < 1:
        raise ShapeError(f"tile size must be >= 1, got {t}")
    if m.shape[0] % t or m.shape[1] % t:
        raise ShapeError(f"tile size {t} does not divide shape {m.shape}")


def vec_tile(m, block_row: int, block_col: int, t: int) -> np.ndarray:
    """Row-major flattening (length t*t) of the tile at block (block_row, block_col)."""
    m = as_matrix(m)
    _check_tileable(m, t)
    rows, cols = m.shape[0] // t, m.shape[1] // t
    if not (0 <= block_row < rows and 0 <= block_col < cols):
        raise ShapeError(
            f"tile index ({block_row},{block_col}) out of range for {rows}x{cols} grid"
        )
    i, j = block_row * t, block_col * t
    return m[i : i + t, j : j + t].reshape(t * t).copy()


def unvec_tile(v, t: int) -> np.ndarray:
    """Inverse of vec_tile: length-t*t vector back to a t x t tile."""
    v = np.asarray(v, dtype=np.float64).ravel()
    if v.shape[0] != t * t:
        raise ShapeError(f"expected length {t * t}, got {v.shape[0]}")
    return v.reshape(t, t).copy()


def tile_fibers(m, t: int) -> np.ndarray:
    """All tile vectorizations at once: (rows/t, cols/t, t*t) array.

    fibers[I, J, :] == vec_tile(m, I, J, t).
    """
    m = as_matrix(m)
    _check_tileable(m, t)
    rows, cols = m.shape[0] // t, m.shape[1] // t
    return np.ascontiguousarray(
        m.reshape(rows, t, cols, t).swapaxes(1, 2).reshape(rows, cols, t * t)
    )


def untile_fibers(fibers, t: int) -> np.ndarray:
    """Inverse of tile_fibers: (R, C, t*t) fibers back to an (R*t, C*t) matrix."""
    f = np.asarray(fibers, dtype=np.float64)
    if f.ndim != 3 or f.shape[2] != t * t:
        raise ShapeError(f"expected (R, C, {t * t}) fibers, got {f.shape}")
    rows, cols = f.shape[0], f.shape[1]
    return np.ascontiguousarray(
        f.reshape(rows, cols, t, t).swapaxes(1, 2).reshape(rows * t, cols * t)
    )


def least_squares(design, targets) -> np.ndarray:
    """argmin_x ||design @ x - targets||_2 via normal equations.

    Requires at least as many rows as columns.  Raises SingularSystemError
    (with the Gram condition estimate attached) when the Gram matrix is
    numerically singular.
    """
    a = as_matrix(design, "design")
    y = np.asarray(targets, dtype=np.float64).ravel()
    if a.shape[0] < a.shape[1]:
        raise ShapeError(f"underdetermined system: {a.shape[0]} rows < {a.shape[1]} cols")
    if y.shape[0] != a.shape[0]:
        raise ShapeError(f"targets length {y.shape[0]} != design rows {a.shape[0]}")
    gram = a.T @ a
    cond = float(np.linalg.cond(gram))
    if not np.isfinite(cond) or cond > SINGULAR_COND_LIMIT:
        raise SingularSystemError(
            f"rank-deficient Gram matrix (cond ~ {cond:.3e})", cond=cond
        )
    return np.linalg.solve(gram, a.T @ y)


def singular_values(m) -> np.ndarray:
    """Singular values of m, nonincreasing, values only."""
    m = as_matrix(m)
    if m.size == 0:
        raise ShapeError("singular_values of an empty matrix")
    return np.linalg.svd(m, compute_uv=False)


def make_rng(seed: int) -> np.random.Generator:
    """Seeded PCG64 generator; identical seeds give identical streams."""
    return np.random.Generator(np.random.PCG64(seed))


def spawn_rngs(seed: int, n: int) -> list[np.random.Generator]:
    """n independent child generators split deterministically from one seed."""
    seq = np.random.SeedSequence(seed)
    return [np.random.Generator(np.random.PCG64(child)) for child in seq.spawn(n)]


def gaussian_matrix(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    """rows x cols matrix of i.i.d. standard normal entries."""
    if rows < 1 or cols < 1:
        raise ShapeError(f"matrix dims must be >= 1, got {rows}x{cols}")
    return rng.standard_normal((rows, cols))


# --- serialization ---------------------------------------------------------
#
# CSV: one row per line, '.' decimal, shortest round-trip float text.
# Binary blob: magic "STLM", u32 version, u64 rows, u64 cols, f64 data,
# everything little-endian.


def matrix_to_csv(m) -> str:
    m = as_matrix(m)
    return "\n".join(",".join(repr(x) for x in row) for row in m.tolist()) + "\n"


def matrix_from_csv(text: str) -> np.ndarray:
    rows = []
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        rows.append([float(tok) for tok in line.split(",")])
    if not rows:
        raise ValueError("no matrix rows found in CSV text")
    width = len(rows[0])
    if any(len(r) != width for r in rows):
        raise ShapeError("ragged CSV rows")
    return as_matrix(np.array(rows))


def save_matrix_csv(path, m) -> None:
    Path(path).write_text(matrix_to_csv(m))


def load_matrix_csv(path) -> np.ndarray:
    return matrix_from_csv(Path(path).read_text())


def matrix_to_bytes(m) -> bytes:
    m = as_matrix(m)
    header = MATRIX_MAGIC + struct.pack("<IQQ", MATRIX_VERSION, m.shape[0], m.shape[1])
    return header + m.astype("<f8").tobytes()


def matrix_from_bytes(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one matrix blob starting at offset; returns (matrix, next offset)."""
    head = offset + 4 + 4 + 8 + 8
    if len(buf) < head or buf[offset : offset + 4] != MATRIX_MAGIC:
        raise ValueError("not a matrix blob (bad magic or truncated header)")
    version, rows, cols = struct.unpack_from("<IQQ", buf, offset + 4)
    if version != MATRIX_VERSION:
        raise ValueError(f"unsupported matrix blob version {version}")
    end = head + rows * cols * 8
    if len(buf) < end:
        raise ValueError("truncated matrix blob payload")
    data = np.frombuffer(buf[head:end], dtype="<f8").reshape(rows, cols)
    return as_matrix(data), end


def save_matrix_blob(path, m) -> None:
    Path(path).write_bytes(matrix_to_bytes(m))


def load_matrix_blob(path) -> np.ndarray:
    m, _ = matrix_from_bytes(Path(path).read_bytes())
    return m
