"""Analytic FLOP and IO accounting for STL vs naive matmul.

Conventions: one multiply-accumulate counts as 2 FLOPs (so a single tile
encoding costs 2*t^2*r FLOPs and naive n x n matmul costs 2n^3), and the
IO model counts ideal reads and writes only, no cache effects.  The square
closed forms assume the weight operand is stored pre-encoded, so they
include one encode pass (input) and one decode pass (output); the general
formula prices all three transform passes.  Re-reads of the slice-product
accumulators are deliberately not modeled.

All arithmetic is exact Python integer arithmetic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dense_core import ShapeError, make_rng
from .snf_operator import SnfTriple
from .strassen_basis import random_gaussian_init

FLOPS_PER_MAC = 2


@dataclass(frozen=True)
class ProblemShape:
    n: int
    k: int
    m: int
    t: int
    r: int
    bytes_per_scalar: int = 2

    def __post_init__(self):
        dims = (self.n, self.k, self.m, self.t, self.r, self.bytes_per_scalar)
        if any(int(v) != v or v < 1 for v in dims):
            raise ShapeError(f"all shape fields must be positive integers: {self}")
        if self.n % self.t or self.k % self.t or self.m % self.t:
            raise ShapeError(f"tile size {self.t} must divide n, k, m in {self}")


@dataclass(frozen=True)
class CostReport:
    """Square-shape cost summary with per-step breakdowns.

    Steps: 1 = encode input tiles, 2 = slice-wise products, 3 = decode
    output tiles.  Totals always equal the sum of their breakdowns.
    """

    n: int
    t: int
    r: int
    bytes_per_scalar: int
    flops_stl: int
    flops_naive: int
    io_stl_bytes: int
    io_naive_bytes: int
    flop_steps: tuple[int, int, int]
    io_steps: tuple[int, int, int]

    @property
    def speedup_flops(self) -> float:
        return self.flops_naive / self.flops_stl


def flops_general(shape: ProblemShape) -> int:
    """FLOPs for the full pipeline on an n x k by k x m problem.

    Three transform passes (encode both operands, decode the output) at
    2*t^2*r FLOPs per tile, plus the slice products at 2*r*(nkm/t^3).
    """
    n, k, m, t, r = shape.n, shape.k, shape.m, shape.t, shape.r
    per_tile = FLOPS_PER_MAC * t * t * r
    transforms = ((n * k) // (t * t) + (m * k) // (t * t) + (m * n) // (t * t)) * per_tile
    products = FLOPS_PER_MAC * r * (n * k * m) // (t * t * t)
    return transforms + products


def flops_square(n: int, t: int, r: int) -> tuple[int, int]:
    """(STL, naive) FLOPs for square n x n operands with pre-encoded weights.

    STL: 4*n^2*r transform FLOPs (encode input + decode output) plus
    2*n^3*r/t^3 product FLOPs.  Naive: 2*n^3.
    """
    shape = ProblemShape(n, n, n, t, r)
    transforms = 2 * FLOPS_PER_MAC * n * n * r
    products = FLOPS_PER_MAC * r * n**3 // t**3
    naive = FLOPS_PER_MAC * shape.n**3
    return transforms + products, naive


def io_square(
    n: int, t: int, r: int, bytes_per_scalar: int = 2
) -> tuple[int, int, tuple[int, int, int]]:
    """(STL bytes, naive bytes, per-step STL breakdown) for square shapes.

    With |X| = n^2 * bytes_per_scalar: step 1 reads X and writes the r
    slices (|X|(1 + r/t^2)), step 2 reads both slice stacks and writes the
    product slices (3|X| r/t^2), step 3 mirrors step 1.  Naive matmul
    moves 3|X|.
    """
    shape = ProblemShape(n, n, n, t, r, bytes_per_scalar)
    x_bytes = n * n * bytes_per_scalar
    slices_bytes = bytes_per_scalar * (n // t) ** 2 * r  # == |X| * r / t^2
    io1 = x_bytes + slices_bytes
    io2 = 3 * slices_bytes
    io3 = x_bytes + slices_bytes
    return io1 + io2 + io3, 3 * x_bytes, (io1, io2, io3)


def io_fused_chain(
    n: int, t: int, r: int, layers: int, bytes_per_scalar: int = 2
) -> int:
    """Total IO bytes for a chain of layers with interior decode+encode fused.

    Each interior boundary keeps activations encoded, saving one decode
    write-back and one encode read (an io3 + io1 pair).
    """
    if layers < 1:
        raise ShapeError(f"need at least one layer, got {layers}")
    total, _, (io1, _, io3) = io_square(n, t, r, bytes_per_scalar)
    return layers * total - (layers - 1) * (io1 + io3)


def cost_report(n: int, t: int, r: int, bytes_per_scalar: int = 2) -> CostReport:
    """Full square-shape report combining the FLOP and IO closed forms."""
    flops_stl, flops_naive = flops_square(n, t, r)
    transforms_each = FLOPS_PER_MAC * n * n * r
    flop_steps = (transforms_each, flops_stl - 2 * transforms_each, transforms_each)
    io_stl, io_naive, io_steps = io_square(n, t, r, bytes_per_scalar)
    return CostReport(
        n=n,
        t=t,
        r=r,
        bytes_per_scalar=bytes_per_scalar,
        flops_stl=flops_stl,
        flops_naive=flops_naive,
        io_stl_bytes=io_stl,
        io_naive_bytes=io_naive,
        flop_steps=flop_steps,
        io_steps=io_steps,
    )


def count_reference_flops(shape: ProblemShape, seed: int = 0) -> int:
    """Run the batched pipeline on random data, tallying executed MACs.

    Counts are incremented alongside each executed operation (per tile
    transform, per slice product) at 2 FLOPs per MAC, so the result is an
    instrumented measurement rather than a formula; it must agree with
    flops_general exactly.
    """
    n, k, m, t, r = shape.n, shape.k, shape.m, shape.t, shape.r
    rng = make_rng(seed)
    x = rng.standard_normal((n, k))
    w = rng.standard_normal((k, m))
    snf: SnfTriple = random_gaussian_init(t, r, rng, scale=0.5)

    flops = 0
    t2 = t * t

    def encode(mat, encoder):
        nonlocal flops
        br, bc = mat.shape[0] // t, mat.shape[1] // t
        enc = np.empty((br, bc, r))
        for i in range(br):
            for j in range(bc):
                enc[i, j] = encoder @ mat[i * t : (i + 1) * t, j * t : (j + 1) * t].reshape(-1)
                flops += FLOPS_PER_MAC * r * t2
        return enc

    x_enc = encode(x, snf.e_x)
    w_enc = encode(w, snf.e_w)

    out_enc = np.empty((n // t, m // t, r))
    for p in range(r):
        out_enc[:, :, p] = x_enc[:, :, p] @ w_enc[:, :, p]
        flops += FLOPS_PER_MAC * (n // t) * (m // t) * (k // t)

    for i in range(n // t):
        for j in range(m // t):
            _ = snf.d.T @ out_enc[i, j]
            flops += FLOPS_PER_MAC * r * t2
    return flops


def speedup_table(n_list, r_list, t: int, bytes_per_scalar: int = 2) -> list[CostReport]:
    """Cost reports over the (n, r) grid, ordered n-major then by r."""
    return [
        cost_report(n, t, r, bytes_per_scalar)
        for n in n_list
        for r in r_list
    ]
