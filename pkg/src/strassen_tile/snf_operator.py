"""The Strassen-Tile (STL) bilinear operator.

An SNF triple (e_x, e_w, d) of r x t^2 matrices defines a bilinear map on
t x t tiles: encode both operand tiles into r dimensions, multiply
element-wise, decode back with the transposed decoder.  Applied tile-wise
with a sum over the shared tile index, this yields an approximate (or, for
suitable triples, exact) replacement for matrix multiplication.

Three evaluation paths are provided and must agree to tight tolerances:

* ``stl_reference`` -- per-tile evaluation with an explicit Hadamard
  accumulation, the semantic ground truth;
* ``stl_batched``   -- encode / r slice-wise matmuls / decode, the
  GPU-shaped formulation;
* ``stl_fused_step``-- chains layers in encoded space by merging one
  layer's decode with the next layer's encode into a single r x r map.

The decoder is stored r x t^2 like the encoders and applied transposed.
The contraction (tile) index is always accumulated in ascending order.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dense_core import (
    ShapeError,
    as_matrix,
    tile_fibers,
    untile_fibers,
    matrix_from_bytes,
    matrix_to_bytes,
)

ENCODED_MAGIC = b"STLE"
ENCODED_VERSION = 1
TRIPLE_VERSION = 1


@dataclass
class SnfTriple:
    """Encoder/encoder/decoder triple with tile size t and tensor rank r.

    All three factors are r x t^2; the decoder acts as d.T.  r <= t^2 is
    legal (rank-deficient operators are meaningful inputs).
    """

    t: int
    r: int
    e_x: np.ndarray
    e_w: np.ndarray
    d: np.ndarray

    def __post_init__(self):
        if self.t < 1 or self.r < 1:
            raise ShapeError(f"need t >= 1 and r >= 1, got t={self.t}, r={self.r}")
        want = (self.r, self.t * self.t)
        for name in ("e_x", "e_w", "d"):
            m = as_matrix(getattr(self, name), name)
            if m.shape != want:
                raise ShapeError(f"{name} must be {want}, got {m.shape}")
            setattr(self, name, m)

    def copy(self) -> "SnfTriple":
        return SnfTriple(self.t, self.r, self.e_x.copy(), self.e_w.copy(), self.d.copy())


def _check_encoded(enc: np.ndarray, name: str = "encoded") -> np.ndarray:
    e = np.asarray(enc, dtype=np.float64)
    if e.ndim != 3:
        raise ShapeError(f"{name} must be a (block_rows, block_cols, r) tensor")
    return e


def encode_tiles(m, encoder, t: int) -> np.ndarray:
    """Per-tile encoding: out[I, J, :] = encoder @ vec_tile(m, I, J, t)."""
    encoder = as_matrix(encoder, "encoder")
    if encoder.shape[1] != t * t:
        raise ShapeError(f"encoder needs {t * t} columns, got {encoder.shape[1]}")
    return tile_fibers(m, t) @ encoder.T


def decode_tiles(enc, decoder, t: int) -> np.ndarray:
    """Per-tile decoding with the transposed decoder; inverse step of encode."""
    enc = _check_encoded(enc)
    decoder = as_matrix(decoder, "decoder")
    if decoder.shape != (enc.shape[2], t * t):
        raise ShapeError(
            f"decoder must be {(enc.shape[2], t * t)}, got {decoder.shape}"
        )
    return untile_fibers(enc @ decoder, t)


def extract_slice(enc, p: int) -> np.ndarray:
    """The (block_rows x block_cols) matrix of p-th encoded-tile coordinates."""
    enc = _check_encoded(enc)
    if not 0 <= p < enc.shape[2]:
        raise IndexError(f"slice index {p} out of range for rank {enc.shape[2]}")
    return np.ascontiguousarray(enc[:, :, p])


def _slice_products(x_enc: np.ndarray, w_enc: np.ndarray) -> np.ndarray:
    """All r slice matmuls at once: out[:, :, p] = x_enc[:, :, p] @ w_enc[:, :, p]."""
    if x_enc.shape[2] != w_enc.shape[2]:
        raise ShapeError(f"rank mismatch: {x_enc.shape[2]} vs {w_enc.shape[2]}")
    if x_enc.shape[1] != w_enc.shape[0]:
        raise ShapeError(
            f"block grids incompatible: {x_enc.shape[:2]} x {w_enc.shape[:2]}"
        )
    prod = np.matmul(x_enc.transpose(2, 0, 1), w_enc.transpose(2, 0, 1))
    return np.ascontiguousarray(prod.transpose(1, 2, 0))


def stl_reference(x, w, snf: SnfTriple) -> np.ndarray:
    """Ground-truth tile-wise evaluation.

    For each output tile, Hadamard products of encoded operand tiles are
    accumulated over the shared tile index in ascending order, then decoded
    once.  Kept deliberately loop-shaped; the batched path must match it.
    """
    x = as_matrix(x, "x")
    w = as_matrix(w, "w")
    t = snf.t
    if x.shape[1] != w.shape[0]:
        raise ShapeError(f"inner dims differ: {x.shape} x {w.shape}")
    for m, name in ((x, "x"), (w, "w")):
        if m.shape[0] % t or m.shape[1] % t:
            raise ShapeError(f"tile size {t} does not divide {name} shape {m.shape}")
    bi, bk = x.shape[0] // t, x.shape[1] // t
    bj = w.shape[1] // t

    ux = np.empty((bi, bk, snf.r))
    for i in range(bi):
        for l in range(bk):
            ux[i, l] = snf.e_x @ x[i * t : (i + 1) * t, l * t : (l + 1) * t].reshape(-1)
    vw = np.empty((bk, bj, snf.r))
    for l in range(bk):
        for j in range(bj):
            vw[l, j] = snf.e_w @ w[l * t : (l + 1) * t, j * t : (j + 1) * t].reshape(-1)

    out = np.empty((x.shape[0], w.shape[1]))
    for i in range(bi):
        for j in range(bj):
            acc = np.zeros(snf.r)
            for l in range(bk):
                acc += ux[i, l] * vw[l, j]
            out[i * t : (i + 1) * t, j * t : (j + 1) * t] = (snf.d.T @ acc).reshape(t, t)
    return out


def stl_batched(x, w_encoded, snf: SnfTriple) -> np.ndarray:
    """Batched evaluation: encode x, r slice-wise matmuls, decode.

    The weight operand arrives pre-encoded (r values per tile); this is the
    form a layer stores its weights in, whether or not those fibers come
    from an actual encoder.
    """
    x = as_matrix(x, "x")
    w_enc = _check_encoded(w_encoded, "w_encoded")
    if w_enc.shape[2] != snf.r:
        raise ShapeError(f"encoded rank {w_enc.shape[2]} != triple rank {snf.r}")
    x_enc = encode_tiles(x, snf.e_x, snf.t)
    if x_enc.shape[1] != w_enc.shape[0]:
        raise ShapeError(
            f"x tiling {x_enc.shape[:2]} incompatible with weights {w_enc.shape[:2]}"
        )
    return decode_tiles(_slice_products(x_enc, w_enc), snf.d, snf.t)


def stl_fused_step(x_encoded_prev, w_encoded, snf: SnfTriple) -> np.ndarray:
    """One fused layer step in encoded space.

    Applies the composite map (e_x @ d.T) to each fiber of the previous
    layer's encoded output (merging that layer's decode with this layer's
    encode), then the slice-wise products with this layer's encoded
    weights.  Output stays encoded; decode once after the last layer.
    """
    x_prev = _check_encoded(x_encoded_prev, "x_encoded_prev")
    w_enc = _check_encoded(w_encoded, "w_encoded")
    if x_prev.shape[2] != snf.r or w_enc.shape[2] != snf.r:
        raise ShapeError("encoded ranks must equal the triple rank")
    composite = snf.e_x @ snf.d.T
    return _slice_products(x_prev @ composite.T, w_enc)


# --- serialization ---------------------------------------------------------
#
# SnfTriple: one-line JSON header {"t", "r", "version"} followed by the
# three matrix blobs (e_x, e_w, d) back to back.
# Encoded tensors: magic "STLE", u32 version, u64 dims, f64 fibers with the
# fiber axis contiguous.


def triple_to_bytes(snf: SnfTriple) -> bytes:
    header = json.dumps({"t": snf.t, "r": snf.r, "version": TRIPLE_VERSION}) + "\n"
    return (
        header.encode()
        + matrix_to_bytes(snf.e_x)
        + matrix_to_bytes(snf.e_w)
        + matrix_to_bytes(snf.d)
    )


def triple_from_bytes(buf: bytes) -> SnfTriple:
    nl = buf.find(b"\n")
    if nl < 0:
        raise ValueError("triple blob has no header line")
    header = json.loads(buf[:nl].decode())
    if header.get("version") != TRIPLE_VERSION:
        raise ValueError(f"unsupported triple version {header.get('version')}")
    offset = nl + 1
    e_x, offset = matrix_from_bytes(buf, offset)
    e_w, offset = matrix_from_bytes(buf, offset)
    d, offset = matrix_from_bytes(buf, offset)
    return SnfTriple(int(header["t"]), int(header["r"]), e_x, e_w, d)


def save_triple(path, snf: SnfTriple) -> None:
    Path(path).write_bytes(triple_to_bytes(snf))


def load_triple(path) -> SnfTriple:
    return triple_from_bytes(Path(path).read_bytes())


def encoded_to_bytes(enc) -> bytes:
    e = np.ascontiguousarray(_check_encoded(enc), dtype="<f8")
    head = ENCODED_MAGIC + struct.pack("<IQQQ", ENCODED_VERSION, *e.shape)
    return head + e.tobytes()


def encoded_from_bytes(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    head = offset + 4 + 4 + 24
    if len(buf) < head or buf[offset : offset + 4] != ENCODED_MAGIC:
        raise ValueError("not an encoded-tiles blob")
    version, br, bc, r = struct.unpack_from("<IQQQ", buf, offset + 4)
    if version != ENCODED_VERSION:
        raise ValueError(f"unsupported encoded-tiles version {version}")
    end = head + br * bc * r * 8
    if len(buf) < end:
        raise ValueError("truncated encoded-tiles blob")
    data = np.frombuffer(buf[head:end], dtype="<f8").reshape(br, bc, r)
    return np.ascontiguousarray(data), end


def save_encoded(path, enc) -> None:
    Path(path).write_bytes(encoded_to_bytes(enc))


def load_encoded(path) -> np.ndarray:
    enc, _ = encoded_from_bytes(Path(path).read_bytes())
    return enc
