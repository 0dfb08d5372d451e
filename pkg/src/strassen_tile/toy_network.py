"""Small MLP whose linear layers are tile operators with fake-encoded weights.

Layers store their weights directly as r-vectors per tile (one fiber per
(input tile, output tile) pair) and are trained jointly with each layer's
input encoder and decoder on a teacher-student regression task.  The
object of interest is the spectrum of the matrix whose columns are all
fake-encoding fibers of a layer: at initialization the fibers lie in the
(at most t^2)-dimensional image of a weight encoder, and training is
expected to push them out of that subspace.

Activations tile along the batch axis: a tile packs t consecutive samples
by t consecutive features, so the batch size must be divisible by t.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dense_core import ShapeError, as_matrix, make_rng, singular_values, spawn_rngs, tile_fibers, untile_fibers
from .snf_operator import (
    SnfTriple,
    _slice_products,
    encode_tiles,
    encoded_from_bytes,
    encoded_to_bytes,
    triple_from_bytes,
    triple_to_bytes,
)
from .training import (
    Class0Config,
    DivergenceError,
    DIVERGENCE_FACTOR,
    DIVERGENCE_FLOOR,
    DIVERGENCE_PATIENCE,
    train_class0,
)

DEFAULT_TAU = 1e-3


@dataclass
class StlLayer:
    """One tile-operator layer: trainable (e_x, d) plus fake-encoded weights.

    weights[K, M, :] is the r-vector standing in for the (K, M) weight
    tile; it is not constrained to be e_w applied to anything, e_w is
    kept only as the generator of the initial encodings.
    """

    snf: SnfTriple
    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 3 or w.shape[2] != self.snf.r:
            raise ShapeError(
                f"weights must be (in_tiles, out_tiles, {self.snf.r}), got {w.shape}"
            )
        self.weights = w

    @property
    def in_dim(self) -> int:
        return self.weights.shape[0] * self.snf.t

    @property
    def out_dim(self) -> int:
        return self.weights.shape[1] * self.snf.t


def stl_layer_forward(layer: StlLayer, x) -> np.ndarray:
    """Batched layer application; rows of x are samples."""
    x = as_matrix(x, "x")
    t = layer.snf.t
    if x.shape[0] % t:
        raise ShapeError(f"batch {x.shape[0]} not divisible by tile size {t}")
    if x.shape[1] != layer.in_dim:
        raise ShapeError(f"input width {x.shape[1]} != layer in_dim {layer.in_dim}")
    x_enc = encode_tiles(x, layer.snf.e_x, t)
    return untile_fibers(_slice_products(x_enc, layer.weights) @ layer.snf.d, t)


def _layer_forward_cached(layer: StlLayer, x: np.ndarray):
    t = layer.snf.t
    vx = tile_fibers(x, t)
    u = vx @ layer.snf.e_x.T
    y_enc = _slice_products(u, layer.weights)
    y = untile_fibers(y_enc @ layer.snf.d, t)
    return y, (vx, u, y_enc)


def _layer_backward(layer: StlLayer, cache, gy: np.ndarray):
    """Gradients (g_ex, g_d, g_weights, g_x) for one layer."""
    t = layer.snf.t
    vx, u, y_enc = cache
    gvy = tile_fibers(gy, t)
    g_d = np.einsum("ijp,ijc->pc", y_enc, gvy)
    g_enc = gvy @ layer.snf.d.T
    g_w = np.einsum("ikp,ijp->kjp", u, g_enc)
    g_u = np.einsum("kjp,ijp->ikp", layer.weights, g_enc)
    g_ex = np.einsum("ikp,ikc->pc", g_u, vx)
    g_x = untile_fibers(g_u @ layer.snf.e_x, t)
    return g_ex, g_d, g_w, g_x


def toy_forward(layers: list[StlLayer], x) -> np.ndarray:
    """Full student forward: tanh between layers, linear output."""
    h = as_matrix(x, "x")
    for i, layer in enumerate(layers):
        h = stl_layer_forward(layer, h)
        if i + 1 < len(layers):
            h = np.tanh(h)
    return h


def toy_loss_and_grads(layers: list[StlLayer], x, target):
    """Mean squared error per output entry and gradients for every parameter.

    Returns (loss, grads) with grads a list of (g_ex, g_d, g_weights) per
    layer, chain-ruled through the tanh activations.
    """
    x = as_matrix(x, "x")
    target = as_matrix(target, "target")
    acts, caches, pre = [x], [], []
    h = x
    for i, layer in enumerate(layers):
        y, cache = _layer_forward_cached(layer, h)
        caches.append(cache)
        pre.append(y)
        h = np.tanh(y) if i + 1 < len(layers) else y
        acts.append(h)
    resid = acts[-1] - target
    loss = float(np.mean(resid * resid))
    g = (2.0 / resid.size) * resid
    grads: list[tuple[np.ndarray, np.ndarray, np.ndarray]] = [None] * len(layers)
    for i in reversed(range(len(layers))):
        if i + 1 < len(layers):
            g = g * (1.0 - np.tanh(pre[i]) ** 2)
        g_ex, g_d, g_w, g = _layer_backward(layers[i], caches[i], g)
        grads[i] = (g_ex, g_d, g_w)
    return loss, grads


@dataclass(frozen=True)
class SpectrumReport:
    """Singular values of the stacked fake-encoding fibers of one layer."""

    layer: int
    singular_values: np.ndarray
    reference_singular_values: np.ndarray
    tau: float

    @property
    def numerical_rank(self) -> int:
        s = self.singular_values
        if s.size == 0 or s[0] <= 0:
            return 0
        return int(np.count_nonzero(s / s[0] >= self.tau))


def stacked_fibers(layer: StlLayer) -> np.ndarray:
    """r x (num_tiles) matrix whose columns are the layer's weight fibers."""
    k, m, r = layer.weights.shape
    return layer.weights.reshape(k * m, r).T.copy()


def spectrum_report(
    layer: StlLayer,
    tau: float = DEFAULT_TAU,
    rng: np.random.Generator | None = None,
    layer_index: int = 0,
) -> SpectrumReport:
    """Spectrum of the stacked fibers plus a same-shape Gaussian reference."""
    stacked = stacked_fibers(layer)
    rng = rng if rng is not None else make_rng(0)
    reference = singular_values(rng.standard_normal(stacked.shape))
    return SpectrumReport(
        layer=layer_index,
        singular_values=singular_values(stacked),
        reference_singular_values=reference,
        tau=tau,
    )


@dataclass
class ToyNetConfig:
    t: int = 4
    r: int = 24
    dims: tuple[int, ...] = (64, 64, 16)
    seed: int = 0
    steps: int = 4000
    batch: int = 64
    step_size: float = 0.02
    momentum: float = 0.9
    decay_every: int = 2500  # halve the step size this often; 0 disables
    min_step_size: float = 1e-4
    tau: float = DEFAULT_TAU
    teacher_scale: float = 1.0
    encoder_steps: int = 2000  # budget of the weight-encoder training run

    def validate(self) -> "ToyNetConfig":
        if len(self.dims) < 2:
            raise ValueError("dims needs at least input and output widths")
        if any(d % self.t for d in self.dims):
            raise ValueError(f"layer widths {self.dims} must be divisible by t={self.t}")
        if self.batch % self.t:
            raise ValueError(f"batch {self.batch} must be divisible by t={self.t}")
        if any(v < 1 for v in (self.steps, self.batch, self.r)) or self.step_size <= 0:
            raise ValueError(f"invalid training budget in {self}")
        return self


@dataclass
class ToyNetResult:
    model: list[StlLayer]
    reports: list[SpectrumReport]
    reports_init: list[SpectrumReport]
    loss_curve: list[tuple[int, float]] = field(repr=False)
    final_loss: float = 0.0


def _teacher(dims, scale, rng) -> list[np.ndarray]:
    return [
        scale / np.sqrt(dims[i]) * rng.standard_normal((dims[i], dims[i + 1]))
        for i in range(len(dims) - 1)
    ]


def teacher_forward(weights: list[np.ndarray], x: np.ndarray) -> np.ndarray:
    h = x
    for i, w in enumerate(weights):
        h = h @ w
        if i + 1 < len(weights):
            h = np.tanh(h)
    return h


def init_toy_network(cfg: ToyNetConfig, base: SnfTriple, rng) -> list[StlLayer]:
    """Fresh layers from a base triple: fake encodings of Gaussian weights.

    Every fiber starts as e_w applied to a random Gaussian tile, scaled
    like 1/sqrt(fan_in), so all initial fibers lie in the image of e_w.
    """
    cfg.validate()
    layers = []
    for i in range(len(cfg.dims) - 1):
        w0 = rng.standard_normal((cfg.dims[i], cfg.dims[i + 1])) / np.sqrt(cfg.dims[i])
        layers.append(StlLayer(base.copy(), encode_tiles(w0, base.e_w, cfg.t)))
    return layers


def class0_base_triple(cfg: ToyNetConfig, seed: int) -> SnfTriple:
    """Weight-space triple from a quick synthetic-tile training run."""
    _, triple = train_class0(
        Class0Config(r=cfg.r, t=cfg.t, seed=seed, steps=cfg.encoder_steps, batch=256)
    )
    return triple


def train_toy_network(
    cfg: ToyNetConfig,
    base_triple: SnfTriple | None = None,
    teacher=None,
    initial_layers: list[StlLayer] | None = None,
) -> ToyNetResult:
    """Teacher-student regression with heavy-ball gradient descent.

    The teacher is a fixed random dense MLP of the same widths unless one
    is supplied (either a list of dense weight matrices or any callable
    mapping a batch to targets).  The base triple (trained on synthetic
    tiles) provides the initial encoders/decoders and the weight encoder
    used to build the initial fake encodings; pass one explicitly to skip
    that inner run, or pass initial_layers to start from given parameters.
    """
    cfg.validate()
    init_rng, data_rng, teacher_rng, _ = spawn_rngs(cfg.seed, 4)
    if initial_layers is not None:
        layers = [StlLayer(l.snf.copy(), l.weights.copy()) for l in initial_layers]
    else:
        if base_triple is None:
            base_triple = class0_base_triple(cfg, cfg.seed)
        if base_triple.t != cfg.t or base_triple.r != cfg.r:
            raise ShapeError("base triple (t, r) must match the network config")
        layers = init_toy_network(cfg, base_triple, init_rng)
    if teacher is None:
        teacher = _teacher(cfg.dims, cfg.teacher_scale, teacher_rng)
    teacher_fn = teacher if callable(teacher) else (lambda x: teacher_forward(teacher, x))

    reports_init = [
        spectrum_report(layer, cfg.tau, spawn_rngs(cfg.seed + 1, len(layers))[i], i)
        for i, layer in enumerate(layers)
    ]

    vel = [
        [np.zeros_like(l.snf.e_x), np.zeros_like(l.snf.d), np.zeros_like(l.weights)]
        for l in layers
    ]
    curve: list[tuple[int, float]] = []
    tail_losses: list[float] = []
    loss_init = None
    diverged_streak = 0
    step_size = cfg.step_size
    for step in range(1, cfg.steps + 1):
        x = data_rng.standard_normal((cfg.batch, cfg.dims[0]))
        target = teacher_fn(x)
        with np.errstate(over="ignore", invalid="ignore"):
            loss, grads = toy_loss_and_grads(layers, x, target)
        if loss_init is None:
            loss_init = loss
        if not np.isfinite(loss):
            raise DivergenceError(f"non-finite toy-network loss at step {step}", curve)
        threshold = DIVERGENCE_FACTOR * loss_init + DIVERGENCE_FLOOR
        diverged_streak = diverged_streak + 1 if loss > threshold else 0
        if diverged_streak >= DIVERGENCE_PATIENCE:
            raise DivergenceError(
                f"toy-network loss above {DIVERGENCE_FACTOR}x its initial level for "
                f"{DIVERGENCE_PATIENCE} consecutive steps at step {step}",
                curve,
            )
        with np.errstate(over="ignore", invalid="ignore"):
            for layer, v, (g_ex, g_d, g_w) in zip(layers, vel, grads):
                for slot, param, grad in ((0, layer.snf.e_x, g_ex), (1, layer.snf.d, g_d), (2, layer.weights, g_w)):
                    v[slot] = cfg.momentum * v[slot] + grad
                    param -= step_size * v[slot]
        if cfg.decay_every and step % cfg.decay_every == 0:
            step_size = max(step_size * 0.5, cfg.min_step_size)
        if step % 50 == 0 or step == cfg.steps:
            curve.append((step, loss))
        if step > cfg.steps - 50:
            tail_losses.append(loss)

    reports = [
        spectrum_report(layer, cfg.tau, spawn_rngs(cfg.seed + 1, len(layers))[i], i)
        for i, layer in enumerate(layers)
    ]
    return ToyNetResult(
        model=layers,
        reports=reports,
        reports_init=reports_init,
        loss_curve=curve,
        final_loss=float(np.mean(tail_losses)) if tail_losses else float("nan"),
    )


MODEL_VERSION = 1


def save_model(path, layers: list[StlLayer]) -> None:
    """Checkpoint: JSON header with segment sizes, then per-layer blobs."""
    segments = []
    payload = b""
    for layer in layers:
        tb = triple_to_bytes(layer.snf)
        eb = encoded_to_bytes(layer.weights)
        segments.append([len(tb), len(eb)])
        payload += tb + eb
    header = json.dumps({"version": MODEL_VERSION, "segments": segments}) + "\n"
    Path(path).write_bytes(header.encode() + payload)


def load_model(path) -> list[StlLayer]:
    buf = Path(path).read_bytes()
    nl = buf.find(b"\n")
    if nl < 0:
        raise ValueError("model checkpoint has no header line")
    header = json.loads(buf[:nl].decode())
    if header.get("version") != MODEL_VERSION:
        raise ValueError(f"unsupported model checkpoint version {header.get('version')}")
    layers = []
    offset = nl + 1
    for t_len, e_len in header["segments"]:
        snf = triple_from_bytes(buf[offset : offset + t_len])
        offset += t_len
        weights, _ = encoded_from_bytes(buf[offset : offset + e_len])
        offset += e_len
        layers.append(StlLayer(snf, weights))
    return layers
