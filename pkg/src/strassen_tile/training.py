"""Training the tile operator on synthetic data, and the fake-encoding theory.

The optimization target is the mean per-entry squared residual against
exact matmul on Gaussian t x t tiles,

    err = ||vec(X W) - d.T (e_x vec(X) * e_w vec(W))||^2 / t^2,

minimized over the triple by minibatch gradient descent with analytic
gradients.  The module also carries the closed-form machinery for
fake-encoded weights: the per-coordinate coefficient vectors (z, z'), the
solution matrix mapping vec(W) to its optimal fake encoding, and the
fake-encoding loss those objects minimize.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
import json

import numpy as np

from .dense_core import (
    ShapeError,
    SingularSystemError,
    SINGULAR_COND_LIMIT,
    as_matrix,
    spawn_rngs,
)
from .snf_operator import SnfTriple
from .strassen_basis import pruned_subset_init, random_gaussian_init, strassen_rank49

INIT_STRASSEN = "strassen_subset"
INIT_RANDOM = "random_gaussian"

DIVERGENCE_FACTOR = 10.0
DIVERGENCE_PATIENCE = 100
DIVERGENCE_FLOOR = 1e-9


class DivergenceError(RuntimeError):
    """Training loss blew past the divergence threshold; carries the curve."""

    def __init__(self, message: str, curve: list[tuple[int, float]]):
        super().__init__(message)
        self.curve = curve


@dataclass
class Class0Config:
    r: int
    t: int = 4
    init: str = INIT_STRASSEN
    seed: int = 0
    steps: int = 12000
    batch: int = 512
    step_size: float = 0.05
    optimizer: str = "momentum"  # or "plain_sgd"
    momentum: float = 0.9
    init_scale: float = 0.1
    n_train_pairs: int = 8192  # population size when fixed_w_population is set
    n_eval_pairs: int = 4096
    fixed_w_population: bool = False
    eval_every: int = 50
    plateau_patience: int = 8  # evals without improvement before halving the step
    min_step_size: float = 1e-4

    def validate(self) -> "Class0Config":
        if self.r < 1 or self.t < 1:
            raise ValueError(f"need r >= 1 and t >= 1, got r={self.r}, t={self.t}")
        if self.init not in (INIT_STRASSEN, INIT_RANDOM):
            raise ValueError(f"unknown init kind {self.init!r}")
        if self.optimizer not in ("plain_sgd", "momentum"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        counts = (self.steps, self.batch, self.n_train_pairs, self.n_eval_pairs, self.eval_every)
        if any(c < 1 for c in counts):
            raise ValueError(f"all counts must be positive: {self}")
        if self.step_size <= 0:
            raise ValueError(f"step_size must be > 0, got {self.step_size}")
        return self


@dataclass
class Class0Result:
    r: int
    init: str
    seed: int
    loss_init: float
    loss_final: float
    loss_curve: list[tuple[int, float]] = field(repr=False)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def _stack_pairs(pairs, t: int) -> tuple[np.ndarray, np.ndarray]:
    xs = np.stack([as_matrix(x, "x") for x, _ in pairs])
    ws = np.stack([as_matrix(w, "w") for _, w in pairs])
    if xs.shape[1:] != (t, t) or ws.shape[1:] != (t, t):
        raise ShapeError(f"pairs must be {t}x{t} tiles, got {xs.shape[1:]} / {ws.shape[1:]}")
    return xs, ws


def _batch_loss(snf: SnfTriple, xs: np.ndarray, ws: np.ndarray) -> float:
    t2 = snf.t * snf.t
    vx = xs.reshape(len(xs), t2)
    vw = ws.reshape(len(ws), t2)
    y = np.matmul(xs, ws).reshape(len(xs), t2)
    u = vx @ snf.e_x.T
    v = vw @ snf.e_w.T
    resid = y - (u * v) @ snf.d
    return float(np.mean(np.sum(resid * resid, axis=1)) / t2)


def class0_loss(snf: SnfTriple, pairs) -> float:
    """Mean over (X, W) pairs of the per-entry squared matmul residual."""
    xs, ws = _stack_pairs(pairs, snf.t)
    return _batch_loss(snf, xs, ws)


def population_class0_loss(snf: SnfTriple) -> float:
    """Exact expected loss over i.i.d. N(0,1) tile pairs, in closed form.

    Independent of any sampling: with G the entrywise product of the three
    factor Gram matrices and C the cross-moment of the prediction against
    vec(XW), the expectation reduces to fourth-moment identities of the
    Gaussian.  Serves as the sampling-free oracle for the Monte Carlo loss.
    """
    t, t2 = snf.t, snf.t * snf.t
    gram = (snf.d @ snf.d.T) * (snf.e_x @ snf.e_x.T) * (snf.e_w @ snf.e_w.T)
    # E <vec(XW), prediction> = sum_p sum_i d[p,i] * sum_l e_x[p, (a,l)] e_w[p, (l,b)]
    cross = 0.0
    for p in range(snf.r):
        ex_p = snf.e_x[p].reshape(t, t)
        ew_p = snf.e_w[p].reshape(t, t)
        cross += float(np.sum(snf.d[p].reshape(t, t) * (ex_p @ ew_p)))
    return (t**3 - 2.0 * cross + float(gram.sum())) / t2


def class0_gradients(
    snf: SnfTriple, pair
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Analytic per-pair gradients of err w.r.t. (e_x, e_w, d).

    With u = e_x vec(X), v = e_w vec(W), e the residual:
      g_d  = -(2/t^2) (u*v) e^T
      g_ex = -(2/t^2) ((d e) * v) vec(X)^T
      g_ew = -(2/t^2) ((d e) * u) vec(W)^T
    """
    x, w = pair
    x = as_matrix(x, "x")
    w = as_matrix(w, "w")
    t, t2 = snf.t, snf.t * snf.t
    if x.shape != (t, t) or w.shape != (t, t):
        raise ShapeError(f"pair must be {t}x{t} tiles")
    vx = x.reshape(t2)
    vw = w.reshape(t2)
    u = snf.e_x @ vx
    v = snf.e_w @ vw
    e = (x @ w).reshape(t2) - snf.d.T @ (u * v)
    scale = -2.0 / t2
    g_d = scale * np.outer(u * v, e)
    de = snf.d @ e
    g_ex = scale * np.outer(de * v, vx)
    g_ew = scale * np.outer(de * u, vw)
    return g_ex, g_ew, g_d


def _batch_gradients(
    snf: SnfTriple, xs: np.ndarray, ws: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    t2 = snf.t * snf.t
    b = len(xs)
    vx = xs.reshape(b, t2)
    vw = ws.reshape(b, t2)
    y = np.matmul(xs, ws).reshape(b, t2)
    u = vx @ snf.e_x.T
    v = vw @ snf.e_w.T
    e = y - (u * v) @ snf.d
    scale = -2.0 / (t2 * b)
    g_d = scale * (u * v).T @ e
    de = e @ snf.d.T
    g_ex = scale * (de * v).T @ vx
    g_ew = scale * (de * u).T @ vw
    return g_ex, g_ew, g_d


def _initial_triple(cfg: Class0Config, rng: np.random.Generator) -> SnfTriple:
    if cfg.init == INIT_STRASSEN:
        if cfg.t != 4:
            raise ValueError("strassen_subset initialization requires t=4")
        return pruned_subset_init(strassen_rank49(), cfg.r, rng)
    return random_gaussian_init(cfg.t, cfg.r, rng, scale=cfg.init_scale)


def train_class0(cfg: Class0Config) -> tuple[Class0Result, SnfTriple]:
    """Minibatch gradient descent on the tile-matmul residual.

    Fresh Gaussian pairs per batch by default (set fixed_w_population to
    resample batches from one fixed draw instead).  Held-out pairs are
    drawn once; the reported final loss is the held-out loss of the best
    checkpoint seen.  Deterministic given the config.
    """
    cfg.validate()
    init_rng, data_rng, eval_rng = spawn_rngs(cfg.seed, 3)
    t = cfg.t
    triple = _initial_triple(cfg, init_rng)

    eval_x = eval_rng.standard_normal((cfg.n_eval_pairs, t, t))
    eval_w = eval_rng.standard_normal((cfg.n_eval_pairs, t, t))
    if cfg.fixed_w_population:
        pool_x = data_rng.standard_normal((cfg.n_train_pairs, t, t))
        pool_w = data_rng.standard_normal((cfg.n_train_pairs, t, t))

    loss_init = _batch_loss(triple, eval_x, eval_w)
    curve: list[tuple[int, float]] = [(0, loss_init)]
    best_loss, best_triple = loss_init, triple.copy()
    diverge_threshold = DIVERGENCE_FACTOR * loss_init + DIVERGENCE_FLOOR
    diverged_streak = 0
    step_size = cfg.step_size
    since_improved = 0
    vel = [np.zeros_like(triple.e_x), np.zeros_like(triple.e_w), np.zeros_like(triple.d)]

    for step in range(1, cfg.steps + 1):
        if cfg.fixed_w_population:
            idx = data_rng.integers(0, cfg.n_train_pairs, size=cfg.batch)
            bx, bw = pool_x[idx], pool_w[idx]
        else:
            bx = data_rng.standard_normal((cfg.batch, t, t))
            bw = data_rng.standard_normal((cfg.batch, t, t))

        with np.errstate(over="ignore", invalid="ignore"):
            grads = _batch_gradients(triple, bx, bw)
            params = [triple.e_x, triple.e_w, triple.d]
            if cfg.optimizer == "momentum":
                for i in range(3):
                    vel[i] = cfg.momentum * vel[i] + grads[i]
                    params[i] -= step_size * vel[i]
            else:
                for i in range(3):
                    params[i] -= step_size * grads[i]

            batch_loss = _batch_loss(triple, bx, bw)
        if not np.isfinite(batch_loss):
            raise DivergenceError(f"non-finite loss at step {step}", curve)
        diverged_streak = diverged_streak + 1 if batch_loss > diverge_threshold else 0
        if diverged_streak >= DIVERGENCE_PATIENCE:
            raise DivergenceError(
                f"loss above {DIVERGENCE_FACTOR}x the initial level for "
                f"{DIVERGENCE_PATIENCE} consecutive steps at step {step}",
                curve,
            )

        if step % cfg.eval_every == 0 or step == cfg.steps:
            eval_loss = _batch_loss(triple, eval_x, eval_w)
            curve.append((step, eval_loss))
            if eval_loss < best_loss:
                best_loss, best_triple = eval_loss, triple.copy()
                since_improved = 0
            else:
                since_improved += 1
                if since_improved >= cfg.plateau_patience and step_size > cfg.min_step_size:
                    step_size = max(step_size * 0.5, cfg.min_step_size)
                    since_improved = 0

    result = Class0Result(
        r=cfg.r,
        init=cfg.init,
        seed=cfg.seed,
        loss_init=loss_init,
        loss_final=best_loss,
        loss_curve=curve,
    )
    return result, best_triple


# --- fake-encoding machinery ------------------------------------------------


def build_zw_vectors(
    x, i: int, e_x, d
) -> tuple[np.ndarray, np.ndarray]:
    """Coefficient vectors of output coordinate i as linear functionals.

    z (length t^2) satisfies z . vec(W) = vec(X W)_i for every W; z'
    (length r) satisfies z' . f = (d.T (e_x vec(X) * f))_i for every
    fake-encoding vector f, explicitly z'_p = d[p, i] * (e_x vec(X))_p.
    """
    x = as_matrix(x, "x")
    e_x = as_matrix(e_x, "e_x")
    d = as_matrix(d, "d")
    t = x.shape[0]
    if x.shape != (t, t) or e_x.shape[1] != t * t or d.shape != e_x.shape:
        raise ShapeError("x must be t x t and e_x, d must be r x t^2")
    if not 0 <= i < t * t:
        raise IndexError(f"coordinate {i} out of range for t^2 = {t * t}")
    a, b = divmod(i, t)
    z = np.zeros(t * t)
    z[b::t] = x[a, :]  # vec(XW)_(a,b) = sum_l X[a,l] W[l,b]
    z_prime = d[:, i] * (e_x @ x.reshape(-1))
    return z, z_prime


def _zw_moments(e_x, d, x_samples) -> tuple[np.ndarray, np.ndarray]:
    """Empirical (E[z'z'^T], E[z'z^T]) over samples and uniform coordinates."""
    e_x = as_matrix(e_x, "e_x")
    d = as_matrix(d, "d")
    xs = np.asarray(x_samples, dtype=np.float64)
    t = int(np.sqrt(e_x.shape[1]))
    if xs.ndim != 3 or xs.shape[1:] != (t, t) or xs.shape[0] < 1:
        raise ShapeError(f"x_samples must be a nonempty stack of {t}x{t} tiles")
    r, t2 = e_x.shape
    a = np.zeros((r, r))
    bmat = np.zeros((r, t2))
    for x in xs:
        u = e_x @ x.reshape(-1)
        for i in range(t2):
            zp = d[:, i] * u
            a += np.outer(zp, zp)
            row, col = divmod(i, t)
            z = np.zeros(t2)
            z[col::t] = x[row, :]
            bmat += np.outer(zp, z)
    count = xs.shape[0] * t2
    return a / count, bmat / count


def solution_matrix(e_x, d, x_samples) -> np.ndarray:
    """The r x t^2 map sending vec(W) to its optimal fake encoding.

    F = E[z' z'^T]^{-1} E[z' z^T] with the expectations empirical over the
    given inputs and uniform over output coordinates.  The same F is
    optimal for every W simultaneously; per-W regressions must agree with
    F @ vec(W).
    """
    a, bmat = _zw_moments(e_x, d, x_samples)
    cond = float(np.linalg.cond(a))
    if not np.isfinite(cond) or cond > SINGULAR_COND_LIMIT:
        raise SingularSystemError(
            f"fake-encoding Gram is numerically singular (cond ~ {cond:.3e}); "
            "more input samples or a better-conditioned (e_x, d) needed",
            cond=cond,
        )
    return np.linalg.solve(a, bmat)


def fake_encoding_loss(e_x, d, fe, w, x_samples) -> float:
    """Empirical mean of the residual using a fixed fake encoding for W."""
    e_x = as_matrix(e_x, "e_x")
    d = as_matrix(d, "d")
    w = as_matrix(w, "w")
    fe = np.asarray(fe, dtype=np.float64).ravel()
    xs = np.asarray(x_samples, dtype=np.float64)
    t = w.shape[0]
    t2 = t * t
    if fe.shape[0] != e_x.shape[0]:
        raise ShapeError(f"fake encoding length {fe.shape[0]} != rank {e_x.shape[0]}")
    if xs.ndim != 3 or xs.shape[1:] != (t, t):
        raise ShapeError(f"x_samples must be a stack of {t}x{t} tiles")
    vx = xs.reshape(len(xs), t2)
    y = np.matmul(xs, w).reshape(len(xs), t2)
    pred = ((vx @ e_x.T) * fe) @ d
    resid = y - pred
    return float(np.mean(np.sum(resid * resid, axis=1)) / t2)


def per_w_fake_encoding_regression(e_x, d, w, x_samples) -> np.ndarray:
    """Direct least-squares fake encoding for one W over the given inputs.

    Builds the stacked regression (one equation per sample and output
    coordinate) and solves it; used as the independent check that the
    optimum is linear in vec(W).
    """
    from .dense_core import least_squares

    e_x = as_matrix(e_x, "e_x")
    d = as_matrix(d, "d")
    w = as_matrix(w, "w")
    xs = np.asarray(x_samples, dtype=np.float64)
    t = w.shape[0]
    t2 = t * t
    rows, targets = [], []
    for x in xs:
        u = e_x @ x.reshape(-1)
        y = (x @ w).reshape(-1)
        for i in range(t2):
            rows.append(d[:, i] * u)
            targets.append(y[i])
    return least_squares(np.array(rows), np.array(targets))
