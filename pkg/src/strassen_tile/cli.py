"""Batch experiment driver.

Subcommands reproduce every desk-scale experiment and write CSVs plus
figures into --out-dir:

  verify    invariant suite (exactness, path equivalence, gradients, lemma)
  class0    train the tile operator over an r-grid, both init families
  alpha24   2:4 pruning error estimate plus its order-statistics oracle
  cost      FLOP/IO model table, worked example, instrumented cross-check
  spectrum  toy-network training and fake-encoding spectrum reports

Every command is deterministic given (config, seed); --jobs > 1 only
parallelizes independent grid points and never changes results.  Exit
codes: 0 success, 1 invariant failure, 2 config error.
"""

from __future__ import annotations

import argparse
import json
import os
import statistics
import sys
from concurrent.futures import ProcessPoolExecutor
from importlib import resources
from pathlib import Path

import numpy as np

from . import reports
from .cost_model import ProblemShape, count_reference_flops, flops_general, speedup_table
from .dense_core import make_rng, matmul, spawn_rngs
from .pruning24 import alpha24_order_statistics_oracle, estimate_alpha24
from .snf_operator import (
    SnfTriple,
    _slice_products,
    decode_tiles,
    encode_tiles,
    load_triple,
    stl_batched,
    stl_fused_step,
    stl_reference,
)
from .strassen_basis import random_gaussian_init, strassen_rank49
from .toy_network import ToyNetConfig, init_toy_network, toy_forward, toy_loss_and_grads, train_toy_network, StlLayer
from .training import Class0Config, class0_gradients, class0_loss, fake_encoding_loss, per_w_fake_encoding_regression, solution_matrix, train_class0

GOLDEN_ENV = "STL_GOLDEN_DIR"
GOLDEN_NAME = "strassen49.snf"


class ConfigError(ValueError):
    pass


def golden_triple_path() -> Path:
    override = os.environ.get(GOLDEN_ENV)
    if override:
        return Path(override) / GOLDEN_NAME
    return Path(resources.files("strassen_tile") / "golden" / GOLDEN_NAME)


# --- verify ------------------------------------------------------------------


def _rel_frobenius(a: np.ndarray, b: np.ndarray) -> float:
    denom = np.linalg.norm(b)
    return float(np.linalg.norm(a - b) / (denom if denom else 1.0))


def _check_strassen49_exactness():
    try:
        triple = load_triple(golden_triple_path())
    except Exception as exc:  # corrupt or missing asset is a check failure
        return False, f"golden asset unreadable: {exc}"
    if (triple.t, triple.r) != (4, 49):
        return False, f"golden asset has (t, r) = {(triple.t, triple.r)}, want (4, 49)"
    rng = make_rng(2024)
    worst = 0.0
    for n in (4, 8, 16):
        for _ in range(40):
            x = rng.standard_normal((n, n))
            w = rng.standard_normal((n, n))
            got = stl_batched(x, encode_tiles(w, triple.e_w, 4), triple)
            worst = max(worst, _rel_frobenius(got, matmul(x, w)))
    ok = worst <= 1e-12
    return ok, f"worst relative Frobenius error {worst:.3e} (limit 1e-12)"


def _check_strassen49_construction():
    constructed = strassen_rank49()
    golden = load_triple(golden_triple_path())
    same = all(
        np.array_equal(getattr(constructed, f), getattr(golden, f))
        for f in ("e_x", "e_w", "d")
    )
    return same, "constructed triple matches the golden asset bit for bit" if same else "constructed triple differs from the golden asset"


def _check_path_equivalence():
    rng = make_rng(7)
    worst_batch, worst_fused = 0.0, 0.0
    for t in (1, 2, 4):
        for blocks in (1, 2, 4):
            n = t * blocks
            for r in (1, max(1, t * t - 1), t * t + 3):
                triple = random_gaussian_init(t, r, rng, scale=0.6)
                x = rng.standard_normal((n, n))
                w1 = rng.standard_normal((n, n))
                w2 = rng.standard_normal((n, n))
                ref = stl_reference(x, w1, triple)
                batched = stl_batched(x, encode_tiles(w1, triple.e_w, t), triple)
                worst_batch = max(worst_batch, _rel_frobenius(batched, ref))
                # two-layer fused chain vs two sequential batched applications
                enc1 = encode_tiles(w1, triple.e_w, t)
                enc2 = encode_tiles(w2, triple.e_w, t)
                step1 = _slice_products(encode_tiles(x, triple.e_x, t), enc1)
                fused = decode_tiles(stl_fused_step(step1, enc2, triple), triple.d, t)
                seq = stl_batched(stl_batched(x, enc1, triple), enc2, triple)
                worst_fused = max(worst_fused, _rel_frobenius(fused, seq))
    ok = worst_batch <= 1e-12 and worst_fused <= 1e-10
    return ok, (
        f"batched vs reference {worst_batch:.3e} (limit 1e-12), "
        f"fused chain vs sequential {worst_fused:.3e} (limit 1e-10)"
    )


def _fd_gradient_worst(snf, pair, h=1e-5) -> float:
    g_analytic = class0_gradients(snf, pair)
    worst = 0.0
    for g, arr in zip(g_analytic, (snf.e_x, snf.e_w, snf.d)):
        scale = max(float(np.abs(g).max()), 1e-12)
        fd = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + h
            up = class0_loss(snf, [pair])
            arr[idx] = old - h
            dn = class0_loss(snf, [pair])
            arr[idx] = old
            fd[idx] = (up - dn) / (2 * h)
        worst = max(worst, float(np.abs(fd - g).max()) / scale)
    return worst


def _check_gradients_class0():
    rng = make_rng(11)
    worst = 0.0
    for _ in range(10):
        snf = random_gaussian_init(4, 18, rng, scale=0.5)
        pair = (rng.standard_normal((4, 4)), rng.standard_normal((4, 4)))
        worst = max(worst, _fd_gradient_worst(snf, pair))
    return worst <= 1e-5, f"worst gradient error {worst:.3e} relative to scale (limit 1e-5)"


def _check_gradients_toy_network():
    rng = make_rng(13)
    cfg = ToyNetConfig(t=4, r=12, dims=(8, 8, 4), batch=8)
    base = random_gaussian_init(4, 12, rng, scale=0.4)
    layers = init_toy_network(cfg, base, rng)
    x = rng.standard_normal((8, 8))
    target = rng.standard_normal((8, 4))
    _, grads = toy_loss_and_grads(layers, x, target)
    h = 1e-5
    worst = 0.0
    for li, layer in enumerate(layers):
        for g, arr in zip(grads[li], (layer.snf.e_x, layer.snf.d, layer.weights)):
            scale = max(float(np.abs(g).max()), 1e-12)
            for idx in np.ndindex(arr.shape):
                old = arr[idx]
                arr[idx] = old + h
                up = toy_loss_and_grads(layers, x, target)[0]
                arr[idx] = old - h
                dn = toy_loss_and_grads(layers, x, target)[0]
                arr[idx] = old
                worst = max(worst, abs((up - dn) / (2 * h) - g[idx]) / scale)
    return worst <= 1e-4, f"worst end-to-end gradient error {worst:.3e} (limit 1e-4)"


def _check_lemma_fake_encoding():
    rng = make_rng(17)
    worst = 0.0
    for _ in range(2):
        triple = random_gaussian_init(4, 20, rng, scale=0.6)
        xs = rng.standard_normal((80, 4, 4))
        f = solution_matrix(triple.e_x, triple.d, xs)
        for _ in range(5):
            w = rng.standard_normal((4, 4))
            direct = per_w_fake_encoding_regression(triple.e_x, triple.d, w, xs)
            worst = max(worst, float(np.abs(direct - f @ w.reshape(-1)).max()))
    s49 = load_triple(golden_triple_path())
    xs = rng.standard_normal((120, 4, 4))
    f = solution_matrix(s49.e_x, s49.d, xs)
    resid = max(
        fake_encoding_loss(s49.e_x, s49.d, f @ w.reshape(-1), w, xs)
        for w in rng.standard_normal((5, 4, 4))
    )
    ok = worst <= 1e-8 and resid <= 1e-8
    return ok, (
        f"per-W regression vs solution matrix {worst:.3e} (limit 1e-8), "
        f"exact-triple fake-encoding residual {resid:.3e} (limit 1e-8)"
    )


def _check_scalar_degeneration():
    unit = SnfTriple(1, 1, np.ones((1, 1)), np.ones((1, 1)), np.ones((1, 1)))
    rng = make_rng(19)
    x = rng.standard_normal((6, 5))
    w = rng.standard_normal((5, 7))
    same = np.array_equal(stl_reference(x, w, unit), matmul(x, w))
    return same, "t=1, r=1 unit triple reproduces matmul bitwise" if same else "bitwise mismatch"


VERIFY_CHECKS = [
    ("strassen49-exactness", _check_strassen49_exactness),
    ("strassen49-construction", _check_strassen49_construction),
    ("path-equivalence", _check_path_equivalence),
    ("gradients-class0", _check_gradients_class0),
    ("gradients-toy-network", _check_gradients_toy_network),
    ("lemma-fake-encoding", _check_lemma_fake_encoding),
    ("scalar-degeneration", _check_scalar_degeneration),
]


def cmd_verify(cfg: dict, out_dir: Path) -> int:
    selected = [
        (name, fn) for name, fn in VERIFY_CHECKS if cfg["filter"] in name
    ]
    if not selected:
        raise ConfigError(f"--filter={cfg['filter']!r} matches no checks")
    results = []
    for name, fn in selected:
        try:
            passed, detail = fn()
        except Exception as exc:
            passed, detail = False, f"raised {type(exc).__name__}: {exc}"
        results.append({"name": name, "passed": bool(passed), "detail": detail})
        print(f"[{'PASS' if passed else 'FAIL'}] {name}: {detail}")
    all_passed = all(r["passed"] for r in results)
    out_dir.mkdir(parents=True, exist_ok=True)
    summary = {"all_passed": all_passed, "filter": cfg["filter"], "checks": results}
    (out_dir / "verify.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"{'all checks passed' if all_passed else 'FAILURES present'} "
          f"({sum(r['passed'] for r in results)}/{len(results)})")
    return 0 if all_passed else 1


# --- class0 ------------------------------------------------------------------


def _class0_single(args) -> dict:
    r, init, seed, budget = args
    cfg = Class0Config(r=r, init=init, seed=seed, **budget)
    result, _ = train_class0(cfg)
    return {
        "r": r,
        "init": init,
        "seed": seed,
        "loss_init": result.loss_init,
        "loss_final": result.loss_final,
        "curve": result.loss_curve,
    }


def cmd_class0(cfg: dict, out_dir: Path, jobs: int) -> int:
    out_dir.mkdir(parents=True, exist_ok=True)
    budget = {
        "steps": cfg["steps"],
        "batch": cfg["batch"],
        "step_size": cfg["step_size"],
        "optimizer": cfg["optimizer"],
        "init_scale": cfg["init_scale"],
    }
    tasks = [
        (r, init, seed, budget)
        for r in cfg["r_grid"]
        for init in ("strassen_subset", "random_gaussian")
        for seed in cfg["seeds"]
    ]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            runs = list(pool.map(_class0_single, tasks))
    else:
        runs = [_class0_single(t) for t in tasks]
    runs.sort(key=lambda rec: (rec["r"], rec["init"], rec["seed"]))

    rows = [
        (rec["r"], rec["init"], rec["seed"], rec["loss_init"], rec["loss_final"])
        for rec in runs
    ]
    reports.write_csv(out_dir / "class0_results.csv",
                      ["r", "init", "seed", "loss_init", "loss_final"], rows, cfg)
    curve_rows = [
        (rec["r"], rec["init"], rec["seed"], step, loss)
        for rec in runs
        for step, loss in rec["curve"]
    ]
    reports.write_csv(out_dir / "class0_loss_curves.csv",
                      ["r", "init", "seed", "step", "loss"], curve_rows, cfg)

    ref, _ = estimate_alpha24(cfg["alpha_n_w"], cfg["alpha_n_x"], cfg["seeds"][0])
    reports.write_csv(out_dir / "alpha24_reference.csv",
                      ["seed", "n_w", "n_x", "alpha", "stderr"],
                      [(ref.seed, ref.n_w_samples, ref.n_x_samples, ref.alpha, ref.stderr)],
                      cfg)
    reports.class0_figure(out_dir / "class0_alpha_vs_r.png", rows, ref.alpha)
    by_r49 = [rec for rec in runs if rec["r"] == 49 and rec["init"] == "strassen_subset"]
    if by_r49:
        print(f"r=49 strassen-subset final loss: {max(rec['loss_final'] for rec in by_r49):.3e}")
    print(f"wrote {len(rows)} runs to {out_dir / 'class0_results.csv'}")
    return 0


# --- alpha24 -----------------------------------------------------------------


def cmd_alpha24(cfg: dict, out_dir: Path) -> int:
    out_dir.mkdir(parents=True, exist_ok=True)
    estimate, per_w = estimate_alpha24(cfg["n_w"], cfg["n_x"], cfg["seed"])
    oracle, oracle_err = alpha24_order_statistics_oracle(cfg["oracle_draws"], cfg["seed"] + 1)
    reports.write_csv(out_dir / "alpha24.csv",
                      ["seed", "n_w", "n_x", "alpha", "stderr"],
                      [(estimate.seed, estimate.n_w_samples, estimate.n_x_samples,
                        estimate.alpha, estimate.stderr)], cfg)
    reports.write_csv(out_dir / "alpha24_oracle.csv",
                      ["seed", "n_draws", "alpha_oracle", "stderr"],
                      [(cfg["seed"] + 1, cfg["oracle_draws"], oracle, oracle_err)], cfg)
    reports.alpha24_figure(out_dir / "alpha24_hist.png", per_w, estimate.alpha, oracle)
    print(f"alpha_2:4 estimate {estimate.alpha:.4f} +- {estimate.stderr:.4f}, "
          f"order-statistics oracle {oracle:.4f} (|diff| {abs(estimate.alpha - oracle):.4f})")
    return 0


# --- cost --------------------------------------------------------------------


def cmd_cost(cfg: dict, out_dir: Path) -> int:
    out_dir.mkdir(parents=True, exist_ok=True)
    table = speedup_table(cfg["n_list"], cfg["r_list"], cfg["t"], cfg["bytes_per_scalar"])
    rows = [
        (rep.n, rep.t, rep.r, rep.flops_stl, rep.flops_naive,
         rep.io_stl_bytes, rep.io_naive_bytes, rep.speedup_flops)
        for rep in table
    ]
    reports.write_csv(out_dir / "cost_table.csv",
                      ["n", "t", "r", "flops_stl", "flops_naive", "io_stl", "io_naive",
                       "speedup_flops"], rows, cfg)

    # headline configuration with its expected reference values
    from .cost_model import cost_report

    head = cost_report(8192, 4, 32, 2)
    x_bytes = 2 * 8192 * 8192
    reports.write_csv(
        out_dir / "cost_worked_example.csv",
        ["n", "t", "r", "flops_stl", "flops_stl_ref", "flops_naive", "flops_naive_ref",
         "io_stl_over_x", "io_stl_over_x_ref", "io_naive_over_x", "x_bytes"],
        [(head.n, head.t, head.r,
          head.flops_stl, 5583 * 10**8,
          head.flops_naive, 10995 * 10**8,
          head.io_stl_bytes / x_bytes, 12.0,
          head.io_naive_bytes / x_bytes, x_bytes)],
        cfg,
    )

    mismatches = []
    for t in (1, 2, 4):
        for n in (t, 4 * t, 8 * t):
            for r in (1, t * t, 2 * t * t):
                shape = ProblemShape(n, n, n, t, r)
                if flops_general(shape) != count_reference_flops(shape):
                    mismatches.append((n, t, r))
    if mismatches:
        print(f"instrumented FLOP counter disagrees with the formula at {mismatches}")
        return 1
    reports.cost_figure(out_dir / "cost_speedup.png", table)
    print(f"wrote {len(rows)} table rows; instrumented counter matches the closed form "
          f"on the small-shape grid")
    return 0


# --- spectrum ----------------------------------------------------------------


def cmd_spectrum(cfg: dict, out_dir: Path) -> int:
    out_dir.mkdir(parents=True, exist_ok=True)
    dims = tuple(cfg["dims"])
    ranks_rows = []
    spectrum_rows = []
    last_result = None
    for seed in cfg["seeds"]:
        net_cfg = ToyNetConfig(
            t=cfg["t"], r=cfg["r"], dims=dims, seed=seed, steps=cfg["steps"],
            batch=cfg["batch"], step_size=cfg["step_size"], tau=cfg["tau"],
        )
        result = train_toy_network(net_cfg)
        last_result = result
        for rep_init, rep in zip(result.reports_init, result.reports):
            ranks_rows.append(
                (seed, rep.layer, rep_init.numerical_rank, rep.numerical_rank, cfg["tau"])
            )
            if seed == cfg["seeds"][0]:
                s = rep.singular_values
                ref = rep.reference_singular_values
                for idx in range(s.size):
                    spectrum_rows.append(
                        (rep.layer, idx, s[idx], s[idx] / s[0], ref[idx])
                    )
    reports.write_csv(out_dir / "spectrum.csv",
                      ["layer", "index", "sigma", "sigma_over_sigma1", "reference_sigma"],
                      spectrum_rows, cfg)
    reports.write_csv(out_dir / "spectrum_ranks.csv",
                      ["seed", "layer", "rank_init", "rank_final", "tau"],
                      ranks_rows, cfg)

    series = []
    for rep in last_result.reports:
        series.append((f"layer {rep.layer} trained", rep.singular_values / rep.singular_values[0]))
        series.append((f"layer {rep.layer} gaussian ref",
                       rep.reference_singular_values / rep.reference_singular_values[0]))
    for rep in last_result.reports_init:
        series.append((f"layer {rep.layer} init", rep.singular_values / rep.singular_values[0]))
    reports.svg_polyline_plot(out_dir / "spectrum.svg", series,
                              title="stacked fake-encoding spectra (log scale)")
    reports.spectrum_figure(out_dir / "spectrum.png", last_result.reports,
                            last_result.reports_init)

    init_ranks = [row[2] for row in ranks_rows]
    final_ranks = [row[3] for row in ranks_rows]
    print(f"init ranks {sorted(set(init_ranks))}, median final rank "
          f"{statistics.median(final_ranks):.0f} at tau={cfg['tau']}")
    return 0


# --- argument plumbing --------------------------------------------------------


def _int_list(text: str) -> list[int]:
    try:
        return [int(tok) for tok in text.split(",") if tok.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated ints, got {text!r}") from exc


def _command_defaults(command: str, seed: int) -> dict:
    if command == "verify":
        return {"filter": ""}
    if command == "class0":
        return {
            "r_grid": list(range(16, 50)),
            "seeds": [seed, seed + 1, seed + 2],
            "steps": 3000,
            "batch": 256,
            "step_size": 0.05,
            "optimizer": "momentum",
            "init_scale": 0.1,
            "alpha_n_w": 3000,
            "alpha_n_x": 2000,
        }
    if command == "alpha24":
        return {"n_w": 3000, "n_x": 2000, "seed": seed, "oracle_draws": 1_000_000}
    if command == "cost":
        return {
            "n_list": [4096, 8192, 16384],
            "r_list": [16, 20, 24, 28, 32, 36, 40, 44, 48, 49],
            "t": 4,
            "bytes_per_scalar": 2,
        }
    if command == "spectrum":
        return {
            "t": 4,
            "r": 24,
            "dims": [64, 64, 16],
            "seeds": [seed + i for i in range(5)],
            "steps": 4000,
            "batch": 64,
            "step_size": 0.02,
            "tau": 1e-3,
        }
    raise ConfigError(f"unknown command {command!r}")


def _load_config_file(path: str | None, defaults: dict) -> dict:
    cfg = dict(defaults)
    if path:
        try:
            loaded = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError("config file must hold a JSON object")
        unknown = sorted(set(loaded) - set(defaults))
        if unknown:
            raise ConfigError(f"unknown config keys {unknown}; valid: {sorted(defaults)}")
        cfg.update(loaded)
    return cfg


def _apply_flag_overrides(cfg: dict, args: argparse.Namespace) -> dict:
    for key in cfg:
        if hasattr(args, key) and getattr(args, key) is not None:
            cfg[key] = getattr(args, key)
    return cfg


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS,
                        help="root seed (default 0)")
    common.add_argument("--out-dir", type=Path, default=argparse.SUPPRESS)
    common.add_argument("--jobs", type=int, default=argparse.SUPPRESS,
                        help="parallel workers over grid points (1 = deterministic golden mode)")
    common.add_argument("--config", type=str, default=argparse.SUPPRESS,
                        help="JSON file whose keys mirror the command's flags")

    parser = argparse.ArgumentParser(
        prog="strassen-tile",
        description="Experiments for the tile-wise bilinear matmul substitute",
        parents=[common],
    )
    parser.set_defaults(seed=0, out_dir=Path("stl-results"), jobs=1, config=None)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("verify", help="run the invariant suite", parents=[common])
    p.add_argument("--filter", type=str, default=None, help="substring to select checks")

    p = sub.add_parser("class0", help="train on synthetic tiles over an r-grid",
                       parents=[common])
    p.add_argument("--r-grid", dest="r_grid", type=_int_list, default=None)
    p.add_argument("--seeds", type=_int_list, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--step-size", dest="step_size", type=float, default=None)
    p.add_argument("--optimizer", choices=["plain_sgd", "momentum"], default=None)
    p.add_argument("--init-scale", dest="init_scale", type=float, default=None)
    p.add_argument("--alpha-n-w", dest="alpha_n_w", type=int, default=None)
    p.add_argument("--alpha-n-x", dest="alpha_n_x", type=int, default=None)

    p = sub.add_parser("alpha24", parents=[common], help="estimate the 2:4 pruning error")
    p.add_argument("--n-w", dest="n_w", type=int, default=None)
    p.add_argument("--n-x", dest="n_x", type=int, default=None)
    p.add_argument("--oracle-draws", dest="oracle_draws", type=int, default=None)

    p = sub.add_parser("cost", parents=[common], help="emit the FLOP/IO model tables")
    p.add_argument("--n-list", dest="n_list", type=_int_list, default=None)
    p.add_argument("--r-list", dest="r_list", type=_int_list, default=None)
    p.add_argument("--t", type=int, default=None)
    p.add_argument("--bytes-per-scalar", dest="bytes_per_scalar", type=int, default=None)

    p = sub.add_parser("spectrum", parents=[common], help="train the toy network, report spectra")
    p.add_argument("--t", type=int, default=None)
    p.add_argument("--r", type=int, default=None)
    p.add_argument("--dims", type=_int_list, default=None)
    p.add_argument("--seeds", type=_int_list, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--step-size", dest="step_size", type=float, default=None)
    p.add_argument("--tau", type=float, default=None)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        defaults = _command_defaults(args.command, args.seed)
        cfg = _apply_flag_overrides(_load_config_file(args.config, defaults), args)
        out_dir = Path(args.out_dir)
        if args.command == "verify":
            return cmd_verify(cfg, out_dir)
        if args.command == "class0":
            return cmd_class0(cfg, out_dir, max(1, args.jobs))
        if args.command == "alpha24":
            return cmd_alpha24(cfg, out_dir)
        if args.command == "cost":
            return cmd_cost(cfg, out_dir)
        if args.command == "spectrum":
            return cmd_spectrum(cfg, out_dir)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


def entrypoint() -> None:
    sys.exit(main())
