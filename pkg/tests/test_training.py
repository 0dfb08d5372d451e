import json

import numpy as np
import pytest

from strassen_tile.dense_core import SingularSystemError, make_rng
from strassen_tile.snf_operator import SnfTriple
from strassen_tile.strassen_basis import random_gaussian_init, strassen_rank49
from strassen_tile.training import (
    Class0Config,
    DivergenceError,
    build_zw_vectors,
    class0_gradients,
    class0_loss,
    fake_encoding_loss,
    per_w_fake_encoding_regression,
    population_class0_loss,
    solution_matrix,
    train_class0,
)


@pytest.fixture(scope="module")
def s49():
    return strassen_rank49()


def zero_triple(r=8):
    z = np.zeros((r, 16))
    return SnfTriple(4, r, z.copy(), z.copy(), z.copy())


def fd_worst_error(snf, pair, h=1e-5):
    """Max |central difference - analytic| relative to each gradient's scale."""
    grads = class0_gradients(snf, pair)
    worst = 0.0
    for g, arr in zip(grads, (snf.e_x, snf.e_w, snf.d)):
        scale = max(float(np.abs(g).max()), 1e-12)
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + h
            up = class0_loss(snf, [pair])
            arr[idx] = old - h
            dn = class0_loss(snf, [pair])
            arr[idx] = old
            worst = max(worst, abs((up - dn) / (2 * h) - g[idx]) / scale)
    return worst


class TestClass0Loss:
    def test_exact_triple_is_zero(self, s49):
        rng = make_rng(0)
        pairs = [(rng.standard_normal((4, 4)), rng.standard_normal((4, 4))) for _ in range(20)]
        assert class0_loss(s49, pairs) <= 1e-20

    def test_zero_triple_level(self):
        rng = make_rng(1)
        xs = rng.standard_normal((100_000, 4, 4))
        ws = rng.standard_normal((100_000, 4, 4))
        loss = class0_loss(zero_triple(), list(zip(xs, ws)))
        assert abs(loss - 4.0) <= 0.05

    def test_single_identity_pair(self):
        loss = class0_loss(zero_triple(), [(np.eye(4), np.eye(4))])
        assert loss == 0.25  # ||vec(I)||^2 / 16 exactly

    def test_population_formula_matches_monte_carlo(self):
        snf = random_gaussian_init(4, 12, make_rng(2), scale=0.5)
        rng = make_rng(3)
        xs = rng.standard_normal((150_000, 4, 4))
        ws = rng.standard_normal((150_000, 4, 4))
        mc = class0_loss(snf, list(zip(xs, ws)))
        pop = population_class0_loss(snf)
        assert abs(mc - pop) <= 0.05 * max(pop, 1.0)

    def test_population_formula_at_anchors(self, s49):
        assert population_class0_loss(s49) <= 1e-20
        assert population_class0_loss(zero_triple()) == 4.0


class TestGradients:
    def test_zero_at_exact_triple(self, s49):
        rng = make_rng(4)
        pair = (rng.standard_normal((4, 4)), rng.standard_normal((4, 4)))
        for g in class0_gradients(s49, pair):
            assert np.abs(g).max() <= 1e-12

    def test_finite_difference_agreement(self):
        rng = make_rng(5)
        worst = 0.0
        for _ in range(20):
            snf = random_gaussian_init(4, 14, rng, scale=0.5)
            pair = (rng.standard_normal((4, 4)), rng.standard_normal((4, 4)))
            worst = max(worst, fd_worst_error(snf, pair))
        assert worst <= 1e-5

    def test_gradient_linear_in_residual(self):
        # with w doubled and the decoder halved the prediction is unchanged,
        # so the decoder gradient must equal the analytic outer-product form
        # rebuilt from the doubled Hadamard vector and the new residual
        rng = make_rng(6)
        snf = random_gaussian_init(4, 10, rng, scale=0.6)
        x = rng.standard_normal((4, 4))
        w = rng.standard_normal((4, 4))
        u = snf.e_x @ x.reshape(-1)
        v = snf.e_w @ w.reshape(-1)
        pred = snf.d.T @ (u * v)
        doubled = SnfTriple(4, 10, snf.e_x.copy(), snf.e_w.copy(), snf.d / 2.0)
        _, _, g_d = class0_gradients(doubled, (x, 2.0 * w))
        residual = (x @ (2.0 * w)).reshape(-1) - pred
        expected = -(2.0 / 16.0) * np.outer(2.0 * (u * v), residual)
        assert np.allclose(g_d, expected, atol=1e-12)


class TestTrainClass0:
    def test_exact_rank_stays_at_zero(self):
        cfg = Class0Config(r=49, init="strassen_subset", seed=0, steps=300)
        result, triple = train_class0(cfg)
        assert result.loss_init <= 1e-20
        assert result.loss_final <= 1e-20
        assert triple.r == 49

    def test_loss_decreases(self):
        cfg = Class0Config(r=32, seed=1, steps=800)
        result, _ = train_class0(cfg)
        assert result.loss_final < result.loss_init
        assert result.loss_curve[0] == (0, result.loss_init)
        assert result.loss_curve[-1][0] == 800

    def test_seed_determinism_bytes(self):
        cfg = Class0Config(r=20, seed=3, steps=200)
        a, _ = train_class0(cfg)
        b, _ = train_class0(Class0Config(r=20, seed=3, steps=200))
        assert a.to_json() == b.to_json()
        assert json.loads(a.to_json())["r"] == 20

    def test_divergence_raises_with_curve(self):
        cfg = Class0Config(r=16, init="random_gaussian", seed=0, steps=2000,
                           step_size=75.0, init_scale=0.5, optimizer="plain_sgd")
        with pytest.raises(DivergenceError) as err:
            train_class0(cfg)
        assert len(err.value.curve) >= 1

    def test_fixed_population_mode(self):
        cfg = Class0Config(r=24, seed=2, steps=300, fixed_w_population=True,
                           n_train_pairs=512)
        result, _ = train_class0(cfg)
        assert result.loss_final < result.loss_init

    def test_plain_sgd_mode(self):
        cfg = Class0Config(r=24, seed=2, steps=400, optimizer="plain_sgd",
                           step_size=0.01)
        result, _ = train_class0(cfg)
        assert result.loss_final < result.loss_init

    def test_invalid_config_rejected(self):
        with pytest.raises(ValueError):
            Class0Config(r=16, init="mystery").validate()
        with pytest.raises(ValueError):
            Class0Config(r=16, step_size=-1.0).validate()


class TestZwVectors:
    def test_identity_left_factor(self):
        e = random_gaussian_init(4, 12, make_rng(7))
        for i in range(16):
            z, _ = build_zw_vectors(np.eye(4), i, e.e_x, e.d)
            a, b = divmod(i, 4)
            expected = np.zeros(16)
            expected[4 * a + b] = 1.0
            assert np.array_equal(z, expected)

    def test_zero_input(self):
        e = random_gaussian_init(4, 12, make_rng(8))
        z, zp = build_zw_vectors(np.zeros((4, 4)), 3, e.e_x, e.d)
        assert np.all(z == 0) and np.all(zp == 0)

    def test_linearity_identities(self):
        rng = make_rng(9)
        e = random_gaussian_init(4, 15, rng, scale=0.7)
        x = rng.standard_normal((4, 4))
        for i in (0, 7, 15):
            z, zp = build_zw_vectors(x, i, e.e_x, e.d)
            for _ in range(3):
                w = rng.standard_normal((4, 4))
                assert abs(z @ w.reshape(-1) - (x @ w).reshape(-1)[i]) <= 1e-12
                fe = rng.standard_normal(15)
                direct = (e.d.T @ ((e.e_x @ x.reshape(-1)) * fe))[i]
                assert abs(zp @ fe - direct) <= 1e-12


class TestSolutionMatrix:
    def test_per_w_regression_matches(self):
        rng = make_rng(10)
        for _ in range(3):
            triple = random_gaussian_init(4, 20, rng, scale=0.6)
            xs = rng.standard_normal((100, 4, 4))
            f = solution_matrix(triple.e_x, triple.d, xs)
            for _ in range(5):
                w = rng.standard_normal((4, 4))
                direct = per_w_fake_encoding_regression(triple.e_x, triple.d, w, xs)
                assert np.abs(direct - f @ w.reshape(-1)).max() <= 1e-8

    def test_exact_triple_residual_is_zero(self, s49):
        rng = make_rng(11)
        xs = rng.standard_normal((200, 4, 4))
        f = solution_matrix(s49.e_x, s49.d, xs)
        for _ in range(5):
            w = rng.standard_normal((4, 4))
            fe = f @ w.reshape(-1)
            assert fake_encoding_loss(s49.e_x, s49.d, fe, w, xs) <= 1e-8

    def test_linearity_in_w(self):
        rng = make_rng(12)
        triple = random_gaussian_init(4, 18, rng, scale=0.5)
        xs = rng.standard_normal((80, 4, 4))
        f = solution_matrix(triple.e_x, triple.d, xs)
        w = rng.standard_normal((4, 4))
        assert np.allclose(f @ (3.0 * w).reshape(-1), 3.0 * (f @ w.reshape(-1)))

    def test_too_few_samples_raise(self):
        rng = make_rng(13)
        triple = random_gaussian_init(4, 20, rng)
        with pytest.raises(SingularSystemError):
            solution_matrix(triple.e_x, triple.d, rng.standard_normal((1, 4, 4)))


class TestFakeEncodingLoss:
    def test_true_encoding_of_exact_triple(self, s49):
        rng = make_rng(14)
        w = rng.standard_normal((4, 4))
        xs = rng.standard_normal((50, 4, 4))
        fe = s49.e_w @ w.reshape(-1)
        assert fake_encoding_loss(s49.e_x, s49.d, fe, w, xs) <= 1e-20

    def test_zero_encoding_level(self):
        rng = make_rng(15)
        triple = random_gaussian_init(4, 10, rng)
        w = rng.standard_normal((4, 4))
        xs = rng.standard_normal((4000, 4, 4))
        got = fake_encoding_loss(triple.e_x, triple.d, np.zeros(10), w, xs)
        expected = np.mean([np.sum((x @ w) ** 2) for x in xs]) / 16.0
        assert abs(got - expected) <= 1e-12

    def test_solution_beats_random_encodings(self):
        rng = make_rng(16)
        triple = random_gaussian_init(4, 16, rng, scale=0.6)
        xs = rng.standard_normal((60, 4, 4))
        f = solution_matrix(triple.e_x, triple.d, xs)
        w = rng.standard_normal((4, 4))
        best = fake_encoding_loss(triple.e_x, triple.d, f @ w.reshape(-1), w, xs)
        for _ in range(50):
            fe = rng.standard_normal(16)
            assert best <= fake_encoding_loss(triple.e_x, triple.d, fe, w, xs) + 1e-12
