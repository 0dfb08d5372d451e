import numpy as np
import pytest

from strassen_tile.dense_core import ShapeError
from strassen_tile.cost_model import (
    CostReport,
    ProblemShape,
    cost_report,
    count_reference_flops,
    flops_general,
    flops_square,
    io_fused_chain,
    io_square,
    speedup_table,
)


class TestFlopsGeneral:
    @pytest.mark.parametrize("t,r", [(1, 1), (2, 3), (4, 20)])
    def test_single_tile_closed_form(self, t, r):
        got = flops_general(ProblemShape(t, t, t, t, r))
        assert got == 6 * t * t * r + 2 * r

    def test_linear_in_r(self):
        base = flops_general(ProblemShape(64, 64, 64, 4, 16))
        assert flops_general(ProblemShape(64, 64, 64, 4, 32)) == 2 * base

    def test_cross_consistency_with_square_form(self):
        # the general form prices one extra (weight-encode) transform pass
        n, t, r = 8192, 4, 32
        stl_sq, _ = flops_square(n, t, r)
        general = flops_general(ProblemShape(n, n, n, t, r))
        assert general - stl_sq == 2 * n * n * r
        assert (general - stl_sq) / general < 0.02  # dominant terms agree

    def test_invalid_shape_rejected(self):
        with pytest.raises(ShapeError):
            ProblemShape(10, 8, 8, 4, 16)


class TestFlopsSquare:
    def test_headline_numbers(self):
        stl, naive = flops_square(8192, 4, 32)
        assert stl == 558_345_748_480  # 5583.457...e8
        assert naive == 1_099_511_627_776  # 10995.116...e8
        assert round(stl / 1e8) == 5583
        assert round(naive / 1e8) == 10995

    def test_r_equals_t_cubed_crossover(self):
        n, t = 512, 4
        stl, naive = flops_square(n, t, t**3)
        # the cubic term alone equals the naive count at r = t^3
        assert stl - 4 * n * n * t**3 == naive

    def test_matches_instrumented_count_up_to_weight_encode(self):
        n, t, r = 16, 4, 16
        stl, _ = flops_square(n, t, r)
        counted = count_reference_flops(ProblemShape(n, n, n, t, r))
        assert counted == stl + 2 * n * n * r


class TestIoSquare:
    def test_headline_numbers(self):
        io_stl, io_naive, steps = io_square(8192, 4, 32, 2)
        x_bytes = 2 * 8192 * 8192
        assert x_bytes == 134_217_728  # ~1.3e8
        assert io_stl == 12 * x_bytes
        assert io_naive == 3 * x_bytes
        assert sum(steps) == io_stl

    def test_r_equals_t_squared(self):
        io_stl, _, _ = io_square(256, 4, 16, 2)
        assert io_stl == 7 * (2 * 256 * 256)

    @pytest.mark.parametrize("n,t,r,bps", [(8, 4, 20, 2), (64, 2, 3, 4), (128, 4, 49, 8)])
    def test_naive_is_always_three_operands(self, n, t, r, bps):
        _, io_naive, _ = io_square(n, t, r, bps)
        assert io_naive == 3 * bps * n * n

    def test_fused_chain_savings(self):
        n, t, r, bps = 256, 4, 32, 2
        total, _, (io1, _, io3) = io_square(n, t, r, bps)
        assert io_fused_chain(n, t, r, 1, bps) == total
        assert io_fused_chain(n, t, r, 3, bps) == 3 * total - 2 * (io1 + io3)


class TestInstrumentedCounter:
    @pytest.mark.parametrize("t", [1, 2, 4])
    def test_equals_formula_on_grid(self, t):
        for n in (t, 4 * t, 8 * t):
            for r in (1, t * t, 2 * t * t, 3 * t * t):
                shape = ProblemShape(n, n, n, t, r)
                assert count_reference_flops(shape) == flops_general(shape)

    def test_degenerate_triple_hand_count(self):
        n = 8
        shape = ProblemShape(n, n, n, 1, 1)
        assert count_reference_flops(shape) == 2 * n**3 + 6 * n**2

    def test_cubic_scaling_of_product_term(self):
        t, r = 4, 16
        def product_term(n):
            total = count_reference_flops(ProblemShape(n, n, n, t, r))
            return total - 3 * (n * n) * 2 * r  # subtract the transform passes
        assert product_term(32) == 8 * product_term(16)


class TestSpeedupTable:
    def test_monotone_decreasing_in_r(self):
        table = speedup_table([16384], [16, 24, 32, 40, 48], 4)
        ratios = [rep.speedup_flops for rep in table]
        assert all(a > b for a, b in zip(ratios, ratios[1:]))

    def test_asymptotic_limit_t3_over_r(self):
        t, r = 4, 49
        n = 100 * t**3
        rep = cost_report(n, t, r)
        limit = t**3 / r  # 64/49 ~ 1.306
        assert abs(rep.speedup_flops - limit) <= 0.10 * limit

    def test_r16_about_twice_r32(self):
        table = {rep.r: rep.speedup_flops for rep in speedup_table([16384], [16, 32], 4)}
        assert abs(table[16] / table[32] - 2.0) <= 0.1

    def test_r_equals_t3_ratio_one(self):
        rep = cost_report(100 * 64, 4, 64)
        assert abs(rep.speedup_flops - 1.0) <= 0.1

    def test_row_order_and_fields(self):
        table = speedup_table([8, 16], [1, 2], 2, bytes_per_scalar=4)
        assert [(rep.n, rep.r) for rep in table] == [(8, 1), (8, 2), (16, 1), (16, 2)]
        assert all(isinstance(rep, CostReport) for rep in table)


class TestReportInvariants:
    @pytest.mark.parametrize("n,t,r", [(8, 4, 20), (64, 2, 3), (4096, 4, 49)])
    def test_totals_equal_breakdowns(self, n, t, r):
        rep = cost_report(n, t, r)
        assert sum(rep.flop_steps) == rep.flops_stl
        assert sum(rep.io_steps) == rep.io_stl_bytes

    def test_product_dominates_transforms_beyond_3t3(self):
        for t in (1, 2, 4):
            n = 4 * 3 * t**3  # comfortably past the crossover, divisible by t
            for r in (1, t * t, 4 * t * t):
                shape = ProblemShape(n, n, n, t, r)
                product = 2 * r * n**3 // t**3
                transforms = flops_general(shape) - product
                assert product > transforms
