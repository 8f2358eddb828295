"""Snake convolution: offsets, chain geometry, sampling, and the full operator
against brute-force references."""

import math

import numpy as np
import pytest

from oracles import (
    chain_points_oracle,
    clamped_row_conv_oracle,
    conv2d_oracle,
    naive_snake_forward,
)
from serpentseg.dsconv import (
    INIT_STEP_BIAS,
    STRAIGHT_BIAS,
    SnakeConv2d,
    bilinear_sample,
    chain_coordinates,
    grid_sample_points,
    iterate_chain,
)
from serpentseg.gradcheck import grad_check
from serpentseg.tensor import ContractViolation, Tensor


def make_snake(cin=2, cout=3, axis="horizontal", seed=0, pyramid_scale=0.0,
               frozen=False):
    rng = np.random.default_rng(seed)
    conv = SnakeConv2d(cin, cout, axis, rng, frozen_offsets=frozen)
    if pyramid_scale:
        for lvl in conv._levels:
            lvl.weight.data = (pyramid_scale
                               * rng.standard_normal(lvl.weight.data.shape)).astype(np.float32)
            lvl.bias.data = (pyramid_scale
                             * rng.standard_normal(lvl.bias.data.shape)).astype(np.float32)
    return conv


class TestPyramidOffsets:
    def test_zero_weights_zero_bias_gives_zero_offsets(self):
        conv = make_snake()
        for lvl in conv._levels:
            lvl.bias.data[:] = 0.0
        x = Tensor(np.random.default_rng(1).standard_normal((1, 2, 5, 5)).astype(np.float32))
        field = conv.compute_pyramid_offsets(x)
        np.testing.assert_array_equal(field.squashed.data, 0.0)

    def test_axis_bias_gives_spatially_constant_tanh(self):
        conv = make_snake(axis="horizontal")
        x = Tensor(np.random.default_rng(2).standard_normal((1, 2, 6, 7)).astype(np.float32))
        sq = conv.compute_pyramid_offsets(x).squashed.data
        want = math.tanh(INIT_STEP_BIAS)  # 0.95 by construction
        assert sq.shape == (1, 16, 6, 7)
        for c in range(4):
            np.testing.assert_allclose(sq[:, 4 * c + 0], want, atol=1e-6)  # dx forward
            np.testing.assert_allclose(sq[:, 4 * c + 2], want, atol=1e-6)  # dx backward
            np.testing.assert_array_equal(sq[:, 4 * c + 1], 0.0)
            np.testing.assert_array_equal(sq[:, 4 * c + 3], 0.0)

    def test_levels_match_conv_oracle_then_tanh(self):
        conv = make_snake(cin=2, seed=3, pyramid_scale=0.3)
        rng = np.random.default_rng(4)
        x = rng.standard_normal((1, 2, 6, 6)).astype(np.float32)
        field = conv.compute_pyramid_offsets(Tensor(x))
        for li, k in enumerate((3, 5, 7, 9)):
            lvl = conv._levels[li]
            ref = conv2d_oracle(x.astype(np.float64), lvl.weight.data.astype(np.float64),
                                lvl.bias.data.astype(np.float64), padding=(k - 1) // 2)
            np.testing.assert_allclose(field.raw.data[:, 4 * li:4 * li + 4], ref, atol=1e-5)
            np.testing.assert_allclose(field.squashed.data[:, 4 * li:4 * li + 4],
                                       np.tanh(ref), atol=1e-5)

    def test_squashed_bounded_by_unit_box(self):
        # tanh keeps steps in (-1, 1) mathematically; float32 rounds extreme
        # raw values to exactly +-1, which still respects the closed 9x9 box
        conv = make_snake(seed=5, pyramid_scale=2.0)
        x = Tensor(np.random.default_rng(6).standard_normal((2, 2, 8, 8)).astype(np.float32))
        sq = conv.compute_pyramid_offsets(x).squashed.data
        assert np.all(np.abs(sq) <= 1.0)
        mild = make_snake(seed=5, pyramid_scale=0.05)
        sq = mild.compute_pyramid_offsets(x).squashed.data
        assert np.all(np.abs(sq) < 1.0)


class TestIterateChain:
    def test_zero_steps_collapse_to_center(self):
        pts = iterate_chain((3, 5), np.zeros(16))
        assert all(p == (5.0, 3.0) for p in pts)

    def test_saturated_horizontal_steps_make_a_row(self):
        steps = np.zeros(16)
        steps[0::4] = 1.0  # forward dx
        steps[2::4] = 1.0  # backward dx
        pts = iterate_chain((2, 4), steps)
        for c in range(-4, 5):
            assert pts[4 + c] == (4.0 + c, 2.0)

    def test_matches_prefix_sum_oracle(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            steps = rng.uniform(-0.99, 0.99, 16)
            center = (int(rng.integers(0, 10)), int(rng.integers(0, 10)))
            got = iterate_chain(center, steps)
            want = chain_points_oracle(center, steps)
            for (gx, gy), (wx, wy) in zip(got, want):
                assert gx == pytest.approx(wx, abs=1e-6)
                assert gy == pytest.approx(wy, abs=1e-6)

    def test_dense_chain_matches_per_pixel(self):
        conv = make_snake(cin=1, seed=8, pyramid_scale=0.5)
        rng = np.random.default_rng(9)
        x = rng.standard_normal((1, 1, 5, 6)).astype(np.float32)
        field = conv.compute_pyramid_offsets(Tensor(x))
        xs, ys = chain_coordinates(field)
        for hh in range(5):
            for ww in range(6):
                pts = iterate_chain((hh, ww), field.squashed.data[0, :, hh, ww])
                for t in range(9):
                    assert xs.data[0, t, hh, ww] == pytest.approx(pts[t][0], abs=1e-5)
                    assert ys.data[0, t, hh, ww] == pytest.approx(pts[t][1], abs=1e-5)


class TestBilinearSample:
    def test_integer_point_is_exact(self):
        rng = np.random.default_rng(10)
        f = rng.standard_normal((1, 3, 4, 5)).astype(np.float32)
        out = bilinear_sample(Tensor(f), (2.0, 3.0))
        np.testing.assert_allclose(out.data[0], f[0, :, 3, 2], atol=0)

    def test_center_of_four_neighbors(self):
        f = np.array([[[[0.0, 1.0], [2.0, 3.0]]]], dtype=np.float32)
        out = bilinear_sample(Tensor(f), (0.5, 0.5))
        assert out.data[0, 0] == pytest.approx(1.5)

    def test_affine_field_reproduced_exactly(self):
        xs, ys = np.meshgrid(np.arange(8.0), np.arange(8.0))
        f = (2.0 * xs + 3.0 * ys).astype(np.float32).reshape(1, 1, 8, 8)
        out = bilinear_sample(Tensor(f), (1.25, 2.5))
        assert out.data[0, 0] == pytest.approx(10.0, abs=1e-6)

    def test_non_finite_coordinate_rejected(self):
        f = Tensor(np.zeros((1, 1, 4, 4), dtype=np.float32))
        with pytest.raises(ContractViolation):
            bilinear_sample(f, (float("nan"), 0.0))

    def test_clamped_coordinate_has_zero_gradient(self):
        f = Tensor(np.random.default_rng(11).standard_normal((1, 1, 4, 4)).astype(np.float64))
        x = Tensor(np.array([[-1.5]], dtype=np.float64), requires_grad=True)
        y = Tensor(np.array([[1.3]], dtype=np.float64), requires_grad=True)
        out = grid_sample_points(f, x, y)
        out.sum().backward()
        assert x.grad[0, 0] == 0.0
        assert y.grad[0, 0] != 0.0


class TestSnakeForward:
    def test_straight_chain_reduces_to_clamped_row_conv(self):
        rng = np.random.default_rng(12)
        for trial in range(5):
            conv = make_snake(cin=2, cout=3, axis="horizontal", seed=100 + trial,
                              frozen=True)
            x = rng.standard_normal((1, 2, 6, 7)).astype(np.float32)
            out = conv(Tensor(x))
            ref = clamped_row_conv_oracle(x.astype(np.float64),
                                          conv._chain_w.data.astype(np.float64),
                                          conv._chain_b.data.astype(np.float64))
            np.testing.assert_allclose(out.data, ref, atol=1e-5)

    def test_straight_vertical_chain_reduces_to_column_conv(self):
        rng = np.random.default_rng(13)
        conv = make_snake(cin=1, cout=2, axis="vertical", seed=200, frozen=True)
        x = rng.standard_normal((2, 1, 7, 5)).astype(np.float32)
        out = conv(Tensor(x))
        ref = clamped_row_conv_oracle(x.astype(np.float64),
                                      conv._chain_w.data.astype(np.float64),
                                      conv._chain_b.data.astype(np.float64), vertical=True)
        np.testing.assert_allclose(out.data, ref, atol=1e-5)

    def test_constant_input_ignores_offsets(self):
        base = make_snake(cin=2, cout=3, seed=14, pyramid_scale=0.0)
        warped = make_snake(cin=2, cout=3, seed=14, pyramid_scale=0.8)
        warped._chain_w.data = base._chain_w.data.copy()
        warped._chain_b.data = base._chain_b.data.copy()
        x = Tensor(np.full((1, 2, 6, 6), 1.7, dtype=np.float32))
        a = base(x).data
        b = warped(x).data
        np.testing.assert_allclose(a, b, atol=1e-6)
        expected = base._chain_w.data.sum(axis=(1, 2)) * 1.7 + base._chain_b.data
        np.testing.assert_allclose(a[0, :, 3, 3], expected, atol=1e-5)

    def test_matches_fully_naive_reference(self):
        rng = np.random.default_rng(15)
        for trial in range(10):
            conv = make_snake(cin=2, cout=2, seed=300 + trial, pyramid_scale=0.4)
            x = rng.standard_normal((1, 2, 6, 6)).astype(np.float32)
            out = conv(Tensor(x))
            ref = naive_snake_forward(
                x.astype(np.float64),
                [l.weight.data.astype(np.float64) for l in conv._levels],
                [l.bias.data.astype(np.float64) for l in conv._levels],
                conv._chain_w.data.astype(np.float64),
                conv._chain_b.data.astype(np.float64),
            )
            np.testing.assert_allclose(out.data, ref, atol=1e-5)

    def test_channel_mismatch_raises(self):
        conv = make_snake(cin=2)
        with pytest.raises(ContractViolation):
            conv(Tensor(np.zeros((1, 3, 6, 6), dtype=np.float32)))


class TestChainInvariants:
    def test_containment_and_continuity(self):
        # bounds hold exactly in real arithmetic; float32 prefix sums can
        # overshoot by a few ulps, hence the 1e-5 slack
        rng = np.random.default_rng(16)
        for trial in range(25):
            conv = make_snake(cin=1, seed=400 + trial, pyramid_scale=3.0)
            x = Tensor(rng.standard_normal((1, 1, 8, 8)).astype(np.float32))
            xs, ys = chain_coordinates(conv.compute_pyramid_offsets(x))
            gx = np.arange(8)[None, None, None, :]
            gy = np.arange(8)[None, None, :, None]
            assert np.all(np.abs(xs.data - gx) <= 4.0 + 1e-5)
            assert np.all(np.abs(ys.data - gy) <= 4.0 + 1e-5)
            assert np.all(np.abs(np.diff(xs.data, axis=1)) <= 1.0 + 1e-5)
            assert np.all(np.abs(np.diff(ys.data, axis=1)) <= 1.0 + 1e-5)

    def test_center_point_is_exact_grid_position(self):
        conv = make_snake(cin=1, seed=17, pyramid_scale=1.0)
        x = Tensor(np.random.default_rng(18).standard_normal((1, 1, 5, 5)).astype(np.float32))
        xs, ys = chain_coordinates(conv.compute_pyramid_offsets(x))
        np.testing.assert_array_equal(xs.data[:, 4], np.broadcast_to(np.arange(5.0), (1, 5, 5)))
        np.testing.assert_array_equal(ys.data[:, 4],
                                      np.broadcast_to(np.arange(5.0)[:, None], (1, 5, 5)))


class TestSnakeGradients:
    def test_grad_check_full_operator(self):
        conv = make_snake(cin=2, cout=2, seed=19, pyramid_scale=0.3)
        x = np.random.default_rng(20).standard_normal((1, 2, 6, 6))
        report = grad_check(conv, x, tolerance=1e-3)
        assert report.passed, str(report)

    def test_grad_check_frozen_offsets_still_pass(self):
        conv = make_snake(cin=2, cout=2, seed=21, frozen=True)
        x = np.random.default_rng(22).standard_normal((1, 2, 6, 6))
        report = grad_check(conv, x, tolerance=1e-3)
        assert report.passed, str(report)

    def test_frozen_instances_have_no_pyramid_parameters(self):
        conv = make_snake(cin=1, cout=1, seed=23, frozen=True)
        names = [n for n, _ in conv.named_parameters()]
        assert names == ["chain.weight", "chain.bias"]
        x = Tensor(np.random.default_rng(24).standard_normal((1, 1, 6, 6)).astype(np.float32),
                   requires_grad=True)
        conv(x).sum().backward()
        assert conv._chain_w.grad is not None
        assert x.grad is not None

    def test_straight_bias_saturates_exactly(self):
        assert math.tanh(STRAIGHT_BIAS) == 1.0
