"""Unit tests for the reverse-mode tape engine."""

import numpy as np
import pytest

from motionguard import autodiff as ad

from helpers import check_grad, finite_diff


@pytest.fixture(autouse=True)
def float32_default():
    ad.set_precision("float32")
    yield
    ad.set_precision("float32")


def scalar(build, x):
    tape = ad.Tape()
    leaf = tape.tensor(x, requires_grad=True)
    root = build(tape, leaf)
    ad.backward(root)
    return root, leaf


class TestElementwise:
    def test_abs_negative(self):
        root, leaf = scalar(lambda t, a: ad.abs_(a), np.array(-3.0))
        assert root.values == 3.0
        assert leaf.adjoint == -1.0

    def test_abs_zero_subgradient(self):
        root, leaf = scalar(lambda t, a: ad.abs_(a), np.array(0.0))
        assert root.values == 0.0
        assert leaf.adjoint == 0.0

    def test_charbonnier_matches_finite_differences(self):
        rng = np.random.default_rng(0)
        x = rng.uniform(-1, 1, 100)
        check_grad(
            lambda t, a: ad.sum_(ad.charbonnier_abs(a, kappa=1e-3)), x, rtol=1e-6
        )

    def test_shape_mismatch_raises(self):
        tape = ad.Tape()
        a = tape.tensor(np.ones((2, 3)))
        b = tape.tensor(np.ones((3, 2)))
        with pytest.raises(ad.ShapeMismatchError):
            ad.add(a, b)

    def test_scalar_broadcast(self):
        tape = ad.Tape()
        a = tape.tensor(np.ones((2, 2)), requires_grad=True)
        out = ad.sum_(ad.mul(a, 3.0))
        ad.backward(out)
        assert out.values == 12.0
        assert np.all(a.adjoint == 3.0)

    def test_div_by_zero_in_float64_mode(self):
        with ad.precision("float64"):
            tape = ad.Tape()
            a = tape.tensor(np.ones(3))
            b = tape.tensor(np.array([1.0, 0.0, 2.0]))
            with pytest.raises(ad.DivisionByZeroError):
                ad.div(a, b)

    def test_elementwise_dispatch(self):
        tape = ad.Tape()
        a = tape.tensor(np.array([1.0, -2.0]))
        assert np.allclose(ad.elementwise("abs", a).values, [1.0, 2.0])
        assert np.allclose(ad.elementwise("add", a, 1.0).values, [2.0, -1.0])
        with pytest.raises(ad.AutodiffError):
            ad.elementwise("nope", a)


class TestReduce:
    def test_mean_of_ones(self):
        tape = ad.Tape()
        a = tape.tensor(np.ones((4, 4)))
        assert ad.mean(a).values == 1.0

    def test_sum_adjoint_broadcasts(self):
        root, leaf = scalar(lambda t, a: ad.sum_(a), np.array([1.0, 2.0, 3.0]))
        assert root.values == 6.0
        assert np.all(leaf.adjoint == 1.0)

    def test_mean_matches_finite_differences(self):
        rng = np.random.default_rng(1)
        check_grad(lambda t, a: ad.mean(a), rng.random((8, 8)), rtol=1e-6)

    def test_empty_axis_raises(self):
        tape = ad.Tape()
        a = tape.tensor(np.ones((0, 3)))
        with pytest.raises(ad.ShapeMismatchError):
            ad.mean(a, axes=(0,))


class TestConv2d:
    def test_identity_kernel(self):
        tape = ad.Tape()
        x = tape.tensor(np.arange(9.0).reshape(1, 3, 3))
        k = tape.tensor(np.ones((1, 1, 1, 1)))
        out = ad.conv2d(x, k, stride=1, padding=0)
        assert np.array_equal(out.values, x.values)

    def test_overlap_counting(self):
        tape = ad.Tape()
        x = tape.tensor(np.ones((1, 4, 4)))
        k = tape.tensor(np.ones((1, 1, 3, 3)))
        out = ad.conv2d(x, k, stride=1, padding=1)
        assert out.values[0, 1, 1] == 9.0
        assert out.values[0, 0, 0] == 4.0

    def test_adjoints_match_finite_differences(self):
        rng = np.random.default_rng(2)
        x = rng.random((2, 8, 8))
        k = rng.random((4, 2, 3, 3))

        check_grad(
            lambda t, a: ad.mean(
                ad.mul(ad.conv2d(a, t.tensor(k), stride=1, padding=1), 2.0)
            ),
            x,
            rtol=1e-5,
        )
        check_grad(
            lambda t, kk: ad.mean(ad.conv2d(t.tensor(x), kk, stride=1, padding=1)),
            k,
            rtol=1e-5,
        )

    def test_even_kernel_rejected(self):
        tape = ad.Tape()
        x = tape.tensor(np.ones((1, 4, 4)))
        k = tape.tensor(np.ones((1, 1, 2, 2)))
        with pytest.raises(ad.ShapeMismatchError):
            ad.conv2d(x, k)

    def test_kernel_larger_than_input_rejected(self):
        tape = ad.Tape()
        x = tape.tensor(np.ones((1, 3, 3)))
        k = tape.tensor(np.ones((1, 1, 7, 7)))
        with pytest.raises(ad.ShapeMismatchError):
            ad.conv2d(x, k, padding=1)


class TestBilinearSample:
    @staticmethod
    def identity_grid(h, w):
        ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
        return np.stack([xs, ys], axis=-1)

    def test_identity_grid_is_identity(self):
        tape = ad.Tape()
        img = tape.tensor(np.random.default_rng(3).random((2, 5, 6)))
        coords = tape.tensor(self.identity_grid(5, 6))
        out = ad.bilinear_sample(img, coords)
        assert np.array_equal(out.values, img.values)

    def test_linear_ramp_half_pixel(self):
        tape = ad.Tape()
        ramp = np.broadcast_to(np.arange(6.0), (5, 6)).copy()
        img = tape.tensor(ramp[None])
        grid = self.identity_grid(5, 6)
        grid[..., 0] += 0.5
        out = ad.bilinear_sample(img, tape.tensor(grid))
        assert np.allclose(out.values[0, :, :-1], ramp[:, :-1] + 0.5)

    def test_adjoints_match_finite_differences(self):
        rng = np.random.default_rng(4)
        img = rng.random((2, 6, 6))
        coords = self.identity_grid(6, 6) + rng.uniform(0.2, 0.4, (6, 6, 2))

        check_grad(
            lambda t, a: ad.mean(ad.bilinear_sample(a, t.tensor(coords))),
            img,
            rtol=1e-5,
        )
        check_grad(
            lambda t, cc: ad.mean(ad.bilinear_sample(t.tensor(img), cc)),
            coords,
            rtol=1e-5,
        )


class TestSpatialDerivatives:
    def test_constant_image_zero(self):
        tape = ad.Tape()
        a = tape.tensor(np.full((1, 5, 5), 0.7))
        for order in (1, 2):
            for axis in ("x", "y"):
                assert np.allclose(ad.spatial_derivatives(a, order, axis).values, 0.0)

    def test_linear_and_quadratic(self):
        xs = np.broadcast_to(np.arange(7.0), (7, 7)).copy()
        tape = ad.Tape()
        a = tape.tensor(xs[None])
        d1 = ad.spatial_derivatives(a, 1, "x").values
        d2 = ad.spatial_derivatives(a, 2, "x").values
        assert np.allclose(d1[0, :, 1:-1], 1.0)
        assert np.allclose(d2[0, :, 1:-1], 0.0)
        b = tape.tensor((xs**2)[None])
        assert np.allclose(ad.spatial_derivatives(b, 2, "x").values[0, :, 1:-1], 2.0)

    def test_small_dimension_rejected(self):
        tape = ad.Tape()
        a = tape.tensor(np.ones((1, 2, 5)))
        with pytest.raises(ad.ShapeMismatchError):
            ad.spatial_derivatives(a, 1, "y")

    def test_shift_adjoint_matches_finite_differences(self):
        rng = np.random.default_rng(5)
        x = rng.random((4, 5))
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                w = rng.random((4, 5))
                check_grad(
                    lambda t, a, dy=dy, dx=dx, w=w: ad.mean(
                        ad.mul(ad.shift2d(a, dy, dx), t.tensor(w))
                    ),
                    x,
                    rtol=1e-5,
                )


class TestBackward:
    def test_root_is_leaf(self):
        tape = ad.Tape()
        a = tape.tensor(np.array(2.0), requires_grad=True)
        ad.backward(a)
        assert a.adjoint == 1.0

    def test_mean_square_adjoint(self):
        rng = np.random.default_rng(6)
        x = rng.random(10)
        tape = ad.Tape()
        a = tape.tensor(x, requires_grad=True)
        ad.backward(ad.mean(ad.mul(a, a)))
        assert np.allclose(a.adjoint, 2 * x.astype(np.float32) / 10, rtol=1e-5)

    def test_non_scalar_root_rejected(self):
        tape = ad.Tape()
        a = tape.tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ad.NonScalarRootError):
            ad.backward(a)

    def test_consumed_tape_rejected(self):
        tape = ad.Tape()
        a = tape.tensor(np.array(1.0), requires_grad=True)
        root = ad.mul(a, 2.0)
        ad.backward(root)
        with pytest.raises(ad.GraphConsumedError):
            ad.backward(root)

    def test_reset_allows_reuse(self):
        tape = ad.Tape()
        a = tape.tensor(np.array(1.0), requires_grad=True)
        root = ad.mul(a, 2.0)
        ad.backward(root)
        tape.reset()
        assert a.adjoint == 0.0
        ad.backward(root)
        assert a.adjoint == 2.0

    def test_linearity_of_backward(self):
        with ad.precision("float64"):
            rng = np.random.default_rng(7)
            x = rng.random((4, 4))

            def grad_of(alpha, beta):
                tape = ad.Tape()
                a = tape.tensor(x, requires_grad=True)
                l1 = ad.mean(ad.mul(a, a))
                l2 = ad.sum_(ad.abs_(a))
                ad.backward(ad.add(ad.mul(l1, alpha), ad.mul(l2, beta)))
                return a.adjoint.copy()

            g1 = grad_of(1.0, 0.0)
            g2 = grad_of(0.0, 1.0)
            combo = grad_of(2.0, 3.0)
            assert np.allclose(combo, 2 * g1 + 3 * g2, rtol=1e-12, atol=1e-12)


class TestTape:
    def test_replay_reproduces_values(self):
        rng = np.random.default_rng(8)
        tape = ad.Tape()
        a = tape.tensor(rng.random((3, 6, 6)), requires_grad=True)
        k = tape.tensor(rng.random((2, 3, 3, 3)))
        out = ad.mean(ad.relu(ad.conv2d(a, k, stride=2, padding=1)))
        ad.backward(out)
        assert tape.replay()

    def test_determinism(self):
        def run():
            tape = ad.Tape()
            a = tape.tensor(np.linspace(0, 1, 16).reshape(4, 4), requires_grad=True)
            root = ad.mean(ad.exp(ad.mul(a, a)))
            ad.backward(root)
            return root.values.copy(), a.adjoint.copy()

        v1, g1 = run()
        v2, g2 = run()
        assert np.array_equal(v1, v2)
        assert np.array_equal(g1, g2)

    def test_topological_order_invariant(self):
        tape = ad.Tape()
        a = tape.tensor(np.ones(3), requires_grad=True)
        b = ad.mul(a, 2.0)
        c = ad.add(b, a)
        ad.sum_(c)
        for rec in tape.records:
            assert all(i < rec.output_id for i in rec.input_ids)


class TestStructural:
    def test_slice0_and_stack(self):
        rng = np.random.default_rng(9)
        x = rng.random((5, 3))
        w = rng.random((3, 3))
        check_grad(
            lambda t, a: ad.mean(ad.mul(ad.slice0(a, 1, 4), t.tensor(w))),
            x,
            rtol=1e-6,
        )
        check_grad(
            lambda t, a: ad.sum_(
                ad.select_last(ad.stack_last(a, ad.mul(a, 2.0)), 1)
            ),
            x,
            rtol=1e-6,
        )

    def test_channel_weighted_sum(self):
        x = np.random.default_rng(10).random((4, 4, 3))
        check_grad(
            lambda t, a: ad.mean(ad.channel_weighted_sum(a, (0.299, 0.587, 0.114))),
            x,
            rtol=1e-6,
        )

    def test_linear_and_gather(self):
        rng = np.random.default_rng(11)
        x = rng.random(6)
        w = rng.random((6, 4))
        b = rng.random(4)
        check_grad(
            lambda t, a: ad.gather_scalar(ad.linear(a, t.tensor(w), t.tensor(b)), 2),
            x,
            rtol=1e-6,
        )

    def test_broadcast_frame_channel(self):
        d = np.random.default_rng(12).random((4, 3))
        check_grad(
            lambda t, a: ad.mean(ad.broadcast_frame_channel(a, (4, 5, 5, 3))),
            d,
            rtol=1e-6,
        )
