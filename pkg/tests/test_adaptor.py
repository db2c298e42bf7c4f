import numpy as np
import pytest

from helpers import FD_RTOL, gradcheck, leaf
from shape_adaptor.adaptor import (GeneralAdaptor, ShapeAdaptor, conv_cell_forward, default_branch,
                                   general_adaptor_forward, identity, max_pool_2x2,
                                   residual_cell_forward, shape_adaptor_forward)
from shape_adaptor.calculus import AlphaParam, SearchSpace
from shape_adaptor.tensor import ShapeError, Tensor, bilinear_resize, conv2d, pool2d


def avg_pool(x):
    return pool2d(x, "avg", 2)


def adaptor(raw, cell_kind="conv_cell", lo=max_pool_2x2, hi=identity, dtype=np.float64, rho=1.0):
    return ShapeAdaptor(AlphaParam(raw, dtype=dtype, rho=rho), lo, hi, cell_kind=cell_kind)


class TestTwoBranch:
    @pytest.mark.parametrize("raw,branch", [(-20.0, "lo"), (20.0, "hi")])
    def test_limits_reproduce_branches(self, raw, branch):
        x = Tensor(np.random.default_rng(0).standard_normal((2, 3, 8, 8)))
        m = adaptor(raw)
        expected = max_pool_2x2(x).data if branch == "lo" else x.data
        out = shape_adaptor_forward(m, x, expected.shape[2:])
        np.testing.assert_allclose(out.data, expected, rtol=1e-6, atol=1e-6 * np.abs(expected).max())

    def test_constant_input(self):
        m = adaptor(0.0, lo=avg_pool)
        out = shape_adaptor_forward(m, Tensor(np.ones((1, 1, 4, 4))))
        assert out.shape == (1, 1, 3, 3)
        np.testing.assert_allclose(out.data, 1.0)

    def test_midpoint_matches_composed_oracle(self):
        x = Tensor(np.random.default_rng(1).standard_normal((1, 1, 4, 4)))
        out = shape_adaptor_forward(adaptor(0.0, lo=avg_pool), x)
        expected = (0.5 * bilinear_resize(avg_pool(x), 3, 3).data
                    + 0.5 * bilinear_resize(x, 3, 3).data)
        np.testing.assert_allclose(out.data, expected, atol=1e-14)

    @pytest.mark.parametrize("kind,scale", [("conv_cell", 1.0), ("residual_cell", 2.0)])
    def test_weights_sum_to_scale(self, kind, scale):
        for raw in (-3.0, 0.0, 0.7, 5.0):
            lo, hi = adaptor(raw, kind).mixing_weights()
            assert float((lo + hi).data) == pytest.approx(scale, abs=1e-12)

    def test_penalty_scales_factor(self):
        m = adaptor(0.4, rho=0.8)
        unpenalised = adaptor(0.4)
        assert m.factor == pytest.approx(0.8 * unpenalised.factor, abs=1e-12)

    def test_penalised_mixture_uses_penalised_alpha(self):
        m = adaptor(0.4, rho=0.8)
        lo, hi = m.mixing_weights()
        assert float(hi.data) == pytest.approx(m.alpha.penalized_alpha, abs=1e-12)

    def test_zero_target_rejected(self):
        with pytest.raises(ShapeError):
            shape_adaptor_forward(adaptor(0.0), Tensor(np.ones((1, 1, 4, 4))), 0)

    def test_output_dims_follow_local_rule(self):
        m = adaptor(0.0)
        out = m(Tensor(np.ones((1, 1, 9, 7))))
        assert out.shape[2:] == (int(9 * 0.75), int(7 * 0.75))

    def test_alpha_gradient(self):
        x = leaf((2, 2, 6, 6), 2)
        m = adaptor(0.3)
        err = gradcheck(lambda: shape_adaptor_forward(m, x, 4), [m.alpha.raw, x])
        assert err <= FD_RTOL

    def test_penalised_alpha_gradient(self):
        x = leaf((1, 2, 6, 6), 3)
        m = adaptor(-0.2, rho=0.9)
        assert gradcheck(lambda: shape_adaptor_forward(m, x, 4), [m.alpha.raw]) <= FD_RTOL

    def test_invalid_space(self):
        with pytest.raises(ValueError):
            SearchSpace(1.0, 0.5)


class TestCells:
    def test_conv_cell_limits(self):
        body = Tensor(np.random.default_rng(4).standard_normal((1, 2, 8, 8)))
        hi = conv_cell_forward(adaptor(20.0), body, 8)
        lo = conv_cell_forward(adaptor(-20.0), body, 4)
        np.testing.assert_allclose(hi.data, body.data, atol=1e-7)
        np.testing.assert_allclose(lo.data, max_pool_2x2(body).data, atol=1e-7)

    def test_conv_cell_rejects_residual_module(self):
        with pytest.raises(ValueError):
            conv_cell_forward(adaptor(0.0, "residual_cell"), Tensor(np.ones((1, 1, 4, 4))))

    def test_residual_midpoint_is_plain_sum(self):
        rng = np.random.default_rng(5)
        x = Tensor(rng.standard_normal((1, 2, 6, 6)))
        w_s, w_b = Tensor(rng.standard_normal((2, 2, 1, 1))), Tensor(rng.standard_normal((2, 2, 3, 3)))
        shortcut = lambda t: conv2d(t, w_s)
        body = lambda t: conv2d(t, w_b, padding=1)
        out = residual_cell_forward(adaptor(0.0, "residual_cell"), x, shortcut, body, 4)
        expected = bilinear_resize(shortcut(x), 4, 4).data + bilinear_resize(body(x), 4, 4).data
        np.testing.assert_allclose(out.data, expected, atol=1e-12)

    def test_residual_zero_body(self):
        x = Tensor(np.random.default_rng(6).standard_normal((1, 2, 6, 6)))
        m = adaptor(0.8, "residual_cell")
        out = residual_cell_forward(m, x, identity, lambda t: t * 0.0, 4)
        a = m.alpha.alpha
        np.testing.assert_allclose(out.data, 2 * (1 - a) * bilinear_resize(x, 4, 4).data, atol=1e-12)

    def test_residual_alpha_gradient(self):
        x = leaf((2, 2, 5, 5), 7)
        w_s, w_b = leaf((2, 2, 1, 1), 8), leaf((2, 2, 3, 3), 9)
        m = adaptor(0.25, "residual_cell")
        err = gradcheck(lambda: residual_cell_forward(
            m, x, lambda t: conv2d(t, w_s), lambda t: conv2d(t, w_b, padding=1), 3),
            [m.alpha.raw, w_s, w_b])
        assert err <= FD_RTOL


class TestGeneral:
    def test_two_branch_linear_matches_shape_adaptor(self):
        x = Tensor(np.random.default_rng(10).standard_normal((1, 2, 8, 8)))
        raw = 0.6
        g = GeneralAdaptor([0.5, 1.0], [max_pool_2x2, identity], p=1.0,
                           raw_weights=[0.0, raw], dtype=np.float64)
        m = adaptor(raw)
        assert g.factor == m.factor
        np.testing.assert_allclose(general_adaptor_forward(g, x, 6).data,
                                   shape_adaptor_forward(m, x, 6).data, atol=1e-14)

    def test_near_one_weight_gives_branch(self):
        x = Tensor(np.random.default_rng(11).standard_normal((1, 1, 12, 12)))
        g = GeneralAdaptor([0.25, 0.5, 1.0], p=0.0, raw_weights=[0.0, 0.0, 20.0], dtype=np.float64)
        out = general_adaptor_forward(g, x, 12)
        assert np.linalg.norm(out.data - x.data) <= 1e-4 * np.linalg.norm(x.data)

    def test_constant_input(self):
        g = GeneralAdaptor([0.25, 0.5, 1.0], raw_weights=[0.1, -0.3, 0.5], dtype=np.float64)
        out = g(Tensor(np.full((1, 1, 8, 8), 2.0)))
        np.testing.assert_allclose(out.data, 2.0)

    def test_weights_on_simplex(self):
        g = GeneralAdaptor([0.5, 0.75, 1.0], raw_weights=[3.0, -1.0, 0.2])
        assert g.weights.sum() == pytest.approx(1.0, abs=1e-12) and np.all(g.weights > 0)

    def test_requires_distinct_factors(self):
        with pytest.raises(ValueError):
            GeneralAdaptor([0.5])
        with pytest.raises(ValueError):
            GeneralAdaptor([0.5, 0.5])

    def test_gradient(self):
        x = leaf((1, 2, 8, 8), 12)
        g = GeneralAdaptor([0.25, 0.5, 1.0], p=0.0, raw_weights=[0.2, -0.1, 0.4], dtype=np.float64)
        assert gradcheck(lambda: general_adaptor_forward(g, x, 5), [g.raw, x]) <= FD_RTOL

    def test_default_branches(self):
        x = Tensor(np.ones((1, 1, 8, 8)))
        assert default_branch(1.0)(x) is x
        assert default_branch(0.25)(x).shape == (1, 1, 2, 2)
        assert default_branch(0.6)(x).shape == (1, 1, 4, 4)
