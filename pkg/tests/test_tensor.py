import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from ursct import tensor as T
from ursct.errors import ConfigError, DimensionError, NumericError
from ursct.gradcheck import finite_diff_gradcheck, run_suite
from ursct.tensor import GradTape, Tensor, no_grad

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def t64(x, grad=False):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=grad)


class TestMatmul:
    def test_identity(self):
        a = t64([[1, 2], [3, 4]])
        np.testing.assert_array_equal(T.matmul(t64(np.eye(2)), a).data, a.data)

    def test_hand_product(self):
        out = t64([[1, 2], [3, 4]]) @ t64([[5, 6], [7, 8]])
        np.testing.assert_array_equal(out.data, [[19, 22], [43, 50]])

    def test_batched_shape(self):
        assert T.matmul(t64(np.zeros((4, 3, 2))), t64(np.zeros((4, 2, 5)))).shape == (4, 3, 5)

    def test_inner_mismatch(self):
        with pytest.raises(DimensionError):
            T.matmul(t64(np.zeros((3, 2))), t64(np.zeros((3, 2))))


class TestConv2d:
    def test_identity_depthwise_1x1(self):
        x = t64(np.random.default_rng(0).standard_normal((2, 3, 4, 5)))
        w = t64(np.ones((3, 1, 1, 1)))
        np.testing.assert_array_equal(T.conv2d(x, w, groups=3).data, x.data)

    def test_ones_stencil(self):
        out = T.conv2d(t64(np.ones((1, 1, 3, 3))), t64(np.ones((1, 1, 3, 3))), padding=1).data[0, 0]
        assert out[1, 1] == 9
        assert out[0, 0] == out[0, 2] == out[2, 0] == out[2, 2] == 4
        assert out[0, 1] == 6

    def test_output_size_formula(self):
        out = T.conv2d(t64(np.zeros((1, 2, 9, 7))), t64(np.zeros((4, 2, 3, 3))), stride=2, padding=1)
        assert out.shape == (1, 4, (9 + 2 - 3) // 2 + 1, (7 + 2 - 3) // 2 + 1)

    def test_depthwise_channels_independent(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((1, 4, 5, 5))
        w = t64(rng.standard_normal((4, 1, 3, 3)))
        base = T.conv2d(t64(x), w, padding=1, groups=4).data
        x2 = x.copy()
        x2[0, 0] += rng.standard_normal((5, 5))
        moved = T.conv2d(t64(x2), w, padding=1, groups=4).data
        assert not np.allclose(moved[0, 0], base[0, 0])
        np.testing.assert_array_equal(moved[0, 1:], base[0, 1:])

    def test_depthwise_jacobian_block_diagonal(self):
        rng = np.random.default_rng(2)
        x = t64(rng.standard_normal((1, 3, 4, 4)), grad=True)
        w = t64(rng.standard_normal((3, 1, 3, 3)))
        T.conv2d(x, w, padding=1, groups=3)[:, 1].sum().backward()
        assert np.all(x.grad[:, [0, 2]] == 0)
        assert np.any(x.grad[:, 1] != 0)

    def test_groups_must_divide(self):
        with pytest.raises(ConfigError):
            T.conv2d(t64(np.zeros((1, 3, 4, 4))), t64(np.zeros((4, 1, 3, 3))), groups=2)


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(T.softmax(t64([0, 0, 0, 0])).data, [0.25] * 4, rtol=0, atol=1e-15)

    def test_closed_form(self):
        np.testing.assert_allclose(T.softmax(t64([0.0, math.log(3)])).data, [0.25, 0.75], rtol=0, atol=1e-15)

    def test_large_logits_stable(self):
        out = T.softmax(t64([1000.0, 0.0])).data
        assert np.all(np.isfinite(out))
        assert out[0] == pytest.approx(1.0) and out[1] < 1e-300 + 1e-12

    @settings(max_examples=50, deadline=None)
    @given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=3, max_side=6), elements=finite))
    def test_rows_sum_to_one(self, x):
        out = T.softmax(t64(x), axis=-1).data
        np.testing.assert_allclose(out.sum(-1), 1.0, atol=1e-6)
        assert np.all((out >= 0) & (out <= 1))


class TestLayerNorm:
    def test_constant_vector_zero(self):
        out = T.layer_norm(t64(np.full((2, 6), 3.3)), t64(np.ones(6)), t64(np.zeros(6)))
        # the float mean of 3.3 is off by an ulp, amplified by 1/sqrt(eps)
        np.testing.assert_allclose(out.data, 0.0, atol=1e-12)
        exact = T.layer_norm(t64(np.full((2, 6), 0.5)), t64(np.ones(6)), t64(np.zeros(6)))
        np.testing.assert_array_equal(exact.data, 0.0)

    def test_two_values(self):
        out = T.layer_norm(t64([[1.0, 3.0]]), t64([1.0, 1.0]), t64([0.0, 0.0]), eps=1e-12)
        np.testing.assert_allclose(out.data, [[-1.0, 1.0]], atol=1e-9)

    def test_beta_dominates_when_gamma_zero(self):
        x = t64(np.random.default_rng(0).standard_normal((3, 5)))
        out = T.layer_norm(x, t64(np.zeros(5)), t64(np.full(5, 5.0)))
        np.testing.assert_array_equal(out.data, 5.0)

    def test_near_constant_input_gradcheck(self):
        x = Tensor(2.0 + 1e-4 * np.random.default_rng(3).standard_normal((2, 8)))
        rep = finite_diff_gradcheck(
            lambda a, g, b: T.layer_norm(a, g, b), [x, Tensor(np.ones(8)), Tensor(np.zeros(8))], name="ln-flat"
        )
        assert rep.passed, rep.line()


class TestGelu:
    def test_values(self):
        out = T.gelu(t64([0.0, 1.0, -10.0])).data
        assert out[0] == 0.0
        assert out[1] == pytest.approx(0.841345, abs=1e-6)
        assert abs(out[2]) < 1e-20

    def test_exact_erf_form(self):
        x = np.linspace(-4, 4, 17)
        expected = [v * 0.5 * (1 + math.erf(v / math.sqrt(2))) for v in x]
        np.testing.assert_allclose(T.gelu(t64(x)).data, expected, rtol=1e-14, atol=1e-15)


class TestShapes:
    def test_reshape_roundtrip_bitwise(self):
        x = np.random.default_rng(0).standard_normal((2, 6))
        back = t64(x).reshape(3, 4).reshape(2, 6)
        assert back.data.tobytes() == x.tobytes()

    def test_permute_is_transpose(self):
        x = np.arange(6.0).reshape(2, 3)
        np.testing.assert_array_equal(t64(x).permute(1, 0).data, x.T)

    def test_reshape_count_mismatch(self):
        with pytest.raises(DimensionError):
            t64(np.zeros((2, 6))).reshape(5, 2)

    def test_permute_invalid_axes(self):
        with pytest.raises(DimensionError):
            t64(np.zeros((2, 3))).permute(0, 0)

    @settings(max_examples=30, deadline=None)
    @given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=2, max_dims=4, max_side=4), elements=finite), st.randoms())
    def test_permute_inverse_bitwise(self, x, rnd):
        order = list(range(x.ndim))
        rnd.shuffle(order)
        inv = list(np.argsort(order))
        assert t64(x).permute(order).permute(inv).data.tobytes() == np.ascontiguousarray(x).tobytes()


class TestElementwise:
    def test_add_zero(self):
        x = t64([1.5, -2.0])
        np.testing.assert_array_equal((x + 0).data, x.data)

    def test_sqrt(self):
        assert T.sqrt(t64(4.0)).item() == 2.0

    def test_clamp(self):
        np.testing.assert_array_equal(T.clamp(t64([-0.5, 0.5, 1.5]), 0, 1).data, [0, 0.5, 1])

    def test_kink_subgradients_are_zero(self):
        x = t64([0.0, 1.0, 0.5], grad=True)
        T.absolute(x[0:1]).sum().backward()
        assert x.grad[0] == 0.0
        y = t64([0.0, 1.0, 0.5], grad=True)
        T.clamp(y, 0.0, 1.0).sum().backward()
        np.testing.assert_array_equal(y.grad, [0.0, 0.0, 1.0])

    def test_division_by_zero_raises(self):
        with pytest.raises(NumericError):
            t64([1.0, 2.0]) / t64([1.0, 0.0])

    def test_nonfinite_forward_raises(self):
        with pytest.raises(NumericError):
            T.log(t64([0.0]))

    def test_broadcast_mismatch(self):
        with pytest.raises(DimensionError):
            t64(np.zeros((2, 3))) + t64(np.zeros((4,)))


class TestReduceAndBackward:
    def test_mean_values(self):
        assert T.reduce_mean(t64([1, 2, 3])).item() == 2.0
        assert T.reduce_mean(t64(np.full((3, 4, 2), 1.25))).item() == 1.25

    def test_mean_gradient_uniform(self):
        x = t64(np.zeros((2, 5)), grad=True)
        x.mean().backward()
        np.testing.assert_allclose(x.grad, 0.1, rtol=0, atol=1e-15)

    def test_sum_grad(self):
        x = t64([1.0, 2.0, 3.0], grad=True)
        x.sum().backward()
        np.testing.assert_array_equal(x.grad, [1, 1, 1])

    def test_mean_square_grad(self):
        x = t64([1.0, 2.0], grad=True)
        (x * x).mean().backward()
        np.testing.assert_allclose(x.grad, [1.0, 2.0])

    def test_non_scalar_backward_rejected(self):
        x = t64([1.0, 2.0], grad=True)
        with pytest.raises(DimensionError):
            (x * 2).backward()

    def test_double_backward_accumulates(self):
        x = t64([0.5, -1.0, 2.0], grad=True)
        loss = (T.exp(x) * x).sum()
        loss.backward()
        once = x.grad.copy()
        loss.backward()
        np.testing.assert_allclose(x.grad, 2 * once, rtol=0, atol=0)

    def test_tape_reverse_execution_order(self):
        x = t64([1.0], grad=True)
        a = x * 2
        b = a + 1
        c = b * a
        tape = GradTape.from_output(c)
        seqs = [n._seq for n in tape.nodes]
        assert seqs == sorted(seqs)
        assert tape.nodes[0] is x and tape.nodes[-1] is c

    def test_no_grad_records_nothing(self):
        x = t64([1.0], grad=True)
        with no_grad():
            y = x * 3
        assert not y.requires_grad and y._parents == ()

    def test_composite_conv_softmax_mean(self):
        rng = np.random.default_rng(5)
        rep = finite_diff_gradcheck(
            lambda x, w: T.softmax(T.conv2d(x, w, padding=1), axis=1).mean(),
            [Tensor(rng.standard_normal((1, 2, 4, 4))), Tensor(rng.standard_normal((3, 2, 3, 3)))],
            name="conv-softmax-mean",
        )
        assert rep.passed, rep.line()


class TestGradcheck:
    def test_linear_layer_tight(self):
        rng = np.random.default_rng(0)
        rep = finite_diff_gradcheck(
            T.linear,
            [Tensor(rng.standard_normal((3, 4))), Tensor(rng.standard_normal((5, 4))), Tensor(rng.standard_normal(5))],
            probes=10,
            name="linear",
        )
        assert rep.max_rel_err < 1e-6

    def test_coordinate_mode(self):
        rng = np.random.default_rng(1)
        rep = finite_diff_gradcheck(T.gelu, [Tensor(rng.standard_normal((4, 4)))], mode="coordinate", probes=12)
        assert rep.passed and rep.probes == 12

    def test_detects_wrong_gradient(self):
        def bad(x):
            out = T.exp(x)
            out._backward = lambda g: (g * 0.5,)  # deliberately wrong
            return out

        rep = finite_diff_gradcheck(bad, [Tensor(np.ones(3))])
        assert not rep.passed

    @pytest.mark.parametrize("module", ["tensor", "losses"])
    def test_suite_passes(self, module):
        reports = run_suite(module)
        assert reports and all(r.passed for r in reports), [r.line() for r in reports if not r.passed]
