import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cosalign.numerics import (
    FormatError,
    ShapeError,
    Tensor,
    argmax_labels,
    bilinear_resize,
    conv2d,
    decode_tensor,
    encode_tensor,
    grad_check,
    leaky_relu,
    load_tensor,
    nearest_resize,
    precision,
    relu,
    save_tensor,
    softmax,
    softmax_cross_entropy,
    sum_all,
)


def conv_oracle(x, w, b, stride, pad):
    """Direct nested-loop cross-correlation."""
    c_in, h, wd = x.shape
    c_out, _, kh, kw = w.shape
    xp = np.zeros((c_in, h + 2 * pad, wd + 2 * pad))
    xp[:, pad : pad + h, pad : pad + wd] = x
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((c_out, oh, ow))
    for o in range(c_out):
        for i in range(oh):
            for j in range(ow):
                acc = b[o]
                for c in range(c_in):
                    for u in range(kh):
                        for v in range(kw):
                            acc += w[o, c, u, v] * xp[c, i * stride + u, j * stride + v]
                out[o, i, j] = acc
    return out


def bilinear_scalar(row, n_out):
    """Half-pixel-center linear interpolation of one row, one sample at a time."""
    n_in = len(row)
    out = []
    for d in range(n_out):
        s = (d + 0.5) * n_in / n_out - 0.5
        s = min(max(s, 0.0), n_in - 1)
        lo = int(math.floor(s))
        hi = min(lo + 1, n_in - 1)
        t = s - lo
        out.append(row[lo] * (1 - t) + row[hi] * t)
    return out


class TestTensor:
    def test_default_dtype_is_float32(self):
        assert Tensor([1.0, 2.0]).dtype == np.float32

    def test_precision_switch(self):
        with precision(np.float64):
            assert Tensor([1.0]).dtype == np.float64
        assert Tensor([1.0]).dtype == np.float32

    def test_backward_populates_every_requiring_node(self):
        x = Tensor(np.ones((2, 2)), requires_grad=True)
        y = relu(x)
        loss = sum_all(y)
        loss.backward()
        assert x.grad.shape == x.shape
        assert y.grad.shape == y.shape

    def test_shared_input_accumulates(self):
        x = Tensor([2.0, 3.0], requires_grad=True)
        (x + x).sum().backward()
        np.testing.assert_array_equal(x.grad, [2.0, 2.0])


class TestConv2d:
    def test_identity_kernel(self):
        x = Tensor(np.random.default_rng(0).normal(size=(1, 4, 5)))
        out = conv2d(x, Tensor(np.ones((1, 1, 1, 1))), Tensor(np.zeros(1)))
        np.testing.assert_array_equal(out.data, x.data)

    def test_ones_kernel_center(self):
        out = conv2d(Tensor(np.ones((1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), Tensor(np.zeros(1)), pad=1)
        assert out.data[0, 1, 1] == pytest.approx(9.0)
        assert out.data[0, 0, 0] == pytest.approx(4.0)

    @pytest.mark.parametrize("stride,pad,k", [(1, 0, 3), (2, 1, 3), (2, 1, 4), (1, 1, 1)])
    def test_matches_loop_oracle(self, stride, pad, k):
        rng = np.random.default_rng(stride * 10 + pad + k)
        x = rng.normal(size=(2, 7, 6))
        w = rng.normal(size=(3, 2, k, k))
        b = rng.normal(size=3)
        with precision(np.float64):
            got = conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, pad=pad).data
        np.testing.assert_allclose(got, conv_oracle(x, w, b, stride, pad), rtol=1e-12, atol=1e-12)

    def test_gradient_spec_case(self):
        x = Tensor(np.random.default_rng(3).normal(size=(1, 4, 5)))
        w = Tensor(np.random.default_rng(4).normal(size=(2, 1, 3, 3)))
        b = Tensor(np.zeros(2))
        report = grad_check(lambda x, w, b: sum_all(conv2d(x, w, b, pad=1)), [x, w, b], 1e-3, step=1e-3)
        assert report.passed, report.line()

    def test_channel_mismatch_names_dimension(self):
        with pytest.raises(ShapeError, match="channel"):
            conv2d(Tensor(np.ones((2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))), Tensor(np.zeros(1)))

    def test_output_too_small(self):
        with pytest.raises(ShapeError):
            conv2d(Tensor(np.ones((1, 2, 2))), Tensor(np.ones((1, 1, 3, 3))), Tensor(np.zeros(1)))


class TestActivations:
    def test_relu_values(self):
        np.testing.assert_array_equal(relu(Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])

    def test_relu_gradient_subgradient_zero(self):
        x = Tensor([-1.0, 0.0, 2.0], requires_grad=True)
        sum_all(relu(x)).backward()
        np.testing.assert_array_equal(x.grad, [0, 0, 1])

    def test_leaky_relu(self):
        x = Tensor([-1.0, 3.0], requires_grad=True)
        y = leaky_relu(x, 0.2)
        np.testing.assert_allclose(y.data, [-0.2, 3.0], rtol=1e-6)
        sum_all(y).backward()
        np.testing.assert_allclose(x.grad, [0.2, 1.0], rtol=1e-6)

    @pytest.mark.parametrize("slope", [0.0, 1.0, -0.1])
    def test_leaky_relu_rejects_slope(self, slope):
        with pytest.raises(ValueError):
            leaky_relu(Tensor([1.0]), slope)

    def test_softmax_sums_to_one(self):
        p = softmax(Tensor(np.random.default_rng(0).normal(size=(4, 3, 3)) * 50))
        np.testing.assert_allclose(p.data.sum(axis=0), 1.0, rtol=1e-6)


class TestResize:
    def test_bilinear_spec_row(self):
        out = bilinear_resize(Tensor(np.array([[[1.0, 3.0]]])), 1, 4)
        np.testing.assert_allclose(out.data[0, 0], bilinear_scalar([1.0, 3.0], 4), rtol=1e-6)
        np.testing.assert_allclose(out.data[0, 0], [1.0, 1.5, 2.5, 3.0], rtol=1e-6)

    def test_bilinear_matches_scalar_oracle_separably(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(1, 3, 5))
        with precision(np.float64):
            got = bilinear_resize(Tensor(x), 7, 9).data[0]
        rows = np.array([bilinear_scalar(r, 9) for r in x[0]])
        expected = np.array([bilinear_scalar(col, 7) for col in rows.T]).T
        np.testing.assert_allclose(got, expected, rtol=1e-12, atol=1e-12)

    def test_bilinear_identity(self):
        x = Tensor(np.random.default_rng(1).normal(size=(2, 4, 3)))
        np.testing.assert_array_equal(bilinear_resize(x, 4, 3).data, x.data)

    @given(st.floats(-5, 5), st.integers(1, 9), st.integers(1, 9), st.integers(1, 4), st.integers(1, 4))
    @settings(max_examples=40, deadline=None)
    def test_bilinear_preserves_constants(self, v, oh, ow, h, w):
        with precision(np.float64):
            out = bilinear_resize(Tensor(np.full((1, h, w), v)), oh, ow).data
        np.testing.assert_allclose(out, v, atol=1e-12)

    def test_bilinear_rejects_zero_size(self):
        with pytest.raises(ValueError):
            bilinear_resize(Tensor(np.ones((1, 2, 2))), 0, 3)

    def test_nearest_blocks(self):
        out = nearest_resize(np.array([[1, 2], [3, 4]]), 4, 4)
        np.testing.assert_array_equal(out, np.kron([[1, 2], [3, 4]], np.ones((2, 2), int)))

    def test_nearest_floor_index(self):
        np.testing.assert_array_equal(nearest_resize(np.array([[1, 2, 3, 4]]), 1, 2), [[1, 3]])

    @given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 3), st.integers(1, 3), st.integers(0, 2**31))
    @settings(max_examples=40, deadline=None)
    def test_nearest_up_then_down_is_identity(self, h, w, fy, fx, seed):
        y = np.random.default_rng(seed).integers(0, 6, size=(h, w))
        np.testing.assert_array_equal(nearest_resize(nearest_resize(y, h * fy, w * fx), h, w), y)


class TestCrossEntropy:
    def test_uniform_two_class(self):
        target = np.array([[1, 0]])
        loss = softmax_cross_entropy(Tensor(np.zeros((2, 1, 2))), target)
        assert loss.item() == pytest.approx(math.log(2), rel=1e-6)

    def test_all_ignored(self):
        logits = Tensor(np.random.default_rng(0).normal(size=(3, 2, 2)), requires_grad=True)
        loss = softmax_cross_entropy(logits, np.zeros((2, 2), int))
        loss.backward()
        assert loss.item() == 0.0
        assert not logits.grad.any()

    def test_gradient(self):
        rng = np.random.default_rng(5)
        target = rng.integers(0, 4, size=(2, 2))
        report = grad_check(lambda t: softmax_cross_entropy(t, target), [Tensor(rng.normal(size=(3, 2, 2)))],
                            1e-3, step=1e-3)
        assert report.passed, report.line()

    def test_label_out_of_range(self):
        with pytest.raises(ValueError):
            softmax_cross_entropy(Tensor(np.zeros((2, 1, 1))), np.array([[3]]))

    @given(st.integers(0, 2**31))
    @settings(max_examples=30, deadline=None)
    def test_nonnegative(self, seed):
        rng = np.random.default_rng(seed)
        loss = softmax_cross_entropy(Tensor(rng.normal(size=(3, 2, 3)) * 5), rng.integers(0, 4, size=(2, 3)))
        assert loss.item() >= 0.0

    def test_zero_when_confident(self):
        logits = np.full((2, 1, 1), -1e4)
        logits[1] = 1e4
        assert softmax_cross_entropy(Tensor(logits), np.array([[2]])).item() == 0.0


class TestArgmax:
    def test_lowest_index_wins_ties(self):
        np.testing.assert_array_equal(argmax_labels(np.zeros((3, 2, 2))), np.ones((2, 2)))

    def test_one_based(self):
        s = np.zeros((3, 1, 1))
        s[2] = 1.0
        assert argmax_labels(s)[0, 0] == 3


class TestGradCheck:
    def test_sum_is_exact(self):
        report = grad_check(sum_all, [Tensor(np.random.default_rng(0).normal(size=(3, 3)))])
        assert report.max_rel_err == pytest.approx(0.0, abs=1e-9)
        assert report.passed

    def test_relu_positive(self):
        x = Tensor(np.random.default_rng(0).uniform(0.5, 2.0, size=5))
        assert grad_check(lambda t: sum_all(relu(t)), [x]).passed

    def test_wrong_gradient_fails(self):
        def bad(t):
            return Tensor.from_op(np.array(t.data.sum() * 2), (t,), lambda g: (np.full(t.shape, g),))

        report = grad_check(bad, [Tensor(np.ones(3))])
        assert not report.passed
        assert report.max_rel_err == pytest.approx(0.5, rel=1e-6)

    def test_non_finite_is_failure_not_crash(self):
        def blowup(t):
            return Tensor.from_op(np.array(np.inf), (t,), lambda g: (np.zeros(t.shape),))

        report = grad_check(blowup, [Tensor(np.ones(2))])
        assert not report.passed
        assert report.passed == (report.max_rel_err <= report.tolerance)

    def test_inputs_restored(self):
        x = Tensor(np.array([1.5, -2.0], np.float32))
        grad_check(sum_all, [x])
        assert x.dtype == np.float32
        assert x.grad is None and not x.requires_grad

    def test_non_contiguous_input(self):
        x = Tensor(np.arange(6.0).reshape(2, 3).T)
        w = np.random.default_rng(0).normal(size=(3, 2))
        f = lambda t: sum_all(Tensor.from_op(t.data * w, (t,), lambda g: (g * w,)))  # noqa: E731
        assert grad_check(f, [x]).passed

    @pytest.mark.parametrize("seed", range(10))
    def test_primitives_across_seeds(self, seed):
        from cosalign.harness.gradchecks import primitive_checks

        failures = [r.line() for r in primitive_checks(seed) if not r.passed]
        assert not failures


class TestTensorIO:
    def test_round_trip(self, tmp_path):
        arr = np.random.default_rng(0).normal(size=(2, 3, 4)).astype(np.float32)
        save_tensor(tmp_path / "t.bin", arr)
        np.testing.assert_array_equal(load_tensor(tmp_path / "t.bin"), arr)

    def test_layout(self):
        buf = encode_tensor(np.array([[1.0, 2.0]], np.float32))
        assert buf[:6] == b"FTNSR1"
        assert buf[6] == 2
        assert buf[7:15] == (1).to_bytes(4, "little") + (2).to_bytes(4, "little")
        assert np.frombuffer(buf[15:], "<f4").tolist() == [1.0, 2.0]

    def test_bad_magic(self):
        with pytest.raises(FormatError):
            decode_tensor(b"XXXXXX\x00" + b"\x00" * 4)

    def test_truncated(self):
        buf = encode_tensor(np.ones(4, np.float32))
        with pytest.raises(FormatError):
            decode_tensor(buf[:-2])
