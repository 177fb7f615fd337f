import os
import struct
import tempfile
from unittest import TestCase
from unittest import mock

import numpy as np
from numpy.testing import assert_allclose
from numpy.testing import assert_array_equal

from defectforge import diffcore
from defectforge.exceptions import IoError
from defectforge.exceptions import NonFiniteValue
from defectforge.exceptions import NotScalar
from defectforge.exceptions import ShapeMismatch
from defectforge.exceptions import UnsupportedKernel
from defectforge.exceptions import WeightsMismatch


def _reflect(i, n):
    i = abs(i)
    return 2 * (n - 1) - i if i >= n else i


def _conv_oracle(x, kernel, stride=1):
    n, c, h, w = x.shape
    o, _, k, _ = kernel.shape
    pad = k // 2
    oh, ow = -(-h // stride), -(-w // stride)
    out = np.zeros((n, o, oh, ow))
    for b in range(n):
        for oc in range(o):
            for y in range(oh):
                for x_ in range(ow):
                    acc = 0.0
                    for ic in range(c):
                        for i in range(k):
                            for j in range(k):
                                yy = _reflect(y * stride + i - pad, h)
                                xx = _reflect(x_ * stride + j - pad, w)
                                acc += kernel[oc, ic, i, j] * x[b, ic, yy, xx]
                    out[b, oc, y, x_] = acc
    return out


def _weighted(op, weights):
    """
    Scalar test function ``sum(op(x) * weights)``.
    """
    return lambda x: diffcore.total(diffcore.mul(op(x), diffcore.constant(weights)))


class TensorTests(TestCase):
    def test_non_finite_rejected(self):
        with self.assertRaises(NonFiniteValue):
            diffcore.tensor([1.0, np.nan])

    def test_no_graph_without_gradients(self):
        a, b = diffcore.tensor([1.0, 2.0]), diffcore.tensor([3.0, 4.0])
        result = a * b
        self.assertFalse(result.requires_grad)
        self.assertEqual(result._parents, ())

    def test_operators(self):
        a = diffcore.tensor([1.0, 2.0], dtype=np.float64)
        assert_array_equal((a + 1.0).value, [2.0, 3.0])
        assert_array_equal((a - a).value, [0.0, 0.0])
        assert_array_equal((2.0 * a).value, [2.0, 4.0])
        assert_array_equal((-a).value, [-1.0, -2.0])


class PrimitiveTests(TestCase):
    def test_relu(self):
        assert_array_equal(diffcore.relu(diffcore.tensor([-2.0, 3.0])).value, [0.0, 3.0])

    def test_tanh(self):
        self.assertEqual(diffcore.tanh(diffcore.tensor([0.0])).value[0], 0.0)

    def test_upsample_replicates_blocks(self):
        x = diffcore.tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2))
        expected = np.array([
            [1, 1, 2, 2],
            [1, 1, 2, 2],
            [3, 3, 4, 4],
            [3, 3, 4, 4],
        ], dtype=float).reshape(1, 1, 4, 4)
        assert_array_equal(diffcore.upsample2x(x).value, expected)

    def test_concat_and_crop(self):
        a = diffcore.tensor(np.zeros((1, 2, 4, 4)))
        b = diffcore.tensor(np.ones((1, 3, 4, 4)))
        joined = diffcore.concat([a, b], axis=1)
        self.assertEqual(joined.shape, (1, 5, 4, 4))
        self.assertEqual(diffcore.crop(joined, 1, 2, 3, 2).shape, (1, 5, 3, 2))

    def test_concat_shape_mismatch(self):
        with self.assertRaises(ShapeMismatch):
            diffcore.concat([diffcore.tensor(np.zeros((1, 2, 4, 4))), diffcore.tensor(np.zeros((1, 2, 4, 5)))])

    def test_crop_outside(self):
        with self.assertRaises(ShapeMismatch):
            diffcore.crop(diffcore.tensor(np.zeros((1, 1, 4, 4))), 2, 0, 3, 4)

    def test_elementwise_shape_mismatch(self):
        with self.assertRaises(ShapeMismatch):
            diffcore.add(diffcore.tensor([1.0, 2.0]), diffcore.tensor([1.0]))

    def test_matmul(self):
        a = diffcore.tensor([[1.0, 2.0]])
        b = diffcore.tensor([[3.0], [4.0]])
        assert_array_equal(diffcore.matmul(a, b).value, [[11.0]])
        with self.assertRaises(ShapeMismatch):
            diffcore.matmul(a, a)

    def test_log_softmax_rows_normalize(self):
        x = diffcore.tensor(np.random.default_rng(0).normal(size=(1, 3, 2, 2)), dtype=np.float64)
        assert_allclose(np.exp(diffcore.log_softmax(x, axis=1).value).sum(axis=1), 1.0)

    def test_add_bias(self):
        x = diffcore.tensor(np.zeros((1, 2, 2, 2)), dtype=np.float64)
        out = diffcore.add_bias(x, diffcore.tensor([1.0, -1.0], dtype=np.float64))
        assert_array_equal(out.value[0, 0], np.ones((2, 2)))
        assert_array_equal(out.value[0, 1], -np.ones((2, 2)))
        with self.assertRaises(ShapeMismatch):
            diffcore.add_bias(x, diffcore.tensor([1.0]))


class Conv2dReflectTests(TestCase):
    def test_identity_kernel(self):
        x = np.random.default_rng(1).normal(size=(1, 3, 5, 6))
        kernel = np.eye(3).reshape(3, 3, 1, 1)
        out = diffcore.conv2d_reflect(diffcore.constant(x), diffcore.constant(kernel))
        assert_allclose(out.value, x, rtol=0, atol=1e-12)

    def test_constant_input_under_averaging_kernel(self):
        x = np.full((1, 1, 6, 6), 0.37)
        kernel = np.full((1, 1, 3, 3), 1.0 / 9)
        out = diffcore.conv2d_reflect(diffcore.constant(x), diffcore.constant(kernel))
        assert_allclose(out.value, 0.37, atol=1e-12)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(2)
        x, kernel = rng.normal(size=(1, 1, 4, 4)), rng.normal(size=(1, 1, 3, 3))
        out = diffcore.conv2d_reflect(diffcore.constant(x), diffcore.constant(kernel))
        assert_allclose(out.value, _conv_oracle(x, kernel), atol=1e-6)

    def test_strided_batch_matches_loop_oracle(self):
        rng = np.random.default_rng(3)
        x, kernel = rng.normal(size=(2, 2, 5, 7)), rng.normal(size=(3, 2, 5, 5))
        out = diffcore.conv2d_reflect(diffcore.constant(x), diffcore.constant(kernel), stride=2)
        self.assertEqual(out.shape, (2, 3, 3, 4))
        assert_allclose(out.value, _conv_oracle(x, kernel, stride=2), atol=1e-9)

    def test_row_blocks_match_single_block(self):
        rng = np.random.default_rng(4)
        x_value, k_value = rng.normal(size=(2, 3, 6, 5)), rng.normal(size=(2, 3, 5, 5))
        results = []
        for limit in (diffcore.PATCH_LIMIT, 40):
            with mock.patch.object(diffcore, 'PATCH_LIMIT', limit):
                self.assertEqual(len(diffcore._row_blocks(5, 2 * 3 * 3 * 3 * 5)), 1 if limit > 40 else 5)
                x = diffcore.tensor(x_value, requires_grad=True, dtype=np.float64)
                kernel = diffcore.tensor(k_value, requires_grad=True, dtype=np.float64)
                out = diffcore.conv2d_reflect(x, kernel, stride=2)
                diffcore.backward(diffcore.total(diffcore.square(out)))
                results.append((out.value, x.grad, kernel.grad))
        for first, second in zip(*results):
            assert_allclose(first, second, rtol=1e-12, atol=1e-12)
        assert_allclose(results[0][0], _conv_oracle(x_value, k_value, stride=2), atol=1e-9)

    def test_stride_one_preserves_shape(self):
        x = diffcore.constant(np.zeros((1, 2, 8, 8)))
        for k in (1, 3, 5, 7, 9):
            out = diffcore.conv2d_reflect(x, diffcore.constant(np.zeros((4, 2, k, k))))
            self.assertEqual(out.shape, (1, 4, 8, 8))

    def test_even_kernel(self):
        with self.assertRaises(UnsupportedKernel):
            diffcore.conv2d_reflect(diffcore.constant(np.zeros((1, 1, 4, 4))), diffcore.constant(np.zeros((1, 1, 2, 2))))

    def test_channel_mismatch(self):
        with self.assertRaises(ShapeMismatch):
            diffcore.conv2d_reflect(diffcore.constant(np.zeros((1, 2, 4, 4))), diffcore.constant(np.zeros((1, 3, 3, 3))))


class InstanceNormTests(TestCase):
    def _norm(self, x, gamma=1.0, beta=0.0):
        c = x.shape[1]
        return diffcore.instance_norm(
            diffcore.constant(x),
            diffcore.constant(np.full(c, gamma)),
            diffcore.constant(np.full(c, beta)),
        ).value

    def test_constant_channel(self):
        assert_array_equal(self._norm(np.full((1, 1, 3, 3), 4.0)), np.zeros((1, 1, 3, 3)))

    def test_constant_channel_takes_shift(self):
        assert_allclose(self._norm(np.full((1, 1, 3, 3), 4.0), beta=0.7), 0.7)

    def test_plus_minus_one(self):
        x = np.array([-1.0, 1.0, -1.0, 1.0]).reshape(1, 1, 2, 2)
        assert_allclose(self._norm(x), x / np.sqrt(1 + 1e-5), rtol=1e-12)

    def test_statistics_are_per_sample(self):
        x = np.stack([np.full((1, 2, 2), 3.0), np.array([[[0.0, 2.0], [0.0, 2.0]]])])
        out = self._norm(x)
        assert_array_equal(out[0], np.zeros((1, 2, 2)))
        assert_allclose(np.abs(out[1]), 1 / np.sqrt(1 + 1e-5))


class BackwardTests(TestCase):
    def test_sum_gives_ones(self):
        x = diffcore.tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        diffcore.backward(diffcore.total(x))
        assert_array_equal(x.grad, np.ones((2, 3)))

    def test_sum_of_squares(self):
        x = diffcore.tensor([1.0, 2.0, 3.0], requires_grad=True, dtype=np.float64)
        diffcore.backward(diffcore.total(diffcore.square(x)))
        assert_array_equal(x.grad, [2.0, 4.0, 6.0])

    def test_shared_input_accumulates(self):
        x = diffcore.tensor([1.0, 2.0], requires_grad=True, dtype=np.float64)
        diffcore.backward(diffcore.total(diffcore.mul(x, x)))
        assert_array_equal(x.grad, [2.0, 4.0])

    def test_non_scalar(self):
        x = diffcore.tensor([1.0, 2.0], requires_grad=True)
        with self.assertRaises(NotScalar):
            diffcore.backward(x)

    def test_deterministic(self):
        grads = []
        for _ in range(2):
            rng = np.random.default_rng(4)
            x = diffcore.tensor(rng.normal(size=(1, 2, 6, 6)), requires_grad=True)
            kernel = diffcore.tensor(rng.normal(size=(3, 2, 3, 3)), requires_grad=True)
            diffcore.backward(diffcore.mean(diffcore.relu(diffcore.conv2d_reflect(x, kernel, 2))))
            grads.append((x.grad, kernel.grad))
        assert_array_equal(grads[0][0], grads[1][0])
        assert_array_equal(grads[0][1], grads[1][1])


class GradCheckTests(TestCase):
    def setUp(self):
        super(GradCheckTests, self).setUp()
        self.rng = np.random.default_rng(5)

    def positive(self, *shape):
        return self.rng.uniform(0.5, 1.5, size=shape)

    def test_quadratic(self):
        point = diffcore.tensor(self.rng.normal(size=(3, 4)), dtype=np.float64)
        error = diffcore.grad_check(lambda x: diffcore.total(diffcore.square(x)), point, 1e-5)
        self.assertLess(error, 1e-6)

    def test_composite_network(self):
        kernel = diffcore.constant(self.rng.normal(size=(2, 2, 3, 3)))
        gamma = diffcore.constant(self.positive(2))
        beta = diffcore.constant(self.rng.normal(size=2))
        weights = self.positive(1, 2, 4, 4)

        def fn(x):
            y = diffcore.relu(diffcore.instance_norm(diffcore.conv2d_reflect(x, kernel), gamma, beta))
            return diffcore.mean(diffcore.mul(y, diffcore.constant(weights)))

        point = diffcore.tensor(self.rng.normal(size=(1, 2, 4, 4)), dtype=np.float64)
        self.assertLess(diffcore.grad_check(fn, point), 1e-4)

    def test_linear_primitives(self):
        w4 = self.positive(1, 2, 4, 4)
        cases = [
            (lambda x: diffcore.add(x, x), w4, (1, 2, 4, 4)),
            (lambda x: diffcore.sub(diffcore.scale(x, 3.0), x), w4, (1, 2, 4, 4)),
            (lambda x: diffcore.shift(x, 2.0), w4, (1, 2, 4, 4)),
            (diffcore.upsample2x, self.positive(1, 2, 8, 8), (1, 2, 4, 4)),
            (lambda x: diffcore.crop(x, 1, 1, 2, 3), self.positive(1, 2, 2, 3), (1, 2, 4, 4)),
            (lambda x: diffcore.concat([x, diffcore.scale(x, 2.0)], axis=1), self.positive(1, 4, 4, 4), (1, 2, 4, 4)),
            (lambda x: diffcore.reshape(x, (2, 16)), self.positive(2, 16), (1, 2, 4, 4)),
            (lambda x: diffcore.transpose(x), self.positive(4, 3), (3, 4)),
        ]
        for op, weights, shape in cases:
            point = diffcore.tensor(self.rng.normal(size=shape), dtype=np.float64)
            self.assertLess(diffcore.grad_check(_weighted(op, weights), point), 1e-6)

    def test_smooth_primitives(self):
        other = diffcore.constant(self.positive(1, 2, 4, 4))
        right = diffcore.constant(self.positive(4, 3))
        cases = [
            (lambda x: diffcore.mul(x, other), self.positive(1, 2, 4, 4), self.positive(1, 2, 4, 4)),
            (diffcore.square, self.positive(1, 2, 4, 4), self.positive(1, 2, 4, 4)),
            (diffcore.tanh, self.positive(1, 2, 4, 4), self.rng.uniform(-1, 1, size=(1, 2, 4, 4))),
            (lambda x: diffcore.matmul(x, right), self.positive(2, 3), self.positive(2, 4)),
        ]
        for op, weights, value in cases:
            point = diffcore.tensor(value, dtype=np.float64)
            self.assertLess(diffcore.grad_check(_weighted(op, weights), point), 1e-6)

    def test_log_softmax(self):
        onehot = np.eye(3)[self.rng.integers(0, 3, size=(4, 4))].transpose(2, 0, 1)[None]
        point = diffcore.tensor(self.rng.uniform(-1, 1, size=(1, 3, 4, 4)), dtype=np.float64)
        fn = _weighted(lambda x: diffcore.log_softmax(x, axis=1), onehot)
        self.assertLess(diffcore.grad_check(fn, point), 1e-6)

    def test_conv_input_and_kernel(self):
        kernel = self.positive(2, 2, 3, 3)
        x = self.positive(1, 2, 5, 5)
        weights = self.positive(1, 2, 3, 3)

        by_input = _weighted(lambda t: diffcore.conv2d_reflect(t, diffcore.constant(kernel), 2), weights)
        by_kernel = _weighted(lambda t: diffcore.conv2d_reflect(diffcore.constant(x), t, 2), weights)

        self.assertLess(diffcore.grad_check(by_input, diffcore.tensor(x, dtype=np.float64)), 1e-6)
        self.assertLess(diffcore.grad_check(by_kernel, diffcore.tensor(kernel, dtype=np.float64)), 1e-6)

    def test_bias(self):
        x = diffcore.constant(self.rng.normal(size=(1, 3, 2, 2)))
        fn = _weighted(lambda b: diffcore.add_bias(x, b), self.positive(1, 3, 2, 2))
        self.assertLess(diffcore.grad_check(fn, diffcore.tensor(self.rng.normal(size=3), dtype=np.float64)), 1e-6)


class AdamTests(TestCase):
    def test_zero_gradient_keeps_parameters(self):
        params = [np.array([1.0, -2.0])]
        updated, state = diffcore.adam_step(params, [np.zeros(2)], diffcore.AdamState())
        assert_array_equal(updated[0], params[0])
        self.assertEqual(state.step, 1)

    def test_first_step(self):
        updated, _ = diffcore.adam_step([np.zeros(4)], [np.ones(4)], diffcore.AdamState(lr=1e-3))
        assert_allclose(updated[0], -1e-3 / (1 + 1e-8), rtol=1e-9)

    def test_descends_quadratic(self):
        x, state = np.array([1.0]), diffcore.AdamState()
        previous = abs(x[0])
        for _ in range(100):
            (x,), state = diffcore.adam_step([x], [2 * x], state)
            self.assertLess(abs(x[0]), previous)
            previous = abs(x[0])

    def test_shape_mismatch(self):
        with self.assertRaises(ShapeMismatch):
            diffcore.adam_step([np.zeros(3)], [np.zeros(2)], diffcore.AdamState())

    def test_optimizer_updates_trainable_tensors(self):
        params = diffcore.ParameterSet()
        params['w'] = diffcore.tensor([1.0, 1.0], requires_grad=True)
        params['frozen'] = diffcore.tensor([5.0])
        optimizer = diffcore.Adam(params, lr=0.1)
        diffcore.backward(diffcore.total(diffcore.square(params['w'])))
        optimizer.step()
        self.assertTrue(np.all(params['w'].value < 1.0))
        assert_array_equal(params['frozen'].value, [5.0])


class ArchiveTests(TestCase):
    def setUp(self):
        super(ArchiveTests, self).setUp()
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.path = os.path.join(self.tmp.name, 'weights.dstw')

    def test_round_trip_is_bit_exact(self):
        rng = np.random.default_rng(6)
        arrays = {
            'conv.weight': rng.normal(size=(4, 3, 3, 3)).astype(np.float32),
            'conv.bias': rng.normal(size=4).astype(np.float32),
            'scalar': np.float32(2.5).reshape(()),
        }
        diffcore.save_archive(self.path, arrays)
        loaded = diffcore.load_archive(self.path)
        self.assertEqual(list(loaded), list(arrays))
        for name, array in arrays.items():
            assert_array_equal(loaded[name], array)
            self.assertEqual(loaded[name].dtype, np.float32)

    def test_layout(self):
        diffcore.save_archive(self.path, {'ab': np.array([1.0, 2.0], dtype=np.float32)})
        with open(self.path, 'rb') as fh:
            payload = fh.read()
        expected = b'DSTW1' + struct.pack('<IH', 1, 2) + b'ab' + struct.pack('<BI', 1, 2) + struct.pack('<2f', 1, 2)
        self.assertEqual(payload, expected)

    def test_bad_magic(self):
        with open(self.path, 'wb') as fh:
            fh.write(b'NOPE!')
        with self.assertRaises(IoError):
            diffcore.load_archive(self.path)

    def test_truncated(self):
        diffcore.save_archive(self.path, {'w': np.zeros((8, 8), dtype=np.float32)})
        with open(self.path, 'rb') as fh:
            payload = fh.read()
        with open(self.path, 'wb') as fh:
            fh.write(payload[:-10])
        with self.assertRaises(IoError):
            diffcore.load_archive(self.path)

    def test_parameter_set_rejects_missing_tensor(self):
        params = diffcore.ParameterSet()
        params['a'] = diffcore.tensor(np.zeros(2))
        params['b'] = diffcore.tensor(np.zeros(2))
        with self.assertRaises(WeightsMismatch):
            params.load_arrays({'a': np.ones(2)})

    def test_parameter_set_rejects_wrong_shape(self):
        params = diffcore.ParameterSet()
        params['a'] = diffcore.tensor(np.zeros(2))
        with self.assertRaises(WeightsMismatch):
            params.load_arrays({'a': np.ones(3)})
