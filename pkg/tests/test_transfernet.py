import hashlib
import os
import tempfile
from unittest import TestCase

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from defectforge import diffcore
from defectforge.exceptions import EmptyRegion
from defectforge.exceptions import InputTooSmall
from defectforge.exceptions import ShapeMismatch
from defectforge.exceptions import WeightsMismatch
from defectforge.imagecore import Image
from defectforge.imagecore import RegionMask
from defectforge.imagecore import SoftMask
from defectforge.transfernet import TransferNet
from defectforge.transfernet import check_input
from defectforge.transfernet import init_transfer_net
from defectforge.transfernet import network_output
from defectforge.transfernet import transfer_forward
from tests.factories import random_image
from tests.factories import square_region


class InitTransferNetTests(TestCase):
    def test_parameter_counts(self):
        self.assertEqual(init_transfer_net(0, 'desk').params.count(), 354752)
        self.assertEqual(init_transfer_net(0, 'full').params.count(), 1400704)

    def test_unknown_scale(self):
        with self.assertRaises(ValueError):
            init_transfer_net(0, 'huge')

    def test_seeded(self):
        a, b = init_transfer_net(5), init_transfer_net(5)
        for name in a.params:
            assert_array_equal(a.params[name].value, b.params[name].value)
        self.assertFalse(np.array_equal(a.params['e1.weight'].value, init_transfer_net(6).params['e1.weight'].value))

    def test_trainable_float32(self):
        net = init_transfer_net(0)
        self.assertTrue(all(t.requires_grad and t.dtype == np.float32 for t in net.params.values()))
        assert_array_equal(net.params['e1.gamma'].value, np.ones(16))
        assert_array_equal(net.params['e1.beta'].value, np.zeros(16))
        self.assertNotIn('out2.gamma', net.params)


class NetworkOutputTests(TestCase):
    def setUp(self):
        super(NetworkOutputTests, self).setUp()
        self.net = init_transfer_net(1)
        self.image = random_image(2, 16, 16)

    def test_shape_and_range(self):
        out = network_output(self.net.frozen(), self.image)
        self.assertEqual(out.shape, (1, 3, 16, 16))
        self.assertGreaterEqual(out.value.min(), 0.0)
        self.assertLessEqual(out.value.max(), 1.0)

    def test_frozen_view_records_no_graph(self):
        frozen = self.net.frozen()
        self.assertFalse(network_output(frozen, self.image).requires_grad)
        self.assertTrue(all(t.requires_grad for t in self.net.params.values()))
        self.assertIs(frozen.params['e1.weight'].value, self.net.params['e1.weight'].value)

    def test_gradients_reach_every_parameter(self):
        diffcore.backward(diffcore.mean(network_output(self.net, self.image)))
        for name, t in self.net.params.items():
            self.assertIsNotNone(t.grad, name)


class CheckInputTests(TestCase):
    def test_grayscale(self):
        with self.assertRaises(ShapeMismatch):
            check_input(random_image(0, 16, 16, channels=1), square_region(16, 4, 4, 4))

    def test_side_not_multiple_of_four(self):
        with self.assertRaises(ShapeMismatch):
            check_input(random_image(0, 18, 16), square_region(16, 4, 4, 4))

    def test_too_small(self):
        with self.assertRaises(InputTooSmall):
            check_input(random_image(0, 4, 4), RegionMask(np.ones((4, 4), dtype=bool)))

    def test_region_shape(self):
        with self.assertRaises(ShapeMismatch):
            check_input(random_image(0, 16, 16), square_region(32, 4, 4, 4))

    def test_empty_region(self):
        with self.assertRaises(EmptyRegion):
            check_input(random_image(0, 16, 16), RegionMask(np.zeros((16, 16), dtype=bool)))


class TransferForwardTests(TestCase):
    def setUp(self):
        super(TransferForwardTests, self).setUp()
        self.net = init_transfer_net(3)
        self.S = random_image(4, 16, 16)
        self.matched = random_image(5, 16, 16)
        self.L = square_region(16, 4, 6, 6)

    def test_background_kept_outside_region(self):
        out = transfer_forward(self.net, self.matched, self.S, self.L)
        self.assertEqual(out.shape, self.S.shape)
        outside = ~self.L.bits
        assert_array_equal(out.data[outside], self.S.data[outside])
        self.assertFalse(np.array_equal(out.data[self.L.bits], self.S.data[self.L.bits]))

    def test_zero_weights_return_background(self):
        weights = SoftMask(np.zeros((16, 16)))
        self.assertEqual(transfer_forward(self.net, self.matched, self.S, self.L, weights=weights), self.S)

    def test_unit_weights_return_network_output(self):
        out = transfer_forward(self.net, self.matched, self.S, self.L, weights=SoftMask(np.ones((16, 16))))
        expected = Image.from_chw(network_output(self.net.frozen(), self.matched).value)
        assert_array_equal(out.data, expected.data)

    @pytest.mark.slow
    def test_output_sizes(self):
        for side in (64, 128, 256):
            S, matched = random_image(side, side, side), random_image(side + 1, side, side)
            L = square_region(side, side // 4, side // 4, side // 2)
            out = transfer_forward(self.net, matched, S, L)
            self.assertEqual(out.shape, (side, side, 3))
            self.assertGreaterEqual(out.data.min(), 0.0)
            self.assertLessEqual(out.data.max(), 1.0)

    def test_output_digest_repeats(self):
        def digest(seed):
            out = transfer_forward(init_transfer_net(seed), random_image(11, 64, 64), random_image(12, 64, 64),
                                   square_region(64, 16, 16, 24))
            return hashlib.sha256(np.ascontiguousarray(out.data).tobytes()).hexdigest()

        self.assertEqual(digest(0), digest(0))
        self.assertNotEqual(digest(0), digest(1))

    def test_matched_shape_mismatch(self):
        with self.assertRaises(ShapeMismatch):
            transfer_forward(self.net, random_image(5, 32, 32), self.S, self.L)

    def test_empty_region(self):
        with self.assertRaises(EmptyRegion):
            transfer_forward(self.net, self.matched, self.S, RegionMask(np.zeros((16, 16), dtype=bool)))


class TransferNetArchiveTests(TestCase):
    def setUp(self):
        super(TransferNetArchiveTests, self).setUp()
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.path = os.path.join(self.tmp.name, 'dst.dstw')

    def test_round_trip(self):
        net = init_transfer_net(7)
        net.save(self.path)
        loaded = TransferNet.load(self.path)
        image = random_image(8, 16, 16)
        assert_array_equal(network_output(net.frozen(), image).value, network_output(loaded.frozen(), image).value)

    def test_wrong_scale(self):
        init_transfer_net(7, 'desk').save(self.path)
        with self.assertRaises(WeightsMismatch):
            TransferNet.load(self.path, 'full')
