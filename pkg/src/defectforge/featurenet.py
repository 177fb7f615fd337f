"""
The fixed convolutional feature extractor behind every perceptual loss.

The default extractor is a seeded random-weight CNN; a VGG-style network
converted to the tensor archive format can be loaded instead, provided its
layers match the declared :class:`ExtractorSpec`.

Classes:
========
    ExtractorSpec
    FeatureExtractor
    FeatureStack

Functions:
==========
    build_extractor
    extract

Miscellaneous objects:
======================
    Except the above, all other objects in this module are to be considered implementation details.
"""

import logging

import numpy as np

from . import diffcore
from .exceptions import InputTooSmall
from .exceptions import UnknownTap
from .exceptions import WeightsMismatch

logger = logging.getLogger(__name__)

MIN_INPUT_SIDE = 8


class ExtractorSpec(object):
    """
    Layer schedule of a :class:`FeatureExtractor`.

    *channels* and *strides* give one entry per 3x3 convolution (each
    followed by a ReLU); *taps* maps tap names to 1-based layer numbers.
    """

    def __init__(self, channels=(8, 8, 16, 16, 32, 32, 64, 64), strides=(1, 1, 2, 1, 2, 1, 2, 1),
                 taps=None, in_channels=3, kernel=3):
        if len(channels) != len(strides):
            raise ValueError('channels and strides must have the same length')
        self.channels = tuple(int(c) for c in channels)
        self.strides = tuple(int(s) for s in strides)
        self.taps = dict(taps or {'t1': 1, 't2': 3, 't3': 5, 't4': 7})
        self.in_channels = int(in_channels)
        self.kernel = int(kernel)
        for name, layer in self.taps.items():
            if not 1 <= layer <= len(self.channels):
                raise ValueError('tap {} points at missing layer {}'.format(name, layer))
        if len(set(self.taps.values())) != len(self.taps):
            raise ValueError('two taps share a layer')

    def layer_names(self):
        return ['conv{}'.format(i + 1) for i in range(len(self.channels))]

    def kernel_shapes(self):
        shapes = []
        previous = self.in_channels
        for out in self.channels:
            shapes.append((out, previous, self.kernel, self.kernel))
            previous = out
        return shapes

    def as_dict(self):
        return {
            'channels': list(self.channels),
            'strides': list(self.strides),
            'taps': dict(self.taps),
            'in_channels': self.in_channels,
            'kernel': self.kernel,
        }


class FeatureExtractor(object):
    """
    An immutable stack of bias-free ``conv2d_reflect`` + ReLU layers.

    Its weights never require gradients, so concurrent :meth:`extract`
    calls are safe and gradients only ever reach the input image.
    """

    def __init__(self, spec, weights):
        self.spec = spec
        self.weights = weights.freeze()

    def tap_shape(self, tap, height, width):
        """
        Returns the ``(C, H, W)`` activation shape of *tap* for an input of
        the given size.
        """
        layer = self._layer(tap)
        for stride in self.spec.strides[:layer]:
            height = (height - 1) // stride + 1
            width = (width - 1) // stride + 1
        return self.spec.channels[layer - 1], height, width

    def _layer(self, tap):
        try:
            return self.spec.taps[tap]
        except KeyError:
            raise UnknownTap('unknown tap {!r}; known taps are {}'.format(tap, sorted(self.spec.taps)))

    def extract(self, image, taps):
        """
        Runs *image* (a ``1 x C x H x W`` :class:`~defectforge.diffcore.Tensor`)
        through the layers needed for *taps* and returns a
        :class:`FeatureStack`.
        """
        layers = {tap: self._layer(tap) for tap in taps}
        height, width = image.shape[-2:]
        if height < MIN_INPUT_SIDE or width < MIN_INPUT_SIDE:
            raise InputTooSmall('extractor input must be at least {0}x{0}, got {1}x{2}'.format(
                MIN_INPUT_SIDE, height, width))

        by_layer = {layer: tap for tap, layer in layers.items()}
        deepest = max(layers.values()) if layers else 0
        stack = FeatureStack()
        x = image
        for index, (name, stride) in enumerate(zip(self.spec.layer_names(), self.spec.strides), start=1):
            if index > deepest:
                break
            x = diffcore.relu(diffcore.conv2d_reflect(x, self.weights[name], stride))
            if index in by_layer:
                stack[by_layer[index]] = x
        return stack

    def save(self, path):
        self.weights.save(path)


class FeatureStack(dict):
    """
    Mapping of tap name to its ``1 x C x H x W`` activation tensor.
    """


def _seeded_weights(spec, seed):
    rng = np.random.default_rng(seed)
    weights = diffcore.ParameterSet()
    for name, shape in zip(spec.layer_names(), spec.kernel_shapes()):
        fan_in = shape[1] * shape[2] * shape[3]
        value = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        weights[name] = diffcore.tensor(value, name=name)
    return weights


def build_extractor(mode='seeded', seed=0, path=None, spec=None):
    """
    Builds the feature extractor.

    ``mode='seeded'`` draws every kernel from ``N(0, 2 / fan_in)`` with a
    generator seeded by *seed*. ``mode='archive'`` reads the kernels
    ``conv1 .. convN`` from the tensor archive at *path*.

    :rtype: FeatureExtractor
    """
    spec = spec or ExtractorSpec()
    weights = _seeded_weights(spec, seed)
    if mode == 'archive':
        if path is None:
            raise ValueError('archive mode needs a path')
        arrays = diffcore.load_archive(path)
        weights.load_arrays(arrays)
        extra = set(arrays) - set(weights)
        if extra:
            raise WeightsMismatch('archive holds unexpected tensors: {}'.format(', '.join(sorted(extra))))
        logger.info('Loaded feature extractor weights from %s', path)
    elif mode != 'seeded':
        raise ValueError('unknown extractor mode {!r}'.format(mode))
    return FeatureExtractor(spec, weights)


def extract(fx, image, taps):
    return fx.extract(image, taps)
