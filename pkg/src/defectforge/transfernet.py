"""
The feed-forward transfer network and the region fusion of its output.

Schedule (full scale; desk scale halves every channel count)::

    E1   conv 3->32   k9 s1  + IN + ReLU         (skip source)
    E2   conv 32->64  k3 s2  + IN + ReLU
    E3   conv 64->128 k3 s2  + IN + ReLU
    R1..R4 residual blocks at 128 channels
    D1   upsample x2 + conv 128->64 k3 + IN + ReLU
    D2   upsample x2 + conv 64->32  k3 + IN + ReLU
    concat(E1, D2) -> conv 64->32 k3 + IN + ReLU -> conv 32->3 k9 -> tanh
"""

import numpy as np

from . import diffcore
from .exceptions import InputTooSmall
from .exceptions import ShapeMismatch
from .imagecore import Image
from .imagecore import compose_region
from .imagecore import gaussian_fusion_mask

SCALES = ('desk', 'full')
RESIDUAL_BLOCKS = 4


def _layer_table(scale):
    if scale not in SCALES:
        raise ValueError('unknown scale {!r}; expected one of {}'.format(scale, SCALES))
    div = 2 if scale == 'desk' else 1
    c1, c2, c3 = 32 // div, 64 // div, 128 // div
    # name, in, out, kernel, stride, normalized
    table = [
        ('e1', 3, c1, 9, 1, True),
        ('e2', c1, c2, 3, 2, True),
        ('e3', c2, c3, 3, 2, True),
    ]
    for block in range(1, RESIDUAL_BLOCKS + 1):
        table.append(('res{}.a'.format(block), c3, c3, 3, 1, True))
        table.append(('res{}.b'.format(block), c3, c3, 3, 1, True))
    table += [
        ('d1', c3, c2, 3, 1, True),
        ('d2', c2, c1, 3, 1, True),
        ('out1', 2 * c1, c1, 3, 1, True),
        ('out2', c1, 3, 9, 1, False),
    ]
    return table


class TransferNet(object):
    """
    Parameters of the transfer network together with its layer schedule.

    :attr:`params` is a :class:`~defectforge.diffcore.ParameterSet` whose
    names (``e1.weight``, ``e1.gamma``, ``e1.beta`` ...) double as the
    archive manifest.
    """

    def __init__(self, scale, params):
        self.scale = scale
        self.params = params
        self.layers = _layer_table(scale)
        self.strides = {name: stride for name, _, _, _, stride, _ in self.layers}

    def _conv(self, x, name, normalized=True, activate=True):
        x = diffcore.conv2d_reflect(x, self.params[name + '.weight'], self.strides[name])
        if normalized:
            x = diffcore.instance_norm(x, self.params[name + '.gamma'], self.params[name + '.beta'])
            if activate:
                x = diffcore.relu(x)
        return x

    def __call__(self, x):
        """
        Maps a ``1 x 3 x H x W`` tensor in ``[-1, 1]`` to the tanh output of
        the same shape.
        """
        e1 = self._conv(x, 'e1')
        x = self._conv(e1, 'e2')
        x = self._conv(x, 'e3')
        for block in range(1, RESIDUAL_BLOCKS + 1):
            y = self._conv(x, 'res{}.a'.format(block))
            y = self._conv(y, 'res{}.b'.format(block), activate=False)
            x = diffcore.add(x, y)
        x = self._conv(diffcore.upsample2x(x), 'd1')
        x = self._conv(diffcore.upsample2x(x), 'd2')
        x = self._conv(diffcore.concat([e1, x], axis=1), 'out1')
        x = self._conv(x, 'out2', normalized=False)
        return diffcore.tanh(x)

    def frozen(self):
        """
        Returns a view of this network whose parameters share the arrays but
        never record a graph; safe to use from several threads.
        """
        params = diffcore.ParameterSet((name, diffcore.Tensor(t.value)) for name, t in self.params.items())
        return TransferNet(self.scale, params)

    def save(self, path):
        self.params.save(path)

    @classmethod
    def load(cls, path, scale='desk'):
        net = init_transfer_net(0, scale)
        net.params.load_arrays(diffcore.load_archive(path))
        return net


def init_transfer_net(seed, scale='desk'):
    """
    Builds a freshly initialized network: kernels from ``N(0, 2 / fan_in)``
    drawn in schedule order from a generator seeded by *seed*, instance-norm
    scales at 1 and shifts at 0.

    :rtype: TransferNet
    """
    rng = np.random.default_rng(seed)
    params = diffcore.ParameterSet()
    for name, in_c, out_c, k, _, normalized in _layer_table(scale):
        fan_in = in_c * k * k
        params[name + '.weight'] = diffcore.tensor(
            rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(out_c, in_c, k, k)), requires_grad=True)
        if normalized:
            params[name + '.gamma'] = diffcore.tensor(np.ones(out_c), requires_grad=True)
            params[name + '.beta'] = diffcore.tensor(np.zeros(out_c), requires_grad=True)
    return TransferNet(scale, params)


def check_input(image, region):
    if image.channels != 3:
        raise ShapeMismatch('the transfer network needs RGB images, got {} channels'.format(image.channels))
    if image.height % 4 or image.width % 4:
        raise ShapeMismatch('image sides must be multiples of 4, got {}x{}'.format(image.height, image.width))
    if image.height < 8 or image.width < 8:
        raise InputTooSmall('image must be at least 8x8, got {}x{}'.format(image.height, image.width))
    if region.shape != (image.height, image.width):
        raise ShapeMismatch('region {} does not match image {}'.format(region.shape, image.shape[:2]))
    region.require_nonempty('target region')


def network_output(net, matched):
    """
    Runs the network on *matched* and returns the ``1 x 3 x H x W`` tensor
    ``(tanh + 1) / 2`` in ``[0, 1]``, recording a graph when the parameters
    require gradients.
    """
    x = diffcore.constant(matched.to_chw() * 2.0 - 1.0, dtype=np.float32)
    return diffcore.scale(diffcore.shift(net(x), 1.0), 0.5)


def fuse(output, background, weights):
    """
    Differentiable counterpart of :func:`~defectforge.imagecore.compose_region`
    used during training: ``w * output + (1 - w) * background``.
    """
    w = np.broadcast_to(weights.weights[None, None], output.shape)
    w = np.ascontiguousarray(w, dtype=output.dtype)
    rest = (1.0 - w) * background.to_chw().astype(output.dtype)
    return diffcore.add(diffcore.mul(output, diffcore.constant(w)), diffcore.constant(rest))


def transfer_forward(net, matched, S, L, sigma=None, weights=None):
    """
    Produces the simulated image: the network output on *matched*, fused
    into *S* through the Gaussian fusion mask of *L*. Every pixel with zero
    fusion weight, in particular every pixel outside *L*, is copied from *S*.

    *weights* may carry a precomputed :class:`~defectforge.imagecore.SoftMask`.

    :rtype: Image
    """
    check_input(S, L)
    if matched.shape != S.shape:
        raise ShapeMismatch('matched image {} differs from background {}'.format(matched.shape, S.shape))
    if weights is None:
        weights = gaussian_fusion_mask(L, sigma)
    output = network_output(net.frozen(), matched)
    return compose_region(S, Image.from_chw(output.value), weights)
