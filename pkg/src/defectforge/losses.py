"""
Perceptual losses driving the transfer network: content, Gram-matrix style,
weighted Gatys, feature histogram, total variation and their weighted sum,
all evaluated on the defect region.

Functions:
==========
    content_loss
    gram
    style_loss
    gatys_loss
    feature_hist_match
    hist_targets
    hist_loss
    tv_loss
    region_crop
    whole_loss
    whole_loss_targets

Miscellaneous objects:
======================
    Except the above, all other objects in this module are to be considered implementation details.
"""

import math

import numpy as np

from . import diffcore
from .exceptions import ChannelMismatch
from .exceptions import RegionTooSmall
from .exceptions import ShapeMismatch
from .imagecore import DEFAULT_BINS
from .imagecore import match_distribution

CROP_MARGIN = 8
MIN_CROP_SIDE = 8


class LossWeights(object):
    """
    Weights of the whole loss. The defaults are the published settings:
    ``w_c = 1e5``, ``w_s = 2.5e-4``, ``w_h = 10``, ``w_tv = 1``.
    """

    def __init__(self, content=1e5, style=2.5e-4, hist=10.0, tv=1.0):
        self.content = float(content)
        self.style = float(style)
        self.hist = float(hist)
        self.tv = float(tv)
        for name, value in self.as_dict().items():
            if not math.isfinite(value) or value < 0:
                raise ValueError('loss weight {} must be finite and non-negative, got {}'.format(name, value))

    def as_dict(self):
        return {'content': self.content, 'style': self.style, 'hist': self.hist, 'tv': self.tv}


class LossTaps(object):
    """
    Which extractor taps feed which loss term.
    """

    def __init__(self, content=('t2',), style=('t1', 't2', 't3', 't4'), hist=('t1', 't4')):
        self.content = tuple(content)
        self.style = tuple(style)
        self.hist = tuple(hist)

    def all(self):
        return tuple(sorted(set(self.content) | set(self.style) | set(self.hist)))


class LossReport(object):
    """
    Per-term values of one evaluation of the whole loss.

    :attr:`objective` is the differentiable total, kept for the backward
    pass; it is not part of the serialized report.
    """

    def __init__(self, content, style, hist, tv, weights, objective=None):
        self.content = float(content)
        self.style = float(style)
        self.hist = float(hist)
        self.tv = float(tv)
        self.total = (
            weights.content * self.content
            + weights.style * self.style
            + weights.hist * self.hist
            + weights.tv * self.tv
        )
        self.objective = objective

    def as_dict(self):
        return {
            'content': self.content,
            'style': self.style,
            'hist': self.hist,
            'tv': self.tv,
            'total': self.total,
        }

    def __repr__(self):
        return '<LossReport total={:.6g}>'.format(self.total)


def _feature(stack, tap):
    try:
        return stack[tap]
    except KeyError:
        raise ShapeMismatch('feature stack lacks tap {!r}'.format(tap))


def _mean_square(diff):
    return diffcore.scale(diffcore.total(diffcore.square(diff)), 1.0 / diff.size)


def content_loss(fy_hat, fy, tap='t2'):
    """
    Mean squared distance between the activations of *tap* in both stacks.
    """
    a, b = _feature(fy_hat, tap), _feature(fy, tap)
    if a.shape != b.shape:
        raise ShapeMismatch('content features differ: {} vs {}'.format(a.shape, b.shape))
    return _mean_square(diffcore.sub(a, b))


def gram(feature):
    """
    Channel correlation matrix ``psi psi^T / (C H W)`` of a ``C x H x W``
    (or ``1 x C x H x W``) feature map.
    """
    c, h, w = feature.shape[-3:]
    psi = diffcore.reshape(feature, (c, h * w))
    return diffcore.scale(diffcore.matmul(psi, diffcore.transpose(psi)), 1.0 / (c * h * w))


def style_loss(fy_hat, fs, taps=('t1', 't2', 't3', 't4')):
    """
    Sum over *taps* of the squared Frobenius distance between Gram matrices.
    """
    terms = []
    for tap in taps:
        a, b = _feature(fy_hat, tap), _feature(fs, tap)
        if a.shape[-3] != b.shape[-3]:
            raise ShapeMismatch('style features of {} have {} and {} channels'.format(tap, a.shape[-3], b.shape[-3]))
        terms.append(diffcore.total(diffcore.square(diffcore.sub(gram(a), gram(b)))))
    return _sum(terms)


def _sum(terms):
    result = terms[0]
    for term in terms[1:]:
        result = diffcore.add(result, term)
    return result


def gatys_loss(content, style, weights):
    """
    ``w_c * content + w_s * style``; works on floats and scalar tensors alike.
    """
    if isinstance(content, diffcore.Tensor):
        return diffcore.add(diffcore.scale(content, weights.content), diffcore.scale(style, weights.style))
    return weights.content * content + weights.style * style


def feature_hist_match(activation, reference, bins=DEFAULT_BINS):
    """
    Histogram-matches every channel of the ``C x H x W`` array *activation*
    to the matching channel of *reference*, using *bins* bins over the
    reference channel's value range.

    :rtype: numpy.ndarray
    """
    activation = np.asarray(activation, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if activation.shape[0] != reference.shape[0]:
        raise ChannelMismatch('activation has {} channels, reference has {}'.format(
            activation.shape[0], reference.shape[0]))
    out = np.empty_like(activation)
    for c in range(activation.shape[0]):
        out[c] = match_distribution(activation[c], reference[c], bins).reshape(activation.shape[1:])
    return out


def hist_targets(fy_hat, fhist, taps=('t1', 't4'), bins=DEFAULT_BINS):
    """
    Computes the matching targets ``R_j`` for every tap as plain arrays.
    """
    targets = {}
    for tap in taps:
        a, r = _feature(fy_hat, tap), _feature(fhist, tap)
        targets[tap] = feature_hist_match(a.value.reshape(a.shape[-3:]), r.value.reshape(r.shape[-3:]), bins)
    return targets


def hist_loss(fy_hat, fhist, taps=('t1', 't4'), targets=None, bins=DEFAULT_BINS):
    """
    Sum over *taps* of the mean squared distance between the activations and
    their histogram-matched version. The targets are recomputed from the
    current activations unless *targets* is given, and never carry gradients.
    """
    if targets is None:
        targets = hist_targets(fy_hat, fhist, taps, bins)
    terms = []
    for tap in taps:
        a = _feature(fy_hat, tap)
        target = np.asarray(targets[tap], dtype=a.dtype).reshape(a.shape)
        terms.append(_mean_square(diffcore.sub(a, diffcore.constant(target))))
    return _sum(terms)


def tv_loss(img):
    """
    Unnormalized total variation: squared differences between horizontal
    and vertical neighbors, summed over pixels and channels.
    """
    h, w = img.shape[-2:]
    if h < 2 or w < 2:
        raise ShapeMismatch('total variation needs at least 2x2 pixels')
    right = diffcore.sub(diffcore.crop(img, 0, 1, h, w - 1), diffcore.crop(img, 0, 0, h, w - 1))
    down = diffcore.sub(diffcore.crop(img, 1, 0, h - 1, w), diffcore.crop(img, 0, 0, h - 1, w))
    return diffcore.add(diffcore.total(diffcore.square(right)), diffcore.total(diffcore.square(down)))


def region_crop(region, margin=CROP_MARGIN):
    """
    Bounding box of *region* grown by *margin* and clipped to the image.

    :raises RegionTooSmall: when the box is smaller than 8x8.
    """
    box = region.bbox(margin)
    if box[2] < MIN_CROP_SIDE or box[3] < MIN_CROP_SIDE:
        raise RegionTooSmall('region crop {}x{} is smaller than {}x{}'.format(
            box[2], box[3], MIN_CROP_SIDE, MIN_CROP_SIDE))
    return box


def _crop_constant(img, box, dtype):
    top, left, h, w = box
    return diffcore.constant(img.to_chw()[:, :, top:top + h, left:left + w], dtype=dtype)


def whole_loss(y_hat, matched, style, hist_ref, L, M, fx, weights=None, taps=None,
               frozen_targets=None, bins=DEFAULT_BINS):
    """
    Evaluates the whole transfer loss on the region crops.

    *y_hat* is the ``1 x C x H x W`` output tensor of the transfer network;
    *matched*, *style* and *hist_ref* are :class:`~defectforge.imagecore.Image`
    instances. The content target is the coarse-harmonized *matched* image,
    the style target is the defect-free *style* image, both cropped around
    *L*; the histogram reference is *hist_ref* cropped around *M*.
    Gradients flow into *y_hat* only.

    *frozen_targets* pins the histogram targets (see :func:`hist_targets`)
    instead of recomputing them, which is how gradient checks hold them fixed.

    :rtype: LossReport
    """
    weights = weights or LossWeights()
    taps = taps or LossTaps()
    L.require_nonempty('target region')
    M.require_nonempty('reference region')
    box = region_crop(L)
    ref_box = region_crop(M)
    dtype = y_hat.dtype

    top, left, h, w = box
    y_crop = diffcore.crop(y_hat, top, left, h, w)
    needed = taps.all()
    f_hat = fx.extract(y_crop, needed)
    f_content = fx.extract(_crop_constant(matched, box, dtype), taps.content)
    f_style = fx.extract(_crop_constant(style, box, dtype), taps.style)
    f_hist = fx.extract(_crop_constant(hist_ref, ref_box, dtype), taps.hist)

    content = _sum([content_loss(f_hat, f_content, tap) for tap in taps.content])
    style_term = style_loss(f_hat, f_style, taps.style)
    hist = hist_loss(f_hat, f_hist, taps.hist, targets=frozen_targets, bins=bins)
    tv = tv_loss(y_crop)

    objective = _sum([
        gatys_loss(content, style_term, weights),
        diffcore.scale(hist, weights.hist),
        diffcore.scale(tv, weights.tv),
    ])
    return LossReport(content.item(), style_term.item(), hist.item(), tv.item(), weights, objective)


def whole_loss_targets(y_hat, hist_ref, L, M, fx, taps=None, bins=DEFAULT_BINS):
    """
    Histogram targets :func:`whole_loss` would compute for *y_hat*, for use
    as *frozen_targets*.
    """
    taps = taps or LossTaps()
    top, left, h, w = region_crop(L)
    f_hat = fx.extract(diffcore.constant(y_hat.value[..., top:top + h, left:left + w], dtype=y_hat.dtype), taps.hist)
    f_hist = fx.extract(_crop_constant(hist_ref, region_crop(M), y_hat.dtype), taps.hist)
    return hist_targets(f_hat, f_hist, taps.hist, bins)
