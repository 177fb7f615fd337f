"""
Image containers, region masks and the masked histogram matching used for
coarse harmonization.

Classes:
========
    Image
    RegionMask
    Histogram
    SoftMask

Functions:
==========
    channel_histogram
    hist_match_region
    match_distribution
    gaussian_fusion_mask
    default_sigma
    compose_region
    read_png
    write_png
    read_mask_png
    write_mask_png

Miscellaneous objects:
======================
    Except the above, all other objects in this module are to be considered implementation details.
"""

import math

import numpy as np
from PIL import Image as PILImage
from scipy import ndimage

from .exceptions import ChannelMismatch
from .exceptions import EmptyRegion
from .exceptions import IoError
from .exceptions import ShapeMismatch

DEFAULT_BINS = 256


class Image(object):
    """
    An ``H x W x C`` float image with every value in ``[0, 1]``.

    *data* may also be ``H x W`` in which case a single channel is assumed.
    The array is copied and made read-only so that images can be shared
    freely between threads.
    """

    def __init__(self, data):
        data = np.array(data, dtype=np.float64)
        if data.ndim == 2:
            data = data[:, :, None]
        if data.ndim != 3 or data.shape[2] not in (1, 3):
            raise ShapeMismatch('image must be HxW, HxWx1 or HxWx3, got {}'.format(data.shape))
        if not np.all(np.isfinite(data)) or data.min() < 0.0 or data.max() > 1.0:
            raise ValueError('image values must lie in [0, 1]')
        data.setflags(write=False)
        self.data = data

    @property
    def height(self):
        return self.data.shape[0]

    @property
    def width(self):
        return self.data.shape[1]

    @property
    def channels(self):
        return self.data.shape[2]

    @property
    def shape(self):
        return self.data.shape

    def to_chw(self):
        """
        Returns the pixels as a ``1 x C x H x W`` array, the layout networks consume.

        :rtype: numpy.ndarray
        """
        return np.ascontiguousarray(self.data.transpose(2, 0, 1)[None])

    @classmethod
    def from_chw(cls, array):
        """
        Builds an image from a ``1 x C x H x W`` (or ``C x H x W``) array,
        clipping to ``[0, 1]``.
        """
        array = np.asarray(array, dtype=np.float64)
        if array.ndim == 4:
            array = array[0]
        return cls(np.clip(array.transpose(1, 2, 0), 0.0, 1.0))

    def crop(self, top, left, height, width):
        return Image(self.data[top:top + height, left:left + width])

    def __eq__(self, other):
        return isinstance(other, Image) and np.array_equal(self.data, other.data)

    def __repr__(self):
        return '<Image {}x{}x{}>'.format(self.height, self.width, self.channels)


class RegionMask(object):
    """
    A boolean ``H x W`` pixel selector.
    """

    def __init__(self, bits):
        bits = np.array(bits, dtype=bool)
        if bits.ndim != 2:
            raise ShapeMismatch('region mask must be two dimensional, got {}'.format(bits.shape))
        bits.setflags(write=False)
        self.bits = bits

    @property
    def height(self):
        return self.bits.shape[0]

    @property
    def width(self):
        return self.bits.shape[1]

    @property
    def shape(self):
        return self.bits.shape

    def count(self):
        return int(np.count_nonzero(self.bits))

    def is_empty(self):
        return not self.bits.any()

    def require_nonempty(self, what='region'):
        if self.is_empty():
            raise EmptyRegion('{} selects no pixels'.format(what))
        return self

    def bbox(self, margin=0):
        """
        Returns ``(top, left, height, width)`` of the smallest box holding
        every set bit, grown by *margin* on each side and clipped to the mask.

        :rtype: Tuple[int, int, int, int]
        """
        self.require_nonempty()
        rows = np.flatnonzero(self.bits.any(axis=1))
        cols = np.flatnonzero(self.bits.any(axis=0))
        top = max(int(rows[0]) - margin, 0)
        left = max(int(cols[0]) - margin, 0)
        bottom = min(int(rows[-1]) + 1 + margin, self.height)
        right = min(int(cols[-1]) + 1 + margin, self.width)
        return top, left, bottom - top, right - left

    def __eq__(self, other):
        return isinstance(other, RegionMask) and np.array_equal(self.bits, other.bits)

    def __repr__(self):
        return '<RegionMask {}x{} ({} set)>'.format(self.height, self.width, self.count())


class Histogram(object):
    """
    Per-channel counts over *bins* equal-width bins on ``[0, 1]``.

    :attr:`counts` is a ``C x B`` integer array.
    """

    def __init__(self, counts):
        counts = np.asarray(counts, dtype=np.int64)
        if counts.ndim != 2 or counts.shape[1] < 2:
            raise ValueError('histogram needs a C x B count array with B >= 2')
        self.counts = counts

    @property
    def bins(self):
        return self.counts.shape[1]

    @property
    def channels(self):
        return self.counts.shape[0]

    def cumulative(self):
        """
        Returns the running counts per channel; divide by :meth:`total` to get the CDF.
        """
        return np.cumsum(self.counts, axis=1)

    def total(self):
        return int(self.counts[0].sum())


class SoftMask(object):
    """
    Per-pixel fusion weights in ``[0, 1]``.
    """

    def __init__(self, weights):
        weights = np.array(weights, dtype=np.float64)
        if weights.ndim != 2:
            raise ShapeMismatch('soft mask must be two dimensional')
        if weights.min() < 0.0 or weights.max() > 1.0:
            raise ValueError('fusion weights must lie in [0, 1]')
        weights.setflags(write=False)
        self.weights = weights

    @property
    def shape(self):
        return self.weights.shape


def _check_pair(img, mask):
    if img.shape[:2] != mask.shape:
        raise ShapeMismatch('image is {}x{} but mask is {}x{}'.format(
            img.height, img.width, mask.height, mask.width))


def bin_index(values, lo, hi, bins):
    """
    Maps *values* to bins of ``[lo, hi]``. A value on an inner edge belongs
    to the bin it opens; *hi* itself belongs to the last bin.
    """
    scaled = (np.asarray(values, dtype=np.float64) - lo) * (bins / (hi - lo))
    return np.clip(np.floor(scaled).astype(np.int64), 0, bins - 1)


def channel_histogram(img, mask, bins=DEFAULT_BINS):
    """
    Tallies the pixels of *img* selected by *mask*, per channel.

    :rtype: Histogram
    """
    if bins < 2:
        raise ValueError('bins must be at least 2')
    _check_pair(img, mask)
    mask.require_nonempty('histogram mask')
    selected = img.data[mask.bits]
    counts = [
        np.bincount(bin_index(selected[:, c], 0.0, 1.0, bins), minlength=bins)
        for c in range(img.channels)
    ]
    return Histogram(np.stack(counts))


def match_distribution(values, reference, bins=DEFAULT_BINS, reference_range=None):
    """
    Remaps the 1-D array *values* so its distribution follows *reference*.

    Each value is replaced by its exact rank over *values* (ties share the
    highest rank), divided by the count; the inverse reference CDF then
    picks the smallest reference bin whose CDF reaches that fraction and
    returns the bin's center. *reference_range* defaults to the min/max of
    *reference*. The comparison is done on integer counts so the result
    does not depend on floating point rounding of the CDFs.

    :rtype: numpy.ndarray
    """
    values = np.asarray(values, dtype=np.float64).ravel()
    reference = np.asarray(reference, dtype=np.float64).ravel()
    lo_r, hi_r = reference_range if reference_range is not None else (reference.min(), reference.max())
    if hi_r <= lo_r:
        return np.full(values.shape, reference.mean())

    ranks = np.searchsorted(np.sort(values), values, side='right')
    ref_cum = np.cumsum(np.bincount(bin_index(reference, lo_r, hi_r, bins), minlength=bins))
    n_src, n_ref = values.size, reference.size

    # cum_r[r] / n_ref >= rank / n_src, cross-multiplied.
    targets = np.searchsorted(ref_cum * n_src, ranks * n_ref, side='left')
    targets = np.minimum(targets, bins - 1)
    centers = lo_r + (np.arange(bins) + 0.5) * ((hi_r - lo_r) / bins)
    return centers[targets]


def hist_match_region(src, src_region, ref, ref_region, bins=DEFAULT_BINS):
    """
    Matches the colors of *src* inside *src_region* to those of *ref* inside
    *ref_region*, channel by channel.

    Pixels outside *src_region* are copied from *src* unchanged.

    :rtype: Image
    """
    _check_pair(src, src_region)
    _check_pair(ref, ref_region)
    src_region.require_nonempty('source region')
    ref_region.require_nonempty('reference region')
    if src.channels != ref.channels:
        raise ChannelMismatch('source has {} channels, reference has {}'.format(src.channels, ref.channels))

    out = np.array(src.data)
    ref_pixels = ref.data[ref_region.bits]
    src_pixels = src.data[src_region.bits]
    for c in range(src.channels):
        matched = match_distribution(
            src_pixels[:, c], ref_pixels[:, c], bins,
            reference_range=(0.0, 1.0),
        )
        channel = out[:, :, c]
        channel[src_region.bits] = np.clip(matched, 0.0, 1.0)
    return Image(out)


def default_sigma(region):
    """
    Fusion blur width used when none is configured: a quarter of the
    shorter side of the region's bounding box, at least one pixel.
    """
    _, _, height, width = region.bbox()
    return max(1.0, min(height, width) / 4.0)


def gaussian_fusion_mask(region, sigma=None):
    """
    Blurs the binary *region* with a Gaussian of standard deviation *sigma*
    (kernel radius ``ceil(3 * sigma)``, mirrored borders) and zeroes
    everything outside the region again.

    :rtype: SoftMask
    """
    region.require_nonempty('fusion region')
    if sigma is None:
        sigma = default_sigma(region)
    if sigma < 0:
        raise ValueError('sigma must be non-negative')
    binary = region.bits.astype(np.float64)
    if sigma == 0:
        return SoftMask(binary)
    blurred = ndimage.gaussian_filter(binary, sigma=sigma, mode='mirror', radius=int(math.ceil(3 * sigma)))
    return SoftMask(np.clip(blurred, 0.0, 1.0) * binary)


def compose_region(background, patch, weights):
    """
    Blends *patch* over *background*: ``w * patch + (1 - w) * background``.

    Wherever the weight is zero the background pixel is returned untouched.

    :rtype: Image
    """
    if background.shape != patch.shape or background.shape[:2] != weights.shape:
        raise ShapeMismatch('background {}, patch {} and weights {} disagree'.format(
            background.shape, patch.shape, weights.shape))
    w = weights.weights[:, :, None]
    out = w * patch.data + (1.0 - w) * background.data
    outside = np.broadcast_to(w == 0.0, out.shape)
    out[outside] = background.data[outside]
    return Image(np.clip(out, 0.0, 1.0))


def _to_bytes(array):
    # round half up
    return np.floor(np.asarray(array) * 255.0 + 0.5).astype(np.uint8)


def read_png(path):
    """
    Reads an 8-bit RGB or grayscale PNG into an :class:`Image`.
    """
    try:
        with PILImage.open(path) as fh:
            mode = 'L' if fh.mode in ('L', '1', 'I', 'I;16') else 'RGB'
            array = np.asarray(fh.convert(mode), dtype=np.float64)
    except (OSError, ValueError) as exc:
        raise IoError('cannot read image {}: {}'.format(path, exc))
    return Image(array / 255.0)


def write_png(img, path):
    data = _to_bytes(img.data)
    if img.channels == 1:
        data = data[:, :, 0]
    try:
        PILImage.fromarray(data).save(path, format='PNG')
    except OSError as exc:
        raise IoError('cannot write image {}: {}'.format(path, exc))


def read_mask_png(path):
    """
    Reads a single-channel PNG mask; values of 128 and above are inside the region.
    """
    try:
        with PILImage.open(path) as fh:
            array = np.asarray(fh.convert('L'))
    except (OSError, ValueError) as exc:
        raise IoError('cannot read mask {}: {}'.format(path, exc))
    return RegionMask(array >= 128)


def write_mask_png(mask, path):
    try:
        PILImage.fromarray(mask.bits.astype(np.uint8) * 255).save(path, format='PNG')
    except OSError as exc:
        raise IoError('cannot write mask {}: {}'.format(path, exc))
