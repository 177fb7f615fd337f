"""
The Buttonlab segmentation network: a residual backbone over the whole
image, a shallow branch over a random block of it, and a decoder that fuses
both at increasing resolution. Training computes the cross-entropy only
inside the block.

Schedule (full scale; desk scale divides every width by 8 and uses two
units per backbone stage and one in the branch)::

    backbone  conv 3->64 k7 s2, conv 64->64 k3 s2      stride 4
              stage1  3 bottlenecks -> 256              stride 4   (low)
              stage2  4 bottlenecks -> 512              stride 8
              stage3  6 bottlenecks -> 1024             stride 16
              stage4  3 bottlenecks -> 2048             stride 16  (high)
    branch    conv 3->64 k7 s2, 3 bottlenecks -> 256    stride 2
    decoder   high 1x1 -> 256, x4, concat low 1x1 -> 48, 3x3 -> 256,
              x2, concat branch 1x1 -> 48, 3x3 -> 128, x2, 1x1 -> classes

The backbone is instance normalized over the whole image; the branch and
decoder only see crop extents and carry plain per-channel biases.

Classes:
========
    LabelMap
    CropSpec
    SegNet

Functions:
==========
    init_buttonlab
    random_crop
    seg_forward
    masked_ce
    predict
    default_crop_size
    mix_manifests
    load_samples
    train_seg

Miscellaneous objects:
======================
    Except the above, all other objects in this module are to be considered implementation details.
"""

import concurrent.futures
import dataclasses
import logging
import math

import numpy as np

from . import diffcore
from .config import SegConfig
from .config import worker_count
from .dstpipeline import ManifestEntry
from .dstpipeline import load_entry
from .exceptions import AlignmentError
from .exceptions import CropTooLarge
from .exceptions import Diverged
from .exceptions import NoData
from .exceptions import ShapeMismatch
from .runlog import RunLog
from .transfernet import SCALES

logger = logging.getLogger(__name__)

ALIGNMENT = 16

# mid width, output width, stride, units
_STAGES = (
    (64, 256, 1, 3),
    (128, 512, 2, 4),
    (256, 1024, 2, 6),
    (512, 2048, 1, 3),
)
_STEM = 64
_BRANCH_UNITS = 3
_HIGH, _LOW, _FUSE1, _FUSE2 = 256, 48, 256, 128


class LabelMap(object):
    """
    Per-pixel class indices, 0 being the background.
    """

    def __init__(self, classes):
        classes = np.array(classes, dtype=np.int64)
        if classes.ndim != 2:
            raise ShapeMismatch('label map must be two dimensional, got {}'.format(classes.shape))
        if classes.size and classes.min() < 0:
            raise ValueError('class indices must be non-negative')
        classes.setflags(write=False)
        self.classes = classes

    @classmethod
    def from_region(cls, region):
        return cls(region.bits.astype(np.int64))

    @property
    def shape(self):
        return self.classes.shape

    @property
    def height(self):
        return self.classes.shape[0]

    @property
    def width(self):
        return self.classes.shape[1]

    def crop(self, spec):
        return LabelMap(self.classes[spec.top:spec.top + spec.height, spec.left:spec.left + spec.width])

    def __eq__(self, other):
        return isinstance(other, LabelMap) and np.array_equal(self.classes, other.classes)

    def __repr__(self):
        return '<LabelMap {}x{}>'.format(self.height, self.width)


@dataclasses.dataclass(frozen=True)
class CropSpec:
    top: int
    left: int
    height: int
    width: int

    def check(self, height, width):
        """
        :raises AlignmentError: when a coordinate is not a multiple of 16.
        :raises CropTooLarge: when the crop leaves a *height* x *width* image.
        """
        if any(v % ALIGNMENT for v in dataclasses.astuple(self)) or self.height < 1 or self.width < 1:
            raise AlignmentError('crop {} is not aligned to {} pixels'.format(dataclasses.astuple(self), ALIGNMENT))
        if self.top < 0 or self.left < 0 or self.top + self.height > height or self.left + self.width > width:
            raise CropTooLarge('crop {} does not fit a {}x{} image'.format(dataclasses.astuple(self), height, width))
        return self


def _bottleneck_layers(prefix, in_c, mid, out, stride, units):
    layers = []
    for unit in range(1, units + 1):
        name = '{}.unit{}'.format(prefix, unit)
        first = unit == 1
        layers += [
            (name + '.conv1', in_c, mid, 1, 1),
            (name + '.conv2', mid, mid, 3, stride if first else 1),
            (name + '.conv3', mid, out, 1, 1),
        ]
        if first:
            layers.append((name + '.proj', in_c, out, 1, stride))
        in_c = out
    return layers


def _layer_table(scale, num_classes=2):
    """
    Returns ``(name, in, out, kernel, stride, norm)`` rows, *norm* being either
    ``'instance'`` (whole-image statistics) or ``'bias'`` (crop-local layers).
    """
    if scale not in SCALES:
        raise ValueError('unknown scale {!r}; expected one of {}'.format(scale, SCALES))
    div = 8 if scale == 'desk' else 1
    stem = _STEM // div

    backbone = [('backbone.stem', 3, stem, 7, 2), ('backbone.pool', stem, stem, 3, 2)]
    in_c = stem
    for index, (mid, out, stride, units) in enumerate(_STAGES, start=1):
        if scale == 'desk':
            units = 2
        backbone += _bottleneck_layers('backbone.stage{}'.format(index), in_c, mid // div, out // div, stride, units)
        in_c = out // div
    low_c, high_c = _STAGES[0][1] // div, _STAGES[-1][1] // div

    mid, out = _STAGES[0][0] // div, _STAGES[0][1] // div
    branch = [('branch.stem', 3, stem, 7, 2)]
    branch += _bottleneck_layers('branch.stage', stem, mid, out, 1, 1 if scale == 'desk' else _BRANCH_UNITS)

    high, low, fuse1, fuse2 = _HIGH // div, _LOW // div, _FUSE1 // div, _FUSE2 // div
    decoder = [
        ('decoder.high', high_c, high, 1, 1),
        ('decoder.low', low_c, low, 1, 1),
        ('decoder.fuse1', high + low, fuse1, 3, 1),
        ('decoder.branch', out, low, 1, 1),
        ('decoder.fuse2', fuse1 + low, fuse2, 3, 1),
    ]
    table = [row + ('instance',) for row in backbone]
    table += [row + ('bias',) for row in branch + decoder]
    table.append(('decoder.head', fuse2, num_classes, 1, 1, 'bias'))
    return table


class SegNet(object):
    """
    Parameters of a Buttonlab network with its layer schedule.

    Parameter names (``backbone.stage1.unit1.conv1.weight`` ...) double as
    the archive manifest.
    """

    def __init__(self, scale, params, num_classes=2):
        self.scale = scale
        self.params = params
        self.num_classes = num_classes
        self.layers = _layer_table(scale, num_classes)
        self._rows = {row[0]: row for row in self.layers}
        self._units = {}
        for name in self._rows:
            if '.unit' in name:
                prefix, _, rest = name.rpartition('.unit')
                unit = int(rest.split('.')[0])
                self._units[prefix] = max(self._units.get(prefix, 0), unit)

    def _conv(self, x, name, activate=True):
        _, _, _, _, stride, norm = self._rows[name]
        x = diffcore.conv2d_reflect(x, self.params[name + '.weight'], stride)
        if norm == 'instance':
            x = diffcore.instance_norm(x, self.params[name + '.gamma'], self.params[name + '.beta'])
        elif norm == 'bias':
            x = diffcore.add_bias(x, self.params[name + '.bias'])
        return diffcore.relu(x) if activate else x

    def _stage(self, x, prefix):
        for unit in range(1, self._units[prefix] + 1):
            name = '{}.unit{}'.format(prefix, unit)
            y = self._conv(x, name + '.conv1')
            y = self._conv(y, name + '.conv2')
            y = self._conv(y, name + '.conv3', activate=False)
            skip = self._conv(x, name + '.proj', activate=False) if unit == 1 else x
            x = diffcore.relu(diffcore.add(y, skip))
        return x

    def backbone(self, x):
        """
        Returns the low-level (stride 4) and high-level (stride 16) features.
        """
        x = self._conv(self._conv(x, 'backbone.stem'), 'backbone.pool')
        low = self._stage(x, 'backbone.stage1')
        x = self._stage(low, 'backbone.stage2')
        x = self._stage(x, 'backbone.stage3')
        return low, self._stage(x, 'backbone.stage4')

    def branch(self, x):
        return self._stage(self._conv(x, 'branch.stem'), 'branch.stage')

    def decode(self, high, low, branch):
        x = self._conv(high, 'decoder.high')
        x = diffcore.upsample2x(diffcore.upsample2x(x))
        x = diffcore.concat([x, self._conv(low, 'decoder.low')], axis=1)
        x = diffcore.upsample2x(self._conv(x, 'decoder.fuse1'))
        x = diffcore.concat([x, self._conv(branch, 'decoder.branch')], axis=1)
        x = diffcore.upsample2x(self._conv(x, 'decoder.fuse2'))
        return self._conv(x, 'decoder.head', activate=False)

    def frozen(self):
        params = diffcore.ParameterSet((name, diffcore.Tensor(t.value)) for name, t in self.params.items())
        return SegNet(self.scale, params, self.num_classes)

    def predict(self, image):
        return predict(self, image)

    def save(self, path):
        self.params.save(path)

    @classmethod
    def load(cls, path, scale='desk', num_classes=2):
        net = init_buttonlab(0, scale, num_classes)
        net.params.load_arrays(diffcore.load_archive(path))
        return net


def init_buttonlab(seed, scale='desk', num_classes=2):
    """
    Builds a freshly initialized network: kernels from ``N(0, 2 / fan_in)``
    in schedule order from a generator seeded by *seed*, instance-norm
    scales at 1, shifts and biases at 0.

    :rtype: SegNet
    """
    rng = np.random.default_rng(seed)
    params = diffcore.ParameterSet()
    for name, in_c, out_c, k, _, norm in _layer_table(scale, num_classes):
        params[name + '.weight'] = diffcore.tensor(
            rng.normal(0.0, np.sqrt(2.0 / (in_c * k * k)), size=(out_c, in_c, k, k)), requires_grad=True)
        if norm == 'instance':
            params[name + '.gamma'] = diffcore.tensor(np.ones(out_c), requires_grad=True)
            params[name + '.beta'] = diffcore.tensor(np.zeros(out_c), requires_grad=True)
        elif norm == 'bias':
            params[name + '.bias'] = diffcore.tensor(np.zeros(out_c), requires_grad=True)
    return SegNet(scale, params, num_classes)


def _check_image(image):
    if image.channels != 3:
        raise ShapeMismatch('Buttonlab needs RGB images, got {} channels'.format(image.channels))
    if image.height % ALIGNMENT or image.width % ALIGNMENT:
        raise AlignmentError('image sides must be multiples of {}, got {}x{}'.format(
            ALIGNMENT, image.height, image.width))


def default_crop_size(height, width):
    """
    Half the shorter side, rounded down to a multiple of 16.
    """
    return max(ALIGNMENT, (min(height, width) // 2) // ALIGNMENT * ALIGNMENT)


def random_crop(image, label, crop_hw, rng):
    """
    Cuts the same random block out of *image* and *label*. The top-left
    corner is drawn uniformly from the positions aligned to 16 pixels.

    *crop_hw* is a side length or a ``(height, width)`` pair.

    :rtype: Tuple[Image, LabelMap, CropSpec]
    """
    height, width = (crop_hw, crop_hw) if np.isscalar(crop_hw) else tuple(crop_hw)
    height, width = int(height), int(width)
    if label.shape != image.shape[:2]:
        raise ShapeMismatch('label {} does not match image {}'.format(label.shape, image.shape[:2]))
    if height < 1 or width < 1 or height % ALIGNMENT or width % ALIGNMENT:
        raise AlignmentError('crop {}x{} is not a multiple of {}'.format(height, width, ALIGNMENT))
    if height > image.height or width > image.width:
        raise CropTooLarge('crop {}x{} exceeds image {}x{}'.format(height, width, image.height, image.width))
    top = ALIGNMENT * int(rng.integers((image.height - height) // ALIGNMENT + 1))
    left = ALIGNMENT * int(rng.integers((image.width - width) // ALIGNMENT + 1))
    spec = CropSpec(top, left, height, width)
    return image.crop(top, left, height, width), label.crop(spec), spec


def _network_input(image):
    return diffcore.constant(image.to_chw() * 2.0 - 1.0, dtype=np.float32)


def seg_forward(net, image, branch_input=None, crop=None):
    """
    Runs the backbone on the whole *image* and the branch on *branch_input*
    (the block of *image* under *crop*), crops the backbone features to the
    block and decodes. Without *crop* the block is the whole image.

    Returns ``1 x classes x h x w`` logits over the block.

    :rtype: ~defectforge.diffcore.Tensor
    """
    _check_image(image)
    if crop is None:
        crop = CropSpec(0, 0, image.height, image.width)
    crop.check(image.height, image.width)
    if branch_input is None:
        branch_input = image.crop(crop.top, crop.left, crop.height, crop.width)
    if branch_input.shape != (crop.height, crop.width, 3):
        raise ShapeMismatch('branch input {} does not match crop {}x{}'.format(
            branch_input.shape, crop.height, crop.width))

    low, high = net.backbone(_network_input(image))
    high = diffcore.crop(high, crop.top // 16, crop.left // 16, crop.height // 16, crop.width // 16)
    low = diffcore.crop(low, crop.top // 4, crop.left // 4, crop.height // 4, crop.width // 4)
    return net.decode(high, low, net.branch(_network_input(branch_input)))


def masked_ce(logits, label):
    """
    Mean softmax cross-entropy of ``1 x K x h x w`` *logits* against the
    label block; nothing outside the block takes part.
    """
    if logits.value.ndim != 4 or logits.shape[0] != 1 or logits.shape[2:] != label.shape:
        raise ShapeMismatch('logits {} do not match label {}'.format(logits.shape, label.shape))
    classes = logits.shape[1]
    if label.classes.max() >= classes:
        raise ShapeMismatch('label holds class {} but logits have {}'.format(label.classes.max(), classes))
    onehot = np.eye(classes, dtype=logits.dtype)[label.classes].transpose(2, 0, 1)[None]
    picked = diffcore.mul(diffcore.log_softmax(logits, axis=1), diffcore.constant(onehot))
    return diffcore.scale(diffcore.total(picked), -1.0 / label.classes.size)


def predict(net, image):
    """
    Whole-image prediction; ties between classes go to the lower index.

    :rtype: LabelMap
    """
    logits = seg_forward(net.frozen(), image)
    return LabelMap(np.argmax(logits.value[0], axis=0))


def mix_manifests(groups):
    """
    Concatenates ``(entries, weight)`` groups and returns the entries with
    per-entry sampling probabilities. A group's share of the draws is its
    weight; a weight of ``None`` stands for the group's share of entries.

    :rtype: Tuple[list, numpy.ndarray]
    """
    groups = [(list(entries), weight) for entries, weight in groups]
    total = sum(len(entries) for entries, _ in groups)
    if total == 0:
        raise NoData('no training entries')
    merged, probabilities = [], []
    for entries, weight in groups:
        if not entries:
            continue
        share = len(entries) / float(total) if weight is None else float(weight)
        if share < 0:
            raise ValueError('sampling weights must be non-negative')
        merged += entries
        probabilities += [share / len(entries)] * len(entries)
    probabilities = np.asarray(probabilities)
    if probabilities.sum() <= 0:
        raise ValueError('sampling weights must not all be zero')
    return merged, probabilities / probabilities.sum()


def load_samples(items, workers=None):
    """
    Turns manifest entries (or ready ``(Image, LabelMap)`` pairs) into
    ``(Image, LabelMap)`` pairs, reading files on worker threads.
    """
    def load(item):
        if isinstance(item, ManifestEntry):
            image, region = load_entry(item)
            return image, LabelMap.from_region(region)
        image, label = item
        return image, label if isinstance(label, LabelMap) else LabelMap.from_region(label)

    with concurrent.futures.ThreadPoolExecutor(max_workers=workers or worker_count()) as pool:
        return list(pool.map(load, items))


def _epoch_batches(count, cfg, rng, probabilities):
    if cfg.sampling == 'without_replacement':
        order = rng.permutation(count)
        return [order[i:i + cfg.batch_size] for i in range(0, count, cfg.batch_size)]
    return [rng.choice(count, size=cfg.batch_size, replace=True, p=probabilities)
            for _ in range(cfg.steps_per_epoch)]


def train_seg(entries, cfg=None, validate=None, log=None, probabilities=None, workers=None):
    """
    Trains a Buttonlab network with the random-crop strategy.

    Every step draws a batch, cuts one random block per image, runs the
    backbone on the whole image and the branch on the block, and applies
    one Adam update to the sum of the per-image block losses.
    ``cfg.sampling`` chooses between a fresh permutation per epoch and
    ``cfg.steps_per_epoch`` batches drawn with replacement, the latter
    following *probabilities* when given (see :func:`mix_manifests`).

    *validate* is called with the network after each epoch and its result
    is recorded as ``f1``. Returns ``(net, history)`` with one dict per
    epoch.

    :raises NoData: when there is nothing to train on.
    :raises Diverged: when a loss stops being finite.
    """
    cfg = cfg or SegConfig()
    samples = load_samples(entries, workers)
    if not samples:
        raise NoData('train_seg needs at least one sample')
    for image, label in samples:
        _check_image(image)
        if label.shape != image.shape[:2]:
            raise ShapeMismatch('label {} does not match image {}'.format(label.shape, image.shape[:2]))
    if probabilities is not None and len(probabilities) != len(samples):
        raise ShapeMismatch('one sampling probability per sample is needed')

    log = log if log is not None else RunLog()
    net = init_buttonlab(cfg.seed, cfg.scale, cfg.num_classes)
    optimizer = diffcore.Adam(net.params, lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    history = []
    step = 0
    logger.info('Training Buttonlab on %d samples for %d epochs', len(samples), cfg.epochs)

    for epoch in range(cfg.epochs):
        losses = []
        for batch in _epoch_batches(len(samples), cfg, rng, probabilities):
            optimizer.zero_grad()
            batch_losses = []
            for index in batch:
                image, label = samples[index]
                side = cfg.crop_size or default_crop_size(image.height, image.width)
                block, block_label, crop = random_crop(image, label, side, rng)
                loss = masked_ce(seg_forward(net, image, block, crop), block_label)
                if not math.isfinite(loss.item()):
                    raise Diverged(step)
                diffcore.backward(loss)
                batch_losses.append(loss.item())
            optimizer.step()

            mean = float(np.mean(batch_losses))
            losses.append(mean)
            log.write('step', epoch=epoch, step=step, loss=mean)
            logger.debug('Buttonlab step %d: loss %.6g', step, mean)
            step += 1
            if cfg.max_steps is not None and step >= cfg.max_steps:
                break

        record = {'epoch': epoch, 'steps': step, 'loss': float(np.mean(losses))}
        if validate is not None:
            record['f1'] = float(validate(net))
        history.append(record)
        log.write('epoch', **record)
        logger.info('Buttonlab epoch %d: loss %.6g', epoch, record['loss'])
        if cfg.max_steps is not None and step >= cfg.max_steps:
            break
    return net, history
