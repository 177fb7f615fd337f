"""
Central-difference checks of every training objective: content, style,
histogram (targets held fixed), total variation, the whole transfer loss and
the masked cross-entropy, at float64 and float32.
"""

import dataclasses
import logging

import numpy as np

from . import diffcore
from .buttonlab import LabelMap
from .buttonlab import masked_ce
from .featurenet import ExtractorSpec
from .featurenet import FeatureStack
from .featurenet import build_extractor
from .imagecore import Image
from .imagecore import RegionMask
from .losses import LossTaps
from .losses import LossWeights
from .losses import content_loss
from .losses import hist_loss
from .losses import hist_targets
from .losses import style_loss
from .losses import tv_loss
from .losses import whole_loss
from .losses import whole_loss_targets

logger = logging.getLogger(__name__)

THRESHOLDS = {'float64': 1e-5, 'float32': 1e-3}
CASES = ('content', 'style', 'hist', 'tv', 'whole', 'masked_ce')
TOY_SPEC = ExtractorSpec(channels=(4, 4, 4, 4), strides=(1, 1, 1, 1), taps={'t1': 1, 't2': 2, 't3': 3, 't4': 4})
KINK_MARGIN = 1e-3
STEP = 1e-5


@dataclasses.dataclass
class GradResult:
    name: str
    dtype: str
    error: float
    threshold: float

    @property
    def passed(self):
        return self.error < self.threshold

    def as_dict(self):
        return {'name': self.name, 'dtype': self.dtype, 'error': self.error,
                'threshold': self.threshold, 'passed': self.passed}


def _features(rng, shape, dtype):
    return diffcore.tensor(rng.normal(size=shape), dtype=dtype)


def _content_case(rng, dtype):
    target = FeatureStack(t2=diffcore.constant(rng.normal(size=(1, 3, 4, 4)), dtype=dtype))
    return lambda x: content_loss(FeatureStack(t2=x), target), _features(rng, (1, 3, 4, 4), dtype)


def _style_case(rng, dtype):
    target = FeatureStack(t1=diffcore.constant(rng.normal(size=(1, 2, 4, 4)), dtype=dtype))
    return lambda x: style_loss(FeatureStack(t1=x), target, ('t1',)), _features(rng, (1, 2, 4, 4), dtype)


def _hist_case(rng, dtype):
    point = _features(rng, (1, 3, 4, 4), dtype)
    reference = FeatureStack(t1=diffcore.constant(rng.normal(1.0, 2.0, size=(1, 3, 6, 6)), dtype=dtype))
    targets = hist_targets(FeatureStack(t1=point), reference, ('t1',), bins=16)
    return lambda x: hist_loss(FeatureStack(t1=x), reference, ('t1',), targets=targets), point


def _tv_case(rng, dtype):
    return tv_loss, _features(rng, (1, 3, 6, 6), dtype)


def _ce_case(rng, dtype):
    label = LabelMap(rng.integers(0, 2, size=(4, 4)))
    return lambda x: masked_ce(x, label), _features(rng, (1, 2, 4, 4), dtype)


def _kink_distance(fx, image):
    """
    Smallest absolute pre-activation the extractor sees for *image*.
    """
    x = diffcore.constant(image, dtype=np.float64)
    smallest = np.inf
    for name, stride in zip(fx.spec.layer_names(), fx.spec.strides):
        pre = diffcore.conv2d_reflect(x, fx.weights[name], stride)
        smallest = min(smallest, float(np.abs(pre.value).min()))
        x = diffcore.relu(pre)
    return smallest


def _whole_case(rng, dtype, size=8, attempts=50):
    fx = build_extractor('seeded', 0, spec=TOY_SPEC)
    taps = LossTaps(content=('t2',), style=('t1', 't2', 't3', 't4'), hist=('t1', 't4'))
    weights = LossWeights()
    unit = size // 8
    L = np.zeros((size, size), dtype=bool)
    L[3 * unit:6 * unit, 2 * unit:6 * unit] = True
    M = np.zeros((size, size), dtype=bool)
    M[2 * unit:5 * unit, 3 * unit:7 * unit] = True
    L, M = RegionMask(L), RegionMask(M)
    matched = Image(rng.uniform(size=(size, size, 3)))
    style = Image(rng.uniform(size=(size, size, 3)))
    hist_ref = Image(rng.uniform(size=(size, size, 3)))

    best, best_distance = None, -1.0
    for _ in range(attempts):
        candidate = rng.uniform(size=(1, 3, size, size))
        distance = _kink_distance(fx, candidate)
        if distance > best_distance:
            best, best_distance = candidate, distance
        if distance > KINK_MARGIN:
            break
    point = diffcore.tensor(best, dtype=dtype)
    targets = whole_loss_targets(point, hist_ref, L, M, fx, taps, bins=16)

    def objective(x):
        return whole_loss(x, matched, style, hist_ref, L, M, fx, weights, taps, frozen_targets=targets).objective

    return objective, point


_BUILDERS = {
    'content': _content_case,
    'style': _style_case,
    'hist': _hist_case,
    'tv': _tv_case,
    'whole': _whole_case,
    'masked_ce': _ce_case,
}


def check_case(name, dtype='float64', seed=0, size=None):
    """
    Runs one named check and returns its :class:`GradResult`.

    *size* sets the image side of the ``whole`` check (a multiple of 8, 8 by
    default); the other checks have fixed shapes.
    """
    if name not in _BUILDERS:
        raise ValueError('unknown gradient check {!r}; expected one of {}'.format(name, CASES))
    rng = np.random.default_rng([seed, CASES.index(name)])
    if size is None:
        fn, point = _BUILDERS[name](rng, np.dtype(dtype))
    elif name == 'whole' and size > 0 and size % 8 == 0:
        fn, point = _whole_case(rng, np.dtype(dtype), size)
    else:
        raise ValueError('size {} does not apply to the {} check'.format(size, name))
    error = diffcore.grad_check(fn, point, STEP)
    result = GradResult(name, np.dtype(dtype).name, error, THRESHOLDS[np.dtype(dtype).name])
    logger.debug('Gradient check %s/%s: %.3g', name, result.dtype, error)
    return result


def run_gradsuite(dtypes=('float64', 'float32'), cases=CASES, seed=0):
    """
    Runs every check at every dtype.

    :rtype: List[GradResult]
    """
    return [check_case(name, dtype, seed) for dtype in dtypes for name in cases]
