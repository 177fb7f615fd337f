"""
Pixelwise evaluation of segmentation results and the comparison harness
that trains Buttonlab on several training sets over several seeds.

Classes:
========
    ConfusionCounts
    EvalReport
    Scenario
    ComparisonTable

Functions:
==========
    confusion
    f1
    evaluate_model
    validation_f1
    build_scenarios
    run_comparison

Miscellaneous objects:
======================
    Except the above, all other objects in this module are to be considered implementation details.
"""

import concurrent.futures
import dataclasses
import json
import logging
import statistics
from typing import List
from typing import Optional
from typing import Tuple

import numpy as np

from .buttonlab import LabelMap
from .buttonlab import load_samples
from .buttonlab import mix_manifests
from .buttonlab import predict
from .buttonlab import train_seg
from .config import SegConfig
from .config import worker_count
from .dstpipeline import read_manifest
from .exceptions import NoData
from .exceptions import ShapeMismatch

logger = logging.getLogger(__name__)

# F1 scores reported for the real button dataset, echoed for context only
PUBLISHED_F1 = (
    ('DST + Buttonlab', 0.8000),
    ('hist match + Buttonlab', 0.6599),
    ('real samples only', 0.4692),
)

SCENARIO_SOURCES = {
    'real': ('real_train',),
    'real+hist': ('real_train', 'hist'),
    'real+dst': ('real_train', 'dst'),
    'hist': ('hist',),
    'dst': ('dst',),
}


@dataclasses.dataclass(frozen=True)
class ConfusionCounts:
    """
    Pixel tallies with the defect class as positive.
    """
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    @property
    def total(self):
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other):
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)

    def as_dict(self):
        return dataclasses.asdict(self)


def _positive(labels):
    if isinstance(labels, LabelMap):
        return labels.classes != 0
    if hasattr(labels, 'bits'):
        return labels.bits
    return np.asarray(labels) != 0


def confusion(pred, truth):
    """
    Tallies *pred* against *truth*; both may be label maps, region masks or
    arrays, any non-zero class counting as defect.

    :rtype: ConfusionCounts
    """
    p, t = _positive(pred), _positive(truth)
    if p.shape != t.shape:
        raise ShapeMismatch('prediction {} and truth {} differ'.format(p.shape, t.shape))
    return ConfusionCounts(
        tp=int(np.count_nonzero(p & t)),
        fp=int(np.count_nonzero(p & ~t)),
        fn=int(np.count_nonzero(~p & t)),
        tn=int(np.count_nonzero(~p & ~t)),
    )


def _ratio(num, den):
    return num / den if den else 0.0


def f1(counts):
    """
    Returns ``(precision, recall, f1)``; a zero denominator yields 0.

    :rtype: Tuple[float, float, float]
    """
    precision = _ratio(counts.tp, counts.tp + counts.fp)
    recall = _ratio(counts.tp, counts.tp + counts.fn)
    return precision, recall, _ratio(2.0 * precision * recall, precision + recall)


@dataclasses.dataclass
class EvalReport:
    """
    Micro-aggregated metrics of a test set plus one record per image.
    """
    counts: ConfusionCounts
    precision: float
    recall: float
    f1: float
    per_image: List[dict] = dataclasses.field(default_factory=list)

    def as_dict(self):
        return {
            'counts': self.counts.as_dict(),
            'precision': self.precision,
            'recall': self.recall,
            'f1': self.f1,
            'per_image': self.per_image,
        }


def evaluate_model(net, entries, workers=None):
    """
    Predicts every test image and pools the confusion counts over all of
    them before computing precision, recall and F1.

    *entries* are manifest entries or ``(Image, LabelMap)`` pairs.

    :rtype: EvalReport
    """
    samples = load_samples(entries, workers)
    if not samples:
        raise NoData('evaluate_model needs at least one test image')
    frozen = net.frozen()
    with concurrent.futures.ThreadPoolExecutor(max_workers=workers or worker_count()) as pool:
        predictions = list(pool.map(lambda sample: predict(frozen, sample[0]), samples))

    total = ConfusionCounts()
    per_image = []
    for index, (prediction, (_, truth)) in enumerate(zip(predictions, samples)):
        counts = confusion(prediction, truth)
        total = total + counts
        precision, recall, score = f1(counts)
        record = dict(index=index, precision=precision, recall=recall, f1=score, **counts.as_dict())
        if hasattr(entries[index], 'image'):
            record['image'] = entries[index].image
        per_image.append(record)
    return EvalReport(total, *f1(total), per_image=per_image)


def validation_f1(net, samples):
    """
    Micro-F1 of *net* on *samples*; usable as the ``validate`` hook of
    :func:`~defectforge.buttonlab.train_seg` through :func:`functools.partial`.
    """
    return evaluate_model(net, samples, workers=1).f1


@dataclasses.dataclass
class Scenario:
    """
    A named training set: manifests with optional sampling weights.
    """
    name: str
    sources: List[Tuple[str, Optional[float]]]


def build_scenarios(names, manifests, weights=None):
    """
    Resolves scenario names (``real``, ``real+hist``, ``real+dst``,
    ``hist``, ``dst``) against *manifests*, which maps ``real_train``,
    ``hist`` and ``dst`` to one manifest path or a list of them. *weights*
    optionally maps a source key to its sampling weight.

    :rtype: List[Scenario]
    """
    weights = weights or {}
    scenarios = []
    for name in names:
        if name not in SCENARIO_SOURCES:
            raise ValueError('unknown scenario {!r}; expected one of {}'.format(name, sorted(SCENARIO_SOURCES)))
        sources = []
        for key in SCENARIO_SOURCES[name]:
            if key not in manifests:
                raise NoData('scenario {} needs {} samples'.format(name, key))
            paths = manifests[key]
            paths = [paths] if isinstance(paths, str) else list(paths)
            weight = weights.get(key)
            share = None if weight is None else float(weight) / len(paths)
            sources += [(path, share) for path in paths]
        scenarios.append(Scenario(name, sources))
    return scenarios


@dataclasses.dataclass
class ComparisonRow:
    scenario: str
    seeds: List[int]
    scores: List[float]

    @property
    def median(self):
        return float(statistics.median(self.scores))

    def as_dict(self):
        return {'scenario': self.scenario, 'seeds': self.seeds, 'f1': self.scores, 'median': self.median}


@dataclasses.dataclass
class ComparisonTable:
    rows: List[ComparisonRow]

    def row(self, scenario):
        for row in self.rows:
            if row.scenario == scenario:
                return row
        raise KeyError(scenario)

    def to_text(self):
        lines = ['Published F1 on the real button dataset (context only, not reproduced here):']
        lines += ['  {:<26}{:.4f}'.format(name, score) for name, score in PUBLISHED_F1]
        lines.append('')
        seeds = self.rows[0].seeds if self.rows else []
        width = max([len('scenario')] + [len(row.scenario) for row in self.rows]) + 2
        header = 'scenario'.ljust(width) + ''.join('seed {:<5}'.format(s) for s in seeds) + 'median'
        lines.append(header)
        for row in self.rows:
            cells = ''.join('{:<10.4f}'.format(score) for score in row.scores)
            lines.append(row.scenario.ljust(width) + cells + '{:.4f}'.format(row.median))
        return '\n'.join(lines) + '\n'

    def to_json_lines(self):
        return ''.join(json.dumps(row.as_dict(), sort_keys=True) + '\n' for row in self.rows)


def run_comparison(scenarios, seeds, test_entries, cfg=None, log=None, workers=None):
    """
    Trains one Buttonlab network per scenario and seed and scores each on
    the test set.

    *test_entries* is a test manifest path or a list of entries.

    :rtype: ComparisonTable
    """
    cfg = cfg or SegConfig()
    seeds = list(seeds)
    if not seeds:
        raise ValueError('run_comparison needs at least one seed')
    if isinstance(test_entries, str):
        test_entries = read_manifest(test_entries)
    test_samples = load_samples(test_entries, workers)

    rows = []
    for scenario in scenarios:
        groups = [(read_manifest(path), weight) for path, weight in scenario.sources]
        entries, probabilities = mix_manifests(groups)
        samples = load_samples(entries, workers)
        scores = []
        for seed in seeds:
            seed_cfg = dataclasses.replace(cfg, seed=seed)
            net, _ = train_seg(samples, seed_cfg, log=log, probabilities=probabilities, workers=workers)
            score = evaluate_model(net, test_samples, workers).f1
            logger.info('Scenario %s, seed %d: F1 %.4f', scenario.name, seed, score)
            if log is not None:
                log.write('comparison', scenario=scenario.name, seed=seed, f1=score)
            scores.append(score)
        rows.append(ComparisonRow(scenario.name, seeds, scores))
    return ComparisonTable(rows)
