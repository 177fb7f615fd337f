"""
Defect style transfer end to end: coarse harmonization by masked histogram
matching, training of the transfer network against the whole loss, and
batch generation of simulated samples with their labels.

Classes:
========
    SimSample
    Placement
    ManifestEntry

Functions:
==========
    coarse_harmonize
    train_dst
    generate_sample
    generate_histmatch_sample
    batch_generate
    write_manifest
    read_manifest
    load_entry

Miscellaneous objects:
======================
    Except the above, all other objects in this module are to be considered implementation details.
"""

import concurrent.futures
import dataclasses
import json
import logging
import math
import os

import numpy as np

from . import diffcore
from .config import DstConfig
from .config import worker_count
from .exceptions import Diverged
from .exceptions import IoError
from .exceptions import NoData
from .exceptions import ShapeMismatch
from .featurenet import build_extractor
from .imagecore import RegionMask
from .imagecore import gaussian_fusion_mask
from .imagecore import hist_match_region
from .imagecore import read_mask_png
from .imagecore import read_png
from .imagecore import write_mask_png
from .imagecore import write_png
from .losses import LossReport
from .losses import LossTaps
from .losses import whole_loss
from .runlog import RunLog
from .transfernet import check_input
from .transfernet import fuse
from .transfernet import init_transfer_net
from .transfernet import network_output
from .transfernet import transfer_forward

logger = logging.getLogger(__name__)

__all__ = [
    'DstConfig',
    'ManifestEntry',
    'Placement',
    'SimSample',
    'batch_generate',
    'coarse_harmonize',
    'generate_histmatch_sample',
    'generate_sample',
    'load_entry',
    'read_manifest',
    'train_dst',
    'write_manifest',
]


class SimSample(object):
    """
    A simulated defect image and its label.

    *provenance* holds ``reference_id``, ``background_id`` and ``seed``.
    """

    def __init__(self, image, label, provenance):
        self.image = image
        self.label = label
        self.provenance = dict(provenance)

    def validate(self, background):
        """
        Checks that the label is non-empty and that every pixel outside it
        equals *background* exactly.

        :raises ValueError: when an invariant does not hold.
        """
        self.label.require_nonempty('sample label')
        if self.image.shape != background.shape or self.label.shape != self.image.shape[:2]:
            raise ShapeMismatch('sample, label and background shapes disagree')
        outside = ~self.label.bits
        if not np.array_equal(self.image.data[outside], background.data[outside]):
            raise ValueError('sample differs from its background outside the label')
        return self


@dataclasses.dataclass
class Placement:
    """
    Where to generate a defect: a target region on a named background.
    """
    background_id: str
    region: RegionMask


@dataclasses.dataclass
class ManifestEntry:
    """
    One line of a dataset manifest. *image* and *mask* are stored relative
    to the manifest and resolved to absolute paths on read.
    """
    image: str
    mask: str
    defect_type: str
    background_id: str
    seed: int

    def as_dict(self, root=None):
        record = dataclasses.asdict(self)
        if root is not None:
            record['image'] = os.path.relpath(self.image, root)
            record['mask'] = os.path.relpath(self.mask, root)
        return record


def write_manifest(path, entries):
    """
    Writes *entries* as UTF-8 JSON lines with paths relative to the manifest.
    """
    root = os.path.dirname(os.path.abspath(path))
    try:
        with open(path, 'w', encoding='utf-8') as fh:
            for entry in entries:
                fh.write(json.dumps(entry.as_dict(root), sort_keys=True) + '\n')
    except OSError as exc:
        raise IoError('cannot write manifest {}: {}'.format(path, exc))
    return path


def read_manifest(path):
    """
    Reads a manifest; the returned entries carry absolute paths.

    :rtype: List[ManifestEntry]
    """
    root = os.path.dirname(os.path.abspath(path))
    entries = []
    try:
        with open(path, encoding='utf-8') as fh:
            for line in fh:
                if not line.strip():
                    continue
                record = json.loads(line)
                record['image'] = os.path.join(root, record['image'])
                record['mask'] = os.path.join(root, record['mask'])
                entries.append(ManifestEntry(**record))
    except OSError as exc:
        raise IoError('cannot read manifest {}: {}'.format(path, exc))
    except (KeyError, ValueError, TypeError) as exc:
        raise IoError('malformed manifest {}: {}'.format(path, exc))
    return entries


def load_entry(entry):
    """
    Returns the ``(Image, RegionMask)`` pair an entry points at.
    """
    return read_png(entry.image), read_mask_png(entry.mask)


def coarse_harmonize(S, L, H, M, bins=256):
    """
    Matches the colors of *S* inside *L* to the defect of *H* inside *M*;
    everything outside *L* stays as in *S*.

    :rtype: ~defectforge.imagecore.Image
    """
    return hist_match_region(S, L, H, M, bins)


def _mean_report(reports, weights):
    n = float(len(reports))
    return LossReport(
        sum(r.content for r in reports) / n,
        sum(r.style for r in reports) / n,
        sum(r.hist for r in reports) / n,
        sum(r.tv for r in reports) / n,
        weights,
    )


def train_dst(backgrounds, H, M, cfg=None, fx=None, log=None, taps=None):
    """
    Trains one transfer network for the defect shown by *H* inside *M*.

    *backgrounds* is a list of ``(S, L)`` pairs: defect-free images and the
    region of each where the defect is to be simulated. Every epoch visits
    the backgrounds in an order drawn from a generator seeded by
    ``cfg.seed``; each batch is harmonized, run through the network, scored
    with the whole loss and followed by one Adam update (gradients averaged
    over the batch).

    Returns ``(net, history)`` with one :class:`~defectforge.losses.LossReport`
    per update.

    :raises NoData: when *backgrounds* is empty.
    :raises Diverged: when the loss stops being finite.
    """
    cfg = cfg or DstConfig()
    if not backgrounds:
        raise NoData('train_dst needs at least one background')
    if fx is None:
        fx = build_extractor('seeded', 0)
    log = log if log is not None else RunLog()
    taps = taps or LossTaps()
    weights = cfg.weights

    prepared = []
    for S, L in backgrounds:
        check_input(S, L)
        if S.shape[:2] != (cfg.image_size, cfg.image_size):
            logger.warning('Background of size %dx%d differs from dst.image_size %d', S.shape[1], S.shape[0],
                           cfg.image_size)
        prepared.append((S, L, coarse_harmonize(S, L, H, M, cfg.bins), gaussian_fusion_mask(L, cfg.sigma)))

    net = init_transfer_net(cfg.seed, cfg.scale)
    optimizer = diffcore.Adam(net.params, lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    history = []
    iteration = 0
    logger.info('Training DST on %d backgrounds for %d epochs', len(prepared), cfg.epochs)

    for epoch in range(cfg.epochs):
        order = rng.permutation(len(prepared))
        for start in range(0, len(order), cfg.batch_size):
            optimizer.zero_grad()
            reports = []
            for index in order[start:start + cfg.batch_size]:
                S, L, matched, fusion = prepared[index]
                y_hat = fuse(network_output(net, matched), S, fusion)
                report = whole_loss(y_hat, matched, S, H, L, M, fx, weights, taps, bins=cfg.bins)
                if not math.isfinite(report.total):
                    raise Diverged(iteration)
                diffcore.backward(report.objective)
                reports.append(report)
            optimizer.step(grad_scale=1.0 / len(reports))

            report = reports[0] if len(reports) == 1 else _mean_report(reports, weights)
            report.objective = None
            history.append(report)
            log.write('iteration', epoch=epoch, iteration=iteration, **report.as_dict())
            logger.debug('DST iteration %d: total %.6g', iteration, report.total)
            iteration += 1
            if cfg.max_iterations is not None and iteration >= cfg.max_iterations:
                break
        logger.info('DST epoch %d done, last total %.6g', epoch, history[-1].total)
        if cfg.max_iterations is not None and iteration >= cfg.max_iterations:
            break
    return net, history


def generate_sample(net, S, L, H, M, cfg=None, reference_id='', background_id='', weights=None):
    """
    One harmonization and one network pass: the simulated image and its label *L*.

    :rtype: SimSample
    """
    cfg = cfg or DstConfig()
    matched = coarse_harmonize(S, L, H, M, cfg.bins)
    image = transfer_forward(net, matched, S, L, cfg.sigma, weights)
    provenance = {'reference_id': reference_id, 'background_id': background_id, 'seed': cfg.seed}
    return SimSample(image, L, provenance)


def generate_histmatch_sample(S, L, H, M, cfg=None, reference_id='', background_id=''):
    """
    The coarse-harmonized image alone, used as the hist-match-only baseline.

    :rtype: SimSample
    """
    cfg = cfg or DstConfig()
    L.require_nonempty('target region')
    matched = coarse_harmonize(S, L, H, M, cfg.bins)
    provenance = {'reference_id': reference_id, 'background_id': background_id, 'seed': cfg.seed}
    return SimSample(matched, L, provenance)


def batch_generate(net, backgrounds, placements, H, M, cfg, out_dir, defect_type='defect',
                   reference_id='', mode='dst', workers=None):
    """
    Generates one sample per placement and writes ``images/*.png``,
    ``masks/*.png`` and ``manifest.jsonl`` under *out_dir*.

    *backgrounds* maps background ids to images. Samples are computed on up
    to *workers* threads (default: :func:`~defectforge.config.worker_count`)
    and written in placement order by the calling thread. *mode* is
    ``'dst'`` for the full pipeline or ``'histmatch'`` for the baseline.

    Returns the path of the manifest.
    """
    if mode not in ('dst', 'histmatch'):
        raise ValueError('unknown generation mode {!r}'.format(mode))
    image_dir = os.path.join(out_dir, 'images')
    mask_dir = os.path.join(out_dir, 'masks')
    try:
        os.makedirs(image_dir, exist_ok=True)
        os.makedirs(mask_dir, exist_ok=True)
    except OSError as exc:
        raise IoError('cannot create {}: {}'.format(out_dir, exc))

    frozen = net.frozen() if net is not None else None

    def produce(placement):
        S = backgrounds[placement.background_id]
        if mode == 'histmatch':
            sample = generate_histmatch_sample(S, placement.region, H, M, cfg, reference_id, placement.background_id)
        else:
            sample = generate_sample(frozen, S, placement.region, H, M, cfg, reference_id, placement.background_id)
        return sample.validate(S)

    workers = workers or worker_count()
    entries = []
    with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as pool:
        for index, sample in enumerate(pool.map(produce, placements)):
            stem = '{}-{:05d}.png'.format(defect_type, index)
            image_path = os.path.join(image_dir, stem)
            mask_path = os.path.join(mask_dir, stem)
            write_png(sample.image, image_path)
            write_mask_png(sample.label, mask_path)
            entries.append(ManifestEntry(
                image=image_path,
                mask=mask_path,
                defect_type=defect_type,
                background_id=sample.provenance['background_id'],
                seed=sample.provenance['seed'],
            ))
    manifest = write_manifest(os.path.join(out_dir, 'manifest.jsonl'), entries)
    logger.info('Wrote %d %s samples to %s', len(entries), mode, out_dir)
    return manifest
