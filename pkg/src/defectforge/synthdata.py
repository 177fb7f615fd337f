"""
Procedural stand-in for the button dataset: textured circular button
backgrounds, defect references of three kinds with exact masks, placement
sampling for generation and the seeded benchmark splits.

Classes:
========
    SynthSpec

Functions:
==========
    random_spec
    make_background
    button_area
    make_defect_reference
    sample_placements
    make_benchmark

Miscellaneous objects:
======================
    Except the above, all other objects in this module are to be considered implementation details.
"""

import dataclasses
import logging
import os
from typing import Tuple

import numpy as np
from scipy import ndimage

from .config import BenchmarkConfig
from .config import DEFECT_KINDS
from .dstpipeline import ManifestEntry
from .dstpipeline import Placement
from .dstpipeline import write_manifest
from .exceptions import IoError
from .imagecore import Image
from .imagecore import RegionMask
from .imagecore import write_mask_png
from .imagecore import write_png

logger = logging.getLogger(__name__)

BUTTON_RADIUS = 0.45
SURROUND = 0.08
HOLE_OFFSET = 0.12
HOLE_RADIUS = 0.05
HOLE_VALUE = 0.1
NOISE_SIGMA = 1.0
SCRATCH_HALF_WIDTH = 0.75
SPLITS = ('backgrounds', 'references', 'real_train', 'test')

# generator streams derived from one item seed
_TEXTURE_STREAM = 0
_DEFECT_STREAM = 1
_SPEC_STREAM = 2


@dataclasses.dataclass(frozen=True)
class SynthSpec:
    """
    Everything that determines one synthetic button image.

    *defect_scale* is the typical defect extent as a fraction of *size*.
    """
    size: int = 64
    base_color: Tuple[float, float, float] = (0.78, 0.70, 0.55)
    ring_count: int = 6
    noise_amplitude: float = 0.04
    kind: str = 'stain'
    defect_scale: float = 0.1
    thread_holes: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.size < 16 or self.size % 16:
            raise ValueError('synthetic images must be a positive multiple of 16, got {}'.format(self.size))
        if not 0.0 <= self.noise_amplitude <= 0.2:
            raise ValueError('noise amplitude must lie in [0, 0.2]')
        if len(self.base_color) != 3 or not all(0.2 <= c <= 0.9 for c in self.base_color):
            raise ValueError('base color channels must lie in [0.2, 0.9]')
        if self.ring_count < 0:
            raise ValueError('ring count must be non-negative')
        if self.kind not in DEFECT_KINDS:
            raise ValueError('unknown defect kind {!r}; expected one of {}'.format(self.kind, DEFECT_KINDS))
        if not 0.02 <= self.defect_scale <= 0.3:
            raise ValueError('defect scale must lie in [0.02, 0.3]')


def random_spec(seed, size=64, kind='stain'):
    """
    Draws texture parameters for one benchmark item from *seed*.

    :rtype: SynthSpec
    """
    rng = np.random.default_rng([seed, _SPEC_STREAM])
    base = np.array([0.78, 0.70, 0.55]) + rng.uniform(-0.08, 0.08, size=3)
    return SynthSpec(
        size=size,
        base_color=tuple(float(c) for c in np.clip(base, 0.2, 0.9)),
        ring_count=int(rng.integers(4, 9)),
        noise_amplitude=0.04,
        kind=kind,
        defect_scale=float(rng.uniform(0.08, 0.12)),
        seed=int(seed),
    )


def _grid(size):
    center = (size - 1) / 2.0
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    return yy - center, xx - center


def _holes(size):
    dy, dx = _grid(size)
    offset = HOLE_OFFSET * size
    radius = HOLE_RADIUS * size
    inside = np.zeros((size, size), dtype=bool)
    for cy, cx in ((offset, 0.0), (-offset, 0.0), (0.0, offset), (0.0, -offset)):
        inside |= np.hypot(dy - cy, dx - cx) < radius
    return inside


def button_area(spec):
    """
    The pixels of the button face: the disc minus its thread holes.

    :rtype: RegionMask
    """
    dy, dx = _grid(spec.size)
    disc = np.hypot(dy, dx) <= BUTTON_RADIUS * spec.size
    if spec.thread_holes:
        disc &= ~_holes(spec.size)
    return RegionMask(disc)


def make_background(spec):
    """
    Renders a defect-free button: a disc with concentric rings, a slight
    rim shading and band-limited noise, thread holes and a dark surround.

    With zero noise the image is symmetric under 90 degree rotations.

    :rtype: Image
    """
    n = spec.size
    dy, dx = _grid(n)
    r = np.hypot(dy, dx)
    radius = BUTTON_RADIUS * n
    rings = 0.5 + 0.5 * np.cos(2.0 * np.pi * spec.ring_count * r / radius)
    shading = 0.82 + 0.12 * rings - 0.1 * (r / radius) ** 2

    if spec.noise_amplitude > 0:
        rng = np.random.default_rng([spec.seed, _TEXTURE_STREAM])
        noise = ndimage.gaussian_filter(rng.standard_normal((n, n)), NOISE_SIGMA, mode='wrap')
        noise /= max(float(noise.std()), 1e-12)
        shading = shading + spec.noise_amplitude * noise

    data = shading[..., None] * np.asarray(spec.base_color, dtype=np.float64)[None, None, :]
    data[r > radius] = SURROUND
    if spec.thread_holes:
        data[_holes(n)] = HOLE_VALUE
    return Image(np.clip(data, 0.0, 1.0))


def _defect_center(size, rng):
    angle = rng.uniform(0.0, 2.0 * np.pi)
    distance = rng.uniform(0.1, 0.3) * size
    center = (size - 1) / 2.0
    return center + distance * np.sin(angle), center + distance * np.cos(angle)


def _ellipse(size, center, a, b, phi):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    y, x = yy - center[0], xx - center[1]
    u = x * np.cos(phi) + y * np.sin(phi)
    v = -x * np.sin(phi) + y * np.cos(phi)
    return (u / a) ** 2 + (v / b) ** 2


def _segment_distance(size, p, q):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    d = np.subtract(q, p)
    length2 = max(float(d @ d), 1e-12)
    t = np.clip(((yy - p[0]) * d[0] + (xx - p[1]) * d[1]) / length2, 0.0, 1.0)
    return np.hypot(yy - (p[0] + t * d[0]), xx - (p[1] + t * d[1]))


def _defect_shape(kind, size, scale, rng, center=None):
    """
    Draws the geometry of one defect. Returns the boolean mask and a
    profile in ``[0, 1]`` (1 at the core) used for shading.
    """
    if center is None:
        center = _defect_center(size, rng)
    extent = scale * size
    if kind == 'stain':
        a, b = rng.uniform(0.6, 1.2, size=2) * extent
        rho = _ellipse(size, center, a, b, rng.uniform(0.0, np.pi))
        return rho <= 1.0, np.clip(1.0 - rho, 0.0, 1.0)
    if kind == 'hole':
        a, b = rng.uniform(0.4, 0.7, size=2) * extent
        rho = _ellipse(size, center, a, b, rng.uniform(0.0, np.pi))
        return rho <= 1.0, np.ones((size, size))
    # scratch: a three-segment polyline
    points = [np.asarray(center, dtype=np.float64)]
    heading = rng.uniform(0.0, 2.0 * np.pi)
    for _ in range(3):
        heading += rng.uniform(-0.5, 0.5)
        step = rng.uniform(0.8, 1.4) * extent
        points.append(points[-1] + step * np.array([np.sin(heading), np.cos(heading)]))
    distance = np.min([_segment_distance(size, p, q) for p, q in zip(points, points[1:])], axis=0)
    inside = distance <= SCRATCH_HALF_WIDTH
    return inside, np.clip(1.0 - distance / (2 * SCRATCH_HALF_WIDTH), 0.0, 1.0)


def _apply_defect(data, kind, inside, profile):
    out = data.copy()
    region = data[inside]
    weight = profile[inside][:, None]
    if kind == 'stain':
        tint = np.array([0.55, 0.42, 0.3])
        out[inside] = region * (1.0 - 0.6 * weight) + 0.6 * weight * tint * region
    elif kind == 'scratch':
        out[inside] = region + (1.0 - region) * (0.5 + 0.3 * weight)
    else:
        out[inside] = 0.02 + 0.02 * region
    return np.clip(out, 0.0, 1.0)


def make_defect_reference(spec):
    """
    Renders a button carrying one defect of ``spec.kind`` and returns it
    with the exact defect mask. Pixels outside the mask equal
    :func:`make_background` of the same spec.

    :rtype: Tuple[Image, RegionMask]
    """
    background = make_background(spec)
    rng = np.random.default_rng([spec.seed, _DEFECT_STREAM])
    inside, profile = _defect_shape(spec.kind, spec.size, spec.defect_scale, rng)
    mask = RegionMask(inside).require_nonempty('{} defect'.format(spec.kind))
    return Image(_apply_defect(background.data, spec.kind, inside, profile)), mask


def sample_placements(backgrounds, kind, count, seed, scale=0.1, attempts=100):
    """
    Draws *count* target regions shaped like *kind* defects.

    *backgrounds* is a list of ``(background_id, RegionMask)`` pairs giving
    each background's button area; placements cycle through it in a
    seeded order and every region is clipped to the button area.

    :rtype: List[~defectforge.dstpipeline.Placement]
    """
    if not backgrounds:
        raise ValueError('sample_placements needs at least one background')
    rng = np.random.default_rng([seed, DEFECT_KINDS.index(kind)])
    order = rng.permutation(len(backgrounds))
    placements = []
    for index in range(count):
        background_id, area = backgrounds[order[index % len(order)]]
        size = area.height
        for _ in range(attempts):
            inside, _ = _defect_shape(kind, size, scale, rng)
            inside &= area.bits
            if inside.any():
                break
        else:
            raise ValueError('no {} placement fits background {}'.format(kind, background_id))
        placements.append(Placement(background_id, RegionMask(inside)))
    return placements


def _item_seeds(seed, count):
    children = np.random.SeedSequence(seed).spawn(count)
    return [int(child.generate_state(1)[0]) for child in children]


def _write_item(split_dir, stem, image, mask):
    image_path = os.path.join(split_dir, 'images', stem + '.png')
    mask_path = os.path.join(split_dir, 'masks', stem + '.png')
    write_png(image, image_path)
    write_mask_png(mask, mask_path)
    return image_path, mask_path


def make_benchmark(counts=None, out_dir='benchmark', seed=7, size=None):
    """
    Writes the four disjoint splits of the synthetic benchmark under
    *out_dir*, each as ``<split>/images``, ``<split>/masks`` and
    ``<split>/manifest.jsonl``:

    ``backgrounds``
        defect-free buttons, masked by their button area;
    ``references``
        one defect reference per entry, kinds in rotation;
    ``real_train`` and ``test``
        buttons with one defect each, masked by the defect.

    Every item gets its own seed spawned from *seed*. Returns the manifest
    path of every split.

    :rtype: Dict[str, str]
    """
    counts = counts or BenchmarkConfig()
    size = size or counts.size
    kinds = counts.kind_list()
    sizes = [counts.backgrounds, counts.references, counts.real_train, counts.test]
    seeds = iter(_item_seeds(seed, sum(sizes)))
    manifests = {}

    for split, total in zip(SPLITS, sizes):
        split_dir = os.path.join(out_dir, split)
        try:
            os.makedirs(os.path.join(split_dir, 'images'), exist_ok=True)
            os.makedirs(os.path.join(split_dir, 'masks'), exist_ok=True)
        except OSError as exc:
            raise IoError('cannot create {}: {}'.format(split_dir, exc))
        entries = []
        for index in range(total):
            item_seed = next(seeds)
            if split == 'backgrounds':
                kind = 'none'
                spec = random_spec(item_seed, size)
                image, mask = make_background(spec), button_area(spec)
            else:
                kind = kinds[index % len(kinds)]
                image, mask = make_defect_reference(random_spec(item_seed, size, kind))
            image_path, mask_path = _write_item(split_dir, '{}-{:05d}'.format(split, index), image, mask)
            entries.append(ManifestEntry(image_path, mask_path, kind, '{}-{:05d}'.format(split, index), item_seed))
        manifests[split] = write_manifest(os.path.join(split_dir, 'manifest.jsonl'), entries)
        logger.info('Wrote %d %s items to %s', total, split, split_dir)
    return manifests
