"""
Run configuration.

A run is described by one INI file whose sections mirror the dataclasses
below::

    [dst]
    lr = 1e-3
    epochs = 10

    [seg]
    batch_size = 8

    [paths]
    benchmark = benchmark

Unknown sections and keys are errors. Relative paths are resolved against
the directory holding the file.
"""

import configparser
import dataclasses
import os
import typing
from typing import Optional

from .exceptions import ConfigError
from .featurenet import ExtractorSpec
from .featurenet import build_extractor
from .losses import LossWeights
from .transfernet import SCALES

THREADS_VARIABLE = 'DEFECTFORGE_THREADS'
SAMPLING_MODES = ('with_replacement', 'without_replacement')
DEFECT_KINDS = ('stain', 'scratch', 'hole')


def _require(condition, message):
    if not condition:
        raise ConfigError(message)


@dataclasses.dataclass
class DstConfig:
    """
    Training and generation settings of one defect style transfer model.
    """
    lr: float = 1e-3
    epochs: int = 10
    w_c: float = 1e5
    w_s: float = 2.5e-4
    w_h: float = 10.0
    w_tv: float = 1.0
    sigma: Optional[float] = None
    seed: int = 0
    batch_size: int = 1
    image_size: int = 64
    scale: str = 'desk'
    bins: int = 256
    max_iterations: Optional[int] = None

    def __post_init__(self):
        _require(self.lr > 0, 'dst.lr must be positive')
        _require(self.epochs >= 1, 'dst.epochs must be at least 1')
        _require(self.batch_size >= 1, 'dst.batch_size must be at least 1')
        _require(self.scale in SCALES, 'dst.scale must be one of {}'.format(SCALES))
        _require(self.bins >= 2, 'dst.bins must be at least 2')
        _require(self.image_size >= 8 and self.image_size % 4 == 0, 'dst.image_size must be a multiple of 4, >= 8')
        _require(self.sigma is None or self.sigma >= 0, 'dst.sigma must be non-negative')
        _require(self.max_iterations is None or self.max_iterations >= 1, 'dst.max_iterations must be positive')
        try:
            self.weights
        except ValueError as exc:
            raise ConfigError(str(exc))

    @property
    def weights(self):
        return LossWeights(self.w_c, self.w_s, self.w_h, self.w_tv)


@dataclasses.dataclass
class SegConfig:
    """
    Training settings of the segmentation network.

    ``sampling='without_replacement'`` walks a fresh permutation of the
    training set every epoch; ``'with_replacement'`` draws
    *steps_per_epoch* random batches per epoch.
    """
    lr: float = 2e-3
    epochs: int = 120
    batch_size: int = 8
    steps_per_epoch: int = 100
    sampling: str = 'with_replacement'
    crop_size: Optional[int] = None
    scale: str = 'desk'
    seed: int = 0
    num_classes: int = 2
    max_steps: Optional[int] = None

    def __post_init__(self):
        _require(self.lr > 0, 'seg.lr must be positive')
        _require(self.epochs >= 1, 'seg.epochs must be at least 1')
        _require(self.batch_size >= 1, 'seg.batch_size must be at least 1')
        _require(self.steps_per_epoch >= 1, 'seg.steps_per_epoch must be at least 1')
        _require(self.sampling in SAMPLING_MODES, 'seg.sampling must be one of {}'.format(SAMPLING_MODES))
        _require(self.crop_size is None or (self.crop_size >= 16 and self.crop_size % 16 == 0),
                 'seg.crop_size must be a positive multiple of 16')
        _require(self.scale in SCALES, 'seg.scale must be one of {}'.format(SCALES))
        _require(self.num_classes >= 2, 'seg.num_classes must be at least 2')
        _require(self.max_steps is None or self.max_steps >= 1, 'seg.max_steps must be positive')


@dataclasses.dataclass
class ExtractorConfig:
    """
    Feature extractor choice; ``channels``, ``strides`` and ``taps`` are
    comma separated (``taps = t1:1,t2:3``).
    """
    mode: str = 'seeded'
    seed: int = 0
    path: Optional[str] = None
    channels: str = '8,8,16,16,32,32,64,64'
    strides: str = '1,1,2,1,2,1,2,1'
    taps: str = 't1:1,t2:3,t3:5,t4:7'

    def __post_init__(self):
        _require(self.mode in ('seeded', 'archive'), 'extractor.mode must be seeded or archive')
        _require(self.mode != 'archive' or self.path, 'extractor.path is required in archive mode')
        try:
            self.spec()
        except ValueError as exc:
            raise ConfigError('invalid extractor layout: {}'.format(exc))

    def spec(self):
        taps = {}
        for item in _split(self.taps):
            name, _, layer = item.partition(':')
            taps[name.strip()] = int(layer)
        return ExtractorSpec(
            channels=[int(c) for c in _split(self.channels)],
            strides=[int(s) for s in _split(self.strides)],
            taps=taps,
        )

    def build(self):
        return build_extractor(self.mode, self.seed, self.path, self.spec())


@dataclasses.dataclass
class PathsConfig:
    benchmark: str = 'benchmark'
    models: str = 'models'
    generated: str = 'generated'
    runs: str = 'runs'


@dataclasses.dataclass
class SeedsConfig:
    synth: int = 7
    compare: str = '0,1,2'

    def compare_seeds(self):
        return [int(s) for s in _split(self.compare)]


@dataclasses.dataclass
class BenchmarkConfig:
    """
    Sizes of the synthetic benchmark and of the generated set.
    """
    references: int = 3
    backgrounds: int = 40
    real_train: int = 5
    test: int = 30
    size: int = 64
    generated: int = 200
    kinds: str = ','.join(DEFECT_KINDS)

    def __post_init__(self):
        for name in ('references', 'backgrounds', 'real_train', 'test', 'generated'):
            _require(getattr(self, name) >= 1, 'benchmark.{} must be at least 1'.format(name))
        _require(self.size >= 16 and self.size % 16 == 0, 'benchmark.size must be a multiple of 16')
        unknown = set(self.kind_list()) - set(DEFECT_KINDS)
        _require(not unknown, 'unknown defect kinds: {}'.format(', '.join(sorted(unknown))))

    def kind_list(self):
        return _split(self.kinds)


SECTIONS = {
    'dst': DstConfig,
    'seg': SegConfig,
    'extractor': ExtractorConfig,
    'paths': PathsConfig,
    'seeds': SeedsConfig,
    'benchmark': BenchmarkConfig,
}


@dataclasses.dataclass
class RunConfig:
    """
    Every setting of a run, one attribute per INI section.
    """
    dst: DstConfig = dataclasses.field(default_factory=DstConfig)
    seg: SegConfig = dataclasses.field(default_factory=SegConfig)
    extractor: ExtractorConfig = dataclasses.field(default_factory=ExtractorConfig)
    paths: PathsConfig = dataclasses.field(default_factory=PathsConfig)
    seeds: SeedsConfig = dataclasses.field(default_factory=SeedsConfig)
    benchmark: BenchmarkConfig = dataclasses.field(default_factory=BenchmarkConfig)

    def as_dict(self):
        return dataclasses.asdict(self)

    def resolve(self, base_dir):
        """
        Makes every path absolute relative to *base_dir*.
        """
        for field in dataclasses.fields(PathsConfig):
            value = getattr(self.paths, field.name)
            setattr(self.paths, field.name, os.path.abspath(os.path.join(base_dir, value)))
        if self.extractor.path:
            self.extractor.path = os.path.abspath(os.path.join(base_dir, self.extractor.path))
            if not os.path.isfile(self.extractor.path):
                raise ConfigError('extractor archive {} does not exist'.format(self.extractor.path))
        return self

    def require(self, *names):
        """
        Checks that the ``[paths]`` directories a command reads from exist.

        :raises ConfigError: naming the first missing directory.
        """
        for name in names:
            path = getattr(self.paths, name)
            if not os.path.isdir(path):
                raise ConfigError('paths.{} = {} does not exist'.format(name, path))
        return self


def _split(text):
    return [item.strip() for item in str(text).split(',') if item.strip()]


def _convert(section, key, raw, annotation):
    optional = typing.get_origin(annotation) is typing.Union
    if optional:
        annotation = [a for a in typing.get_args(annotation) if a is not type(None)][0]
        if raw.strip().lower() in ('', 'none'):
            return None
    try:
        if annotation is bool:
            return raw.strip().lower() in ('1', 'true', 'yes', 'on')
        return annotation(raw.strip())
    except ValueError:
        raise ConfigError('{}.{}: cannot read {!r} as {}'.format(section, key, raw, annotation.__name__))


def _build_section(name, cls, values):
    hints = typing.get_type_hints(cls)
    known = {field.name for field in dataclasses.fields(cls)}
    kwargs = {}
    for key, raw in values.items():
        if key not in known:
            raise ConfigError('unknown key {!r} in section [{}]'.format(key, name))
        kwargs[key] = _convert(name, key, raw, hints[key])
    return cls(**kwargs)


def load_config(path):
    """
    Reads the INI file at *path* into a :class:`RunConfig`.

    :raises ConfigError: on unknown sections or keys and on invalid values.
    """
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path, encoding='utf-8') as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise ConfigError('cannot read config {}: {}'.format(path, exc))
    except configparser.Error as exc:
        raise ConfigError('malformed config {}: {}'.format(path, exc))

    unknown = [name for name in parser.sections() if name not in SECTIONS]
    if unknown:
        raise ConfigError('unknown section(s): {}'.format(', '.join(unknown)))
    sections = {
        name: _build_section(name, cls, dict(parser[name]) if parser.has_section(name) else {})
        for name, cls in SECTIONS.items()
    }
    return RunConfig(**sections).resolve(os.path.dirname(os.path.abspath(path)))


def default_config(base_dir='.'):
    return RunConfig().resolve(base_dir)


def worker_count():
    """
    Number of worker threads: ``DEFECTFORGE_THREADS`` when set, otherwise
    the number of logical cores.
    """
    raw = os.environ.get(THREADS_VARIABLE)
    if raw is None:
        return os.cpu_count() or 1
    try:
        value = int(raw)
    except ValueError:
        raise ConfigError('{} must be an integer, got {!r}'.format(THREADS_VARIABLE, raw))
    if value < 1:
        raise ConfigError('{} must be at least 1'.format(THREADS_VARIABLE))
    return value
