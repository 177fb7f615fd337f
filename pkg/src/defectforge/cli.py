"""
Command line entry point::

    defectforge [--config run.ini] [--verbose] COMMAND [options]

Commands follow the generation-then-segmentation workflow: ``synth`` writes
the benchmark, ``train-dst`` trains one transfer network per defect type,
``generate`` renders simulated samples, ``train-seg`` and ``eval`` train and
score Buttonlab, ``compare`` runs the scenario comparison and ``gradcheck``
runs the gradient suite.

Exit status is 0 on success, 1 on a usage error and 2 on a runtime failure.
"""

import argparse
import functools
import logging
import os
import sys

from . import __version__
from .buttonlab import SegNet
from .buttonlab import load_samples
from .buttonlab import mix_manifests
from .buttonlab import train_seg
from .config import default_config
from .config import load_config
from .dstpipeline import batch_generate
from .dstpipeline import load_entry
from .dstpipeline import read_manifest
from .dstpipeline import train_dst
from .evalkit import build_scenarios
from .evalkit import evaluate_model
from .evalkit import run_comparison
from .evalkit import validation_f1
from .exceptions import DefectForgeError
from .exceptions import NoData
from .exceptions import UsageError
from .gradsuite import run_gradsuite
from .runlog import RunLog
from .synthdata import make_benchmark
from .synthdata import sample_placements
from .transfernet import TransferNet

logger = logging.getLogger(__name__)

SPLIT_MANIFEST = os.path.join('{}', 'manifest.jsonl')


class ArgumentParser(argparse.ArgumentParser):
    """
    Raises :class:`~defectforge.exceptions.UsageError` instead of exiting.
    """

    def error(self, message):
        raise UsageError('{}\n{}'.format(self.format_usage().strip(), message))


def _split(text):
    return [item.strip() for item in text.split(',') if item.strip()]


def build_parser():
    parser = ArgumentParser(prog='defectforge', description='Defect style transfer and Buttonlab segmentation')
    parser.add_argument('--config', help='INI run configuration')
    parser.add_argument('--verbose', action='store_true', help='log every iteration')
    parser.add_argument('--version', action='version', version='%(prog)s ' + __version__)
    commands = parser.add_subparsers(dest='command', metavar='COMMAND', parser_class=ArgumentParser)
    commands.required = True

    synth = commands.add_parser('synth', help='write the synthetic benchmark')
    synth.add_argument('--seed', type=int, help='benchmark seed (default: seeds.synth)')
    synth.add_argument('--out', help='output directory (default: paths.benchmark)')

    dst = commands.add_parser('train-dst', help='train one transfer network per defect type')
    dst.add_argument('--types', help='comma separated defect types (default: benchmark.kinds)')

    generate = commands.add_parser('generate', help='render simulated samples')
    generate.add_argument('--mode', choices=('dst', 'histmatch'), default='dst')
    generate.add_argument('--count', type=int, help='total samples (default: benchmark.generated)')
    generate.add_argument('--types', help='comma separated defect types (default: benchmark.kinds)')

    seg = commands.add_parser('train-seg', help='train Buttonlab')
    seg.add_argument('--train', action='append', help='training manifest, repeatable (default: real_train)')
    seg.add_argument('--validate', help='manifest scored after every epoch')
    seg.add_argument('--out', help='model archive (default: paths.models/buttonlab.dstw)')

    evaluate = commands.add_parser('eval', help='score a Buttonlab model')
    evaluate.add_argument('--model', help='model archive (default: paths.models/buttonlab.dstw)')
    evaluate.add_argument('--test', help='test manifest (default: the benchmark test split)')

    compare = commands.add_parser('compare', help='compare training sets over several seeds')
    compare.add_argument('--scenarios', default='real,real+hist,real+dst', help='comma separated scenario names')
    compare.add_argument('--seeds', help='a seed count or a comma separated seed list (default: seeds.compare)')

    grad = commands.add_parser('gradcheck', help='run the gradient suite')
    grad.add_argument('--dtypes', default='float64,float32', help='comma separated float widths')
    return parser


def _benchmark_manifest(cfg, split):
    return os.path.join(cfg.paths.benchmark, SPLIT_MANIFEST.format(split))


def _kinds(cfg, text):
    return _split(text) if text else cfg.benchmark.kind_list()


def _backgrounds(cfg):
    images, areas = {}, []
    for entry in read_manifest(_benchmark_manifest(cfg, 'backgrounds')):
        image, area = load_entry(entry)
        images[entry.background_id] = image
        areas.append((entry.background_id, area))
    if not areas:
        raise NoData('the benchmark holds no backgrounds')
    return images, areas


def _reference(cfg, kind):
    for entry in read_manifest(_benchmark_manifest(cfg, 'references')):
        if entry.defect_type == kind:
            return entry
    raise NoData('the benchmark holds no {} reference'.format(kind))


def _open_log(cfg, name, args):
    os.makedirs(cfg.paths.runs, exist_ok=True)
    log = RunLog(os.path.join(cfg.paths.runs, name + '.jsonl'))
    log.write('config', command=args.command, config=cfg.as_dict())
    return log


def cmd_synth(cfg, args):
    seed = cfg.seeds.synth if args.seed is None else args.seed
    out = args.out or cfg.paths.benchmark
    with _open_log(cfg, 'synth', args) as log:
        log.write('benchmark', seed=seed, out=out)
        manifests = make_benchmark(cfg.benchmark, out, seed)
        for split, path in manifests.items():
            log.write('split', split=split, manifest=path, items=len(read_manifest(path)))
            print('{:<12}{}'.format(split, path))


def cmd_train_dst(cfg, args):
    cfg.require('benchmark')
    images, areas = _backgrounds(cfg)
    fx = cfg.extractor.build()
    os.makedirs(cfg.paths.models, exist_ok=True)
    for kind in _kinds(cfg, args.types):
        H, M = load_entry(_reference(cfg, kind))
        placements = sample_placements(areas, kind, len(areas), cfg.dst.seed)
        pairs = [(images[p.background_id], p.region) for p in placements]
        with _open_log(cfg, 'dst-' + kind, args) as log:
            net, history = train_dst(pairs, H, M, cfg.dst, fx=fx, log=log)
        path = os.path.join(cfg.paths.models, 'dst-{}.dstw'.format(kind))
        net.save(path)
        print('{:<10}{:>8} iterations  final total {:.6g}  {}'.format(kind, len(history), history[-1].total, path))


def cmd_generate(cfg, args):
    total = cfg.benchmark.generated if args.count is None else args.count
    if total < 1:
        raise UsageError('--count must be at least 1')
    cfg.require(*(['benchmark', 'models'] if args.mode == 'dst' else ['benchmark']))
    images, areas = _backgrounds(cfg)
    kinds = _kinds(cfg, args.types)
    with _open_log(cfg, 'generate-' + args.mode, args) as log:
        for index, kind in enumerate(kinds):
            count = total // len(kinds) + (1 if index < total % len(kinds) else 0)
            if not count:
                continue
            reference = _reference(cfg, kind)
            H, M = load_entry(reference)
            net = None
            if args.mode == 'dst':
                net = TransferNet.load(os.path.join(cfg.paths.models, 'dst-{}.dstw'.format(kind)), cfg.dst.scale)
            placements = sample_placements(areas, kind, count, cfg.dst.seed + 1)
            out_dir = os.path.join(cfg.paths.generated, args.mode, kind)
            manifest = batch_generate(net, images, placements, H, M, cfg.dst, out_dir, kind,
                                      reference.background_id, args.mode)
            for entry in read_manifest(manifest):
                log.write('sample', defect_type=kind, reference_id=reference.background_id,
                          background_id=entry.background_id, seed=entry.seed,
                          image=os.path.relpath(entry.image, cfg.paths.generated))
            print('{:<10}{:>6} samples  {}'.format(kind, count, manifest))


def _generated(cfg, mode):
    root = os.path.join(cfg.paths.generated, mode)
    if not os.path.isdir(root):
        return []
    paths = [os.path.join(root, kind, 'manifest.jsonl') for kind in sorted(os.listdir(root))]
    return [path for path in paths if os.path.isfile(path)]


def cmd_train_seg(cfg, args):
    if not args.train:
        cfg.require('benchmark')
    manifests = args.train or [_benchmark_manifest(cfg, 'real_train')]
    entries, probabilities = mix_manifests([(read_manifest(path), None) for path in manifests])
    validate = None
    if args.validate:
        validate = functools.partial(validation_f1, samples=load_samples(read_manifest(args.validate)))
    with _open_log(cfg, 'seg', args) as log:
        net, history = train_seg(entries, cfg.seg, validate=validate, log=log, probabilities=probabilities)
    out = args.out or os.path.join(cfg.paths.models, 'buttonlab.dstw')
    os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
    net.save(out)
    print('{} epochs  final loss {:.6g}  {}'.format(len(history), history[-1]['loss'], out))


def cmd_eval(cfg, args):
    cfg.require(*([] if args.test else ['benchmark']) + ([] if args.model else ['models']))
    model = args.model or os.path.join(cfg.paths.models, 'buttonlab.dstw')
    net = SegNet.load(model, cfg.seg.scale, cfg.seg.num_classes)
    report = evaluate_model(net, read_manifest(args.test or _benchmark_manifest(cfg, 'test')))
    with _open_log(cfg, 'eval', args) as log:
        log.write('evaluation', **report.as_dict())
    print('precision {:.4f}  recall {:.4f}  F1 {:.4f}'.format(report.precision, report.recall, report.f1))


def _seeds(cfg, text):
    if not text:
        return cfg.seeds.compare_seeds()
    try:
        if ',' in text:
            return [int(s) for s in _split(text)]
        return list(range(int(text)))
    except ValueError:
        raise UsageError('--seeds takes a count or a comma separated list, got {!r}'.format(text))


def cmd_compare(cfg, args):
    manifests = {'real_train': _benchmark_manifest(cfg, 'real_train')}
    for key, mode in (('hist', 'histmatch'), ('dst', 'dst')):
        paths = _generated(cfg, mode)
        if paths:
            manifests[key] = paths
    try:
        scenarios = build_scenarios(_split(args.scenarios), manifests)
    except ValueError as exc:
        raise UsageError(str(exc))
    cfg.require('benchmark')
    with _open_log(cfg, 'compare', args) as log:
        table = run_comparison(scenarios, _seeds(cfg, args.seeds), _benchmark_manifest(cfg, 'test'), cfg.seg, log)
    text = table.to_text()
    with open(os.path.join(cfg.paths.runs, 'compare.txt'), 'w', encoding='utf-8') as fh:
        fh.write(text)
    with open(os.path.join(cfg.paths.runs, 'compare.jsonl'), 'w', encoding='utf-8') as fh:
        fh.write(table.to_json_lines())
    sys.stdout.write(text)


def cmd_gradcheck(cfg, args):
    with _open_log(cfg, 'gradcheck', args) as log:
        results = run_gradsuite(_split(args.dtypes))
        for result in results:
            log.write('gradient', **result.as_dict())
    for result in results:
        print('{:<10}{:<9}{:>12.3e}  < {:.0e}  {}'.format(
            result.name, result.dtype, result.error, result.threshold, 'ok' if result.passed else 'FAILED'))
    if not all(result.passed for result in results):
        raise DefectForgeError('gradient check failed')


COMMANDS = {
    'synth': cmd_synth,
    'train-dst': cmd_train_dst,
    'generate': cmd_generate,
    'train-seg': cmd_train_seg,
    'eval': cmd_eval,
    'compare': cmd_compare,
    'gradcheck': cmd_gradcheck,
}


def main(argv=None):
    """
    Runs one command and returns the process exit status.
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        sys.stderr.write('{}\n'.format(exc))
        return 1

    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format='%(asctime)s %(levelname)s %(name)s: %(message)s',
    )
    try:
        cfg = load_config(args.config) if args.config else default_config(os.getcwd())
        COMMANDS[args.command](cfg, args)
    except UsageError as exc:
        sys.stderr.write('{}\n'.format(exc))
        return 1
    except (DefectForgeError, OSError) as exc:
        logger.error('%s failed: %s', args.command, exc)
        return 2
    return 0


if __name__ == '__main__':
    sys.exit(main())
