import json
import os
import tempfile
from unittest import TestCase

import numpy as np
import pytest

from defectforge import buttonlab
from defectforge import evalkit
from defectforge.dstpipeline import ManifestEntry
from defectforge.dstpipeline import read_manifest
from defectforge.dstpipeline import write_manifest
from defectforge.exceptions import NoData
from defectforge.exceptions import ShapeMismatch
from defectforge.imagecore import RegionMask
from defectforge.imagecore import write_mask_png
from defectforge.imagecore import write_png
from defectforge.runlog import RunLog
from tests.factories import SegConfigFactory
from tests.factories import dark_square_sample
from tests.factories import random_image


def constant_net(bias):
    """
    A network whose prediction ignores the image: logits equal *bias*.
    """
    net = buttonlab.init_buttonlab(0)
    net.params['decoder.head.weight'].value = np.zeros_like(net.params['decoder.head.weight'].value)
    net.params['decoder.head.bias'].value = np.asarray(bias, dtype=np.float32)
    return net


def write_samples(directory, samples, kind='stain'):
    os.makedirs(directory, exist_ok=True)
    entries = []
    for index, (image, label) in enumerate(samples):
        image_path = os.path.join(directory, 'image-{}.png'.format(index))
        mask_path = os.path.join(directory, 'mask-{}.png'.format(index))
        write_png(image, image_path)
        write_mask_png(RegionMask(label.classes != 0), mask_path)
        entries.append(ManifestEntry(image_path, mask_path, kind, 'bg-{}'.format(index), index))
    return write_manifest(os.path.join(directory, 'manifest.jsonl'), entries)


class ConfusionTests(TestCase):
    def test_counts(self):
        pred = np.array([[1, 1], [0, 0]])
        truth = np.array([[1, 0], [1, 0]])
        self.assertEqual(evalkit.confusion(pred, truth), evalkit.ConfusionCounts(tp=1, fp=1, fn=1, tn=1))

    def test_any_class_is_defect(self):
        pred = buttonlab.LabelMap([[2, 0]])
        truth = RegionMask([[True, True]])
        self.assertEqual(evalkit.confusion(pred, truth), evalkit.ConfusionCounts(tp=1, fn=1))

    def test_shape_mismatch(self):
        with self.assertRaises(ShapeMismatch):
            evalkit.confusion(np.zeros((2, 2)), np.zeros((2, 3)))

    def test_addition(self):
        total = evalkit.ConfusionCounts(1, 2, 3, 4) + evalkit.ConfusionCounts(1, 1, 1, 1)
        self.assertEqual(total, evalkit.ConfusionCounts(2, 3, 4, 5))
        self.assertEqual(total.total, 14)


class F1Tests(TestCase):
    def test_example(self):
        precision, recall, score = evalkit.f1(evalkit.ConfusionCounts(tp=3, fp=1, fn=2))
        self.assertAlmostEqual(precision, 0.75)
        self.assertAlmostEqual(recall, 0.6)
        self.assertAlmostEqual(score, 2 / 3.0)

    def test_empty_is_zero(self):
        self.assertEqual(evalkit.f1(evalkit.ConfusionCounts(tn=10)), (0.0, 0.0, 0.0))

    def test_no_true_positives(self):
        self.assertEqual(evalkit.f1(evalkit.ConfusionCounts(fp=3, fn=2))[2], 0.0)


class EvaluateModelTests(TestCase):
    def setUp(self):
        super(EvaluateModelTests, self).setUp()
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.full = buttonlab.LabelMap(np.ones((32, 32)))
        self.empty = buttonlab.LabelMap(np.zeros((32, 32)))

    def test_perfect_prediction(self):
        report = evalkit.evaluate_model(constant_net([0.0, 5.0]), [(random_image(0, 32, 32), self.full)])
        self.assertEqual((report.precision, report.recall, report.f1), (1.0, 1.0, 1.0))

    def test_background_prediction(self):
        report = evalkit.evaluate_model(constant_net([0.0, 0.0]), [(random_image(0, 32, 32), self.full)])
        self.assertEqual(report.counts, evalkit.ConfusionCounts(fn=32 * 32))
        self.assertEqual(report.f1, 0.0)

    def test_counts_pooled_over_images(self):
        samples = [(random_image(1, 32, 32), self.full), (random_image(2, 32, 32), self.empty)]
        report = evalkit.evaluate_model(constant_net([0.0, 5.0]), samples, workers=2)
        self.assertAlmostEqual(report.f1, 2 / 3.0)
        self.assertEqual([r['f1'] for r in report.per_image], [1.0, 0.0])
        self.assertEqual([r['index'] for r in report.per_image], [0, 1])

    def test_duplicated_test_set(self):
        net = buttonlab.init_buttonlab(4)
        samples = [dark_square_sample(32, 8, 8, seed=1), dark_square_sample(32, 16, 4, seed=2)]
        once = evalkit.evaluate_model(net, samples)
        twice = evalkit.evaluate_model(net, samples + samples)
        self.assertAlmostEqual(once.f1, twice.f1)

    def test_manifest_entries(self):
        manifest = write_samples(self.tmp.name, [dark_square_sample(32, 8, 8)])
        entries = read_manifest(manifest)
        report = evalkit.evaluate_model(constant_net([0.0, 5.0]), entries)
        self.assertEqual(report.per_image[0]['image'], entries[0].image)
        self.assertEqual(report.counts.tp, 64)
        self.assertEqual(sorted(report.as_dict()), ['counts', 'f1', 'per_image', 'precision', 'recall'])

    def test_empty_test_set(self):
        with self.assertRaises(NoData):
            evalkit.evaluate_model(constant_net([0.0, 0.0]), [])

    def test_validation_f1(self):
        samples = [(random_image(1, 32, 32), self.full), (random_image(2, 32, 32), self.empty)]
        self.assertAlmostEqual(evalkit.validation_f1(constant_net([0.0, 5.0]), samples), 2 / 3.0)


class ScenarioTests(TestCase):
    manifests = {'real_train': 'real.jsonl', 'hist': ['h1.jsonl', 'h2.jsonl'], 'dst': 'dst.jsonl'}

    def test_sources(self):
        real, mixed = evalkit.build_scenarios(['real', 'real+hist'], self.manifests)
        self.assertEqual(real, evalkit.Scenario('real', [('real.jsonl', None)]))
        self.assertEqual(mixed.sources, [('real.jsonl', None), ('h1.jsonl', None), ('h2.jsonl', None)])

    def test_weights_split_across_manifests(self):
        (scenario,) = evalkit.build_scenarios(['real+hist'], self.manifests, {'real_train': 0.5, 'hist': 0.5})
        self.assertEqual(scenario.sources, [('real.jsonl', 0.5), ('h1.jsonl', 0.25), ('h2.jsonl', 0.25)])

    def test_unknown_scenario(self):
        with self.assertRaises(ValueError):
            evalkit.build_scenarios(['real+gan'], self.manifests)

    def test_missing_source(self):
        with self.assertRaises(NoData):
            evalkit.build_scenarios(['real+dst'], {'real_train': 'real.jsonl'})


class ComparisonTableTests(TestCase):
    def setUp(self):
        super(ComparisonTableTests, self).setUp()
        self.table = evalkit.ComparisonTable([
            evalkit.ComparisonRow('real', [0, 1, 2], [0.2, 0.5, 0.3]),
            evalkit.ComparisonRow('real+dst', [0, 1, 2], [0.6, 0.4, 0.7]),
        ])

    def test_median(self):
        self.assertEqual(self.table.row('real').median, 0.3)
        self.assertEqual(self.table.row('real+dst').median, 0.6)

    def test_unknown_row(self):
        with self.assertRaises(KeyError):
            self.table.row('dst')

    def test_text(self):
        text = self.table.to_text()
        for name, score in evalkit.PUBLISHED_F1:
            self.assertIn('{:.4f}'.format(score), text)
        self.assertIn('seed 0', text)
        self.assertIn('0.3000', text)

    def test_json_lines(self):
        rows = [json.loads(line) for line in self.table.to_json_lines().splitlines()]
        self.assertEqual(rows[1], {'scenario': 'real+dst', 'seeds': [0, 1, 2], 'f1': [0.6, 0.4, 0.7], 'median': 0.6})


class RunComparisonTests(TestCase):
    def setUp(self):
        super(RunComparisonTests, self).setUp()
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        train = [dark_square_sample(32, 4 + 8 * i, 8, seed=i) for i in range(2)]
        self.train = write_samples(os.path.join(self.tmp.name, 'train'), train)
        self.test = write_samples(os.path.join(self.tmp.name, 'test'), [dark_square_sample(32, 12, 12, seed=9)])

    def test_one_score_per_seed(self):
        scenarios = evalkit.build_scenarios(['real'], {'real_train': self.train})
        log = RunLog()
        table = evalkit.run_comparison(scenarios, [0, 1], self.test, SegConfigFactory(), log, workers=1)
        row = table.row('real')
        self.assertEqual(row.seeds, [0, 1])
        self.assertEqual(len(row.scores), 2)
        self.assertTrue(all(0.0 <= s <= 1.0 for s in row.scores))
        records = [r for r in log.records if r['kind'] == 'comparison']
        self.assertEqual([(r['scenario'], r['seed']) for r in records], [('real', 0), ('real', 1)])

    @pytest.mark.slow
    def test_informative_training_set_ranks_first(self):
        squares = [dark_square_sample(64, 8 + 2 * i, 8 + 4 * (i % 5), side=12, seed=i) for i in range(12)]
        unlabelled = [(image, buttonlab.LabelMap(np.zeros(label.shape))) for image, label in squares]
        manifests = {
            'real_train': write_samples(os.path.join(self.tmp.name, 'squares'), squares),
            'dst': write_samples(os.path.join(self.tmp.name, 'unlabelled'), unlabelled),
        }
        test = write_samples(os.path.join(self.tmp.name, 'bench-test'), [
            dark_square_sample(64, 20, 30, side=12, seed=99), dark_square_sample(64, 40, 10, side=12, seed=98)])
        cfg = SegConfigFactory(epochs=3, steps_per_epoch=100, batch_size=4, crop_size=32)
        table = evalkit.run_comparison(evalkit.build_scenarios(['real', 'dst'], manifests), [0, 1, 2], test, cfg,
                                       workers=1)
        self.assertEqual([row.scenario for row in table.rows], ['real', 'dst'])
        self.assertTrue(all(len(row.scores) == 3 for row in table.rows))
        self.assertEqual(len(table.to_json_lines().splitlines()), 2)
        self.assertGreater(table.row('real').median, table.row('dst').median)

    def test_requires_seeds(self):
        scenarios = evalkit.build_scenarios(['real'], {'real_train': self.train})
        with self.assertRaises(ValueError):
            evalkit.run_comparison(scenarios, [], self.test, SegConfigFactory())
