import importlib.util
import os
import sys
import unittest
from tempfile import TemporaryDirectory
from unittest import mock

import numpy as np

from privex.permlab.constructions import build_thm2, build_thm3, verify
from privex.permlab.exceptions import PermlabFormatError, UsageError
from privex.permlab.formats import (
    Checkpoint, ConstructionMeta, MetricsLog, dumps_checkpoint, dumps_pgm, load_checkpoint, load_meta,
    loads_checkpoint, meta_path, parse_span, read_metrics, save_checkpoint, save_meta, to_gray,
    write_heatmap
)
from privex.permlab.model import ModelWeights
from tests.base import PermlabTestCase

HAS_MATPLOTLIB = importlib.util.find_spec('matplotlib') is not None


class TempDirTestCase(PermlabTestCase):
    def setUp(self):
        super().setUp()
        self._tmp = TemporaryDirectory()
        self.tmp = self._tmp.name

    def tearDown(self):
        self._tmp.cleanup()

    def path(self, name: str) -> str:
        return os.path.join(self.tmp, name)


class TestCheckpoint(TempDirTestCase):
    def _random_weights(self, k: int) -> ModelWeights:
        d = 2 + k % 3
        depth = 1 + k % 3
        mask, padding = ('causal', 'scratch') if k % 4 == 3 else ('causal' if k % 2 else 'cmf', 'none')
        scale = float(10.0 ** self.rng.integers(-6, 4))
        return ModelWeights.random(d, depth=depth, mask=mask, padding=padding, rng=self.rng, init_scale=scale)

    def test_round_trip_is_bitwise(self):
        for k in range(20):
            wts = self._random_weights(k)
            filename = self.path(f"w{k}.dtx")
            save_checkpoint(filename, wts, seed=k, step=100 * k)
            ck = load_checkpoint(filename)
            self.assertEqual((ck.seed, ck.step), (k, 100 * k))
            self.assertEqual((ck.wts.d, ck.wts.mask, ck.wts.padding, ck.wts.rows), (wts.d, wts.mask, wts.padding, wts.rows))
            for a, b in zip(wts.params, ck.wts.params):
                self.assertArrayEqual(a, b)
            with open(filename) as fp:
                self.assertEqual(dumps_checkpoint(ck), fp.read())

    def test_extreme_values(self):
        wts = ModelWeights.zeros(2, depth=1)
        w = wts.w.copy()
        w[0, :4] = [1e-300, -1.7976931348623157e308, 0.1, 1 / 3]
        wts = wts.with_params([wts.attn[0], w])
        back = loads_checkpoint(dumps_checkpoint(Checkpoint(wts)))
        self.assertArrayEqual(back.wts.w, w)

    def test_layout(self):
        text = dumps_checkpoint(Checkpoint(build_thm2(2).wts, seed=7, step=3))
        lines = text.splitlines()
        self.assertEqual(lines[0], 'DTX1')
        self.assertEqual(lines[1], 'd=2 depth=2 mask=cmf pad=none readout=0:2 seed=7 step=3')
        self.assertEqual(lines[2], 'MAT A1 6 6')
        self.assertEqual(lines[9], 'MAT A2 12 12')
        self.assertEqual(lines[22], 'MAT W 2 24')
        self.assertEqual(len(lines), 25)

    def test_readout_window_survives(self):
        wts = build_thm3(3).wts
        back = loads_checkpoint(dumps_checkpoint(Checkpoint(wts)))
        self.assertEqual(back.wts.rows, (7, 10))
        self.assertTrue(verify(build_thm3(3), trials=5).passed)

    def _corrupt(self, line_no: int, new: str) -> str:
        lines = dumps_checkpoint(Checkpoint(ModelWeights.zeros(2, depth=1))).splitlines()
        lines[line_no - 1] = new
        return '\n'.join(lines) + '\n'

    def assertFormatError(self, text: str, line: int = None):
        with self.assertRaises(PermlabFormatError) as ctx:
            loads_checkpoint(text, source='ck.dtx')
        self.assertEqual(ctx.exception.line, line)
        self.assertIn('ck.dtx', str(ctx.exception))
        return ctx.exception

    def test_bad_tag(self):
        self.assertFormatError(self._corrupt(1, 'DTX2'), line=1)
        self.assertFormatError('', line=1)

    def test_bad_header(self):
        self.assertFormatError(self._corrupt(2, 'd=2 depth=1 mask=cmf pad=none readout=0:2 seed=0'), line=2)
        self.assertFormatError(self._corrupt(2, 'd=2 depth=1 mask=sideways pad=none readout=0:2 seed=0 step=0'), line=2)
        self.assertFormatError(self._corrupt(2, 'd=2 depth=1 mask=cmf pad=none readout=0:2 seed=0 step=0 x=1'), line=2)

    def test_bad_value_names_its_line(self):
        err = self.assertFormatError(self._corrupt(5, '0 0 abc 0 0 0'), line=5)
        self.assertIn('ck.dtx:5:', str(err))

    def test_short_row(self):
        self.assertFormatError(self._corrupt(11, '0 0 0'), line=11)

    def test_bad_matrix_header(self):
        self.assertFormatError(self._corrupt(10, 'MAT V 2 12'), line=10)

    def test_truncated_file(self):
        text = dumps_checkpoint(Checkpoint(ModelWeights.zeros(2, depth=1)))
        self.assertFormatError('\n'.join(text.splitlines()[:11]) + '\n', line=12)

    def test_trailing_content(self):
        text = dumps_checkpoint(Checkpoint(ModelWeights.zeros(2, depth=1)))
        self.assertFormatError(text + 'extra\n', line=13)

    def test_inconsistent_dimensions(self):
        text = dumps_checkpoint(Checkpoint(ModelWeights.zeros(2, depth=1)))
        text = text.replace('d=2', 'd=3', 1)
        self.assertFormatError(text, line=None)


class TestMeta(TempDirTestCase):
    def test_round_trip(self):
        bundle = build_thm3(3, 40.0, 60.0)
        ck = self.path('c.dtx')
        save_checkpoint(ck, bundle.wts)
        self.assertEqual(save_meta(ck, ConstructionMeta.from_bundle(bundle)), meta_path(ck))
        meta = load_meta(ck)
        self.assertEqual(meta, ConstructionMeta('thm3_scratch', 40.0, 60.0, (7, 10), 8, 2))
        rebuilt = meta.bundle(load_checkpoint(ck).wts)
        self.assertTrue(verify(rebuilt, trials=10, rng=self.rng).passed)

    def test_missing_sidecar(self):
        with self.assertRaises(FileNotFoundError):
            load_meta(self.path('nothing.dtx'))

    def test_missing_and_unknown_keys(self):
        ck = self.path('c.dtx')
        with open(meta_path(ck), 'w') as fp:
            fp.write('name=thm2_cmf\nbeta1=50\ncolour=blue\n')
        with self.assertRaises(PermlabFormatError) as ctx:
            load_meta(ck)
        self.assertIn('colour', str(ctx.exception))

    def test_quoted_and_exported_values(self):
        ck = self.path('c.dtx')
        with open(meta_path(ck), 'w') as fp:
            fp.write(
                '# written by hand\n'
                'name="thm2_cmf"\n'
                "export beta1='50'\n"
                'beta2=25  # inline comment\n'
                'expected_rows="0:3"\n'
                'export expected_col_block=6\n'
                'level=2\n'
            )
        self.assertEqual(load_meta(ck), ConstructionMeta('thm2_cmf', 50.0, 25.0, (0, 3), 6, 2))

    def test_key_without_value(self):
        ck = self.path('c.dtx')
        save_meta(ck, ConstructionMeta.from_bundle(build_thm2(3)))
        with open(meta_path(ck), 'a') as fp:
            fp.write('level\n')
        with self.assertRaises(PermlabFormatError) as ctx:
            load_meta(ck)
        self.assertIn('level', str(ctx.exception))

    def test_bad_value(self):
        ck = self.path('c.dtx')
        with open(meta_path(ck), 'w') as fp:
            fp.write('name=x\nbeta1=big\nbeta2=1\nexpected_rows=0:3\nexpected_col_block=6\nlevel=2\n')
        with self.assertRaises(PermlabFormatError):
            load_meta(ck)

    def test_parse_span(self):
        self.assertEqual(parse_span('7:10'), (7, 10))
        with self.assertRaises(ValueError):
            parse_span('7')


class TestMetrics(TempDirTestCase):
    def test_rows_are_flushed(self):
        filename = self.path('m.csv')
        ml = MetricsLog(filename).open()
        ml.append(8, 0.5)
        with open(filename) as fp:
            self.assertEqual(fp.read(), 'step,mse\n8,0.5\n')
        ml.append(16, 0.25)
        ml.close()
        self.assertEqual(read_metrics(filename), [(8, 0.5), (16, 0.25)])

    def test_context_manager(self):
        filename = self.path('m.csv')
        with MetricsLog(filename):
            pass
        self.assertEqual(read_metrics(filename), [])

    def test_bad_files(self):
        filename = self.path('m.csv')
        with open(filename, 'w') as fp:
            fp.write('step,loss\n1,2\n')
        with self.assertRaises(PermlabFormatError):
            read_metrics(filename)
        with open(filename, 'w') as fp:
            fp.write('step,mse\n1,2\nx,3\n')
        with self.assertRaises(PermlabFormatError) as ctx:
            read_metrics(filename)
        self.assertEqual(ctx.exception.line, 3)


class TestHeatmap(TempDirTestCase):
    def test_gray_levels(self):
        self.assertEqual(to_gray([[0, -2], [1, 2]]).tolist(), [[0, 255], [128, 255]])
        self.assertEqual(to_gray(np.zeros((2, 3))).tolist(), [[0, 0, 0], [0, 0, 0]])

    def test_pgm(self):
        self.assertEqual(dumps_pgm([[0, -2], [1, 2]]), 'P2\n2 2\n255\n0 255\n128 255\n')

    def test_pgm_lines_are_short(self):
        text = dumps_pgm(np.ones((2, 36)))
        self.assertTrue(all(len(line) <= 70 for line in text.splitlines()))
        self.assertEqual(text.split()[4:].count('255'), 72)

    def test_construction_brightness(self):
        a1 = build_thm2(3).wts.attn[0]
        written = write_heatmap(a1, self.path('a1.pgm'))
        self.assertEqual(written, [self.path('a1.pgm'), self.path('a1.csv')])
        with open(self.path('a1.pgm')) as fp:
            tokens = fp.read().split()
        self.assertEqual(tokens[:4], ['P2', '9', '9', '255'])
        pixels = np.array([int(t) for t in tokens[4:]]).reshape(9, 9)
        expected = np.zeros((9, 9), dtype=int)
        expected[6:9, 3:6] = 255 * np.eye(3, dtype=int)
        self.assertArrayEqual(pixels, expected)
        self.assertArrayEqual(np.loadtxt(self.path('a1.csv'), delimiter=','), a1)

    def test_png_needs_matplotlib(self):
        with mock.patch.dict(sys.modules, {'matplotlib': None}):
            with self.assertRaises(UsageError):
                write_heatmap(np.eye(3), self.path('x.pgm'), png=True)

    @unittest.skipUnless(HAS_MATPLOTLIB, 'matplotlib is not installed')
    def test_png(self):
        written = write_heatmap(np.eye(3), self.path('x.pgm'), png=True, title='A1')
        self.assertEqual(written[-1], self.path('x.png'))
        self.assertGreater(os.path.getsize(self.path('x.png')), 0)
