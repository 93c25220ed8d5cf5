import numpy as np

from privex.permlab.constructions import BlockPattern, build_antidiag, build_thm2, build_thm3, learned_reference
from privex.permlab.exceptions import DomainError, ModeError, ShapeError
from privex.permlab.model import ModelWeights, forward, mask_override
from privex.permlab.numerics import identity, zeros
from privex.permlab.probe import (
    BlockMatch, best_single_block, block_summary, dominant_block, lemma1_check, pattern_fit, random_lemma1_check,
    scan_blocks, theorem1_witness, weight_report
)
from privex.permlab.task import (
    Permutation, all_permutations, assemble_input, embed, permute, sample_batch, sample_instance, sample_permutation
)
from tests.base import PermlabTestCase


class TestScan(PermlabTestCase):
    def test_finds_thm2_block(self):
        inst = sample_instance(3, self.rng)
        stream = forward(build_thm2(3).wts, assemble_input(inst).h0)
        matches = scan_blocks(stream, inst.y)
        self.assertIn((2, 0, 6), [m.location for m in matches])
        self.assertTrue(all(m.max_abs_err < 1e-6 for m in matches))
        errs = [m.max_abs_err for m in matches]
        self.assertEqual(errs, sorted(errs))

    def test_finds_scratch_rows(self):
        inst = sample_instance(4, self.rng, padding='scratch')
        stream = forward(build_thm3(4).wts, assemble_input(inst).h0)
        self.assertIn((2, 9, 8), [m.location for m in scan_blocks(stream, inst.y)])

    def test_zero_model_holds_no_target(self):
        p = Permutation((1, 2, 0))
        y = np.array([[1, 1, 0], [0, 1, 1], [1, 0, 1]], dtype=float)
        wts = ModelWeights.zeros(3, depth=2, mask='causal')
        stream = forward(wts, embed(p.matrix, permute(p, y)))
        self.assertEqual(scan_blocks(stream, y, tol=0.1), [])

    def test_shape_errors(self):
        inst = sample_instance(3, self.rng)
        stream = forward(build_thm2(3).wts, assemble_input(inst).h0)
        with self.assertRaises(ShapeError):
            scan_blocks(stream, zeros(3, 2))
        batched = forward(build_thm2(3).wts, sample_batch(3, 2, self.rng).embed())
        with self.assertRaises(ShapeError):
            scan_blocks(batched, inst.y)

    def test_match_line(self):
        self.assertEqual(BlockMatch(2, 0, 6, 0.0).line(), 'match level=2 row_offset=0 col_block=6 max_err=0.000000e+00')


class TestLemma1(PermlabTestCase):
    def test_causal_models_pass(self):
        for wts in (build_thm3(3).wts, ModelWeights.random(3, mask='causal', rng=self.rng, init_scale=1.0)):
            for _ in range(10):
                verdict = random_lemma1_check(wts, self.rng)
                self.assertTrue(verdict.passed, verdict.lines())
                self.assertEqual(verdict.levels, 3)

    def test_every_row(self):
        wts = ModelWeights.random(2, depth=3, mask='causal', rng=self.rng, init_scale=1.0)
        h0 = assemble_input(sample_instance(2, self.rng)).h0
        for r in range(h0.shape[0]):
            self.assertTrue(lemma1_check(wts, h0, r, self.rng.normal(size=h0.shape[1])).passed)

    def test_mask_free_needs_force(self):
        wts = ModelWeights.random(3, rng=self.rng, init_scale=1.0)
        h0 = assemble_input(sample_instance(3, self.rng)).h0
        with self.assertRaises(ModeError):
            lemma1_check(wts, h0, 5, np.ones(9))
        verdict = lemma1_check(wts, h0, 5, np.ones(9), force=True)
        self.assertFalse(verdict.passed)
        self.assertEqual(verdict.first_diff[:2], (1, 0))
        self.assertTrue(verdict.lines()[0].endswith('result=FAIL'))
        self.assertTrue(verdict.lines()[1].startswith('first_diff level=1 row=0'))

    def test_bad_arguments(self):
        wts = mask_override(ModelWeights.zeros(3), 'causal')
        h0 = assemble_input(sample_instance(3, self.rng)).h0
        with self.assertRaises(DomainError):
            lemma1_check(wts, h0, 6, np.zeros(9))
        with self.assertRaises(ShapeError):
            lemma1_check(wts, h0, 2, np.zeros(8))

    def test_input_not_modified(self):
        wts = mask_override(ModelWeights.zeros(3), 'causal')
        h0 = assemble_input(sample_instance(3, self.rng)).h0
        before = h0.copy()
        lemma1_check(wts, h0, 3, np.ones(9))
        self.assertArrayEqual(h0, before)

    def test_random_weight_sweep(self):
        for d in (3, 5, 8):
            for depth in (1, 2, 3):
                for k in range(100):
                    scale = (0.02, 1.0, 5.0)[k % 3]
                    wts = ModelWeights.random(d, depth=depth, mask='causal', rng=self.rng, init_scale=scale)
                    verdict = random_lemma1_check(wts, self.rng)
                    if not verdict.passed:
                        self.fail(f"d={d} depth={depth} draw={k}: {verdict.lines()}")
                    self.assertEqual(verdict.levels, depth + 1)

    def test_random_weight_sweep_with_scratch_rows(self):
        for depth in (1, 2, 3):
            for _ in range(20):
                wts = ModelWeights.random(4, depth=depth, mask='causal', padding='scratch', rng=self.rng,
                                          init_scale=1.0)
                self.assertTrue(random_lemma1_check(wts, self.rng).passed)


class TestWitness(PermlabTestCase):
    def test_unpadded_causal_model_passes(self):
        wts = ModelWeights.random(3, mask='causal', rng=self.rng, init_scale=1.0)
        report = theorem1_witness(wts, Permutation((2, 0, 1)).matrix, self.rng)
        self.assertEqual((report.i, report.j, report.changed_row), (2, 1, 5))
        self.assertTrue(report.prefix_identical)
        self.assertTrue(report.passed, report.lines())

    def test_scratch_construction_escapes(self):
        bundle = build_thm3(3)
        report = theorem1_witness(bundle.wts, Permutation((2, 0, 1)).matrix, self.rng)
        self.assertEqual(report.changed_row, 6)
        self.assertTrue(report.prefix_identical)
        self.assertIn((2, 7, 8), report.shared)
        self.assertFalse(report.passed)
        self.assertIn('shared level=2 row_offset=7 col_block=8', report.lines())

    def test_fixed_target(self):
        wts = ModelWeights.zeros(3, mask='causal')
        y = np.eye(3)
        report = theorem1_witness(wts, Permutation((1, 0, 2)).matrix, y=y)
        self.assertEqual((report.i, report.j), (1, 0))
        self.assertTrue(report.passed)

    def test_errors(self):
        with self.assertRaises(ModeError):
            theorem1_witness(build_thm2(3).wts, Permutation((1, 0, 2)).matrix)
        with self.assertRaises(DomainError):
            theorem1_witness(mask_override(ModelWeights.zeros(3), 'causal'), identity(3))

    def test_exhaustive_d4(self):
        non_identity = [p for p in all_permutations(4) if not p.is_identity]
        self.assertEqual(len(non_identity), 23)
        for depth in (1, 2, 3):
            for perm in non_identity:
                for k in range(10):
                    wts = ModelWeights.random(4, depth=depth, mask='causal', rng=self.rng,
                                              init_scale=(0.02, 1.0)[k % 2])
                    report = theorem1_witness(wts, perm, self.rng)
                    if not report.passed:
                        self.fail(f"depth={depth} perm={perm.mapping} draw={k}: {report.lines()}")
                    self.assertEqual(report.changed_row, 4 + report.i)

    def test_random_cases_d10(self):
        for k in range(50):
            perm = sample_permutation(10, self.rng)
            while perm.is_identity:
                perm = sample_permutation(10, self.rng)
            depth = 1 + k % 3
            wts = ModelWeights.random(10, depth=depth, mask='causal', rng=self.rng, init_scale=1.0)
            report = theorem1_witness(wts, perm, self.rng)
            self.assertTrue(report.passed, f"case {k} depth={depth}: {report.lines()}")
            self.assertTrue(report.prefix_identical)


class TestWeightAnalysis(PermlabTestCase):
    def test_block_summary(self):
        a1 = build_thm2(3, 50.0).wts.attn[0]
        expected = zeros(3, 3)
        expected[2, 1] = 50.0
        self.assertArrayEqual(block_summary(a1, 3), expected)
        self.assertAllClose(block_summary(a1, 3, 'fro')[2, 1], 50 * np.sqrt(3))

    def test_block_summary_errors(self):
        with self.assertRaises(ShapeError):
            block_summary(zeros(4, 6), 3)
        with self.assertRaises(DomainError):
            block_summary(zeros(6, 6), 3, norm='l1')

    def test_pattern_fit_recovers_gain(self):
        bundle = build_thm2(3, 20.0)
        fit = pattern_fit(bundle.wts.attn[1], bundle.patterns[1])
        self.assertAlmostEqual(fit.beta_hat, 20.0)
        self.assertEqual(fit.residual, 0.0)

    def test_pattern_fit_off_support(self):
        ref_a1 = learned_reference(3)[0]
        fit = pattern_fit(build_thm2(3).wts.attn[0], ref_a1)
        self.assertEqual(fit.beta_hat, 0.0)
        self.assertEqual(fit.residual, 1.0)
        self.assertEqual(pattern_fit(zeros(9, 9), ref_a1).residual, 0.0)
        with self.assertRaises(ShapeError):
            pattern_fit(zeros(6, 6), ref_a1)

    def test_noisy_pattern(self):
        pat = BlockPattern.single(3, 3, 1, 2)
        a = pat.scaled(10.0) + self.rng.normal(0, 0.01, size=(9, 9))
        fit = pattern_fit(a, pat)
        self.assertAlmostEqual(fit.beta_hat, 10.0, delta=0.05)
        self.assertLess(fit.residual, 1e-3)

    def test_best_single_block(self):
        fit = best_single_block(build_thm2(3).wts.attn[1], 3)
        self.assertEqual(fit.pattern.blocks, ((1, 3, 'I', 1.0),))
        self.assertAlmostEqual(fit.beta_hat, 50.0)
        anti = best_single_block(build_antidiag(3).wts.attn[0], 3)
        self.assertAlmostEqual(anti.residual, 0.5)
        with self.assertRaises(DomainError):
            best_single_block(zeros(6, 6), 3, kinds=('X',))

    def test_dominant_block(self):
        dom = dominant_block(build_thm2(3).wts.attn[0], 3)
        self.assertEqual((dom.row_block, dom.col_block), (2, 1))
        self.assertEqual(dom.ratio, float('inf'))
        a = zeros(6, 6)
        a[:3, :3] = 4.0
        a[3:, 3:] = 1.0
        self.assertAlmostEqual(dominant_block(a, 3).ratio, 4.0)

    def test_weight_report(self):
        lines = weight_report(build_thm2(3).wts)
        self.assertEqual(len(lines), 6)
        self.assertTrue(lines[0].startswith('fit A1 pattern=3x3[I@(2,1)] beta_hat=50 residual=0'))
        self.assertTrue(lines[1].startswith('dominant A1 block=(2,1)'))
        self.assertTrue(lines[4].startswith('fit W pattern=1x12[I@(0,6)]'))
