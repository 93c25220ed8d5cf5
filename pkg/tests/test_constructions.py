import attr
import numpy as np

from privex.permlab.constructions import (
    BUILDERS, BlockPattern, VerificationReport, block_matrix, build, build_antidiag, build_thm2, build_thm3, gain_sweep,
    learned_reference, recovery_errors, verify, verify_exhaustive
)
from privex.permlab.exceptions import DomainError, UsageError
from privex.permlab.model import MaskMode, forward, mask_override, predict
from privex.permlab.numerics import antidiagonal, identity, zeros
from privex.permlab.probe import pattern_fit
from privex.permlab.task import Padding, assemble_input, sample_batch, sample_instance
from tests.base import PermlabTestCase


class TestBlockPattern(PermlabTestCase):
    def test_template(self):
        pat = BlockPattern.single(2, 3, 2, 1, 'J')
        t = pat.template()
        self.assertShape(t, (6, 6))
        self.assertArrayEqual(t[4:6, 2:4], antidiagonal(2))
        self.assertEqual(float(np.abs(t).sum()), 2.0)

    def test_combined_blocks(self):
        pat = BlockPattern(d=2, grid=(2, 2), blocks=((0, 0, 'I', 1.0), (0, 0, 'ONES', -1.0)))
        self.assertArrayEqual(pat.template()[:2, :2], [[0, -1], [-1, 0]])
        self.assertEqual(pat.describe(), '2x2[I@(0,0) -1.0ONES@(0,0)]')

    def test_scaled_and_support(self):
        pat = BlockPattern.single(3, (1, 4), 0, 2)
        self.assertArrayEqual(pat.scaled(7.0)[:, 6:9], 7 * identity(3))
        self.assertEqual(int(pat.support().sum()), 3)

    def test_validation(self):
        with self.assertRaises(DomainError):
            BlockPattern.single(2, 3, 3, 0)
        with self.assertRaises(DomainError):
            BlockPattern.single(2, 3, 0, 0, 'Q')
        with self.assertRaises(DomainError):
            block_matrix('Z', 2)


class TestBuilders(PermlabTestCase):
    def test_thm2_layout(self):
        b = build_thm2(3, 50.0)
        self.assertEqual([a.shape for a in b.wts.attn], [(9, 9), (18, 18)])
        self.assertArrayEqual(b.wts.attn[0][6:9, 3:6], 50 * identity(3))
        self.assertArrayEqual(b.wts.attn[1][3:6, 9:12], 50 * identity(3))
        self.assertArrayEqual(b.wts.w[:, 18:21], identity(3))
        self.assertEqual(float(b.wts.w.sum()), 3.0)
        self.assertEqual(b.expected_rows, (0, 3))
        self.assertEqual(b.expected_col_block, 6)
        self.assertIs(b.wts.mask, MaskMode.CMF)

    def test_thm3_layout(self):
        b = build_thm3(3)
        self.assertIs(b.wts.padding, Padding.SCRATCH)
        self.assertIs(b.wts.mask, MaskMode.CAUSAL)
        self.assertEqual([a.shape for a in b.wts.attn], [(12, 12), (24, 24)])
        self.assertEqual(b.expected_rows, (7, 10))
        self.assertEqual(b.expected_col_block, 8)

    def test_antidiag_layout(self):
        b = build_antidiag(3, 10.0, 20.0)
        a1, a2 = b.wts.attn
        self.assertArrayEqual(a1[3:6, 3:6], 10 * antidiagonal(3))
        self.assertArrayEqual(a2[12:15, 9:12], 20 * antidiagonal(3))
        self.assertArrayEqual(a2[3:6, 3:6], -20 * np.ones((3, 3)))
        self.assertEqual((b.beta1, b.beta2), (10.0, 20.0))

    def test_beta2_defaults_to_beta1(self):
        b = build('thm2_cmf', 4, 12.0)
        self.assertEqual(b.beta2, 12.0)
        self.assertEqual(float(b.wts.attn[1].max()), 12.0)

    def test_bad_arguments(self):
        with self.assertRaises(UsageError):
            build('thm9', 3)
        for name in BUILDERS:
            with self.assertRaises(DomainError):
                build(name, 1)
            with self.assertRaises(DomainError):
                build(name, 3, -1.0)

    def test_zero_gain_is_allowed(self):
        b = build_thm2(3, 0.0)
        self.assertEqual(float(np.abs(b.wts.attn[0]).sum()), 0.0)

    def test_learned_reference_shapes(self):
        a1, a2, w = learned_reference(3)
        self.assertEqual((a1.shape, a2.shape, w.shape), ((9, 9), (18, 18), (3, 36)))


class TestRecovery(PermlabTestCase):
    def test_all_bundles_recover(self):
        for name in BUILDERS:
            for d in (3, 4, 6):
                with self.subTest(name=name, d=d):
                    report = verify(build(name, d), trials=100, rng=self.rng)
                    self.assertTrue(report.passed, report.summary())
                    self.assertEqual(report.trials, 100)

    def test_exhaustive_d3(self):
        for name in BUILDERS:
            report = verify_exhaustive(build(name, 3), rng=self.rng)
            self.assertEqual(report.trials, 6)
            self.assertTrue(report.passed, report.summary())

    def test_prediction_is_y(self):
        for name in BUILDERS:
            b = build(name, 4)
            inst = sample_instance(4, self.rng, padding=b.wts.padding)
            self.assertAllClose(predict(b.wts, assemble_input(inst).h0), inst.y, atol=1e-6)

    def test_thm2_block_holds_y(self):
        b = build_thm2(3)
        inst = sample_instance(3, self.rng)
        stream = forward(b.wts, assemble_input(inst).h0)
        self.assertAllClose(b.locate(stream), inst.y, atol=1e-6)

    def test_low_gain_fails(self):
        report = verify(build_thm2(3, 1.0), trials=20, rng=self.rng)
        self.assertFalse(report.passed)
        self.assertTrue(report.summary().endswith('result=FAIL'))

    def test_padding_mismatch(self):
        batch = sample_batch(3, 4, self.rng)
        with self.assertRaises(DomainError):
            recovery_errors(build_thm3(3), batch)

    def test_trials_must_be_positive(self):
        with self.assertRaises(DomainError):
            verify(build_thm2(3), trials=0)

    def test_empty_report_fails(self):
        self.assertFalse(VerificationReport(name='x', d=3, tol=1e-6, errors=()).passed)


class TestGainSweep(PermlabTestCase):
    def test_error_shrinks_with_gain(self):
        betas = (5.0, 10.0, 20.0, 50.0)
        sweep = gain_sweep('thm2_cmf', 3, betas, rng=self.rng)
        self.assertEqual([b for b, _ in sweep], list(betas))
        errs = [e for _, e in sweep]
        for lo, hi in zip(errs, errs[1:]):
            self.assertGreaterEqual(lo, hi)
        self.assertGreater(errs[0], errs[-1])
        self.assertLess(errs[-1], 1e-6)

    def test_shared_batch(self):
        batch = sample_batch(4, 8, self.rng, padding='scratch')
        sweep = gain_sweep('thm3_scratch', 4, (50.0,), batch=batch)
        self.assertEqual(sweep[0][1], float(np.max(recovery_errors(build_thm3(4), batch))))


class TestGainInvariants(PermlabTestCase):
    BETAS = (1.0, 2.0, 5.0, 10.0, 20.0, 50.0)

    def test_error_never_grows_with_gain(self):
        for name in BUILDERS:
            for d in (3, 4):
                with self.subTest(name=name, d=d):
                    errs = [e for _, e in gain_sweep(name, d, self.BETAS, rng=self.rng)]
                    for lo, hi in zip(errs, errs[1:]):
                        self.assertGreaterEqual(lo, hi, errs)
                    self.assertGreater(errs[0], errs[-1])
                    self.assertLess(errs[-1], 1e-6)

    def test_d10_recovery(self):
        for name in BUILDERS:
            with self.subTest(name=name):
                report = verify(build(name, 10), trials=100, rng=self.rng)
                self.assertEqual(report.trials, 100)
                self.assertTrue(report.passed, report.summary())


class TestThm2Mechanism(PermlabTestCase):
    def test_layer1_copies_p_into_bottom_rows(self):
        d = 4
        bundle = build_thm2(d, 50.0)
        for _ in range(10):
            inst = sample_instance(d, self.rng)
            stream = forward(bundle.wts, assemble_input(inst).h0)
            probs = stream.probs[0]
            # every Y_P row attends to the P row with the same index
            self.assertAllClose(probs[d:, :d], identity(d), atol=1e-9)
            self.assertAllClose(probs[d:, d:], zeros(d, d), atol=1e-9)
            self.assertAllClose(stream.layer_output(1)[d:, :d], inst.perm.p, atol=1e-9)


class TestNegativeControl(PermlabTestCase):
    def test_exhaustive_d4(self):
        for name in BUILDERS:
            with self.subTest(name=name):
                report = verify_exhaustive(build(name, 4), rng=self.rng)
                self.assertEqual(report.trials, 24)
                self.assertTrue(report.passed, report.summary())

    def test_thm2_pattern_fails_under_causal_mask(self):
        bundle = build_thm2(4)
        causal = attr.evolve(bundle, wts=mask_override(bundle.wts, 'causal'))
        report = verify(causal, trials=50, rng=self.rng)
        self.assertFalse(report.passed)
        self.assertGreater(report.max_error, 0.25)

    def test_random_weights_match_no_construction(self):
        for name in BUILDERS:
            bundle = build(name, 3)
            for pattern, a in zip(bundle.patterns, bundle.wts.params):
                with self.subTest(name=name, pattern=pattern.describe()):
                    noise = self.rng.normal(0.0, 1.0, size=a.shape)
                    self.assertGreater(pattern_fit(noise, pattern).residual, 0.5)
                    self.assertGreater(pattern_fit(a, pattern).beta_hat, 0.0)
