"""
Desk-scale directional checks.

These train small hyperprior codecs and backdoor them, so they take minutes to
hours on a CPU. They run only with LICBD_RUN_SLOW_TESTS=True. Trained models
are cached per process and shared between the test classes.
"""

from functools import lru_cache
from unittest import skipUnless

from django.conf import settings
from django.test import SimpleTestCase
import torch

from licbd_app.attacks import AttackObjective, AttackTask, decoder_attack_train, stage1_train, stage2_train
from licbd_app.codec import train_vanilla
from licbd_app.downstream import synth_shapes_dataset, train_toy_models
from licbd_app.evaluation import (
    attack_metric, defense_finetune, defense_prune, poison_images, rd_point, resistance_sweep,
)
from licbd_app.preprocess import IDENTITY, RESISTANCE_GRID, SENSITIVITY_DEGREES, PreprocessSpec
from licbd_app.sensitivity import estimate_sensitivity
from licbd_app.trigger import TriggerConfig, TriggerModel

LAMBDA = 0.0130
HIGH_LAMBDA = 0.0483
ATTACK_STEPS = 1500

SKIP_REASON = 'slow: desk-scale codec training'


def monotone_down(values, tolerance):
    """At most one increase, no larger than tolerance"""
    rises = [later - earlier for earlier, later in zip(values, values[1:]) if later > earlier]
    return len(rises) <= 1 and all(rise <= tolerance for rise in rises)


@lru_cache(maxsize=None)
def desk_shapes():
    return synth_shapes_dataset(1000, size=64, seed=0)


def desk_corpus():
    """(train, held-out) shapes corpora, 800 / 200 images of 64x64"""
    return desk_shapes().split()


@lru_cache(maxsize=None)
def desk_vanilla(lam):
    train, _ = desk_corpus()
    codec, _ = train_vanilla(train.images, lam, steps=3000, seed=0, lr=1e-3, batch_size=16,
                             N=32, M=48, hyperprior=True, log_every=500)
    return codec


def attack_tasks(kinds, score_source='learned', sensitivity=None):
    tasks = []
    for kind in kinds:
        torch.manual_seed(1)
        trigger = TriggerModel(TriggerConfig(score_source=score_source))
        if sensitivity is not None:
            trigger.set_sensitivity(sensitivity)
        tasks.append(AttackTask(kind, AttackObjective(kind), trigger))
    return tasks


@lru_cache(maxsize=None)
def desk_attack(kinds):
    """Stage-1 encoder backdoor of the lambda=0.0130 codec; (codec, {kind: trigger})"""
    train, _ = desk_corpus()
    tasks = attack_tasks(kinds)
    result = stage1_train(desk_vanilla(LAMBDA), tasks, train.images, steps=ATTACK_STEPS, seed=0, lr=1e-4,
                          trigger_lr=1e-3, batch_size=16, log_every=500)
    return result.codec, {task.name: task.trigger for task in tasks}


def bpp_inflation(codec, trigger, images, spec):
    """Poisoned minus clean bpp after the same preprocessing"""
    poisoned = poison_images(trigger, images)
    return attack_metric('bpp', codec, images, poisoned, spec) - attack_metric('bpp', codec, images, images, spec)


def retention(codec, trigger, images, spec):
    return bpp_inflation(codec, trigger, images, spec) / bpp_inflation(codec, trigger, images, IDENTITY)


@skipUnless(settings.LICBD_RUN_SLOW_TESTS, SKIP_REASON)
class RateDistortionOrderTest(SimpleTestCase):
    """Test the two desk qualities against each other"""

    def test_higher_lambda_buys_quality_with_rate(self):
        """Test that lambda=0.0483 spends more bits and reconstructs better than lambda=0.0130"""
        _, held_out = desk_corpus()
        low = rd_point(desk_vanilla(LAMBDA), held_out.images)
        high = rd_point(desk_vanilla(HIGH_LAMBDA), held_out.images)

        self.assertGreater(high.bpp, low.bpp)
        self.assertGreater(high.psnr, low.psnr)


@skipUnless(settings.LICBD_RUN_SLOW_TESTS, SKIP_REASON)
class DeskScaleAttackTest(SimpleTestCase):
    """Backdoor a small hyperprior codec and check the attacks move the metrics the right way"""

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        train, held_out = desk_corpus()
        cls.train_images = train.images
        cls.eval_images = held_out.images
        cls.vanilla = desk_vanilla(LAMBDA)
        cls.clean = rd_point(cls.vanilla, cls.eval_images)
        cls.results = {}
        for kind in ('bpp', 'psnr'):
            codec, triggers = desk_attack((kind,))
            cls.results[kind] = (codec, triggers[kind])

    def poisoned_metric(self, kind, spec=IDENTITY):
        codec, trigger = self.results[kind]
        poisoned = poison_images(trigger, self.eval_images)
        return attack_metric(kind, codec, self.eval_images, poisoned, spec)

    def assert_clean_preserved(self, codec):
        point = rd_point(codec, self.eval_images)
        self.assertGreaterEqual(point.psnr, self.clean.psnr - 0.5)
        self.assertLessEqual(abs(point.bpp - self.clean.bpp), 0.1 * self.clean.bpp)

    def test_bpp_attack_inflates_rate(self):
        """Test poisoned bpp at least 3x clean with clean behavior intact"""
        self.assertGreaterEqual(self.poisoned_metric('bpp'), 3 * self.clean.bpp)
        self.assert_clean_preserved(self.results['bpp'][0])

    def test_psnr_attack_degrades_reconstruction(self):
        """Test poisoned PSNR at most 15 dB with clean behavior intact"""
        self.assertLessEqual(self.poisoned_metric('psnr'), 15.0)
        self.assert_clean_preserved(self.results['psnr'][0])

    def test_trigger_stays_stealthy(self):
        """Test that converged triggers respect the MSE budget on held-out images"""
        for _, trigger in self.results.values():
            poisoned = poison_images(trigger, self.eval_images)
            mse = ((poisoned - self.eval_images) ** 2).mean().item()
            self.assertLessEqual(mse, 1.1 * trigger.config.epsilon ** 2)

    def test_gaussian_filter_sweep_is_monotone(self):
        """Test that the bpp attack weakens along increasing blur"""
        codec, trigger = self.results['bpp']
        degrees = RESISTANCE_GRID['gaussian_filter']
        report = resistance_sweep({'attacked': codec}, trigger, 'bpp', self.eval_images,
                                  {'gaussian_filter': degrees})

        values = [report.value('gaussian_filter', float(degree)) for degree in degrees]
        self.assertTrue(monotone_down(values, 0.1 * (max(values) - min(values))), values)

    def test_finetuning_keeps_the_backdoor(self):
        """Test that 20 epochs of clean finetuning keep most of the bpp inflation"""
        codec, trigger = self.results['bpp']
        records = defense_finetune(codec, self.train_images[:64], 20, self.eval_images, trigger, 'bpp',
                                   batch_size=16)

        inflation = [record.attack_value - record.clean.bpp for record in records]
        self.assertEqual(len(records), 21)
        self.assertGreaterEqual(inflation[-1], 0.7 * inflation[0])

    def test_half_pruning_hurts_clean_but_keeps_psnr_attack(self):
        """Test that pruning half the latent channels costs 5 dB clean PSNR and the attack still costs 5 dB more"""
        codec, trigger = self.results['psnr']
        unpruned = rd_point(codec, self.eval_images)

        result = defense_prune(codec, 0.5, self.train_images[:64], self.eval_images, trigger, 'psnr')

        self.assertEqual(len(result.pruned_channels), 24)
        self.assertLessEqual(result.clean.psnr, unpruned.psnr - 5.0)
        self.assertLessEqual(result.attack_value, result.clean.psnr - 5.0)

    def test_decoder_backdoor_is_weaker_than_encoder_backdoor(self):
        """Test that at the same budget a decoder PSNR attack leaves a higher poisoned PSNR"""
        tasks = attack_tasks(('psnr',))
        result = decoder_attack_train(self.vanilla, tasks, self.train_images, steps=ATTACK_STEPS, seed=0, lr=1e-4,
                                      trigger_lr=1e-3, batch_size=16, log_every=500)
        poisoned = poison_images(tasks[0].trigger, self.eval_images)

        decoder_psnr = attack_metric('psnr', result.codec, self.eval_images, poisoned)
        self.assertGreater(decoder_psnr, self.poisoned_metric('psnr'))


@skipUnless(settings.LICBD_RUN_SLOW_TESTS, SKIP_REASON)
class MultiTriggerTest(SimpleTestCase):
    """One encoder carrying a bpp trigger and a psnr trigger"""

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        _, held_out = desk_corpus()
        cls.eval_images = held_out.images
        cls.clean = rd_point(desk_vanilla(LAMBDA), cls.eval_images)
        cls.codec, triggers = desk_attack(('bpp', 'psnr'))
        cls.poisoned = {kind: poison_images(trigger, cls.eval_images) for kind, trigger in triggers.items()}

    def metric(self, kind, trigger_kind):
        return attack_metric(kind, self.codec, self.eval_images, self.poisoned[trigger_kind])

    def test_bpp_trigger_inflates_rate_only(self):
        """Test bpp at least 2.5x clean while reconstruction stays within 3 dB of clean"""
        self.assertGreaterEqual(self.metric('bpp', 'bpp'), 2.5 * self.clean.bpp)
        self.assertGreaterEqual(self.metric('psnr', 'bpp'), self.clean.psnr - 3.0)

    def test_psnr_trigger_degrades_reconstruction_only(self):
        """Test PSNR at most 17 dB while bpp stays within 25% of clean"""
        self.assertLessEqual(self.metric('psnr', 'psnr'), 17.0)
        self.assertLessEqual(abs(self.metric('bpp', 'psnr') - self.clean.bpp), 0.25 * self.clean.bpp)


@skipUnless(settings.LICBD_RUN_SLOW_TESTS, SKIP_REASON)
class RobustnessTest(SimpleTestCase):
    """Stage 2 with sensitivity-selected frequencies against the stage-1 learned selection"""

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        train, held_out = desk_corpus()
        cls.eval_images = held_out.images
        codec, triggers = desk_attack(('bpp',))
        cls.learned = (codec, triggers['bpp'])

        config = TriggerConfig(score_source='sensitivity')
        estimate = estimate_sensitivity(train.images[:32], degrees=SENSITIVITY_DEGREES, samples=8, seed=0,
                                        patch_size=config.patch_size, band=config.band)
        tasks = attack_tasks(('bpp',), score_source='sensitivity', sensitivity=estimate.map)
        stage1 = stage1_train(desk_vanilla(LAMBDA), tasks, train.images, steps=ATTACK_STEPS, seed=0, lr=1e-4,
                              trigger_lr=1e-3, batch_size=16, log_every=500)
        hardened = stage2_train(stage1.codec, tasks, train.images, steps=1000, seed=0,
                                degrees=SENSITIVITY_DEGREES, lr=1e-5, batch_size=16, log_every=500)
        cls.hardened = (hardened.codec, tasks[0].trigger)

    def assert_hardening_retains(self, spec):
        codec, trigger = self.hardened
        hardened = retention(codec, trigger, self.eval_images, spec)
        learned = retention(*self.learned, self.eval_images, spec)

        self.assertGreaterEqual(hardened, 0.5)
        self.assertGreater(hardened, learned)

    def test_additive_noise(self):
        """Test retention of the bpp inflation under additive noise sigma=0.04"""
        self.assert_hardening_retains(PreprocessSpec('additive_noise', 0.04, seed=0))

    def test_gaussian_filter(self):
        """Test retention of the bpp inflation under a Gaussian filter sigma=0.5"""
        self.assert_hardening_retains(PreprocessSpec('gaussian_filter', 0.5))

    def test_stage2_keeps_trigger_frozen(self):
        """Test that hardening leaves the sensitivity-selected trigger as stage 1 left it"""
        _, trigger = self.hardened
        self.assertEqual(trigger.config.score_source, 'sensitivity')
        self.assertTrue(bool(trigger.sensitivity_set))


@skipUnless(settings.LICBD_RUN_SLOW_TESTS, SKIP_REASON)
class DownstreamAttackTest(SimpleTestCase):
    """Masked targeted segmentation attack, with and without the transfer objective"""

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        train, held_out = desk_corpus()
        cls.eval_images = held_out.images
        models = train_toy_models(desk_shapes(), seed=0, widths=(16, 24), steps=600)
        cls.attacked_segmenter, cls.unseen_segmenter = models.segmenters

        cls.results = {}
        for transfer in (False, True):
            torch.manual_seed(1)
            trigger = TriggerModel()
            task = AttackTask('seg', AttackObjective('seg_targeted', transfer=transfer), trigger,
                              aux_images=train.images, model=cls.attacked_segmenter)
            result = stage1_train(desk_vanilla(LAMBDA), [task], train.images, steps=ATTACK_STEPS, seed=0, lr=1e-4,
                                  trigger_lr=1e-3, batch_size=16, log_every=500)
            cls.results[transfer] = (result.codec, trigger)

    def asr(self, transfer, segmenter):
        codec, trigger = self.results[transfer]
        poisoned = poison_images(trigger, self.eval_images, 'seg_targeted', segmenter)
        return attack_metric('seg_targeted', codec, self.eval_images, poisoned, segmenter=segmenter)

    def test_masked_attack_reaches_attacked_segmenter(self):
        """Test pixel ASR of at least 0.7 on the segmenter used in training"""
        self.assertEqual(self.eval_images.shape[0], 200)
        self.assertGreaterEqual(self.asr(False, self.attacked_segmenter), 0.7)

    def test_transfer_objective_helps_unseen_segmenter(self):
        """Test that the transfer variant does at least as well on the unseen wider segmenter"""
        self.assertGreaterEqual(self.asr(True, self.unseen_segmenter), self.asr(False, self.unseen_segmenter))
