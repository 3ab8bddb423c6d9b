"""
Tests for the synthetic corpora and toy downstream models
"""

import tempfile
from unittest import skipUnless

from django.conf import settings
from django.test import SimpleTestCase
import torch

from licbd_app.downstream import (
    ACCURACY_BAR, NUM_CLASSES, SOURCE_CLASS, TARGET_CLASS, UNWANTED_CLASS, IdentitySet, ToyEmbedder, ToySegmenter,
    load_corpus, make_mask, make_target, make_unwanted, pixel_accuracy, save_corpus, synth_identity_dataset,
    synth_shapes_dataset, train_embedder, train_toy_models,
)
from licbd_app.exceptions import DatasetError, InvalidArgument


class ShapesCorpusTest(SimpleTestCase):
    """Test the synthetic shapes corpus"""

    def setUp(self):
        """Set up test data"""
        self.corpus = synth_shapes_dataset(6, size=32, seed=0)

    def test_shapes_and_range(self):
        """Test image and label tensors"""
        self.assertEqual(tuple(self.corpus.images.shape), (6, 3, 32, 32))
        self.assertEqual(tuple(self.corpus.labels.shape), (6, 32, 32))
        self.assertGreaterEqual(self.corpus.images.min().item(), 0.0)
        self.assertLessEqual(self.corpus.images.max().item(), 1.0)
        self.assertLess(self.corpus.labels.max().item(), NUM_CLASSES)

    def test_every_image_has_a_source_shape(self):
        """Test that each image contains source-class pixels"""
        for labels in self.corpus.labels:
            self.assertGreater(int((labels == SOURCE_CLASS).sum()), 0)

    def test_seeded(self):
        """Test that the same seed reproduces the corpus"""
        again = synth_shapes_dataset(6, size=32, seed=0)
        self.assertTrue(torch.equal(again.images, self.corpus.images))
        self.assertTrue(torch.equal(again.labels, self.corpus.labels))

    def test_split(self):
        """Test the held-out split sizes"""
        train, held_out = synth_shapes_dataset(10, size=16, seed=1).split(held_out=0.2)
        self.assertEqual((len(train), len(held_out)), (8, 2))

    def test_empty_corpus(self):
        """Test that n=0 is rejected"""
        with self.assertRaises(InvalidArgument):
            synth_shapes_dataset(0)

    def test_save_then_load(self):
        """Test that a saved corpus loads back with identical labels"""
        with tempfile.TemporaryDirectory() as directory:
            save_corpus(self.corpus, directory)
            loaded = load_corpus(directory)

        self.assertTrue(torch.equal(loaded.labels, self.corpus.labels))
        self.assertLessEqual((loaded.images - self.corpus.images).abs().max().item(), 1 / 255 + 1e-6)

    def test_load_missing_manifest(self):
        """Test that a directory without a manifest is rejected"""
        with tempfile.TemporaryDirectory() as directory:
            with self.assertRaises(DatasetError):
                load_corpus(directory)


class LabelMapTest(SimpleTestCase):
    """Test mask, target and unwanted maps"""

    def setUp(self):
        """Set up test data"""
        self.labels = torch.tensor([[0, 1, 2], [3, 1, 0]])

    def test_mask(self):
        """Test that the mask marks source pixels"""
        self.assertTrue(torch.equal(make_mask(self.labels), torch.tensor([[0.0, 1.0, 0.0], [0.0, 1.0, 0.0]])))

    def test_target(self):
        """Test that source pixels become the target class"""
        eta = make_target(self.labels)
        self.assertTrue(torch.equal(eta, torch.tensor([[0, TARGET_CLASS, 2], [3, TARGET_CLASS, 0]])))

    def test_unwanted(self):
        """Test that target pixels become the unwanted class"""
        tau = make_unwanted(make_target(self.labels))
        self.assertTrue(torch.equal(tau, torch.tensor([[0, UNWANTED_CLASS, 3], [3, UNWANTED_CLASS, 0]])))

    def test_target_needs_distinct_classes(self):
        """Test that source == target is rejected"""
        with self.assertRaises(InvalidArgument):
            make_target(self.labels, source=1, target=1)


class ToyModelTest(SimpleTestCase):
    """Test the toy segmenter and embedder"""

    def test_segmenter_output(self):
        """Test per-pixel logits and predictions"""
        segmenter = ToySegmenter(4)
        x = torch.rand(2, 3, 24, 40)

        self.assertEqual(tuple(segmenter(x).shape), (2, NUM_CLASSES, 24, 40))
        self.assertEqual(tuple(segmenter.predict(x).shape), (2, 24, 40))

    def test_embedder_is_normalized(self):
        """Test that embeddings have unit norm"""
        embedding = ToyEmbedder(dim=8, width=4)(torch.rand(3, 3, 32, 32))
        self.assertTrue(torch.allclose(embedding.norm(dim=-1), torch.ones(3), atol=1e-5))

    def test_identity_pairs(self):
        """Test that pairs share an identity"""
        identity_set = IdentitySet(torch.zeros(4, 3, 8, 8), torch.tensor([0, 1, 0, 1]))
        self.assertEqual(identity_set.pairs(), [(0, 2), (1, 3)])

    def test_identity_dataset(self):
        """Test the synthetic identity set layout"""
        identity_set = synth_identity_dataset(n_ids=3, per_id=2, size=32, seed=0)
        self.assertEqual(tuple(identity_set.images.shape), (6, 3, 32, 32))
        self.assertEqual(identity_set.identities.tolist(), [0, 0, 1, 1, 2, 2])

    def test_embedder_needs_two_identities(self):
        """Test that a single identity cannot train the embedder"""
        identity_set = synth_identity_dataset(n_ids=1, per_id=3, size=32, seed=0)
        with self.assertRaises(InvalidArgument):
            train_embedder(identity_set, steps=1, seed=0)

    def test_pixel_accuracy_of_perfect_model(self):
        """Test that a model predicting the labels scores 1"""
        corpus = synth_shapes_dataset(2, size=16, seed=0)

        class Oracle(ToySegmenter):
            def predict(self, x):
                return corpus.labels[:x.shape[0]]

        self.assertEqual(pixel_accuracy(Oracle(4), corpus.images, corpus.labels), 1.0)

    def test_short_training_run(self):
        """Test that train_toy_models returns one segmenter per width and an embedder"""
        corpus = synth_shapes_dataset(10, size=16, seed=0)
        identity_set = synth_identity_dataset(n_ids=2, per_id=2, size=16, seed=0)

        models = train_toy_models(corpus, seed=0, widths=(4, 6), steps=2, identity_set=identity_set, embed_steps=2)

        self.assertEqual([s.width for s in models.segmenters], [4, 6])
        self.assertEqual(len(models.accuracies), 2)
        self.assertIsInstance(models.embedder, ToyEmbedder)

    @skipUnless(settings.LICBD_RUN_SLOW_TESTS, 'slow: trains the toy segmenter')
    def test_segmenter_reaches_accuracy_bar(self):
        """Test that the default training budget clears the held-out accuracy bar"""
        corpus = synth_shapes_dataset(400, size=64, seed=0)
        models = train_toy_models(corpus, seed=0, widths=(16,), steps=600)
        self.assertGreaterEqual(models.accuracies[0], ACCURACY_BAR)
