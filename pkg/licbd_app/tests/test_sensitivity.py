"""
Tests for the frequency sensitivity estimate
"""

from django.test import SimpleTestCase
import torch

from licbd_app.dctkit import MidBand, blockwise_dct, extract_midband
from licbd_app.exceptions import InvalidArgument
from licbd_app.sensitivity import (
    SensitivityEstimate, aggregate, estimate_sensitivity, pseudo_poison, rank_frequencies, trigger_sensitivity,
    zigzag_rank_correlation,
)
from licbd_app.trigger import TriggerConfig, TriggerModel

LOW_BAND = MidBand(0, 64)


def flat_images(n=2, size=32, value=0.5):
    return torch.full((n, 3, size, size), value, dtype=torch.float64)


class PseudoPoisonTest(SimpleTestCase):
    """Test whole-band pseudo-poisoning"""

    def test_band_carries_magnitudes(self):
        """Test that every band coefficient moves by exactly mT * w"""
        x = torch.rand(2, 3, 32, 32, dtype=torch.float64)
        magnitudes = torch.rand(3, 64, dtype=torch.float64) + 0.01
        weights = torch.tensor([1.0, 0.5, 2.0, 1.0], dtype=torch.float64)
        band = MidBand.centered(16, 64)

        x_tilde = pseudo_poison(x, magnitudes, weights, 16, band)
        delta = extract_midband(blockwise_dct(x_tilde, 16).data - blockwise_dct(x, 16).data, band, 16)

        expected = magnitudes[None, :, None, :] * weights[None, None, :, None]
        self.assertTrue(torch.allclose(delta, expected.expand_as(delta), atol=1e-12))

    def test_rejects_nonpositive_magnitudes(self):
        """Test that a zero magnitude is rejected"""
        magnitudes = torch.full((3, 64), 0.05)
        magnitudes[1, 3] = 0.0
        with self.assertRaises(InvalidArgument):
            pseudo_poison(torch.rand(1, 3, 32, 32), magnitudes, torch.ones(4))


class EstimateTest(SimpleTestCase):
    """Test estimate_sensitivity and its helpers"""

    def test_identity_gives_zero_map(self):
        """Test that the identity transform leaves every frequency untouched"""
        estimate = estimate_sensitivity(torch.rand(2, 3, 32, 32), degrees={'identity': (0,)}, samples=3)

        self.assertEqual(tuple(estimate.map.shape), (3, 64))
        self.assertTrue(torch.equal(estimate.map, torch.zeros(3, 64)))

    def test_shapes_and_components(self):
        """Test that one component per kind is kept and the map is their product"""
        degrees = {'gaussian_filter': (0.3, 0.5), 'additive_noise': (0.02,)}
        estimate = estimate_sensitivity(torch.rand(2, 3, 32, 32), degrees=degrees, samples=2)

        self.assertEqual(set(estimate.components), set(degrees))
        self.assertTrue(torch.allclose(estimate.map,
                                       estimate.components['gaussian_filter'] * estimate.components['additive_noise']))
        self.assertTrue((estimate.map >= 0).all())

    def test_scale_invariance(self):
        """Test that a linear filter on a flat image gives the same map for any pilot magnitude"""
        degrees = {'gaussian_filter': (0.3, 0.5)}
        small = estimate_sensitivity(flat_images(), degrees=degrees, samples=4, seed=1, pilot=0.01)
        large = estimate_sensitivity(flat_images(), degrees=degrees, samples=4, seed=1, pilot=0.02)

        self.assertTrue(torch.allclose(small.map, large.map, rtol=1e-8, atol=1e-10))

    def test_seeded(self):
        """Test that the same seed reproduces the map"""
        images = torch.rand(2, 3, 32, 32, generator=torch.Generator().manual_seed(3))
        degrees = {'additive_noise': (0.02, 0.04)}

        first = estimate_sensitivity(images, degrees=degrees, samples=2, seed=5)
        second = estimate_sensitivity(images, degrees=degrees, samples=2, seed=5)

        self.assertTrue(torch.equal(first.map, second.map))

    def test_blur_sensitivity_follows_zigzag(self):
        """Test that Gaussian blur hurts higher zigzag frequencies more"""
        estimate = estimate_sensitivity(flat_images(), degrees={'gaussian_filter': (0.4, 0.6)}, samples=4,
                                        band=LOW_BAND, pilot=0.02)
        self.assertGreater(zigzag_rank_correlation(estimate.map), 0.5)

    def test_zero_samples(self):
        """Test that samples=0 is rejected"""
        with self.assertRaises(InvalidArgument):
            estimate_sensitivity(torch.rand(1, 3, 32, 32), degrees={'identity': (0,)}, samples=0)

    def test_to_dict(self):
        """Test the JSON-ready form"""
        estimate = estimate_sensitivity(torch.rand(1, 3, 32, 32), degrees={'identity': (0,)}, samples=1)
        data = estimate.to_dict()

        self.assertEqual(set(data), {'map', 'components', 'samples', 'degrees'})
        self.assertEqual(len(data['map']), 3)
        self.assertEqual(data['degrees'], {'identity': [0]})

    def test_trigger_sensitivity(self):
        """Test a map measured with a trigger's own magnitudes and weights"""
        torch.manual_seed(0)
        trigger = TriggerModel(TriggerConfig(patch_size=8, k=4, n=16, width=8))

        estimate = trigger_sensitivity(trigger, torch.rand(2, 3, 16, 16), degrees={'gaussian_filter': (0.5,)},
                                       samples=1)

        self.assertIsInstance(estimate, SensitivityEstimate)
        self.assertEqual(tuple(estimate.map.shape), (3, 16))


class AggregateTest(SimpleTestCase):
    """Test aggregation and ranking"""

    def test_product(self):
        """Test the elementwise product"""
        first = torch.tensor([[1.0, 2.0, 3.0]])
        second = torch.tensor([[2.0, 0.5, 0.0]])
        self.assertTrue(torch.equal(aggregate([first, second]), torch.tensor([[2.0, 1.0, 0.0]])))

    def test_empty(self):
        """Test that aggregating nothing is rejected"""
        with self.assertRaises(InvalidArgument):
            aggregate([])

    def test_shape_mismatch(self):
        """Test that components of different shapes are rejected"""
        with self.assertRaises(InvalidArgument):
            aggregate([torch.zeros(3, 4), torch.zeros(3, 5)])

    def test_rank_ties_by_index(self):
        """Test that ranking breaks ties by the lower index"""
        sensitivity_map = torch.tensor([[0.3, 0.1, 0.1, 0.0, 0.3]])
        self.assertEqual(rank_frequencies(sensitivity_map, 3).tolist(), [[3, 1, 2]])

    def test_rank_invalid_k(self):
        """Test that K > N is rejected"""
        with self.assertRaises(InvalidArgument):
            rank_frequencies(torch.zeros(3, 4), 5)

    def test_zigzag_correlation(self):
        """Test that a map increasing along the scan has correlation 1"""
        self.assertAlmostEqual(zigzag_rank_correlation(torch.arange(64.0).expand(3, 64)), 1.0)
