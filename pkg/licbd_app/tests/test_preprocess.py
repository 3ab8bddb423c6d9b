"""
Tests for the preprocessing transforms
"""

from django.test import SimpleTestCase
import numpy as np
import torch
import torch.nn.functional as F

from licbd_app.codec import psnr
from licbd_app.exceptions import InvalidArgument
from licbd_app.preprocess import (
    IDENTITY, RESISTANCE_GRID, PreprocessSpec, additive_noise, apply_preprocess, gaussian_filter,
    gaussian_kernel1d, grid_specs, jpeg, sample_preprocess, squeeze_bits,
)


def smooth_images(n=2, size=32, seed=0):
    generator = torch.Generator().manual_seed(seed)
    coarse = torch.rand(n, 3, size // 8, size // 8, generator=generator)
    return F.interpolate(coarse, size=(size, size), mode='bilinear', align_corners=False)


class PreprocessSpecTest(SimpleTestCase):
    """Test PreprocessSpec validation"""

    def test_unknown_kind(self):
        """Test that an unknown kind is rejected"""
        with self.assertRaises(InvalidArgument):
            PreprocessSpec('median', 3)

    def test_jpeg_quality_range(self):
        """Test that JPEG quality 0 is rejected"""
        with self.assertRaises(InvalidArgument):
            PreprocessSpec('jpeg', 0)

    def test_negative_sigma(self):
        """Test that a negative Gaussian sigma is rejected"""
        with self.assertRaises(InvalidArgument):
            PreprocessSpec('gaussian_filter', -0.1)

    def test_labels(self):
        """Test the display labels"""
        self.assertEqual(IDENTITY.label, 'identity')
        self.assertEqual(PreprocessSpec('jpeg', 50).label, 'jpeg(50)')


class TransformTest(SimpleTestCase):
    """Test the individual transforms"""

    def setUp(self):
        """Set up test data"""
        self.x = smooth_images()

    def test_identity_returns_input(self):
        """Test that the identity transform is exact"""
        self.assertIs(apply_preprocess(self.x, IDENTITY), self.x)

    def test_kernel_normalized(self):
        """Test that Gaussian taps sum to one over radius ceil(3 sigma)"""
        kernel = gaussian_kernel1d(0.5)
        self.assertEqual(kernel.numel(), 2 * 2 + 1)
        self.assertAlmostEqual(kernel.sum().item(), 1.0, places=12)

    def test_gaussian_zero_sigma(self):
        """Test that sigma=0 leaves the image unchanged"""
        self.assertTrue(torch.equal(gaussian_filter(self.x, 0.0), self.x))

    def test_gaussian_preserves_constants(self):
        """Test that blurring a flat image changes nothing"""
        flat = torch.full((3, 16, 16), 0.3, dtype=torch.float64)
        self.assertTrue(torch.allclose(gaussian_filter(flat, 1.0), flat, atol=1e-12))

    def test_gaussian_shape_and_range(self):
        """Test that blur keeps shape and [0, 1]"""
        out = gaussian_filter(torch.rand(2, 3, 20, 24), 0.8)
        self.assertEqual(tuple(out.shape), (2, 3, 20, 24))
        self.assertGreaterEqual(out.min().item(), 0.0)
        self.assertLessEqual(out.max().item(), 1.0 + 1e-6)

    def test_noise_seeded(self):
        """Test that noise with the same seed is identical and clamped"""
        first = additive_noise(self.x, 0.05, seed=3)
        second = additive_noise(self.x, 0.05, seed=3)
        third = additive_noise(self.x, 0.05, seed=4)

        self.assertTrue(torch.equal(first, second))
        self.assertFalse(torch.equal(first, third))
        self.assertGreaterEqual(first.min().item(), 0.0)
        self.assertLessEqual(first.max().item(), 1.0)

    def test_jpeg_high_quality_is_close(self):
        """Test that quality 100 JPEG keeps PSNR >= 40 dB on a smooth image"""
        out = jpeg(self.x, 100)
        self.assertEqual(tuple(out.shape), tuple(self.x.shape))
        self.assertGreaterEqual(psnr(self.x, out).item(), 40.0)

    def test_jpeg_low_quality_is_lossier(self):
        """Test that quality 10 loses more than quality 90"""
        x = torch.rand(1, 3, 32, 32, generator=torch.Generator().manual_seed(2))
        self.assertLess(psnr(x, jpeg(x, 10)).item(), psnr(x, jpeg(x, 90)).item())

    def test_jpeg_passes_gradient_straight_through(self):
        """Test that JPEG output carries the decoded pixels and an identity gradient"""
        x = smooth_images(1, 16, seed=3).requires_grad_(True)
        out = jpeg(x, 50)
        out.sum().backward()

        self.assertTrue(torch.allclose(out.detach(), jpeg(x.detach(), 50)))
        self.assertTrue(torch.equal(x.grad, torch.ones_like(x)))

    def test_squeeze_bits_levels(self):
        """Test that 1-bit squeezing maps to {0, 1} and 8-bit is nearly lossless"""
        x = torch.rand(3, 8, 8)
        binary = squeeze_bits(x, 1)

        self.assertTrue(set(binary.unique().tolist()) <= {0.0, 1.0})
        self.assertLessEqual((squeeze_bits(x, 8) - x).abs().max().item(), 0.5 / 255 + 1e-6)

    def test_squeeze_bits_range(self):
        """Test that depth 9 is rejected"""
        with self.assertRaises(InvalidArgument):
            squeeze_bits(self.x, 9)


class GridTest(SimpleTestCase):
    """Test grids and stage-2 sampling"""

    def test_grid_specs_order(self):
        """Test that grid_specs flattens in grid order"""
        specs = grid_specs(RESISTANCE_GRID)

        self.assertEqual(len(specs), 6 + 5 + 5 + 5)
        self.assertEqual((specs[0].kind, specs[0].degree), ('gaussian_filter', 0.2))
        self.assertEqual((specs[-1].kind, specs[-1].degree), ('squeeze_bits', 3))

    def test_sample_is_deterministic(self):
        """Test that the same rng seed gives the same draw sequence"""
        rng_a, rng_b = np.random.default_rng(9), np.random.default_rng(9)

        self.assertEqual([sample_preprocess(rng_a) for _ in range(20)],
                         [sample_preprocess(rng_b) for _ in range(20)])

    def test_sample_covers_identity(self):
        """Test that identity is among the drawn kinds"""
        rng = np.random.default_rng(0)
        kinds = {sample_preprocess(rng).kind for _ in range(200)}
        self.assertIn('identity', kinds)
        self.assertIn('jpeg', kinds)

    def test_sample_without_identity(self):
        """Test that include_identity=False never draws the identity"""
        rng = np.random.default_rng(0)
        kinds = {sample_preprocess(rng, include_identity=False).kind for _ in range(100)}
        self.assertNotIn('identity', kinds)
