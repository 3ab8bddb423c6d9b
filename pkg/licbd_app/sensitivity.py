"""
Frequency sensitivity estimate for the robust trigger.

A pseudo-poisoned image carries signal on every mid-band frequency. Each
preprocessing kind t_i is applied at random degrees and the relative change of
every injected coefficient is measured; the per-kind maps I_i are multiplied
into the sensitivity map I. Low entries mark frequencies that survive
preprocessing, which TopK selection then prefers.
"""

from dataclasses import dataclass, field
import logging

import numpy as np
import torch
from scipy.stats import spearmanr

from .dctkit import MidBand, blockwise_dct, extract_midband
from .exceptions import InvalidArgument, SensitivityError
from .preprocess import SENSITIVITY_DEGREES, PreprocessSpec, apply_preprocess
from .trigger import add_band_delta

logger = logging.getLogger(__name__)

DENOMINATOR_FLOOR = 1e-6


@dataclass
class SensitivityEstimate:
    map: torch.Tensor
    components: dict = field(default_factory=dict)
    samples: int = 0
    degrees: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            'map': self.map.tolist(),
            'components': {kind: value.tolist() for kind, value in self.components.items()},
            'samples': self.samples,
            'degrees': {kind: list(values) for kind, values in self.degrees.items()},
        }


def _per_image(tensor, batch, trailing_dims):
    if tensor.dim() == trailing_dims:
        return tensor.unsqueeze(0).expand(batch, *tensor.shape)
    return tensor


def pseudo_poison(x, magnitudes, weights, patch_size=16, band=None):
    """
    Inject mT on the whole mid-band (no TopK masking, no reweighting).

    Args:
        x: images [B, 3, H, W]
        magnitudes: mT, [3, N] or [B, 3, N], strictly positive
        weights: w, [nP] or [B, nP]

    Returns:
        x~_p, not clamped, so the band DCT of x~_p - x is exactly mT * w
    """
    band = band or MidBand.centered(patch_size, magnitudes.shape[-1])
    if (magnitudes <= 0).any():
        raise InvalidArgument('Pseudo-poisoning needs strictly positive magnitudes on every band frequency')
    squeeze = x.dim() == 3
    batch = x.unsqueeze(0) if squeeze else x
    magnitudes = _per_image(magnitudes, batch.shape[0], 2)
    weights = _per_image(weights, batch.shape[0], 1)
    poisoned = add_band_delta(batch, magnitudes, weights, patch_size, band)
    return poisoned[0] if squeeze else poisoned


def sensitivity_component(x_tilde, magnitudes, weights, kind, degrees, samples, seed=0,
                          patch_size=16, band=None, rng=None):
    """
    I_i for one preprocessing kind.

    For each of `samples` draws alpha ~ U(degrees), the absolute change of
    every band coefficient of every patch, divided by |mT * w| (floored at
    1e-6), is summed over patches. Draws and images are averaged.

    Returns:
        tensor [3, N]
    """
    if samples < 1:
        raise InvalidArgument(f'samples must be >= 1, got {samples}')
    band = band or MidBand.centered(patch_size, magnitudes.shape[-1])
    rng = rng if rng is not None else np.random.default_rng(seed)
    batch = x_tilde.shape[0]
    magnitudes = _per_image(magnitudes, batch, 2)
    weights = _per_image(weights, batch, 1)

    # [B, 3, nP, N]
    injected = (magnitudes[:, :, None, :] * weights[:, None, :, None]).abs().clamp(min=DENOMINATOR_FLOOR)
    reference = extract_midband(blockwise_dct(x_tilde, patch_size).data, band, patch_size)

    total = torch.zeros(3, band.length, dtype=x_tilde.dtype, device=x_tilde.device)
    for _ in range(samples):
        degree = degrees[int(rng.integers(len(degrees)))] if kind != 'identity' else 0.0
        spec = PreprocessSpec(kind, degree, int(rng.integers(2 ** 31 - 1)))
        processed = apply_preprocess(x_tilde, spec)
        changed = extract_midband(blockwise_dct(processed, patch_size).data, band, patch_size)
        ratio = (changed - reference).abs() / injected
        total += ratio.sum(dim=2).mean(dim=0)

    component = total / samples
    if not torch.isfinite(component).all():
        raise SensitivityError(f'Non-finite sensitivity for {kind}: {component}')
    return component


def aggregate(components):
    """I = elementwise product of the per-kind maps"""
    components = list(components)
    if not components:
        raise InvalidArgument('Cannot aggregate an empty list of sensitivity components')
    shape = components[0].shape
    result = components[0].clone()
    for component in components[1:]:
        if component.shape != shape:
            raise InvalidArgument(f'Component shapes differ: {tuple(shape)} vs {tuple(component.shape)}')
        result = result * component
    return result


def rank_frequencies(sensitivity_map, k):
    """Indices of the K least sensitive frequencies per channel, ascending, ties by index"""
    n = sensitivity_map.shape[-1]
    if not 0 < k <= n:
        raise InvalidArgument(f'Need 0 < K <= N, got K={k}, N={n}')
    return torch.argsort(sensitivity_map, dim=-1, stable=True)[..., :k]


def estimate_sensitivity(images, magnitudes=None, weights=None, degrees=None, samples=8, seed=0,
                         patch_size=16, band=None, pilot=0.05):
    """
    Build the sensitivity map from a held-out image set.

    Args:
        images: [B, 3, H, W]
        magnitudes/weights: mT and w from a trained trigger; a constant pilot
            magnitude and unit weights are used when omitted
        degrees: {kind: degree list}, defaults to SENSITIVITY_DEGREES
    """
    degrees = SENSITIVITY_DEGREES if degrees is None else degrees
    n = magnitudes.shape[-1] if magnitudes is not None else (band.length if band else 64)
    band = band or MidBand.centered(patch_size, n)
    images = images if images.dim() == 4 else images.unsqueeze(0)
    if magnitudes is None:
        magnitudes = torch.full((3, band.length), pilot, dtype=images.dtype, device=images.device)
    if weights is None:
        rows = -(-images.shape[-2] // patch_size)
        cols = -(-images.shape[-1] // patch_size)
        weights = images.new_ones(rows * cols)

    x_tilde = pseudo_poison(images, magnitudes, weights, patch_size, band)
    rng = np.random.default_rng(seed)
    components = {}
    for kind, kind_degrees in degrees.items():
        components[kind] = sensitivity_component(
            x_tilde, magnitudes, weights, kind, list(kind_degrees), samples,
            patch_size=patch_size, band=band, rng=rng,
        )
        logger.info('sensitivity %s: mean %.4f', kind, components[kind].mean().item())

    return SensitivityEstimate(
        map=aggregate(components.values()),
        components=components,
        samples=samples,
        degrees={kind: tuple(values) for kind, values in degrees.items()},
    )


def trigger_sensitivity(trigger, images, degrees=None, samples=8, seed=0):
    """Sensitivity map measured with a trained trigger's own mT and w"""
    with torch.no_grad():
        magnitudes = trigger.gen_magnitudes(images)
        weights = trigger.gen_patch_weights(images)
    return estimate_sensitivity(
        images, magnitudes, weights, degrees=degrees, samples=samples, seed=seed,
        patch_size=trigger.config.patch_size, band=trigger.band,
    )


def zigzag_rank_correlation(sensitivity_map):
    """Spearman correlation between channel-averaged sensitivity and zigzag position"""
    values = sensitivity_map.reshape(-1, sensitivity_map.shape[-1]).mean(dim=0).cpu().numpy()
    correlation, _ = spearmanr(np.arange(values.shape[0]), values)
    return float(correlation)
