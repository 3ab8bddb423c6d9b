"""
Preprocessing transforms a defender may apply before an image reaches the codec.

They serve two roles: defenses swept by the resistance evaluation, and the
random augmentations t of robust (stage-2) encoder finetuning. All of them map
[0, 1] images to [0, 1] images of the same shape.
"""

from dataclasses import dataclass
from io import BytesIO
import math

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .exceptions import InvalidArgument, PreprocessError

KINDS = ('gaussian_filter', 'additive_noise', 'jpeg', 'squeeze_bits', 'identity')

# Degree grids of the resistance sweep
RESISTANCE_GRID = {
    'gaussian_filter': (0.2, 0.4, 0.5, 0.6, 0.8, 1.0),
    'additive_noise': (0.02, 0.04, 0.06, 0.08, 0.1),
    'jpeg': (90, 70, 50, 30, 10),
    'squeeze_bits': (7, 6, 5, 4, 3),
}

# Mild/moderate degrees used by the sensitivity estimate and stage-2 sampling
SENSITIVITY_DEGREES = {
    'gaussian_filter': (0.2, 0.3, 0.4, 0.5, 0.6),
    'additive_noise': (0.02, 0.03, 0.04, 0.05, 0.06),
    'jpeg': (90, 70, 50),
}


@dataclass(frozen=True)
class PreprocessSpec:
    """One transform t_i at degree alpha; seed drives the stochastic kinds"""
    kind: str
    degree: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidArgument(f'Unknown preprocessing kind {self.kind!r}; expected one of {KINDS}')
        if self.kind in ('gaussian_filter', 'additive_noise') and self.degree < 0:
            raise InvalidArgument(f'{self.kind} needs sigma >= 0, got {self.degree}')
        if self.kind == 'jpeg' and not (1 <= self.degree <= 100 and int(self.degree) == self.degree):
            raise InvalidArgument(f'JPEG quality must be an integer in [1, 100], got {self.degree}')
        if self.kind == 'squeeze_bits' and not (1 <= self.degree <= 8 and int(self.degree) == self.degree):
            raise InvalidArgument(f'Bit depth must be an integer in [1, 8], got {self.degree}')

    @property
    def label(self):
        if self.kind == 'identity':
            return 'identity'
        return f'{self.kind}({self.degree:g})'


IDENTITY = PreprocessSpec('identity')


def gaussian_kernel1d(sigma, dtype=torch.float64, device=None):
    """Normalized 1D Gaussian taps over radius ceil(3 * sigma)"""
    radius = max(int(math.ceil(3 * sigma)), 1)
    offsets = torch.arange(-radius, radius + 1, dtype=dtype, device=device)
    kernel = torch.exp(-offsets ** 2 / (2 * sigma ** 2))
    return kernel / kernel.sum()


def gaussian_filter(x, sigma):
    """Separable per-channel Gaussian blur with reflect boundary; sigma=0 is the identity"""
    if sigma < 0:
        raise InvalidArgument(f'sigma must be >= 0, got {sigma}')
    if sigma == 0:
        return x
    kernel = gaussian_kernel1d(sigma, dtype=x.dtype, device=x.device)
    radius = kernel.numel() // 2

    shape = x.shape
    height, width = shape[-2:]
    flat = x.reshape(-1, 1, height, width)
    mode = 'reflect' if radius < height and radius < width else 'replicate'
    flat = F.pad(flat, (radius, radius, radius, radius), mode=mode)
    flat = F.conv2d(flat, kernel.view(1, 1, 1, -1))
    flat = F.conv2d(flat, kernel.view(1, 1, -1, 1))
    return flat.reshape(shape)


def additive_noise(x, sigma, seed=0, generator=None):
    """x + n with n ~ N(0, sigma^2) i.i.d., clamped to [0, 1]"""
    if sigma < 0:
        raise InvalidArgument(f'sigma must be >= 0, got {sigma}')
    if sigma == 0:
        return x
    if generator is None:
        generator = torch.Generator(device=x.device).manual_seed(int(seed))
    noise = torch.randn(x.shape, generator=generator, dtype=x.dtype, device=x.device)
    return (x + sigma * noise).clamp(0.0, 1.0)


def _jpeg_roundtrip(image, quality):
    array = (image.detach().clamp(0, 1) * 255.0).round().to(torch.uint8)
    array = array.permute(1, 2, 0).cpu().numpy()
    buffer = BytesIO()
    try:
        Image.fromarray(array).save(buffer, format='JPEG', quality=int(quality))
        buffer.seek(0)
        decoded = np.asarray(Image.open(buffer).convert('RGB'), dtype=np.float32) / 255.0
    except (OSError, ValueError) as exc:
        raise PreprocessError(f'JPEG round trip at quality {quality} failed: {exc}') from exc
    return torch.from_numpy(decoded).permute(2, 0, 1)


def jpeg(x, quality):
    """Round trip through Pillow's baseline JPEG codec, with a straight-through gradient"""
    if not (1 <= quality <= 100):
        raise InvalidArgument(f'JPEG quality must be in [1, 100], got {quality}')
    if x.shape[-3] != 3:
        raise PreprocessError(f'JPEG needs 3-channel images, got {x.shape[-3]} channels')
    shape = x.shape
    images = x.reshape(-1, *shape[-3:])
    out = torch.stack([_jpeg_roundtrip(image, quality) for image in images])
    out = out.to(dtype=x.dtype, device=x.device).reshape(shape)
    return x + (out - x).detach()


def squeeze_bits(x, depth):
    """Reduce every channel to 2^depth levels, rounding half away from zero"""
    if not (1 <= depth <= 8):
        raise InvalidArgument(f'Bit depth must be in [1, 8], got {depth}')
    levels = 2 ** int(depth) - 1
    scaled = x * levels
    return torch.sign(scaled) * torch.floor(scaled.abs() + 0.5) / levels


def apply_preprocess(x, spec, generator=None):
    """Apply one PreprocessSpec to an image or batch"""
    if spec.kind == 'identity':
        return x
    if spec.kind == 'gaussian_filter':
        return gaussian_filter(x, spec.degree)
    if spec.kind == 'additive_noise':
        return additive_noise(x, spec.degree, seed=spec.seed, generator=generator)
    if spec.kind == 'jpeg':
        return jpeg(x, int(spec.degree))
    return squeeze_bits(x, int(spec.degree))


def grid_specs(grid, seed=0):
    """Flatten a {kind: degrees} grid into PreprocessSpecs, in grid order"""
    return [PreprocessSpec(kind, degree, seed) for kind, degrees in grid.items() for degree in degrees]


def sample_preprocess(rng, degrees=None, include_identity=True):
    """
    Draw t uniformly from S_prep (plus the identity) and alpha from its degree list.

    Args:
        rng: numpy Generator; the draw sequence is fixed by its seed
        degrees: {kind: degrees}, defaults to SENSITIVITY_DEGREES
    """
    degrees = SENSITIVITY_DEGREES if degrees is None else degrees
    kinds = list(degrees)
    if include_identity:
        kinds.append('identity')
    kind = kinds[int(rng.integers(len(kinds)))]
    seed = int(rng.integers(2 ** 31 - 1))
    if kind == 'identity':
        return PreprocessSpec('identity', seed=seed)
    options = degrees[kind]
    return PreprocessSpec(kind, options[int(rng.integers(len(options)))], seed)
