"""
Trigger injection models.

TriggerModel is the learnable, sample-specific frequency trigger: a general
generator predicts mid-band magnitudes mT from the image, a patch-weight
generator predicts one scalar per patch, TopK selection keeps the K least
sensitive frequencies and the result is added to the blockwise DCT of the
image. BaselineTrigger wraps the four reference triggers (BadNets, Blended,
FTrojan, LIRA) behind the same inject() interface.
"""

from dataclasses import asdict, dataclass
import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .dctkit import MidBand, dct2, embed_midband, idct2, merge_patches, padded_size, split_patches
from .exceptions import InvalidArgument, SensitivityError

SCORE_SOURCES = ('learned', 'sensitivity')
MAGNITUDE_MODES = ('input', 'free')
BASELINE_KINDS = ('badnets', 'blended', 'ftrojan', 'lira')


@dataclass
class TriggerConfig:
    patch_size: int = 16
    k: int = 16
    n: int = 64
    band_start: int = None
    epsilon: float = 0.005
    gamma: float = 1e4
    mag_max: float = 0.5
    score_source: str = 'learned'
    magnitude_mode: str = 'input'
    use_patch_weights: bool = True
    k1_factor: float = math.sqrt(1.5)
    width: int = 32

    @property
    def band(self):
        if self.band_start is None:
            return MidBand.centered(self.patch_size, self.n)
        return MidBand(self.band_start, self.n)

    def validate(self):
        if not 0 < self.k <= self.n:
            raise InvalidArgument(f'Need 0 < K <= N, got K={self.k}, N={self.n}')
        if self.n > self.patch_size ** 2:
            raise InvalidArgument(f'N={self.n} exceeds the {self.patch_size ** 2} frequencies of a patch')
        self.band.validate(self.patch_size)
        if self.epsilon <= 0:
            raise InvalidArgument(f'epsilon must be positive, got {self.epsilon}')
        if self.score_source not in SCORE_SOURCES:
            raise InvalidArgument(f'score_source must be one of {SCORE_SOURCES}, got {self.score_source!r}')
        if self.magnitude_mode not in MAGNITUDE_MODES:
            raise InvalidArgument(f'magnitude_mode must be one of {MAGNITUDE_MODES}, got {self.magnitude_mode!r}')
        return self


def reweight_factors(k, k1_factor=math.sqrt(1.5)):
    """sqrt((K-1-i)/(K-1) + 1/2) for ranks i = 0..K-1"""
    if k == 1:
        return torch.tensor([k1_factor], dtype=torch.float64)
    ranks = torch.arange(k, dtype=torch.float64)
    return torch.sqrt((k - 1 - ranks) / (k - 1) + 0.5)


def selection_weights(scores, k, k1_factor=math.sqrt(1.5)):
    """
    Per-frequency multipliers of TopK selection and reweighting.

    The K lowest scores (ties: lower index first) get the rank factors, the
    other N-K get zero. Works on any [..., N] tensor.
    """
    n = scores.shape[-1]
    if not 0 < k <= n:
        raise InvalidArgument(f'Need 0 < K <= N, got K={k}, N={n}')
    if not torch.isfinite(scores).all():
        raise InvalidArgument('Selection scores must be finite')
    order = torch.argsort(scores.detach(), dim=-1, stable=True)
    ranks = torch.empty_like(order)
    ranks.scatter_(-1, order, torch.arange(n, device=scores.device).expand_as(order).contiguous())
    by_rank = torch.zeros(n, dtype=scores.dtype, device=scores.device)
    by_rank[:k] = reweight_factors(k, k1_factor).to(dtype=scores.dtype, device=scores.device)
    return by_rank[ranks]


def topk_select_reweight(magnitudes, scores, k, k1_factor=math.sqrt(1.5)):
    """mT' = mT * selection_weights(I, K); scores broadcast against magnitudes"""
    if magnitudes.shape[-1] != scores.shape[-1]:
        raise InvalidArgument(f'Magnitudes ({magnitudes.shape[-1]}) and scores ({scores.shape[-1]}) disagree on N')
    return magnitudes * selection_weights(scores, k, k1_factor)


def stealth_penalty(x, x_p, epsilon=0.005, gamma=1e4):
    """gamma * max(MSE(x, x_p), epsilon^2), MSE per image, averaged over the batch"""
    if x.shape != x_p.shape:
        raise InvalidArgument(f'Shapes differ: {tuple(x.shape)} vs {tuple(x_p.shape)}')
    err = ((x_p - x) ** 2).reshape(-1, *x.shape[-3:]).mean(dim=(1, 2, 3))
    return gamma * err.clamp(min=epsilon ** 2).mean()


def add_band_delta(x, band_values, weights, patch_size, band):
    """
    Add per-patch mid-band values to the blockwise DCT of x.

    Args:
        x: images [B, C, H, W]
        band_values: [B, C, N] values on the band
        weights: [B, nP] per-patch scale

    Returns:
        poisoned images before clamping
    """
    blocks = dct2(split_patches(x, patch_size))
    grid = embed_midband(band_values, band, patch_size)
    delta = grid.unsqueeze(-3) * weights[:, None, :, None, None]
    return merge_patches(idct2(blocks.with_data(blocks.data + delta)))


def _batch(x):
    if x.dim() == 3:
        return x.unsqueeze(0), True
    if x.dim() != 4:
        raise InvalidArgument(f'Expected an image [3, H, W] or batch [B, 3, H, W], got {tuple(x.shape)}')
    return x, False


class TriggerModel(nn.Module):
    """
    Learnable frequency trigger T(x | theta_t).

    With score_source='learned' a linear head predicts the per-frequency
    scores fed to TopK selection (straight-through gradients); with
    'sensitivity' the fixed sensitivity map I is used instead.
    """

    kind = 'adaptive'

    def __init__(self, config=None):
        super().__init__()
        self.config = (config or TriggerConfig()).validate()
        cfg = self.config
        width = cfg.width
        out_features = 3 * cfg.n

        self.features = nn.Sequential(
            nn.Conv2d(3, width, 3, stride=2, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(width, 2 * width, 3, stride=2, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(2 * width, 2 * width, 3, stride=2, padding=1),
            nn.ReLU(inplace=True),
            nn.AdaptiveAvgPool2d(1),
            nn.Flatten(),
        )
        if cfg.magnitude_mode == 'input':
            self.magnitude_head = nn.Linear(2 * width, out_features)
            self.score_head = nn.Linear(2 * width, out_features)
        else:
            self.magnitude_logits = nn.Parameter(torch.zeros(3, cfg.n))
            self.score_logits = nn.Parameter(0.01 * torch.randn(3, cfg.n))

        self.patch_local = nn.Sequential(
            nn.Conv2d(3, width, 3, padding=1, padding_mode='reflect'),
            nn.ReLU(inplace=True),
            nn.Conv2d(width, width, 3, padding=2, dilation=2, padding_mode='reflect'),
            nn.ReLU(inplace=True),
            nn.Conv2d(width, width, 3, padding=4, dilation=4, padding_mode='reflect'),
            nn.ReLU(inplace=True),
        )
        self.patch_context = nn.Linear(width, width)
        self.patch_head = nn.Conv2d(width, 1, 1)

        self.register_buffer('sensitivity', torch.zeros(3, cfg.n))
        self.register_buffer('sensitivity_set', torch.zeros((), dtype=torch.bool))

    def describe(self):
        return {'kind': self.kind, 'config': asdict(self.config)}

    @property
    def band(self):
        return self.config.band

    def set_sensitivity(self, sensitivity_map):
        sensitivity_map = torch.as_tensor(sensitivity_map, dtype=self.sensitivity.dtype)
        if sensitivity_map.shape != self.sensitivity.shape:
            raise InvalidArgument(
                f'Sensitivity map must be {tuple(self.sensitivity.shape)}, got {tuple(sensitivity_map.shape)}'
            )
        if not torch.isfinite(sensitivity_map).all() or (sensitivity_map < 0).any():
            raise InvalidArgument('Sensitivity map must be finite and nonnegative')
        self.sensitivity.copy_(sensitivity_map.to(self.sensitivity.device))
        self.sensitivity_set.fill_(True)

    def _features(self, x):
        return self.features(x)

    def gen_magnitudes(self, x):
        """General trigger mT [B, 3, N] in [0, mag_max]"""
        batch, squeeze = _batch(x)
        if self.config.magnitude_mode == 'input':
            logits = self.magnitude_head(self._features(batch)).view(-1, 3, self.config.n)
        else:
            logits = self.magnitude_logits.expand(batch.shape[0], -1, -1)
        magnitudes = torch.sigmoid(logits) * self.config.mag_max
        return magnitudes[0] if squeeze else magnitudes

    def gen_scores(self, x):
        """Per-frequency selection scores [B, 3, N]; lower means preferred"""
        batch, squeeze = _batch(x)
        if self.config.score_source == 'sensitivity':
            if not bool(self.sensitivity_set):
                raise SensitivityError('score_source is sensitivity but no sensitivity map was set')
            scores = self.sensitivity.expand(batch.shape[0], -1, -1)
        elif self.config.magnitude_mode == 'input':
            scores = self.score_head(self._features(batch)).view(-1, 3, self.config.n)
        else:
            scores = self.score_logits.expand(batch.shape[0], -1, -1)
        return scores[0] if squeeze else scores

    def gen_patch_weights(self, x):
        """Nonnegative per-patch weights w [B, nP], row-major over the patch grid"""
        batch, squeeze = _batch(x)
        rows, cols = padded_size(batch.shape[-2], batch.shape[-1], self.config.patch_size)
        if not self.config.use_patch_weights:
            weights = batch.new_ones(batch.shape[0], rows * cols)
            return weights[0] if squeeze else weights

        local = self.patch_local(batch)
        context = self.patch_context(local.mean(dim=(2, 3)))
        fused = F.relu(local + context[:, :, None, None])
        pooled = F.adaptive_avg_pool2d(self.patch_head(fused), (rows, cols))
        weights = F.softplus(pooled).flatten(1)
        return weights[0] if squeeze else weights

    def selected_magnitudes(self, x, scores=None):
        """mT' after TopK selection and reweighting"""
        magnitudes = self.gen_magnitudes(x)
        if scores is None:
            scores = self.gen_scores(x)
        hard = selection_weights(scores, self.config.k, self.config.k1_factor)
        if self.config.score_source == 'learned' and scores.requires_grad:
            soft = torch.sigmoid(-scores)
            hard = hard + soft - soft.detach()
        return magnitudes * hard

    def inject(self, x, scores=None, clamp=True):
        """
        Poison x: blockwise DCT, add mT' on the mid-band scaled by w, inverse DCT.

        Args:
            x: [3, H, W] or [B, 3, H, W]
            scores: optional override of the selection scores / sensitivity map
            clamp: clamp the result to [0, 1]
        """
        batch, squeeze = _batch(x)
        values = self.selected_magnitudes(batch, scores)
        weights = self.gen_patch_weights(batch)
        poisoned = add_band_delta(batch, values, weights, self.config.patch_size, self.band)
        if clamp:
            poisoned = poisoned.clamp(0.0, 1.0)
        return poisoned[0] if squeeze else poisoned

    def injection_delta(self, x, scores=None):
        """Pre-clamp pixel perturbation x_p - x"""
        return self.inject(x, scores, clamp=False) - x

    def stealth_penalty(self, x, x_p):
        return stealth_penalty(x, x_p, self.config.epsilon, self.config.gamma)

    def forward(self, x):
        return self.inject(x)


def baseline_badnets(x, patch_frac=0.1):
    """White square covering patch_frac of the image area, bottom-right corner"""
    height, width = x.shape[-2:]
    side = min(int(round(math.sqrt(patch_frac * height * width))), height, width)
    poisoned = x.clone()
    if side > 0:
        poisoned[..., height - side:, width - side:] = 1.0
    return poisoned


def tile_pattern(pattern, height, width):
    reps_h = math.ceil(height / pattern.shape[-2])
    reps_w = math.ceil(width / pattern.shape[-1])
    return pattern.repeat(*([1] * (pattern.dim() - 2)), reps_h, reps_w)[..., :height, :width]


def baseline_blended(x, pattern, prop=0.01):
    """(1 - prop) * x + prop * pattern, the pattern tiled over the image"""
    if pattern.dim() == 2:
        pattern = pattern.unsqueeze(0)
    if pattern.dim() != 3 or pattern.shape[0] not in (1, x.shape[-3]):
        raise InvalidArgument(
            f'Pattern shaped {tuple(pattern.shape)} does not match {x.shape[-3]}-channel images'
        )
    tiled = tile_pattern(pattern.to(dtype=x.dtype, device=x.device), *x.shape[-2:])
    return (1 - prop) * x + prop * tiled


def baseline_ftrojan(x, positions=((7, 7), (15, 15)), magnitudes=(30 / 255, 30 / 255),
                     channels=(1, 2), patch_size=16, clamp=True):
    """
    Fixed-magnitude injection on fixed DCT positions of every patch.

    Args:
        positions: (row, col) frequencies inside a patch, default one mid and one high
        magnitudes: coefficient offsets, one per position
        channels: colour channels that carry the trigger
    """
    if len(positions) != len(magnitudes):
        raise InvalidArgument('FTrojan needs one magnitude per position')
    batch, squeeze = _batch(x)
    blocks = dct2(split_patches(batch, patch_size))
    delta = torch.zeros(batch.shape[1], patch_size, patch_size, dtype=batch.dtype, device=batch.device)
    for (row, col), magnitude in zip(positions, magnitudes):
        if not (0 <= row < patch_size and 0 <= col < patch_size):
            raise InvalidArgument(f'Position ({row}, {col}) outside a {patch_size}x{patch_size} patch')
        for channel in channels:
            delta[channel, row, col] += magnitude
    poisoned = merge_patches(idct2(blocks.with_data(blocks.data + delta[:, None])))
    if clamp:
        poisoned = poisoned.clamp(0.0, 1.0)
    return poisoned[0] if squeeze else poisoned


class LiraGenerator(nn.Module):
    """Small U-Net producing a bounded perturbation pattern U(x)"""

    def __init__(self, width=16):
        super().__init__()
        self.enc = nn.Sequential(nn.Conv2d(3, width, 3, padding=1), nn.ReLU(inplace=True))
        self.down = nn.Sequential(nn.Conv2d(width, 2 * width, 3, stride=2, padding=1), nn.ReLU(inplace=True))
        self.up = nn.ConvTranspose2d(2 * width, width, 4, stride=2, padding=1)
        self.out = nn.Conv2d(2 * width, 3, 3, padding=1)

    def forward(self, x):
        skip = self.enc(x)
        up = F.relu(self.up(self.down(skip)))
        up = up[..., :skip.shape[-2], :skip.shape[-1]]
        return torch.tanh(self.out(torch.cat([skip, up], dim=1)))


def baseline_lira(unet, x, epsilon=0.005, clamp=True):
    """x + epsilon * Normalize(U(x)), Normalize scaling U(x) to unit MSE per image"""
    batch, squeeze = _batch(x)
    pattern = unet(batch)
    rms = pattern.pow(2).mean(dim=(1, 2, 3), keepdim=True).clamp(min=1e-12).sqrt()
    poisoned = batch + epsilon * pattern / rms
    if clamp:
        poisoned = poisoned.clamp(0.0, 1.0)
    return poisoned[0] if squeeze else poisoned


class BaselineTrigger(nn.Module):
    """
    A reference trigger usable wherever a TriggerModel is.

    Only 'lira' has trainable parameters; the others are fixed transforms.
    """

    def __init__(self, kind, patch_frac=0.1, prop=0.01, epsilon=0.005, pattern_size=16,
                 positions=((7, 7), (15, 15)), magnitudes=(30 / 255, 30 / 255), patch_size=16,
                 width=16, gamma=1e4, seed=0):
        super().__init__()
        if kind not in BASELINE_KINDS:
            raise InvalidArgument(f'Unknown baseline trigger {kind!r}; expected one of {BASELINE_KINDS}')
        self.kind = kind
        self.options = {
            'patch_frac': patch_frac, 'prop': prop, 'epsilon': epsilon, 'pattern_size': pattern_size,
            'positions': [list(p) for p in positions], 'magnitudes': list(magnitudes),
            'patch_size': patch_size, 'width': width, 'gamma': gamma, 'seed': seed,
        }
        generator = torch.Generator().manual_seed(seed)
        self.register_buffer('pattern', torch.rand(3, pattern_size, pattern_size, generator=generator))
        self.unet = LiraGenerator(width) if kind == 'lira' else None

    def describe(self):
        return {'kind': self.kind, 'options': dict(self.options)}

    def inject(self, x, scores=None, clamp=True):
        opts = self.options
        if self.kind == 'badnets':
            return baseline_badnets(x, opts['patch_frac'])
        if self.kind == 'blended':
            return baseline_blended(x, self.pattern, opts['prop'])
        if self.kind == 'ftrojan':
            return baseline_ftrojan(x, [tuple(p) for p in opts['positions']], opts['magnitudes'],
                                    patch_size=opts['patch_size'], clamp=clamp)
        return baseline_lira(self.unet, x, opts['epsilon'], clamp=clamp)

    def stealth_penalty(self, x, x_p):
        return stealth_penalty(x, x_p, self.options['epsilon'], self.options['gamma'])

    def forward(self, x):
        return self.inject(x)


def build_trigger(description):
    """Recreate a trigger from TriggerModel.describe() / BaselineTrigger.describe()"""
    kind = description.get('kind')
    if kind == TriggerModel.kind:
        return TriggerModel(TriggerConfig(**description['config']))
    if kind in BASELINE_KINDS:
        options = dict(description.get('options', {}))
        options['positions'] = [tuple(p) for p in options.get('positions', ((7, 7), (15, 15)))]
        return BaselineTrigger(kind, **options)
    raise InvalidArgument(f'Cannot build a trigger of kind {kind!r}')
