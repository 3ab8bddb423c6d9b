"""
A small trainable learned image codec.

Four strided convolution stages with GDN map an image to a latent y; the
decoder mirrors them with inverse GDN. Rates come from a factorized entropy
bottleneck, or from a Gaussian conditional driven by a scale hyperprior. There
is no arithmetic coder: the rate is the entropy estimate -log2 p(y_hat).
"""

from dataclasses import dataclass, field
import logging
import math

import torch
import torch.nn as nn
import torch.nn.functional as F
from compressai.entropy_models import EntropyBottleneck, GaussianConditional
from compressai.layers import GDN
from compressai.models import CompressionModel
from compressai.models.utils import conv, deconv
from tqdm import tqdm

from .exceptions import InvalidArgument, TrainingDiverged

logger = logging.getLogger(__name__)

PROBABILITY_FLOOR = 1e-9
# lambda values are calibrated against MSE on the 0-255 scale
DISTORTION_SCALE = 255.0 ** 2
PSNR_CAP = 100.0
MIN_TRAINING_IMAGES = 100


@dataclass
class RateEstimate:
    """Estimated coding cost of a batch; tensors are per image"""
    bits: torch.Tensor
    bpp: torch.Tensor
    latent_bits: torch.Tensor
    hyper_bits: torch.Tensor
    clamped: int = 0


@dataclass
class CodecOutput:
    x_hat: torch.Tensor
    y: torch.Tensor
    y_hat: torch.Tensor
    rate: RateEstimate
    likelihoods: dict = field(default_factory=dict)


@dataclass
class RdTerms:
    rate: torch.Tensor
    distortion: torch.Tensor
    loss: torch.Tensor
    mse: torch.Tensor


def bits_from_likelihoods(likelihoods, floor=PROBABILITY_FLOOR):
    """
    Information content of a set of probabilities.

    Args:
        likelihoods: tensor of probabilities [B, ...]
        floor: lower bound applied before the log

    Returns:
        (bits per leading item, number of entries that were floored)
    """
    clamped = int((likelihoods < floor).sum().item())
    if clamped:
        logger.debug('Floored %d probabilities to %g', clamped, floor)
    safe = likelihoods.clamp(min=floor)
    bits = -torch.log2(safe)
    return bits.reshape(bits.shape[0], -1).sum(dim=1), clamped


def rd_objective(rate, distortion, lam):
    """L = R + lambda * D"""
    return rate + lam * distortion


def mse(x, x_hat):
    return torch.mean((x - x_hat) ** 2)


def psnr(x, x_hat, cap=PSNR_CAP):
    """Differentiable PSNR in dB for [0, 1] images, capped at `cap`"""
    err = mse(x, x_hat).clamp(min=10.0 ** (-cap / 10.0))
    return -10.0 * torch.log10(err)


def round_half_away(values):
    return torch.sign(values) * torch.floor(values.abs() + 0.5)


class CodecModel(CompressionModel):
    """
    Encoder g_a, decoder g_s and entropy model of a learned codec.

    Args:
        N: channels of the hidden transform layers
        M: latent channels
        hyperprior: model y with a Gaussian conditional whose scales come from
            a hyper-latent z; otherwise y uses the factorized bottleneck
        lam: rate-distortion trade-off the model was (or will be) trained for
    """

    downsampling = 16

    def __init__(self, N=128, M=192, hyperprior=False, lam=0.0130):
        super().__init__()
        if lam <= 0:
            raise InvalidArgument(f'lambda must be positive, got {lam}')
        self.N = N
        self.M = M
        self.hyperprior = hyperprior
        self.lam = lam

        self.g_a = nn.Sequential(
            conv(3, N),
            GDN(N),
            conv(N, N),
            GDN(N),
            conv(N, N),
            GDN(N),
            conv(N, M),
        )
        self.g_s = nn.Sequential(
            deconv(M, N),
            GDN(N, inverse=True),
            deconv(N, N),
            GDN(N, inverse=True),
            deconv(N, N),
            GDN(N, inverse=True),
            deconv(N, 3),
        )

        if hyperprior:
            self.h_a = nn.Sequential(
                conv(M, N, stride=1, kernel_size=3),
                nn.ReLU(inplace=True),
                conv(N, N),
                nn.ReLU(inplace=True),
                conv(N, N),
            )
            self.h_s = nn.Sequential(
                deconv(N, N),
                nn.ReLU(inplace=True),
                deconv(N, N),
                nn.ReLU(inplace=True),
                conv(N, M, stride=1, kernel_size=3),
                nn.ReLU(inplace=True),
            )
            self.entropy_bottleneck = EntropyBottleneck(N)
            self.gaussian_conditional = GaussianConditional(None)
        else:
            self.entropy_bottleneck = EntropyBottleneck(M)

    @property
    def arch(self):
        return {'N': self.N, 'M': self.M, 'hyperprior': self.hyperprior, 'lam': self.lam}

    @classmethod
    def from_arch(cls, arch):
        return cls(N=arch['N'], M=arch['M'], hyperprior=arch['hyperprior'], lam=arch['lam'])

    @property
    def pad_multiple(self):
        return self.downsampling * 4 if self.hyperprior else self.downsampling

    def encoder_parameters(self):
        return list(self.g_a.parameters())

    def decoder_parameters(self):
        return list(self.g_s.parameters())

    def entropy_parameters(self):
        params = list(self.entropy_bottleneck.parameters())
        if self.hyperprior:
            params += list(self.h_a.parameters()) + list(self.h_s.parameters())
            params += list(self.gaussian_conditional.parameters())
        return params

    def encode(self, x):
        """
        Analysis transform y = g_a(x).

        Inputs are replicate-padded on the bottom/right to a multiple of the
        total stride so the latent grid is exact.
        """
        batch, squeeze = _as_batch(x)
        height, width = batch.shape[-2:]
        if height < self.downsampling or width < self.downsampling:
            raise InvalidArgument(
                f'Image {height}x{width} is smaller than the encoder stride {self.downsampling}'
            )
        pad_h = (-height) % self.pad_multiple
        pad_w = (-width) % self.pad_multiple
        if pad_h or pad_w:
            batch = F.pad(batch, (0, pad_w, 0, pad_h), mode='replicate')
        y = self.g_a(batch)
        return y[0] if squeeze else y

    def quantize(self, y, mode='eval', generator=None):
        """
        Training: y + u with u ~ U(-1/2, 1/2), drawn from `generator`.
        Eval: round half away from zero.
        """
        if mode == 'train':
            noise = torch.rand(y.shape, generator=generator, dtype=y.dtype, device=y.device) - 0.5
            return y + noise.clamp(min=-0.4999999)
        if mode == 'eval':
            return round_half_away(y)
        raise InvalidArgument(f"Quantization mode must be 'train' or 'eval', got {mode!r}")

    def decode(self, y_hat, size=None):
        """Synthesis transform x_hat = g_s(y_hat), clamped to [0, 1] and cropped to `size`"""
        batch, squeeze = _as_batch(y_hat)
        if batch.dim() != 4 or batch.shape[1] != self.M:
            raise InvalidArgument(f'Expected latents with {self.M} channels, got {tuple(y_hat.shape)}')
        x_hat = self.g_s(batch).clamp(0.0, 1.0)
        if size is not None:
            height, width = size
            if height > x_hat.shape[-2] or width > x_hat.shape[-1]:
                raise InvalidArgument(f'Latent grid too small for a {height}x{width} image')
            x_hat = x_hat[..., :height, :width]
        return x_hat[0] if squeeze else x_hat

    def _factorized_likelihood(self, values):
        # EntropyBottleneck works on [C, 1, -1]
        perm = (1, 0, 2, 3)
        flat = values.permute(*perm).contiguous()
        shape = flat.shape
        result = self.entropy_bottleneck._likelihood(flat.reshape(shape[0], 1, -1))
        if isinstance(result, tuple):
            result = result[0]
        return result.reshape(shape).permute(*perm).contiguous()

    def _gaussian_likelihood(self, values, scales):
        return self.gaussian_conditional._likelihood(values, scales)

    def rate(self, y_hat, image_size, z_hat=None):
        """
        Bits of the quantized latents, plus the hyper-latent term when present.

        Args:
            y_hat: quantized latents [B, M, h, w]
            image_size: (H, W) of the source image, used for bpp
            z_hat: quantized hyper-latents (hyperprior models only)
        """
        likelihoods = self.likelihoods(y_hat, z_hat)
        return self._rate_from(likelihoods, image_size)

    def likelihoods(self, y_hat, z_hat=None):
        if self.hyperprior:
            if z_hat is None:
                raise InvalidArgument('Hyperprior rate needs the quantized hyper-latents')
            scales = self.h_s(z_hat)
            return {
                'y': self._gaussian_likelihood(y_hat, scales),
                'z': self._factorized_likelihood(z_hat),
            }
        return {'y': self._factorized_likelihood(y_hat)}

    def _rate_from(self, likelihoods, image_size):
        num_pixels = image_size[0] * image_size[1]
        latent_bits, clamped = bits_from_likelihoods(likelihoods['y'])
        if 'z' in likelihoods:
            hyper_bits, hyper_clamped = bits_from_likelihoods(likelihoods['z'])
            clamped += hyper_clamped
        else:
            hyper_bits = torch.zeros_like(latent_bits)
        bits = latent_bits + hyper_bits
        return RateEstimate(
            bits=bits,
            bpp=bits / num_pixels,
            latent_bits=latent_bits,
            hyper_bits=hyper_bits,
            clamped=clamped,
        )

    def forward(self, x, mode='train', generator=None):
        batch, squeeze = _as_batch(x)
        size = tuple(batch.shape[-2:])
        y = self.encode(batch)
        y_hat = self.quantize(y, mode, generator)
        z_hat = None
        if self.hyperprior:
            z = self.h_a(torch.abs(y))
            z_hat = self.quantize(z, mode, generator)
        likelihoods = self.likelihoods(y_hat, z_hat)
        rate = self._rate_from(likelihoods, size)
        x_hat = self.decode(y_hat, size)
        if squeeze:
            x_hat, y, y_hat = x_hat[0], y[0], y_hat[0]
        return CodecOutput(x_hat=x_hat, y=y, y_hat=y_hat, rate=rate, likelihoods=likelihoods)


def _as_batch(tensor):
    if tensor.dim() == 3:
        return tensor.unsqueeze(0), True
    return tensor, False


def rd_loss(model, x, lam=None, mode='train', generator=None, distortion_scale=DISTORTION_SCALE):
    """
    Rate-distortion loss of one batch.

    Returns:
        RdTerms with rate = mean bpp, distortion = distortion_scale * MSE and
        loss = rate + lam * distortion
    """
    lam = model.lam if lam is None else lam
    out = model(x, mode=mode, generator=generator)
    err = mse(x, out.x_hat)
    rate = out.rate.bpp.mean()
    distortion = distortion_scale * err
    return RdTerms(rate=rate, distortion=distortion, loss=rd_objective(rate, distortion, lam), mse=err)


def _stack_images(dataset):
    if isinstance(dataset, torch.Tensor):
        return dataset
    return torch.stack(list(dataset))


def training_parameters(module):
    """Trainable parameters, leaving out the entropy bottleneck quantiles"""
    return [p for name, p in module.named_parameters() if not name.endswith('quantiles')]


def train_vanilla(dataset, lam, steps, seed, lr=1e-4, batch_size=32, N=128, M=192,
                  hyperprior=False, log_every=50, device='cpu', distortion_scale=DISTORTION_SCALE):
    """
    Train a codec from scratch on the clean rate-distortion loss.

    Args:
        dataset: tensor [n, 3, H, W] (or a sequence of images) with n >= 100
        lam: rate-distortion trade-off
        steps: optimizer steps
        seed: seeds initialization, batch order and quantization noise

    Returns:
        (CodecModel in eval mode, list of {'step', 'rate', 'distortion', 'loss'})
    """
    images = _stack_images(dataset)
    if images.shape[0] < MIN_TRAINING_IMAGES:
        raise InvalidArgument(
            f'Vanilla training needs at least {MIN_TRAINING_IMAGES} images, got {images.shape[0]}'
        )

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = CodecModel(N=N, M=M, hyperprior=hyperprior, lam=lam)
    model.to(device).train()

    generator = torch.Generator().manual_seed(seed)
    noise_gen = torch.Generator(device=device).manual_seed(seed + 1)
    optimizer = torch.optim.Adam(training_parameters(model), lr=lr)

    log = []
    order = torch.randperm(images.shape[0], generator=generator)
    cursor = 0
    for step in tqdm(range(steps), desc=f'vanilla lambda={lam}', disable=None):
        if cursor + batch_size > len(order):
            order = torch.randperm(images.shape[0], generator=generator)
            cursor = 0
        batch = images[order[cursor:cursor + batch_size]].to(device)
        cursor += batch_size

        terms = rd_loss(model, batch, lam=lam, generator=noise_gen, distortion_scale=distortion_scale)
        record = {
            'step': step,
            'rate': terms.rate.item(),
            'distortion': terms.distortion.item(),
            'loss': terms.loss.item(),
        }
        if not math.isfinite(record['loss']):
            raise TrainingDiverged(step, record, objective='vanilla')

        optimizer.zero_grad()
        terms.loss.backward()
        optimizer.step()

        log.append(record)
        if step % log_every == 0:
            logger.info('vanilla step %d: R=%.4f D=%.4f L=%.4f', step, record['rate'],
                        record['distortion'], record['loss'])

    return model.eval(), log
