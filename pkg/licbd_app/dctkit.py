"""
Blockwise DCT machinery for trigger injection.

Images are torch tensors shaped [..., 3, H, W] with values in [0, 1]. They are
cut into non-overlapping P x P patches, transformed with an orthonormal type-II
DCT per patch and channel, and a contiguous run of zigzag-ordered frequencies
(the mid-band) is written to or read from every patch.
"""

from dataclasses import dataclass, replace
from functools import lru_cache
import math

import numpy as np
import torch
import torch.nn.functional as F
from scipy.fft import dct

from .exceptions import InvalidArgument


@dataclass(frozen=True)
class PatchBlocks:
    """
    Patches of an image, either in pixel space or in the DCT domain.

    data has shape [..., C, nP, P, P] with nP = rows * cols; size keeps the
    original (H, W) so merging can drop the padding again.
    """
    data: torch.Tensor
    patch_size: int
    grid: tuple
    size: tuple
    domain: str = 'spatial'

    @property
    def num_patches(self):
        return self.grid[0] * self.grid[1]

    def with_data(self, data, domain=None):
        return replace(self, data=data, domain=domain or self.domain)


@dataclass(frozen=True)
class MidBand:
    """A contiguous range [start, start + length) of zigzag frequency indices"""
    start: int
    length: int

    @classmethod
    def centered(cls, patch_size, length):
        """Band centred in the zigzag scan, e.g. [96, 160) for P=16, N=64"""
        total = patch_size * patch_size
        if length < 1 or length > total:
            raise InvalidArgument(f'Band length {length} does not fit {total} frequencies')
        return cls(start=(total - length) // 2, length=length)

    @property
    def stop(self):
        return self.start + self.length

    def validate(self, patch_size):
        total = patch_size * patch_size
        if self.length < 1:
            raise InvalidArgument(f'Band length must be positive, got {self.length}')
        if self.start < 0 or self.stop > total:
            raise InvalidArgument(
                f'Band [{self.start}, {self.stop}) out of range for P={patch_size} '
                f'({total} frequencies)'
            )
        return self

    def indices(self, patch_size):
        """Flat (row * P + col) positions covered by the band, in zigzag order"""
        self.validate(patch_size)
        return zigzag_indices(patch_size)[self.start:self.stop]


def _check_patch_size(patch_size):
    if int(patch_size) != patch_size or patch_size < 2:
        raise InvalidArgument(f'Patch size must be an integer >= 2, got {patch_size}')


def split_patches(image, patch_size):
    """
    Cut an image into non-overlapping patches.

    Args:
        image: tensor [..., C, H, W]
        patch_size: P, side of the square patches

    Returns:
        PatchBlocks in the spatial domain. Bottom/right edges are reflect-padded
        up to a multiple of P (replicate when the pad exceeds the image).
    """
    _check_patch_size(patch_size)
    if image.dim() < 3:
        raise InvalidArgument(f'Expected an image shaped [..., C, H, W], got {tuple(image.shape)}')

    height, width = image.shape[-2:]
    if patch_size > height and patch_size > width:
        raise InvalidArgument(f'Patch size {patch_size} exceeds both image dimensions {height}x{width}')

    pad_h = (-height) % patch_size
    pad_w = (-width) % patch_size
    lead = image.shape[:-2]
    padded = image
    if pad_h or pad_w:
        mode = 'reflect' if pad_h < height and pad_w < width else 'replicate'
        flat = image.reshape(1, -1, height, width)
        padded = F.pad(flat, (0, pad_w, 0, pad_h), mode=mode)
        padded = padded.reshape(*lead, height + pad_h, width + pad_w)

    rows = (height + pad_h) // patch_size
    cols = (width + pad_w) // patch_size
    blocks = padded.reshape(*lead, rows, patch_size, cols, patch_size)
    blocks = blocks.transpose(-3, -2).reshape(*lead, rows * cols, patch_size, patch_size)
    return PatchBlocks(data=blocks, patch_size=patch_size, grid=(rows, cols), size=(height, width))


def merge_patches(blocks):
    """Inverse of split_patches: reassemble patches and crop the padding"""
    data = blocks.data
    rows, cols = blocks.grid
    patch_size = blocks.patch_size
    if data.dim() < 4 or data.shape[-1] != patch_size or data.shape[-2] != patch_size:
        raise InvalidArgument(f'Blocks shaped {tuple(data.shape)} do not hold {patch_size}x{patch_size} patches')
    if data.shape[-3] != rows * cols:
        raise InvalidArgument(f'Grid {rows}x{cols} needs {rows * cols} patches, got {data.shape[-3]}')
    height, width = blocks.size
    if height > rows * patch_size or width > cols * patch_size:
        raise InvalidArgument(f'Original size {height}x{width} is larger than the patch grid')

    lead = data.shape[:-3]
    image = data.reshape(*lead, rows, cols, patch_size, patch_size).transpose(-3, -2)
    image = image.reshape(*lead, rows * patch_size, cols * patch_size)
    return image[..., :height, :width]


@lru_cache(maxsize=None)
def _dct_basis(patch_size):
    return dct(np.eye(patch_size), type=2, norm='ortho', axis=0)


def dct_matrix(patch_size, dtype=torch.float32, device=None):
    """Orthonormal DCT-II matrix D, so that coefficients = D @ X @ D.T"""
    _check_patch_size(patch_size)
    return torch.tensor(_dct_basis(patch_size), dtype=dtype, device=device)


def dct2(blocks):
    """Orthonormal 2D DCT of every patch and channel"""
    basis = dct_matrix(blocks.patch_size, blocks.data.dtype, blocks.data.device)
    return blocks.with_data(basis @ blocks.data @ basis.T, domain='dct')


def idct2(coeffs):
    """Inverse of dct2"""
    basis = dct_matrix(coeffs.patch_size, coeffs.data.dtype, coeffs.data.device)
    return coeffs.with_data(basis.T @ coeffs.data @ basis, domain='spatial')


def blockwise_dct(image, patch_size):
    return dct2(split_patches(image, patch_size))


def blockwise_idct(coeffs):
    return merge_patches(idct2(coeffs))


@lru_cache(maxsize=None)
def zigzag_order(patch_size):
    """
    JPEG-style zigzag scan of a P x P grid.

    Anti-diagonals are visited in order; odd diagonals run top-right to
    bottom-left, even ones bottom-left to top-right.

    Returns:
        tuple of (row, col) pairs, starting at (0, 0)
    """
    _check_patch_size(patch_size)
    order = []
    for diagonal in range(2 * patch_size - 1):
        rows = range(max(0, diagonal - patch_size + 1), min(diagonal, patch_size - 1) + 1)
        if diagonal % 2 == 0:
            rows = reversed(rows)
        order.extend((row, diagonal - row) for row in rows)
    return tuple(order)


def zigzag_indices(patch_size):
    """zigzag_order as flat row-major indices"""
    return torch.tensor([row * patch_size + col for row, col in zigzag_order(patch_size)], dtype=torch.long)


def _selection_matrix(band, patch_size, dtype, device):
    index = band.indices(patch_size).to(device)
    selection = torch.zeros(band.length, patch_size * patch_size, dtype=dtype, device=device)
    selection[torch.arange(band.length, device=device), index] = 1
    return selection


def embed_midband(mid_values, band, patch_size):
    """
    Place band values on a per-patch frequency grid (everything else zero).

    Args:
        mid_values: tensor [..., C, N] with N == band.length
        band: MidBand valid for patch_size

    Returns:
        tensor [..., C, P, P]
    """
    band.validate(patch_size)
    if mid_values.shape[-1] != band.length:
        raise InvalidArgument(f'Expected {band.length} band values, got {mid_values.shape[-1]}')
    selection = _selection_matrix(band, patch_size, mid_values.dtype, mid_values.device)
    grid = mid_values @ selection
    return grid.reshape(*mid_values.shape[:-1], patch_size, patch_size)


def extract_midband(grid, band, patch_size):
    """Read the band values back out of [..., C, P, P] grids"""
    band.validate(patch_size)
    if grid.shape[-2:] != (patch_size, patch_size):
        raise InvalidArgument(f'Expected {patch_size}x{patch_size} grids, got {tuple(grid.shape[-2:])}')
    index = band.indices(patch_size).to(grid.device)
    return grid.reshape(*grid.shape[:-2], patch_size * patch_size)[..., index]


def padded_size(height, width, patch_size):
    """Grid (rows, cols) produced by split_patches for an H x W image"""
    return math.ceil(height / patch_size), math.ceil(width / patch_size)
