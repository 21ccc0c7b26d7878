"""Frozen stand-in image encoders.

``vit_stub_encode`` is a fixed, seeded linear projection of non-overlapping
pixel patches.  The VAE stand-in maps each 8x8x3 pixel block onto 16 latent
channels with an orthonormal low-frequency DCT basis: three per-channel DC
terms, four more per-channel frequencies, and one luminance frequency.
``vae_stub_decode`` is the adjoint, so ``encode(decode(z)) == z`` exactly and
``decode(encode(img)) == img`` for every image inside the basis span, which
includes all block-constant images such as the synthetic keyframes.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

LATENT_CHANNELS = 16
DOWNSAMPLE = 8
LATENT_SCALE = 1.0
PIXEL_SHIFT = 0.5


class BadDimensions(ValueError):
    pass


def _dct_1d(u: int, n: int = DOWNSAMPLE) -> np.ndarray:
    x = np.arange(n)
    alpha = np.sqrt(1.0 / n) if u == 0 else np.sqrt(2.0 / n)
    return alpha * np.cos(np.pi * (2 * x + 1) * u / (2 * n))


@lru_cache(maxsize=None)
def vae_basis() -> np.ndarray:
    """(192, 16) matrix with orthonormal columns over flattened (8, 8, 3) blocks."""
    cols = []

    def plane(u, v):
        return np.outer(_dct_1d(u), _dct_1d(v))

    for u, v in [(0, 0), (0, 1), (1, 0), (1, 1), (0, 2)]:
        for c in range(3):
            block = np.zeros((DOWNSAMPLE, DOWNSAMPLE, 3))
            block[:, :, c] = plane(u, v)
            cols.append(block.reshape(-1))
    lum = np.repeat(plane(2, 0)[:, :, None], 3, axis=2) / np.sqrt(3.0)
    cols.append(lum.reshape(-1))
    basis = np.stack(cols, axis=1)
    basis.setflags(write=False)
    return basis


def _blocks(image: np.ndarray, size: int) -> np.ndarray:
    h, w, c = image.shape
    if h % size or w % size:
        raise BadDimensions(f"image {h}x{w} is not divisible by {size}")
    return image.reshape(h // size, size, w // size, size, c).transpose(0, 2, 1, 3, 4).reshape(
        h // size, w // size, size * size * c)


def vae_stub_encode(image: np.ndarray) -> np.ndarray:
    """HxWx3 pixels in [0, 1] -> (16, H/8, W/8) latent grid."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise BadDimensions(f"expected HxWx3 image, got {image.shape}")
    blocks = _blocks(image - PIXEL_SHIFT, DOWNSAMPLE)
    return (blocks @ vae_basis() * LATENT_SCALE).transpose(2, 0, 1)


def vae_stub_decode(latents: np.ndarray) -> np.ndarray:
    latents = np.asarray(latents, dtype=np.float64)
    if latents.ndim != 3 or latents.shape[0] != LATENT_CHANNELS:
        raise BadDimensions(f"expected ({LATENT_CHANNELS}, h, w) latents, got {latents.shape}")
    _, h, w = latents.shape
    blocks = latents.transpose(1, 2, 0) @ vae_basis().T / LATENT_SCALE
    img = blocks.reshape(h, w, DOWNSAMPLE, DOWNSAMPLE, 3).transpose(0, 2, 1, 3, 4)
    return img.reshape(h * DOWNSAMPLE, w * DOWNSAMPLE, 3) + PIXEL_SHIFT


@lru_cache(maxsize=None)
def _vit_projection(patch: int, dim: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    proj = rng.standard_normal((patch * patch * 3, dim)) / np.sqrt(patch * patch * 3)
    proj.setflags(write=False)
    return proj


def vit_stub_encode(image: np.ndarray, patch: int = 8, dim: int = 32, seed: int = 7) -> np.ndarray:
    """HxWx3 pixels -> (H/patch * W/patch, dim) slot embeddings, row-major."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise BadDimensions(f"expected HxWx3 image, got {image.shape}")
    blocks = _blocks(image - PIXEL_SHIFT, patch)
    return (blocks @ _vit_projection(patch, dim, seed)).reshape(-1, dim)


def patchify(latents: np.ndarray, patch: int = 2) -> np.ndarray:
    """(C, h, w) -> (h/p * w/p, p*p*C) tokens, row-major over patches."""
    c, h, w = latents.shape
    if h % patch or w % patch:
        raise BadDimensions(f"latent grid {h}x{w} is not divisible by {patch}")
    x = latents.reshape(c, h // patch, patch, w // patch, patch)
    return x.transpose(1, 3, 2, 4, 0).reshape((h // patch) * (w // patch), patch * patch * c)


def unpatchify(tokens: np.ndarray, channels: int, h: int, w: int, patch: int = 2) -> np.ndarray:
    x = tokens.reshape(h // patch, w // patch, patch, patch, channels)
    return x.transpose(4, 0, 2, 1, 3).reshape(channels, h, w)
