"""Orthonormal 2-D DCT-II / inverse, and spectrum-perturbed sample variants."""

import math
from dataclasses import dataclass
from functools import lru_cache

import torch

from .errors import ConfigError, ContractError


@dataclass
class FreqExploreConfig:
    num_variants: int = 10
    sigma: float = 0.7
    pixel_noise_scale: float = 16 / 255
    seed: int = 0

    def __post_init__(self):
        if self.num_variants < 1:
            raise ConfigError("num_variants must be >= 1")
        if self.sigma < 0:
            raise ConfigError("sigma must be >= 0")
        if self.pixel_noise_scale < 0:
            raise ConfigError("pixel_noise_scale must be >= 0")


@lru_cache(maxsize=64)
def _dct_matrix(n, dtype):
    k = torch.arange(n, dtype=torch.float64).view(-1, 1)
    i = torch.arange(n, dtype=torch.float64).view(1, -1)
    mat = torch.cos(math.pi * (2 * i + 1) * k / (2 * n)) * math.sqrt(2.0 / n)
    mat[0] /= math.sqrt(2.0)
    return mat.to(dtype)


def _check(x):
    if x.dim() < 2:
        raise ContractError(f"expected at least 2 trailing spatial dims, got shape {tuple(x.shape)}")


def dct2(x):
    """Type-II DCT over the last two axes (H then W), orthonormal, per channel."""
    _check(x)
    ch = _dct_matrix(x.shape[-2], x.dtype)
    cw = _dct_matrix(x.shape[-1], x.dtype)
    return ch @ x @ cw.T


def idct2(coeffs):
    _check(coeffs)
    ch = _dct_matrix(coeffs.shape[-2], coeffs.dtype)
    cw = _dct_matrix(coeffs.shape[-1], coeffs.dtype)
    return ch.T @ coeffs @ cw


def spectrum_variants(x, cfg, generator=None):
    """Return ``cfg.num_variants`` spectrum-perturbed copies of ``x``, each clipped to [0, 1].

    variant_i = idct2(dct2(x + n_i * pixel_noise_scale) * m_i) with n_i ~ N(0, 1)
    and m_i ~ N(1, sigma) elementwise.  Pass ``generator`` to continue an existing
    random stream; otherwise one is seeded from ``cfg.seed``.
    """
    if generator is None:
        generator = torch.Generator().manual_seed(cfg.seed)
    out = []
    for _ in range(cfg.num_variants):
        noise = torch.randn(x.shape, generator=generator, dtype=x.dtype)
        mask = 1.0 + cfg.sigma * torch.randn(x.shape, generator=generator, dtype=x.dtype)
        variant = idct2(dct2(x + noise * cfg.pixel_noise_scale) * mask)
        out.append(variant.clamp(0.0, 1.0))
    return out
