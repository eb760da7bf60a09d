"""Synthetic paired-modality data with a shared latent signal.

Both modalities observe the same smooth random-Fourier function of a latent
coordinate, shifted by a per-modality offset and corrupted by per-sample
heteroscedastic noise.  `corrupt` injects additive noise at a controllable
level, which pushes a vector off the data manifold the way sensor noise or
heavy augmentation degrades a real encoder embedding — useful for checking
that inferred uncertainty grows with input corruption.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class SyntheticPairs:
    image: np.ndarray        # (n, d)
    text: np.ndarray         # (n, d)
    latent: np.ndarray       # (n, q) generating coordinates
    noise_scale: np.ndarray  # (n,) per-sample noise level


def make_pairs(n: int, d: int, q: int = 2, seed: int = 0,
               offset_scale: float = 0.4,
               noise_lo: float = 0.02, noise_hi: float = 0.1) -> SyntheticPairs:
    if n < 1 or d < 1 or q < 1:
        raise ValueError("n, d, q must all be >= 1")
    if not 0 <= noise_lo <= noise_hi:
        raise ValueError("need 0 <= noise_lo <= noise_hi")
    rng = np.random.default_rng(seed)
    latent = rng.standard_normal((n, q))
    freqs = rng.standard_normal((q, d))
    phases = rng.uniform(0.0, 2.0 * np.pi, d)
    shared = np.cos(latent @ freqs + phases)
    offset_image = offset_scale * rng.standard_normal(d)
    offset_text = offset_scale * rng.standard_normal(d)
    noise_scale = rng.uniform(noise_lo, noise_hi, n)
    image = shared + offset_image + noise_scale[:, None] * rng.standard_normal((n, d))
    text = shared + offset_text + noise_scale[:, None] * rng.standard_normal((n, d))
    return SyntheticPairs(image=image, text=text, latent=latent,
                          noise_scale=noise_scale)


def corrupt(z, level: float, seed: int = 0) -> np.ndarray:
    """Add isotropic noise scaled to `level` times the matrix's std.

    `level` is a noise-to-signal ratio: 1.0 injects noise as strong as the
    data itself, and larger values are allowed (they bury the signal).
    """
    if level < 0.0:
        raise ValueError(f"level must be >= 0, got {level}")
    z = np.array(z, dtype=np.float64, copy=True)
    if z.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {z.shape}")
    if level == 0.0:
        return z
    rng = np.random.default_rng(seed)
    return z + level * float(z.std()) * rng.standard_normal(z.shape)
