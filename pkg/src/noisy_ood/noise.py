"""
Seedable noise-injection operators for grayscale images.

Images are 2-D float arrays with samples in [0, 1]. Every operator is a pure
function of ``(image, parameters, rng)``: it never mutates its input and always
returns a new array clipped back into [0, 1].

Random streams are :class:`numpy.random.Generator` instances backed by PCG64.
Normal deviates come from the generator's ziggurat sampler, so a given seed
reproduces the same image for a given numpy release.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

RngStream = np.random.Generator


def make_rng(seed: int) -> RngStream:
    """Return a fresh PCG64 stream; equal seeds give equal sample sequences."""
    if seed < 0 or seed >= 2**64:
        raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
    return np.random.Generator(np.random.PCG64(seed))


def as_image(img) -> np.ndarray:
    """Validate ``img`` as a 2-D array of samples in [0, 1] and return it as float64."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"image must be a nonempty 2-D array, got shape {arr.shape}")
    if not np.all((arr >= 0.0) & (arr <= 1.0)):
        raise ValueError("image samples must lie in [0, 1]")
    return arr


class NoiseKind(str, enum.Enum):
    GAUSSIAN = "gaussian"
    SPECKLE = "speckle"
    POISSON = "poisson"
    SALT_PEPPER = "salt_pepper"


ALL_KINDS = tuple(NoiseKind)


def _check_unit(name: str, value: float) -> None:
    if not 0.0 <= value <= 1.0:
        raise ValueError(f"{name} must be in [0, 1], got {value}")


def _check_nonneg(name: str, value: float) -> None:
    if not value >= 0.0:
        raise ValueError(f"{name} must be >= 0, got {value}")


@dataclass(frozen=True)
class NoisePolicy:
    """Which noise kinds ``augment`` may draw from, and their parameters."""

    gaussian_mean: float = 0.0
    gaussian_variance: float = 0.01
    sp_density: float = 0.05
    sp_salt_ratio: float = 0.5
    speckle_variance: float = 0.01
    poisson_scale: float = 255.0
    enabled_kinds: tuple[NoiseKind, ...] = field(default=ALL_KINDS)

    def __post_init__(self):
        _check_nonneg("gaussian_variance", self.gaussian_variance)
        _check_nonneg("speckle_variance", self.speckle_variance)
        _check_unit("sp_density", self.sp_density)
        _check_unit("sp_salt_ratio", self.sp_salt_ratio)
        if not self.poisson_scale > 0:
            raise ValueError(f"poisson_scale must be > 0, got {self.poisson_scale}")
        kinds = tuple(NoiseKind(k) for k in self.enabled_kinds)
        if not kinds:
            raise ValueError("enabled_kinds must be nonempty")
        # canonical order so the uniform draw does not depend on how kinds were listed
        object.__setattr__(self, "enabled_kinds", tuple(k for k in ALL_KINDS if k in kinds))

    def to_dict(self) -> dict:
        return {
            "gaussian_mean": self.gaussian_mean,
            "gaussian_variance": self.gaussian_variance,
            "sp_density": self.sp_density,
            "sp_salt_ratio": self.sp_salt_ratio,
            "speckle_variance": self.speckle_variance,
            "poisson_scale": self.poisson_scale,
            "enabled_kinds": [k.value for k in self.enabled_kinds],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NoisePolicy":
        d = dict(d)
        if "enabled_kinds" in d:
            d["enabled_kinds"] = tuple(NoiseKind(k) for k in d["enabled_kinds"])
        return cls(**d)


def apply_gaussian(img: np.ndarray, mean: float, variance: float, rng: RngStream) -> np.ndarray:
    """Additive i.i.d. Normal(mean, variance) noise per pixel, clipped to [0, 1]."""
    _check_nonneg("variance", variance)
    img = as_image(img)
    noise = rng.normal(mean, np.sqrt(variance), size=img.shape)
    return np.clip(img + noise, 0.0, 1.0)


def apply_speckle(img: np.ndarray, variance: float, rng: RngStream) -> np.ndarray:
    """Multiplicative speckle: ``x * (1 + n)`` with ``n ~ Normal(0, variance)``."""
    _check_nonneg("variance", variance)
    img = as_image(img)
    noise = rng.normal(0.0, np.sqrt(variance), size=img.shape)
    return np.clip(img * (1.0 + noise), 0.0, 1.0)


def apply_salt_pepper(img: np.ndarray, density: float, salt_ratio: float, rng: RngStream) -> np.ndarray:
    """Corrupt each pixel with probability ``density``.

    A corrupted pixel becomes 1.0 with probability ``salt_ratio`` and 0.0
    otherwise. Corruption is an independent Bernoulli draw per pixel, so the
    number of corrupted pixels is binomial rather than fixed.
    """
    _check_unit("density", density)
    _check_unit("salt_ratio", salt_ratio)
    img = as_image(img)
    corrupt = rng.random(img.shape) < density
    salt = rng.random(img.shape) < salt_ratio
    out = img.copy()
    out[corrupt & salt] = 1.0
    out[corrupt & ~salt] = 0.0
    return out


def apply_poisson(img: np.ndarray, scale: float, rng: RngStream) -> np.ndarray:
    """Shot noise: ``Poisson(x * scale) / scale``, clipped to [0, 1].

    ``scale`` is the photon count corresponding to a full-intensity pixel; the
    default of 255 gives one count per 8-bit level.
    """
    if not scale > 0:
        raise ValueError(f"scale must be > 0, got {scale}")
    img = as_image(img)
    counts = rng.poisson(img * scale)
    return np.clip(counts / scale, 0.0, 1.0)


def augment(img: np.ndarray, policy: NoisePolicy, rng: RngStream) -> tuple[np.ndarray, NoiseKind]:
    """Apply one noise kind drawn uniformly from ``policy.enabled_kinds``.

    There is no identity arm: the returned image is always noised.
    """
    kinds = policy.enabled_kinds
    kind = kinds[int(rng.integers(len(kinds)))]
    if kind is NoiseKind.GAUSSIAN:
        out = apply_gaussian(img, policy.gaussian_mean, policy.gaussian_variance, rng)
    elif kind is NoiseKind.SPECKLE:
        out = apply_speckle(img, policy.speckle_variance, rng)
    elif kind is NoiseKind.POISSON:
        out = apply_poisson(img, policy.poisson_scale, rng)
    else:
        out = apply_salt_pepper(img, policy.sp_density, policy.sp_salt_ratio, rng)
    return out, kind
