"""
Frozen random-convolution feature extractor.

A bank holds ``F`` fixed ``k x k`` filters drawn once from Normal(0, 1/k^2).
Extraction is a valid-region cross-correlation with every filter, ReLU, then
average pooling onto a ``P x P`` grid, flattened filter-major to ``F * P * P``
values. Nothing here is ever trained.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .noise import make_rng

_HEADER = struct.Struct("<IIIQ")  # F, k, P, seed


@dataclass(frozen=True)
class BankConfig:
    n_filters: int = 32
    kernel_size: int = 5
    pool_grid: int = 4

    def __post_init__(self):
        if self.n_filters < 1 or self.kernel_size < 1 or self.pool_grid < 1:
            raise ValueError("n_filters, kernel_size and pool_grid must be positive")
        if self.kernel_size % 2 == 0:
            raise ValueError(f"kernel_size must be odd, got {self.kernel_size}")


class FeatureBank:
    """Immutable filter bank; the filter array is read-only."""

    __slots__ = ("_filters", "_seed", "_pool_grid")

    def __init__(self, filters: np.ndarray, bank_seed: int, pool_grid: int):
        filters = np.array(filters, dtype=np.float64)
        if filters.ndim != 3 or filters.shape[1] != filters.shape[2]:
            raise ValueError(f"filters must have shape (F, k, k), got {filters.shape}")
        filters.setflags(write=False)
        object.__setattr__(self, "_filters", filters)
        object.__setattr__(self, "_seed", int(bank_seed))
        object.__setattr__(self, "_pool_grid", int(pool_grid))

    def __setattr__(self, name, value):
        raise AttributeError("FeatureBank is frozen")

    @property
    def filters(self) -> np.ndarray:
        return self._filters

    @property
    def bank_seed(self) -> int:
        return self._seed

    @property
    def pool_grid(self) -> int:
        return self._pool_grid

    @property
    def n_filters(self) -> int:
        return self._filters.shape[0]

    @property
    def kernel_size(self) -> int:
        return self._filters.shape[1]

    @property
    def feature_dim(self) -> int:
        return self.n_filters * self._pool_grid**2


def init_bank(bank_seed: int, config: BankConfig | None = None) -> FeatureBank:
    config = config or BankConfig()
    k = config.kernel_size
    rng = make_rng(bank_seed)
    filters = rng.normal(0.0, 1.0 / k, size=(config.n_filters, k, k))
    return FeatureBank(filters, bank_seed, config.pool_grid)


def _cell_edges(n: int, p: int) -> np.ndarray:
    return (np.arange(p + 1) * n) // p


def extract_array(bank: FeatureBank, imgs: np.ndarray, chunk: int = 256) -> np.ndarray:
    """Vectorised extraction for an (N, H, W) stack; returns (N, feature_dim)."""
    imgs = np.asarray(imgs, dtype=np.float64)
    if imgs.ndim != 3:
        raise ValueError(f"expected an (N, H, W) stack, got shape {imgs.shape}")
    n, h, w = imgs.shape
    k, p = bank.kernel_size, bank.pool_grid
    if h < k or w < k:
        raise ValueError(f"image {h}x{w} is smaller than the {k}x{k} kernel")
    oh, ow = h - k + 1, w - k + 1
    if oh < p or ow < p:
        raise ValueError(f"convolution output {oh}x{ow} is smaller than the {p}x{p} pooling grid")
    if n == 0:
        return np.zeros((0, bank.feature_dim))
    kernel = bank.filters.reshape(bank.n_filters, k * k).T
    ye, xe = _cell_edges(oh, p), _cell_edges(ow, p)
    out = np.empty((n, bank.n_filters, p, p))
    for start in range(0, n, chunk):
        block = imgs[start : start + chunk]
        patches = sliding_window_view(block, (k, k), axis=(1, 2)).reshape(-1, k * k)
        maps = np.maximum(patches @ kernel, 0.0).reshape(len(block), oh, ow, bank.n_filters)
        if oh % p == 0 and ow % p == 0:
            cells = maps.reshape(len(block), p, oh // p, p, ow // p, bank.n_filters)
            out[start : start + len(block)] = cells.mean(axis=(2, 4)).transpose(0, 3, 1, 2)
            continue
        for i in range(p):
            for j in range(p):
                cell = maps[:, ye[i] : ye[i + 1], xe[j] : xe[j + 1], :]
                out[start : start + len(block), :, i, j] = cell.mean(axis=(1, 2))
    return out.reshape(n, -1)


def extract(bank: FeatureBank, img: np.ndarray) -> np.ndarray:
    return extract_array(bank, np.asarray(img)[None])[0]


def extract_batch(bank: FeatureBank, imgs: list[np.ndarray]) -> list[np.ndarray]:
    if len(imgs) == 0:
        return []
    return list(extract_array(bank, np.stack(imgs)))


def dump_bank(bank: FeatureBank, path: str | os.PathLike) -> None:
    """Write the bank as a header (F, k, P, seed) followed by little-endian float64 filters."""
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(bank.n_filters, bank.kernel_size, bank.pool_grid, bank.bank_seed))
        fh.write(bank.filters.astype("<f8").tobytes())


def load_bank(path: str | os.PathLike) -> FeatureBank:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise ValueError(f"bank file {path} is truncated")
    f, k, p, seed = _HEADER.unpack_from(raw)
    body = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size)
    if body.size != f * k * k:
        raise ValueError(f"bank file {path} has {body.size} filter values, expected {f * k * k}")
    return FeatureBank(body.reshape(f, k, k).astype(np.float64), seed, p)
