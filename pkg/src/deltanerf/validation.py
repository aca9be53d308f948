"""Input validation helpers shared by the estimators."""

from __future__ import annotations

from typing import Sequence

import numpy as np
import torch

from .vocab import TOKENS


def check_images(images, size: int | None = None) -> np.ndarray:
    """Coerce to a float64 (N, H, W, 3) array in [0, 1]."""
    arr = np.asarray([np.asarray(im, dtype=np.float64) for im in images]) if isinstance(images, (list, tuple)) \
        else np.asarray(images, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise ValueError(f"expected images of shape (N, H, W, 3), got {arr.shape}")
    if arr.shape[0] == 0:
        raise ValueError("empty image batch")
    if not np.isfinite(arr).all():
        raise ValueError("images contain non-finite values")
    if arr.min() < -1e-9 or arr.max() > 1 + 1e-9:
        raise ValueError(f"image values outside [0, 1]: [{arr.min()}, {arr.max()}]")
    if size is not None and arr.shape[1:3] != (size, size):
        raise ValueError(f"expected {size}x{size} images, got {arr.shape[1]}x{arr.shape[2]}")
    return arr


def images_to_nchw(images: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(np.asarray(images).transpose(0, 3, 1, 2)))


def nchw_to_images(x: torch.Tensor) -> np.ndarray:
    return x.detach().permute(0, 2, 3, 1).numpy().copy()


def check_token_batch(seqs) -> list[Sequence[int]]:
    seqs = [list(s) for s in seqs]
    for s in seqs:
        for t in s:
            if not 0 <= int(t) < len(TOKENS):
                raise ValueError(f"token id {t} outside vocabulary of size {len(TOKENS)}")
    return seqs


def check_timestep(t, T: int) -> None:
    tt = np.asarray(t)
    if tt.size == 0 or tt.min() < 1 or tt.max() > T:
        raise ValueError(f"timestep {t} outside [1, {T}]")
