"""Input validation and tensor plumbing shared by the estimators."""

from __future__ import annotations

import logging

import numpy as np
import torch
from sklearn.exceptions import NotFittedError

from .data import Dataset

logger = logging.getLogger("camreid")


def check_images(X, size: tuple[int, int] | None = None) -> np.ndarray:
    """Return an N x H x W x 3 float32 array in [0, 1] from a Dataset or array."""
    if isinstance(X, Dataset):
        X = X.images
    X = np.asarray(X, dtype=np.float32)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4 or X.shape[-1] != 3:
        raise ValueError(f"expected N x H x W x 3 images, got shape {X.shape}")
    if size is not None and len(X) and tuple(X.shape[1:3]) != tuple(size):
        raise ValueError(f"expected {size[0]}x{size[1]} images, got {X.shape[1]}x{X.shape[2]}")
    if X.size and (not np.isfinite(X).all() or X.min() < 0 or X.max() > 1):
        raise ValueError("pixel values must be finite and within [0, 1]")
    return X


def check_is_fitted(est, attr: str = "net_"):
    if not hasattr(est, attr):
        raise NotFittedError(f"{type(est).__name__} is not fitted yet; call fit first")


def to_tensor(images: np.ndarray) -> torch.Tensor:
    """N x H x W x 3 array -> N x 3 x H x W float32 tensor."""
    return torch.from_numpy(np.ascontiguousarray(images.transpose(0, 3, 1, 2), dtype=np.float32))


def to_numpy_images(t: torch.Tensor) -> np.ndarray:
    return t.detach().permute(0, 2, 3, 1).cpu().numpy().astype(np.float32)


def child_seed(seed: int, *keys: int) -> int:
    return int(np.random.SeedSequence([seed, *keys]).generate_state(1)[0])


@torch.no_grad()
def batched(fn, images: np.ndarray, batch_size: int = 128):
    """Apply ``fn`` to NCHW tensor batches and concatenate each returned tensor (or tuple)."""
    outs = []
    for i in range(0, len(images), batch_size):
        outs.append(fn(to_tensor(images[i:i + batch_size])))
    if isinstance(outs[0], tuple):
        return tuple(torch.cat(parts).numpy() for parts in zip(*outs))
    return torch.cat(outs).numpy()
