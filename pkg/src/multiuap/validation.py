"""Input validation helpers for the estimator-facing API."""

from __future__ import annotations

import numpy as np

from .errors import ContractError
from .synthtask import SynthDataset, SynthInstance


def check_image(image, image_side: int, channels: int = 3) -> np.ndarray:
    """Validate one pixel array: shape, dtype coercion, and [0, 1] range."""
    arr = np.asarray(image, dtype=np.float64)
    expected = (image_side, image_side, channels)
    if arr.shape != expected:
        raise ContractError(f"image shape {arr.shape}, expected {expected}")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ContractError(
            f"pixel values outside [0, 1]: range [{arr.min():.4f}, {arr.max():.4f}]"
        )
    return arr


def check_image_lists(X, image_side: int, channels: int = 3) -> list:
    """Validate a batch of samples, each a list/array of images.

    Accepts a [n_samples, n_images, side, side, channels] array or a list of
    per-sample image lists; returns a list of lists of validated arrays.
    """
    if isinstance(X, np.ndarray):
        if X.ndim == 4:  # single sample
            X = [X]
        elif X.ndim != 5:
            raise ContractError(f"expected 4-d or 5-d image array, got shape {X.shape}")
    out = []
    for i, images in enumerate(X):
        try:
            out.append([check_image(img, image_side, channels) for img in images])
        except ContractError as exc:
            raise ContractError(f"sample {i}: {exc}") from None
    if not out:
        raise ContractError("no samples given")
    return out


def check_dataset(X) -> SynthDataset:
    """Coerce a SynthDataset or a list of instances into a SynthDataset."""
    if isinstance(X, SynthDataset):
        dataset = X
    elif isinstance(X, (list, tuple)) and X and all(isinstance(i, SynthInstance) for i in X):
        dataset = SynthDataset(list(X), seed=0, split="train")
    else:
        raise ContractError(
            "expected a SynthDataset or a nonempty list of SynthInstance objects"
        )
    if len(dataset) == 0:
        raise ContractError("dataset is empty")
    return dataset
