"""Input checks shared by the estimator and the CLI."""
from __future__ import annotations

import numpy as np

from .exceptions import EmptyInput, NonBinaryInput, ShapeMismatch


def check_images(images, size: int | None = None) -> np.ndarray:
    """Return ``images`` as a float ``n x s x s x 3`` array in [0, 1].

    A single ``s x s x 3`` image is promoted to a batch of one.
    """
    arr = np.asarray(images, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise ShapeMismatch(f"expected n x s x s x 3 images, got shape {arr.shape}")
    if arr.shape[0] == 0:
        raise EmptyInput("no images given")
    if arr.shape[1] != arr.shape[2]:
        raise ShapeMismatch(f"images must be square, got {arr.shape[1]}x{arr.shape[2]}")
    if size is not None and arr.shape[1] != size:
        raise ShapeMismatch(f"images are {arr.shape[1]}px but the model expects {size}px")
    if not np.isfinite(arr).all():
        raise ValueError("images contain NaN or infinite values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError("image intensities must lie in [0, 1]")
    return arr


def check_masks(masks, images: np.ndarray | None = None) -> np.ndarray:
    """Return binary masks as ``n x s x s`` uint8, matched against ``images`` if given."""
    arr = np.asarray(masks)
    if arr.ndim == 4 and arr.shape[-1] == 1:
        arr = arr[..., 0]
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ShapeMismatch(f"expected n x s x s masks, got shape {arr.shape}")
    if arr.dtype != bool and not np.isin(arr, (0, 1)).all():
        raise NonBinaryInput("masks must contain only 0 and 1")
    if images is not None and arr.shape != images.shape[:3]:
        raise ShapeMismatch(f"masks {arr.shape} do not match images {images.shape[:3]}")
    return arr.astype(np.uint8)
