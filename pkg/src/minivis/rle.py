"""Column-major run-length encoding of binary masks.

Counts alternate zero-run / one-run starting with the zero run, over the
mask flattened in column-major (Fortran) order.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Tuple

import numpy as np


class RleFormatError(ValueError):
    """Malformed run-length payload."""


@dataclass
class RleMask:
    size: Tuple[int, int]  # (height, width)
    counts: List[int]

    def to_json(self) -> dict:
        return {"size": [int(self.size[0]), int(self.size[1])], "counts": [int(c) for c in self.counts]}

    @classmethod
    def from_json(cls, obj: dict) -> "RleMask":
        if not isinstance(obj, dict) or "size" not in obj or "counts" not in obj:
            raise RleFormatError(f"mask object must have 'size' and 'counts', got {obj!r}")
        size = obj["size"]
        if len(size) != 2:
            raise RleFormatError(f"mask size must be [height, width], got {size!r}")
        return cls(size=(int(size[0]), int(size[1])), counts=[int(c) for c in obj["counts"]])


def rle_encode(mask) -> RleMask:
    """Encode a 2D binary mask."""
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"mask must be 2D, got shape {mask.shape}")
    h, w = mask.shape
    flat = mask.astype(bool).reshape(-1, order="F")
    if flat.size == 0:
        return RleMask(size=(h, w), counts=[0])
    changes = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate(([0], changes, [flat.size]))
    counts = np.diff(bounds).tolist()
    if flat[0]:
        counts.insert(0, 0)
    return RleMask(size=(h, w), counts=counts)


def rle_decode(rle: RleMask) -> np.ndarray:
    """Decode back to a 2D bool mask; raises RleFormatError on bad counts."""
    h, w = rle.size
    counts = np.asarray(rle.counts, dtype=np.int64)
    if counts.size and counts.min() < 0:
        raise RleFormatError("negative run length")
    total = int(counts.sum())
    if total != h * w:
        raise RleFormatError(f"run lengths sum to {total}, expected {h * w} for size {rle.size}")
    values = (np.arange(counts.size) % 2).astype(bool)
    flat = np.repeat(values, counts)
    return flat.reshape((h, w), order="F")
