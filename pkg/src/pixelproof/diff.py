"""Divergence metrics and visualization for images and tensors."""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Any

import numpy as np

from .imaging import Image, Tensor
from .manifest import ColorMode

__all__ = [
    "DEFAULT_THRESHOLDS",
    "DiffError",
    "DiffReport",
    "dilate",
    "image_diff",
    "rescale_to_bytes",
    "tensor_diff",
    "visualize_diff",
]

# Samples at or beyond these byte values count as "extreme" intensity.
DEFAULT_THRESHOLDS = (25, 230)
DILATION_RADIUS = 2


class DiffError(ValueError):
    pass


@dataclass(frozen=True)
class DiffReport:
    count_differing: int
    total_elements: int
    max_abs: float
    mean_abs: float
    extreme_concentration: float
    source_a: str
    source_b: str

    @property
    def identical(self) -> bool:
        return self.count_differing == 0

    def to_dict(self) -> dict[str, Any]:
        return {
            "count_differing": self.count_differing,
            "total_elements": self.total_elements,
            "max_abs": self.max_abs,
            "mean_abs": self.mean_abs,
            "extreme_concentration": self.extreme_concentration,
            "source_a": self.source_a,
            "source_b": self.source_b,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def image_diff(a: Image, b: Image, thresholds: tuple[int, int] = DEFAULT_THRESHOLDS) -> DiffReport:
    """Per-sample comparison of two decoded images.

    A differing sample counts toward ``extreme_concentration`` when either
    side is <= low or >= high, which keeps the report symmetric in (a, b).
    """
    if a.samples.shape != b.samples.shape:
        raise DiffError(f"image dimensions differ: {a.samples.shape} vs {b.samples.shape}")
    if a.color_mode != b.color_mode:
        raise DiffError(f"color modes differ: {a.color_mode.value} vs {b.color_mode.value}")
    low, high = thresholds
    sa = a.samples.astype(np.int16)
    sb = b.samples.astype(np.int16)
    delta = np.abs(sa - sb)
    differing = delta > 0
    count = int(differing.sum())
    extreme = ((sa <= low) | (sa >= high) | (sb <= low) | (sb >= high)) & differing
    return DiffReport(
        count_differing=count,
        total_elements=int(delta.size),
        max_abs=float(delta.max()),
        mean_abs=float(delta.sum(dtype=np.int64)) / delta.size,
        extreme_concentration=float(extreme.sum()) / count if count else 0.0,
        source_a=a.provenance,
        source_b=b.provenance,
    )


def tensor_diff(a: Tensor, b: Tensor, source_a: str = "a", source_b: str = "b") -> DiffReport:
    """Elementwise |a - b| in binary64; any nonzero difference counts."""
    if a.dims != b.dims:
        raise DiffError(f"tensor dims differ: {list(a.dims)} vs {list(b.dims)}")
    if a.dtype != b.dtype:
        raise DiffError(f"tensor dtypes differ: {a.dtype} vs {b.dtype}")
    if a.layout != b.layout:
        la = a.layout.value if a.layout else "none"
        lb = b.layout.value if b.layout else "none"
        raise DiffError(f"tensor layouts differ: {la} vs {lb}")
    delta = np.abs(a.data.astype(np.float64) - b.data.astype(np.float64))
    count = int((delta > 0).sum())
    return DiffReport(
        count_differing=count,
        total_elements=int(delta.size),
        max_abs=float(delta.max()),
        mean_abs=float(delta.mean()),
        extreme_concentration=0.0,
        source_a=source_a,
        source_b=source_b,
    )


def dilate(plane: np.ndarray, radius: int = DILATION_RADIUS) -> np.ndarray:
    """Grayscale dilation with a (2r+1) x (2r+1) square; out-of-bounds is ignored."""
    if plane.ndim != 2:
        raise ValueError("dilate expects a 2-D array")
    k = 2 * radius + 1
    # Padding with the dtype minimum never wins a max.
    fill = np.iinfo(plane.dtype).min if plane.dtype.kind in "iu" else -np.inf
    padded = np.pad(plane, radius, mode="constant", constant_values=fill)
    windows = np.lib.stride_tricks.sliding_window_view(padded, (k, k))
    return windows.max(axis=(2, 3))


def rescale_to_bytes(plane: np.ndarray) -> np.ndarray:
    """Linear min-max stretch onto 0..255, rounding half up.

    An all-zero plane stays zero; a constant nonzero plane maps to 255.
    """
    v = plane.astype(np.int64)
    lo, hi = int(v.min()), int(v.max())
    if hi == lo:
        return np.full(v.shape, 255 if hi > 0 else 0, dtype=np.uint8)
    span = hi - lo
    return ((2 * 255 * (v - lo) + span) // (2 * span)).astype(np.uint8)


def visualize_diff(a: Image, b: Image) -> Image:
    if a.samples.shape != b.samples.shape:
        raise DiffError(f"image dimensions differ: {a.samples.shape} vs {b.samples.shape}")
    delta = np.abs(a.samples.astype(np.int16) - b.samples.astype(np.int16)).max(axis=2)
    gray = rescale_to_bytes(dilate(delta.astype(np.uint8)))
    rgb = np.repeat(gray[:, :, np.newaxis], 3, axis=2)
    return Image(rgb, ColorMode.RGB, f"diff:{a.provenance}|{b.provenance}")
