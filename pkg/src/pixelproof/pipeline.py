"""Deterministic preprocessing engine.

Stage order is fixed: decode -> color -> crop -> resize -> convert ->
normalize -> layout. Every stage is timed and summarized in a StageTrace,
and the output tensor is reduced to a Digest whose hash covers the tensor's
canonical RTEN bytes.

Numeric conventions (all normative):

* byte -> float is ``x / 255`` rounded to binary32; float -> byte is
  ``clamp(floor(255 * x), 0, 255)`` with NaN mapped to 0.
* Resize uses half-pixel centers: ``src = (dst + 0.5) * in/out - 0.5``,
  clamped to ``[0, in - 1]``. Bilinear blends in binary32 and rounds half up.
* NORMALIZE_FIRST normalizes byte-magnitude floats (0..255) with byte-scale
  parameters; CONVERT_FIRST normalizes ``x / 255`` with unit-scale ones.
"""
from __future__ import annotations

import math
import struct
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

from .imaging import (
    Image,
    Tensor,
    byte_to_float_array,
    convert_color,
    decode_with,
    get_adapter,
    to_tensor,
    transpose_layout,
)
from .manifest import EXPECTED_DOMAIN, ConversionOrder, Layout, Manifest, NormDomain

__all__ = [
    "Digest",
    "NormalizationError",
    "PipelineError",
    "PipelineResult",
    "RTENError",
    "StageRecord",
    "StageTrace",
    "byte_to_float",
    "center_crop",
    "crop_offsets",
    "digest",
    "execute",
    "float_to_byte",
    "fnv1a64",
    "normalize",
    "read_rten",
    "resize",
    "run_pipeline",
    "write_rten",
]

STAGES = ("decode", "color", "crop", "resize", "convert", "normalize", "layout")

_F32 = np.float32
_255 = np.float32(255.0)
_HALF = np.float32(0.5)
_ONE = np.float32(1.0)


class NormalizationError(ValueError):
    pass


# --------------------------------------------------------------------------
# Type conversion


def byte_to_float(x: int) -> np.float32:
    return byte_to_float_array(np.asarray(x, dtype=np.uint8))[()]


def float_to_byte_array(values: np.ndarray) -> np.ndarray:
    v = np.asarray(values, dtype=np.float32)
    with np.errstate(invalid="ignore", over="ignore"):
        scaled = np.floor(_255 * v)
    scaled = np.where(np.isnan(scaled), _F32(0.0), scaled)
    return np.clip(scaled, 0, 255).astype(np.uint8)


def float_to_byte(x: float) -> int:
    return int(float_to_byte_array(np.float32(x)))


# --------------------------------------------------------------------------
# Geometry


def crop_offsets(height: int, width: int, fraction: float) -> tuple[int, int]:
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"crop fraction must be in (0, 1], got {fraction!r}")
    oy = math.floor(height * (1.0 - fraction) / 2.0)
    ox = math.floor(width * (1.0 - fraction) / 2.0)
    return oy, ox


def center_crop(img: Image, fraction: float) -> Image:
    oy, ox = crop_offsets(img.height, img.width, fraction)
    if oy == 0 and ox == 0:
        return img
    cropped = img.samples[oy : img.height - oy, ox : img.width - ox]
    return Image(cropped, img.color_mode, img.provenance)


def _source_coords(n_in: int, n_out: int) -> np.ndarray:
    scale = n_in / n_out
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * scale - 0.5
    return np.clip(src, 0.0, n_in - 1)


def _nearest_index(n_in: int, n_out: int) -> np.ndarray:
    src = _source_coords(n_in, n_out)
    return np.minimum(np.floor(src + 0.5).astype(np.intp), n_in - 1)


def _bilinear_taps(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    src = _source_coords(n_in, n_out)
    lo = np.floor(src).astype(np.intp)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = (src - lo).astype(np.float32)
    return lo, hi, _ONE - frac, frac


def resize(img: Image, method: str, out_w: int, out_h: int) -> Image:
    if out_w < 1 or out_h < 1:
        raise ValueError(f"resize target must be >= 1x1, got {out_w}x{out_h}")
    s = img.samples
    if method == "nearest":
        ys = _nearest_index(img.height, out_h)
        xs = _nearest_index(img.width, out_w)
        out = s[ys][:, xs]
    elif method == "bilinear":
        y0, y1, wy0, wy1 = _bilinear_taps(img.height, out_h)
        x0, x1, wx0, wx1 = _bilinear_taps(img.width, out_w)
        f = s.astype(np.float32)
        wx0 = wx0[None, :, None]
        wx1 = wx1[None, :, None]
        top = wx0 * f[y0][:, x0] + wx1 * f[y0][:, x1]
        bottom = wx0 * f[y1][:, x0] + wx1 * f[y1][:, x1]
        blended = wy0[:, None, None] * top + wy1[:, None, None] * bottom
        out = np.clip(np.floor(blended + _HALF), 0, 255).astype(np.uint8)
    else:
        raise ValueError(f"unknown resize method {method!r}")
    return Image(out, img.color_mode, img.provenance)


# --------------------------------------------------------------------------
# Normalization


def normalize(
    t: Tensor,
    mean: Sequence[float],
    stddev: Sequence[float],
    order: ConversionOrder | str,
    domain: NormDomain | str,
) -> Tensor:
    """Per-channel ``(v - mean) / stddev`` in binary32.

    ``order`` says what ``t`` holds: unit-scale floats (CONVERT_FIRST) or
    byte-magnitude floats (NORMALIZE_FIRST). The parameter ``domain`` must
    match it.
    """
    order = ConversionOrder(order)
    domain = NormDomain(domain)
    if EXPECTED_DOMAIN[order] is not domain:
        raise NormalizationError(
            f"{order.value} requires {EXPECTED_DOMAIN[order].value} parameters, got {domain.value}"
        )
    if t.dtype != "f32":
        raise NormalizationError("normalize expects an f32 tensor")
    if t.layout is None:
        raise NormalizationError("normalize needs a layout tag to find the channel axis")
    if len(mean) != 3 or len(stddev) != 3:
        raise NormalizationError("mean and stddev need 3 values each")
    if any(s == 0 for s in stddev):
        raise NormalizationError("stddev must be nonzero")
    shape = [1, 1, 1, 1]
    axis = 3 if t.layout is Layout.NHWC else 1
    if t.data.shape[axis] != 3:
        raise NormalizationError(f"expected 3 channels, got {t.data.shape[axis]}")
    shape[axis] = 3
    m = np.asarray(mean, dtype=np.float64).astype(np.float32).reshape(shape)
    s = np.asarray(stddev, dtype=np.float64).astype(np.float32).reshape(shape)
    return Tensor((t.data - m) / s, t.layout)


# --------------------------------------------------------------------------
# Canonical serialization and digest

RTEN_MAGIC = b"RTEN"
RTEN_VERSION = 1
_DTYPE_CODES = {"u8": 1, "f32": 2}
_LAYOUT_CODES = {None: 0, Layout.NHWC: 1, Layout.NCHW: 2}
_NP_LE = {"u8": np.dtype("u1"), "f32": np.dtype("<f4")}
DTYPE_NATIVE = {"u8": np.dtype(np.uint8), "f32": np.dtype(np.float32)}


class RTENError(ValueError):
    pass


def write_rten(t: Tensor) -> bytes:
    head = RTEN_MAGIC + bytes(
        [RTEN_VERSION, _DTYPE_CODES[t.dtype], len(t.dims), _LAYOUT_CODES[t.layout]]
    )
    dims = struct.pack(f"<{len(t.dims)}I", *t.dims)
    return head + dims + t.data.astype(_NP_LE[t.dtype], copy=False).tobytes(order="C")


def read_rten(data: bytes) -> Tensor:
    if len(data) < 8 or data[:4] != RTEN_MAGIC:
        raise RTENError("not an RTEN file (bad magic)")
    version, dcode, rank, lcode = data[4], data[5], data[6], data[7]
    if version != RTEN_VERSION:
        raise RTENError(f"unsupported RTEN version {version}")
    dtype = {v: k for k, v in _DTYPE_CODES.items()}.get(dcode)
    if dtype is None:
        raise RTENError(f"unknown dtype code {dcode}")
    if lcode not in (0, 1, 2):
        raise RTENError(f"unknown layout code {lcode}")
    layout = {v: k for k, v in _LAYOUT_CODES.items()}[lcode]
    end = 8 + 4 * rank
    if rank == 0 or len(data) < end:
        raise RTENError("truncated RTEN dims")
    dims = struct.unpack(f"<{rank}I", data[8:end])
    count = math.prod(dims)
    need = count * _NP_LE[dtype].itemsize
    if len(data) - end != need:
        raise RTENError(f"RTEN payload is {len(data) - end} bytes, expected {need}")
    arr = np.frombuffer(data, dtype=_NP_LE[dtype], count=count, offset=end).reshape(dims)
    return Tensor(arr.astype(DTYPE_NATIVE[dtype]), layout)


FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


def fnv1a64(data: bytes) -> int:
    h = FNV_OFFSET
    for b in data:
        h = ((h ^ b) * FNV_PRIME) & _MASK64
    return h


@dataclass(frozen=True)
class Digest:
    dims: tuple[int, ...]
    dtype: str
    layout: str
    sum: float
    min: float
    max: float
    hash: int

    @property
    def hex(self) -> str:
        return f"{self.hash:016x}"

    def to_dict(self) -> dict[str, Any]:
        return {
            "dims": list(self.dims),
            "dtype": self.dtype,
            "layout": self.layout,
            "sum": self.sum,
            "min": self.min,
            "max": self.max,
            "hash": self.hex,
        }


def digest(t: Tensor) -> Digest:
    flat = t.data.ravel().astype(np.float64)
    # cumsum accumulates strictly left to right, unlike np.sum's pairwise tree.
    total = float(np.cumsum(flat)[-1])
    return Digest(
        dims=t.dims,
        dtype=t.dtype,
        layout=t.layout.value if t.layout else "none",
        sum=total,
        min=float(flat.min()),
        max=float(flat.max()),
        hash=fnv1a64(write_rten(t)),
    )


# --------------------------------------------------------------------------
# Tracing and execution


@dataclass(frozen=True)
class StageRecord:
    name: str
    duration_ns: int
    dims: tuple[int, ...]
    min: float
    max: float

    def to_dict(self) -> dict[str, Any]:
        return {
            "stage": self.name,
            "duration_ns": self.duration_ns,
            "dims": list(self.dims),
            "min": self.min,
            "max": self.max,
        }


@dataclass
class StageTrace:
    stages: list[StageRecord] = field(default_factory=list)
    end_to_end_ns: int = 0

    @property
    def names(self) -> list[str]:
        return [s.name for s in self.stages]

    def stage_sum_ns(self) -> int:
        return sum(s.duration_ns for s in self.stages)

    def to_dict(self) -> dict[str, Any]:
        return {
            "stages": [s.to_dict() for s in self.stages],
            "end_to_end_ns": self.end_to_end_ns,
        }


class PipelineError(RuntimeError):
    """A stage failed; ``trace`` holds every stage that completed before it."""

    def __init__(self, stage: str, cause: BaseException, trace: StageTrace):
        self.stage = stage
        self.cause = cause
        self.trace = trace
        super().__init__(f"stage {stage!r} failed: {cause}")


def _summary(value: Image | Tensor) -> tuple[tuple[int, ...], float, float]:
    arr = value.samples if isinstance(value, Image) else value.data
    return tuple(int(n) for n in arr.shape), float(arr.min()), float(arr.max())


def run_stage(trace: StageTrace, name: str, fn: Callable[..., Any], *args: Any) -> Any:
    """Run one stage, appending its timing and output summary to ``trace``."""
    t0 = time.perf_counter_ns()
    out = fn(*args)
    elapsed = time.perf_counter_ns() - t0
    dims, lo, hi = _summary(out)
    trace.stages.append(StageRecord(name, elapsed, dims, lo, hi))
    return out


def _convert(img: Image, order: ConversionOrder) -> Tensor:
    if order is ConversionOrder.CONVERT_FIRST:
        return to_tensor(img, Layout.NHWC, "f32")
    # Byte-magnitude floats; no /255 yet.
    return Tensor(img.samples[np.newaxis].astype(np.float32), Layout.NHWC)


@dataclass
class PipelineResult:
    tensor: Tensor
    trace: StageTrace
    image: Image  # last image before conversion (post-resize)


def execute(m: Manifest, data: bytes) -> PipelineResult:
    trace = StageTrace()
    start = time.perf_counter_ns()
    stage = "decode"
    try:
        adapter = get_adapter(m.decoder)
        img = run_stage(trace, "decode", decode_with, adapter, data)
        stage = "color"
        img = run_stage(trace, "color", convert_color, img, m.color_mode)
        if m.crop is not None:
            stage = "crop"
            img = run_stage(trace, "crop", center_crop, img, m.crop.fraction)
        stage = "resize"
        img = run_stage(trace, "resize", resize, img, m.resize.method, m.resize.width, m.resize.height)
        stage = "convert"
        t = run_stage(trace, "convert", _convert, img, m.conversion_order)
        stage = "normalize"
        t = run_stage(
            trace, "normalize", normalize, t, m.mean, m.stddev,
            m.conversion_order, m.normalization_domain,
        )
        stage = "layout"
        t = run_stage(trace, "layout", transpose_layout, t, m.layout)
    except Exception as exc:
        trace.end_to_end_ns = time.perf_counter_ns() - start
        raise PipelineError(stage, exc, trace) from exc
    trace.end_to_end_ns = time.perf_counter_ns() - start
    return PipelineResult(t, trace, img)


def run_pipeline(m: Manifest, data: bytes) -> tuple[Tensor, StageTrace]:
    result = execute(m, data)
    return result.tensor, result.trace
