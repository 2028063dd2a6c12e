"""Images, tensors, decoder adapters, and color/layout transforms.

Images are H x W x 3 uint8 arrays tagged with a color mode and the id of the
decoder that produced them. Tensors are rank-N arrays with an explicit dtype
(``u8`` or ``f32``) and, for rank 4, a layout tag.

PPM (P6, maxval 255) is the reference format: lossless and bit-exact. JPEG is
only reachable through registered adapters, whose outputs may legitimately
disagree with one another.
"""
from __future__ import annotations

import io
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .manifest import ColorMode, Layout

__all__ = [
    "DecodeError",
    "DecoderAdapter",
    "Image",
    "PPMError",
    "Tensor",
    "convert_color",
    "decode_ppm",
    "decode_with",
    "encode_ppm",
    "get_adapter",
    "register_adapter",
    "registered_adapters",
    "to_tensor",
    "transpose_layout",
]

DTYPES = {"u8": np.dtype("uint8"), "f32": np.dtype("float32")}

# Axis permutations between the two rank-4 layouts.
_NHWC_TO_NCHW = (0, 3, 1, 2)
_NCHW_TO_NHWC = (0, 2, 3, 1)


class PPMError(ValueError):
    pass


class DecodeError(RuntimeError):
    """Decode failed inside an adapter; ``adapter_id`` names the culprit."""

    def __init__(self, adapter_id: str, message: str):
        self.adapter_id = adapter_id
        super().__init__(f"[{adapter_id}] {message}")


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Image:
    samples: np.ndarray  # (H, W, 3) uint8, row-major interleaved
    color_mode: ColorMode = ColorMode.RGB
    provenance: str = "unknown"

    def __post_init__(self) -> None:
        s = self.samples
        if s.dtype != np.uint8 or s.ndim != 3:
            raise ValueError(f"image samples must be a (H, W, C) uint8 array, got {s.dtype} {s.shape}")
        h, w, c = s.shape
        if h < 1 or w < 1:
            raise ValueError(f"image must be at least 1x1, got {w}x{h}")
        if c != 3:
            raise ValueError(f"image must have 3 channels, got {c}")
        object.__setattr__(self, "samples", _frozen(s))
        object.__setattr__(self, "color_mode", ColorMode(self.color_mode))

    @property
    def height(self) -> int:
        return self.samples.shape[0]

    @property
    def width(self) -> int:
        return self.samples.shape[1]

    @property
    def channels(self) -> int:
        return self.samples.shape[2]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Image):
            return NotImplemented
        return (
            self.color_mode == other.color_mode
            and self.provenance == other.provenance
            and self.samples.shape == other.samples.shape
            and np.array_equal(self.samples, other.samples)
        )

    __hash__ = None  # type: ignore[assignment]

    def __repr__(self) -> str:
        return f"Image({self.width}x{self.height}, {self.color_mode.value}, {self.provenance!r})"


@dataclass(frozen=True, eq=False)
class Tensor:
    data: np.ndarray  # shaped by dims
    layout: Layout | None = None

    def __post_init__(self) -> None:
        d = self.data
        if d.dtype not in DTYPES.values():
            raise ValueError(f"unsupported tensor dtype {d.dtype}")
        if d.ndim < 1 or any(n < 1 for n in d.shape):
            raise ValueError(f"tensor dims must be positive, got {d.shape}")
        if self.layout is not None:
            object.__setattr__(self, "layout", Layout(self.layout))
            if d.ndim != 4:
                raise ValueError(f"layout {self.layout.value} requires rank 4, got rank {d.ndim}")
        object.__setattr__(self, "data", _frozen(d))

    @property
    def dtype(self) -> str:
        return "u8" if self.data.dtype == np.uint8 else "f32"

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(int(n) for n in self.data.shape)

    def __eq__(self, other: object) -> bool:
        """Bitwise equality, so NaN payloads and signed zeros count."""
        if not isinstance(other, Tensor):
            return NotImplemented
        return (
            self.layout == other.layout
            and self.data.dtype == other.data.dtype
            and self.data.shape == other.data.shape
            and self.data.tobytes() == other.data.tobytes()
        )

    __hash__ = None  # type: ignore[assignment]

    def __repr__(self) -> str:
        lay = self.layout.value if self.layout else "none"
        return f"Tensor({self.dtype}, dims={list(self.dims)}, layout={lay})"


# --------------------------------------------------------------------------
# PPM


def _ppm_header(data: bytes) -> tuple[int, int, int, int]:
    """Return (width, height, maxval, payload offset)."""
    if len(data) < 2:
        raise PPMError("malformed PPM header: file too short")
    magic = data[:2]
    if magic != b"P6":
        if magic[:1] == b"P" and magic[1:2] in b"1234567":
            raise PPMError(f"unsupported PPM variant {magic.decode('ascii')!r} (only P6)")
        raise PPMError("malformed PPM header: bad magic")
    pos = 2
    fields: list[int] = []
    n = len(data)
    while len(fields) < 3:
        if pos >= n:
            raise PPMError("malformed PPM header: truncated")
        ch = data[pos : pos + 1]
        if ch.isspace():
            pos += 1
        elif ch == b"#":
            nl = data.find(b"\n", pos)
            if nl < 0:
                raise PPMError("malformed PPM header: unterminated comment")
            pos = nl + 1
        elif ch.isdigit():
            if pos == 2:
                raise PPMError("malformed PPM header: missing whitespace after magic")
            start = pos
            while pos < n and data[pos : pos + 1].isdigit():
                pos += 1
            fields.append(int(data[start:pos]))
        else:
            raise PPMError(f"malformed PPM header: unexpected byte {ch!r} at offset {pos}")
    if pos >= n or not data[pos : pos + 1].isspace():
        raise PPMError("malformed PPM header: missing whitespace before pixel data")
    width, height, maxval = fields
    return width, height, maxval, pos + 1


def decode_ppm(data: bytes) -> Image:
    """Decode a binary P6 PPM with maxval 255, bit-exactly."""
    data = bytes(data)
    width, height, maxval, start = _ppm_header(data)
    if width < 1 or height < 1:
        raise PPMError(f"malformed PPM header: size {width}x{height}")
    if maxval != 255:
        raise PPMError(f"unsupported PPM maxval {maxval} (only 255)")
    need = width * height * 3
    have = len(data) - start
    if have < need:
        raise PPMError(f"truncated PPM payload: expected {need} bytes, got {have}")
    raw = np.frombuffer(data, dtype=np.uint8, count=need, offset=start)
    return Image(raw.reshape(height, width, 3).copy(), ColorMode.RGB, PPM_ADAPTER_ID)


def encode_ppm(img: Image) -> bytes:
    """P6 bytes of the samples as stored (no channel reordering)."""
    header = f"P6\n{img.width} {img.height}\n255\n".encode("ascii")
    return header + img.samples.tobytes()


# --------------------------------------------------------------------------
# Decoder adapters

PPM_ADAPTER_ID = "ppm:reference"


@dataclass(frozen=True)
class DecoderAdapter:
    id: str
    formats: tuple[str, ...]
    decode: Callable[[bytes], Image]

    @property
    def family(self) -> str:
        """The id with any ``-<version>`` suffix removed, e.g. ``jpeg:pillow``."""
        head, _, _ = self.id.partition("-")
        return head


_REGISTRY: dict[str, DecoderAdapter] = {}


def register_adapter(adapter: DecoderAdapter) -> None:
    if not adapter.id:
        raise ValueError("adapter id must be non-empty")
    _REGISTRY[adapter.id] = adapter


def registered_adapters() -> list[str]:
    return sorted(_REGISTRY)


def get_adapter(adapter_id: str) -> DecoderAdapter:
    """Look up by exact id, or by family name when exactly one version is registered."""
    if adapter_id in _REGISTRY:
        return _REGISTRY[adapter_id]
    matches = [a for a in _REGISTRY.values() if a.family == adapter_id]
    if len(matches) == 1:
        return matches[0]
    raise KeyError(
        f"unknown decoder adapter {adapter_id!r}; registered: {', '.join(registered_adapters())}"
    )


def decode_with(adapter: DecoderAdapter | str, data: bytes) -> Image:
    if isinstance(adapter, str):
        adapter = get_adapter(adapter)
    try:
        img = adapter.decode(data)
    except DecodeError:
        raise
    except Exception as exc:  # decoders raise all sorts of things
        raise DecodeError(adapter.id, str(exc)) from exc
    if img.provenance != adapter.id:
        img = Image(img.samples, img.color_mode, adapter.id)
    return img


def _pillow_adapter() -> DecoderAdapter | None:
    try:
        import PIL
        from PIL import Image as PILImage
    except ImportError:
        return None
    ident = f"jpeg:pillow-{PIL.__version__}"

    def decode(data: bytes) -> Image:
        with PILImage.open(io.BytesIO(data)) as im:
            if im.format != "JPEG":
                raise DecodeError(ident, f"not a JPEG stream (format {im.format})")
            if im.mode != "RGB":
                raise DecodeError(ident, f"only 3-channel RGB JPEGs are accepted, got mode {im.mode}")
            arr = np.asarray(im, dtype=np.uint8)
        return Image(arr, ColorMode.RGB, ident)

    return DecoderAdapter(ident, ("jpeg",), decode)


def _opencv_adapter() -> DecoderAdapter | None:
    try:
        import cv2
    except ImportError:
        return None
    ident = f"jpeg:opencv-{cv2.__version__}"

    def decode(data: bytes) -> Image:
        if data[:3] != b"\xff\xd8\xff":
            raise DecodeError(ident, "not a JPEG stream")
        buf = np.frombuffer(data, dtype=np.uint8)
        arr = cv2.imdecode(buf, cv2.IMREAD_UNCHANGED)
        if arr is None:
            raise DecodeError(ident, "cv2.imdecode failed")
        if arr.ndim != 3 or arr.shape[2] != 3 or arr.dtype != np.uint8:
            raise DecodeError(ident, f"only 3-channel 8-bit JPEGs are accepted, got shape {arr.shape}")
        # OpenCV's native order is BGR; tag it rather than silently swapping.
        return Image(arr, ColorMode.BGR, ident)

    return DecoderAdapter(ident, ("jpeg",), decode)


register_adapter(DecoderAdapter(PPM_ADAPTER_ID, ("ppm",), decode_ppm))
for _factory in (_pillow_adapter, _opencv_adapter):
    _adapter = _factory()
    if _adapter is not None:
        register_adapter(_adapter)


# --------------------------------------------------------------------------
# Transforms


def convert_color(img: Image, target: ColorMode | str) -> Image:
    """Swap channels 0 and 2 when the mode changes; otherwise return ``img``."""
    target = ColorMode(target)
    if target == img.color_mode:
        return img
    return Image(img.samples[:, :, ::-1], target, img.provenance)


def byte_to_float_array(samples: np.ndarray) -> np.ndarray:
    """x / 255 in binary32 (division in float32 is correctly rounded)."""
    return samples.astype(np.float32) / np.float32(255.0)


def to_tensor(img: Image, layout: Layout | str = Layout.NHWC, dtype: str = "u8") -> Tensor:
    layout = Layout(layout)
    if dtype == "u8":
        values = img.samples
    elif dtype == "f32":
        values = byte_to_float_array(img.samples)
    else:
        raise ValueError(f"unsupported tensor dtype {dtype!r}")
    nhwc = values[np.newaxis]
    if layout is Layout.NCHW:
        nhwc = nhwc.transpose(_NHWC_TO_NCHW)
    return Tensor(np.ascontiguousarray(nhwc), layout)


def transpose_layout(t: Tensor, target: Layout | str) -> Tensor:
    target = Layout(target)
    if t.layout is None:
        raise ValueError("tensor has no layout tag; cannot transpose")
    if t.layout is target:
        return t
    axes = _NHWC_TO_NCHW if target is Layout.NCHW else _NCHW_TO_NHWC
    return Tensor(np.ascontiguousarray(t.data.transpose(axes)), target)
