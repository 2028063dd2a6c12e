"""Model manifest: a line-oriented file that pins every preprocessing choice.

A manifest looks like::

    # Inception-v3, TensorFlow-style preprocessing
    name = inception_v3
    [preprocess]
    decoder = ppm:reference
    color_mode = RGB
    crop = center:0.875
    resize = bilinear:299x299
    conversion_order = CONVERT_FIRST
    mean = 0.5, 0.5, 0.5
    stddev = 0.5, 0.5, 0.5
    normalization_domain = unit_scale
    layout = NHWC
    dtype = float32

Unknown keys are rejected with their line number. Only ``crop`` may be
omitted. See ``docs/manifest.md`` for the ABNF grammar.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from enum import Enum

__all__ = [
    "ColorMode",
    "ConversionOrder",
    "CropSpec",
    "Issue",
    "Layout",
    "Manifest",
    "ManifestError",
    "NormDomain",
    "ResizeSpec",
    "parse_manifest",
    "serialize_manifest",
    "validate",
]


class ColorMode(str, Enum):
    RGB = "RGB"
    BGR = "BGR"


class Layout(str, Enum):
    NHWC = "NHWC"
    NCHW = "NCHW"


class ConversionOrder(str, Enum):
    CONVERT_FIRST = "CONVERT_FIRST"
    NORMALIZE_FIRST = "NORMALIZE_FIRST"


class NormDomain(str, Enum):
    BYTE_SCALE = "byte_scale"
    UNIT_SCALE = "unit_scale"


RESIZE_METHODS = ("nearest", "bilinear")
CROP_KINDS = ("center",)
DTYPES = ("float32",)

# Means above this magnitude can only be byte-scale values.
_BYTE_MAGNITUDE = 1.5


class ManifestError(ValueError):
    """Raised for any syntax or domain error; carries the 1-based position."""

    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        self.message = message
        self.line = line
        self.column = column
        if line is not None:
            where = f"line {line}" + (f", column {column}" if column is not None else "")
            super().__init__(f"{message} at {where}")
        else:
            super().__init__(message)


@dataclass(frozen=True)
class CropSpec:
    fraction: float
    kind: str = "center"

    def __post_init__(self) -> None:
        if self.kind not in CROP_KINDS:
            raise ManifestError(f"unsupported crop kind {self.kind!r}")
        if not (math.isfinite(self.fraction) and 0.0 < self.fraction <= 1.0):
            raise ManifestError(f"crop fraction must be in (0, 1], got {self.fraction!r}")


@dataclass(frozen=True)
class ResizeSpec:
    method: str
    width: int
    height: int

    def __post_init__(self) -> None:
        if self.method not in RESIZE_METHODS:
            raise ManifestError(f"unsupported resize method {self.method!r}")
        if self.width < 1 or self.height < 1:
            raise ManifestError("resize width and height must be >= 1")


@dataclass(frozen=True)
class Manifest:
    name: str
    decoder: str
    color_mode: ColorMode
    resize: ResizeSpec
    conversion_order: ConversionOrder
    mean: tuple[float, float, float]
    stddev: tuple[float, float, float]
    normalization_domain: NormDomain
    layout: Layout
    dtype: str = "float32"
    crop: CropSpec | None = None

    def __post_init__(self) -> None:
        if not self.name:
            raise ManifestError("name must be non-empty")
        if not self.decoder:
            raise ManifestError("decoder must be non-empty")
        for label, value in (("name", self.name), ("decoder", self.decoder)):
            if any(ord(ch) < 0x20 or ord(ch) == 0x7F for ch in value):
                raise ManifestError(f"{label} must not contain control characters")
        if len(self.mean) != 3 or len(self.stddev) != 3:
            raise ManifestError("mean and stddev need exactly 3 values")
        if not all(math.isfinite(v) for v in (*self.mean, *self.stddev)):
            raise ManifestError("mean and stddev must be finite")
        if any(s == 0.0 for s in self.stddev):
            raise ManifestError("stddev must be nonzero")
        if self.dtype not in DTYPES:
            raise ManifestError(f"unsupported dtype {self.dtype!r}")


@dataclass(frozen=True)
class Issue:
    severity: str  # "warning" | "error"
    key: str
    message: str

    def to_dict(self) -> dict:
        return {"severity": self.severity, "key": self.key, "message": self.message}


# --------------------------------------------------------------------------
# Parsing

_KEY_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_]*\Z")
_BARE_RE = re.compile(r"[A-Za-z0-9_.:+\-/]+\Z")
_REAL_RE = re.compile(r"[+-]?(\d+(\.\d*)?|\.\d+)([eE][+-]?\d+)?\Z")
_INT_RE = re.compile(r"\d+\Z")

SECTION = "preprocess"

# Canonical key order; also the full set of accepted keys.
KEYS = (
    "name",
    "decoder",
    "color_mode",
    "crop",
    "resize",
    "conversion_order",
    "mean",
    "stddev",
    "normalization_domain",
    "layout",
    "dtype",
)
OPTIONAL_KEYS = frozenset({"crop"})


@dataclass
class _Entry:
    value: str
    line: int
    column: int  # column of the value's first character
    quoted: bool = False
    items: list[tuple[str, int]] = field(default_factory=list)


def _strip_comment(raw: str, lineno: int) -> str:
    """Drop a trailing ``#`` comment, ignoring ``#`` inside quotes."""
    in_quote = False
    escaped = False
    for i, ch in enumerate(raw):
        if in_quote:
            if escaped:
                escaped = False
            elif ch == "\\":
                escaped = True
            elif ch == '"':
                in_quote = False
        elif ch == '"':
            in_quote = True
        elif ch == "#":
            return raw[:i]
    if in_quote:
        raise ManifestError("unterminated quoted string", lineno, len(raw))
    return raw


def _unquote(text: str, lineno: int, column: int) -> str:
    out = []
    i = 1
    while i < len(text) - 1:
        ch = text[i]
        if ch == "\\":
            nxt = text[i + 1] if i + 1 < len(text) - 1 else ""
            if nxt not in ('"', "\\"):
                raise ManifestError("invalid escape in quoted string", lineno, column + i)
            out.append(nxt)
            i += 2
            continue
        if ch == '"':
            raise ManifestError("unexpected quote inside string", lineno, column + i)
        out.append(ch)
        i += 1
    return "".join(out)


def _split_value(text: str, lineno: int, column: int) -> _Entry:
    if not text:
        raise ManifestError("missing value", lineno, column)
    if text.startswith('"'):
        if len(text) < 2 or not text.endswith('"'):
            raise ManifestError("malformed quoted string", lineno, column)
        return _Entry(_unquote(text, lineno, column), lineno, column, quoted=True)
    items = []
    offset = 0
    for part in text.split(","):
        stripped = part.strip()
        col = column + offset + (len(part) - len(part.lstrip()))
        if not stripped:
            raise ManifestError("empty tuple element", lineno, col)
        if not _BARE_RE.match(stripped):
            raise ManifestError(f"invalid token {stripped!r}", lineno, col)
        items.append((stripped, col))
        offset += len(part) + 1
    return _Entry(text, lineno, column, items=items)


def _tokenize(text: str) -> dict[str, _Entry]:
    entries: dict[str, _Entry] = {}
    seen_section = False
    for lineno, raw in enumerate(text.split("\n"), start=1):
        if raw.endswith("\r"):
            raise ManifestError("CR line endings are not allowed", lineno, len(raw))
        line = _strip_comment(raw, lineno)
        stripped = line.strip()
        if not stripped:
            continue
        lead = len(line) - len(line.lstrip()) + 1
        if stripped.startswith("["):
            if stripped != f"[{SECTION}]":
                raise ManifestError(f"unknown section {stripped!r}", lineno, lead)
            if seen_section:
                raise ManifestError("duplicate [preprocess] section", lineno, lead)
            seen_section = True
            continue
        eq = line.find("=")
        if eq < 0:
            raise ManifestError("expected 'key = value'", lineno, lead)
        key = line[:eq].strip()
        if not _KEY_RE.match(key):
            raise ManifestError(f"invalid key {key!r}", lineno, lead)
        if key not in KEYS:
            raise ManifestError(f"unknown key {key!r}", lineno, lead)
        if key in entries:
            raise ManifestError(f"duplicate key {key!r}", lineno, lead)
        rest = line[eq + 1 :]
        vcol = eq + 2 + (len(rest) - len(rest.lstrip()))
        entries[key] = _split_value(rest.strip(), lineno, vcol)
    return entries


def _single(key: str, e: _Entry) -> tuple[str, int]:
    if e.quoted:
        return e.value, e.column
    if len(e.items) != 1:
        raise ManifestError(f"{key} takes a single value", e.line, e.column)
    return e.items[0]


def _real(tok: str, line: int, col: int) -> float:
    if not _REAL_RE.match(tok):
        raise ManifestError(f"expected a real number, got {tok!r}", line, col)
    return float(tok)


def _enum(key: str, e: _Entry, enum_cls):
    tok, col = _single(key, e)
    try:
        return enum_cls(tok)
    except ValueError:
        allowed = ", ".join(m.value for m in enum_cls)
        raise ManifestError(f"{key} must be one of {{{allowed}}}, got {tok!r}", e.line, col) from None


def _triple(key: str, e: _Entry) -> tuple[float, float, float]:
    if e.quoted or len(e.items) != 3:
        raise ManifestError(f"{key} needs exactly 3 comma-separated values", e.line, e.column)
    vals = tuple(_real(tok, e.line, col) for tok, col in e.items)
    if key == "stddev" and any(v == 0.0 for v in vals):
        raise ManifestError("stddev must be nonzero", e.line, e.column)
    return vals  # type: ignore[return-value]


def _crop(e: _Entry) -> CropSpec:
    tok, col = _single("crop", e)
    kind, sep, frac = tok.partition(":")
    if not sep or kind not in CROP_KINDS:
        raise ManifestError(f"crop must look like 'center:<fraction>', got {tok!r}", e.line, col)
    value = _real(frac, e.line, col + len(kind) + 1)
    if not 0.0 < value <= 1.0:
        raise ManifestError(f"crop fraction must be in (0, 1], got {frac}", e.line, col)
    return CropSpec(fraction=value, kind=kind)


def _resize(e: _Entry) -> ResizeSpec:
    tok, col = _single("resize", e)
    method, sep, size = tok.partition(":")
    if not sep or method not in RESIZE_METHODS:
        raise ManifestError(
            f"resize must look like '<nearest|bilinear>:<W>x<H>', got {tok!r}", e.line, col
        )
    w, x, h = size.partition("x")
    if not x or not _INT_RE.match(w) or not _INT_RE.match(h):
        raise ManifestError(f"resize size must be '<W>x<H>', got {size!r}", e.line, col)
    width, height = int(w), int(h)
    if width < 1 or height < 1:
        raise ManifestError("resize width and height must be >= 1", e.line, col)
    return ResizeSpec(method=method, width=width, height=height)


def parse_manifest(text: str | bytes) -> Manifest:
    """Parse manifest text. Raises ManifestError with line/column on any problem."""
    if isinstance(text, bytes):
        try:
            text = text.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ManifestError(f"manifest is not valid UTF-8: {exc}") from None
    entries = _tokenize(text)
    missing = [k for k in KEYS if k not in entries and k not in OPTIONAL_KEYS]
    if missing:
        raise ManifestError(f"missing mandatory key(s): {', '.join(missing)}")

    name, _ = _single("name", entries["name"])
    decoder, _ = _single("decoder", entries["decoder"])
    dtype_tok, dcol = _single("dtype", entries["dtype"])
    if dtype_tok not in DTYPES:
        raise ManifestError(f"dtype must be float32, got {dtype_tok!r}", entries["dtype"].line, dcol)
    if not name:
        raise ManifestError("name must be non-empty", entries["name"].line, entries["name"].column)

    return Manifest(
        name=name,
        decoder=decoder,
        color_mode=_enum("color_mode", entries["color_mode"], ColorMode),
        crop=_crop(entries["crop"]) if "crop" in entries else None,
        resize=_resize(entries["resize"]),
        conversion_order=_enum("conversion_order", entries["conversion_order"], ConversionOrder),
        mean=_triple("mean", entries["mean"]),
        stddev=_triple("stddev", entries["stddev"]),
        normalization_domain=_enum("normalization_domain", entries["normalization_domain"], NormDomain),
        layout=_enum("layout", entries["layout"], Layout),
        dtype=dtype_tok,
    )


# --------------------------------------------------------------------------
# Serialization


def _fmt_real(v: float) -> str:
    # repr() is the shortest string that round-trips through float().
    return repr(float(v))


def _fmt_str(s: str) -> str:
    if _BARE_RE.match(s) and "," not in s:
        return s
    return '"' + s.replace("\\", "\\\\").replace('"', '\\"') + '"'


def serialize_manifest(m: Manifest) -> str:
    """Canonical text: fixed key order, one section header, LF endings."""
    lines = [f"name = {_fmt_str(m.name)}", f"[{SECTION}]"]
    lines.append(f"decoder = {_fmt_str(m.decoder)}")
    lines.append(f"color_mode = {m.color_mode.value}")
    if m.crop is not None:
        lines.append(f"crop = {m.crop.kind}:{_fmt_real(m.crop.fraction)}")
    lines.append(f"resize = {m.resize.method}:{m.resize.width}x{m.resize.height}")
    lines.append(f"conversion_order = {m.conversion_order.value}")
    lines.append("mean = " + ", ".join(_fmt_real(v) for v in m.mean))
    lines.append("stddev = " + ", ".join(_fmt_real(v) for v in m.stddev))
    lines.append(f"normalization_domain = {m.normalization_domain.value}")
    lines.append(f"layout = {m.layout.value}")
    lines.append(f"dtype = {m.dtype}")
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# Semantic validation

EXPECTED_DOMAIN = {
    ConversionOrder.CONVERT_FIRST: NormDomain.UNIT_SCALE,
    ConversionOrder.NORMALIZE_FIRST: NormDomain.BYTE_SCALE,
}


def validate(m: Manifest) -> list[Issue]:
    """Return semantic issues. Errors mean the pipeline will refuse to run."""
    issues: list[Issue] = []
    expected = EXPECTED_DOMAIN[m.conversion_order]
    if m.normalization_domain is not expected:
        issues.append(
            Issue(
                "error",
                "normalization_domain",
                f"{m.conversion_order.value} operates on "
                f"{'unit' if expected is NormDomain.UNIT_SCALE else 'byte'}-scale values "
                f"but parameters are tagged {m.normalization_domain.value}",
            )
        )
    big = max(abs(v) for v in (*m.mean, *m.stddev))
    if m.normalization_domain is NormDomain.UNIT_SCALE and big > _BYTE_MAGNITUDE:
        issues.append(
            Issue(
                "warning",
                "mean",
                "likely domain mismatch: unit_scale parameters have byte magnitude "
                f"(max |value| = {big:g}); outputs will be off by a factor near 255",
            )
        )
    elif m.normalization_domain is NormDomain.BYTE_SCALE and big <= _BYTE_MAGNITUDE:
        issues.append(
            Issue(
                "warning",
                "mean",
                "likely domain mismatch: byte_scale parameters have unit magnitude "
                f"(max |value| = {big:g}); outputs will be off by a factor near 255",
            )
        )
    return issues
