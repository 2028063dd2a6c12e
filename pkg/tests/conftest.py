from __future__ import annotations

import numpy as np
import pytest

from pixelproof.imaging import Image
from pixelproof.manifest import ColorMode

INCEPTION_TEXT = """\
# Inception-v3 preprocessing: 87.5% center crop, then 299x299
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
"""


def make_manifest_text(**overrides: str | None) -> str:
    """INCEPTION_TEXT with keys replaced (value None drops the key)."""
    lines = []
    for line in INCEPTION_TEXT.splitlines():
        key = line.split("=", 1)[0].strip()
        if "=" in line and key in overrides:
            value = overrides[key]
            if value is not None:
                lines.append(f"{key} = {value}")
        else:
            lines.append(line)
    return "\n".join(lines) + "\n"


def ppm_bytes(samples: np.ndarray) -> bytes:
    h, w, _ = samples.shape
    return f"P6\n{w} {h}\n255\n".encode() + samples.astype(np.uint8).tobytes()


def random_samples(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    return rng.integers(0, 256, size=(h, w, 3), dtype=np.uint8)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240601)


@pytest.fixture
def small_image(rng) -> Image:
    return Image(random_samples(rng, 5, 7), ColorMode.RGB, "test")


@pytest.fixture
def corpus_dir(tmp_path):
    """Twenty small PPMs of varied sizes."""
    rng = np.random.default_rng(7)
    root = tmp_path / "corpus"
    root.mkdir()
    for i in range(20):
        h, w = int(rng.integers(24, 48)), int(rng.integers(24, 48))
        (root / f"img_{i:02d}.ppm").write_bytes(ppm_bytes(random_samples(rng, h, w)))
    return root


@pytest.fixture
def small_manifest_path(tmp_path):
    path = tmp_path / "small.mfst"
    path.write_text(make_manifest_text(name="small", resize="bilinear:16x16"))
    return path
