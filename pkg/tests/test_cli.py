from __future__ import annotations

import io
import json

import numpy as np
import pytest

from pixelproof.cli import main
from pixelproof.imaging import decode_ppm, registered_adapters
from pixelproof.pipeline import read_rten

from .conftest import make_manifest_text, ppm_bytes, random_samples


@pytest.fixture
def write(tmp_path):
    def _write(name: str, content: str | bytes):
        path = tmp_path / name
        if isinstance(content, bytes):
            path.write_bytes(content)
        else:
            path.write_text(content)
        return str(path)

    return _write


@pytest.fixture
def card(write):
    """Red left half, blue right half."""
    samples = np.zeros((32, 32, 3), np.uint8)
    samples[:, :16, 0] = 255
    samples[:, 16:, 2] = 255
    return write("card.ppm", ppm_bytes(samples))


def _small(**overrides) -> str:
    return make_manifest_text(resize="bilinear:8x8", **overrides)


def _json(capsys) -> dict:
    return json.loads(capsys.readouterr().out)


# -- validate -----------------------------------------------------------------


def test_validate_ok(write, capsys):
    assert main(["validate", write("m.mfst", make_manifest_text())]) == 0
    assert _json(capsys)["issues"] == []


def test_validate_unknown_key_reports_line(write, capsys):
    path = write("m.mfst", make_manifest_text() + "gamma = 2.2\n")
    assert main(["validate", path]) == 2
    err = capsys.readouterr().err
    assert "unknown key 'gamma'" in err
    assert f"{path}:14:" in err


def test_validate_pairing_error(write, capsys):
    path = write("m.mfst", make_manifest_text(conversion_order="NORMALIZE_FIRST"))
    assert main(["validate", path]) == 2
    issues = _json(capsys)["issues"]
    assert issues[0]["severity"] == "error"


def test_validate_warning_and_strict(write, capsys):
    text = make_manifest_text(mean="127.5, 127.5, 127.5", stddev="127.5, 127.5, 127.5")
    path = write("m.mfst", text)
    assert main(["validate", path]) == 0
    assert "likely domain mismatch" in capsys.readouterr().err
    assert main(["validate", "--strict", path]) == 2


def test_validate_missing_file(tmp_path, capsys):
    assert main(["validate", str(tmp_path / "nope.mfst")]) == 2
    assert "cannot read manifest" in capsys.readouterr().err


def test_usage_error():
    assert main([]) == 2
    assert main(["frobnicate"]) == 2


# -- run and digest -----------------------------------------------------------


def test_run_is_deterministic(write, tmp_path, capsys):
    m = write("m.mfst", make_manifest_text())
    img = write("in.ppm", ppm_bytes(random_samples(np.random.default_rng(3), 512, 512)))
    out1, out2 = tmp_path / "a.rten", tmp_path / "b.rten"
    assert main(["run", m, img, str(out1)]) == 0
    first = _json(capsys)
    assert main(["run", m, img, "--out", str(out2)]) == 0
    second = _json(capsys)
    assert out1.read_bytes() == out2.read_bytes()
    assert first["digest"] == second["digest"]
    assert first["digest"]["dims"] == [1, 299, 299, 3]
    assert read_rten(out1.read_bytes()).dims == (1, 299, 299, 3)
    assert [s["stage"] for s in first["trace"]["stages"]] == [
        "decode", "color", "crop", "resize", "convert", "normalize", "layout",
    ]

    assert main(["digest", str(out1)]) == 0
    assert _json(capsys) == first["digest"]


def test_run_missing_input(write, tmp_path, capsys):
    assert main(["run", write("m.mfst", _small()), str(tmp_path / "missing.ppm")]) == 2


def test_run_decode_failure_reports_stage(write, capsys):
    code = main(["run", write("m.mfst", _small()), write("bad.ppm", b"not an image")])
    assert code == 3
    out = _json(capsys)
    assert "decode" in out["error"]
    assert out["trace"]["stages"] == []


def test_digest_bad_file(write, capsys):
    assert main(["digest", write("x.rten", b"JUNK")]) == 3


# -- diff ---------------------------------------------------------------------


def test_diff_identical_manifests(write, card, capsys):
    m = write("a.mfst", _small())
    assert main(["diff", m, m, card]) == 0
    assert _json(capsys)["report"]["count_differing"] == 0


def test_diff_rgb_vs_bgr(write, card, tmp_path, capsys):
    a = write("a.mfst", _small(name="rgb"))
    b = write("b.mfst", _small(name="bgr", color_mode="BGR"))
    viz = tmp_path / "viz.ppm"
    assert main(["diff", a, b, card, "--viz", str(viz)]) == 1
    out = _json(capsys)
    assert out["report"]["count_differing"] > 0
    assert out["report"]["source_a"] == "rgb"
    assert out["digest_a"]["hash"] != out["digest_b"]["hash"]
    assert decode_ppm(viz.read_bytes()).samples.max() == 255


def test_diff_layout_mismatch(write, card, capsys):
    a = write("a.mfst", _small())
    b = write("b.mfst", _small(layout="NCHW"))
    assert main(["diff", a, b, card]) == 3
    captured = capsys.readouterr()
    out = json.loads(captured.out)
    assert out["a"]["dims"] == [1, 8, 8, 3]
    assert out["b"]["dims"] == [1, 3, 8, 8]
    assert "output mismatch" in captured.err


# -- decode-diff --------------------------------------------------------------


def test_decode_diff_same_adapter(card, capsys):
    assert main(["decode-diff", "ppm:reference", "ppm:reference", card]) == 0
    assert _json(capsys)["thresholds"] == [25, 230]


def test_decode_diff_unknown_adapter(card, capsys):
    assert main(["decode-diff", "ppm:reference", "jpeg:nothing-9", card]) == 2
    assert "ppm:reference" in capsys.readouterr().err


def test_decode_diff_bad_thresholds(card):
    assert main(["decode-diff", "ppm:reference", "ppm:reference", card, "--thresholds", "9"]) == 2
    assert main(["decode-diff", "ppm:reference", "ppm:reference", card, "--thresholds", "200,100"]) == 2


def test_decode_diff_jpeg_pair(write, capsys):
    from PIL import Image as PILImage

    adapters = [a for a in registered_adapters() if a.startswith("jpeg:")]
    if len(adapters) < 2:
        pytest.skip("needs two JPEG adapters")
    buf = io.BytesIO()
    PILImage.fromarray(random_samples(np.random.default_rng(1), 40, 40)).save(buf, format="JPEG")
    path = write("x.jpg", buf.getvalue())
    code = main(["decode-diff", adapters[0], adapters[1], path, "--thresholds", "0,255"])
    assert code in (0, 1)
    report = _json(capsys)["report"]
    assert (code == 1) == (report["count_differing"] > 0)


def test_decode_diff_wrong_format(card):
    jpeg = [a for a in registered_adapters() if a.startswith("jpeg:")]
    assert main(["decode-diff", "ppm:reference", jpeg[0], card]) == 3


# -- bench and pack -----------------------------------------------------------


def test_bench_grid(corpus_dir, small_manifest_path, capsys):
    args = ["bench", "--manifest", str(small_manifest_path), "--inputs", str(corpus_dir),
            "--batch-sizes", "1,2", "--workers", "1,2", "--warmup", "1", "--iters", "2"]
    assert main(args) == 0
    report = _json(capsys)
    assert len(report["cells"]) == 4
    assert report["digests_consistent"]


def test_bench_env_override(corpus_dir, small_manifest_path, capsys, monkeypatch):
    monkeypatch.setenv("PIXELPROOF_WORKERS", "3")
    args = ["bench", "--manifest", str(small_manifest_path), "--inputs", str(corpus_dir),
            "--warmup", "0", "--iters", "2"]
    assert main(args) == 0
    assert [c["workers"] for c in _json(capsys)["cells"]] == [3]


def test_bench_bad_iters(corpus_dir, small_manifest_path):
    args = ["bench", "--manifest", str(small_manifest_path), "--inputs", str(corpus_dir), "--iters", "0"]
    assert main(args) == 2


def test_bench_needs_source(small_manifest_path):
    assert main(["bench", "--manifest", str(small_manifest_path)]) == 2


def test_pack_then_bench(corpus_dir, small_manifest_path, tmp_path, capsys):
    pack = tmp_path / "c.rpak"
    assert main(["pack", str(corpus_dir), "--out", str(pack)]) == 0
    assert _json(capsys)["records"] == 20
    common = ["--manifest", str(small_manifest_path), "--warmup", "1", "--iters", "1"]
    assert main(["bench", "--pack", str(pack), *common]) == 0
    by_pack = _json(capsys)
    assert main(["bench", "--inputs", str(corpus_dir), *common]) == 0
    by_dir = _json(capsys)
    assert by_pack["cells"][0]["digests"] == by_dir["cells"][0]["digests"]


def test_bench_writes_out(corpus_dir, small_manifest_path, tmp_path, capsys):
    out = tmp_path / "r.json"
    args = ["bench", "--manifest", str(small_manifest_path), "--inputs", str(corpus_dir),
            "--warmup", "1", "--iters", "1", "--out", str(out)]
    assert main(args) == 0
    assert capsys.readouterr().out == ""
    assert json.loads(out.read_text())["schema"] == "bench/1"


def test_pack_errors(tmp_path):
    assert main(["pack", str(tmp_path / "a")]) == 2
    assert main(["pack", str(tmp_path / "missing"), "--out", str(tmp_path / "o")]) == 2


def test_adapters(capsys):
    assert main(["adapters"]) == 0
    assert "ppm:reference" in _json(capsys)["adapters"]
