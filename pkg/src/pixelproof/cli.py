"""``pixelproof`` command line.

Machine-readable JSON goes to stdout, diagnostics to stderr. Exit codes:

    0  success / no divergence
    1  divergence found (diff, decode-diff)
    2  usage or configuration error
    3  runtime error
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Any, Sequence

from . import __version__
from .bench import BenchConfig, BenchError, apply_env_overrides, parse_int_list, report_json, run_bench
from .diff import DEFAULT_THRESHOLDS, DiffError, image_diff, tensor_diff, visualize_diff
from .imaging import DecodeError, convert_color, decode_with, encode_ppm, get_adapter, registered_adapters
from .manifest import ColorMode, Manifest, ManifestError, parse_manifest, validate
from .pipeline import PipelineError, PipelineResult, RTENError, digest, execute, read_rten, write_rten
from .records import pack_records

EXIT_OK = 0
EXIT_DIVERGENCE = 1
EXIT_USAGE = 2
EXIT_RUNTIME = 3


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_USAGE):
        self.code = code
        super().__init__(message)


def _emit(payload: Any) -> None:
    sys.stdout.write(json.dumps(payload, indent=2) + "\n")


def _warn(message: str) -> None:
    print(f"pixelproof: {message}", file=sys.stderr)


def _read_bytes(path: str, what: str) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise CliError(f"cannot read {what} {path!r}: {exc.strerror or exc}") from None


def _load_manifest(path: str) -> Manifest:
    raw = _read_bytes(path, "manifest")
    try:
        return parse_manifest(raw)
    except ManifestError as exc:
        pos = ""
        if exc.line is not None:
            pos = f"{exc.line}:" + (f"{exc.column}:" if exc.column is not None else "")
        raise CliError(f"{path}:{pos} {exc}") from None


def _parse_thresholds(text: str | None) -> tuple[int, int]:
    if text is None:
        return DEFAULT_THRESHOLDS
    try:
        low, high = (int(v) for v in text.split(","))
    except ValueError:
        raise CliError(f"--thresholds expects 'low,high', got {text!r}") from None
    if not 0 <= low <= high <= 255:
        raise CliError(f"--thresholds must satisfy 0 <= low <= high <= 255, got {text!r}")
    return low, high


def _execute(m: Manifest, data: bytes, label: str) -> PipelineResult:
    try:
        return execute(m, data)
    except PipelineError as exc:
        _emit({"error": str(exc), "manifest": label, "trace": exc.trace.to_dict()})
        raise CliError(f"{label}: {exc}", EXIT_RUNTIME) from None


def _write_viz(path: str, a, b) -> None:
    Path(path).write_bytes(encode_ppm(visualize_diff(a, b)))


# --------------------------------------------------------------------------
# Subcommands


def cmd_validate(args: argparse.Namespace) -> int:
    m = _load_manifest(args.manifest)
    issues = validate(m)
    _emit({"manifest": m.name, "issues": [i.to_dict() for i in issues]})
    for issue in issues:
        _warn(f"{args.manifest}: {issue.severity}: {issue.key}: {issue.message}")
    if any(i.severity == "error" for i in issues):
        return EXIT_USAGE
    if args.strict and issues:
        return EXIT_USAGE
    return EXIT_OK


def cmd_run(args: argparse.Namespace) -> int:
    m = _load_manifest(args.manifest)
    data = _read_bytes(args.input, "input")
    out = args.output or args.out
    result = _execute(m, data, args.manifest)
    if out:
        Path(out).write_bytes(write_rten(result.tensor))
    _emit(
        {
            "manifest": m.name,
            "output": out,
            "digest": digest(result.tensor).to_dict(),
            "trace": result.trace.to_dict(),
        }
    )
    return EXIT_OK


def cmd_diff(args: argparse.Namespace) -> int:
    ma = _load_manifest(args.manifest_a)
    mb = _load_manifest(args.manifest_b)
    data = _read_bytes(args.input, "input")
    ra = _execute(ma, data, args.manifest_a)
    rb = _execute(mb, data, args.manifest_b)
    ta, tb = ra.tensor, rb.tensor

    if args.viz:
        if ra.image.samples.shape == rb.image.samples.shape:
            _write_viz(args.viz, ra.image, rb.image)
        else:
            _warn("--viz skipped: pre-layout images have different sizes")

    try:
        report = tensor_diff(ta, tb, ma.name, mb.name)
    except DiffError as exc:
        shapes = {
            "a": {"dims": list(ta.dims), "dtype": ta.dtype, "layout": ta.layout.value},
            "b": {"dims": list(tb.dims), "dtype": tb.dtype, "layout": tb.layout.value},
        }
        _emit({"error": str(exc), **shapes})
        _warn(f"output mismatch: {exc}")
        return EXIT_RUNTIME

    _emit(
        {
            "report": report.to_dict(),
            "digest_a": digest(ta).to_dict(),
            "digest_b": digest(tb).to_dict(),
        }
    )
    return EXIT_DIVERGENCE if report.count_differing else EXIT_OK


def cmd_decode_diff(args: argparse.Namespace) -> int:
    thresholds = _parse_thresholds(args.thresholds)
    try:
        adapter_a = get_adapter(args.adapter_a)
        adapter_b = get_adapter(args.adapter_b)
    except KeyError as exc:
        raise CliError(exc.args[0]) from None
    data = _read_bytes(args.input, "input")
    try:
        a = decode_with(adapter_a, data)
        b = decode_with(adapter_b, data)
    except DecodeError as exc:
        raise CliError(str(exc), EXIT_RUNTIME) from None
    a = convert_color(a, ColorMode.RGB)
    b = convert_color(b, ColorMode.RGB)
    try:
        report = image_diff(a, b, thresholds)
    except DiffError as exc:
        raise CliError(str(exc), EXIT_RUNTIME) from None
    if args.viz:
        _write_viz(args.viz, a, b)
    _emit({"report": report.to_dict(), "thresholds": list(thresholds)})
    return EXIT_DIVERGENCE if report.count_differing else EXIT_OK


def cmd_bench(args: argparse.Namespace) -> int:
    try:
        cfg = BenchConfig(
            manifest_path=Path(args.manifest),
            inputs=Path(args.inputs) if args.inputs else None,
            pack=Path(args.pack) if args.pack else None,
            batch_sizes=tuple(parse_int_list(args.batch_sizes)),
            worker_counts=tuple(parse_int_list(args.workers)),
            warmup=args.warmup,
            iters=args.iters,
            seed=args.seed,
        )
        cfg = apply_env_overrides(cfg)
    except ValueError as exc:
        raise CliError(str(exc)) from None
    try:
        report = run_bench(cfg)
    except ManifestError as exc:
        raise CliError(f"{args.manifest}: {exc}") from None
    except FileNotFoundError as exc:
        raise CliError(str(exc)) from None
    except (BenchError, OSError, PipelineError, ValueError) as exc:
        raise CliError(str(exc), EXIT_RUNTIME) from None
    text = report_json(report)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    if not report["digests_consistent"]:
        _warn("digests differ across bench cells")
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_pack(args: argparse.Namespace) -> int:
    if not args.out:
        raise CliError("pack requires --out")
    files: list[Path] = []
    for item in args.files:
        p = Path(item)
        if p.is_dir():
            files.extend(sorted(c for c in p.iterdir() if c.is_file() and not c.name.startswith(".")))
        elif p.is_file():
            files.append(p)
        else:
            raise CliError(f"no such file or directory: {item}")
    try:
        data = pack_records(files)
    except ValueError as exc:
        raise CliError(str(exc)) from None
    Path(args.out).write_bytes(data)
    _emit({"output": args.out, "records": len(files), "bytes": len(data)})
    return EXIT_OK


def cmd_digest(args: argparse.Namespace) -> int:
    raw = _read_bytes(args.tensor, "tensor")
    try:
        t = read_rten(raw)
    except RTENError as exc:
        raise CliError(f"{args.tensor}: {exc}", EXIT_RUNTIME) from None
    _emit(digest(t).to_dict())
    return EXIT_OK


def cmd_adapters(args: argparse.Namespace) -> int:
    _emit({"adapters": registered_adapters()})
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--strict", action="store_true", help="treat warnings as errors")
    common.add_argument("--out", help="output path")
    common.add_argument("--viz", metavar="PPM", help="write a diff visualization (P6)")
    common.add_argument("--thresholds", metavar="LOW,HIGH", help="extreme-intensity thresholds")

    parser = argparse.ArgumentParser(prog="pixelproof", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"pixelproof {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", parents=[common], help="check a manifest")
    p.add_argument("manifest")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("run", parents=[common], help="run a manifest over one input")
    p.add_argument("manifest")
    p.add_argument("input")
    p.add_argument("output", nargs="?", help="RTEN output path (or --out)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("diff", parents=[common], help="compare two manifests on one input")
    p.add_argument("manifest_a")
    p.add_argument("manifest_b")
    p.add_argument("input")
    p.set_defaults(func=cmd_diff)

    p = sub.add_parser("decode-diff", parents=[common], help="compare two decoder adapters")
    p.add_argument("adapter_a")
    p.add_argument("adapter_b")
    p.add_argument("input")
    p.set_defaults(func=cmd_decode_diff)

    p = sub.add_parser("bench", parents=[common], help="run the measurement harness")
    p.add_argument("--manifest", required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--inputs", metavar="DIR", help="directory of input files")
    src.add_argument("--pack", metavar="RPAK", help="packed record file")
    p.add_argument("--batch-sizes", default="1")
    p.add_argument("--workers", default="1")
    p.add_argument("--warmup", type=int, default=3)
    p.add_argument("--iters", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("pack", parents=[common], help="pack files into an RPAK file")
    p.add_argument("files", nargs="+", help="files or directories (sorted by name)")
    p.set_defaults(func=cmd_pack)

    p = sub.add_parser("digest", parents=[common], help="digest an RTEN tensor file")
    p.add_argument("tensor")
    p.set_defaults(func=cmd_digest)

    p = sub.add_parser("adapters", parents=[common], help="list registered decoder adapters")
    p.set_defaults(func=cmd_adapters)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except CliError as exc:
        _warn(str(exc))
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
