"""Command-line entry point: ``hlqkit <subcommand> ...``."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .bench import bench_gemm, parse_shape
from .errors import ConfigError, DataError, HlqError
from .finetune import LayerSample, TuneConfig, reconstruct_stage2
from .gptq import accumulate_hessian, hlq_gptq_layer
from .io import QuantizedModel, load_hlqp, read_raw, save_hlqp, write_raw
from .lut import (
    decompose_bitplanes, int8_error_bound, lut_gemm, rearrange_tiles, reference_gemm,
    relative_inf_error,
)
from .metrics import bpw, cosine_similarity, load_shape_config, model_footprint, mse
from .parallel import default_threads
from .quant import QuantConfig, hlq_alternating, hlq_gradient, rtn_quantize, uniform_as_hlq

METHODS = ("rtn", "hlq-alt", "hlq-grad", "hlq-gptq")
GEMM_TOL = 1e-4
COSINE_MIN = 0.999


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _matrix(path, name: str) -> np.ndarray:
    arr = read_raw(path)
    if arr.ndim != 2:
        raise DataError(f"{name} {path} must be 2-D, sidecar says shape {list(arr.shape)}")
    return arr


def _pack(params, bits, fmt: str) -> QuantizedModel:
    packed = rearrange_tiles(decompose_bitplanes(bits, params.q), params.g)
    return QuantizedModel(packed, params, fmt)


def cmd_quantize(args) -> int:
    w = _matrix(args.input, "weights")
    cfg = QuantConfig(q=args.wbits, g=args.group, t_max=args.tmax, lr=args.lr,
                      threads=default_threads())
    fmt = "hlq"
    if args.method == "rtn":
        params, bits = uniform_as_hlq(rtn_quantize(w, cfg))
        fmt = "uniform"
    elif args.method == "hlq-alt":
        params, bits = hlq_alternating(w, cfg)
    elif args.method == "hlq-grad":
        params, bits = hlq_gradient(w, cfg)
    else:
        if not args.calib:
            raise ConfigError("--method hlq-gptq needs --calib X.raw")
        x = _matrix(args.calib, "calibration set")
        if x.shape[1] != w.shape[1]:
            raise DataError(f"calibration width {x.shape[1]} != weight width {w.shape[1]}")
        params, bits = hlq_gptq_layer(w, accumulate_hessian(x), cfg, block_size=args.block)
    model = _pack(params, bits, fmt)
    out = args.out or str(Path(args.input).with_suffix(".hlqp"))
    save_hlqp(out, model, layout=args.layout)
    print(f"wrote {out}: n={w.shape[0]} k={w.shape[1]} q={cfg.q} g={cfg.g} "
          f"method={args.method} mse={mse(w, model.dequantize()):.6e}")
    return 0


def cmd_dequantize(args) -> int:
    model = load_hlqp(args.model)
    write_raw(args.out, model.dequantize())
    print(f"wrote {args.out}: shape {model.packed.n}x{model.packed.k}")
    return 0


def cmd_verify(args) -> int:
    model = load_hlqp(args.model)
    ref = _matrix(args.reference, "reference")
    w_hat = model.dequantize()
    if ref.shape != w_hat.shape:
        raise DataError(f"reference shape {ref.shape} != model shape {w_hat.shape}")
    print(f"mse={mse(ref, w_hat):.6e} cosine={cosine_similarity(ref, w_hat):.8f}")
    if args.plot:
        from .plotting import plot_error_histogram

        plot_error_histogram(ref, w_hat, args.plot)
        print(f"wrote {args.plot}")
    return 0


def cmd_gemm_check(args) -> int:
    model = load_hlqp(args.model)
    rng = np.random.default_rng(args.seed)
    x = rng.standard_normal((args.batch, model.packed.k)).astype(np.float32)
    mp = model.mirrored_params()
    y = lut_gemm(model.packed, mp, x, args.table, threads=args.threads)
    ref = reference_gemm(model.dequantize(), x)
    max_abs = float(np.max(np.abs(y.astype(np.float64) - ref)))
    rel = relative_inf_error(y, ref)
    cos = cosine_similarity(y, ref)
    if args.table == "float":
        ok = rel <= args.tol
        detail = f"tol={args.tol:g}"
    else:
        y_float = lut_gemm(model.packed, mp, x, "float", threads=args.threads)
        bound = int8_error_bound(mp, x)
        ok = bool(np.all(np.abs(y.astype(np.float64) - y_float) <= bound)) and cos >= COSINE_MIN
        detail = f"int8-bound={float(bound.max()):.3e} cosine-min={COSINE_MIN}"
    print(f"max_abs={max_abs:.3e} rel_inf={rel:.3e} cosine={cos:.8f} {detail} "
          f"{'PASS' if ok else 'FAIL'}")
    return 0 if ok else 1


def cmd_finetune(args) -> int:
    model = load_hlqp(args.model)
    if model.mirrored:
        raise DataError("finetune expects a container with unmirrored (s, z) parameters")
    x = _matrix(args.calib, "calibration set")
    w = _matrix(args.reference, "reference")
    bits = model.bits()
    sample = LayerSample(x, w)
    hist: list[float] = []
    params = reconstruct_stage2(sample, bits, model.params,
                                TuneConfig(lr=args.lr, epochs=args.epochs, batch=args.batch), hist)
    out = args.out or args.model
    save_hlqp(out, QuantizedModel(model.packed, params, model.format))
    print(f"wrote {out}: output loss {hist[0]:.6e} -> {hist[-1]:.6e}")
    return 0


def cmd_bpw(args) -> int:
    print(f"{bpw(args.wbits, args.group, args.format):g}")
    return 0


def cmd_footprint(args) -> int:
    cfg = load_shape_config(args.shapes)
    total, rate = model_footprint(cfg, args.wbits, args.group, args.format)
    print(f"model={cfg.name} format={args.format} w{args.wbits}g{args.group} "
          f"bytes={total:.0f} GiB={total / (1 << 30):.3f} rate={rate:.2f}")
    return 0


def cmd_bench(args) -> int:
    shapes = [s for s in args.shapes.split(",") if s]
    for s in shapes:
        parse_shape(s)
    formats = [f for f in args.formats.split(",") if f]
    report = bench_gemm(shapes, args.wbits, args.table, args.threads, args.reps,
                        formats=formats, g=args.group, batch=args.batch, seed=args.seed)
    for r in report.rows:
        print(f"{r.shape:>12} q={r.q} {r.format:>7} {r.table_mode:>5} threads={r.threads} "
              f"{r.formatted_ms()} ms lookups={r.lookups}")
    if args.csv:
        report.write_csv(args.csv)
        print(f"wrote {args.csv}")
        if not args.no_plot:
            from .plotting import plot_bench

            fig = str(Path(args.csv).with_suffix(".png"))
            plot_bench(report, fig)
            print(f"wrote {fig}")
    return 0


def cmd_synth(args) -> int:
    m, k = parse_shape(args.shape)
    rng = np.random.default_rng(args.seed)
    write_raw(args.out, rng.normal(0.0, args.std, size=(m, k)).astype(np.float32))
    print(f"wrote {args.out}: shape {m}x{k}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hlqkit", description="HLQ weight quantization and LUT GEMM tools")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    q = sub.add_parser("quantize", help="quantize a raw float32 weight matrix")
    q.add_argument("--input", required=True)
    q.add_argument("--wbits", type=int, required=True)
    q.add_argument("--group", type=int, default=128)
    q.add_argument("--method", choices=METHODS, default="hlq-alt")
    q.add_argument("--calib")
    q.add_argument("--tmax", type=int, default=10)
    q.add_argument("--lr", type=float, default=QuantConfig.lr)
    q.add_argument("--block", type=int, default=128)
    q.add_argument("--layout", choices=("tiles", "planes"), default="tiles")
    q.add_argument("--out")
    q.add_argument("--seed", type=int, default=0)
    q.set_defaults(func=cmd_quantize)

    d = sub.add_parser("dequantize", help="expand a container back to raw float32")
    d.add_argument("--model", required=True)
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_dequantize)

    v = sub.add_parser("verify", help="compare a container against reference weights")
    v.add_argument("--model", required=True)
    v.add_argument("--reference", required=True)
    v.add_argument("--plot", help="write an error histogram to this image path")
    v.set_defaults(func=cmd_verify)

    gc = sub.add_parser("gemm-check", help="LUT GEMM against the dense reference")
    gc.add_argument("--model", required=True)
    gc.add_argument("--batch", type=int, default=1)
    gc.add_argument("--table", choices=("float", "int8"), default="float")
    gc.add_argument("--tol", type=float, default=GEMM_TOL)
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--threads", type=int, default=default_threads())
    gc.set_defaults(func=cmd_gemm_check)

    f = sub.add_parser("finetune", help="refine (s, z) on layer-output error with bits frozen")
    f.add_argument("--model", required=True)
    f.add_argument("--calib", required=True)
    f.add_argument("--reference", required=True)
    f.add_argument("--lr", type=float, default=1e-4)
    f.add_argument("--epochs", type=int, default=2)
    f.add_argument("--batch", type=int, default=32)
    f.add_argument("--out")
    f.set_defaults(func=cmd_finetune)

    b = sub.add_parser("bpw", help="bits per weight of a format")
    b.add_argument("--wbits", type=int, required=True)
    b.add_argument("--group", type=int, required=True)
    b.add_argument("--format", choices=("uniform", "hlq"), required=True)
    b.set_defaults(func=cmd_bpw)

    fp = sub.add_parser("footprint", help="model size and compression rate")
    fp.add_argument("--shapes", required=True, help="shape JSON path or built-in name (llama3.1-8b)")
    fp.add_argument("--wbits", type=int, required=True)
    fp.add_argument("--group", type=int, required=True)
    fp.add_argument("--format", choices=("uniform", "hlq"), required=True)
    fp.set_defaults(func=cmd_footprint)

    be = sub.add_parser("bench", help="time the LUT kernel; CSV plus a latency figure")
    be.add_argument("--shapes", default="11008x4096,4096x32000", help="comma list of NxK")
    be.add_argument("--wbits", type=_int_list, default=[2, 3])
    be.add_argument("--group", type=int, default=128)
    be.add_argument("--formats", default="uniform,hlq")
    be.add_argument("--table", choices=("float", "int8"), default="float")
    be.add_argument("--threads", type=int, default=default_threads())
    be.add_argument("--reps", type=int, default=10)
    be.add_argument("--batch", type=int, default=1)
    be.add_argument("--seed", type=int, default=0)
    be.add_argument("--csv")
    be.add_argument("--no-plot", action="store_true")
    be.set_defaults(func=cmd_bench)

    s = sub.add_parser("synth", help="write a reproducible Gaussian matrix")
    s.add_argument("--shape", required=True, help="MxK")
    s.add_argument("--std", type=float, default=0.02)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)
    return p


def cli_dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (HlqError, OSError) as exc:
        print(f"hlqkit {args.command}: error: {exc}", file=sys.stderr)
        return 1


def main():
    sys.exit(cli_dispatch())


if __name__ == "__main__":
    main()
