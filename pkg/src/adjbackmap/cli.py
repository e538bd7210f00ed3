"""Command-line interface.

Every subcommand prints a short summary to stdout. Domain and file
errors print one line ``error[<code>]: <message>`` to stderr and exit 1.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import modelio as io
from . import tensor as T
from .adjoint import DEFAULT_K, MODES, EvalPoint, Linearization, mode_sum_check, reconstruct
from .errors import AdjointError, ModelError
from .fold import extended_input, extract_bias_vector
from .graph import forward, forward_raw
from .verify import VerificationReport, default_layers, oracle_dense_check, verify_model, write_table


def _layer_arg(text: str):
    return "fc" if text.lower() == "fc" else int(text)


def _load_equivalent(path, dtype=None):
    """Equivalent model plus bias vector; raw manifests are folded on the fly."""
    model = io.load_model(path)
    if dtype:
        model = io.cast_model(model, dtype)
    if model.form == "raw":
        eq, _, x_b = extract_bias_vector(model)
        return eq, x_b
    x_b = io.load_bias_vector(path)
    if x_b is None:
        raise ModelError(f"{path}: equivalent manifest names no bias vector file")
    return model, x_b.astype(model.dtype)


def _inputs(args, model):
    if args.input:
        imgs = io.load_images(args.input).astype(model.dtype)
    else:
        imgs = io.gen_inputs(model.input_shape, args.samples, args.seed, T.DTYPE_NAMES[model.dtype])
    if imgs.shape[1:] != model.input_shape:
        raise ModelError(f"input images are {imgs.shape[1:]}, model expects {model.input_shape}")
    return imgs


# ---------------------------------------------------------------------------
# Subcommands


def cmd_gen_model(args) -> int:
    model = io.gen_random_model(args.template, args.seed, args.dtype or "f64")
    out = io.save_model(model, args.out)
    print(f"wrote {out} ({model.name}, {len(model.layers)} layers, {model.n_conv} conv, dtype {T.DTYPE_NAMES[model.dtype]})")
    return 0


def cmd_gen_input(args) -> int:
    if args.model:
        shape = io.load_model(args.model).input_shape
    elif args.shape:
        shape = tuple(int(v) for v in args.shape.split(","))
    else:
        raise ModelError("gen-input needs --model or --shape")
    imgs = io.gen_inputs(shape, args.samples, args.seed, args.dtype or "f64")
    T.save_tensor(args.out, imgs)
    print(f"wrote {args.out} shape {imgs.shape}")
    return 0


def cmd_fold(args) -> int:
    path = args.model or args.manifest
    if not path:
        raise ModelError("fold needs a raw model manifest")
    raw = io.load_model(path)
    if args.dtype:
        raw = io.cast_model(raw, args.dtype)
    eq, layout, x_b = extract_bias_vector(raw)
    out = args.out or str(Path(path).with_name(Path(path).stem + ".eq.json"))
    io.save_model(eq, out, x_b)
    print(f"wrote {out} (M={eq.n_bias}, d_in={eq.d_in}, {len(layout)} bias slices)")
    return 0


def cmd_forward(args) -> int:
    model = io.load_model(args.model)
    if args.dtype:
        model = io.cast_model(model, args.dtype)
    imgs = _inputs(args, model)
    if model.form == "raw":
        outs = [forward_raw(model, im).output for im in imgs]
    else:
        _, x_b = _load_equivalent(args.model, args.dtype)
        outs = [forward(model, extended_input(model, im, x_b)).output for im in imgs]
    outs = np.stack(outs)
    if args.out:
        T.save_tensor(args.out, outs)
    flat = outs.reshape(len(outs), -1)
    for n, row in enumerate(flat):
        print(f"sample {n} argmax {int(np.argmax(row))}")
    return 0


def cmd_reconstruct(args) -> int:
    if args.mode is None or args.layer is None:
        raise ModelError("reconstruct needs --mode and --layer")
    model, x_b = _load_equivalent(args.model, args.dtype)
    imgs = _inputs(args, model)
    x = extended_input(model, imgs[args.sample], x_b)
    h = reconstruct(
        model, EvalPoint(x, args.k), args.mode, args.layer,
        out_ch=args.out_ch, stride_idx=args.stride_idx, in_ch=args.in_ch, cls=args.cls,
        threads=args.threads,
    )
    stacked = h.stacked()
    if args.out:
        T.save_tensor(args.out, stacked)
    axes = ", ".join(("d_in",) + h.axes)
    print(f"{args.mode} layer {args.layer}: shape {stacked.shape} ({axes}); d_in = {model.d_in - model.n_bias}+{model.n_bias}")
    return 0


def cmd_verify(args) -> int:
    model, x_b = _load_equivalent(args.model, args.dtype)
    imgs = _inputs(args, model)
    xs = [extended_input(model, im, x_b) for im in imgs]
    rep = verify_model(model, xs, args.k, threads=args.threads)
    paths = rep.write(args.out or ".", args.hist_dir)
    for s in rep.layers:
        print(f"{s.layer_id}: units={s.count_total} within1%={s.pct_within_1pct:.4f}% max|eps|={s.max_abs:.3e}")
    print(f"max|eps|={rep.max_abs:.3e} kinks={rep.kinks} ties={rep.ties} -> {', '.join(map(str, paths[:2]))}")
    return 0


def cmd_report(args) -> int:
    paths = list(args.reports) + ([args.input] if args.input else [])
    if not paths:
        raise ModelError("report needs one or more report.json files")
    reports = [VerificationReport.from_json(json.loads(Path(p).read_text())) for p in paths]
    out = Path(args.out or "table.csv")
    write_table(out, reports)
    print(out.read_text(), end="")
    return 0


def selftest_checks(threads: int = 1):
    """(name, value, bound) for the built-in oracle suite."""
    results = []
    for name in ("toy2", "toy4", "toy-res", "vgg-mini"):
        raw = io.gen_random_model(name, 11)
        eq, _, x_b = extract_bias_vector(raw)
        imgs = io.gen_inputs(raw.input_shape, 4, 12)
        fold_dev = max(
            float(np.abs(forward_raw(raw, im).output - forward(eq, extended_input(eq, im, x_b)).output).max()) for im in imgs
        )
        results.append((f"{name} fold equivalence", fold_dev, 1e-12))
        xs = [extended_input(eq, im, x_b) for im in imgs]
        rep = verify_model(eq, xs, DEFAULT_K, threads=threads)
        results.append((f"{name} identity max|eps|", rep.max_abs, 1e-9))
        x = xs[0]
        dev = max(oracle_dense_check(eq, x, l) for l in default_layers(eq))
        results.append((f"{name} dense oracle", dev, 1e-12))
        lin = Linearization.at(eq, EvalPoint(x))
        h4 = reconstruct(eq, EvalPoint(x), "rm4", 1, lin=lin)
        sums = mode_sum_check(h4)
        h1 = reconstruct(eq, EvalPoint(x), "rm1", 1, lin=lin, method="seed")
        scale = float(np.abs(h1.stacked()).max()) or 1.0
        gap = max(float(np.abs(sums[key].stacked() - h1.stacked()).max()) for key in ("rm1_from_rm3", "rm1_from_rm2"))
        results.append((f"{name} mode sums", gap / scale, 1e-12))
    return results


def cmd_selftest(args) -> int:
    failed = 0
    for name, value, bound in selftest_checks(args.threads):
        ok = value <= bound
        failed += not ok
        print(f"{'PASS' if ok else 'FAIL'} {name}: {value:.3e} (bound {bound:.0e})")
    print("selftest " + ("passed" if not failed else f"failed ({failed})"))
    return 1 if failed else 0


# ---------------------------------------------------------------------------


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="adjbackmap", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, model=True, inputs=False):
        if model:
            sp.add_argument("--model", help="model manifest (.json)")
        sp.add_argument("--dtype", choices=("f32", "f64"), help="override the model's working precision")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--threads", type=int, default=1)
        sp.add_argument("--out")
        if inputs:
            sp.add_argument("--input", help="image tensor (.abm, HxWxC or NxHxWxC) or 8-bit PPM")
            sp.add_argument("--samples", type=int, default=1, help="random inputs when --input is absent")

    sp = sub.add_parser("gen-model", help="random raw model from an architecture template")
    sp.add_argument("--template", required=True)
    common(sp, model=False)
    sp.set_defaults(func=cmd_gen_model, out_default="model.json")

    sp = sub.add_parser("gen-input", help="random images with pixels in [0, 1]")
    common(sp)
    sp.add_argument("--shape", help="H,W,C when no --model is given")
    sp.add_argument("--samples", type=int, default=1)
    sp.set_defaults(func=cmd_gen_input, out_default="input.abm")

    sp = sub.add_parser("fold", help="fold batch norm / multipliers and extract the bias vector")
    sp.add_argument("manifest", nargs="?")
    common(sp)
    sp.set_defaults(func=cmd_fold)

    sp = sub.add_parser("forward", help="run a raw or equivalent model")
    common(sp, inputs=True)
    sp.set_defaults(func=cmd_forward)

    sp = sub.add_parser("reconstruct", help="effective hypersurface for one layer and mode")
    common(sp, inputs=True)
    sp.add_argument("--mode", choices=MODES)
    sp.add_argument("--layer", type=_layer_arg, help="conv index >= 1, or 'fc'")
    sp.add_argument("--out-ch", type=int)
    sp.add_argument("--stride-idx", type=int)
    sp.add_argument("--in-ch", type=int)
    sp.add_argument("--class", dest="cls", type=int)
    sp.add_argument("--k", type=float, default=DEFAULT_K)
    sp.add_argument("--sample", type=int, default=0, help="which image of --input to use")
    sp.set_defaults(func=cmd_reconstruct)

    sp = sub.add_parser("verify", help="relative errors of reconstructed activations")
    common(sp, inputs=True)
    sp.add_argument("--k", type=float, default=DEFAULT_K)
    sp.add_argument("--hist-dir")
    sp.set_defaults(func=cmd_verify)

    sp = sub.add_parser("report", help="combine report.json files into one percentage table")
    sp.add_argument("reports", nargs="*")
    sp.add_argument("--input")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_report)

    sp = sub.add_parser("selftest", help="oracle checks on the built-in toy models")
    sp.add_argument("--threads", type=int, default=1)
    sp.set_defaults(func=cmd_selftest)
    return p


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"error[usage]: {_one_line(e)}", file=sys.stderr)
        return 1
    except SystemExit as e:  # --help
        return 1 if e.code else 0
    if getattr(args, "out", None) is None and getattr(args, "out_default", None):
        args.out = args.out_default
    try:
        return args.func(args)
    except AdjointError as e:
        print(f"error[{e.code}]: {_one_line(e)}", file=sys.stderr)
    except (OSError, json.JSONDecodeError) as e:
        print(f"error[io]: {_one_line(e)}", file=sys.stderr)
    return 1


def _one_line(e: Exception) -> str:
    return " ".join(str(e).split())


def main() -> None:
    sys.exit(run())
