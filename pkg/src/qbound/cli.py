"""Command-line surface: norms, bounds, quantize, eval, report.

Every command emits plot-ready CSV (default) or JSON rows.  Output is
byte-stable across runs with identical configs and seeds.  Log10 columns
are always present; linear columns go blank once a value passes 1e300.
QBOUND_THREADS caps the worker pool for bit-width sweeps.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import bounds as bnd
from . import infer, quantize
from .model import ManifestError, ValidationError, load_dataset, load_model, save_model
from .norms import merge_profiles, profile_of

BOUND_COLUMNS = (
    "bound_max_norm",
    "bound_path_norm",
    "bound_mean_norm",
    "bound_no_bias",
    "bound_conv",
)


class CliError(Exception):
    pass


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _emit(rows, columns, fmt, out_path):
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(row.get(c)) for c in columns])
        text = buf.getvalue()
    else:
        text = json.dumps(rows, indent=2, sort_keys=True) + "\n"
    if out_path:
        with open(out_path, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _load(args):
    try:
        spec, weights, quant_meta = load_model(args.model, args.weights)
    except (ManifestError, ValidationError, OSError) as exc:
        if isinstance(exc, ValidationError):
            raise CliError(
                "model failed validation:\n  " + "\n  ".join(exc.violations)
            ) from exc
        raise CliError(f"cannot load model: {exc}") from exc
    if args.domain is not None:
        spec = dataclasses.replace(spec, domain_d=args.domain)
    return spec, weights, quant_meta


def _workers() -> int:
    env = os.environ.get("QBOUND_THREADS")
    if env:
        return max(1, int(env))
    return min(8, os.cpu_count() or 1)


def _parse_bits(text) -> list[int]:
    try:
        bits = sorted({int(tok) for tok in text.split(",") if tok.strip()})
    except ValueError as exc:
        raise CliError(f"bad --bits list {text!r}") from exc
    if not bits or min(bits) < 1:
        raise CliError("--bits needs integers >= 1")
    return bits


# ---------------------------------------------------------------------------


def cmd_norms(args):
    spec, weights, _ = _load(args)
    profile = profile_of(spec, weights)
    rows = []
    for i, s in enumerate(profile.stages, start=1):
        rows.append(
            {
                "stage": i,
                "kind": s.kind,
                "r": s.r,
                "exact": int(s.exact),
                "width_in": s.width_in,
                "sparse_width": s.sparse_width,
                "kernel": s.conv[0] if s.conv else None,
                "in_channels": s.conv[1] if s.conv else None,
            }
        )
    summary = {
        "stage": "summary",
        "kind": "bias-augmented norms" if profile.has_bias else "bias-free norms",
        "r": bnd.r_max(profile),
        "exact": int(all(s.exact for s in profile.stages)),
        "width_in": max(profile.widths_in),
        "sparse_width": max(
            (s.sparse_width for s in profile.stages if s.sparse_width), default=None
        ),
        "r_mean": bnd.r_mean(profile),
        "r_conv": None if profile.has_bias else bnd.r_conv(profile),
        "depth": profile.depth,
    }
    rows.append(summary)
    columns = [
        "stage", "kind", "r", "exact", "width_in", "sparse_width",
        "kernel", "in_channels", "r_mean", "r_conv", "depth",
    ]
    _emit(rows, columns, args.format, args.out)
    return 0


def _bounds_row(spec, weights, cfg, calib, estimate, samples, seed,
                qweights=None, row_label=None, decompose=False):
    if qweights is None:
        qweights, dtheta, _ = quantize.quantize_network(spec, weights, cfg, calib)
    else:
        from .model import weight_tensor_names

        dtheta = max(
            (
                float(np.abs(np.asarray(weights[n]) - np.asarray(qweights[n])).max())
                for n in weight_tensor_names(spec)
            ),
            default=0.0,
        )
    shared = merge_profiles(
        profile_of(spec, weights), profile_of(spec, qweights)
    )
    terms = None
    if decompose:
        terms, _ = bnd.layerwise_decomposition(
            spec, weights, qweights, x_norm=spec.domain_d
        )
    report = bnd.build_report(shared, dtheta, per_layer_terms=terms)
    row = {
        "bits": cfg.bits if row_label is None else row_label,
        "mode": cfg.mode,
        "dtheta_inf": dtheta,
        "r_max": report.r_max,
        "r_mean": report.r_mean,
        "r_conv": report.r_conv,
        "applicable": report.applicable,
    }
    flags = list(report.flags)
    for name in BOUND_COLUMNS:
        value = report.bounds.get(name)
        row[f"log10_{name}"] = None if value is None else value.log10
        row[name] = None if value is None else value.linear
        if value is not None:
            # the l1 note is a column property, not a row condition
            flags.extend(
                f for f in value.flags if f not in flags and f != bnd.FLAG_L1
            )
    if dtheta == 0.0:
        row["ratio_log10"] = None
        flags.append("dtheta = 0: ratio undefined")
    else:
        row["ratio_log10"] = bnd.ratio_log10(report)
    if decompose:
        row["decomposition_total"] = report.decomposition_total
        row["per_layer_terms"] = ";".join(repr(t) for t in report.per_layer_terms)
    if estimate:
        sampler = infer.Sampler(
            domain_d=spec.domain_d,
            input_shape=tuple(spec.input_shape),
            seed=seed,
            count=samples,
        )
        err, _ = infer.empirical_sup_error(spec, weights, qweights, sampler)
        row["empirical_sup_error"] = err
        row["samples"] = samples
    row["flags"] = ";".join(flags)
    return row


def cmd_bounds(args):
    spec, weights, _ = _load(args)
    if args.cle:
        weights = quantize.cle_network(spec, weights)

    if args.quantized_model:
        if not args.quantized_weights:
            raise CliError("--quantized-model needs --quantized-weights")
        qspec, qweights, qmeta = load_model(
            args.quantized_model, args.quantized_weights
        )
        if [l.kind for l in qspec.layers] != [l.kind for l in spec.layers]:
            raise CliError("quantized model architecture does not match")
        meta = qmeta or {}
        cfg = quantize.QuantConfig(
            bits=int(meta.get("bits", 32)), mode=meta.get("mode", "round")
        )
        rows = [
            _bounds_row(
                spec, weights, cfg, None, args.estimate, args.samples,
                args.seed, qweights=qweights, row_label=meta.get("bits"),
                decompose=args.decompose,
            )
        ]
    else:
        bits = _parse_bits(args.bits)
        calib = None
        if args.mode == "adaround":
            calib = _calibration_inputs(args, spec)

        def job(n):
            cfg = quantize.QuantConfig(bits=n, mode=args.mode, seed=args.seed)
            return _bounds_row(
                spec, weights, cfg, calib, args.estimate, args.samples,
                args.seed, decompose=args.decompose,
            )

        with ThreadPoolExecutor(max_workers=_workers()) as pool:
            rows = list(pool.map(job, bits))  # ascending-n order preserved

    columns = [
        "bits", "mode", "dtheta_inf", "r_max", "r_mean", "r_conv", "applicable",
    ]
    for name in BOUND_COLUMNS:
        columns += [f"log10_{name}", name]
    columns += ["ratio_log10"]
    if args.decompose:
        columns += ["decomposition_total", "per_layer_terms"]
    if args.estimate:
        columns += ["empirical_sup_error", "samples"]
    columns += ["flags"]
    _emit(rows, columns, args.format, args.out)
    return 0


def _calibration_inputs(args, spec):
    if args.dataset:
        return load_dataset(args.dataset).inputs
    sampler = infer.Sampler(
        domain_d=spec.domain_d,
        input_shape=tuple(spec.input_shape),
        seed=args.seed,
        count=256,
    )
    return sampler.samples()


def cmd_quantize(args):
    spec, weights, _ = _load(args)
    if args.cle:
        weights = quantize.cle_network(spec, weights)
    bits = _parse_bits(args.bits)
    if len(bits) != 1:
        raise CliError("quantize writes one model; give exactly one --bits value")
    cfg = quantize.QuantConfig(bits=bits[0], mode=args.mode, seed=args.seed)
    calib = _calibration_inputs(args, spec) if args.mode == "adaround" else None
    qweights, dtheta, etas = quantize.quantize_network(spec, weights, cfg, calib)
    meta = {
        "bits": cfg.bits,
        "mode": cfg.mode,
        "dtheta_inf": dtheta,
        "eta": {k: etas[k] for k in sorted(etas)},
        "cle": bool(args.cle),
        "seed": args.seed,
    }
    if cfg.mode == "adaround":
        meta["adaround"] = {
            "calib_count": cfg.adaround.calib_count,
            "steps": cfg.adaround.steps,
            "learning_rate": cfg.adaround.learning_rate,
            "lambda": cfg.adaround.lam,
        }
    out_manifest = args.out or "quantized.json"
    out_blob = args.out_weights or (
        out_manifest[: -len(".json")] + ".bin"
        if out_manifest.endswith(".json")
        else out_manifest + ".bin"
    )
    save_model(spec, qweights, out_manifest, out_blob, quantization=meta)
    sys.stdout.write(
        f"wrote {out_manifest} and {out_blob} (dtheta_inf={dtheta!r})\n"
    )
    return 0


def cmd_eval(args):
    spec, weights, _ = _load(args)
    if not args.dataset:
        raise CliError("eval needs --dataset")
    ds = load_dataset(args.dataset)
    if ds.labels is None:
        raise CliError("dataset has no labels")
    acc = infer.accuracy(spec, weights, ds)
    _emit(
        [{"count": ds.count, "accuracy": acc}],
        ["count", "accuracy"],
        args.format,
        args.out,
    )
    return 0


def cmd_report(args):
    spec, weights, _ = _load(args)
    if args.cle:
        weights = quantize.cle_network(spec, weights)
    bits = _parse_bits(args.bits)
    ds = None
    if args.dataset:
        ds = load_dataset(args.dataset)
    calib = None
    if args.mode == "adaround":
        calib = ds.inputs if ds is not None else _calibration_inputs(args, spec)
    base_profile = profile_of(spec, weights)

    def job(n):
        cfg = quantize.QuantConfig(bits=n, mode=args.mode, seed=args.seed)
        row = _bounds_row(
            spec, weights, cfg, calib, args.estimate, args.samples, args.seed
        )
        row["depth"] = base_profile.depth
        if ds is not None and ds.labels is not None:
            qweights, _, _ = quantize.quantize_network(spec, weights, cfg, calib)
            row["accuracy"] = infer.accuracy(spec, qweights, ds)
            row["accuracy_fp"] = infer.accuracy(spec, weights, ds)
        return row

    with ThreadPoolExecutor(max_workers=_workers()) as pool:
        rows = list(pool.map(job, bits))

    columns = [
        "bits", "mode", "depth", "dtheta_inf", "r_max", "r_mean", "r_conv",
        "applicable",
    ]
    for name in BOUND_COLUMNS:
        columns += [f"log10_{name}", name]
    columns += ["ratio_log10"]
    if args.estimate:
        columns += ["empirical_sup_error", "samples"]
    if ds is not None and ds.labels is not None:
        columns += ["accuracy", "accuracy_fp"]
    columns += ["flags"]
    _emit(rows, columns, args.format, args.out)
    return 0


# ---------------------------------------------------------------------------


def _add_common(p, need_model=True):
    if need_model:
        p.add_argument("--model", required=True, help="model.json manifest")
        p.add_argument("--weights", required=True, help="weights.bin blob")
    p.add_argument("--D", dest="domain", type=float, default=None,
                   help="override the input box half-width")
    p.add_argument("--out", default=None, help="output path (default stdout)")
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="qbound",
        description="Certified worst-case output error of weight-quantized networks",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("norms", help="per-stage operator norms")
    _add_common(p)
    p.set_defaults(fn=cmd_norms)

    p = sub.add_parser("bounds", help="certified bounds across bit widths")
    _add_common(p)
    p.add_argument("--bits", default="4,8,12,16,20,24")
    p.add_argument("--mode", choices=("floor", "round", "adaround"), default="round")
    p.add_argument("--quantized-model", default=None,
                   help="compare against an existing quantized manifest "
                        "instead of quantizing in-process")
    p.add_argument("--quantized-weights", default=None)
    p.add_argument("--dataset", default=None, help="calibration data for adaround")
    p.add_argument("--estimate", action="store_true",
                   help="also sample an empirical deviation estimate")
    p.add_argument("--samples", type=int, default=128)
    p.add_argument("--decompose", action="store_true",
                   help="emit the per-stage telescoping terms")
    p.add_argument("--cle", action="store_true",
                   help="cross-layer equalize before quantizing")
    p.set_defaults(fn=cmd_bounds)

    p = sub.add_parser("quantize", help="write a quantized model")
    _add_common(p)
    p.add_argument("--bits", required=True)
    p.add_argument("--mode", choices=("floor", "round", "adaround"), default="round")
    p.add_argument("--dataset", default=None)
    p.add_argument("--cle", action="store_true")
    p.add_argument("--out-weights", default=None, help="output blob path")
    p.set_defaults(fn=cmd_quantize)

    p = sub.add_parser("eval", help="top-1 accuracy on a dataset")
    _add_common(p)
    p.add_argument("--dataset", required=False, default=None)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("report", help="norms+bounds+accuracy per bit width")
    _add_common(p)
    p.add_argument("--bits", default="4,8,12,16,20,24")
    p.add_argument("--mode", choices=("floor", "round", "adaround"), default="round")
    p.add_argument("--dataset", default=None)
    p.add_argument("--estimate", action="store_true")
    p.add_argument("--samples", type=int, default=128)
    p.add_argument("--cle", action="store_true")
    p.set_defaults(fn=cmd_report)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except CliError as exc:
        sys.stderr.write(f"qbound: {exc}\n")
        return 2
    except (ManifestError, ValidationError, ValueError, OSError) as exc:
        sys.stderr.write(f"qbound: {exc}\n")
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
