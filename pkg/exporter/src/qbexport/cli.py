"""qbound-export command line: export-model and export-dataset."""

import argparse
import sys

import torch

from .export import ExportConfig, ExportError, export_dataset, export_model


def _parse_shape(text):
    try:
        return tuple(int(tok) for tok in text.replace("x", ",").split(",") if tok)
    except ValueError as exc:
        raise ExportError(f"bad --input-shape {text!r}") from exc


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="qbound-export",
        description="Convert torch checkpoints/datasets to qbound formats",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("export-model")
    p.add_argument("--checkpoint", required=True, help="torch.save'd module")
    p.add_argument("--input-shape", required=True,
                   help="e.g. 784 or 3x32x32 (channels first)")
    p.add_argument("--bn", choices=("fold", "strip"), default="fold")
    p.add_argument("--entry", default=None,
                   help="key/attribute path to the module inside the checkpoint")
    p.add_argument("--D", dest="domain", type=float, default=1.0)
    p.add_argument("--out-dir", default=".")

    p = sub.add_parser("export-dataset")
    p.add_argument("--source", required=True,
                   help="torch.save'd dataset, tensor pair, or tensor")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--duplicate-channels", action="store_true")

    args = parser.parse_args(argv)
    try:
        if args.command == "export-model":
            cfg = ExportConfig(
                checkpoint=args.checkpoint,
                input_shape=_parse_shape(args.input_shape),
                bn_handling=args.bn,
                out_dir=args.out_dir,
                domain_d=args.domain,
                entry=args.entry,
            )
            manifest, blob = export_model(cfg)
            print(f"wrote {manifest} and {blob}")
        else:
            source = torch.load(args.source, map_location="cpu",
                                weights_only=False)
            if isinstance(source, (tuple, list)) and len(source) == 2 and \
                    torch.is_tensor(source[0]):
                xs, ys = source
                source = [(xs[i], int(ys[i])) for i in range(len(xs))]
            export_dataset(source, args.count, args.out,
                           duplicate_channels=args.duplicate_channels)
            print(f"wrote {args.out}")
        return 0
    except (ExportError, OSError) as exc:
        sys.stderr.write(f"qbound-export: {exc}\n")
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
