#!/usr/bin/env python3
"""Export a trained checkpoint to the neutral model format.

    python3 export.py --ckpt resnet20.pt --variant rn20 --out model.json

Prints the export manifest (checkpoint, variant, activation coefficient
source, output path, weight-blob sha256) as JSON on success.
"""

import argparse
import json
import sys

from levnet_exporter import ExportError, export_checkpoint
from levnet_exporter.topology import VARIANTS


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--ckpt", required=True,
                        help="Checkpoint file: a torch state dict or an .npz "
                             "archive with the same key names.")
    parser.add_argument("--variant", required=True, choices=sorted(VARIANTS))
    parser.add_argument("--out", required=True, help="Neutral model JSON to write.")
    parser.add_argument("--coeffs", default=None,
                        help="Fitted-activation report (levnet fit-poly --out) "
                             "to take coefficients from when the checkpoint "
                             "embeds none.")
    parser.add_argument("--act", default="poly2", choices=("poly2", "poly4"),
                        help="Activation degree to fit when neither the "
                             "checkpoint nor --coeffs provides coefficients.")
    parser.add_argument("--input-hw", type=int, default=None,
                        help="Spatial input size; defaults to the variant's "
                             "native resolution.")
    parser.add_argument("--manifest", default=None,
                        help="Also write the manifest JSON to this path.")
    args = parser.parse_args(argv)

    try:
        manifest = export_checkpoint(args.ckpt, args.variant, args.out,
                                     coeffs_file=args.coeffs, act=args.act,
                                     input_hw=args.input_hw)
    except ExportError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    text = json.dumps(manifest.to_json(), indent=2)
    if args.manifest:
        with open(args.manifest, "w") as f:
            f.write(text + "\n")
    print(text)
    return 0


if __name__ == "__main__":
    sys.exit(main())
