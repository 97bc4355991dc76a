#!/usr/bin/env python3
"""Generate a deterministic random-weight model fixture.

    python3 fixtures.py --variant rn18 --seed 7

The same flags always produce byte-identical output, so fixture files
can be committed and regenerated at will.
"""

import argparse
import json
import sys

from levnet_exporter import ExportError, make_fixture
from levnet_exporter.topology import VARIANTS


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--variant", required=True, choices=sorted(VARIANTS))
    parser.add_argument("--seed", type=int, required=True)
    parser.add_argument("--out", default=None,
                        help="Output path (default: <variant>.json).")
    parser.add_argument("--act", default="poly2", choices=("poly2", "poly4"))
    parser.add_argument("--input-hw", type=int, default=None,
                        help="Spatial input size; defaults to the variant's "
                             "native resolution.")
    parser.add_argument("--base-width", type=int, default=4,
                        help="Channel count of the first stage.")
    parser.add_argument("--classes", type=int, default=4)
    args = parser.parse_args(argv)

    out = args.out or f"{args.variant}.json"
    try:
        manifest = make_fixture(args.variant, args.seed, out, act=args.act,
                                input_hw=args.input_hw,
                                base_width=args.base_width,
                                classes=args.classes)
    except ExportError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    print(json.dumps(manifest.to_json(), indent=2))
    return 0


if __name__ == "__main__":
    sys.exit(main())
