"""The `encode` command: raw JSON Lines to MMQF stores plus manifest."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .backends import EncoderSetupError
from .pipeline import RawRecordError, build_dataset


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="encode",
        description="Encode raw question/source records into feature stores "
        "and a manifest for the retrieval engine",
    )
    parser.add_argument("--raw", required=True, type=Path, help="raw JSON Lines input")
    parser.add_argument("--out", required=True, type=Path, help="output directory")
    parser.add_argument("--text-model", default="hash768",
                        help="text backend: hash768 or sbert:<name> (default: hash768)")
    parser.add_argument("--image-model", default="resnet152-random",
                        help="image backend: resnet152-random or resnet152 "
                        "(default: resnet152-random)")
    parser.add_argument("--batch-size", type=int, default=8,
                        help="image encoding batch size (default: 8)")
    parser.add_argument("--seed", type=int, default=0,
                        help="seed for the offline deterministic backends (default: 0)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    print(f"config: {json.dumps({k: str(v) for k, v in sorted(vars(args).items())})}",
          file=sys.stderr)
    try:
        result = build_dataset(
            args.raw, args.out,
            text_model=args.text_model,
            image_model=args.image_model,
            batch_size=args.batch_size,
            seed=args.seed,
        )
    except RawRecordError as exc:
        print(json.dumps({"code": "raw_input", "message": str(exc)}), file=sys.stderr)
        return 2
    except EncoderSetupError as exc:
        print(json.dumps({"code": "encoder_setup", "message": str(exc)}), file=sys.stderr)
        return 2
    print(json.dumps({
        "manifest": str(result.manifest),
        "stores": [str(p) for p in result.stores],
        "metadata": str(result.metadata),
        "report": str(result.report),
        "questions_written": result.questions_written,
        "questions_dropped": result.questions_dropped,
    }))
    return 0


if __name__ == "__main__":
    sys.exit(main())
